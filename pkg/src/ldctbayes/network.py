"""Encoder-decoder with skip blocks and element-wise dropout sites.

Level ``i`` (1-based) works at resolution ``H / 2**(i-1)``:

* ``D_i``: conv -> maxpool (i >= 2) -> BN -> lReLU -> conv -> BN -> lReLU
* ``S_i``: dropout -> 1x1 conv -> lReLU, applied to the output of ``D_i``
* ``U_i``: BN -> conv -> BN -> lReLU -> conv -> BN -> lReLU -> upsample (i >= 2)

``U_i`` consumes the concatenation of ``S_i`` and the deeper decoder output
(``D_N`` at the bottom). A 1x1 conv maps ``U_1`` to a single channel with no
output nonlinearity. Dropout sites also exist before every conv of ``D_i``
and ``U_i``; they are inactive at the default probabilities of zero.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _per_level(value, depth: int, name: str) -> tuple:
    if np.isscalar(value):
        return (value,) * depth
    value = tuple(value)
    if len(value) != depth:
        raise ValueError(f"{name} has {len(value)} entries, expected depth={depth}")
    return value


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 5
    c_d: tuple | int = 128
    c_u: tuple | int = 128
    c_s: tuple | int = 4
    k_d: int = 3
    k_u: int = 3
    k_s: int = 1
    k_u2: int = 1
    p_d: tuple | float = 0.0
    p_u: tuple | float = 0.0
    p_s: tuple | float = 0.3
    leaky_slope: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        for name in ("c_d", "c_u", "c_s", "p_d", "p_u", "p_s"):
            object.__setattr__(self, name, _per_level(getattr(self, name), self.depth, name))
        if any(c < 1 for c in self.c_d + self.c_u) or any(c < 0 for c in self.c_s):
            raise ValueError("filter counts must be >= 1 (skip filters >= 0)")
        for k in (self.k_d, self.k_u, self.k_s, self.k_u2):
            if k < 1 or k % 2 == 0:
                raise ValueError("kernel sizes must be odd and >= 1")
        for p in self.p_d + self.p_u + self.p_s:
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)

    def dropout_sites(self, shape: tuple[int, int]) -> "OrderedDict[str, tuple[tuple, float]]":
        """Site name -> (mask shape, drop probability) for an ``H x W`` input."""
        h, w = shape
        sites = OrderedDict()
        in_ch = 1
        for i in range(1, self.depth + 1):
            lv = i - 1
            hi, wi = h >> (i - 1), w >> (i - 1)
            hin, win = (h, w) if i == 1 else (hi * 2, wi * 2)
            sites[f"d{i}.drop1"] = ((in_ch, hin, win), self.p_d[lv])
            sites[f"d{i}.drop2"] = ((self.c_d[lv], hi, wi), self.p_d[lv])
            if self.c_s[lv]:
                sites[f"s{i}.drop"] = ((self.c_d[lv], hi, wi), self.p_s[lv])
            deeper = self.c_d[lv] if i == self.depth else self.c_u[lv + 1]
            sites[f"u{i}.drop1"] = ((self.c_s[lv] + deeper, hi, wi), self.p_u[lv])
            sites[f"u{i}.drop2"] = ((self.c_u[lv], hi, wi), self.p_u[lv])
            in_ch = self.c_d[lv]
        return sites


@dataclass
class DropoutMask:
    """Binary masks per active dropout site, with their keep probabilities."""

    masks: dict = field(default_factory=dict)
    keep: dict = field(default_factory=dict)


# Sentinel: every unit kept, no rescaling (the expectation path).
ALL_KEEP = None


class WeightSet(OrderedDict):
    """Named parameter tensors (the distribution means of the weights)."""

    def params(self) -> list[Tensor]:
        return list(self.values())

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def copy(self) -> "WeightSet":
        return WeightSet((k, Tensor(v.data.copy(), True)) for k, v in self.items())


def _he(rng, shape, slope, dtype):
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / ((1.0 + slope**2) * fan_in))
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), True)


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> WeightSet:
    """He-initialised weights for ``spec`` (BN scale 1, shifts and biases 0)."""
    rng = np.random.default_rng(seed)
    ws = WeightSet()
    a = spec.leaky_slope

    def bn(name, c):
        ws[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), True)
        ws[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), True)

    in_ch = 1
    for i in range(1, spec.depth + 1):
        lv = i - 1
        cd, cu, cs = spec.c_d[lv], spec.c_u[lv], spec.c_s[lv]
        ws[f"d{i}.conv1.w"] = _he(rng, (cd, in_ch, spec.k_d, spec.k_d), a, dtype)
        bn(f"d{i}.bn1", cd)
        ws[f"d{i}.conv2.w"] = _he(rng, (cd, cd, spec.k_d, spec.k_d), a, dtype)
        bn(f"d{i}.bn2", cd)
        if cs:
            ws[f"s{i}.conv.w"] = _he(rng, (cs, cd, spec.k_s, spec.k_s), a, dtype)
            ws[f"s{i}.conv.b"] = Tensor(np.zeros(cs, dtype=dtype), True)
        deeper = cd if i == spec.depth else spec.c_u[lv + 1]
        bn(f"u{i}.bn0", cs + deeper)
        ws[f"u{i}.conv1.w"] = _he(rng, (cu, cs + deeper, spec.k_u, spec.k_u), a, dtype)
        bn(f"u{i}.bn1", cu)
        ws[f"u{i}.conv2.w"] = _he(rng, (cu, cu, spec.k_u2, spec.k_u2), a, dtype)
        bn(f"u{i}.bn2", cu)
        in_ch = cd
    ws["out.conv.w"] = _he(rng, (1, spec.c_u[0], 1, 1), 1.0, dtype)
    ws["out.conv.b"] = Tensor(np.zeros(1, dtype=dtype), True)
    return ws


def sample_mask(spec: NetworkSpec, shape: tuple[int, int], seed: int, draw_index: int) -> DropoutMask:
    """Element-wise Bernoulli keep-masks for every site with a nonzero drop rate.

    Deterministic in ``(seed, draw_index)``.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(draw_index)])))
    out = DropoutMask()
    for name, (site_shape, p) in spec.dropout_sites(shape).items():
        if p > 0:
            keep = 1.0 - p
            out.masks[name] = (rng.random(site_shape) < keep).astype(np.uint8)
            out.keep[name] = keep
    return out


def _drop(x: Tensor, mask: DropoutMask | None, name: str) -> Tensor:
    if mask is None or name not in mask.masks:
        return x
    return ad.dropout_apply(x, mask.masks[name], mask.keep[name])


def forward(weights: WeightSet, spec: NetworkSpec, x0, mask: DropoutMask | None = ALL_KEEP) -> Tensor:
    """Network output ``f(x0; mu * b)`` as a ``(1, H, W)`` tensor."""
    x = np.asarray(getattr(x0, "values", getattr(x0, "data", x0)))
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] != 1:
        raise ValueError(f"network input must be a single-channel image, got {x.shape}")
    h, w = x.shape[1:]
    div = 2 ** (spec.depth - 1)
    if h % div or w % div:
        raise ValueError(f"input {h}x{w} not divisible by {div}; pad or crop first")
    dtype = weights["out.conv.w"].dtype
    W = weights
    slope = spec.leaky_slope
    eps = spec.bn_eps

    def bn(t, name):
        return ad.batchnorm(t, W[f"{name}.gamma"], W[f"{name}.beta"], eps)

    feat = Tensor(x.astype(dtype))
    skips = []
    for i in range(1, spec.depth + 1):
        t = ad.conv2d(_drop(feat, mask, f"d{i}.drop1"), W[f"d{i}.conv1.w"])
        if i >= 2:
            t = ad.maxpool2(t)
        t = ad.leaky_relu(bn(t, f"d{i}.bn1"), slope)
        t = ad.conv2d(_drop(t, mask, f"d{i}.drop2"), W[f"d{i}.conv2.w"])
        feat = ad.leaky_relu(bn(t, f"d{i}.bn2"), slope)
        if spec.c_s[i - 1]:
            s = ad.conv2d(_drop(feat, mask, f"s{i}.drop"), W[f"s{i}.conv.w"], W[f"s{i}.conv.b"])
            skips.append(ad.leaky_relu(s, slope))
        else:
            skips.append(None)

    up = feat
    for i in range(spec.depth, 0, -1):
        s = skips[i - 1]
        t = up if s is None else ad.concat([s, up])
        t = bn(t, f"u{i}.bn0")
        t = ad.conv2d(_drop(t, mask, f"u{i}.drop1"), W[f"u{i}.conv1.w"])
        t = ad.leaky_relu(bn(t, f"u{i}.bn1"), slope)
        t = ad.conv2d(_drop(t, mask, f"u{i}.drop2"), W[f"u{i}.conv2.w"])
        t = ad.leaky_relu(bn(t, f"u{i}.bn2"), slope)
        up = ad.bilinear_upsample2(t) if i >= 2 else t
    return ad.conv2d(up, W["out.conv.w"], W["out.conv.b"])
