"""Dropout-reparametrised training and Monte-Carlo conditional-mean inference.

The network ``f(x0; mu * b)`` is fitted to a single sinogram by minimising
``||A f - y||^2 + alpha * TV(f)`` with a fresh Bernoulli mask ``b`` at every
step. The reconstruction is the average of ``K`` masked forward passes.
With ``mode="dip_tv"`` every mask keeps all units, which reduces both stages
to the deterministic DIP+TV fit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .network import ALL_KEEP, NetworkSpec, WeightSet, build_network, forward, sample_mask
from .projector import FanBeamGeometry, FanBeamOperator, ImageGrid, Sinogram, fbp_reconstruct
from .sim import DoseModel, RawCounts, log_transform

log = logging.getLogger(__name__)

MODES = ("proposed", "dip_tv")

# Center-excluding low-pass used by the J-invariant seed.
JINV_KERNEL = np.array([[0.5, 1.0, 0.5], [1.0, 0.0, 1.0], [0.5, 1.0, 0.5]]) / 6.0


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, fidelity: float, tv: float):
        super().__init__(f"non-finite loss at iteration {iteration}: fidelity={fidelity}, tv={tv}")
        self.iteration, self.fidelity, self.tv = iteration, fidelity, tv


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 4000
    seed: int = 0
    K: int = 50
    mode: str = "proposed"
    tv_eps: float = 1e-6
    jinv_p: float = 0.3
    resample_seed: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.K < 1 or self.iterations < 1:
            raise ValueError("K and iterations must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def substreams(self) -> dict[str, int]:
        """Independent integer seeds for init, training masks, inference masks, seed image."""
        init, train, infer, jinv = np.random.SeedSequence(self.seed).generate_state(4)
        return {"init": int(init), "train_masks": int(train),
                "infer_masks": int(infer), "jinv": int(jinv)}


@dataclass
class TrainResult:
    weights: WeightSet
    loss: np.ndarray          # (iterations, 3): total, fidelity, tv
    scale: float              # network units -> attenuation per mm


@dataclass
class ReconResult:
    mean_image: ImageGrid
    variance: np.ndarray
    samples: list[np.ndarray] | None = None
    loss: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)
    weights: WeightSet | None = None


def _replicate_smooth(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            if JINV_KERNEL[i, j]:
                out += JINV_KERNEL[i, j] * p[i:i + h, j:j + w]
    return out


def jinv_seed(x_fbp, p: float = 0.3, seed: int = 0) -> ImageGrid:
    """``b * x + (1 - b) * s(x)`` with ``b ~ Bernoulli(p)`` per pixel.

    ``s`` is the center-excluding 3x3 average with replicate boundary, so
    wherever ``b = 0`` the output does not depend on the pixel's own value.
    """
    vals = np.asarray(getattr(x_fbp, "values", x_fbp), dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("seed image contains non-finite values")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    b = np.random.Generator(np.random.Philox(key=int(seed))).random(vals.shape) < p
    out = np.where(b, vals, _replicate_smooth(vals))
    return ImageGrid(out, getattr(x_fbp, "pixel_size_mm", 1.0))


def _network_scale(x0: np.ndarray) -> float:
    s = float(np.percentile(np.abs(x0), 99.5))
    return s if s > 0 else 1.0


def loss_terms(weights: WeightSet, spec: NetworkSpec, x0n: np.ndarray, scale: float,
               y: np.ndarray, op: FanBeamOperator, alpha: float, tv_eps: float,
               mask=ALL_KEEP) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Build ``(total, fidelity, tv)`` on a fresh tape for one mask draw."""
    img = ad.scale(forward(weights, spec, x0n, mask), scale)
    fid = ad.data_fidelity(img, y, op)
    tv = ad.tv_l1(img, tv_eps)
    return fid + ad.scale(tv, alpha), fid, tv


def train(y: Sinogram, geom: FanBeamGeometry, spec: NetworkSpec, cfg: TrainConfig,
          x0: ImageGrid, x_fbp: ImageGrid | None = None,
          progress_every: int = 0) -> TrainResult:
    """Fit the network weights to ``y`` with Adam.

    A fresh dropout mask is sampled at each iteration for ``mode="proposed"``;
    ``mode="dip_tv"`` uses the all-keep path. Raises :class:`TrainingDiverged`
    on a non-finite loss. With ``cfg.resample_seed`` the seed image is
    re-drawn from ``x_fbp`` at every step instead of staying fixed at ``x0``.
    """
    if cfg.resample_seed and x_fbp is None:
        raise ValueError("resample_seed needs the FBP image")
    y.check(geom)
    op = FanBeamOperator(geom, x0.shape, x0.pixel_size_mm)
    seeds = cfg.substreams()
    weights = build_network(spec, seeds["init"])
    scale = _network_scale(x0.values)
    x0n = x0.values / scale
    opt = ad.Adam(weights.params(), cfg.lr, cfg.beta1, cfg.beta2)
    trace = np.zeros((cfg.iterations, 3))
    for it in range(cfg.iterations):
        mask = ALL_KEEP
        if cfg.mode == "proposed":
            mask = sample_mask(spec, x0.shape, seeds["train_masks"], it)
        if cfg.resample_seed:
            x0n = jinv_seed(x_fbp, cfg.jinv_p, seeds["jinv"] + it + 1).values / scale
        total, fid, tv = loss_terms(weights, spec, x0n, scale, y.values, op,
                                    cfg.alpha, cfg.tv_eps, mask)
        vals = (total.item(), fid.item(), tv.item())
        if not np.all(np.isfinite(vals)):
            raise TrainingDiverged(it, vals[1], vals[2])
        trace[it] = vals
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d loss %.6g (fid %.6g, tv %.6g)", it + 1, *vals)
    return TrainResult(weights, trace, scale)


def mc_reconstruct(weights: WeightSet, spec: NetworkSpec, x0: ImageGrid, K: int, seed: int,
                   scale: float = 1.0, mode: str = "proposed",
                   keep_samples: bool = False) -> ReconResult:
    """Average of ``K`` dropout samples of the network output, plus variance.

    Uses Welford's running update in float64, so identical samples (the
    ``dip_tv`` mode) give a mean equal to the sample and zero variance for
    every ``K``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x0n = x0.values / scale
    mean = np.zeros(x0.shape)
    m2 = np.zeros(x0.shape)
    samples = [] if keep_samples else None
    for k in range(K):
        mask = sample_mask(spec, x0.shape, seed, k) if mode == "proposed" else ALL_KEEP
        with ad.no_grad():
            out = forward(weights, spec, x0n, mask).data[0].astype(np.float64) * scale
        delta = out - mean
        mean += delta / (k + 1)
        m2 += delta * (out - mean)
        if keep_samples:
            samples.append(out)
    var = m2 / (K - 1) if K > 1 else np.zeros(x0.shape)
    return ReconResult(ImageGrid(mean, x0.pixel_size_mm), var, samples)


def running_means(samples: list[np.ndarray], ks) -> dict[int, np.ndarray]:
    """Means of the first ``k`` samples for each ``k`` in ``ks``."""
    out = {}
    acc = np.zeros_like(samples[0])
    wanted = set(ks)
    for k, s in enumerate(samples, start=1):
        acc = acc + s
        if k in wanted:
            out[k] = acc / k
    return out


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def reconstruct_pipeline(data, geom: FanBeamGeometry, spec: NetworkSpec, cfg: TrainConfig,
                         shape: tuple[int, int], pixel_size_mm: float,
                         dose: DoseModel | None = None, keep_samples: bool = False,
                         fbp_filter: str = "ramp") -> ReconResult:
    """FBP -> J-invariant seed -> training -> K-sample average.

    ``data`` is either a log sinogram or raw counts (then ``dose`` is needed).
    """
    if isinstance(data, RawCounts):
        if dose is None:
            raise ValueError("raw counts need a DoseModel for the log transform")
        y = log_transform(data, dose)
    else:
        y = data
    y.check(geom)
    seeds = cfg.substreams()
    x_fbp = fbp_reconstruct(y, geom, shape, pixel_size_mm, fbp_filter)
    x0 = jinv_seed(x_fbp, cfg.jinv_p, seeds["jinv"])
    tr = train(y, geom, spec, cfg, x0, x_fbp)
    res = mc_reconstruct(tr.weights, spec, x0, cfg.K, seeds["infer_masks"], tr.scale,
                         cfg.mode, keep_samples)
    res.loss = tr.loss
    res.weights = tr.weights
    res.manifest = {
        "train_config": cfg.to_dict(),
        "network_spec": spec.to_dict(),
        "geometry": geom.to_dict(),
        "image_shape": list(shape),
        "pixel_size_mm": pixel_size_mm,
        "seeds": seeds,
        "network_scale": tr.scale,
        "final_loss": tr.loss[-1].tolist(),
        "mean_image_sha256": _digest(res.mean_image.values),
        "variance_sha256": _digest(res.variance),
    }
    return res


def manifest_json(result: ReconResult) -> str:
    return json.dumps(result.manifest, indent=2, sort_keys=True)
