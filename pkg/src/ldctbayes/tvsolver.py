"""TV-regularised least squares by ADMM.

Solves ``min_x ||A x - y||^2 + alpha * ||grad x||_1`` (anisotropic TV) with the
splitting ``z = grad x`` and the scaled augmented Lagrangian
``||A x - y||^2 + alpha ||z||_1 + rho/2 ||grad x - z + u||^2``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .projector import FanBeamGeometry, FanBeamOperator, ImageGrid, Sinogram, fbp_reconstruct

log = logging.getLogger(__name__)


class CGBreakdown(RuntimeError):
    def __init__(self, message: str, trace: "AdmmTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class AdmmConfig:
    alpha: float = 0.02
    rho: float = 1.0
    outer_iters: int = 200
    cg_iters: int = 50
    cg_tol: float = 1e-10
    adapt_rho: bool = False
    warm_start: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.outer_iters < 1 or self.cg_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdmmTrace:
    objective: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)
    dual_residual: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    cg_steps: list = field(default_factory=list)

    def rows(self):
        for k in range(len(self.objective)):
            yield (k + 1, self.objective[k], self.primal_residual[k], self.dual_residual[k],
                   self.rho[k], self.cg_steps[k])


def grad_op(x: np.ndarray) -> np.ndarray:
    """Forward differences, replicate boundary: ``(2, H, W)`` = (horizontal, vertical)."""
    g = np.zeros((2,) + x.shape, dtype=np.result_type(x, np.float64))
    g[0, :, :-1] = x[:, 1:] - x[:, :-1]
    g[1, :-1, :] = x[1:, :] - x[:-1, :]
    return g


def div_op(z: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad_op`."""
    zh, zv = z[0], z[1]
    d = np.zeros(zh.shape, dtype=np.result_type(z, np.float64))
    d[:, :-1] += zh[:, :-1]
    d[:, 1:] -= zh[:, :-1]
    d[:-1, :] += zv[:-1, :]
    d[1:, :] -= zv[:-1, :]
    return d


def shrink(v, t: float):
    """Soft thresholding ``sign(v) * max(|v| - t, 0)``."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def tv_norm(x: np.ndarray) -> float:
    return float(np.abs(grad_op(x)).sum())


def objective(op: FanBeamOperator, x: np.ndarray, y: np.ndarray, alpha: float) -> float:
    r = op.forward(x) - y
    return float(np.dot(r.ravel(), r.ravel()) + alpha * tv_norm(x))


def conjugate_gradient(apply, b: np.ndarray, x: np.ndarray, iters: int, tol: float):
    """CG on a symmetric positive (semi)definite operator; returns ``(x, steps)``.

    Stops once ``||r|| <= tol * ||b||``. Raises ``ZeroDivisionError`` when the
    search direction has (numerically) zero curvature.
    """
    r = b - apply(x)
    p = r.copy()
    rr = float(np.vdot(r, r))
    b_norm = float(np.linalg.norm(b)) or 1.0
    steps = 0
    for steps in range(1, iters + 1):
        if np.sqrt(rr) <= tol * b_norm:
            return x, steps - 1
        ap = apply(p)
        curv = float(np.vdot(p, ap))
        if not curv > 1e-300 * max(rr, 1e-300):
            raise ZeroDivisionError(f"CG curvature {curv:.3e} at step {steps}")
        a = rr / curv
        x = x + a * p
        r = r - a * ap
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, steps


def pwls_tv_admm(y: Sinogram, geom: FanBeamGeometry, shape: tuple[int, int], pixel_size_mm: float,
                 cfg: AdmmConfig, x_init: np.ndarray | None = None) -> tuple[ImageGrid, AdmmTrace]:
    """Run ``cfg.outer_iters`` ADMM iterations and return the final iterate.

    The x-update solves ``(A^T A + rho/2 grad^T grad) x = A^T y + rho/2 grad^T (z - u)``
    by warm-started CG; the z-update soft-thresholds at ``alpha / rho``. With
    ``adapt_rho`` the penalty follows the usual residual-balancing rule.
    """
    y.check(geom)
    if not np.all(np.isfinite(y.values)):
        raise ValueError("sinogram contains non-finite values")
    op = FanBeamOperator(geom, shape, pixel_size_mm)
    if x_init is not None:
        x = np.array(x_init, dtype=np.float64)
    elif cfg.warm_start:
        x = fbp_reconstruct(y, geom, shape, pixel_size_mm).values
    else:
        x = np.zeros(shape)
    aty = op.adjoint(y.values)
    rho = cfg.rho
    z = grad_op(x)
    u = np.zeros_like(z)
    trace = AdmmTrace()

    for k in range(cfg.outer_iters):
        half = 0.5 * rho

        def normal_op(v):
            return op.adjoint(op.forward(v)) - half * div_op(grad_op(v))

        rhs = aty - half * div_op(z - u)
        try:
            x, steps = conjugate_gradient(normal_op, rhs, x, cfg.cg_iters, cfg.cg_tol)
        except ZeroDivisionError as exc:
            raise CGBreakdown(f"ADMM iteration {k + 1}: {exc}", trace) from exc
        gx = grad_op(x)
        z_old = z
        z = shrink(gx + u, cfg.alpha / rho)
        u = u + gx - z
        r_norm = float(np.linalg.norm(gx - z))
        s_norm = float(rho * np.linalg.norm(div_op(z - z_old)))
        trace.objective.append(objective(op, x, y.values, cfg.alpha))
        trace.primal_residual.append(r_norm)
        trace.dual_residual.append(s_norm)
        trace.grad_norm.append(float(np.linalg.norm(gx)))
        trace.rho.append(rho)
        trace.cg_steps.append(steps)
        if cfg.adapt_rho:
            if r_norm > 10.0 * s_norm:
                rho *= 2.0
                u /= 2.0
            elif s_norm > 10.0 * r_norm:
                rho /= 2.0
                u *= 2.0
    return ImageGrid(x, pixel_size_mm), trace
