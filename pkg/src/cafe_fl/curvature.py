"""Empirical Fisher / Hessian spectra and the curvature bounds built on them.

The empirical Fisher of a set of per-example gradients ``g_i`` is
``F = (1/n) sum_i g_i g_i^T``. It is never materialised during training:
:class:`FimOperator` applies it as ``G^T (G v) / n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .errors import CapabilityError, ConvergenceError, InputError, NumericError

DENSE_CAP = 256
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 5000


@dataclass(frozen=True)
class FimOperator:
    """Matrix-free empirical Fisher over the rows of ``grads`` (shape ``(n, P)``)."""

    grads: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.grads, dtype=np.float64)
        if G.ndim == 1:
            G = G[None, :]
        if G.ndim != 2 or G.shape[0] < 1:
            raise InputError("FimOperator needs at least one gradient vector")
        object.__setattr__(self, "grads", G)

    @property
    def n(self) -> int:
        return self.grads.shape[0]

    @property
    def dim(self) -> int:
        return self.grads.shape[1]

    def matvec(self, v) -> np.ndarray:
        return fim_matvec(self, v)

    @classmethod
    def from_model(cls, spec: nn.MlpSpec, params, batch: nn.Batch) -> "FimOperator":
        return cls(nn.per_sample_grads(spec, params, batch))


@dataclass(frozen=True)
class SpectrumEstimate:
    lam: float
    eigvec: np.ndarray
    iterations: int
    residual: float
    rayleigh_history: tuple[float, ...] = field(default=(), repr=False)


def fim_matvec(op: FimOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.dim,):
        raise InputError(f"vector length {v.shape} does not match operator dimension {op.dim}")
    return op.grads.T @ (op.grads @ v) / op.n


def dense_fim(op: FimOperator) -> np.ndarray:
    """Explicit ``P x P`` Fisher; a test oracle, capped at ``P <= 256``."""
    if op.dim > DENSE_CAP:
        raise CapabilityError(f"dense Fisher limited to P <= {DENSE_CAP}, got P = {op.dim}")
    F = op.grads.T @ op.grads / op.n
    return 0.5 * (F + F.T)


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
) -> SpectrumEstimate:
    """Dominant eigenpair of a symmetric operator given only its action.

    Stops once the Rayleigh quotient's relative change stays below ``tol``
    for two consecutive iterations and the residual ``||Av - lam v||`` is at
    most ``tol * max(1, |lam|)``. Raises :class:`ConvergenceError` (holding
    the last estimate) after ``max_iter`` matvecs.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    if max_iter < 1:
        raise InputError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)

    history: list[float] = []
    lam_prev = None
    calm = 0
    lam = residual = float("nan")
    for it in range(1, max_iter + 1):
        w = matvec(v)
        lam = float(v @ w)
        r = w - lam * v
        residual = math.sqrt(float(r @ r))
        if not math.isfinite(residual):
            raise NumericError("operator produced a non-finite vector")
        history.append(lam)
        w_norm = math.sqrt(float(w @ w))
        if w_norm == 0.0:
            # v is in the null space; for the PSD Fisher and a random start this means F = 0.
            return SpectrumEstimate(lam, v, it, residual, tuple(history))
        if lam_prev is not None:
            scale = max(abs(lam), np.finfo(float).tiny)
            calm = calm + 1 if abs(lam - lam_prev) <= tol * scale else 0
        lam_prev = lam
        if (calm >= 2 and residual <= tol * max(1.0, abs(lam))) or residual <= 1e-15 * max(1.0, abs(lam)):
            return SpectrumEstimate(lam, v, it, residual, tuple(history))
        v = w / w_norm
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations (residual {residual:.3e})",
        estimate=SpectrumEstimate(lam, v, max_iter, residual, tuple(history)),
    )


def top_eig_power(op: FimOperator, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, seed: int = 0) -> SpectrumEstimate:
    """Top eigenvalue of the empirical Fisher by power iteration."""
    G, n = op.grads, op.n
    est = power_iteration(lambda v: G.T @ (G @ v) / n, op.dim, tol=tol, max_iter=max_iter, seed=seed)
    if est.lam < 0.0:
        # PSD operator; negative values are roundoff around zero.
        est = SpectrumEstimate(0.0, est.eigvec, est.iterations, est.residual, est.rayleigh_history)
    return est


def hvp_from_grad(grad_fn: Callable[[np.ndarray], np.ndarray], params, v, h: float = 1e-4) -> np.ndarray:
    """Hessian-vector product by central differences of ``grad_fn``.

    ``v`` is normalised, the step is ``h * max(1, ||params||)`` along the unit
    direction and the result is rescaled by ``||v||``.
    """
    if h <= 0:
        raise InputError("h must be positive")
    params = np.asarray(params, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.shape:
        raise InputError("v must match the parameter vector shape")
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(params)
    u = v / v_norm
    step = h * max(1.0, float(np.linalg.norm(params)))
    out = (grad_fn(params + step * u) - grad_fn(params - step * u)) * (v_norm / (2.0 * step))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Hessian-vector product")
    return out


def hvp(spec: nn.MlpSpec, params, batch: nn.Batch, v, h: float = 1e-4) -> np.ndarray:
    return hvp_from_grad(lambda p: nn.grad(spec, p, batch), params, v, h)


def top_eig_hessian_from_grad(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    params,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
    h: float = 1e-4,
) -> SpectrumEstimate:
    """Largest-magnitude Hessian eigenvalue, reported with its sign.

    Near a minimum this is the largest positive eigenvalue.
    """
    params = np.asarray(params, dtype=np.float64)
    return power_iteration(lambda v: hvp_from_grad(grad_fn, params, v, h), params.shape[0], tol=tol, max_iter=max_iter, seed=seed)


def top_eig_hessian(
    spec: nn.MlpSpec,
    params,
    batch: nn.Batch,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
    h: float = 1e-4,
) -> SpectrumEstimate:
    params = nn.check_params(spec, params)
    return top_eig_hessian_from_grad(lambda p: nn.grad(spec, p, batch), params, tol, max_iter, seed, h)


def excessive_loss(loss_fn: Callable[[np.ndarray], float], global_params, local_params) -> float:
    """Measured excess of a client's loss at the global model over its local optimum."""
    return float(loss_fn(np.asarray(global_params, dtype=np.float64)) - loss_fn(np.asarray(local_params, dtype=np.float64)))


def excessive_loss_bound(global_params, local_params, g_local, lambda_h: float) -> float:
    """``||g|| ||d|| + 0.5 * lambda_h * ||d||^2`` with ``d = global - local``.

    The cubic remainder is not included.
    """
    if lambda_h < 0:
        raise InputError("lambda_h must be non-negative")
    d = float(np.linalg.norm(np.asarray(global_params, dtype=np.float64) - np.asarray(local_params, dtype=np.float64)))
    return float(np.linalg.norm(g_local)) * d + 0.5 * lambda_h * d * d


@dataclass(frozen=True)
class GroupBoundReport:
    lambda_full: float
    jensen_upper: float
    max_group_lambda: float
    alphas: np.ndarray
    group_lambdas: np.ndarray
    slack_delta: float

    @property
    def upper_bound_holds(self) -> bool:
        return self.lambda_full <= self.jensen_upper + 1e-8


def group_fim_bounds(
    group_ops: Sequence[FimOperator],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
) -> GroupBoundReport:
    """Compare the pooled Fisher's top eigenvalue against its group decomposition.

    The pooled Fisher is the size-weighted mix of the group Fishers, so its
    top eigenvalue never exceeds the same mix of group top eigenvalues.
    ``slack_delta`` is how far the largest group eigenvalue sits above the
    pooled one; it is reported, not checked.
    """
    group_ops = list(group_ops)
    if not group_ops:
        raise InputError("need at least one group")
    dims = {op.dim for op in group_ops}
    if len(dims) != 1:
        raise InputError("all groups must share the parameter dimension")
    sizes = np.array([op.n for op in group_ops], dtype=np.float64)
    alphas = sizes / sizes.sum()
    group_lams = np.array([top_eig_power(op, tol, max_iter, seed).lam for op in group_ops])
    full = FimOperator(np.concatenate([op.grads for op in group_ops], axis=0))
    lam_full = top_eig_power(full, tol, max_iter, seed).lam
    max_group = float(group_lams.max())
    return GroupBoundReport(
        lambda_full=lam_full,
        jensen_upper=float(alphas @ group_lams),
        max_group_lambda=max_group,
        alphas=alphas,
        group_lambdas=group_lams,
        slack_delta=max_group - lam_full,
    )


def group_disparity(group_lambdas) -> float:
    """Spread ``max - min`` of per-group top eigenvalues."""
    lams = np.asarray(group_lambdas, dtype=np.float64).reshape(-1)
    if lams.shape[0] < 2:
        raise InputError("group disparity needs at least two groups")
    return float(lams.max() - lams.min())
