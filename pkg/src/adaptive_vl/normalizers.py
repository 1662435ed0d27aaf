"""Simplex mappings for attention weights: softmax, sparsemax, alpha-entmax.

alpha-entmax maps a score row z to ``p_i = [(alpha-1) z_i - tau]_+ ** (1/(alpha-1))``
with the threshold ``tau`` chosen so that p sums to one.  alpha -> 1 recovers
softmax and alpha = 2 is sparsemax.  All solvers here operate on the last
axis and accept arbitrary leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericDomainError, Tensor, softmax_array

SOFTMAX_CUTOFF = 1e-3      # alpha below 1 + cutoff is routed to softmax
BISECT_ITERS = 60
BISECT_TOL = 1e-9
ALPHA_FD_STEP = 1e-4
ALPHA_EPS = 1e-3


def alpha_from_raw(raw):
    """Squash an unconstrained scalar into (1, 2); raw = 0 gives 1.5."""
    return 1.0 + 1.0 / (1.0 + np.exp(-np.asarray(raw, dtype=np.float64)))


@dataclass
class EntmaxSolution:
    probabilities: np.ndarray
    tau: np.ndarray
    support_mask: np.ndarray


def _finite(z: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(z)):
        raise NumericDomainError(f"{name}: non-finite scores")


def sparsemax_row(z) -> np.ndarray:
    """Euclidean projection onto the simplex by sorting (exact, no iteration)."""
    z = np.asarray(z, dtype=np.float64)
    _finite(z, "sparsemax")
    n = z.shape[-1]
    zs = -np.sort(-z, axis=-1)
    cssv = np.cumsum(zs, axis=-1) - 1.0
    k = np.arange(1, n + 1, dtype=np.float64)
    support = zs - cssv / k > 0
    rho = support.sum(axis=-1, keepdims=True)
    tau = np.take_along_axis(cssv, rho - 1, axis=-1) / rho
    return np.maximum(z - tau, 0.0)


def entmax15_exact(z) -> np.ndarray:
    """Sort-based exact 1.5-entmax; kept as an independent check on bisection."""
    z = np.asarray(z, dtype=np.float64)
    _finite(z, "entmax15")
    x = z / 2.0
    x = x - x.max(axis=-1, keepdims=True)
    n = x.shape[-1]
    xs = -np.sort(-x, axis=-1)
    k = np.arange(1, n + 1, dtype=np.float64)
    mean = np.cumsum(xs, axis=-1) / k
    mean_sq = np.cumsum(xs * xs, axis=-1) / k
    ss = k * (mean_sq - mean * mean)
    delta = np.maximum((1.0 - ss) / k, 0.0)
    tau = mean - np.sqrt(delta)
    size = (tau <= xs).sum(axis=-1, keepdims=True)
    tau_star = np.take_along_axis(tau, size - 1, axis=-1)
    return np.maximum(x - tau_star, 0.0) ** 2


def _threshold_eval(x, tau, inv):
    d = np.maximum(x - tau, 0.0)
    p = d ** inv
    f = p.sum(axis=-1, keepdims=True) - 1.0
    return p, d, f


def _entmax_core(z: np.ndarray, alpha: np.ndarray, method: str = "newton"):
    """Solve sum_i [x_i - tau]_+^(1/(alpha-1)) = 1 for tau, x = (alpha-1)(z - max z).

    The root lies in [-1, 0].  "bisect" halves that bracket; "newton" steps
    from the lower end, where the convex decreasing residual guarantees
    monotone convergence without overshoot.  Both stop at
    |sum(p) - 1| <= BISECT_TOL or BISECT_ITERS passes.
    """
    am1 = alpha - 1.0
    x = z * am1
    shift = x.max(axis=-1, keepdims=True)
    x = x - shift
    inv = 1.0 / am1
    lo = np.full(x.shape[:-1] + (1,), -1.0)
    if method == "bisect":
        hi = np.zeros_like(lo)
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            _, _, f = _threshold_eval(x, mid, inv)
            lo = np.where(f >= 0.0, mid, lo)
            hi = np.where(f >= 0.0, hi, mid)
            if np.all(np.abs(f) <= BISECT_TOL):
                break
        tau = mid
        # a short Newton polish on the final support for full precision
        for _ in range(2):
            p, d, f = _threshold_eval(x, tau, inv)
            fp = -inv * np.where(d > 0, p / np.where(d > 0, d, 1.0), 0.0).sum(axis=-1, keepdims=True)
            tau = tau - np.where(fp < 0, f / np.where(fp < 0, fp, -1.0), 0.0)
    elif method == "newton":
        tau = lo
        for _ in range(BISECT_ITERS):
            p, d, f = _threshold_eval(x, tau, inv)
            fp = -inv * np.where(d > 0, p / np.where(d > 0, d, 1.0), 0.0).sum(axis=-1, keepdims=True)
            done = np.abs(f) <= BISECT_TOL
            tau = tau - f / fp
            if np.all(done):
                break
    else:
        raise ValueError(f"unknown threshold method {method!r}")
    p = np.maximum(x - tau, 0.0) ** inv
    p = p / p.sum(axis=-1, keepdims=True)
    return p, tau + shift, p > 0


def entmax_rows(z, alpha, method: str = "newton") -> EntmaxSolution:
    """alpha-entmax along the last axis; ``alpha`` broadcasts against z[..., :1].

    Rows whose alpha is below 1 + SOFTMAX_CUTOFF take the softmax branch
    (tau is reported as NaN there).
    """
    z = np.asarray(z, dtype=np.float64)
    _finite(z, "entmax")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), z.shape[:-1] + (1,))
    if np.any(alpha > 2.0):
        raise ValueError("entmax: alpha must lie in (1, 2]")
    soft = alpha < 1.0 + SOFTMAX_CUTOFF
    if np.all(soft):
        p = softmax_array(z)
        return EntmaxSolution(p, np.full(alpha.shape, np.nan), p > 0)
    p, tau, supp = _entmax_core(z, np.where(soft, 1.5, alpha), method)
    if np.any(soft):
        p = np.where(soft, softmax_array(z), p)
        tau = np.where(soft, np.nan, tau)
        supp = p > 0
    return EntmaxSolution(p, tau, supp)


def entmax_row(z, alpha: float, method: str = "newton") -> EntmaxSolution:
    return entmax_rows(np.asarray(z, dtype=np.float64), alpha, method)


def entmax_backward_z(sol: EntmaxSolution, upstream, alpha) -> np.ndarray:
    """Vector-Jacobian product through alpha-entmax w.r.t. the scores.

    J = diag(s) - s s^T / sum(s), s_i = p_i^(2-alpha) on the support.  At
    alpha -> 1 this is the softmax Jacobian, so softmax-branch rows use
    alpha = 1.
    """
    p = sol.probabilities
    g = np.asarray(upstream, dtype=np.float64)
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), p.shape[:-1] + (1,))
    a = np.where(a < 1.0 + SOFTMAX_CUTOFF, 1.0, a)
    s = np.where(sol.support_mask, np.power(np.where(p > 0, p, 1.0), 2.0 - a), 0.0)
    ssum = s.sum(axis=-1, keepdims=True)
    return s * g - s * ((s * g).sum(axis=-1, keepdims=True) / ssum)


def entmax_backward_alpha(sol: EntmaxSolution, z, upstream, alpha):
    """d(loss)/d(alpha) per row by central differences in alpha.

    Returns ``(grad, clamped)`` where ``clamped`` flags rows whose difference
    stencil was pulled inside (1 + eps, 2].
    """
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), z.shape[:-1] + (1,))
    hi = np.minimum(a + ALPHA_FD_STEP, 2.0)
    lo = np.maximum(a - ALPHA_FD_STEP, 1.0 + ALPHA_EPS)
    clamped = (hi != a + ALPHA_FD_STEP) | (lo != a - ALPHA_FD_STEP)
    both = entmax_rows(np.stack([z, z]), np.stack([hi, lo])).probabilities
    dp = (both[0] - both[1]) / (hi - lo)
    return (dp * g).sum(axis=-1), clamped[..., 0]


# -- autograd wrappers -----------------------------------------------------------

def entmax(scores: Tensor, raw_alpha: Tensor | None = None, alpha=None) -> Tensor:
    """Differentiable alpha-entmax over the last axis.

    Either ``raw_alpha`` (a learnable tensor squashed through
    :func:`alpha_from_raw`) or a fixed ``alpha`` is given.  A ``raw_alpha``
    of shape (H,) is aligned with axis -3 of (..., head, query, key) scores.
    """
    z = scores.data
    if raw_alpha is not None:
        a_val = alpha_from_raw(raw_alpha.data)
        a_b = a_val.reshape(a_val.shape + (1, 1)) if a_val.ndim else a_val
    else:
        a_b = np.asarray(alpha, dtype=np.float64)
    a_rows = np.broadcast_to(a_b, z.shape[:-1] + (1,))
    sol = entmax_rows(z, a_rows)
    parents = (scores,) if raw_alpha is None else (scores, raw_alpha)

    def backward(g):
        if scores.requires_grad:
            scores.accumulate(entmax_backward_z(sol, g, a_rows))
        if raw_alpha is not None and raw_alpha.requires_grad:
            ga, _ = entmax_backward_alpha(sol, z, g, a_rows)
            if raw_alpha.ndim:
                head_axis = ga.ndim - 2
                ga = ga.sum(axis=tuple(i for i in range(ga.ndim) if i != head_axis))
            else:
                ga = ga.sum()
            sig = a_val - 1.0
            raw_alpha.accumulate(np.reshape(ga * sig * (1.0 - sig), raw_alpha.shape))

    return Tensor.make(sol.probabilities, parents, backward, "entmax")
