"""Gradient-combination rules for shared parameters.

Each rule takes the per-task gradients w.r.t. the full shared-parameter
vector and returns one update direction.  All rules are pure functions of
(gradients, rng/config); the rng is always passed in, never global.

Rules provided:

* ``combine_joint``     -- fixed convex weights, update = sum w_i g_i.
* ``combine_mgda``      -- min-norm point of the gradients' convex hull,
                           found by Frank-Wolfe with exact two-point line
                           search on the Gram matrix.
* ``combine_pcgrad``    -- project each gradient off the normal plane of
                           any other gradient it conflicts with, average.
* ``combine_graddrop``  -- per-coordinate sign-purity masking: keep either
                           the positive or the negative contributions,
                           chosen by a purity-biased coin flip.
* ``combine_cagrad``    -- largest worst-case descent inside a ball around
                           the average gradient; inner problem solved by
                           projected gradient descent on the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InnerSolveFailedError,
    LengthMismatchError,
    WeightsNotNormalizedError,
)
from .rng import RngState

WEIGHT_TOL = 1e-9


@dataclass
class BalancerOutput:
    update: np.ndarray
    weights: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _stack(grads) -> np.ndarray:
    vecs = [np.asarray(g, dtype=np.float64).reshape(-1) for g in grads]
    if len({v.size for v in vecs}) > 1:
        raise LengthMismatchError(f"gradient lengths differ: {[v.size for v in vecs]}")
    return np.stack(vecs)


def combine_joint(grads, weights=None) -> BalancerOutput:
    """Weighted sum of task gradients; weights default to equal and must sum to 1."""
    g = _stack(grads)
    t = g.shape[0]
    w = np.full(t, 1.0 / t) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (t,):
        raise LengthMismatchError(f"{t} tasks but {w.size} weights")
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise WeightsNotNormalizedError(f"weights sum to {w.sum()!r}, expected 1")
    return BalancerOutput(update=w @ g, weights=w)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u + (1.0 - css) / np.arange(1, v.size + 1) > 0)[0][-1]
    lam = (1.0 - css[rho]) / (rho + 1.0)
    return np.maximum(v + lam, 0.0)


def min_norm_weights(gram: np.ndarray, max_iter: int = 5000, tol: float = 1e-14) -> tuple[np.ndarray, dict]:
    """Frank-Wolfe for min_w w^T M w over the simplex.

    Works entirely on the T x T Gram matrix.  Each step moves toward the
    single best vertex with the exact minimizing step length, which for two
    points is the classic closed-form clipped ratio.
    """
    t = gram.shape[0]
    w = np.full(t, 1.0 / t)
    iters = 0
    gap = 0.0
    for iters in range(1, max_iter + 1):
        mw = gram @ w
        obj = float(w @ mw)
        v = int(np.argmin(mw))
        gap = 2.0 * (obj - float(mw[v]))  # FW duality gap upper-bounds obj - obj*
        if gap <= tol * max(obj, 1e-30):
            break
        # exact line search between w and vertex v
        denom = obj - 2.0 * float(mw[v]) + float(gram[v, v])
        if denom <= 0.0:
            gamma = 1.0
        else:
            gamma = min(1.0, max(0.0, (obj - float(mw[v])) / denom))
        if gamma == 0.0:
            break
        w = (1.0 - gamma) * w
        w[v] += gamma
    return w, {"iterations": iters, "fw_gap": gap}


def combine_mgda(grads, max_iter: int = 5000, tol: float = 1e-14) -> BalancerOutput:
    """Min-norm convex combination of the task gradients.

    Degenerate all-zero gradients return a zero update with uniform weights.
    """
    g = _stack(grads)
    t = g.shape[0]
    if t == 1:
        return BalancerOutput(update=g[0].copy(), weights=np.array([1.0]),
                              diagnostics={"min_norm": float(np.linalg.norm(g[0]))})
    gram = g @ g.T
    if not np.any(gram):
        return BalancerOutput(update=np.zeros(g.shape[1]), weights=np.full(t, 1.0 / t),
                              diagnostics={"min_norm": 0.0, "iterations": 0})
    w, info = min_norm_weights(gram, max_iter=max_iter, tol=tol)
    update = w @ g
    info["min_norm"] = float(np.linalg.norm(update))
    return BalancerOutput(update=update, weights=w, diagnostics=info)


def combine_pcgrad(grads, rng: RngState) -> BalancerOutput:
    """Conflict-projected gradients, averaged.

    For each task the running gradient is projected off every other task's
    raw gradient it conflicts with (negative dot), visiting the other tasks
    in an rng-shuffled order; the update is the mean of the T results.
    """
    g = _stack(grads)
    t = g.shape[0]
    projected = g.copy()
    for i in range(t):
        order = rng.fork("pcgrad-order", i).permutation(t)
        for j in order:
            if j == i:
                continue
            h = g[j]
            dot = float(projected[i] @ h)
            if dot < 0.0:
                projected[i] -= (dot / float(h @ h)) * h
    return BalancerOutput(
        update=projected.mean(axis=0),
        diagnostics={"projected_norms": [float(np.linalg.norm(p)) for p in projected]},
    )


def combine_graddrop(grads, rng: RngState) -> BalancerOutput:
    """Per-coordinate sign-purity masking.

    Purity P = 0.5*(1 + sum g / sum |g|) is the probability of keeping the
    positive contributions at a coordinate; the negative ones survive
    otherwise.  Coordinates where all tasks agree in sign saturate P at 0
    or 1 and pass through unchanged.
    """
    g = _stack(grads)
    t = g.shape[0]
    total = g.sum(axis=0)
    mass = np.abs(g).sum(axis=0)
    ratio = np.divide(total, mass, out=np.zeros_like(total), where=mass > 0.0)
    purity = 0.5 * (1.0 + ratio)  # mass == 0 gives ratio 0 hence purity 1/2
    u = rng.uniform(size=g.shape[1])
    keep_positive = u < purity
    pos = np.where(g > 0.0, g, 0.0).sum(axis=0)
    neg = np.where(g < 0.0, g, 0.0).sum(axis=0)
    update = np.where(keep_positive, pos, neg) / t
    return BalancerOutput(update=update, diagnostics={"kept_positive": int(keep_positive.sum())})


@dataclass
class CagradConfig:
    # `c` is the convergence/exploration trade-off radius coefficient; it
    # multiplies ||g0|| to give the ball the update may move inside.
    c: float = 0.2
    inner_steps: int = 200
    inner_tol: float = 1e-12

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("c must be >= 0")


def combine_cagrad(grads, cfg: CagradConfig) -> BalancerOutput:
    """Move as far as the ball ||d - g0|| <= c*||g0|| allows against the worst task.

    The inner problem min_w  g_w . g0 + c*||g0||*||g_w||  over the simplex is
    solved by projected gradient descent with backtracking, so the objective
    is non-increasing across inner iterations.
    """
    g = _stack(grads)
    t = g.shape[0]
    g0 = g.mean(axis=0)
    if cfg.c == 0.0:
        return BalancerOutput(update=g0.copy(), weights=np.full(t, 1.0 / t),
                              diagnostics={"objective_history": [], "constraint_slack": 0.0})
    gram = g @ g.T
    mean_col = gram.mean(axis=0)  # (Mw)_i with uniform w, times 1: g_i . g0
    g0_norm = float(np.sqrt(max(mean_col.mean(), 0.0)))

    def objective(w):
        gw_norm = float(np.sqrt(max(w @ gram @ w, 0.0)))
        return float(w @ mean_col) + cfg.c * g0_norm * gw_norm

    def gradient(w):
        mw = gram @ w
        gw_norm = float(np.sqrt(max(w @ mw, 0.0)))
        if gw_norm == 0.0:
            return mean_col.copy()
        return mean_col + cfg.c * g0_norm * mw / gw_norm

    w = np.full(t, 1.0 / t)
    f = objective(w)
    history = [f]
    step = 1.0 / (np.abs(gram).sum() + cfg.c * g0_norm * np.sqrt(np.abs(gram).sum()) + 1e-30)
    step = max(step, 1e-12)
    for _ in range(cfg.inner_steps):
        grad_w = gradient(w)
        if not np.all(np.isfinite(grad_w)):
            raise InnerSolveFailedError("non-finite inner gradient")
        trial_step = step
        improved = False
        for _ in range(40):
            w_new = project_simplex(w - trial_step * grad_w)
            f_new = objective(w_new)
            if not np.isfinite(f_new):
                raise InnerSolveFailedError("non-finite inner objective")
            if f_new <= f:
                improved = True
                break
            trial_step *= 0.5
        if not improved:
            break
        moved = float(np.abs(w_new - w).sum())
        w, f = w_new, f_new
        history.append(f)
        step = trial_step * 2.0
        if moved < cfg.inner_tol:
            break

    gw = w @ g
    gw_norm = float(np.linalg.norm(gw))
    if gw_norm == 0.0:
        d = g0.copy()
    else:
        d = g0 + (cfg.c * g0_norm / gw_norm) * gw
    slack = cfg.c * float(np.linalg.norm(g0)) - float(np.linalg.norm(d - g0))
    return BalancerOutput(
        update=d,
        weights=w,
        diagnostics={"objective_history": history, "constraint_slack": slack,
                     "inner_iterations": len(history) - 1},
    )


def make_balancer(name: str, params: dict | None = None):
    """Build a callable(task_grads, rng) -> BalancerOutput from a config name."""
    params = dict(params or {})
    if name == "joint":
        weights = params.get("weights")
        return lambda grads, rng: combine_joint(grads, weights)
    if name == "mgda":
        return lambda grads, rng: combine_mgda(grads)
    if name == "pcgrad":
        return lambda grads, rng: combine_pcgrad(grads, rng)
    if name == "graddrop":
        return lambda grads, rng: combine_graddrop(grads, rng)
    if name == "cagrad":
        cfg = CagradConfig(**params)
        return lambda grads, rng: combine_cagrad(grads, cfg)
    raise ValueError(f"unknown balancer {name!r}")
