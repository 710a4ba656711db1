"""Coreset selection: bilevel solver, random and influence-score baselines.

The bilevel route picks n of N training points by optimizing relaxed
per-example weights on the capped simplex {w in [0,1]^N, sum(w) = n}. The
forward pass of the inner problem sees a hard top-n mask of w; the backward
pass treats the mask as the identity (straight-through), so hypergradients
flow to the continuous weights through a T-step unrolled inner gradient
descent. The influence baseline greedily adds the candidate with the highest
score  -grad_f(theta*)^T H^{-1} grad_l_i(theta*), with the inverse
Hessian-vector product approximated by conjugate gradients on damped
Hessian-vector products (double backward through the tape).

Selection may be restricted to a candidate subset: non-candidate points keep
a fixed weight of one in the inner objective and still count in the upper
objective, which preserves label discrimination when selecting within one
class of a multi-class dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, TensorError
from .attacks import AttackConfig, pgd_attack
from .models import (
    ModelParams,
    ModelSpec,
    forward_logits_flat,
    init_model,
    per_example_cross_entropy,
    per_example_squared_error,
)


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs for the bilevel solver and the influence baseline.

    ``adversarial_inner`` swaps the clean per-example loss for the loss at a
    PGD maximizer (computed at the current detached parameters) in both
    levels; it needs ``attack`` to be set.
    """

    n: int
    outer_steps: int = 15
    outer_lr: float = 20.0
    inner_unroll_T: int = 10
    inner_lr: float = 2.0
    seed: int = 0
    adversarial_inner: bool = False
    straight_through: bool = True
    inner_loss: str = "ce"
    inner_l2: float = 0.0
    model_spec: Optional[ModelSpec] = None
    attack: Optional[AttackConfig] = None
    damping: float = 0.01
    cg_max_iter: int = 100
    influence_train_steps: int = 300
    influence_lr: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"coreset size must be positive, got {self.n}")
        if self.outer_lr <= 0 or self.inner_lr <= 0 or self.influence_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.outer_steps < 0 or self.inner_unroll_T < 0:
            raise ValueError("step counts must be non-negative")
        if self.inner_l2 < 0 or self.damping < 0:
            raise ValueError("regularization strengths must be non-negative")
        if self.inner_loss not in ("ce", "squared"):
            raise ValueError(f"inner_loss must be 'ce' or 'squared', got {self.inner_loss!r}")
        if self.adversarial_inner and self.attack is None:
            raise ValueError("adversarial_inner requires an attack configuration")


@dataclass
class BloResult:
    indices: np.ndarray
    weights: np.ndarray
    upper_loss_trace: list[float]


@dataclass
class IhvpResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool


def project_capped_simplex(v, n: int) -> np.ndarray:
    """Euclidean projection onto {w in [0,1]^N : sum(w) = n}.

    Bisection on the dual variable of w = clip(v - lam, 0, 1); stops when the
    sum constraint is met within 1e-10. Idempotent on feasible points.
    """
    v = np.asarray(v, dtype=np.float64)
    N = v.size
    if not 1 <= n <= N:
        raise ValueError(f"need 1 <= n <= {N}, got n={n}")
    if n == N:
        return np.ones(N)
    lo, hi = v.min() - 1.0, v.max()
    lam = 0.5 * (lo + hi)
    for _ in range(200):
        lam = 0.5 * (lo + hi)
        s = np.clip(v - lam, 0.0, 1.0).sum()
        if abs(s - n) <= 1e-10:
            break
        if s > n:
            lo = lam
        else:
            hi = lam
    return np.clip(v - lam, 0.0, 1.0)


def _topn_mask(values: np.ndarray, n: int) -> np.ndarray:
    order = np.argsort(-values, kind="stable")  # ties -> lowest index first
    mask = np.zeros(values.size)
    mask[order[:n]] = 1.0
    return mask


def st_threshold(w, n: int):
    """Hard top-n mask; on a tape the backward pass is the identity map.

    Exactly n ones always: ranking is strictly-greater with lowest-index
    preference among ties.
    """
    if isinstance(w, Tensor):
        if w.ndim != 1 or not 1 <= n <= w.size:
            raise ValueError(f"need a 1-d weight vector with 1 <= n <= {w.size}")
        mask = _topn_mask(w.data, n)
        return ad._apply(mask, [(w, lambda g: g)])
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or not 1 <= n <= w.size:
        raise ValueError(f"need a 1-d weight vector with 1 <= n <= {w.size}")
    return _topn_mask(w, n)


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "X") and hasattr(data, "y"):
        return np.asarray(data.X, dtype=np.float64), np.asarray(data.y, dtype=np.int64)
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


class _Problem:
    """Dataset reordered so candidates come first, labels remapped to 0..C-1."""

    def __init__(self, data, cfg: SelectionConfig, candidate_idx=None):
        X, y = _as_xy(data)
        N = len(y)
        if candidate_idx is None:
            cand = np.arange(N)
        else:
            cand = np.unique(np.asarray(candidate_idx, dtype=np.int64))
            if cand.size == 0 or cand.min() < 0 or cand.max() >= N:
                raise ValueError("candidate indices out of range")
        rest = np.setdiff1d(np.arange(N), cand)
        perm = np.concatenate([cand, rest])
        classes = np.unique(y)
        self.X = X[perm]
        self.y = np.searchsorted(classes, y[perm])
        self.N = N
        self.cand = cand
        self.m = cand.size
        self.base = np.concatenate([np.zeros(self.m), np.ones(N - self.m)])
        self.spec = cfg.model_spec or ModelSpec(
            X.shape[1], (), max(2, len(classes))
        )


def _adv_inputs(prob: _Problem, theta_data: np.ndarray, cfg: SelectionConfig, rng):
    model = ModelParams(prob.spec, theta_data)
    return pgd_attack(model, prob.X, prob.y, cfg.attack, rng=rng)


def _per_example_loss(spec: ModelSpec, th: Tensor, X, y, kind: str) -> Tensor:
    logits = forward_logits_flat(spec, th, X)
    if kind == "squared":
        return per_example_squared_error(logits, y)
    return per_example_cross_entropy(logits, y)


def _unrolled_theta(tape: Tape, w_t: Tensor, prob: _Problem, cfg: SelectionConfig,
                    init: ModelParams) -> Tensor:
    if cfg.straight_through:
        mask = st_threshold(w_t, cfg.n)
    else:
        mask = w_t
    full_w = ad.add(ad.scatter1d(mask, 0, prob.N), Tensor(prob.base))
    th = Tensor(init.theta)
    tape.watch(th)
    adv_rng = np.random.default_rng([cfg.seed, 1009]) if cfg.adversarial_inner else None
    for step in range(cfg.inner_unroll_T):
        try:
            X_step = (
                _adv_inputs(prob, th.data, cfg, adv_rng)
                if cfg.adversarial_inner
                else prob.X
            )
            vec = _per_example_loss(prob.spec, th, X_step, prob.y, cfg.inner_loss)
            inner = ad.scale(ad.tsum(ad.mul(full_w, vec)), 1.0 / prob.N)
            if cfg.inner_l2 > 0:
                inner = ad.add(inner, ad.scale(ad.tsum(ad.mul(th, th)), 0.5 * cfg.inner_l2))
            (g,) = tape.grad(inner, [th], create_graph=True)
            th = ad.sub(th, ad.scale(g, cfg.inner_lr))
        except TensorError as exc:
            raise TensorError(f"inner optimization diverged at step {step}: {exc}") from exc
    return th


def _upper_loss(th: Tensor, prob: _Problem, cfg: SelectionConfig) -> Tensor:
    if cfg.adversarial_inner:
        X_eval = _adv_inputs(prob, th.data, cfg, np.random.default_rng([cfg.seed, 2003]))
    else:
        X_eval = prob.X
    vec = _per_example_loss(prob.spec, th, X_eval, prob.y, cfg.inner_loss)
    return ad.tmean(vec)


def inner_solve_unrolled(w, data, cfg: SelectionConfig, init: ModelParams,
                         candidate_idx=None) -> Tensor:
    """T recorded full-batch GD steps on the mask-weighted loss; returns theta on tape.

    Must run inside an open Tape so the trajectory stays differentiable with
    respect to the weights.
    """
    tape = ad._active_tape()
    if tape is None:
        raise TensorError("inner_solve_unrolled must run inside an open Tape")
    prob = _Problem(data, cfg, candidate_idx)
    w_t = w if isinstance(w, Tensor) else tape.watch(Tensor(w))
    return _unrolled_theta(tape, w_t, prob, cfg, init)


def _hypergrad_and_loss(w, data, cfg, init, candidate_idx=None):
    prob = _Problem(data, cfg, candidate_idx)
    with Tape() as tape:
        w_t = Tensor(np.asarray(w, dtype=np.float64))
        tape.watch(w_t)
        th = _unrolled_theta(tape, w_t, prob, cfg, init)
        f = _upper_loss(th, prob, cfg)
        (gw,) = tape.grad(f, [w_t])
    return gw.data, f.item()


def hypergradient(w, data, cfg: SelectionConfig, init: ModelParams,
                  candidate_idx=None) -> np.ndarray:
    """Gradient of the full-data loss at the unrolled inner solution w.r.t. w."""
    grad, _ = _hypergrad_and_loss(w, data, cfg, init, candidate_idx)
    return grad


def select_coreset_blo(data, cfg: SelectionConfig, candidate_idx=None) -> BloResult:
    """Projected-gradient outer loop over relaxed selection weights.

    Starts from the uniform feasible point, takes ``outer_steps`` projected
    hypergradient steps (fresh inner initialization each step), and returns
    the top-n indices of the final weights plus the upper-loss trace.
    """
    prob = _Problem(data, cfg, candidate_idx)
    if cfg.n > prob.m:
        raise ValueError(f"cannot select {cfg.n} of {prob.m} candidates")
    seed_rng = np.random.default_rng([cfg.seed, 7])
    w = np.full(prob.m, cfg.n / prob.m)
    trace = []
    for _ in range(cfg.outer_steps):
        init = init_model(prob.spec, int(seed_rng.integers(2**63)))
        g, f = _hypergrad_and_loss(w, data, cfg, init, candidate_idx)
        trace.append(f)
        w = project_capped_simplex(w - cfg.outer_lr * g, cfg.n)
    init = init_model(prob.spec, int(seed_rng.integers(2**63)))
    _, f_final = _hypergrad_and_loss(w, data, cfg, init, candidate_idx)
    trace.append(f_final)
    local = np.flatnonzero(st_threshold(w, cfg.n))
    return BloResult(indices=prob.cand[local], weights=w, upper_loss_trace=trace)


def select_random(data, n: int, seed: int) -> np.ndarray:
    """Uniform selection without replacement, deterministic per seed."""
    X, y = _as_xy(data)
    N = len(y)
    if not 1 <= n <= N:
        raise ValueError(f"need 1 <= n <= {N}, got n={n}")
    return np.sort(np.random.default_rng(seed).choice(N, size=n, replace=False))


def ihvp_cg(model: ModelParams, data, v, damping: float, max_iter: int,
            loss_fn=None) -> IhvpResult:
    """Conjugate-gradient solve of (H + damping*I) x = v.

    H is the Hessian of the inner objective (mean cross-entropy over ``data``
    unless ``loss_fn(theta_tensor)`` overrides it) at the model's parameters;
    Hessian-vector products come from double backward through the tape.
    """
    if damping < 0:
        raise ValueError(f"damping must be non-negative, got {damping}")
    v = np.asarray(v, dtype=np.float64)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return IhvpResult(np.zeros_like(v), 0.0, 0, True)
    with Tape() as tape:
        th = Tensor(model.theta)
        tape.watch(th)
        if loss_fn is None:
            X, y = _as_xy(data)
            loss = ad.tmean(
                per_example_cross_entropy(forward_logits_flat(model.spec, th, X), y)
            )
        else:
            loss = loss_fn(th)
        (g,) = tape.grad(loss, [th], create_graph=True)

        def hvp(p: np.ndarray) -> np.ndarray:
            dot = ad.tsum(ad.mul(g, Tensor(p)))
            (hp,) = tape.grad(dot, [th])
            return hp.data + damping * p

        x = np.zeros_like(v)
        r = v.copy()
        p = r.copy()
        rs = float(r @ r)
        iterations = 0
        for _ in range(max_iter):
            if np.sqrt(rs) <= 1e-6 * vnorm:
                break
            Ap = hvp(p)
            pAp = float(p @ Ap)
            if pAp <= 0:
                break  # lost positive definiteness; return the best iterate so far
            alpha = rs / pAp
            x = x + alpha * p
            r = r - alpha * Ap
            rs_new = float(r @ r)
            p = r + (rs_new / rs) * p
            rs = rs_new
            iterations += 1
        residual = float(np.linalg.norm(hvp(x) - v))
    return IhvpResult(x, residual, iterations, residual <= 1e-6 * vnorm)


def _train_converged(spec: ModelSpec, X, y, cfg: SelectionConfig, seed: int,
                     tol: float = 1e-6) -> ModelParams:
    model = init_model(spec, seed)
    theta = model.theta.copy()
    for _ in range(cfg.influence_train_steps):
        with Tape() as tape:
            th = Tensor(theta)
            tape.watch(th)
            loss = ad.tmean(_per_example_loss(spec, th, X, y, cfg.inner_loss))
            if cfg.inner_l2 > 0:
                loss = ad.add(loss, ad.scale(ad.tsum(ad.mul(th, th)), 0.5 * cfg.inner_l2))
            (g,) = tape.grad(loss, [th])
        if np.linalg.norm(g.data) < tol:
            break
        theta = theta - cfg.influence_lr * g.data
    return ModelParams(spec, theta)


def _sample_grad(spec: ModelSpec, theta: np.ndarray, x_row: np.ndarray, label: int,
                 kind: str = "ce") -> np.ndarray:
    with Tape() as tape:
        th = Tensor(theta)
        tape.watch(th)
        vec = _per_example_loss(spec, th, x_row[None, :], [label], kind)
        (g,) = tape.grad(ad.tsum(vec), [th])
    return g.data


def influence_scores(model: ModelParams, inner_data, data, cfg: SelectionConfig,
                     candidates: Sequence[int]) -> np.ndarray:
    """Score -grad_f^T (H + damping I)^{-1} grad_l_i for each candidate index."""
    X, y = _as_xy(data)
    with Tape() as tape:
        th = Tensor(model.theta)
        tape.watch(th)
        f = ad.tmean(_per_example_loss(model.spec, th, X, y, cfg.inner_loss))
        (gf,) = tape.grad(f, [th])

    def inner_loss(th_t):
        Xi, yi = _as_xy(inner_data)
        loss = ad.tmean(_per_example_loss(model.spec, th_t, Xi, yi, cfg.inner_loss))
        if cfg.inner_l2 > 0:
            loss = ad.add(loss, ad.scale(ad.tsum(ad.mul(th_t, th_t)), 0.5 * cfg.inner_l2))
        return loss

    u = ihvp_cg(model, inner_data, gf.data, cfg.damping, cfg.cg_max_iter, loss_fn=inner_loss).x
    scores = np.empty(len(candidates))
    for k, i in enumerate(candidates):
        gi = _sample_grad(model.spec, model.theta, X[i], int(y[i]), cfg.inner_loss)
        scores[k] = -float(u @ gi)
    return scores


def select_influence(data, n: int, cfg: SelectionConfig, candidate_idx=None) -> np.ndarray:
    """Greedy influence-score selection; returns indices in pick order.

    Each round retrains the inner model on the current coreset (the full
    candidate pool, uniformly, while the coreset is empty) and adds the
    remaining candidate with the maximum influence score.
    """
    prob = _Problem(data, cfg, candidate_idx)
    if not 1 <= n <= prob.m:
        raise ValueError(f"need 1 <= n <= {prob.m}, got n={n}")
    seed_rng = np.random.default_rng([cfg.seed, 11])
    picked: list[int] = []
    fixed = list(range(prob.m, prob.N))
    for _ in range(n):
        inner_idx = picked + fixed
        if not inner_idx:
            inner_idx = list(range(prob.N))
        Xi, yi = prob.X[inner_idx], prob.y[inner_idx]
        model = _train_converged(prob.spec, Xi, yi, cfg, int(seed_rng.integers(2**63)))
        remaining = [i for i in range(prob.m) if i not in set(picked)]
        scores = influence_scores(model, (Xi, yi), (prob.X, prob.y), cfg, remaining)
        picked.append(remaining[int(np.argmax(scores))])
    return prob.cand[np.array(picked, dtype=np.int64)]
