"""L-infinity PGD attacks, the adversarial training loss, and robust accuracy.

The attack iterates sign-gradient ascent steps projected back onto the
epsilon-ball (and the valid input range) and returns, per example, the
iterate with the highest loss seen along the trajectory. Started from the
clean input (``random_start=False``) this makes the ascent guarantee exact:
the returned loss is never below the clean loss.

Gradients of the adversarial loss with respect to model parameters treat the
perturbed inputs as constants (Danskin-style); the inner maximization is
never differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, TensorError
from .models import ModelParams, accuracy, forward_logits_flat, per_example_cross_entropy

# loss_fn(model, X_tensor, y) -> per-example loss vector on the tape
LossFn = Callable[[ModelParams, Tensor, Optional[np.ndarray]], Tensor]


@dataclass(frozen=True)
class AttackConfig:
    """PGD attack parameters. ``step_size`` defaults to 2.5 * epsilon / steps."""

    epsilon: float
    steps: int = 10
    step_size: float | None = None
    random_start: bool = False
    input_bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        lo, hi = self.input_bounds
        if not lo < hi:
            raise ValueError(f"invalid input bounds ({lo}, {hi})")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.5 * self.epsilon / self.steps)
        if self.epsilon > 0:
            if self.step_size <= 0:
                raise ValueError(f"step_size must be positive, got {self.step_size}")
            if self.step_size > 2 * self.epsilon:
                raise ValueError(
                    f"step_size {self.step_size} exceeds the ball diameter "
                    f"2*epsilon = {2 * self.epsilon}"
                )


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _default_loss(model: ModelParams, X_t: Tensor, y) -> Tensor:
    logits = forward_logits_flat(model.spec, Tensor(model.theta), X_t)
    return per_example_cross_entropy(logits, y)


def pgd_attack(
    model: ModelParams,
    X,
    y,
    cfg: AttackConfig,
    loss_fn: LossFn | None = None,
    rng=None,
) -> np.ndarray:
    """Return adversarial inputs within the epsilon-ball around ``X``.

    The objective is the per-example cross-entropy of the true labels unless
    ``loss_fn`` overrides it. Output is plain data, never on a tape.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if cfg.epsilon == 0.0:
        return X.copy()
    loss_fn = loss_fn or _default_loss
    lo, hi = cfg.input_bounds
    eps = cfg.epsilon

    x = X.copy()
    if cfg.random_start:
        delta0 = _as_rng(rng).uniform(-eps, eps, size=X.shape)
        x = np.clip(X + delta0, lo, hi)

    best_x = None
    best_vals = None

    def consider(x_now: np.ndarray, vals: np.ndarray):
        nonlocal best_x, best_vals
        if best_vals is None:
            best_x, best_vals = x_now.copy(), vals.copy()
            return
        better = vals > best_vals  # strict: ties keep the earliest iterate
        if np.any(better):
            best_x[better] = x_now[better]
            best_vals[better] = vals[better]

    for _ in range(cfg.steps):
        with Tape() as tape:
            x_t = Tensor(x)
            tape.watch(x_t)
            vec = loss_fn(model, x_t, y)
            total = ad.tsum(vec)
            if tape.node_id(total) is None:
                raise TensorError("attack objective does not depend on the input")
            (gx,) = tape.grad(total, [x_t])
        consider(x, vec.data)
        x = x + cfg.step_size * np.sign(gx.data)
        x = np.clip(x, X - eps, X + eps)
        x = np.clip(x, lo, hi)
    final_vec = loss_fn(model, Tensor(x), y)
    consider(x, final_vec.data)
    return best_x


def at_loss(
    model: ModelParams,
    X,
    y,
    cfg: AttackConfig,
    theta: Tensor | None = None,
    rng=None,
) -> Tensor:
    """Cross-entropy at the PGD maximizer; the attack itself is not differentiated.

    Pass a tape-watched ``theta`` to train through this loss: the attack runs
    at the current parameter values and its output enters as a constant.
    """
    X_adv = pgd_attack(model, X, y, cfg, rng=rng)
    th = theta if theta is not None else Tensor(model.theta)
    logits = forward_logits_flat(model.spec, th, X_adv)
    return ad.tmean(per_example_cross_entropy(logits, y))


def robust_accuracy(model: ModelParams, X, y, cfg: AttackConfig, rng=None) -> float:
    """Accuracy under a PGD attack on the true-label cross-entropy."""
    X_adv = pgd_attack(model, X, y, cfg, rng=rng)
    return accuracy(model, X_adv, y)
