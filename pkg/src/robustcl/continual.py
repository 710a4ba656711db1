"""Class-incremental training with coreset replay and robust distillation.

Per task the model is adversarially trained on the new data together with
labeled exemplars replayed from the memory bank, plus ``gamma`` times a
two-term distillation penalty on the bank: the KL divergence from the
previous model's predictions to the current ones, at the stored exemplars
and at worst-case perturbations of them. Replay matters: distilling the old
class distribution alone leaves the scale of old-class logits against the
new columns unconstrained, and old-task accuracy over the grown head
collapses. Setting ``gamma=0`` disables the bank entirely (the forgetting
baseline: plain adversarial training on each new task).

After training, a per-class coreset of the task's data is appended to the
bank. The output head grows as classes arrive: global class ids map to logit
columns in order of first appearance, so the old model's predictions always
occupy a prefix of the new head and distillation compares the two models on
exactly the old columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .attacks import AttackConfig, pgd_attack, robust_accuracy
from .coreset import SelectionConfig, select_coreset_blo, select_influence, select_random
from .datasets import TaskDataset, validate_stream
from .models import (
    ModelParams,
    ModelSpec,
    accuracy,
    cross_entropy,
    forward_logits_flat,
    grow_head,
    init_model,
)

# stream ids for per-task deterministic RNG: default_rng([seed, task_id, stream])
_RNG_INIT, _RNG_SHUFFLE, _RNG_ATTACK, _RNG_REPLAY, _RNG_SELECT = range(5)

CORESET_METHODS = ("blo", "random", "influence")


@dataclass
class ClassStore:
    class_id: int
    X: np.ndarray
    indices: np.ndarray
    source_task: int


@dataclass
class MemoryBank:
    """Per-class exemplar store with a hard capacity per class."""

    capacity_per_class: int
    stores: dict[int, ClassStore] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.stores

    def classes(self) -> list[int]:
        return sorted(self.stores)

    def size(self) -> int:
        return sum(len(s.X) for s in self.stores.values())

    def add_class(self, class_id: int, X: np.ndarray, indices: np.ndarray,
                  source_task: int) -> None:
        if class_id in self.stores:
            raise ValueError(f"class {class_id} is already banked")
        if len(X) > self.capacity_per_class:
            raise ValueError(
                f"{len(X)} exemplars exceed the per-class capacity "
                f"{self.capacity_per_class}"
            )
        self.stores[class_id] = ClassStore(
            class_id, np.asarray(X, dtype=np.float64),
            np.asarray(indices, dtype=np.int64), source_task,
        )

    def all_X(self) -> np.ndarray:
        return np.concatenate([self.stores[c].X for c in self.classes()])

    def all_class_ids(self) -> np.ndarray:
        return np.concatenate(
            [np.full(len(self.stores[c].X), c, dtype=np.int64) for c in self.classes()]
        )

    def copy(self) -> "MemoryBank":
        return MemoryBank(
            self.capacity_per_class,
            {c: ClassStore(s.class_id, s.X, s.indices, s.source_task)
             for c, s in self.stores.items()},
        )

    def to_dict(self) -> dict:
        return {
            "capacity_per_class": self.capacity_per_class,
            "classes": {
                str(c): {
                    "indices": s.indices.tolist(),
                    "source_task": s.source_task,
                }
                for c, s in sorted(self.stores.items())
            },
        }


@dataclass(frozen=True)
class CilConfig:
    gamma: float
    attack: AttackConfig
    epochs_per_task: int
    lr: float
    momentum: float
    coreset_method: str
    selection: SelectionConfig
    per_class_capacity: int
    seed: int
    batch_size: int = 32
    hidden_dims: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        # gamma = 0 is the ablation switch; positive values follow the sweep range
        if not (self.gamma == 0.0 or 1e-3 <= self.gamma <= 1.0):
            raise ValueError(
                f"gamma must be 0 (ablation) or in [1e-3, 1], got {self.gamma}"
            )
        if self.coreset_method not in CORESET_METHODS:
            raise ValueError(
                f"coreset_method must be one of {CORESET_METHODS}, "
                f"got {self.coreset_method!r}"
            )
        if self.per_class_capacity < 1:
            raise ValueError("per_class_capacity must be positive")
        if self.epochs_per_task < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_task and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))


@dataclass
class MetricsMatrix:
    """Lower-triangular (time_step, task) -> (standard, robust) accuracy grid."""

    num_tasks: int
    cells: dict[tuple[int, int], tuple[float, float]]
    seed: int
    config: dict

    def rows(self):
        for (t, j) in sorted(self.cells):
            sa, ra = self.cells[(t, j)]
            yield t, j, sa, ra


@dataclass
class RunResult:
    matrix: MetricsMatrix
    models: list[ModelParams]
    bank: MemoryBank
    class_order: list[int]


def _kl_rows(p_old: np.ndarray, log_p_old: np.ndarray, theta_new: Tensor,
             spec_new: ModelSpec, X_t: Tensor, ncols: int) -> Tensor:
    """Per-row KL(old || new) over the first ``ncols`` logit columns."""
    logits_new = forward_logits_flat(spec_new, theta_new, X_t)
    if logits_new.shape[1] > ncols:
        logits_new = ad.slice_cols(logits_new, ncols)
    log_q = ad.log_softmax(logits_new)
    neg_cross = ad.scale(ad.tsum(ad.mul(Tensor(p_old), log_q), axis=1), -1.0)
    return ad.add(neg_cross, Tensor(np.sum(p_old * log_p_old, axis=1)))


def _old_distribution(old: ModelParams, X: np.ndarray, ncols: int):
    logits = forward_logits_flat(old.spec, Tensor(old.theta), X).data[:, :ncols]
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.exp(log_p), log_p


def _disparity_rows_tensor(old: ModelParams, spec_new: ModelSpec, theta_new: Tensor,
                           X_t: Tensor, ncols: int) -> Tensor:
    p_old, log_p_old = _old_distribution(old, X_t.data, ncols)
    return _kl_rows(p_old, log_p_old, theta_new, spec_new, X_t, ncols)


def _disparity_rows_input(old: ModelParams, new_spec: ModelSpec, new_theta: np.ndarray,
                          X_t: Tensor, ncols: int) -> Tensor:
    """Per-row KL with gradients flowing to the input through both models."""
    logits_old = forward_logits_flat(old.spec, Tensor(old.theta), X_t)
    if logits_old.shape[1] > ncols:
        logits_old = ad.slice_cols(logits_old, ncols)
    logits_new = forward_logits_flat(new_spec, Tensor(new_theta), X_t)
    if logits_new.shape[1] > ncols:
        logits_new = ad.slice_cols(logits_new, ncols)
    p = ad.softmax(logits_old)
    diff = ad.sub(ad.log_softmax(logits_old), ad.log_softmax(logits_new))
    return ad.tsum(ad.mul(p, diff), axis=1)


def disparity(model_a: ModelParams, model_b: ModelParams, X) -> float:
    """Mean KL(softmax(a) || softmax(b)) over the shared logit columns."""
    if model_a.spec.input_dim != model_b.spec.input_dim:
        raise ValueError(
            f"input dims differ: {model_a.spec.input_dim} vs {model_b.spec.input_dim}"
        )
    X = np.asarray(X, dtype=np.float64)
    ncols = min(model_a.spec.num_classes, model_b.spec.num_classes)
    rows = _disparity_rows_tensor(model_a, model_b.spec, Tensor(model_b.theta),
                                  Tensor(X), ncols)
    return float(rows.data.mean())


def _disparity_attack(old: ModelParams, new: ModelParams, X: np.ndarray,
                      attack: AttackConfig, ncols: int, rng=None) -> np.ndarray:
    """PGD ascent on the per-row disparity with respect to the input."""

    def loss_fn(_model, X_t, _y):
        return _disparity_rows_input(old, new.spec, new.theta, X_t, ncols)

    return pgd_attack(new, X, None, attack, loss_fn=loss_fn, rng=rng)


def lwf_loss(new: ModelParams, old: ModelParams, bank: MemoryBank,
             attack: AttackConfig, theta: Tensor | None = None, rng=None) -> Tensor:
    """Clean plus worst-case distillation disparity on the banked exemplars.

    Gradients flow only to the new model: the old model's predictions and the
    maximizing perturbation both enter as constants. Pass a tape-watched
    ``theta`` to train through this loss.
    """
    if bank.is_empty():
        raise ValueError("the memory bank is empty; there is nothing to distill")
    X = bank.all_X()
    ncols = min(old.spec.num_classes, new.spec.num_classes)
    th = theta if theta is not None else Tensor(new.theta)
    clean = ad.tmean(_disparity_rows_tensor(old, new.spec, th, Tensor(X), ncols))
    if attack.epsilon == 0.0:
        return ad.scale(clean, 2.0)
    X_adv = _disparity_attack(old, new, X, attack, ncols, rng=rng)
    adv = ad.tmean(_disparity_rows_tensor(old, new.spec, th, Tensor(X_adv), ncols))
    return ad.add(clean, adv)


def _derive_class_order(old: Optional[ModelParams], bank: MemoryBank,
                        task: TaskDataset, known: Optional[list[int]]) -> list[int]:
    if known is not None:
        order = list(known)
    else:
        banked = sorted(bank.stores.values(), key=lambda s: (s.source_task, s.class_id))
        order = [s.class_id for s in banked]
    for c in task.class_ids:
        if c not in order:
            order.append(c)
    return order


def train_task(old: Optional[ModelParams], task: TaskDataset, bank: MemoryBank,
               cfg: CilConfig, class_order: Optional[list[int]] = None) -> ModelParams:
    """Minibatch SGD on the adversarial loss plus gamma * distillation loss.

    With ``gamma > 0`` and a non-empty bank, each minibatch is the new-task
    batch concatenated with a labeled replay draw from the bank (the replay
    draw also feeds the distillation terms). With ``gamma = 0`` the bank is
    ignored and this is plain adversarial training on the task.

    ``old`` is the model carried over from the previous task (None at t=1);
    it seeds the new parameters and serves as the frozen distillation
    teacher. The output head is grown to cover the task's new classes.
    """
    order = _derive_class_order(old, bank, task, class_order)
    col_of = {c: i for i, c in enumerate(order)}
    missing = set(np.unique(task.y_train).tolist()) - set(col_of)
    if missing:
        raise ValueError(f"labels {sorted(missing)} outside the known classes")
    K = len(order)
    input_dim = task.X_train.shape[1]

    init_seed = np.random.default_rng([cfg.seed, task.task_id, _RNG_INIT])
    if old is None:
        model = init_model(ModelSpec(input_dim, cfg.hidden_dims, K),
                           int(init_seed.integers(2**63)))
    else:
        model = grow_head(old, K, int(init_seed.integers(2**63)))
    spec = model.spec

    y_cols = np.array([col_of[c] for c in task.y_train], dtype=np.int64)
    use_lwf = cfg.gamma > 0 and not bank.is_empty()
    K_old = old.spec.num_classes if old is not None else 0

    rng_shuffle = np.random.default_rng([cfg.seed, task.task_id, _RNG_SHUFFLE])
    rng_attack = np.random.default_rng([cfg.seed, task.task_id, _RNG_ATTACK])
    rng_replay = np.random.default_rng([cfg.seed, task.task_id, _RNG_REPLAY])

    theta = model.theta.copy()
    velocity = np.zeros_like(theta)
    n_train = len(y_cols)
    bank_X = bank.all_X() if use_lwf else None
    bank_cols = (
        np.array([col_of[c] for c in bank.all_class_ids()], dtype=np.int64)
        if use_lwf
        else None
    )

    for _ in range(cfg.epochs_per_task):
        perm = rng_shuffle.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            Xb, yb = task.X_train[idx], y_cols[idx]
            Xs = ys = None
            if use_lwf:
                take = min(len(bank_X), cfg.batch_size)
                ridx = rng_replay.choice(len(bank_X), size=take, replace=False)
                Xs, ys = bank_X[ridx], bank_cols[ridx]
                Xb = np.concatenate([Xb, Xs])
                yb = np.concatenate([yb, ys])
            current = ModelParams(spec, theta)
            X_at = pgd_attack(current, Xb, yb, cfg.attack, rng=rng_attack)
            with Tape() as tape:
                th = Tensor(theta)
                tape.watch(th)
                loss = cross_entropy(forward_logits_flat(spec, th, X_at), yb)
                if use_lwf:
                    clean = ad.tmean(
                        _disparity_rows_tensor(old, spec, th, Tensor(Xs), K_old)
                    )
                    if cfg.attack.epsilon > 0:
                        Xs_adv = _disparity_attack(
                            old, current, Xs, cfg.attack, K_old, rng=rng_replay
                        )
                        adv = ad.tmean(
                            _disparity_rows_tensor(old, spec, th, Tensor(Xs_adv), K_old)
                        )
                        lwf = ad.add(clean, adv)
                    else:
                        lwf = ad.scale(clean, 2.0)
                    loss = ad.add(loss, ad.scale(lwf, cfg.gamma))
                (g,) = tape.grad(loss, [th])
            velocity = cfg.momentum * velocity + g.data
            theta = theta - cfg.lr * velocity
    return ModelParams(spec, theta)


def _selection_cfg(cfg: CilConfig, n: int, task_id: int, col: int) -> SelectionConfig:
    seed = int(np.random.default_rng(
        [cfg.seed, task_id, _RNG_SELECT, col]
    ).integers(2**63))
    return replace(cfg.selection, n=n, seed=seed)


def update_memory_bank(bank: MemoryBank, task: TaskDataset, cfg: CilConfig,
                       class_order: Optional[list[int]] = None) -> MemoryBank:
    """Append per-class coresets of the task's train split; old entries untouched."""
    order = _derive_class_order(None, bank, task, class_order)
    col_of = {c: i for i, c in enumerate(order)}
    y_cols = np.array([col_of[c] for c in task.y_train], dtype=np.int64)
    out = bank.copy()
    for c in sorted(task.class_ids):
        cand = np.flatnonzero(task.y_train == c)
        if cand.size == 0:
            continue
        n = min(cfg.per_class_capacity, cand.size)
        if cfg.coreset_method == "random":
            seed = int(np.random.default_rng(
                [cfg.seed, task.task_id, _RNG_SELECT, col_of[c]]
            ).integers(2**63))
            rel = select_random((task.X_train[cand], y_cols[cand]), n, seed)
            sel = cand[rel]
        elif cfg.coreset_method == "blo":
            sel_cfg = _selection_cfg(cfg, n, task.task_id, col_of[c])
            sel = select_coreset_blo(
                (task.X_train, y_cols), sel_cfg, candidate_idx=cand
            ).indices
        else:  # influence
            sel_cfg = _selection_cfg(cfg, n, task.task_id, col_of[c])
            sel = np.sort(select_influence(
                (task.X_train, y_cols), n, sel_cfg, candidate_idx=cand
            ))
        out.add_class(c, task.X_train[sel], sel, task.task_id)
    return out


def eval_attack_config(train_attack: AttackConfig, steps: int = 20) -> AttackConfig:
    """Evaluation-time attack: same radius and bounds, more steps, no random start."""
    return AttackConfig(
        epsilon=train_attack.epsilon,
        steps=steps,
        step_size=2.5 * train_attack.epsilon / steps if train_attack.epsilon > 0 else None,
        random_start=False,
        input_bounds=train_attack.input_bounds,
    )


def run_cil(stream: list[TaskDataset], cfg: CilConfig) -> RunResult:
    """Train through the task stream and grade every seen task at every step.

    For each time step t: train on task t (with the bank built from tasks
    < t), record standard and robust accuracy on the test split of every task
    <= t, then select this task's coreset into the bank.
    """
    validate_stream(stream)
    eval_cfg = eval_attack_config(cfg.attack)
    bank = MemoryBank(cfg.per_class_capacity)
    model: Optional[ModelParams] = None
    class_order: list[int] = []
    cells: dict[tuple[int, int], tuple[float, float]] = {}
    models: list[ModelParams] = []

    for t, task in enumerate(stream, start=1):
        for c in task.class_ids:
            if c not in class_order:
                class_order.append(c)
        model = train_task(model, task, bank, cfg, class_order=class_order)
        models.append(model)
        col_of = {c: i for i, c in enumerate(class_order)}
        for j, past in enumerate(stream[:t], start=1):
            y_cols = np.array([col_of[c] for c in past.y_test], dtype=np.int64)
            sa = accuracy(model, past.X_test, y_cols)
            ra = robust_accuracy(model, past.X_test, y_cols, eval_cfg)
            cells[(t, j)] = (sa, ra)
        bank = update_memory_bank(bank, task, cfg, class_order=class_order)

    matrix = MetricsMatrix(
        num_tasks=len(stream), cells=cells, seed=cfg.seed, config=_config_echo(cfg)
    )
    return RunResult(matrix=matrix, models=models, bank=bank, class_order=class_order)


def _config_echo(cfg: CilConfig) -> dict:
    from dataclasses import asdict

    doc = asdict(cfg)
    doc["hidden_dims"] = list(cfg.hidden_dims)
    doc["attack"]["input_bounds"] = list(cfg.attack.input_bounds)
    if doc["selection"].get("model_spec") is not None:
        ms = cfg.selection.model_spec
        doc["selection"]["model_spec"] = {
            "input_dim": ms.input_dim,
            "hidden_dims": list(ms.hidden_dims),
            "num_classes": ms.num_classes,
        }
    if doc["selection"].get("attack") is not None:
        doc["selection"]["attack"]["input_bounds"] = list(
            cfg.selection.attack.input_bounds
        )
    return doc
