"""Synthetic multi-class data, task streams, and a CIFAR-10 binary reader.

Blob features live in [0, 1]^dim by construction so an attack radius quoted
in 8/255-style image units transfers unchanged to the synthetic setting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise ValueError(
                f"inconsistent dataset shapes X={self.X.shape} y={self.y.shape}"
            )
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.y.min()}, {self.y.max()}]"
            )

    def __len__(self):
        return len(self.y)


@dataclass
class TaskDataset:
    """One step of a class-incremental stream. Labels are global class ids."""

    task_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        self.class_ids = tuple(sorted(int(c) for c in self.class_ids))
        allowed = set(self.class_ids)
        for name, ys in (("train", self.y_train), ("test", self.y_test)):
            bad = set(np.unique(ys).tolist()) - allowed
            if bad:
                raise ValueError(
                    f"task {self.task_id} {name} labels {sorted(bad)} outside "
                    f"class_ids {self.class_ids}"
                )


def validate_stream(stream: list[TaskDataset]) -> None:
    seen: set[int] = set()
    for task in stream:
        overlap = seen & set(task.class_ids)
        if overlap:
            raise ValueError(
                f"task {task.task_id} reuses class ids {sorted(overlap)}"
            )
        seen.update(task.class_ids)


def _center_directions(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.normal(size=(dim, max(num_classes, 2)))
    if dim >= num_classes:
        q, _ = np.linalg.qr(raw)
        dirs = q[:, :num_classes].T
    else:
        dirs = rng.normal(size=(num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs


def gen_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    center_scale: float = 8.0,
) -> Dataset:
    """Gaussian class clouds around well-separated centers, rescaled to [0, 1]^dim.

    Centers sit at radius ``center_scale * spread`` along (near-)orthogonal
    directions; the radius is raised if needed so every pair of centers is at
    least ``4 * spread`` apart. The map into the unit cube is a fixed affine
    transform (not data-dependent), with tail samples clipped at the walls.
    """
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")
    if num_classes < 2 or per_class < 1 or spread <= 0:
        raise ValueError("num_classes >= 2, per_class >= 1 and spread > 0 required")
    rng = np.random.default_rng(seed)
    dirs = _center_directions(num_classes, dim, rng)
    radius = center_scale * spread
    dists = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    min_unit = dists.min()
    if radius * min_unit < 4.0 * spread:
        radius = 4.0 * spread / min_unit
    centers = radius * dirs

    X = np.concatenate(
        [centers[k] + spread * rng.normal(size=(per_class, dim)) for k in range(num_classes)]
    )
    y = np.repeat(np.arange(num_classes), per_class)

    half_range = radius + 4.0 * spread
    X = np.clip((X + half_range) / (2.0 * half_range), 0.0, 1.0)
    centers01 = (centers + half_range) / (2.0 * half_range)
    return Dataset(
        X,
        y,
        num_classes,
        metadata={
            "generator": "blobs",
            "seed": int(seed),
            "spread": float(spread),
            "center_scale": float(center_scale),
            "centers": centers01.tolist(),
        },
    )


def plant_label_noise(dataset: Dataset, indices, seed: int) -> Dataset:
    """Flip the labels of the given indices to a random different class."""
    indices = np.asarray(indices, dtype=np.int64)
    rng = np.random.default_rng(seed)
    y = dataset.y.copy()
    for i in indices:
        choices = [c for c in range(dataset.num_classes) if c != y[i]]
        y[i] = rng.choice(choices)
    meta = dict(dataset.metadata)
    meta["noise_indices"] = sorted(int(i) for i in indices)
    return Dataset(dataset.X.copy(), y, dataset.num_classes, metadata=meta)


def split_tasks(
    dataset: Dataset,
    classes_per_task: int,
    test_fraction: float,
    seed: int,
) -> list[TaskDataset]:
    """Random class partition into tasks with a stratified train/test split."""
    K = dataset.num_classes
    if K % classes_per_task != 0:
        raise ValueError(
            f"{K} classes are not divisible into tasks of {classes_per_task}"
        )
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    class_order = rng.permutation(K)
    stream = []
    for t in range(K // classes_per_task):
        cls = sorted(class_order[t * classes_per_task : (t + 1) * classes_per_task].tolist())
        tr_idx, te_idx = [], []
        for c in cls:
            idx = np.flatnonzero(dataset.y == c)
            idx = idx[rng.permutation(len(idx))]
            n_test = int(round(test_fraction * len(idx)))
            te_idx.append(idx[:n_test])
            tr_idx.append(idx[n_test:])
        tr = np.concatenate(tr_idx)
        te = np.concatenate(te_idx)
        stream.append(
            TaskDataset(
                task_id=t + 1,
                X_train=dataset.X[tr],
                y_train=dataset.y[tr],
                X_test=dataset.X[te],
                y_test=dataset.y[te],
                class_ids=tuple(cls),
            )
        )
    validate_stream(stream)
    return stream


RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes


def load_cifar10_binary(path) -> Dataset:
    """Read the CIFAR-10 binary batch format; features scaled to [0, 1] by /255."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise ValueError(
            f"file size {len(raw)} is not a positive multiple of {RECORD_BYTES}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"label byte {labels.max()} out of range 0..9")
    X = arr[:, 1:].astype(np.float64) / 255.0
    return Dataset(X, labels, 10, metadata={"generator": "cifar10"})


def dataset_to_dict(dataset: Dataset) -> dict:
    return {
        "X": dataset.X.tolist(),
        "y": dataset.y.tolist(),
        "num_classes": dataset.num_classes,
        "metadata": dataset.metadata,
    }


def dataset_from_dict(doc: dict) -> Dataset:
    return Dataset(
        np.asarray(doc["X"], dtype=np.float64),
        np.asarray(doc["y"], dtype=np.int64),
        int(doc["num_classes"]),
        metadata=dict(doc.get("metadata", {})),
    )


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(dataset)), encoding="utf-8")


def load_dataset(path) -> Dataset:
    return dataset_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
