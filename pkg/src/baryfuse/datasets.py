"""Bundled synthetic tasks and the dataset CSV format.

Three deterministic generators: two Gaussian blobs and two interleaved
moons (2-feature classification) and exhaustive +-1 sequence parity
(sequence classification; the label is 1 when the product of the entries
is negative). Files are CSV with the label column first; sequence files
carry a `#seq,T,d` comment so rows can be reshaped back, and every file
carries `#split,<tag>`.
"""

import io
from dataclasses import dataclass
from itertools import product

import numpy as np

__all__ = [
    "Dataset",
    "two_gaussians",
    "two_moons",
    "sequence_parity",
    "save_dataset",
    "load_dataset",
]

_SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """inputs: (N, d) vectors or (N, T, d) sequences; labels: class indices."""

    inputs: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"
    num_classes: int = 0  # 0 = infer from labels

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(
                f"{len(self.inputs)} inputs vs {len(self.labels)} labels"
            )
        if self.split_tag not in _SPLITS:
            raise ValueError(f"split_tag must be one of {_SPLITS}")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("labels must be < num_classes")
        if len(self.labels) and int(self.labels.min()) < 0:
            raise ValueError("labels must be >= 0")

    def __len__(self):
        return len(self.labels)


def two_gaussians(n_per_class: int, seed: int, split_tag: str = "train") -> Dataset:
    """Two isotropic blobs at (-1.5, -1.5) and (1.5, 1.5), unit variance."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1.0, (n_per_class, 2)) - 1.5
    b = rng.normal(0, 1.0, (n_per_class, 2)) + 1.5
    x = np.vstack([a, b])
    y = np.repeat([0, 1], n_per_class)
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], split_tag, 2)


def two_moons(n_per_class: int, seed: int, noise: float = 0.1, split_tag: str = "train") -> Dataset:
    """Two interleaved half circles with Gaussian coordinate noise."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, np.pi, n_per_class)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    t = rng.uniform(0.0, np.pi, n_per_class)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.vstack([upper, lower]) + rng.normal(0, noise, (2 * n_per_class, 2))
    y = np.repeat([0, 1], n_per_class)
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], split_tag, 2)


def sequence_parity(length: int = 8, split_tag: str = "train") -> Dataset:
    """All 2^length sequences of +-1; label 1 when the product is negative.

    The task is exhaustive and deterministic, so every split sees the full
    set; training protocols differ only through their shuffling seeds.
    """
    if not (1 <= length <= 16):
        raise ValueError("length must be in [1, 16]")
    seqs = np.array(list(product([-1.0, 1.0], repeat=length)))
    labels = (seqs.prod(axis=1) < 0).astype(np.int64)
    return Dataset(seqs[:, :, None], labels, split_tag, 2)


def save_dataset(dataset: Dataset, path: str) -> None:
    """Write label-first CSV; sequences are flattened row-major per item."""
    buf = io.StringIO()
    buf.write(f"#split,{dataset.split_tag}\n")
    x = dataset.inputs
    if x.ndim == 3:
        buf.write(f"#seq,{x.shape[1]},{x.shape[2]}\n")
        x = x.reshape(x.shape[0], -1)
    elif x.ndim != 2:
        raise ValueError(f"cannot serialize inputs of shape {dataset.inputs.shape}")
    for label, row in zip(dataset.labels, x):
        buf.write(str(int(label)))
        buf.write(",")
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def load_dataset(path: str) -> Dataset:
    split_tag = "train"
    seq_shape = None
    labels = []
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split(",")
                if parts[0] == "split" and len(parts) == 2:
                    split_tag = parts[1]
                elif parts[0] == "seq" and len(parts) == 3:
                    seq_shape = (int(parts[1]), int(parts[2]))
                continue
            cells = line.split(",")
            labels.append(int(cells[0]))
            rows.append([float(v) for v in cells[1:]])
    if not rows:
        raise ValueError(f"no data rows in {path}")
    x = np.asarray(rows, dtype=np.float64)
    if seq_shape is not None:
        T, d = seq_shape
        if x.shape[1] != T * d:
            raise ValueError(
                f"sequence rows have {x.shape[1]} values, expected {T}*{d}"
            )
        x = x.reshape(len(rows), T, d)
    return Dataset(x, np.asarray(labels), split_tag)
