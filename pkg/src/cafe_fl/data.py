"""Synthetic two-group datasets and person-level client partitioning.

A *person* is a contiguous block of examples sharing a small random offset
from its group's class means, so single-person clients are internally
homogeneous.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .nn import Batch
from .protocol import ClientState

PARTITION_MODES = ("multi_person", "single_and_multi", "single_only")


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    persons: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.groups[idx], self.persons[idx])

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels, self.groups)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.groups, self.persons):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian two-group, two-class generator.

    ``group_means[g][c]`` is the mean of class ``c`` in group ``g``;
    ``label_noise[g]`` the probability of flipping a label in group ``g``.
    """

    dim: int
    group_means: tuple
    label_noise: tuple[float, float] = (0.0, 0.0)
    group_ratio: float = 0.5
    n_total: int = 1000
    n_persons: tuple[int, int] = (1, 1)
    person_scale: float = 0.0
    noise_scale: float = 1.0
    positive_rate: float = 0.5

    def __post_init__(self):
        means = np.asarray(self.group_means, dtype=np.float64)
        if self.dim < 1:
            raise InputError("dim must be >= 1")
        if means.shape != (2, 2, self.dim):
            raise InputError(f"group_means must have shape (2, 2, {self.dim}), got {means.shape}")
        if len(self.label_noise) != 2 or not all(0.0 <= p < 0.5 for p in self.label_noise):
            raise InputError("label_noise needs two flip probabilities in [0, 0.5)")
        if not 0.0 <= self.group_ratio <= 1.0:
            raise InputError("group_ratio must lie in [0, 1]")
        if self.n_total < 1:
            raise InputError("n_total must be >= 1")
        if len(self.n_persons) != 2 or min(self.n_persons) < 1:
            raise InputError("n_persons needs a positive person count per group")
        if not 0.0 < self.positive_rate < 1.0:
            raise InputError("positive_rate must lie in (0, 1)")

    @property
    def means(self) -> np.ndarray:
        return np.asarray(self.group_means, dtype=np.float64)

    def group_sizes(self) -> tuple[int, int]:
        n0 = int(round(self.group_ratio * self.n_total))
        return n0, self.n_total - n0


def generate(spec: SyntheticSpec, seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    means = spec.means
    feats, labels, groups, persons = [], [], [], []
    person_id = 0
    for g, size in enumerate(spec.group_sizes()):
        if size == 0:
            continue
        n_p = min(spec.n_persons[g], size)
        blocks = np.array_split(np.arange(size), n_p)
        for block in blocks:
            m = block.size
            offset = spec.person_scale * rng.standard_normal(spec.dim)
            clean = (rng.random(m) < spec.positive_rate).astype(np.int64)
            x = means[g][clean] + offset + spec.noise_scale * rng.standard_normal((m, spec.dim))
            flip = rng.random(m) < spec.label_noise[g]
            feats.append(x)
            labels.append(np.where(flip, 1 - clean, clean))
            groups.append(np.full(m, g, dtype=np.int64))
            persons.append(np.full(m, person_id, dtype=np.int64))
            person_id += 1
    return LabeledDataset(
        np.concatenate(feats),
        np.concatenate(labels).astype(np.int64),
        np.concatenate(groups),
        np.concatenate(persons),
    )


def disparity_fixture(n_total: int = 1500, n_persons=(20, 5), dim: int = 8) -> SyntheticSpec:
    """Majority/minority fixture: the minority group has noisier labels and a
    rotated class boundary, so a model fit to the pooled data under-serves it."""
    means = np.zeros((2, 2, dim))
    means[0, 0, 0], means[0, 1, 0] = -1.0, 1.0
    means[1, 0, 0], means[1, 1, 0] = -0.5, 0.5
    means[1, 0, 1], means[1, 1, 1] = -1.0, 1.0
    means[1, :, 2] = 0.75
    return SyntheticSpec(
        dim=dim,
        group_means=means.tolist(),
        label_noise=(0.0, 0.2),
        group_ratio=0.8,
        n_total=n_total,
        n_persons=tuple(n_persons),
        person_scale=0.2,
    )


@dataclass(frozen=True)
class PartitionSpec:
    """``client_compositions[k] = (group-0 persons, group-1 persons)`` for client ``k``."""

    mode: str = "multi_person"
    client_compositions: tuple = ((4, 1),)
    train_ratio: float = 0.8
    shuffle: bool = True

    def problems(self) -> list[str]:
        out = []
        if self.mode not in PARTITION_MODES:
            out.append(f"mode: must be one of {PARTITION_MODES}")
        if not self.client_compositions:
            out.append("client_compositions: must be non-empty")
        sizes = [int(a) + int(b) for a, b in self.client_compositions]
        if any(s < 1 for s in sizes):
            out.append("client_compositions: every client needs at least one person")
        if self.mode == "single_only" and any(s != 1 for s in sizes):
            out.append("client_compositions: single_only requires exactly one person per client")
        if self.mode == "single_and_multi" and not (1 in sizes and any(s > 1 for s in sizes)):
            out.append("client_compositions: single_and_multi needs single- and multi-person clients")
        if not 0.0 < self.train_ratio < 1.0:
            out.append("train_ratio: must lie in (0, 1)")
        return out


def split_ordered(data, ratio: float = 0.8, shuffle: bool = True, seed: int = 0):
    """Split into ``(train, eval)``; the first ``floor(ratio * n)`` go to train.

    Works on anything with ``__len__`` and ``subset``.
    """
    n = len(data)
    if n < 2:
        raise InputError("need at least two examples to split")
    if not 0.0 < ratio < 1.0:
        raise InputError("ratio must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    cut = int(np.floor(ratio * n))
    cut = min(max(cut, 1), n - 1)
    return data.subset(order[:cut]), data.subset(order[cut:])


def partition(dataset: LabeledDataset, pspec: PartitionSpec, seed: int = 0) -> list[ClientState]:
    problems = pspec.problems()
    if problems:
        raise ConfigError(problems)
    rng = np.random.default_rng(seed)
    pools = []
    for g in (0, 1):
        ids = np.unique(dataset.persons[dataset.groups == g])
        pools.append(list(rng.permutation(ids)))
    need = [sum(int(c[g]) for c in pspec.client_compositions) for g in (0, 1)]
    for g in (0, 1):
        if need[g] > len(pools[g]):
            raise ConfigError(f"compositions need {need[g]} group-{g} persons, dataset has {len(pools[g])}")

    clients = []
    for k, comp in enumerate(pspec.client_compositions):
        persons = [pools[0].pop(0) for _ in range(int(comp[0]))] + [pools[1].pop(0) for _ in range(int(comp[1]))]
        idx = np.concatenate([np.flatnonzero(dataset.persons == p) for p in sorted(persons)])
        train, evald = split_ordered(dataset.subset(idx), pspec.train_ratio, pspec.shuffle, seed=seed * 1000 + k)
        clients.append(ClientState(k, train.as_batch(), evald.as_batch(), rng_seed=seed))
    return clients


def save_csv(dataset: LabeledDataset, path) -> None:
    """Columns ``x0..x{d-1}, label, group, person``; floats written round-trip exact."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(dataset.dim)] + ["label", "group", "person"])
        for x, y, g, p in zip(dataset.features, dataset.labels, dataset.groups, dataset.persons):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(g), int(p)])


def load_csv(path) -> LabeledDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-3:] != ["label", "group", "person"] or not all(h.startswith("x") for h in header[:-3]):
            raise InputError(f"{path}: unexpected header {header}")
        rows = [row for row in reader if row]
    if not rows:
        raise InputError(f"{path}: no data rows")
    d = len(header) - 3
    arr = np.array([[float(v) for v in row[:d]] for row in rows])
    meta = np.array([[int(v) for v in row[d:]] for row in rows], dtype=np.int64)
    return LabeledDataset(arr, meta[:, 0], meta[:, 1], meta[:, 2])
