"""Synthetic Gaussian-mixture corpus, Dirichlet label-skew partitioning and the
server's reserved set.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CENTER_RADIUS = 3.0
MAX_PARTITION_RETRIES = 100


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledSet":
        """Rows by integer indices or by a boolean mask of length len(self)."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            if idx.shape != (len(self),):
                raise ValueError("boolean mask must match the number of samples")
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64)
        return LabeledSet(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @classmethod
    def concat(cls, sets: Sequence["LabeledSet"]) -> "LabeledSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.labels for s in sets]),
            sets[0].num_classes,
        )


@dataclass
class FederationData:
    client_train: List[LabeledSet]
    client_test: List[LabeledSet]
    reserved: LabeledSet
    reserved_classwise: List[LabeledSet]
    global_test: LabeledSet

    @property
    def num_clients(self) -> int:
        return len(self.client_train)


def class_centers(num_classes: int, input_dim: int, radius: float = CENTER_RADIUS) -> np.ndarray:
    """Scaled coordinate unit vectors; random unit directions (fixed seed) if
    there are more classes than dimensions."""
    if num_classes <= input_dim:
        return radius * np.eye(num_classes, input_dim)
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(num_classes, input_dim))
    return radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def make_gaussian_mixture(
    num_classes: int,
    samples_per_class: int,
    input_dim: int,
    spread: float,
    seed: int,
    radius: float = CENTER_RADIUS,
) -> LabeledSet:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = class_centers(num_classes, input_dim, radius)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.normal(size=(labels.shape[0], input_dim))
    features = centers[labels] + spread * noise
    order = rng.permutation(labels.shape[0])
    return LabeledSet(features[order], labels[order], num_classes)


def _draw_partition(labels, num_clients, alpha, rng, num_classes):
    shards: List[List[int]] = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(props) * idx.size).astype(np.int64)[:-1]
        for i, part in enumerate(np.split(idx, cuts)):
            shards[i].extend(part.tolist())
    return shards


def dirichlet_partition(
    data: LabeledSet,
    num_clients: int,
    alpha: float,
    seed: int,
    min_size: int = 1,
) -> List[LabeledSet]:
    """Label-skew split: each class is divided among clients by Dir(alpha) proportions.

    Whole-draw resampling (up to 100 attempts) until every client holds at least
    `min_size` samples; afterwards, samples are moved one at a time from the
    largest shard into deficient ones.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    counts = data.class_counts()
    present = counts[counts > 0]
    if np.any(present < num_clients):
        raise ValueError("every class needs at least num_clients samples")
    if len(data) < num_clients * min_size:
        raise ValueError(f"{len(data)} samples cannot give {num_clients} clients {min_size} each")

    rng = np.random.default_rng(seed)
    for _ in range(MAX_PARTITION_RETRIES):
        shards = _draw_partition(data.labels, num_clients, alpha, rng, data.num_classes)
        if min(len(s) for s in shards) >= min_size:
            break
    else:
        logger.warning("dirichlet_partition: retry cap hit, topping up small shards")
        for i in range(num_clients):
            while len(shards[i]) < min_size:
                donor = max(range(num_clients), key=lambda j: len(shards[j]))
                shards[i].append(shards[donor].pop())
    return [data.subset(np.sort(np.array(s, dtype=np.int64))) for s in shards]


def _stratified_take(labels: np.ndarray, fraction: float, rng, num_classes: int) -> np.ndarray:
    """Boolean mask selecting round(fraction * n) samples, apportioned across
    classes by largest remainder so every class is within 1 of its exact share."""
    n = labels.shape[0]
    counts = np.bincount(labels, minlength=num_classes)
    exact = counts * fraction
    take = np.floor(exact).astype(np.int64)
    remainder = int(round(fraction * n)) - int(take.sum())
    if remainder > 0:
        # stable order: largest fractional part first, lower class on ties
        order = np.argsort(-(exact - take), kind="stable")
        order = [c for c in order if take[c] < counts[c]]
        for c in order[:remainder]:
            take[c] += 1
    mask = np.zeros(n, dtype=bool)
    for c in range(num_classes):
        if take[c]:
            idx = np.flatnonzero(labels == c)
            mask[rng.choice(idx, size=take[c], replace=False)] = True
    return mask


def split_local(
    shard: LabeledSet, test_fraction: float, seed: int
) -> Tuple[LabeledSet, LabeledSet]:
    """Stratified train/test split of one client's shard; both sides non-empty."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(shard) < 2:
        raise ValueError("shard needs at least 2 samples to split")
    rng = np.random.default_rng(seed)
    test_mask = _stratified_take(shard.labels, test_fraction, rng, shard.num_classes)
    if not test_mask.any():
        test_mask[rng.integers(len(shard))] = True
    elif test_mask.all():
        test_mask[rng.integers(len(shard))] = False
    return shard.subset(np.flatnonzero(~test_mask)), shard.subset(np.flatnonzero(test_mask))


def expert_of_class(label, num_experts: int):
    return np.asarray(label) % num_experts


def build_reserved(
    global_test: LabeledSet, fraction: float, num_experts: int, seed: int
) -> Tuple[LabeledSet, List[LabeledSet], LabeledSet]:
    """Stratified server sample plus class-wise expert subsets (class c -> expert c mod K)."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if num_experts < 1 or num_experts > global_test.num_classes:
        raise ValueError(
            f"num_experts={num_experts} must be in [1, num_classes={global_test.num_classes}]"
        )
    rng = np.random.default_rng(seed)
    mask = _stratified_take(global_test.labels, fraction, rng, global_test.num_classes)
    reserved = global_test.subset(np.flatnonzero(mask))
    remaining = global_test.subset(np.flatnonzero(~mask))
    owner = expert_of_class(reserved.labels, num_experts)
    classwise = [reserved.subset(np.flatnonzero(owner == j)) for j in range(num_experts)]
    return reserved, classwise, remaining


def build_federation(
    *,
    num_clients: int,
    num_experts: int,
    num_classes: int,
    samples_per_class: int,
    test_samples_per_class: int,
    input_dim: int,
    spread: float,
    alpha: float,
    seed: int,
    reserved_fraction: float = 0.2,
    test_fraction: float = 0.2,
    min_client_size: int = 10,
) -> FederationData:
    """Full data layout for one run; independent seed streams for each piece."""
    seeds = np.random.SeedSequence(seed).generate_state(4)
    corpus = make_gaussian_mixture(num_classes, samples_per_class, input_dim, spread, int(seeds[0]))
    test_pool = make_gaussian_mixture(
        num_classes, test_samples_per_class, input_dim, spread, int(seeds[1])
    )
    shards = dirichlet_partition(corpus, num_clients, alpha, int(seeds[2]), min_size=min_client_size)
    client_train, client_test = [], []
    for i, shard in enumerate(shards):
        tr, te = split_local(shard, test_fraction, int(seeds[3]) + i)
        client_train.append(tr)
        client_test.append(te)
    reserved, classwise, remaining = build_reserved(test_pool, reserved_fraction, num_experts, seed)
    return FederationData(client_train, client_test, reserved, classwise, remaining)


def make_new_clients(
    *,
    num_new: int,
    num_classes: int,
    samples_per_class: int,
    input_dim: int,
    spread: float,
    alpha: float,
    seed: int,
    min_client_size: int = 10,
) -> List[LabeledSet]:
    """Fresh clients drawn from an unseen corpus, for cold-start evaluation."""
    corpus = make_gaussian_mixture(num_classes, samples_per_class, input_dim, spread, seed)
    return dirichlet_partition(corpus, num_new, alpha, seed + 1, min_size=min_client_size)


def label_entropy(data: LabeledSet) -> float:
    counts = data.class_counts().astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


# Dataset file: JSON header line {"n", "dim", "num_classes"}, then n*dim
# little-endian float32 features (row-major), then n little-endian uint16 labels.


def save_labeled_set(path: Union[str, Path], data: LabeledSet) -> None:
    if data.num_classes > 65536:
        raise ValueError("labels do not fit in uint16")
    header = {"n": len(data), "dim": data.dim, "num_classes": data.num_classes}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(data.features.astype("<f4").tobytes())
        fh.write(data.labels.astype("<u2").tobytes())


def load_labeled_set(path: Union[str, Path]) -> LabeledSet:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        n, dim = int(header["n"]), int(header["dim"])
        feats = np.frombuffer(fh.read(n * dim * 4), dtype="<f4")
        labels = np.frombuffer(fh.read(n * 2), dtype="<u2")
    if feats.size != n * dim or labels.size != n:
        raise ValueError(f"truncated dataset file {path}")
    return LabeledSet(feats.reshape(n, dim), labels, int(header["num_classes"]))
