"""Pair datasets with implicit negatives, unbalanced/balanced samplers, a
leakage-free K-fold protocol, and a linear-Gaussian synthetic generator with
a closed-form log-likelihood-ratio oracle.

A dataset with N families yields N positive pairs and N*(N-1) ordered
negative pairs (parent from family i, child from family j, i != j). The
negative space is only ever sampled, never materialized.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .numerics import ContractError, Rng


@dataclass(frozen=True)
class Entity:
    family_id: int
    role: str  # "parent" | "child"
    features: np.ndarray


@dataclass(frozen=True)
class GeneratorMeta:
    n_families: int
    dim: int
    rho: float
    sigma: float
    nonlinear: bool
    seed: int


@dataclass
class PairDataset:
    """One parent and one child feature vector per family, aligned by row."""

    parents: np.ndarray  # (N, d)
    children: np.ndarray  # (N, d)
    meta: GeneratorMeta | None = None

    def __post_init__(self):
        if self.parents.shape != self.children.shape:
            raise ContractError("parent/child feature blocks must align")
        if self.n_families < 2:
            raise ContractError("a pair dataset needs at least 2 families")

    @property
    def n_families(self) -> int:
        return self.parents.shape[0]

    @property
    def dim(self) -> int:
        return self.parents.shape[1]

    def entities(self) -> Iterator[Entity]:
        for i in range(self.n_families):
            yield Entity(i, "parent", self.parents[i])
            yield Entity(i, "child", self.children[i])


@dataclass(frozen=True)
class PairSample:
    parent_index: int
    child_index: int
    label: int

    def __post_init__(self):
        if self.label != int(self.parent_index == self.child_index):
            raise ContractError("label must be 1 iff family indices match")


@dataclass
class Batch:
    """Pair samples as aligned index/label arrays, with the declared mix."""

    parent_idx: np.ndarray
    child_idx: np.ndarray
    labels: np.ndarray
    m_pos: int
    c_ratio: int

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[PairSample]:
        for p, c, y in zip(self.parent_idx, self.child_idx, self.labels):
            yield PairSample(int(p), int(c), int(y))

    def features(self, dataset: PairDataset) -> tuple[np.ndarray, np.ndarray]:
        return dataset.parents[self.parent_idx], dataset.children[self.child_idx]


@dataclass(frozen=True)
class SamplerConfig:
    m_pos: int
    c_ratio: int = 1

    def validate(self, n_families: int) -> None:
        if self.m_pos < 1:
            raise ContractError("positives per batch must be >= 1")
        if self.c_ratio < 1:
            raise ContractError("negative multiplier C must be >= 1")
        if self.m_pos > n_families:
            raise ContractError(
                f"batch wants {self.m_pos} positives, split has {n_families} families"
            )
        budget = n_families * (n_families - 1)
        if self.m_pos * self.c_ratio > budget:
            raise ContractError(
                f"batch wants {self.m_pos * self.c_ratio} negatives, "
                f"split offers {budget}"
            )


def negative_count(n_families: int) -> int:
    """Number of ordered cross-family pairs for N families."""
    if n_families < 1:
        raise ContractError("family count must be >= 1")
    return n_families * (n_families - 1)


def generate_synthetic(
    n_families: int = 200,
    dim: int = 16,
    rho: float = 0.8,
    sigma: float = 0.25,
    nonlinear: bool = False,
    seed: int = 0,
) -> PairDataset:
    """Sample a dataset of correlated parent/child feature vectors.

    Per family the parent latent is standard normal and the child latent is
    rho * parent + sqrt(1 - rho^2) * fresh noise, so positive pairs share
    per-dimension correlation rho. Linear mode adds observation noise sigma;
    nonlinear mode instead passes the latent through a fixed random mixing
    followed by tanh (no closed-form oracle there).
    """
    if not 0.0 < rho < 1.0:
        raise ContractError("rho must be in (0, 1)")
    if dim < 1:
        raise ContractError("dim must be >= 1")
    if sigma < 0.0:
        raise ContractError("sigma must be >= 0")
    if n_families < 2:
        raise ContractError("need at least 2 families")
    rng = Rng(seed, "synthetic")
    u = rng.split("parent_latent").normal((n_families, dim))
    w = rng.split("child_noise").normal((n_families, dim))
    v = rho * u + np.sqrt(1.0 - rho * rho) * w
    if nonlinear:
        mixing = rng.split("mixing").normal((dim, dim)) / np.sqrt(dim)
        parents = np.tanh(u @ mixing)
        children = np.tanh(v @ mixing)
    else:
        parents = u + sigma * rng.split("parent_obs").normal((n_families, dim))
        children = v + sigma * rng.split("child_obs").normal((n_families, dim))
    meta = GeneratorMeta(n_families, dim, rho, sigma, nonlinear, seed)
    return PairDataset(parents, children, meta)


def bayes_llr(u: np.ndarray, v: np.ndarray, meta: GeneratorMeta) -> float:
    """Log-likelihood ratio kin-vs-unrelated for one linear-mode feature pair.

    Per dimension the joint is N(0, S1) under kinship with
    S1 = [[1+s^2, rho], [rho, 1+s^2]] and N(0, S0) with S0 = diag(1+s^2)
    otherwise; dimensions are independent so the LLR sums.
    """
    if meta.nonlinear:
        raise ContractError("the Bayes oracle is defined for linear mode only")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    a = 1.0 + meta.sigma**2
    r = meta.rho
    det1 = a * a - r * r
    # quadratic-form difference of the 2x2 inverses, factored so rho
    # multiplies it directly (rho=0 yields an exact zero)
    su, sv, suv = np.sum(u * u), np.sum(v * v), np.sum(u * v)
    q_diff = (r / det1) * (r * (su + sv) / a - 2.0 * suv)
    log_det_term = meta.dim * np.log(det1 / (a * a))
    return float(-0.5 * q_diff - 0.5 * log_det_term)


def bayes_scores(
    dataset: PairDataset, parent_idx: np.ndarray, child_idx: np.ndarray
) -> np.ndarray:
    """LLR for each listed pair, mapped through sigmoid so the scores live on
    the same (0, 1) scale as model predictions (LLR 0 maps to 0.5)."""
    if dataset.meta is None:
        raise ContractError("dataset has no generator metadata")
    llr = np.array(
        [
            bayes_llr(dataset.parents[p], dataset.children[c], dataset.meta)
            for p, c in zip(parent_idx, child_idx)
        ]
    )
    return 1.0 / (1.0 + np.exp(-llr))


def _sample_negatives(
    families: np.ndarray, count: int, rng: Rng, taken: set[tuple[int, int]] | None = None
) -> list[tuple[int, int]]:
    """Uniform ordered cross-family pairs, without replacement in-batch."""
    n = len(families)
    seen: set[tuple[int, int]] = set() if taken is None else set(taken)
    out: list[tuple[int, int]] = []
    while len(out) < count:
        i = rng.integer(n)
        j = rng.integer(n)
        if i == j:
            continue
        pair = (int(families[i]), int(families[j]))
        if pair in seen:
            continue
        seen.add(pair)
        out.append(pair)
    return out


def sample_unbalanced_batch(
    families: Sequence[int], config: SamplerConfig, rng: Rng
) -> Batch:
    """m distinct positive pairs plus m*C negatives from the split's implicit
    negative space, order randomized."""
    families = np.asarray(families, dtype=np.int64)
    config.validate(len(families))
    m, c = config.m_pos, config.c_ratio
    pos = families[rng.choice_without_replacement(len(families), m)]
    neg = _sample_negatives(families, m * c, rng)
    parent = np.concatenate([pos, np.array([p for p, _ in neg], dtype=np.int64)])
    child = np.concatenate([pos, np.array([q for _, q in neg], dtype=np.int64)])
    labels = np.concatenate([np.ones(m, dtype=np.int64), np.zeros(m * c, dtype=np.int64)])
    order = rng.permutation(len(labels))
    return Batch(parent[order], child[order], labels[order], m, c)


def sample_balanced_batch(families: Sequence[int], m_pos: int, rng: Rng) -> Batch:
    """m positives plus m negatives (the C=1 case)."""
    return sample_unbalanced_batch(families, SamplerConfig(m_pos, 1), rng)


@dataclass
class FoldSpec:
    """K disjoint family-index lists that partition the dataset."""

    folds: list[np.ndarray]

    def __post_init__(self):
        all_idx = np.concatenate(self.folds)
        if len(np.unique(all_idx)) != len(all_idx):
            raise ContractError("folds overlap")

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_families(self, fold: int) -> np.ndarray:
        return self.folds[fold]

    def train_families(self, fold: int) -> np.ndarray:
        rest = [f for i, f in enumerate(self.folds) if i != fold]
        return np.sort(np.concatenate(rest))


def make_folds(dataset: PairDataset, k: int = 5, seed: int = 0) -> FoldSpec:
    """Random family partition; negatives for a split are later drawn only
    among that split's families, so no identity crosses a fold boundary."""
    n = dataset.n_families
    if n < k:
        raise ContractError(f"cannot split {n} families into {k} folds")
    order = Rng(seed, "folds").permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds, start = [], 0
    for size in sizes:
        folds.append(np.sort(order[start : start + size]))
        start += size
    return FoldSpec(folds)


def balanced_eval_pairs(
    dataset: PairDataset, families: Sequence[int], rng: Rng
) -> Batch:
    """All positives of a split plus an equal number of sampled negatives;
    the standard balanced verification set for accuracy/ROC reporting."""
    families = np.asarray(families, dtype=np.int64)
    n = len(families)
    if n < 2:
        raise ContractError("evaluation split needs at least 2 families")
    neg = _sample_negatives(families, n, rng)
    parent = np.concatenate([families, np.array([p for p, _ in neg], dtype=np.int64)])
    child = np.concatenate([families, np.array([q for _, q in neg], dtype=np.int64)])
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    return Batch(parent, child, labels, n, 1)


# dataset file format: one header line, then CSV rows at 17 significant digits

_FILE_MAGIC = "dsmm-pairs v1"


def save_dataset(path, dataset: PairDataset) -> None:
    meta = dataset.meta
    if meta is None:
        meta = GeneratorMeta(dataset.n_families, dataset.dim, 0.5, 0.0, False, 0)
    mode = "nonlinear" if meta.nonlinear else "linear"
    header = (
        f"{_FILE_MAGIC}, N={dataset.n_families}, d={dataset.dim}, mode={mode}, "
        f"rho={meta.rho:.17g}, sigma={meta.sigma:.17g}, seed={meta.seed}"
    )
    lines = [header]
    for entity in dataset.entities():
        values = ",".join(format(v, ".17g") for v in entity.features)
        lines.append(f"{entity.family_id},{entity.role},{values}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> PairDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or not lines[0].startswith(_FILE_MAGIC):
        raise ContractError(f"not a pair-dataset file: {path}")
    fields = dict(
        part.strip().split("=", 1) for part in lines[0].split(",")[1:]
    )
    n = int(fields["N"])
    d = int(fields["d"])
    meta = GeneratorMeta(
        n_families=n,
        dim=d,
        rho=float(fields["rho"]),
        sigma=float(fields["sigma"]),
        nonlinear=fields["mode"] == "nonlinear",
        seed=int(fields["seed"]),
    )
    parents = np.full((n, d), np.nan)
    children = np.full((n, d), np.nan)
    for line in lines[1:]:
        cells = line.split(",")
        fam, role = int(cells[0]), cells[1]
        feats = np.array([float(v) for v in cells[2:]])
        if len(feats) != d:
            raise ContractError(f"row for family {fam} has {len(feats)} features, expected {d}")
        target = parents if role == "parent" else children
        if not np.isnan(target[fam]).all():
            raise ContractError(f"duplicate {role} row for family {fam}")
        target[fam] = feats
    if np.isnan(parents).any() or np.isnan(children).any():
        raise ContractError("dataset file is missing parent or child rows")
    return PairDataset(parents, children, meta)
