"""Nearest-neighbour mutual information between embedding dims and a target.

``mi_continuous`` is the Kraskov-Stoegbauer-Grassberger estimator (algorithm
1); ``mi_discrete`` is Ross's estimator for a discrete target.  Both work on
one embedding dimension at a time, add a tiny seeded jitter to break ties,
and clamp negative estimates to zero.  Results are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .core import PROSODY_FEATURES, EmbeddingTable, ProsodyTable, derive_rng


class MiError(ValueError):
    pass


@dataclass(frozen=True)
class MiConfig:
    k_neighbors: int = 3
    noise_scale: float = 1e-10
    seed: int = 0


@dataclass(frozen=True)
class MiRanking:
    scores: np.ndarray
    target_name: str

    @property
    def dim(self) -> int:
        return len(self.scores)

    @property
    def order(self) -> List[int]:
        # stable sort on -score: ties keep ascending index
        return [int(i) for i in np.argsort(-np.asarray(self.scores), kind="stable")]


@dataclass(frozen=True)
class SelectionRule:
    kind: str  # "top_n" or "top_quantile"
    value: float

    @classmethod
    def top_n(cls, n: int) -> "SelectionRule":
        return cls("top_n", int(n))

    @classmethod
    def top_quantile(cls, q: float) -> "SelectionRule":
        return cls("top_quantile", float(q))

    def describe(self) -> str:
        return f"{self.kind}({self.value:g})"


@dataclass(frozen=True)
class SelectionSet:
    selected: Tuple[int, ...]
    rule: Optional[SelectionRule]
    provenance: Tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "selected": list(self.selected),
            "rule": None if self.rule is None else self.rule.describe(),
            "provenance": list(self.provenance),
        }


def _prepare(x: np.ndarray, rng: np.random.Generator, noise_scale: float) -> np.ndarray:
    """Scale to unit variance and add tie-breaking jitter."""
    x = np.asarray(x, dtype=np.float64).copy()
    std = x.std()
    if std > 0:
        x /= std
    x += noise_scale * max(1.0, float(np.mean(np.abs(x)))) * rng.standard_normal(x.shape)
    return x


def _count_within(sorted_x: np.ndarray, x: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Points of ``sorted_x`` within open distance ``radius`` of each ``x`` (self included)."""
    hi = np.searchsorted(sorted_x, x + radius, side="left")
    lo = np.searchsorted(sorted_x, x - radius, side="right")
    return hi - lo


def mi_continuous(x, z, cfg: MiConfig = MiConfig(), rng: Optional[np.random.Generator] = None) -> float:
    """KSG estimate of I(x; z) for two 1-D continuous samples.

    The pair is put in a canonical order before jitter is drawn, so swapping
    the arguments gives the same value.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    n, k = len(x), cfg.k_neighbors
    if len(z) != n:
        raise MiError("x and z differ in length")
    if n <= k:
        raise MiError(f"need more than k={k} samples, got {n}")
    if x.tobytes() > z.tobytes():
        x, z = z, x
    rng = rng if rng is not None else derive_rng(cfg.seed)
    x = _prepare(x, rng, cfg.noise_scale)
    z = _prepare(z, rng, cfg.noise_scale)

    xz = np.column_stack([x, z])
    dist, _ = cKDTree(xz).query(xz, k=k + 1, p=np.inf)
    radius = np.nextafter(dist[:, -1], 0)
    nx = _count_within(np.sort(x), x, radius)
    nz = _count_within(np.sort(z), z, radius)
    # nx, nz include the point itself, i.e. they are n_x + 1 and n_z + 1
    mi = digamma(n) + digamma(k) - np.mean(digamma(nx)) - np.mean(digamma(nz))
    return max(0.0, float(mi))


def mi_discrete(x, y, cfg: MiConfig = MiConfig(), rng: Optional[np.random.Generator] = None) -> float:
    """Ross estimate of I(x; y) for continuous ``x`` and class labels ``y``.

    The k-th same-class neighbour distance of each point sets a radius; m_i
    counts all points (any class, self included) strictly inside it.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y).ravel()
    n, k = len(x), cfg.k_neighbors
    if len(y) != n:
        raise MiError("x and y differ in length")
    classes, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        return 0.0
    small = classes[counts <= k]
    if small.size:
        raise MiError(f"class {small[0]!r} has <= k={k} members")
    if np.all(x == x[0]):
        return 0.0
    rng = rng if rng is not None else derive_rng(cfg.seed)
    x = _prepare(x, rng, cfg.noise_scale)

    radius = np.empty(n)
    label_counts = counts[inverse]
    for c in range(len(classes)):
        mask = inverse == c
        pts = x[mask]
        # k-th neighbour excluding self among the class members
        dist, _ = cKDTree(pts[:, None]).query(pts[:, None], k=k + 1)
        radius[mask] = np.nextafter(dist[:, -1], 0)
    m = _count_within(np.sort(x), x, radius)
    mi = digamma(n) - np.mean(digamma(label_counts)) + digamma(k) - np.mean(digamma(m))
    return max(0.0, float(mi))


def _target(table: EmbeddingTable, target: str, prosody: Optional[ProsodyTable]) -> Tuple[np.ndarray, bool]:
    if target == "attribute":
        return table.attribute_array(), True
    if target == "speaker":
        return np.asarray(table.speaker_ids), True
    if target in PROSODY_FEATURES:
        if prosody is None:
            raise MiError(f"target {target!r} needs a prosody table")
        aligned = prosody.aligned_to(table.sample_ids)
        return aligned.column(target, normalized=True), False
    raise MiError(f"unknown target {target!r}")


def rank_dimensions(table: EmbeddingTable, target: str = "attribute", cfg: MiConfig = MiConfig(),
                    prosody: Optional[ProsodyTable] = None) -> MiRanking:
    """MI between every embedding dim and the target, across the whole table.

    ``target`` is ``"attribute"`` (discrete) or a prosody column name
    (continuous).  Dimension ``d`` draws its jitter from ``(seed, d)`` so the
    result does not depend on evaluation order.
    """
    y, discrete = _target(table, target, prosody)
    scores = np.empty(table.dim)
    for d in range(table.dim):
        rng = derive_rng(cfg.seed, d)
        col = table.vectors[:, d]
        scores[d] = mi_discrete(col, y, cfg, rng) if discrete else mi_continuous(col, y, cfg, rng)
    return MiRanking(scores, target)


def rank_prosody_features(prosody: ProsodyTable, table: EmbeddingTable, target: str = "attribute",
                          cfg: MiConfig = MiConfig()) -> Tuple[Tuple[str, ...], MiRanking]:
    """MI between each prosody feature and a discrete label of ``table``.

    Used to decide which prosody features are attribute-relevant before the
    embedding dims are ranked against them; ``select_dimensions`` with
    ``top_quantile(65)`` on the result gives the feature indices to keep.
    """
    if target not in ("attribute", "speaker"):
        raise MiError(f"prosody features are ranked against a label, not {target!r}")
    y, _ = _target(table, target, None)
    aligned = prosody.aligned_to(table.sample_ids)
    scores = np.empty(len(PROSODY_FEATURES))
    for j, name in enumerate(PROSODY_FEATURES):
        scores[j] = mi_discrete(aligned.column(name, normalized=False), y, cfg, derive_rng(cfg.seed, 0xF0, j))
    return PROSODY_FEATURES, MiRanking(scores, target)


def _select_one(ranking: MiRanking, rule: SelectionRule) -> List[int]:
    if rule.kind == "top_n":
        n = int(rule.value)
        if n < 0 or n > ranking.dim:
            raise MiError(f"top_n({n}) outside 0..{ranking.dim}")
        return ranking.order[:n]
    if rule.kind == "top_quantile":
        q = rule.value
        if not 0 <= q <= 100:
            raise MiError(f"quantile {q} outside [0, 100]")
        cut = np.percentile(ranking.scores, q)
        return [int(i) for i in np.flatnonzero(ranking.scores >= cut)]
    raise MiError(f"unknown selection rule {rule.kind!r}")


def select_dimensions(rankings: Union[MiRanking, Sequence[MiRanking]], rule: SelectionRule) -> SelectionSet:
    """Apply ``rule`` to each ranking and take the union of the selections."""
    if isinstance(rankings, MiRanking):
        rankings = [rankings]
    if not rankings:
        raise MiError("no rankings given")
    dims = {r.dim for r in rankings}
    if len(dims) != 1:
        raise MiError(f"rankings disagree on dimension: {sorted(dims)}")
    chosen = set()
    for r in rankings:
        chosen.update(_select_one(r, rule))
    return SelectionSet(tuple(sorted(chosen)), rule, tuple(r.target_name for r in rankings))


def ranking_csv(ranking: MiRanking) -> str:
    ranks = np.empty(ranking.dim, dtype=np.int64)
    ranks[ranking.order] = np.arange(1, ranking.dim + 1)
    lines = ["dim,score_nats,rank"]
    lines += [f"{d},{float(s)!r},{int(ranks[d])}" for d, s in enumerate(ranking.scores)]
    return "\n".join(lines) + "\n"


def summary(rankings: Sequence[MiRanking], selection: SelectionSet) -> Dict:
    return {
        "targets": [r.target_name for r in rankings],
        "top10": {r.target_name: r.order[:10] for r in rankings},
        "selection": selection.to_json(),
    }
