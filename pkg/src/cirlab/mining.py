"""Stage 1 of the synthesis pipeline: mine subgroups of similar images and draw image pairs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from cirlab.embedding import cosine_distance, cosine_distance_matrix
from cirlab.errors import InvalidSubgroup


@dataclass(frozen=True)
class MinerParams:
    subgroup_size: int = 6
    max_seed_distance: float = 0.94
    min_member_distance: float = 0.002
    pairs_per_subgroup: int = 9
    distance: str = "cosine"

    def __post_init__(self):
        if self.subgroup_size < 2:
            raise ValueError("subgroup_size must be at least 2")
        if not 0 <= self.min_member_distance < self.max_seed_distance:
            raise ValueError("need 0 <= min_member_distance < max_seed_distance")
        if not 1 <= self.pairs_per_subgroup <= self.subgroup_size * (self.subgroup_size - 1):
            raise ValueError("pairs_per_subgroup must be in [1, n*(n-1)]")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")


def _euclidean(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, float) - np.asarray(b, float)))


def _euclidean_matrix(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    return np.sqrt(d2)


DISTANCES: dict[str, tuple[Callable, Callable]] = {
    "cosine": (cosine_distance, cosine_distance_matrix),
    "euclidean": (_euclidean, _euclidean_matrix),
}


@dataclass(frozen=True)
class Subgroup:
    seed_id: str
    member_ids: tuple[str, ...]


@dataclass(frozen=True)
class ImagePair:
    reference_id: str
    target_id: str
    subgroup_seed_id: str | None = None

    def __post_init__(self):
        if self.reference_id == self.target_id:
            raise ValueError("reference and target must differ")

    @property
    def key(self) -> tuple[str, str]:
        return (self.reference_id, self.target_id)


def extract_subgroups(embeddings: Mapping[str, Sequence[float]], params: MinerParams) -> list[Subgroup]:
    """Greedy subgroup mining.

    Seeds are visited in sorted id order. A seed gathers the closest images
    whose distance to it is below ``max_seed_distance`` and whose distance to
    every member accepted so far exceeds ``min_member_distance``. Images that
    already belong to an emitted subgroup are not used as seeds again, but may
    still be accepted as members of later subgroups.
    """
    ids = sorted(embeddings)
    n = len(ids)
    size = params.subgroup_size
    if n < size:
        return []
    X = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])
    D = DISTANCES[params.distance][1](X)

    covered = np.zeros(n, dtype=bool)
    groups = []
    for s in range(n):
        if covered[s]:
            continue
        row = D[s].copy()
        row[s] = np.inf
        # stable sort: equal distances fall back to id order
        order = np.argsort(row, kind="stable")
        members = [s]
        for c in order:
            if row[c] >= params.max_seed_distance:
                break
            if np.all(D[c, members] > params.min_member_distance):
                members.append(int(c))
                if len(members) == size:
                    break
        if len(members) == size:
            covered[members] = True
            groups.append(Subgroup(ids[s], tuple(ids[m] for m in members)))
    return groups


def validate_subgroup(group: Subgroup, embeddings: Mapping[str, Sequence[float]],
                      params: MinerParams) -> list[str]:
    """Recheck a subgroup's thresholds from raw embeddings; returns a list of violations."""
    dist = DISTANCES[params.distance][0]
    problems = []
    members = group.member_ids
    if len(members) != params.subgroup_size:
        problems.append(f"size {len(members)} != {params.subgroup_size}")
    if len(set(members)) != len(members):
        problems.append("duplicate members")
    if not members or members[0] != group.seed_id:
        problems.append("seed is not the first member")
    for m in members:
        if m not in embeddings:
            problems.append(f"unknown id {m}")
    if problems:
        return problems
    seed = embeddings[group.seed_id]
    for m in members[1:]:
        d = dist(seed, embeddings[m])
        if not d < params.max_seed_distance:
            problems.append(f"{m}: distance to seed {d:.6f} >= {params.max_seed_distance}")
    for i, a in enumerate(members):
        for b in members[i + 1:]:
            d = dist(embeddings[a], embeddings[b])
            if not d > params.min_member_distance:
                problems.append(f"{a},{b}: member distance {d:.6f} <= {params.min_member_distance}")
    return problems


def pair_scheme(size: int) -> list[tuple[int, int]]:
    """Index pairs in emission order: the consecutive chain, then seed fan-out, then the rest."""
    chain = [(i, i + 1) for i in range(size - 1)]
    fanout = [(0, j) for j in range(2, size)]
    seen = set(chain) | set(fanout)
    rest = [(i, j) for i in range(size) for j in range(size) if i != j and (i, j) not in seen]
    return chain + fanout + rest


def extract_pairs(subgroup: Subgroup, params: MinerParams) -> list[ImagePair]:
    members = subgroup.member_ids
    if len(members) != params.subgroup_size or len(set(members)) != len(members):
        raise InvalidSubgroup(f"subgroup seeded by {subgroup.seed_id} is malformed")
    scheme = pair_scheme(len(members))[: params.pairs_per_subgroup]
    return [ImagePair(members[i], members[j], subgroup.seed_id) for i, j in scheme]


def dedupe_pairs(pairs: Sequence[ImagePair]) -> list[ImagePair]:
    """Drop repeated ordered pairs, keeping first occurrences in order."""
    seen: set[tuple[str, str]] = set()
    out = []
    for p in pairs:
        if p.key not in seen:
            seen.add(p.key)
            out.append(p)
    return out


def mine_pairs(embeddings: Mapping[str, Sequence[float]], params: MinerParams):
    """Full stage: subgroups, pairs per subgroup, deduplicated. Returns ``(subgroups, pairs)``."""
    groups = extract_subgroups(embeddings, params)
    pairs = [p for g in groups for p in extract_pairs(g, params)]
    return groups, dedupe_pairs(pairs)
