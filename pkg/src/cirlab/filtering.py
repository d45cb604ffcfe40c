"""Stage 3 of the synthesis pipeline: semantic filtering of triplets in language space."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cirlab.embedding import cosine_similarity
from cirlab.errors import ProviderError, ZeroVector
from cirlab.providers import Gateway
from cirlab.synthesis import SyntheticTriplet, TripletStatus


@dataclass(frozen=True)
class FilterParams:
    similarity_threshold: float = 0.7

    def __post_init__(self):
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in [-1, 1]")


@dataclass
class FilterReport:
    total: int = 0
    kept: int = 0
    dropped_same_caption: int = 0
    dropped_low_similarity: int = 0
    errored: int = 0
    errors: list = field(default_factory=list)

    @property
    def kept_ratio(self) -> float:
        return self.kept / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kept_ratio"] = self.kept_ratio
        return d


def same_caption(a: str, b: str) -> bool:
    return " ".join(a.split()) == " ".join(b.split())


def composed_text_score(e_ref, e_query, e_target) -> float:
    """cos(e_ref + e_query, e_target); the sum is deliberately left unnormalized."""
    summed = np.asarray(e_ref, dtype=np.float64) + np.asarray(e_query, dtype=np.float64)
    try:
        return cosine_similarity(summed, e_target)
    except ZeroVector:
        return -1.0


def filter_triplet(t: SyntheticTriplet, params: FilterParams, gateway: Gateway) -> SyntheticTriplet:
    if same_caption(t.reference_caption, t.target_caption):
        return dataclasses.replace(t, status=TripletStatus.DROPPED_SAME_CAPTION, filter_score=None)
    score = composed_text_score(gateway.embed_text(t.reference_caption),
                                gateway.embed_text(t.query_text),
                                gateway.embed_text(t.target_caption))
    status = (TripletStatus.KEPT if score >= params.similarity_threshold
              else TripletStatus.DROPPED_LOW_SIMILARITY)
    return dataclasses.replace(t, status=status, filter_score=score)


def filter_dataset(triplets: Sequence[SyntheticTriplet], params: FilterParams, gateway: Gateway):
    """Returns ``(kept, report, decided)``; ``decided`` holds every non-errored triplet with its status."""
    report = FilterReport(total=len(triplets))
    kept, decided = [], []
    results = gateway.map(lambda t: filter_triplet(t, params, gateway), list(triplets))
    for t, res in zip(triplets, results):
        if isinstance(res, ProviderError):
            report.errored += 1
            report.errors.append({"reference_id": t.reference_id, "target_id": t.target_id,
                                  "error": f"{type(res).__name__}: {res}"})
            continue
        decided.append(res)
        if res.status is TripletStatus.KEPT:
            report.kept += 1
            kept.append(res)
        elif res.status is TripletStatus.DROPPED_SAME_CAPTION:
            report.dropped_same_caption += 1
        else:
            report.dropped_low_similarity += 1
    return kept, report, decided
