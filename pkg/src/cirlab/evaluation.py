"""Gallery ranking and retrieval metrics (R@K, subset Rs@K, mAP@K), plus dataset loaders."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from cirlab.embedding import normalize_rows
from cirlab.errors import DimMismatch, EmptyGallery, InvalidRecord, MissingSubset
from cirlab.io import read_json, read_records
from cirlab.model import EncoderBundle, MappingNetwork, compose_texts

DEFAULT_RECALL_KS = (1, 5, 10, 50)
DEFAULT_SUBSET_KS = (1, 2, 3)
DEFAULT_MAP_KS = (5, 10, 25, 50)


@dataclass(frozen=True)
class QueryRecord:
    reference_id: str
    query_text: str
    ground_truth_ids: frozenset
    subset_ids: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "ground_truth_ids", frozenset(map(str, self.ground_truth_ids)))
        if self.subset_ids is not None:
            object.__setattr__(self, "subset_ids", tuple(map(str, self.subset_ids)))
        if not self.ground_truth_ids:
            raise InvalidRecord(f"query on {self.reference_id}: empty ground truth")
        if self.reference_id in self.ground_truth_ids:
            raise InvalidRecord(f"query on {self.reference_id}: reference is its own target")
        if self.subset_ids is not None:
            if self.reference_id not in self.subset_ids:
                raise InvalidRecord(f"query on {self.reference_id}: reference not in subset")
            if not self.ground_truth_ids & set(self.subset_ids):
                raise InvalidRecord(f"query on {self.reference_id}: no ground truth in subset")

    def to_record(self) -> dict:
        rec = {"reference_id": self.reference_id, "query_text": self.query_text,
               "ground_truth_ids": sorted(self.ground_truth_ids)}
        if self.subset_ids is not None:
            rec["subset_ids"] = list(self.subset_ids)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "QueryRecord":
        return cls(str(rec["reference_id"]), rec.get("query_text", ""),
                   frozenset(rec["ground_truth_ids"]),
                   tuple(rec["subset_ids"]) if rec.get("subset_ids") is not None else None)


class Gallery:
    """Ordered candidate set of ``(image_id, unit vector)``."""

    def __init__(self, ids: Sequence[str], vectors):
        ids = [str(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise ValueError("gallery ids must be unique")
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(vectors) != len(ids):
            raise ValueError("gallery vectors must be a (n, d) array matching the ids")
        self.ids = ids
        self.vectors = normalize_rows(vectors) if len(ids) else vectors
        self.index = {i: n for n, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_mapping(cls, embeddings: Mapping[str, Sequence[float]]) -> "Gallery":
        return cls(list(embeddings), np.stack([np.asarray(v, float) for v in embeddings.values()]))


def _order(scores: np.ndarray, ids: Sequence[str]) -> list[str]:
    # descending score, ties by ascending id
    order = np.lexsort((np.asarray(ids, dtype=object).astype(str), -scores))
    return [ids[i] for i in order]


def rank_candidates(composed_feature, gallery: Gallery, exclude=frozenset(),
                    candidates: Sequence[str] | None = None) -> list[str]:
    q = np.asarray(composed_feature, dtype=np.float64)
    if len(gallery) and q.shape[-1] != gallery.vectors.shape[1]:
        raise DimMismatch(f"query dim {q.shape[-1]} != gallery dim {gallery.vectors.shape[1]}")
    if candidates is None:
        keep = [n for n, i in enumerate(gallery.ids) if i not in exclude]
    else:
        keep = [gallery.index[i] for i in candidates if i not in exclude]
    if not keep:
        raise EmptyGallery("no candidates left to rank")
    scores = gallery.vectors[keep] @ (q / np.linalg.norm(q))
    return _order(scores, [gallery.ids[n] for n in keep])


def recall_at_k(rankings: Sequence[Sequence[str]], queries: Sequence[QueryRecord], k: int) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    if not queries:
        return 0.0
    hits = sum(bool(set(r[:k]) & q.ground_truth_ids) for r, q in zip(rankings, queries))
    return hits / len(queries)


def subset_rankings(features, queries: Sequence[QueryRecord], gallery: Gallery) -> list[list[str]]:
    out = []
    for f, q in zip(features, queries):
        if q.subset_ids is None:
            raise MissingSubset(f"query on {q.reference_id} has no subset")
        out.append(rank_candidates(f, gallery, {q.reference_id}, candidates=q.subset_ids))
    return out


def subset_recall_at_k(queries: Sequence[QueryRecord], features, gallery: Gallery, k: int) -> float:
    return recall_at_k(subset_rankings(features, queries, gallery), queries, k)


def average_precision_at_k(ranking: Sequence[str], ground_truth, k: int) -> float:
    hits, total = 0, 0.0
    for i, image_id in enumerate(ranking[:k], 1):
        if image_id in ground_truth:
            hits += 1
            total += hits / i
    return total / min(len(ground_truth), k)


def map_at_k(rankings, queries: Sequence[QueryRecord], k: int) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    if not queries:
        return 0.0
    return float(np.mean([average_precision_at_k(r, q.ground_truth_ids, k)
                          for r, q in zip(rankings, queries)]))


@dataclass
class EvalConfig:
    recall_ks: tuple = DEFAULT_RECALL_KS
    subset_ks: tuple = DEFAULT_SUBSET_KS
    map_ks: tuple = DEFAULT_MAP_KS
    exclude_reference: bool = True

    def __post_init__(self):
        for ks in (self.recall_ks, self.subset_ks, self.map_ks):
            if any(int(k) < 1 for k in ks):
                raise ValueError("K values must be at least 1")
        self.recall_ks = tuple(int(k) for k in self.recall_ks)
        self.subset_ks = tuple(int(k) for k in self.subset_ks)
        self.map_ks = tuple(int(k) for k in self.map_ks)


@dataclass
class MetricsReport:
    num_queries: int
    recall: dict = field(default_factory=dict)
    subset_recall: dict = field(default_factory=dict)
    map: dict = field(default_factory=dict)

    @property
    def avg_recall(self) -> float:
        return float(np.mean(list(self.recall.values()))) if self.recall else 0.0

    def to_dict(self) -> dict:
        d = {"num_queries": self.num_queries,
             "recall": {f"R@{k}": v for k, v in self.recall.items()},
             "avg_recall": self.avg_recall}
        if self.subset_recall:
            d["subset_recall"] = {f"Rs@{k}": v for k, v in self.subset_recall.items()}
        if self.map:
            d["map"] = {f"mAP@{k}": v for k, v in self.map.items()}
        return d


def score_features(features, queries: Sequence[QueryRecord], gallery: Gallery,
                   config: EvalConfig | None = None) -> MetricsReport:
    """All metrics for precomputed composed query features."""
    config = config or EvalConfig()
    features = np.asarray(features, dtype=np.float64)
    rankings = [rank_candidates(f, gallery, {q.reference_id} if config.exclude_reference else ())
                for f, q in zip(features, queries)]
    report = MetricsReport(len(queries))
    report.recall = {k: recall_at_k(rankings, queries, k) for k in config.recall_ks}
    if queries and all(q.subset_ids is not None for q in queries) and config.subset_ks:
        sub = subset_rankings(features, queries, gallery)
        report.subset_recall = {k: recall_at_k(sub, queries, k) for k in config.subset_ks}
    report.map = {k: map_at_k(rankings, queries, k) for k in config.map_ks}
    return report


def composed_features(net: MappingNetwork, encoders: EncoderBundle,
                      reference_features, texts: Sequence[str], batch_size: int = 1024) -> np.ndarray:
    ref = np.asarray(reference_features, dtype=np.float64)
    out = []
    with torch.no_grad():
        for s in range(0, len(ref), batch_size):
            out.append(compose_texts(net, encoders, ref[s:s + batch_size],
                                     list(texts[s:s + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, encoders.d_out))


def encode_gallery(encoders: EncoderBundle, image_features: Mapping[str, Sequence[float]]) -> Gallery:
    ids = list(image_features)
    with torch.no_grad():
        vecs = encoders.encode_image(np.stack([np.asarray(image_features[i], float) for i in ids]))
    return Gallery(ids, vecs.numpy())


def evaluate(net: MappingNetwork, encoders: EncoderBundle, queries: Sequence[QueryRecord],
             gallery_features: Mapping[str, Sequence[float]],
             reference_features: Mapping[str, Sequence[float]] | None = None,
             config: EvalConfig | None = None) -> MetricsReport:
    """Compose every query, rank the encoded gallery, compute all metrics.

    ``reference_features`` defaults to ``gallery_features`` (references usually live
    in the same image corpus).
    """
    refs = reference_features if reference_features is not None else gallery_features
    missing = [q.reference_id for q in queries if q.reference_id not in refs]
    if missing:
        raise InvalidRecord(f"no image features for reference(s) {missing[:5]}")
    gallery = encode_gallery(encoders, gallery_features)
    ref = np.stack([np.asarray(refs[q.reference_id], float) for q in queries]) if queries \
        else np.zeros((0, encoders.d_img))
    feats = composed_features(net, encoders, ref, [q.query_text for q in queries])
    return score_features(feats, queries, gallery, config)


def format_table(rows: Sequence[tuple[str, MetricsReport]], label: str = "Model",
                 ks: Sequence[int] | None = None) -> str:
    """Aligned plain-text table with one R@K column per K plus Avg."""
    if not rows:
        return ""
    ks = list(ks) if ks is not None else list(rows[0][1].recall)
    header = [label] + [f"R@{k}" for k in ks] + ["Avg"]
    body = [[name] + [f"{100 * rep.recall[k]:.2f}" for k in ks]
            + [f"{100 * np.mean([rep.recall[k] for k in ks]):.2f}"] for name, rep in rows]
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    fmt = lambda r: "  ".join(cell.rjust(w) for cell, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body])


# --- dataset loaders ------------------------------------------------------

def load_queries(path) -> list[QueryRecord]:
    """Generic format: one ``{reference_id, query_text, ground_truth_ids, subset_ids?}`` per line."""
    _, records = read_records(path, require_header=False)
    out = []
    for n, rec in enumerate(records):
        try:
            out.append(QueryRecord.from_record(rec))
        except KeyError as exc:
            raise InvalidRecord(f"{path}: record {n} missing {exc}") from None
    return out


def load_cirr(path) -> list[QueryRecord]:
    """CIRR ``captions/cap.rc2.<split>.json`` (test split has no targets and is rejected)."""
    out = []
    for n, rec in enumerate(read_json(path)):
        if "target_hard" not in rec:
            raise InvalidRecord(f"{path}: record {n} has no target_hard (test split?)")
        members = rec.get("img_set", {}).get("members")
        out.append(QueryRecord(rec["reference"], rec["caption"], frozenset([rec["target_hard"]]),
                               tuple(members) if members else None))
    return out


def load_circo(path) -> list[QueryRecord]:
    """CIRCO ``annotations/<split>.json``; ground truth is ``gt_img_ids``."""
    out = []
    for n, rec in enumerate(read_json(path)):
        gts = rec.get("gt_img_ids") or ([rec["target_img_id"]] if "target_img_id" in rec else [])
        if not gts:
            raise InvalidRecord(f"{path}: record {n} has no ground truth (test split?)")
        out.append(QueryRecord(str(rec["reference_img_id"]), rec["relative_caption"],
                               frozenset(str(g) for g in gts)))
    return out


def load_fashioniq(path) -> list[QueryRecord]:
    """FashionIQ ``captions/cap.<category>.<split>.json``; the two captions are joined with 'and'."""
    out = []
    for n, rec in enumerate(read_json(path)):
        if "target" not in rec:
            raise InvalidRecord(f"{path}: record {n} has no target")
        caps = [c.strip(" .") for c in rec["captions"] if c.strip()]
        out.append(QueryRecord(rec["candidate"], " and ".join(caps), frozenset([rec["target"]])))
    return out


LOADERS = {"generic": load_queries, "cirr": load_cirr, "circo": load_circo,
           "fashioniq": load_fashioniq}
