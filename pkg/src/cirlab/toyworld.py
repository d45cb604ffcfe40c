"""Synthetic fixtures: planted embedding clusters and a small composed-retrieval world.

In the toy world image features are points in R^d and a query text is a single
word naming a displacement: ``target = reference + displacement[word]``. The toy
text encoder embeds each word near the displacement's image-space direction, so
a mapping network that learns the right image tokens can solve retrieval.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cirlab.evaluation import QueryRecord
from cirlab.io import stage_seed
from cirlab.model import SEPARATOR, ToyEncoders
from cirlab.synthesis import SyntheticTriplet, TripletStatus
from cirlab.training import TripletSet

WORDS = ("north", "south", "east", "west", "bigger", "smaller", "brighter", "darker",
         "older", "newer")


def planted_clusters(n_clusters: int = 20, size: int = 6, spread: float = 0.3, seed: int = 0,
                     block: int = 4) -> tuple[dict[str, np.ndarray], list[list[str]]]:
    """Clusters living in disjoint coordinate blocks.

    Each cluster owns ``block`` coordinates: its members are ``e_0 + spread * noise`` in
    that block and zero elsewhere, so cross-cluster cosine distance is exactly 1.
    Returns ``(embeddings, clusters)`` with ids ``c{cluster:02d}_{member}``.
    """
    rng = np.random.default_rng(seed)
    dim = n_clusters * block
    embeddings, clusters = {}, []
    for c in range(n_clusters):
        ids = []
        for m in range(size):
            v = np.zeros(dim)
            v[c * block] = 1.0
            v[c * block + 1:(c + 1) * block] = spread * rng.standard_normal(block - 1)
            image_id = f"c{c:02d}_{m}"
            embeddings[image_id] = v
            ids.append(image_id)
        clusters.append(ids)
    return embeddings, clusters


@dataclass
class ToyWorldConfig:
    dim: int = 16
    words: tuple = WORDS
    n_unlabeled: int = 4096
    n_triplets: int = 2048
    n_eval_references: int = 10
    displacement_scale: float = 0.6
    word_gain: float = 0.15
    word_noise: float = 0.05
    # norm of an offset, shared by every word, that the text side adds but targets do not
    word_bias: float = 0.0
    # scale of the "," separator token relative to its random embedding
    separator_gain: float = 0.0
    # per-coordinate std of the second half of triplet reference features; None = isotropic
    triplet_shift: float | None = None
    subset_size: int = 6
    # if set, each evaluation reference gets a near-duplicate distractor with this noise std
    duplicate_noise: float | None = None
    seed: int = 0


@dataclass
class ToyWorld:
    config: ToyWorldConfig
    encoders: ToyEncoders
    displacements: dict
    unlabeled: np.ndarray
    triplets: list
    triplet_images: dict
    eval_queries: list
    eval_references: dict
    eval_gallery: dict
    extra: dict = field(default_factory=dict)

    def triplet_set(self) -> TripletSet:
        return TripletSet.from_triplets(self.triplets, self.triplet_images)


def build_toy_world(config: ToyWorldConfig | None = None) -> ToyWorld:
    cfg = config or ToyWorldConfig()
    d = cfg.dim
    base = ToyEncoders(stage_seed(cfg.seed, "encoders"), d, d, d)
    rng = np.random.default_rng(stage_seed(cfg.seed, "world"))
    disp = {w: cfg.displacement_scale * rng.standard_normal(d) for w in cfg.words}
    # word token ~ the displacement carried back through the visual and text projections
    to_token = base.text_proj.numpy().T @ base.visual.numpy()
    bias = np.random.default_rng(stage_seed(cfg.seed, "word-bias")).standard_normal(d)
    bias *= cfg.word_bias / np.linalg.norm(bias)
    word_vectors = {w: cfg.word_gain * (to_token @ (v + bias) + cfg.word_noise * rng.standard_normal(d))
                    for w, v in disp.items()}
    sep = base.token_table[base.vocab[SEPARATOR]].numpy()
    word_vectors[SEPARATOR] = cfg.separator_gain * sep
    encoders = ToyEncoders(base.seed, d, d, d, word_vectors=word_vectors)

    unlabeled = rng.standard_normal((cfg.n_unlabeled, d))

    scale = np.ones(d)
    if cfg.triplet_shift is not None:
        scale[d // 2:] = cfg.triplet_shift
    refs = rng.standard_normal((cfg.n_triplets, d)) * scale
    word_idx = rng.integers(len(cfg.words), size=cfg.n_triplets)
    triplets, images = [], {}
    for i, (r, wi) in enumerate(zip(refs, word_idx)):
        w = cfg.words[wi]
        rid, tid = f"tr{i:05d}", f"tt{i:05d}"
        images[rid], images[tid] = r, r + disp[w]
        triplets.append(SyntheticTriplet(rid, tid, f"image {rid}", f"image {tid}", w,
                                         status=TripletStatus.KEPT))

    eval_refs = {f"q{i:03d}": rng.standard_normal(d) for i in range(cfg.n_eval_references)}
    gallery, queries = {}, []
    for rid, r in eval_refs.items():
        for w in cfg.words:
            gallery[f"{rid}_{w}"] = r + disp[w]
    if cfg.duplicate_noise is not None:
        dup_rng = np.random.default_rng(stage_seed(cfg.seed, "duplicates"))
        for rid, r in eval_refs.items():
            gallery[f"{rid}_dup"] = r + cfg.duplicate_noise * dup_rng.standard_normal(d)
    for rid in eval_refs:
        for wi, w in enumerate(cfg.words):
            # subgroup: the reference plus targets for the true word and the next few words
            others = [cfg.words[(wi + j) % len(cfg.words)] for j in range(cfg.subset_size - 1)]
            queries.append(QueryRecord(rid, w, frozenset([f"{rid}_{w}"]),
                                       (rid,) + tuple(f"{rid}_{o}" for o in others)))
    return ToyWorld(cfg, encoders, disp, unlabeled, triplets, images, queries, eval_refs, gallery)
