"""Hybrid training of the mapping network.

The objective is the sum of two symmetric contrastive losses: one aligning each
unlabeled image with the text feature of ``a photo of [$ $ $]`` built from its own
pseudo tokens, and one aligning composed queries from synthetic triplets with
their target images. Only the mapping network is updated.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from cirlab.errors import BatchMismatch, CorruptCheckpoint, DimMismatch, UnfilteredTriplet
from cirlab.io import config_hash, make_header, stage_seed
from cirlab.model import (DTYPE, EncoderBundle, MappingNetwork, ModelConfig, compose_batch,
                          load_checkpoint, save_checkpoint)
from cirlab.synthesis import SyntheticTriplet, TripletStatus

log = logging.getLogger(__name__)

OBJECTIVES = ("hybrid", "zscir", "triplet")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    unlabeled_batch_size: int = 512
    triplet_batch_size: int = 256
    temperature: float = 0.01
    steps: int = 1000
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    zscir_weight: float = 1.0
    triplet_weight: float = 1.0
    objective: str = "hybrid"
    # "template": a photo of [$ $ $]; "tokens": pool the pseudo tokens alone
    zscir_prompt: str = "template"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.unlabeled_batch_size < 1 or self.triplet_batch_size < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.zscir_prompt not in ("template", "tokens"):
            raise ValueError("zscir_prompt must be 'template' or 'tokens'")

    def resume_hash(self, extra=None) -> str:
        """Hash of everything that must match for a resumed run to continue the same curve."""
        d = dataclasses.asdict(self)
        d.pop("steps")
        d.pop("checkpoint_every")
        return config_hash({"train": d, "extra": extra})


@dataclass
class LossBreakdown:
    l_zscir: float
    l_triplet: float
    l_hybrid: float

    def to_record(self, step: int) -> dict:
        return {"step": step, "l_zscir": self.l_zscir, "l_triplet": self.l_triplet,
                "l_hybrid": self.l_hybrid}


def contrastive_loss(A, B, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE over the cosine-similarity matrix of paired rows of ``A`` and ``B``."""
    A = torch.as_tensor(A, dtype=DTYPE)
    B = torch.as_tensor(B, dtype=DTYPE)
    if A.dim() != 2 or B.dim() != 2:
        raise ValueError("expected 2-d batches")
    if A.shape[0] != B.shape[0] or A.shape[0] < 1:
        raise BatchMismatch(f"batch sizes {A.shape[0]} and {B.shape[0]}")
    if A.shape[1] != B.shape[1]:
        raise DimMismatch(f"feature dims {A.shape[1]} and {B.shape[1]}")
    logits = F.normalize(A, dim=1) @ F.normalize(B, dim=1).T / temperature
    targets = torch.arange(A.shape[0])
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


@dataclass
class TripletSet:
    """Image features and query texts for a batch of filtered triplets."""

    reference: torch.Tensor
    target: torch.Tensor
    texts: list[str]
    status: list[str] = field(default_factory=list)
    ids: list[tuple[str, str]] = field(default_factory=list)
    _tokens: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.reference = torch.as_tensor(np.asarray(self.reference, dtype=np.float64))
        self.target = torch.as_tensor(np.asarray(self.target, dtype=np.float64))
        if not self.status:
            self.status = [TripletStatus.KEPT.value] * len(self.texts)
        if not (len(self.reference) == len(self.target) == len(self.texts) == len(self.status)):
            raise BatchMismatch("triplet fields have different lengths")

    def __len__(self):
        return len(self.texts)

    @classmethod
    def from_triplets(cls, triplets: Sequence[SyntheticTriplet],
                      embeddings: Mapping[str, Sequence[float]], d_img: int | None = None):
        if not triplets:
            d = d_img if d_img is not None else len(next(iter(embeddings.values())))
            return cls(np.zeros((0, d)), np.zeros((0, d)), [], [])
        return cls(
            np.stack([embeddings[t.reference_id] for t in triplets]),
            np.stack([embeddings[t.target_id] for t in triplets]),
            [t.query_text for t in triplets],
            [TripletStatus(t.status).value for t in triplets],
            [(t.reference_id, t.target_id) for t in triplets])

    def tokens(self, encoders: EncoderBundle):
        if self._tokens is None or self._tokens[0] is not encoders:
            self._tokens = (encoders, *encoders.suffix_batch(self.texts))
        return self._tokens[1], self._tokens[2]

    def subset(self, idx) -> "TripletSet":
        idx = np.asarray(idx, dtype=np.int64)
        out = TripletSet(self.reference[idx], self.target[idx], [self.texts[i] for i in idx],
                         [self.status[i] for i in idx],
                         [self.ids[i] for i in idx] if self.ids else [])
        if self._tokens is not None:
            enc, ids, mask = self._tokens
            sub_ids, sub_mask = ids[idx], mask[idx]
            width = int(sub_mask.sum(dim=1).max()) if len(idx) else 0
            out._tokens = (enc, sub_ids[:, :width], sub_mask[:, :width])
        return out


def zscir_text_features(images, net: MappingNetwork, encoders: EncoderBundle,
                        prompt: str = "template") -> torch.Tensor:
    if prompt == "template":
        return compose_batch(net, encoders, images)
    pseudo = net(torch.as_tensor(images, dtype=DTYPE))
    return encoders.encode_text_tokens(pseudo)


def zscir_loss(images, net: MappingNetwork, encoders: EncoderBundle, temperature: float,
               prompt: str = "template") -> torch.Tensor:
    images = torch.as_tensor(np.asarray(images, dtype=np.float64)) \
        if not isinstance(images, torch.Tensor) else images
    if len(images) == 0:
        raise ValueError("unlabeled batch is empty")
    return contrastive_loss(encoders.encode_image(images),
                            zscir_text_features(images, net, encoders, prompt), temperature)


def triplet_loss(batch: TripletSet, net: MappingNetwork, encoders: EncoderBundle,
                 temperature: float) -> torch.Tensor:
    if len(batch) == 0:
        raise ValueError("triplet batch is empty")
    bad = [i for i, s in enumerate(batch.status) if s != TripletStatus.KEPT.value]
    if bad:
        raise UnfilteredTriplet(f"{len(bad)} triplet(s) in batch are not marked kept")
    ids, mask = batch.tokens(encoders)
    composed = compose_batch(net, encoders, batch.reference, ids, mask)
    return contrastive_loss(composed, encoders.encode_image(batch.target), temperature)


def hybrid_loss(unlabeled_batch, triplet_batch, net, encoders, config: TrainConfig):
    """Returns ``(objective tensor, LossBreakdown)``. Terms disabled by ``objective`` read 0."""
    zero = torch.zeros((), dtype=DTYPE)
    lz = lt = zero
    if config.objective in ("hybrid", "zscir"):
        lz = config.zscir_weight * zscir_loss(unlabeled_batch, net, encoders, config.temperature,
                                              config.zscir_prompt)
    if config.objective in ("hybrid", "triplet"):
        lt = config.triplet_weight * triplet_loss(triplet_batch, net, encoders,
                                                  config.temperature)
    total = lz + lt
    return total, LossBreakdown(lz.item(), lt.item(), total.item())


def make_optimizer(net: MappingNetwork, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=config.betas,
                            eps=config.eps)


def train_step(unlabeled_batch, triplet_batch, net, encoders, config: TrainConfig,
               optimizer: torch.optim.Optimizer) -> LossBreakdown:
    optimizer.zero_grad(set_to_none=True)
    total, breakdown = hybrid_loss(unlabeled_batch, triplet_batch, net, encoders, config)
    total.backward()
    optimizer.step()
    return breakdown


class EpochSampler:
    """Batch indices as a pure function of the step: consecutive slices of seeded epoch
    permutations, recycled when a dataset runs out."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            if len(self._perms) > 8:
                self._perms.clear()
            self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._perms[epoch]

    def indices(self, step: int) -> np.ndarray:
        pos = np.arange(step * self.batch_size, (step + 1) * self.batch_size)
        epochs, offsets = np.divmod(pos, self.n)
        return np.array([self._perm(int(e))[o] for e, o in zip(epochs, offsets)], dtype=np.int64)


@dataclass
class TrainResult:
    net: MappingNetwork
    history: list[dict]
    optimizer: torch.optim.Optimizer
    config_hash: str


def _write_history(path: Path, history: list[dict], cfg_hash: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(make_header("loss_history", cfg_hash), sort_keys=True) + "\n")
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp.replace(path)


def _read_history(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    return [r for r in rows if not r.get("__header__") and r["step"] < upto]


def train(unlabeled, triplets: TripletSet, encoders: EncoderBundle, config: TrainConfig,
          model_config: ModelConfig | None = None, checkpoint_path=None, history_path=None,
          encoder_spec: dict | None = None, callback: Callable | None = None) -> TrainResult:
    """Train a fresh (or resumed) mapping network.

    When ``checkpoint_path`` already holds a checkpoint from a run with the same
    configuration, training continues from its step; batches depend only on the
    step index, so a resumed run reproduces the uninterrupted loss history.
    """
    model_config = model_config or ModelConfig()
    unlabeled = torch.as_tensor(np.asarray(unlabeled, dtype=np.float64))
    d_img = unlabeled.shape[1] if len(unlabeled) else triplets.reference.shape[1]
    encoder_spec = encoder_spec if encoder_spec is not None else getattr(encoders, "spec", dict)()
    cfg_hash = config.resume_hash({"model": dataclasses.asdict(model_config),
                                   "encoders": config_hash(encoder_spec),
                                   "n_unlabeled": len(unlabeled), "n_triplets": len(triplets)})

    net = MappingNetwork(d_img, encoders.d_token, model_config,
                         seed=stage_seed(config.seed, "mapping-init"))
    optimizer = make_optimizer(net, config)
    start = 0
    history: list[dict] = []
    checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
    history_path = Path(history_path) if history_path else None
    if checkpoint_path is not None and checkpoint_path.exists():
        payload = load_checkpoint(checkpoint_path)
        if payload["config_hash"] != cfg_hash:
            raise CorruptCheckpoint(f"{checkpoint_path}: written by a different configuration")
        net.load_state_dict(payload["state_dict"])
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        start = min(payload["step"], config.steps)
        if history_path is not None:
            history = _read_history(history_path, start)
        log.info("resuming from step %d", start)

    need_z = config.objective in ("hybrid", "zscir")
    need_t = config.objective in ("hybrid", "triplet")
    if need_z and len(unlabeled) == 0:
        raise ValueError("unlabeled dataset is empty")
    if need_t and len(triplets) == 0:
        raise ValueError("triplet dataset is empty")
    u_sampler = EpochSampler(len(unlabeled), config.unlabeled_batch_size,
                             stage_seed(config.seed, "unlabeled")) if need_z else None
    t_sampler = EpochSampler(len(triplets), config.triplet_batch_size,
                             stage_seed(config.seed, "triplets")) if need_t else None
    if need_t:
        triplets.tokens(encoders)

    def checkpoint(step):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, net, encoder_spec, cfg_hash, step,
                            optimizer.state_dict())
        if history_path is not None:
            _write_history(history_path, history, cfg_hash)

    net.train()
    for step in range(start, config.steps):
        ub = unlabeled[u_sampler.indices(step)] if u_sampler else None
        tb = triplets.subset(t_sampler.indices(step)) if t_sampler else None
        breakdown = train_step(ub, tb, net, encoders, config, optimizer)
        history.append(breakdown.to_record(step))
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            checkpoint(step + 1)
        if callback is not None:
            callback(step, breakdown)
    checkpoint(max(config.steps, start))
    net.eval()
    return TrainResult(net, history, optimizer, cfg_hash)


def loss_curve_improves(history: Sequence[dict], key: str = "l_hybrid", frac: float = 0.1) -> bool:
    n = max(1, int(len(history) * frac))
    first = np.mean([h[key] for h in history[:n]])
    last = np.mean([h[key] for h in history[-n:]])
    return bool(last < first)

