"""Frozen encoders, the trainable image-to-token mapping network, and query composition.

A composed query is the token sequence for ``a photo of [$ $ $], <query text>``
where ``[$ $ $]`` are ``k`` continuous pseudo tokens produced by the mapping
network. Pseudo tokens are spliced in at the embedding layer.
"""
from __future__ import annotations

import dataclasses
import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from cirlab.errors import CorruptCheckpoint, DimMismatch, EncoderNotLoaded
from cirlab.io import FORMAT_VERSION

DTYPE = torch.float64
TEMPLATE = "a photo of"
SEPARATOR = ","
BASE_VOCAB = ("<unk>", "a", "photo", "of", ",")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class EncoderBundle:
    """Interface for a frozen visual encoder plus a frozen text encoder.

    Subclasses set ``loaded`` once their weights are available. ``encode_text_tokens``
    must accept arbitrary continuous token embeddings so pseudo tokens can be spliced in.
    """

    loaded = False
    d_img: int
    d_token: int
    d_out: int

    def _require_loaded(self):
        if not self.loaded:
            raise EncoderNotLoaded(f"{type(self).__name__} has no weights loaded")

    def encode_image(self, x) -> torch.Tensor:
        self._require_loaded()
        raise NotImplementedError

    def encode_text_tokens(self, tokens, mask=None) -> torch.Tensor:
        self._require_loaded()
        raise NotImplementedError

    def token_ids(self, words: Sequence[str]) -> list[int]:
        self._require_loaded()
        raise NotImplementedError

    def embed_ids(self, ids) -> torch.Tensor:
        self._require_loaded()
        raise NotImplementedError

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {}

    def snapshot(self) -> bytes:
        """Raw bytes of every frozen weight, for bit-exact before/after comparisons."""
        state = self.frozen_state()
        return b"".join(name.encode() + state[name].detach().cpu().numpy().tobytes()
                        for name in sorted(state))

    def suffix_batch(self, texts: Sequence[str]):
        """Token ids for ``", " + text`` per item (nothing for empty text), padded.

        Returns ``(ids, mask)`` with shapes ``(B, L)``; ``L`` may be 0.
        """
        seqs = []
        for text in texts:
            words = tokenize(text) if text and text.strip() else []
            seqs.append(self.token_ids([SEPARATOR] + words) if words else [])
        width = max((len(s) for s in seqs), default=0)
        ids = torch.zeros((len(seqs), width), dtype=torch.long)
        mask = torch.zeros((len(seqs), width), dtype=torch.bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
            mask[i, : len(s)] = True
        return ids, mask


def _stable_hash(word: str) -> int:
    return int(hashlib.sha256(word.encode("utf-8")).hexdigest()[:8], 16)


class ToyEncoders(EncoderBundle):
    """Small deterministic stand-in for a pretrained dual encoder.

    visual: ``normalize(V @ x)``; text: ``normalize(T @ mean(tokens))`` over a token
    table holding a tiny vocabulary plus hashed buckets for unknown words. Square
    projections are random orthogonal matrices. Nothing here is trainable.
    """

    loaded = True

    def __init__(self, seed: int = 0, d_img: int = 16, d_token: int = 16, d_out: int = 16,
                 vocab: Sequence[str] = (), n_buckets: int = 64,
                 word_vectors: dict[str, Sequence[float]] | None = None):
        self.seed, self.d_img, self.d_token, self.d_out = seed, d_img, d_token, d_out
        self.n_buckets = n_buckets
        word_vectors = dict(word_vectors or {})
        words = list(BASE_VOCAB)
        for w in list(vocab) + sorted(word_vectors):
            if w not in words:
                words.append(w)
        self.vocab = {w: i for i, w in enumerate(words)}

        rng = np.random.default_rng(seed)
        self.visual = torch.as_tensor(_projection(rng, d_out, d_img))
        self.text_proj = torch.as_tensor(_projection(rng, d_out, d_token))
        table = rng.standard_normal((len(words) + n_buckets, d_token)) / np.sqrt(d_token)
        for w, v in word_vectors.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (d_token,):
                raise DimMismatch(f"word vector for {w!r} has shape {v.shape}")
            table[self.vocab[w]] = v
        self.token_table = torch.as_tensor(table)
        self._word_vectors = {w: [float(x) for x in v] for w, v in word_vectors.items()}
        for t in self.frozen_state().values():
            t.requires_grad_(False)

    def spec(self) -> dict:
        extra = [w for w in self.vocab if w not in BASE_VOCAB and w not in self._word_vectors]
        return {"type": "toy", "seed": self.seed, "d_img": self.d_img, "d_token": self.d_token,
                "d_out": self.d_out, "vocab": extra, "n_buckets": self.n_buckets,
                "word_vectors": self._word_vectors}

    @classmethod
    def from_spec(cls, spec: dict) -> "ToyEncoders":
        spec = {k: v for k, v in spec.items() if k != "type"}
        return cls(**spec)

    def frozen_state(self):
        return {"visual": self.visual, "text_proj": self.text_proj, "token_table": self.token_table}

    def encode_image(self, x) -> torch.Tensor:
        x = _to_tensor(x)
        if x.shape[-1] != self.d_img:
            raise DimMismatch(f"image feature dim {x.shape[-1]} != {self.d_img}")
        return nn.functional.normalize(x @ self.visual.T, dim=-1)

    def token_ids(self, words):
        base = len(self.vocab)
        return [self.vocab[w] if w in self.vocab else base + _stable_hash(w) % self.n_buckets
                for w in words]

    def embed_ids(self, ids) -> torch.Tensor:
        return self.token_table[torch.as_tensor(ids, dtype=torch.long)]

    def encode_text_tokens(self, tokens, mask=None) -> torch.Tensor:
        """Mean-pool token embeddings (respecting ``mask``), project, normalize."""
        tokens = _to_tensor(tokens)
        if tokens.shape[-1] != self.d_token:
            raise DimMismatch(f"token dim {tokens.shape[-1]} != {self.d_token}")
        single = tokens.dim() == 2
        if single:
            tokens = tokens.unsqueeze(0)
        if mask is None:
            pooled = tokens.mean(dim=1)
        else:
            m = torch.as_tensor(mask).to(DTYPE).unsqueeze(-1)
            pooled = (tokens * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)
        out = nn.functional.normalize(pooled @ self.text_proj.T, dim=-1)
        return out[0] if single else out

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        ids = [self.token_ids(tokenize(t)) or [0] for t in texts]
        width = max(len(i) for i in ids)
        id_t = torch.zeros((len(ids), width), dtype=torch.long)
        mask = torch.zeros((len(ids), width), dtype=torch.bool)
        for r, seq in enumerate(ids):
            id_t[r, : len(seq)] = torch.as_tensor(seq)
            mask[r, : len(seq)] = True
        return self.encode_text_tokens(self.embed_ids(id_t), mask)


def _projection(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    g = rng.standard_normal((rows, cols))
    if rows == cols:
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
    return g / np.sqrt(cols)


def toy_encoder_bundle(seed: int = 0, d_img: int = 16, d_token: int = 16, d_out: int = 16,
                       **kwargs) -> ToyEncoders:
    return ToyEncoders(seed, d_img, d_token, d_out, **kwargs)


def encoders_from_spec(spec: dict) -> EncoderBundle:
    if spec.get("type", "toy") != "toy":
        raise ValueError(f"unsupported encoder type {spec.get('type')!r}")
    return ToyEncoders.from_spec(spec)


@dataclass
class ModelConfig:
    token_count: int = 4
    hidden_dim: int | None = None
    n_layers: int = 3
    activation: str = "gelu"

    def __post_init__(self):
        if self.token_count < 1 or self.n_layers < 1:
            raise ValueError("token_count and n_layers must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "tanh": nn.Tanh}


class MappingNetwork(nn.Module):
    """Feed-forward map from an image feature to ``k`` pseudo-token embeddings."""

    def __init__(self, d_img: int, d_token: int, config: ModelConfig | None = None,
                 seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        self.d_img, self.d_token, self.k = d_img, d_token, self.config.token_count
        hidden = self.config.hidden_dim or d_img
        dims = [d_img] + [hidden] * (self.config.n_layers - 1) + [self.k * d_token]
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(a, b, dtype=DTYPE))
            if i < len(dims) - 2:
                layers.append(_ACTIVATIONS[self.config.activation]())
        self.layers = nn.Sequential(*layers)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.layers:
                if isinstance(layer, nn.Linear):
                    bound = 1.0 / np.sqrt(layer.in_features)
                    layer.weight.uniform_(-bound, bound, generator=gen)
                    layer.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, image_features: torch.Tensor) -> torch.Tensor:
        x = _to_tensor(image_features)
        if x.shape[-1] != self.d_img:
            raise DimMismatch(f"image feature dim {x.shape[-1]} != {self.d_img}")
        out = self.layers(x)
        return out.reshape(*x.shape[:-1], self.k, self.d_token)


def map_image_to_tokens(image_embedding, net: MappingNetwork) -> torch.Tensor:
    return net(_to_tensor(image_embedding))


def compose_batch(net: MappingNetwork, encoders: EncoderBundle, image_features,
                  suffix_ids: torch.Tensor | None = None,
                  suffix_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Composed features ``(B, d_out)`` for a batch of images and pre-tokenized suffixes."""
    encoders._require_loaded()
    if net.d_token != encoders.d_token:
        raise DimMismatch(f"pseudo-token dim {net.d_token} != encoder token dim {encoders.d_token}")
    feats = _to_tensor(image_features)
    pseudo = net(feats)
    batch = pseudo.shape[0]
    prefix = encoders.embed_ids(encoders.token_ids(tokenize(TEMPLATE)))
    parts = [prefix.unsqueeze(0).expand(batch, -1, -1), pseudo]
    masks = [torch.ones((batch, prefix.shape[0] + net.k), dtype=torch.bool)]
    if suffix_ids is not None and suffix_ids.shape[1] > 0:
        parts.append(encoders.embed_ids(suffix_ids))
        masks.append(suffix_mask)
    return encoders.encode_text_tokens(torch.cat(parts, dim=1), torch.cat(masks, dim=1))


def compose_texts(net, encoders, image_features, texts: Sequence[str]) -> torch.Tensor:
    ids, mask = encoders.suffix_batch(texts)
    return compose_batch(net, encoders, image_features, ids, mask)


@dataclass
class ComposedQuery:
    pseudo_tokens: torch.Tensor
    query_text: str
    composed_feature: torch.Tensor


def query_token_sequence(image_embedding, query_text: str, net, encoders) -> torch.Tensor:
    """The full ``(n, d_token)`` input sequence fed to the text encoder."""
    prefix = encoders.embed_ids(encoders.token_ids(tokenize(TEMPLATE)))
    pseudo = net(_to_tensor(image_embedding).reshape(1, -1))[0]
    ids, _ = encoders.suffix_batch([query_text])
    return torch.cat([prefix, pseudo, encoders.embed_ids(ids[0])], dim=0)


def compose_query(image_embedding, query_text: str, net: MappingNetwork,
                  encoders: EncoderBundle) -> ComposedQuery:
    encoders._require_loaded()
    feats = _to_tensor(image_embedding).reshape(1, -1)
    feature = compose_texts(net, encoders, feats, [query_text])[0]
    return ComposedQuery(net(feats)[0], query_text, feature)


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_KIND = "cirlab.checkpoint"


def save_checkpoint(path, net: MappingNetwork, encoder_spec: dict, cfg_hash: str = "",
                    step: int = 0, optimizer_state: dict | None = None, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": CHECKPOINT_KIND,
        "format_version": FORMAT_VERSION,
        "config_hash": cfg_hash,
        "step": step,
        "d_img": net.d_img,
        "d_token": net.d_token,
        "token_count": net.k,
        "model_config": dataclasses.asdict(net.config),
        "state_dict": net.state_dict(),
        "optimizer_state": optimizer_state,
        "encoder_spec": encoder_spec,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != CHECKPOINT_KIND:
        raise CorruptCheckpoint(f"{path}: not a cirlab checkpoint")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{path}: format_version {payload.get('format_version')!r}")
    return payload


def network_from_checkpoint(payload: dict) -> MappingNetwork:
    net = MappingNetwork(payload["d_img"], payload["d_token"],
                         ModelConfig(**payload["model_config"]))
    try:
        net.load_state_dict(payload["state_dict"])
    except (RuntimeError, KeyError) as exc:
        raise CorruptCheckpoint(str(exc)) from exc
    return net
