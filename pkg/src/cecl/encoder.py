"""Tiny dual encoder with trainable temperature.

Text: position-gated mean of token embeddings, affine projection, L2
normalization. Image: affine projection, L2 normalization. Similarity is the
cosine divided by ``tau = exp(log_tau)``.

All forward passes come with hand-written backward passes; the finite
difference tests in ``tests/test_gradients.py`` pin them down.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyCaption, UnknownToken, ZeroNorm
from .textproc import tokenize

PARAM_NAMES = ("E", "P", "W_t", "b_t", "W_i", "b_i", "log_tau")
UNK = "<unk>"
INIT_TAU = 0.07
INIT_SCALE = 0.1
ZERO_NORM_EPS = 1e-12


class Vocabulary:
    """Word <-> id table. Id 0 is reserved for unknown words."""

    def __init__(self, words: Iterable[str]):
        words = [w for w in words if w != UNK]
        self.words: tuple[str, ...] = (UNK, *sorted(set(words)))
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: object) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        return self._ids.get(word, 0)

    def encode(self, text: str) -> list[int]:
        return [self.id(tok.surface) for tok in tokenize(text)]


@dataclass
class ModelParams:
    E: np.ndarray  # (V, d_e) token embeddings
    P: np.ndarray  # (max_len, d_e) positional gates; text mean uses E[t] * (1 + P[pos])
    W_t: np.ndarray  # (d, d_e)
    b_t: np.ndarray  # (d,)
    W_i: np.ndarray  # (d, d_x)
    b_i: np.ndarray  # (d,)
    log_tau: np.ndarray  # 0-d
    vocab: Vocabulary = field(repr=False, default=None)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    @property
    def dims(self) -> dict:
        return {
            "V": self.E.shape[0],
            "d_e": self.E.shape[1],
            "d": self.W_t.shape[0],
            "d_x": self.W_i.shape[1],
            "max_len": self.P.shape[0],
        }

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()}, vocab=self.vocab)

    def replace(self, **tensors: np.ndarray) -> "ModelParams":
        new = self.tensors()
        new.update(tensors)
        return ModelParams(**new, vocab=self.vocab)


def init_params(
    vocab: Vocabulary,
    d_x: int,
    d_e: int = 32,
    d: int = 32,
    max_len: int = 16,
    seed: int = 0,
) -> ModelParams:
    """Uniform(-0.1, 0.1) init for every tensor; tau starts at 0.07."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    return ModelParams(
        E=u(len(vocab), d_e),
        P=u(max_len, d_e),
        W_t=u(d, d_e),
        b_t=u(d),
        W_i=u(d, d_x),
        b_i=u(d),
        log_tau=np.array(math.log(INIT_TAU)),
        vocab=vocab,
    )


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray  # unit norm
    norm: float  # norm before normalization


# ---------------------------------------------------------------------------
# batched forward / backward


def pad_ids(seqs: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack token-id lists into an (n, L) id matrix and a 0/1 mask."""
    if any(len(s) == 0 for s in seqs):
        raise EmptyCaption("caption has no tokens")
    width = max((len(s) for s in seqs), default=0)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for r, s in enumerate(seqs):
        row = np.asarray(s, dtype=np.int64)
        if row.min() < 0 or row.max() >= vocab_size:
            raise UnknownToken(f"token id out of range [0, {vocab_size})")
        ids[r, : len(s)] = row
        mask[r, : len(s)] = 1.0
    return ids, mask


def _normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=-1)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroNorm("embedding has (near) zero norm")
    return z / norms[..., None], norms


def _normalize_backward(e: np.ndarray, norms: np.ndarray, de: np.ndarray) -> np.ndarray:
    return (de - e * np.sum(e * de, axis=-1, keepdims=True)) / norms[..., None]


def text_forward(params: ModelParams, ids: np.ndarray, mask: np.ndarray):
    """Encode padded captions. Returns (unit embeddings, cache for backward)."""
    lengths = mask.sum(axis=1)
    pos = np.minimum(np.arange(ids.shape[1]), params.P.shape[0] - 1)
    gate = 1.0 + params.P[pos]  # (L, d_e)
    rows = params.E[ids]  # (n, L, d_e)
    weights = mask / lengths[:, None]  # (n, L)
    h = np.einsum("nl,nld,ld->nd", weights, rows, gate)
    z = h @ params.W_t.T + params.b_t
    e, norms = _normalize(z)
    return e, (ids, weights, pos, gate, rows, h, e, norms)


def text_backward(params: ModelParams, cache, de: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    ids, weights, pos, gate, rows, h, e, norms = cache
    dz = _normalize_backward(e, norms, de)
    grads["W_t"] += dz.T @ h
    grads["b_t"] += dz.sum(axis=0)
    dh = dz @ params.W_t  # (n, d_e)
    drows = weights[:, :, None] * dh[:, None, :] * gate[None]  # (n, L, d_e)
    np.add.at(grads["E"], ids.ravel(), drows.reshape(-1, drows.shape[-1]))
    dgate = np.einsum("nl,nd,nld->ld", weights, dh, rows)
    np.add.at(grads["P"], pos, dgate)


def image_forward(params: ModelParams, feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.W_i.shape[1]:
        raise DimensionMismatch(
            f"image feature dim {feats.shape[-1] if feats.ndim else 0} != {params.W_i.shape[1]}"
        )
    z = feats @ params.W_i.T + params.b_i
    e, norms = _normalize(z)
    return e, (feats, e, norms)


def image_backward(params: ModelParams, cache, de: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    feats, e, norms = cache
    dz = _normalize_backward(e, norms, de)
    grads["W_i"] += dz.T @ feats
    grads["b_i"] += dz.sum(axis=0)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t, dtype=np.float64) for name, t in params.tensors().items()}


# ---------------------------------------------------------------------------
# single-item API


def encode_text(params: ModelParams, tokens: Sequence[int]) -> Embedding:
    ids, mask = pad_ids([list(tokens)], params.E.shape[0])
    lengths = mask.sum(axis=1)
    pos = np.minimum(np.arange(ids.shape[1]), params.P.shape[0] - 1)
    h = np.einsum("nl,nld,ld->nd", mask / lengths[:, None], params.E[ids], 1.0 + params.P[pos])
    z = (h @ params.W_t.T + params.b_t)[0]
    norm = float(np.linalg.norm(z))
    if norm < ZERO_NORM_EPS:
        raise ZeroNorm("text embedding has zero norm")
    return Embedding(z / norm, norm)


def encode_image(params: ModelParams, feature: Sequence[float]) -> Embedding:
    x = np.asarray(feature, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.W_i.shape[1]:
        raise DimensionMismatch(f"expected feature of length {params.W_i.shape[1]}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DimensionMismatch("image feature has non-finite entries")
    z = params.W_i @ x + params.b_i
    norm = float(np.linalg.norm(z))
    if norm < ZERO_NORM_EPS:
        raise ZeroNorm("image embedding has zero norm")
    return Embedding(z / norm, norm)


def similarity(params: ModelParams, a: Embedding, b: Embedding) -> float:
    if a.norm < ZERO_NORM_EPS or b.norm < ZERO_NORM_EPS:
        raise ZeroNorm("similarity of a zero-norm embedding")
    return float(np.dot(a.vector, b.vector)) / params.tau


def similarity_matrix(
    params: ModelParams, images: Sequence[Sequence[float]], texts: Sequence[Sequence[int]]
) -> np.ndarray:
    """``sims[i, j] = S(image_i, text_j)``."""
    img, _ = image_forward(params, np.asarray(images, dtype=np.float64).reshape(len(images), -1))
    ids, mask = pad_ids(texts, params.E.shape[0])
    txt, _ = text_forward(params, ids, mask)
    return (img @ txt.T) / params.tau


def cosine_matrix(params: ModelParams, images, texts) -> np.ndarray:
    """Temperature-free variant of ``similarity_matrix``."""
    return similarity_matrix(params, images, texts) * params.tau


# ---------------------------------------------------------------------------
# serialization


def params_to_dict(params: ModelParams) -> dict:
    return {
        "dims": params.dims,
        "vocab": list(params.vocab.words) if params.vocab is not None else None,
        "tensors": {
            name: {"shape": list(t.shape), "data": np.asarray(t, dtype=np.float64).ravel().tolist()}
            for name, t in params.tensors().items()
            if name != "log_tau"
        },
        "log_tau": float(params.log_tau),
    }


def params_from_dict(obj: dict) -> ModelParams:
    tensors = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in obj["tensors"].items()
    }
    vocab = Vocabulary(obj["vocab"]) if obj.get("vocab") is not None else None
    return ModelParams(**tensors, log_tau=np.array(float(obj["log_tau"])), vocab=vocab)


def params_digest(params: ModelParams, decimals: int | None = None) -> str:
    """SHA-256 over all tensors (row-major float64) and the vocabulary.

    ``decimals`` rounds before hashing, for golden values that should survive
    last-ulp BLAS differences across machines.
    """
    h = hashlib.sha256()
    for name in PARAM_NAMES:
        t = np.asarray(getattr(params, name), dtype=np.float64)
        if decimals is not None:
            t = np.round(t, decimals) + 0.0  # +0.0 folds -0.0
        h.update(name.encode())
        h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
    if params.vocab is not None:
        h.update("\x00".join(params.vocab.words).encode())
    return h.hexdigest()
