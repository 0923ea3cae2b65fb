"""Expanded contrastive objective and its analytic gradients.

Components, all reduced by a mean over the batch:

* ``itc_loss`` -- symmetric image-text contrastive loss.
* ``itc_hn_loss`` -- same, with hard-negative captions added to the
  image->text softmax denominator.
* ``imc_loss`` -- intra-modal contrast, ``log sum_k exp S(T, T_k)``.
* ``cmr_loss`` -- cross-modal rank hinge with per-type thresholds, optionally
  plus ``-S(T, T_rel)``.

Masked (placeholder) hard-negative entries are only ever touched through
``np.where``, so their values cannot leak into a loss or a gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from .errors import NonFinite
from .hardneg import NEG_TYPES, NegType

N_TYPES = len(NEG_TYPES)
REL = NegType.REL.index


@dataclass
class HnSims:
    """Similarities involving hard negatives.

    ``s_hn[i, k] = S(I_i, T_{i,k})``, ``t_hn[i, k] = S(T_i, T_{i,k})``.
    ``s_hn_batch[i, j, k] = S(I_i, T_{j,k})`` is only needed for the
    batch-wide negative pool.
    """

    s_hn: np.ndarray
    t_hn: np.ndarray
    valid: np.ndarray
    s_hn_batch: np.ndarray | None = None

    @classmethod
    def masked(cls, batch_size: int) -> "HnSims":
        z = np.zeros((batch_size, N_TYPES))
        return cls(z, z.copy(), np.zeros((batch_size, N_TYPES), dtype=bool))


@dataclass(frozen=True)
class ThresholdState:
    th: np.ndarray = field(default_factory=lambda: np.zeros(N_TYPES))
    step: int = 0

    @classmethod
    def fixed(cls, value: float) -> "ThresholdState":
        return cls(np.full(N_TYPES, float(value)), 0)

    def as_dict(self) -> dict[str, float]:
        return {t.value: float(v) for t, v in zip(NEG_TYPES, self.th)}


@dataclass
class LossBreakdown:
    itc_hn: float
    imc: float
    cmr: float
    total: float
    hinge_rate: dict[str, float]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    beta: float = 0.4
    use_hn: bool = True
    use_imc: bool = True
    use_cmr: bool = True
    include_rel_term: bool = True
    hn_pool: str = "own"

    @property
    def alpha_eff(self) -> float:
        return self.alpha if self.use_imc else 0.0

    @property
    def beta_eff(self) -> float:
        return self.beta if self.use_cmr else 0.0


# ---------------------------------------------------------------------------
# similarity-level losses, each returning (value, gradients w.r.t. inputs)


def _neg_log_softmax_true(others, diag, m, log_sum):
    """-log softmax of the true logit, given the other logits (-inf where absent).

    Uses log1p(sum exp(others - diag)) unless the true logit trails the max by
    a wide margin, which keeps full relative precision for near-zero losses.
    """
    shifted = np.minimum(others - diag[:, None], 50.0)
    near = np.log1p(np.exp(shifted).sum(axis=1))
    return np.where(m - diag > 30.0, m + log_sum - diag, near)


def _itc_terms(sims, hn: HnSims | None, pool: str = "own"):
    sims = np.asarray(sims, dtype=np.float64)
    B = sims.shape[0]
    diag = np.diag(sims)

    # text -> image: softmax over images (columns)
    col_max = sims.max(axis=0)
    col_exp = np.exp(sims - col_max[None, :])
    col_sum = col_exp.sum(axis=0)
    off = np.where(np.eye(B, dtype=bool), -np.inf, sims)
    t2i = _neg_log_softmax_true(off.T, diag, col_max, np.log(col_sum))

    # image -> text: softmax over batch texts plus valid hard negatives
    row_max = sims.max(axis=1)
    hn_vals = hn_valid = None
    if hn is not None:
        if pool == "own":
            hn_vals, hn_valid = hn.s_hn, hn.valid
        elif pool == "batch":
            if hn.s_hn_batch is None:
                raise ValueError("hn_pool='batch' needs HnSims.s_hn_batch")
            hn_vals = hn.s_hn_batch.reshape(B, -1)
            hn_valid = np.broadcast_to(hn.valid.reshape(1, -1), hn_vals.shape)
        else:
            raise ValueError(f"unknown hn_pool {pool!r}")
        row_max = np.maximum(row_max, np.where(hn_valid, hn_vals, -np.inf).max(axis=1))
    row_exp = np.exp(sims - row_max[:, None])
    row_sum = row_exp.sum(axis=1)
    if hn_vals is not None:
        hn_exp = np.where(hn_valid, np.exp(np.where(hn_valid, hn_vals, 0.0) - row_max[:, None]), 0.0)
        row_sum = row_sum + hn_exp.sum(axis=1)
    others = off if hn_vals is None else np.concatenate([off, np.where(hn_valid, hn_vals, -np.inf)], axis=1)
    i2t = _neg_log_softmax_true(others, diag, row_max, np.log(row_sum))

    value = float(np.sum(i2t + t2i) / B)

    eye = np.eye(B)
    d_sims = (row_exp / row_sum[:, None] - eye + col_exp / col_sum[None, :] - eye) / B
    grads = {"sims": d_sims}
    if hn_vals is not None:
        d_hn = hn_exp / row_sum[:, None] / B
        if pool == "own":
            grads["s_hn"] = d_hn
        else:
            grads["s_hn_batch"] = d_hn.reshape(hn.s_hn_batch.shape)
    return value, grads


def _imc_terms(hn: HnSims):
    valid = hn.valid
    has = valid.any(axis=1)
    count = int(has.sum())
    if count == 0:
        return 0.0, {"t_hn": np.zeros_like(hn.t_hn, dtype=np.float64)}
    x = np.where(valid, hn.t_hn, -np.inf)
    m = np.where(has, x.max(axis=1), 0.0)
    ex = np.where(valid, np.exp(np.where(valid, hn.t_hn, 0.0) - m[:, None]), 0.0)
    s = ex.sum(axis=1)
    lse = np.where(has, m + np.log(np.where(has, s, 1.0)), 0.0)
    value = float(lse.sum() / count)
    d_t = np.where(valid, ex / np.where(has, s, 1.0)[:, None], 0.0) / count
    return value, {"t_hn": d_t}


def _cmr_terms(s_pos, hn: HnSims, th: np.ndarray, include_rel_term: bool = True):
    s_pos = np.asarray(s_pos, dtype=np.float64)
    B = s_pos.shape[0]
    valid = hn.valid
    margin = np.where(valid, hn.s_hn, 0.0) - s_pos[:, None] + np.asarray(th, dtype=np.float64)[None, :]
    active = valid & (margin > 0)
    hinge = np.where(active, margin, 0.0)
    value = hinge.sum()
    d_thn = np.zeros_like(hn.t_hn, dtype=np.float64)
    if include_rel_term:
        rel_ok = valid[:, REL]
        value = value - np.where(rel_ok, hn.t_hn[:, REL], 0.0).sum()
        d_thn[:, REL] = np.where(rel_ok, -1.0, 0.0) / B
    d_shn = active.astype(np.float64) / B
    d_pos = -d_shn.sum(axis=1)
    return float(value / B), {"s_hn": d_shn, "s_pos": d_pos, "t_hn": d_thn}, active


def itc_loss(sims) -> float:
    return _itc_terms(sims, None)[0]


def itc_hn_loss(sims, hn: HnSims, pool: str = "own") -> float:
    return _itc_terms(sims, hn, pool)[0]


def imc_loss(hn: HnSims) -> float:
    return _imc_terms(hn)[0]


def cmr_loss(sims_diag, hn: HnSims, th: ThresholdState | np.ndarray, include_rel_term: bool = True) -> float:
    th = th.th if isinstance(th, ThresholdState) else th
    return _cmr_terms(sims_diag, hn, th, include_rel_term)[0]


def type_gaps(sims_diag, hn: HnSims) -> tuple[np.ndarray, np.ndarray]:
    """Masked mean of ``s_pos - s_hn[:, k]`` per type, and the valid counts."""
    valid = hn.valid
    counts = valid.sum(axis=0)
    diff = np.where(valid, np.asarray(sims_diag, dtype=np.float64)[:, None] - np.where(valid, hn.s_hn, 0.0), 0.0)
    sums = diff.sum(axis=0)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return means, counts


def update_thresholds(prev: ThresholdState, sims_diag, hn: HnSims, u: float = 10.0) -> ThresholdState:
    """Next per-type thresholds from (detached) similarities of the last step.

    ``th[k] = min(u, max(0, masked mean gap))``; types with no valid entry keep
    their previous value.
    """
    means, counts = type_gaps(sims_diag, hn)
    new = np.minimum(u, np.maximum(0.0, means))
    th = np.where(counts > 0, new, prev.th)
    return ThresholdState(th, prev.step + 1)


def _hinge_rates(active: np.ndarray, valid: np.ndarray) -> dict[str, float]:
    counts = valid.sum(axis=0)
    hits = active.sum(axis=0)
    return {t.value: (float(hits[k] / counts[k]) if counts[k] else 0.0) for k, t in enumerate(NEG_TYPES)}


def _objective(sims, hn: HnSims, th, cfg: LossConfig):
    th = th.th if isinstance(th, ThresholdState) else np.asarray(th, dtype=np.float64)
    itc, g_itc = _itc_terms(sims, hn if cfg.use_hn else None, cfg.hn_pool)
    imc, g_imc = _imc_terms(hn)
    cmr, g_cmr, active = _cmr_terms(np.diag(sims), hn, th, cfg.include_rel_term)
    a, b = cfg.alpha_eff, cfg.beta_eff
    total = itc + a * imc + b * cmr
    parts = LossBreakdown(itc, imc, cmr, total, _hinge_rates(active, hn.valid))
    return parts, (g_itc, g_imc, g_cmr)


def total_loss(
    sims,
    hn: HnSims,
    th,
    alpha: float = 0.2,
    beta: float = 0.4,
    flags: LossConfig | None = None,
) -> LossBreakdown:
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    base = flags if flags is not None else LossConfig()
    cfg = LossConfig(alpha, beta, base.use_hn, base.use_imc, base.use_cmr, base.include_rel_term, base.hn_pool)
    return _objective(sims, hn, th, cfg)[0]


# ---------------------------------------------------------------------------
# full forward/backward through the encoder


@dataclass
class Batch:
    """Encoded-ready batch.

    ``neg_index[i, k]`` is the row of ``neg_ids`` holding hard negative k of
    item i, or -1 for a placeholder.
    """

    features: np.ndarray
    pos_ids: list[list[int]]
    neg_ids: list[list[int]]
    neg_index: np.ndarray
    record_ids: list[str] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        return self.neg_index >= 0

    def __len__(self) -> int:
        return len(self.pos_ids)


@dataclass
class Forward:
    sims: np.ndarray
    hn: HnSims
    img: np.ndarray
    txt: np.ndarray
    neg: np.ndarray
    img_cache: tuple
    txt_cache: tuple
    s_in: np.ndarray  # (B, n_neg) image vs every negative row


def forward(params: enc.ModelParams, batch: Batch) -> Forward:
    B = len(batch)
    img, img_cache = enc.image_forward(params, batch.features)
    ids, mask = enc.pad_ids(list(batch.pos_ids) + list(batch.neg_ids), params.E.shape[0])
    all_txt, txt_cache = enc.text_forward(params, ids, mask)
    txt, neg = all_txt[:B], all_txt[B:]
    log_tau = float(params.log_tau)
    if not math.isfinite(log_tau) or -log_tau > 700.0:
        raise NonFinite(f"temperature exp({log_tau}) is out of range")
    inv_tau = math.exp(-log_tau)
    sims = (img @ txt.T) * inv_tau
    s_in = (img @ neg.T) * inv_tau
    valid = batch.valid
    rows = np.where(valid, batch.neg_index, 0)
    if neg.shape[0]:
        s_hn_batch = np.where(valid[None], s_in[:, rows], 0.0)
        t_hn = np.where(valid, np.einsum("id,ikd->ik", txt, neg[rows]) * inv_tau, 0.0)
    else:
        s_hn_batch = np.zeros((B, B, N_TYPES))
        t_hn = np.zeros((B, N_TYPES))
    s_hn = s_hn_batch[np.arange(B), np.arange(B)]
    hn = HnSims(s_hn, t_hn, valid, s_hn_batch)
    return Forward(sims, hn, img, txt, neg, img_cache, txt_cache, s_in)


def loss_gradients(
    params: enc.ModelParams, batch: Batch, th, cfg: LossConfig
) -> tuple[LossBreakdown, dict[str, np.ndarray], Forward]:
    """Loss breakdown and exact gradients for every parameter tensor.

    Thresholds are constants here.
    """
    fw = forward(params, batch)
    parts, (g_itc, g_imc, g_cmr) = _objective(fw.sims, fw.hn, th, cfg)
    a, b = cfg.alpha_eff, cfg.beta_eff
    B = len(batch)
    valid = batch.valid
    rows = np.where(valid, batch.neg_index, 0)
    n_neg = fw.neg.shape[0]

    g_sims = g_itc["sims"].copy()
    g_sims[np.diag_indices(B)] += b * g_cmr["s_pos"]
    g_shn_batch = np.zeros((B, B, N_TYPES))
    if "s_hn_batch" in g_itc:
        g_shn_batch += g_itc["s_hn_batch"]
    if "s_hn" in g_itc:
        g_shn_batch[np.arange(B), np.arange(B)] += g_itc["s_hn"]
    g_shn_batch[np.arange(B), np.arange(B)] += b * g_cmr["s_hn"]
    g_thn = a * g_imc["t_hn"] + b * g_cmr["t_hn"]
    g_shn_batch = np.where(valid[None], g_shn_batch, 0.0)
    g_thn = np.where(valid, g_thn, 0.0)

    # scatter onto negative rows
    g_in = np.zeros((B, n_neg))
    g_tn = np.zeros(n_neg)
    if n_neg:
        jj, kk = np.nonzero(valid)
        r = batch.neg_index[jj, kk]
        g_in[:, r] += g_shn_batch[:, jj, kk]
        g_tn[r] += g_thn[jj, kk]

    inv_tau = math.exp(-float(params.log_tau))
    d_img = (g_sims @ fw.txt + g_in @ fw.neg) * inv_tau
    d_txt = (g_sims.T @ fw.img) * inv_tau
    d_neg = (g_in.T @ fw.img) * inv_tau
    if n_neg:
        d_txt += np.einsum("ik,ikd->id", g_thn, fw.neg[rows]) * inv_tau
        owner = np.repeat(np.arange(B)[:, None], N_TYPES, axis=1)
        d_neg_t = np.zeros_like(fw.neg)
        np.add.at(d_neg_t, batch.neg_index[valid], g_thn[valid][:, None] * fw.txt[owner[valid]])
        d_neg += d_neg_t * inv_tau

    grads = enc.zero_grads(params)
    enc.image_backward(params, fw.img_cache, d_img, grads)
    enc.text_backward(params, fw.txt_cache, np.vstack([d_txt, d_neg]), grads)
    t_hn_sel = np.where(valid, fw.hn.t_hn, 0.0)
    grads["log_tau"] = np.array(
        -(np.sum(g_sims * fw.sims) + np.sum(g_in * fw.s_in) + np.sum(g_thn * t_hn_sel))
    )
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"non-finite gradient in {name}")
    return parts, grads, fw


def batch_loss(params: enc.ModelParams, batch: Batch, th, cfg: LossConfig) -> float:
    """Total loss only; used by the finite-difference checks."""
    fw = forward(params, batch)
    return _objective(fw.sims, fw.hn, th, cfg)[0].total


def ids_for(vocab: enc.Vocabulary, captions: Sequence[str]) -> list[list[int]]:
    return [vocab.encode(c) for c in captions]
