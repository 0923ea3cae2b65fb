"""Deterministic fine-tuning loop with adaptive per-type thresholds."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import encoder as enc
from . import losses as L
from .errors import BadRecord, DimensionMismatch, NonFinite
from .hardneg import NEG_TYPES, PLACEHOLDER, LexiconFiller, augment
from .textproc import LexiconTagger, default_lexicon, tokenize
from .synthworld import DatasetRecord

CHECKPOINT_FORMAT = "cecl-checkpoint"
CHECKPOINT_VERSION = 1
HN_KEYS = tuple(f"hn_{t.value.lower()}" for t in NEG_TYPES)
FIXED_THRESHOLDS = (2.0, 5.0, 10.0)


@dataclass
class TrainConfig:
    alpha: float = 0.2
    beta: float = 0.4
    upper_bound: float = 10.0
    threshold_mode: str = "adaptive"  # adaptive | fixed
    fixed_threshold: float = 5.0  # used when threshold_mode == "fixed"; one of 2, 5, 10
    hn_pool: str = "own"  # own | batch
    include_rel_term: bool = True
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam(0.9, 0.999, 1e-8)"  # or "sgd_momentum(0.9)"
    seed: int = 0
    use_hn: bool = True
    use_imc: bool = True
    use_cmr: bool = True
    regen_per_epoch: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "float" and isinstance(v, int) and not isinstance(v, bool):
                setattr(self, f.name, float(v))
        self.validate()

    def validate(self) -> None:
        if self.threshold_mode not in ("adaptive", "fixed"):
            raise ValueError(f"threshold_mode must be 'adaptive' or 'fixed', got {self.threshold_mode!r}")
        if self.threshold_mode == "fixed" and self.fixed_threshold not in FIXED_THRESHOLDS:
            raise ValueError(f"fixed_threshold must be one of {FIXED_THRESHOLDS}, got {self.fixed_threshold}")
        if self.hn_pool not in ("own", "batch"):
            raise ValueError(f"hn_pool must be 'own' or 'batch', got {self.hn_pool!r}")
        if self.use_imc and self.alpha < 0 or self.use_cmr and self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.upper_bound <= 0 or self.lr < 0:
            raise ValueError("upper_bound must be > 0 and lr >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.use_hn and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when use_hn is on")
        parse_optimizer(self.optimizer)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def loss_config(self) -> L.LossConfig:
        return L.LossConfig(
            self.alpha, self.beta, self.use_hn, self.use_imc, self.use_cmr, self.include_rel_term, self.hn_pool
        )


@dataclass(frozen=True)
class ModelDims:
    d_e: int = 32
    d: int = 32
    max_len: int = 16


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


_OPT_RE = re.compile(r"^\s*(adam|sgd_momentum|sgd)\s*(?:\((.*)\))?\s*$")


def parse_optimizer(text: str) -> OptimizerSpec:
    m = _OPT_RE.match(text)
    if not m:
        raise ValueError(f"bad optimizer spec {text!r}; use 'adam(b1, b2, eps)' or 'sgd_momentum(mu)'")
    kind, args = m.group(1), m.group(2)
    vals = [float(a) for a in args.split(",")] if args and args.strip() else []
    if kind == "adam":
        if len(vals) not in (0, 3):
            raise ValueError("adam takes (beta1, beta2, eps)")
        return OptimizerSpec("adam", beta1=vals[0], beta2=vals[1], eps=vals[2]) if vals else OptimizerSpec("adam")
    if len(vals) > 1:
        raise ValueError("sgd_momentum takes (mu)")
    mu = vals[0] if vals else (0.9 if kind == "sgd_momentum" else 0.0)
    return OptimizerSpec("sgd_momentum", momentum=mu)


def init_optimizer_state(params: enc.ModelParams, spec: OptimizerSpec) -> dict:
    zeros = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.tensors().items()}
    if spec.kind == "adam":
        return {"t": 0, "m": zeros, "v": {k: v.copy() for k, v in zeros.items()}}
    return {"t": 0, "velocity": zeros}


def optimizer_step(
    params: enc.ModelParams, grads: dict[str, np.ndarray], state: dict, spec: OptimizerSpec, lr: float
) -> tuple[enc.ModelParams, dict]:
    """SGD with momentum (v <- mu v + g; theta <- theta - lr v) or bias-corrected Adam."""
    tensors = params.tensors()
    for name, t in tensors.items():
        if grads[name].shape != np.shape(t):
            raise DimensionMismatch(f"gradient shape {grads[name].shape} != parameter {name} {np.shape(t)}")
    t = state["t"] + 1
    new, new_state = {}, {"t": t}
    if spec.kind == "adam":
        b1, b2 = spec.beta1, spec.beta2
        m_all, v_all = {}, {}
        for name, p in tensors.items():
            g = grads[name]
            m = b1 * state["m"][name] + (1.0 - b1) * g
            v = b2 * state["v"][name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            new[name] = p - lr * m_hat / (np.sqrt(v_hat) + spec.eps)
            m_all[name], v_all[name] = m, v
        new_state.update(m=m_all, v=v_all)
    else:
        vel_all = {}
        for name, p in tensors.items():
            vel = spec.momentum * state["velocity"][name] + grads[name]
            new[name] = p - lr * vel
            vel_all[name] = vel
        new_state["velocity"] = vel_all
    return params.replace(**new), new_state


# ---------------------------------------------------------------------------
# data


def build_vocabulary(records: Iterable[DatasetRecord]) -> enc.Vocabulary:
    words = set(default_lexicon().words())
    for r in records:
        texts = [r.caption, *r.alt_captions, *((r.hard_negatives or {}).values())]
        for text in texts:
            if text != PLACEHOLDER:
                words.update(tok.surface for tok in tokenize(text))
    return enc.Vocabulary(words)


def corpus_words(records: Iterable[DatasetRecord]) -> set[str]:
    return {tok.surface for r in records for tok in tokenize(r.caption)}


def attach_hard_negatives(
    records: Sequence[DatasetRecord], seed: int, epoch: int | None = None, tagger=None, filler=None
) -> list[DatasetRecord]:
    """Copy of ``records`` with freshly generated hard negatives.

    The default filler draws only from words seen in the corpus captions.
    """
    tagger = tagger if tagger is not None else LexiconTagger()
    if filler is None:
        filler = LexiconFiller(tagger.lexicon, restrict_to=corpus_words(records))
    rows = augment(({"id": r.id, "caption": r.caption} for r in records), seed, tagger, filler, epoch)
    return [
        DatasetRecord(r.id, r.feature, r.caption, r.scene, r.alt_captions, {k: row[k] for k in HN_KEYS})
        for r, row in zip(records, rows)
    ]


def restrict_types(records: Sequence[DatasetRecord], keep: Iterable[str]) -> list[DatasetRecord]:
    """Replace hard negatives of types outside ``keep`` by the placeholder."""
    keep_keys = {f"hn_{str(t).lower()}" for t in keep}
    out = []
    for r in records:
        hn = {k: (v if k in keep_keys else PLACEHOLDER) for k, v in (r.hard_negatives or {}).items()}
        out.append(DatasetRecord(r.id, r.feature, r.caption, r.scene, r.alt_captions, hn))
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(n)


def assemble_batch(records: Sequence[DatasetRecord], indices: Sequence[int], vocab: enc.Vocabulary) -> L.Batch:
    feats, pos_ids, neg_ids, ids = [], [], [], []
    neg_index = np.full((len(indices), len(NEG_TYPES)), -1, dtype=np.int64)
    for row, i in enumerate(indices):
        r = records[i]
        toks = vocab.encode(r.caption)
        if not toks:
            raise BadRecord(f"record {r.id}: caption {r.caption!r} has no tokens")
        pos_ids.append(toks)
        feats.append(r.feature)
        ids.append(r.id)
        hn = r.hard_negatives or {}
        for k, key in enumerate(HN_KEYS):
            text = hn.get(key, PLACEHOLDER)
            if text == PLACEHOLDER:
                continue
            ntoks = vocab.encode(text)
            if not ntoks:
                raise BadRecord(f"record {r.id}: hard negative {key} has no tokens")
            neg_index[row, k] = len(neg_ids)
            neg_ids.append(ntoks)
    return L.Batch(np.asarray(feats, dtype=np.float64), pos_ids, neg_ids, neg_index, ids)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    params: enc.ModelParams
    opt_state: dict
    thresholds: L.ThresholdState
    step: int = 0
    epoch: int = 0  # cursor: next batch is (epoch, batch_in_epoch)
    batch_in_epoch: int = 0


def initial_state(
    config: TrainConfig,
    vocab: enc.Vocabulary,
    d_x: int,
    dims: ModelDims = ModelDims(),
    init: enc.ModelParams | None = None,
) -> TrainState:
    if init is not None:
        params = init.copy()
    else:
        params = enc.init_params(vocab, d_x, dims.d_e, dims.d, dims.max_len, seed=config.seed)
    th = L.ThresholdState.fixed(config.fixed_threshold) if config.threshold_mode == "fixed" else L.ThresholdState()
    return TrainState(params, init_optimizer_state(params, parse_optimizer(config.optimizer)), th)


def train_step(
    state: TrainState, batch: L.Batch, config: TrainConfig, frozen: Sequence[str] = ()
) -> tuple[TrainState, dict]:
    cfg = config.loss_config()
    th_used = state.thresholds
    try:
        parts, grads, fw = L.loss_gradients(state.params, batch, th_used, cfg)
    except NonFinite as e:
        raise NonFinite(f"step {state.step}, batch ids {batch.record_ids}: {e}") from None
    if not math.isfinite(parts.total):
        raise NonFinite(f"step {state.step}, batch ids {batch.record_ids}: loss is {parts.total}")
    for name in frozen:
        grads[name] = np.zeros_like(grads[name])
    params, opt_state = optimizer_step(state.params, grads, state.opt_state, parse_optimizer(config.optimizer), config.lr)

    s_pos = np.diag(fw.sims)
    if config.threshold_mode == "adaptive":
        th_next = L.update_thresholds(th_used, s_pos, fw.hn, config.upper_bound)
    else:
        th_next = L.ThresholdState(th_used.th.copy(), th_used.step + 1)

    gaps, counts = L.type_gaps(s_pos, fw.hn)
    valid = fw.hn.valid
    hn_means = np.where(counts > 0, np.where(valid, fw.hn.s_hn, 0.0).sum(axis=0) / np.maximum(counts, 1), 0.0)
    record = {
        "step": state.step,
        "epoch": state.epoch,
        "batch_size": len(batch),
        "itc_hn": parts.itc_hn,
        "imc": parts.imc,
        "cmr": parts.cmr,
        "total": parts.total,
        "th": th_used.as_dict(),
        "hinge_rate": parts.hinge_rate,
        "mean_pos_sim": float(s_pos.mean()),
        "mean_hn_sim": {t.value: float(hn_means[k]) for k, t in enumerate(NEG_TYPES)},
        "mean_gap": {t.value: float(gaps[k]) for k, t in enumerate(NEG_TYPES)},
        "n_valid": {t.value: int(counts[k]) for k, t in enumerate(NEG_TYPES)},
        "tau": state.params.tau,
    }
    new_state = TrainState(params, opt_state, th_next, state.step + 1, state.epoch, state.batch_in_epoch + 1)
    return new_state, record


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict] = field(default_factory=list)
    vocab: enc.Vocabulary | None = None


def train(
    config: TrainConfig,
    records: Sequence[DatasetRecord],
    eval_hook: Callable[[TrainState], dict | None] | None = None,
    eval_every: int = 0,
    dims: ModelDims = ModelDims(),
    state: TrainState | None = None,
    out_dir: str | Path | None = None,
    init: enc.ModelParams | None = None,
    frozen: Sequence[str] = (),
) -> TrainResult:
    """Run ``epochs * ceil(N / batch_size)`` steps (or the remainder, when resuming).

    Records without hard negatives get them generated once up front. With
    ``out_dir``, writes ``metrics.jsonl`` and ``final.ckpt`` there.
    """
    if not records:
        raise BadRecord("empty dataset")
    records = list(records)
    if any(r.hard_negatives is None for r in records):
        records = attach_hard_negatives(records, config.seed)
    if state is not None:
        vocab = state.params.vocab
    elif init is not None:
        vocab = init.vocab
        state = initial_state(config, vocab, len(records[0].feature), dims, init)
    else:
        vocab = build_vocabulary(records)
        state = initial_state(config, vocab, len(records[0].feature), dims)
    n = len(records)
    per_epoch = math.ceil(n / config.batch_size)
    metrics: list[dict] = []
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a" if state.step else "w", encoding="utf-8")
    try:
        while state.epoch < config.epochs:
            epoch_records = records
            if config.regen_per_epoch and state.epoch > 0:
                epoch_records = attach_hard_negatives(records, config.seed, epoch=state.epoch)
            order = epoch_order(n, config.seed, state.epoch)
            while state.batch_in_epoch < per_epoch:
                b = state.batch_in_epoch
                batch = assemble_batch(epoch_records, order[b * config.batch_size : (b + 1) * config.batch_size], vocab)
                state, rec = train_step(state, batch, config, frozen)
                if eval_hook is not None and eval_every and state.step % eval_every == 0:
                    extra = eval_hook(state)
                    if extra:
                        rec["eval"] = extra
                metrics.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            state = TrainState(state.params, state.opt_state, state.thresholds, state.step, state.epoch + 1, 0)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", state, config)
    return TrainResult(state, metrics, vocab)


BASE_EPOCHS = 100
BASE_SEED_OFFSET = 1000


def pretrain_base(
    records: Sequence[DatasetRecord],
    seed: int = 0,
    epochs: int = BASE_EPOCHS,
    dims: ModelDims = ModelDims(),
    batch_size: int = 32,
    lr: float = 1e-3,
) -> enc.ModelParams:
    """Order-blind starting point for fine-tuning.

    Plain ITC with the positional gates pinned at zero, so the text side is a
    mean of token embeddings. The result fits image-caption pairs but cannot
    tell a caption from its role-swapped twin.
    """
    records = list(records)
    if not records:
        raise BadRecord("empty dataset")
    if any(r.hard_negatives is None for r in records):
        records = attach_hard_negatives(records, seed)
    vocab = build_vocabulary(records)
    config = TrainConfig(
        seed=seed + BASE_SEED_OFFSET, epochs=epochs, batch_size=batch_size, lr=lr,
        use_hn=False, use_imc=False, use_cmr=False,
    )
    p0 = enc.init_params(vocab, len(records[0].feature), dims.d_e, dims.d, dims.max_len, seed=config.seed)
    p0 = p0.replace(P=np.zeros_like(p0.P))
    return train(config, records, dims=dims, init=p0, frozen=("P",)).state.params


# ---------------------------------------------------------------------------
# threshold trace analysis


def recompute_thresholds(metrics: Sequence[dict], upper_bound: float) -> list[dict[str, float]]:
    """Expected ``th`` at every step, rebuilt from the logged gap statistics."""
    th = {t.value: 0.0 for t in NEG_TYPES}
    out = []
    for rec in metrics:
        out.append(dict(th))
        for t in NEG_TYPES:
            k = t.value
            if rec["n_valid"][k] > 0:
                th[k] = min(upper_bound, max(0.0, rec["mean_gap"][k]))
    return out


def epoch_means(metrics: Sequence[dict], key: str = "REL") -> dict[int, float]:
    by_epoch: dict[int, list[float]] = {}
    for rec in metrics:
        by_epoch.setdefault(rec["epoch"], []).append(rec["th"][key])
    return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}


# ---------------------------------------------------------------------------
# checkpoints


def _arrays_to_json(d: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()} for k, v in d.items()}


def _arrays_from_json(d: dict) -> dict:
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def checkpoint_dict(state: TrainState, config: TrainConfig | None = None) -> dict:
    opt = {"t": state.opt_state["t"]}
    for key in ("m", "v", "velocity"):
        if key in state.opt_state:
            opt[key] = _arrays_to_json(state.opt_state[key])
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": enc.params_to_dict(state.params),
        "optimizer": opt,
        "thresholds": {"th": [float(v) for v in state.thresholds.th], "step": state.thresholds.step},
        "step": state.step,
        "cursor": {"epoch": state.epoch, "batch_in_epoch": state.batch_in_epoch},
        "config": config.to_dict() if config is not None else None,
    }


def checkpoint_bytes(state: TrainState, config: TrainConfig | None = None) -> bytes:
    return (json.dumps(checkpoint_dict(state, config), sort_keys=True) + "\n").encode("utf-8")


def save_checkpoint(path: str | Path, state: TrainState, config: TrainConfig | None = None) -> str:
    """Atomically write the checkpoint; returns its SHA-256."""
    data = checkpoint_bytes(state, config)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig | None]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise BadRecord(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise BadRecord(f"{path}: unsupported checkpoint version {obj.get('version')}")
    params = enc.params_from_dict(obj["model"])
    opt = {"t": obj["optimizer"]["t"]}
    for key in ("m", "v", "velocity"):
        if key in obj["optimizer"]:
            arrs = _arrays_from_json(obj["optimizer"][key])
            arrs["log_tau"] = arrs["log_tau"].reshape(())
            opt[key] = arrs
    th = L.ThresholdState(np.asarray(obj["thresholds"]["th"], dtype=np.float64), obj["thresholds"]["step"])
    cur = obj["cursor"]
    state = TrainState(params, opt, th, obj["step"], cur["epoch"], cur["batch_in_epoch"])
    config = TrainConfig.from_dict(obj["config"]) if obj.get("config") else None
    return state, config


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
