"""Benchmark-style evaluation and representation analysis."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import encoder as enc
from .errors import BadRecord, EmptyBenchmark, EmptySamples, KTooLarge
from .hardneg import NEG_TYPES, NegType


@dataclass
class BenchItem:
    id: str
    feature: list[float]
    positive: str
    negatives: list[tuple[str, NegType]]

    def __post_init__(self):
        self.negatives = [(c, NegType(t)) for c, t in self.negatives]
        if not self.negatives:
            raise ValueError(f"bench item {self.id} has no negatives")
        if any(c == self.positive for c, _ in self.negatives):
            raise ValueError(f"bench item {self.id} has a negative equal to its positive")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "feature": list(self.feature),
            "positive": self.positive,
            "negatives": [{"caption": c, "type": t.value} for c, t in self.negatives],
        }

    @classmethod
    def from_json(cls, d: dict) -> "BenchItem":
        return cls(str(d["id"]), list(d["feature"]), d["positive"], [(n["caption"], n["type"]) for n in d["negatives"]])


@dataclass
class EvalReport:
    accuracy: float
    per_type: dict[str, float]
    counts: dict[str, int]
    correct: dict[str, int]
    total_pairs: int
    recall: dict[str, float] | None = None
    analysis: dict | None = None

    def to_json(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "per_type": self.per_type,
            "counts": self.counts,
            "correct": self.correct,
            "total_pairs": self.total_pairs,
        }
        if self.recall is not None:
            d["recall"] = self.recall
        if self.analysis is not None:
            d["analysis"] = self.analysis
        return d

    def to_table(self) -> str:
        rows = [("split", "pairs", "correct", "accuracy")]
        for t in NEG_TYPES:
            if self.counts.get(t.value):
                rows.append((t.value, str(self.counts[t.value]), str(self.correct[t.value]), f"{self.per_type[t.value]:.4f}"))
        rows.append(("ALL", str(self.total_pairs), str(sum(self.correct.values())), f"{self.accuracy:.4f}"))
        if self.recall:
            for name, v in self.recall.items():
                rows.append((name, "", "", f"{v:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows)


# A "model" is either trained parameters or any callable that scores
# (image features, captions) -> similarity matrix.
Scorer = Callable[[np.ndarray, Sequence[str]], np.ndarray]
Model = Union[enc.ModelParams, Scorer]


def _scores(model: Model, feats: np.ndarray, captions: Sequence[str]) -> np.ndarray:
    if isinstance(model, enc.ModelParams):
        ids = [model.vocab.encode(c) for c in captions]
        return enc.similarity_matrix(model, feats, ids)
    return np.asarray(model(feats, captions), dtype=np.float64)


def item_scores(model: Model, items: Sequence[BenchItem]) -> list[tuple[float, list[float]]]:
    """(S(I, T_pos), [S(I, T_neg) ...]) per item."""
    feats = np.asarray([it.feature for it in items], dtype=np.float64)
    captions, spans = [], []
    for it in items:
        start = len(captions)
        captions.append(it.positive)
        captions.extend(c for c, _ in it.negatives)
        spans.append((start, len(captions)))
    uniq = sorted(set(captions))
    col = {c: j for j, c in enumerate(uniq)}
    sims = _scores(model, feats, uniq)
    out = []
    for i, (a, b) in enumerate(spans):
        row = [float(sims[i, col[captions[j]]]) for j in range(a, b)]
        out.append((row[0], row[1:]))
    return out


def pairwise_accuracy(model: Model, items: Sequence[BenchItem]) -> EvalReport:
    """Pair (pos, neg) is correct iff S(I, T_pos) > S(I, T_neg); ties are wrong."""
    if not items:
        raise EmptyBenchmark("no bench items")
    counts = {t.value: 0 for t in NEG_TYPES}
    correct = {t.value: 0 for t in NEG_TYPES}
    for it, (pos, negs) in zip(items, item_scores(model, items)):
        for (_, t), s in zip(it.negatives, negs):
            counts[t.value] += 1
            correct[t.value] += int(pos > s)
    total = sum(counts.values())
    per_type = {k: (correct[k] / counts[k] if counts[k] else float("nan")) for k in counts}
    return EvalReport(sum(correct.values()) / total, per_type, counts, correct, total)


def pair_outcomes(model: Model, items: Sequence[BenchItem]) -> tuple[np.ndarray, list[str]]:
    """0/1 outcome per (pos, neg) pair with its type, in item order."""
    hits, types = [], []
    for it, (pos, negs) in zip(items, item_scores(model, items)):
        for (_, t), s in zip(it.negatives, negs):
            hits.append(float(pos > s))
            types.append(t.value)
    return np.asarray(hits), types


def recall_from_sims(sims: np.ndarray, k: int, direction: str = "t2i") -> float:
    """R@k for index-aligned pairs; equal scores rank the lower index first."""
    sims = np.asarray(sims, dtype=np.float64)
    if direction == "t2i":
        sims = sims.T  # rows: text queries, columns: images
    elif direction != "i2t":
        raise ValueError(f"direction must be 't2i' or 'i2t', got {direction!r}")
    n_q, n_c = sims.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_c:
        raise KTooLarge(f"k={k} exceeds {n_c} candidates")
    true = sims[np.arange(n_q), np.arange(n_q)][:, None]
    idx = np.arange(n_c)[None, :]
    rank = np.sum(sims > true, axis=1) + np.sum((sims == true) & (idx < np.arange(n_q)[:, None]), axis=1)
    return float(np.mean(rank < k))


def recall_at_k(model: Model, images, texts: Sequence[str], k: int, direction: str = "t2i") -> float:
    feats = np.asarray(images, dtype=np.float64)
    return recall_from_sims(_scores(model, feats, texts), k, direction)


@dataclass
class GapStats:
    """Per-pair temperature-free statistics.

    ``intra[p] = cos(T_pos, T_neg)``; ``gap[p] = cos(I, T_pos) - cos(I, T_neg)``.
    """

    intra: np.ndarray
    gap: np.ndarray
    types: list[str]
    summary: dict = field(default_factory=dict)


def modality_gap_stats(model: enc.ModelParams, items: Sequence[BenchItem]) -> GapStats:
    if not items:
        raise EmptyBenchmark("no bench items")
    feats = np.asarray([it.feature for it in items], dtype=np.float64)
    img, _ = enc.image_forward(model, feats)
    captions = sorted({it.positive for it in items} | {c for it in items for c, _ in it.negatives})
    col = {c: j for j, c in enumerate(captions)}
    ids, mask = enc.pad_ids([model.vocab.encode(c) for c in captions], model.E.shape[0])
    txt, _ = enc.text_forward(model, ids, mask)
    intra, gap, types = [], [], []
    for i, it in enumerate(items):
        tp = txt[col[it.positive]]
        for c, t in it.negatives:
            tn = txt[col[c]]
            intra.append(float(tp @ tn))
            gap.append(float(img[i] @ tp - img[i] @ tn))
            types.append(t.value)
    intra_a, gap_a = np.asarray(intra), np.asarray(gap)
    summary = {"ALL": {"intra": float(intra_a.mean()), "gap": float(gap_a.mean()), "pairs": len(types)}}
    ta = np.asarray(types)
    for t in NEG_TYPES:
        sel = ta == t.value
        if sel.any():
            summary[t.value] = {"intra": float(intra_a[sel].mean()), "gap": float(gap_a[sel].mean()), "pairs": int(sel.sum())}
    return GapStats(intra_a, gap_a, types, summary)


def bootstrap_ci(
    samples: Sequence[float], n_resamples: int = 50_000, confidence: float = 0.99, seed: int = 0
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptySamples("bootstrap_ci needs at least one sample")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    lo_x, hi_x = float(x.min()), float(x.max())
    if lo_x == hi_x:
        return lo_x, hi_x
    rng = np.random.default_rng(seed)
    n = x.size
    means = np.empty(n_resamples)
    chunk = max(1, min(n_resamples, 4_000_000 // n))
    for start in range(0, n_resamples, chunk):
        stop = min(n_resamples, start + chunk)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = x[idx].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(np.clip(low, lo_x, hi_x)), float(np.clip(high, lo_x, hi_x))


def evaluate(
    model: enc.ModelParams,
    items: Sequence[BenchItem],
    ks: Sequence[int] = (1, 5, 10),
    analysis: bool = False,
    n_resamples: int = 50_000,
    confidence: float = 0.99,
    seed: int = 0,
) -> EvalReport:
    """Pairwise accuracy, R@k over the items' positives, optional gap analysis."""
    report = pairwise_accuracy(model, items)
    feats = [it.feature for it in items]
    texts = [it.positive for it in items]
    sims = _scores(model, np.asarray(feats, dtype=np.float64), texts)
    report.recall = {}
    for k in ks:
        if k <= len(items):
            report.recall[f"T2I R@{k}"] = recall_from_sims(sims, k, "t2i")
            report.recall[f"I2T R@{k}"] = recall_from_sims(sims, k, "i2t")
    if analysis:
        stats = modality_gap_stats(model, items)
        block = dict(stats.summary)
        block["intra_ci"] = bootstrap_ci(stats.intra, n_resamples, confidence, seed)
        block["gap_ci"] = bootstrap_ci(stats.gap, n_resamples, confidence, seed)
        report.analysis = block
    return report


def write_item_scores_csv(target, model: Model, items: Sequence[BenchItem]) -> None:
    """One row per (item, negative); ``target`` is a path or a text stream."""
    if hasattr(target, "write"):
        _write_scores(target, model, items)
        return
    with open(target, "w", newline="", encoding="utf-8") as fh:
        _write_scores(fh, model, items)


def _write_scores(fh, model: Model, items: Sequence[BenchItem]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["id", "type", "s_pos", "s_neg", "correct"])
    for it, (pos, negs) in zip(items, item_scores(model, items)):
        for (_, t), s in zip(it.negatives, negs):
            w.writerow([it.id, t.value, repr(pos), repr(s), int(pos > s)])


def load_items(path) -> list[BenchItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                items.append(BenchItem.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise BadRecord(f"{path}:{lineno}: bad bench item ({e})") from None
    return items
