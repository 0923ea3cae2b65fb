"""Grid ablations: one fine-tuning + evaluation run per (grid point, seed).

A grid file is TOML::

    seeds = [0, 1, 2, 3, 4]      # optional

    [base]                       # optional config overrides shared by all points
    epochs = 5

    [grid]                       # cartesian product over the listed values
    use_imc = [true, false]
    use_cmr = [true, false]
    threshold_mode = ["adaptive", "fixed(2)", "fixed(5)", "fixed(10)"]
    neg_types = [["REL", "ATT", "ACT", "OBJ"], ["REL"]]

    [variants.itc_only]          # extra named points, appended after the grid
    use_hn = false
    use_imc = false
    use_cmr = false

An empty grid (no axes and no variants) has no points.
"""

from __future__ import annotations

import itertools
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import encoder as enc
from . import evalbench as EB
from . import trainer as T
from .errors import CeclError
from .evalbench import BenchItem
from .hardneg import NEG_TYPES, NegType
from .synthworld import DatasetRecord, WorldSpec, make_dataset

log = logging.getLogger(__name__)

_FIXED_RE = re.compile(r"^fixed\(\s*([0-9.eE+-]+)\s*\)$")
SPECIAL_KEYS = ("neg_types",)


@dataclass(frozen=True)
class GridPoint:
    key: str
    overrides: dict
    neg_types: tuple[str, ...] | None = None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (list, tuple)):
        return "+".join(str(x) for x in v)
    return str(v)


def _axis_overrides(name: str, value) -> dict:
    if name == "threshold_mode" and isinstance(value, str):
        m = _FIXED_RE.match(value.strip())
        if m:
            return {"threshold_mode": "fixed", "fixed_threshold": float(m.group(1))}
    return {name: value}


def _neg_types(value) -> tuple[str, ...]:
    items = value.split(",") if isinstance(value, str) else list(value)
    out = tuple(NegType(str(v).strip().upper()).value for v in items)
    if not out:
        raise ValueError("neg_types entry must name at least one type")
    return out


def _make_point(key: str, assignment: dict) -> GridPoint:
    overrides, neg = {}, None
    for name, value in assignment.items():
        if name == "neg_types":
            neg = _neg_types(value)
        else:
            overrides.update(_axis_overrides(name, value))
    unknown = set(overrides) - set(T.TrainConfig.keys())
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    return GridPoint(key, overrides, neg)


def expand_grid(grid: dict | None, variants: dict | None = None) -> list[GridPoint]:
    """Grid points in file order: the cartesian product, then named variants."""
    points = []
    grid = grid or {}
    for name, values in grid.items():
        if not isinstance(values, list):
            raise ValueError(f"grid axis {name!r} must be a list")
    if grid:
        names = list(grid)
        for combo in itertools.product(*(grid[n] for n in names)):
            assignment = dict(zip(names, combo))
            key = ",".join(f"{n}={_fmt(v)}" for n, v in assignment.items())
            points.append(_make_point(key, assignment))
    for name, table in (variants or {}).items():
        if not isinstance(table, dict):
            raise ValueError(f"variant {name!r} must be a table")
        points.append(_make_point(name, table))
    keys = [p.key for p in points]
    if len(set(keys)) != len(keys):
        raise ValueError("grid points must have distinct keys")
    return points


@dataclass
class SeedData:
    records: list[DatasetRecord]
    bench: list[BenchItem]
    init: enc.ModelParams | None = None


def synthetic_seed_data(seed: int, n: int = 2000, sigma: float = 0.05, pretrain_epochs: int = T.BASE_EPOCHS) -> SeedData:
    """Default world for one seed, hard negatives attached, plus its base model."""
    ds = make_dataset(WorldSpec(), n=n, sigma=sigma, seed=seed)
    records = T.attach_hard_negatives(ds.train, seed)
    init = T.pretrain_base(records, seed, pretrain_epochs) if pretrain_epochs > 0 else None
    return SeedData(records, ds.bench, init)


def run_point(point: GridPoint, base: dict, seed: int, data: SeedData) -> dict:
    """Train and evaluate one point; failures are returned, not raised."""
    try:
        config = T.TrainConfig.from_dict({**base, **point.overrides, "seed": seed})
        records = data.records
        if point.neg_types is not None:
            records = T.restrict_types(records, point.neg_types)
        result = T.train(config, records, init=data.init)
        report = EB.pairwise_accuracy(result.state.params, data.bench)
    except (CeclError, ValueError, FloatingPointError) as e:
        log.warning("point %s seed %d failed: %s", point.key, seed, e)
        return {"seed": seed, "status": "failed", "error": f"{type(e).__name__}: {e}"}
    return {
        "seed": seed,
        "status": "ok",
        "accuracy": report.accuracy,
        "per_type": report.per_type,
        "final_th": result.state.thresholds.as_dict(),
    }


def _run_task(args):
    idx, point, base, seed, data = args
    return idx, seed, run_point(point, base, seed, data)


@dataclass
class AblationReport:
    seeds: list[int]
    base: dict
    rows: list[dict] = field(default_factory=list)

    def row(self, key: str) -> dict:
        for r in self.rows:
            if r["key"] == key:
                return r
        raise KeyError(key)

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "base": self.base, "rows": self.rows}

    def to_table(self) -> str:
        head = ("config", "ok", "accuracy", *(t.value for t in NEG_TYPES))
        lines = [head]
        for r in self.rows:
            acc = "" if r["mean_accuracy"] is None else f"{r['mean_accuracy']:.4f}"
            per = [
                "" if r["mean_per_type"].get(t.value) is None else f"{r['mean_per_type'][t.value]:.4f}" for t in NEG_TYPES
            ]
            lines.append((r["key"], f"{r['n_ok']}/{len(r['runs'])}", acc, *per))
        widths = [max(len(l[i]) for l in lines) for i in range(len(head))]
        return "\n".join(
            "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(l, widths))) for l in lines
        )

    def to_csv_rows(self) -> list[list]:
        out = [["config", "seed", "status", "accuracy", *(t.value for t in NEG_TYPES)]]
        for r in self.rows:
            for run in r["runs"]:
                if run["status"] == "ok":
                    out.append([r["key"], run["seed"], "ok", repr(run["accuracy"]), *(repr(run["per_type"][t.value]) for t in NEG_TYPES)])
                else:
                    out.append([r["key"], run["seed"], "failed", "", *([""] * len(NEG_TYPES))])
        return out


def _mean_or_none(values: list[float]) -> float | None:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else None


def _aggregate(point: GridPoint, runs: list[dict]) -> dict:
    ok = [r for r in runs if r["status"] == "ok"]
    return {
        "key": point.key,
        "overrides": point.overrides,
        "neg_types": list(point.neg_types) if point.neg_types is not None else None,
        "runs": runs,
        "n_ok": len(ok),
        "mean_accuracy": _mean_or_none([r["accuracy"] for r in ok]),
        "mean_per_type": {t.value: _mean_or_none([r["per_type"][t.value] for r in ok]) for t in NEG_TYPES},
    }


def run_ablation(
    points: Sequence[GridPoint],
    seeds: Sequence[int],
    data_for_seed: Callable[[int], SeedData],
    base: dict | None = None,
    jobs: int = 1,
) -> AblationReport:
    """Every point on every seed; rows follow ``points`` order, runs follow ``seeds``."""
    base = dict(base or {})
    seeds = [int(s) for s in seeds]
    report = AblationReport(seeds, base)
    if not points:
        return report
    results: dict[tuple[int, int], dict] = {}
    if jobs <= 1:
        for seed in seeds:
            data = data_for_seed(seed)
            for idx, point in enumerate(points):
                results[idx, seed] = run_point(point, base, seed, data)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            datas = dict(zip(seeds, pool.map(data_for_seed, seeds)))
            tasks = [(idx, p, base, s, datas[s]) for s in seeds for idx, p in enumerate(points)]
            for idx, seed, res in pool.map(_run_task, tasks):
                results[idx, seed] = res
    for idx, point in enumerate(points):
        report.rows.append(_aggregate(point, [results[idx, s] for s in seeds]))
    return report
