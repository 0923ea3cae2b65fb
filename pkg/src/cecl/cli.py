"""``cecl``: synthesize data, generate hard negatives, train, evaluate, analyze.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure. Every command that writes files also writes a manifest recording
its full command line, effective config and the SHA-256 of inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import functools
import io as _stdio
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from . import ablation as A
from . import evalbench as EB
from . import trainer as T
from .errors import BadRecord, CeclError, DataError, NumericalError
from .hardneg import LexiconFiller, NEG_TYPES, augment
from .io import (
    MANIFEST_NAME,
    RunManifest,
    atomic_write_text,
    dump_json,
    iter_jsonl,
    load_records,
    merge_hard_negatives,
    write_jsonl,
)
from .synthworld import WorldSpec, make_dataset
from .textproc import Lexicon, LexiconTagger, default_lexicon, tokenize

log = logging.getLogger("cecl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_HELP = {
    "alpha": "weight of the intra-modal contrast loss",
    "beta": "weight of the cross-modal rank loss",
    "upper_bound": "cap u on the adaptive thresholds",
    "threshold_mode": "adaptive | fixed",
    "fixed_threshold": "threshold used in fixed mode: 2, 5 or 10",
    "hn_pool": "own: each image sees its own caption's hard negatives; batch: all of them",
    "include_rel_term": "subtract the caption/relation-negative similarity in the rank loss",
    "epochs": "passes over the training set",
    "batch_size": "records per step",
    "lr": "learning rate",
    "optimizer": "adam(b1, b2, eps) | sgd_momentum(mu)",
    "seed": "seed for init, shuffling and hard-negative sampling",
    "use_hn": "add hard negatives to the contrastive denominator",
    "use_imc": "enable the intra-modal contrast loss",
    "use_cmr": "enable the cross-modal rank loss",
    "regen_per_epoch": "redraw hard negatives at the start of every epoch",
}
assert set(CONFIG_HELP) == set(T.TrainConfig.keys())


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config


def read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{path}: invalid TOML ({e})") from None
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None


def load_config_file(path: str | Path) -> dict:
    """Flat TOML table whose keys are exactly the training config keys."""
    data = read_toml(path)
    unknown = sorted(set(data) - set(T.TrainConfig.keys()))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}; accepted: {', '.join(T.TrainConfig.keys())}")
    return data


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group(
        "config keys", "Each flag overrides the key of the same name in --config (underscores in the file)."
    )
    for f in fields(T.TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        text = f"{CONFIG_HELP[f.name]} [key: {f.name}; default: {f.default!r}]"
        if isinstance(f.default, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=text)
        else:
            g.add_argument(flag, dest=f.name, type=type(f.default), default=None, metavar=f.name.upper(), help=text)


def effective_config(args, extra: dict | None = None) -> T.TrainConfig:
    """Built-in defaults < config file (< ``extra``) < command-line flags."""
    merged = T.TrainConfig().to_dict()
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    merged.update(extra or {})
    for key in T.TrainConfig.keys():
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    try:
        return T.TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from None


def _dims(args) -> T.ModelDims:
    return T.ModelDims(args.d_e, args.d, args.max_len)


def _add_dims_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model size")
    g.add_argument("--d-e", type=int, default=32, help="token embedding width (default: 32)")
    g.add_argument("--d", type=int, default=32, help="joint embedding width (default: 32)")
    g.add_argument("--max-len", type=int, default=16, help="positional gate rows (default: 16)")


def _manifest(args, command: str) -> RunManifest:
    return RunManifest(command=command, argv=list(args._argv), version=__version__)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    m = _manifest(args, "synth")
    m.seed = args.seed
    m.options = {"n": args.n, "sigma": args.sigma, "eval_fraction": args.eval_fraction}
    ds = make_dataset(WorldSpec(), n=args.n, sigma=args.sigma, seed=args.seed, eval_fraction=args.eval_fraction)
    m.add_output(out / "train.jsonl", write_jsonl(out / "train.jsonl", (r.to_json() for r in ds.train)))
    m.add_output(out / "eval.jsonl", write_jsonl(out / "eval.jsonl", (b.to_json() for b in ds.bench)))
    m.add_output(out / "eval_records.jsonl", write_jsonl(out / "eval_records.jsonl", (r.to_json() for r in ds.eval)))
    m.write(out / MANIFEST_NAME)
    print(f"wrote {len(ds.train)} train records and {len(ds.bench)} bench items to {out}")
    return EXIT_OK


def cmd_gen_hardneg(args) -> int:
    out = Path(args.out)
    m = _manifest(args, "gen-hardneg")
    m.seed = args.seed
    m.options = {"epoch": args.epoch, "filler": args.filler, "lexicon": args.lexicon}
    rows = []
    for obj in iter_jsonl(args.data):
        if "id" not in obj or not isinstance(obj.get("caption"), str):
            raise BadRecord(f"{args.data}: every row needs 'id' and 'caption'")
        rows.append({"id": obj["id"], "caption": obj["caption"]})
    lexicon = Lexicon.load(args.lexicon) if args.lexicon else default_lexicon()
    restrict = {t.surface for r in rows for t in tokenize(r["caption"])} if args.filler == "corpus" else None
    aug = augment(rows, args.seed, LexiconTagger(lexicon), LexiconFiller(lexicon, restrict), args.epoch)
    m.add_input(args.data)
    if args.lexicon:
        m.add_input(args.lexicon)
    m.add_output(out, write_jsonl(out, aug))
    m.write(out.with_name(out.name + ".manifest.json"))
    print(f"wrote hard negatives for {len(aug)} captions to {out}")
    return EXIT_OK


def _bench_hook(items, every):
    if not items or not every:
        return None

    def hook(state):
        rep = EB.pairwise_accuracy(state.params, items)
        return {"accuracy": rep.accuracy, **{k: v for k, v in rep.per_type.items() if rep.counts[k]}}

    return hook


def cmd_train(args) -> int:
    out = Path(args.out)
    m = _manifest(args, "train")
    resume_cfg = None
    state = None
    if args.resume:
        state, resume_cfg = T.load_checkpoint(args.resume)
    config = effective_config(args, extra=resume_cfg.to_dict() if resume_cfg and not args.config else None)
    dims = _dims(args)
    m.config, m.seed = config.to_dict(), config.seed
    m.options = {"pretrain_epochs": args.pretrain_epochs, "dims": vars(dims), "eval_every": args.eval_every}

    records = load_records(args.data)
    m.add_input(args.data)
    if not records:
        raise BadRecord(f"{args.data}: no records")
    if args.hardneg:
        records = merge_hard_negatives(records, iter_jsonl(args.hardneg))
        m.add_input(args.hardneg)
    else:
        records = T.attach_hard_negatives(records, config.seed)

    init = None
    if state is not None:
        m.add_input(args.resume)
    elif args.init:
        init = T.load_checkpoint(args.init)[0].params
        m.add_input(args.init)
    elif args.pretrain_epochs > 0:
        log.info("pretraining order-blind base model for %d epochs", args.pretrain_epochs)
        init = T.pretrain_base(records, config.seed, args.pretrain_epochs, dims)
        base_state = T.initial_state(config, init.vocab, len(records[0].feature), dims, init)
        m.add_output(out / "base.ckpt", T.save_checkpoint(_mkdir(out) / "base.ckpt", base_state))

    items = EB.load_items(args.eval_items) if args.eval_items else None
    if args.eval_items:
        m.add_input(args.eval_items)
    result = T.train(
        config, records, eval_hook=_bench_hook(items, args.eval_every), eval_every=args.eval_every,
        dims=dims, state=state, out_dir=out, init=init,
    )
    m.add_output(out / "metrics.jsonl")
    m.add_output(out / "final.ckpt")
    m.write(out / MANIFEST_NAME)
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"trained {result.state.step} steps; final total loss {last['total']:.4f}; th {last['th']}")
    return EXIT_OK


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_eval(args) -> int:
    state, _ = T.load_checkpoint(args.ckpt)
    items = EB.load_items(args.items)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else []
    report = EB.evaluate(state.params, items, ks, args.analysis, args.n_resamples, args.confidence, args.seed)
    text = json.dumps(report.to_json(), sort_keys=True, indent=2)
    print(text)
    print(report.to_table(), file=sys.stderr)
    if args.out:
        out = Path(args.out)
        m = _manifest(args, "eval")
        m.seed = args.seed
        m.options = {"ks": ks, "analysis": args.analysis, "n_resamples": args.n_resamples, "confidence": args.confidence}
        m.add_input(args.ckpt)
        m.add_input(args.items)
        m.add_output(out / "report.json", atomic_write_text(out / "report.json", text + "\n"))
        m.add_output(out / "report.txt", atomic_write_text(out / "report.txt", report.to_table() + "\n"))
        buf = _stdio.StringIO()
        EB.write_item_scores_csv(buf, state.params, items)
        m.add_output(out / "scores.csv", atomic_write_text(out / "scores.csv", buf.getvalue()))
        m.write(out / MANIFEST_NAME)
    return EXIT_OK


def _csv_text(rows) -> str:
    buf = _stdio.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def metric_series(metrics: Sequence[dict]) -> dict[str, list[tuple[int, float]]]:
    """(step, value) series for every scalar and per-type metric."""
    series: dict[str, list[tuple[int, float]]] = {}
    for rec in metrics:
        step = rec["step"]
        for key in ("total", "itc_hn", "imc", "cmr", "tau", "mean_pos_sim"):
            series.setdefault(key, []).append((step, rec[key]))
        for key in ("th", "mean_gap", "mean_hn_sim", "hinge_rate"):
            for t in NEG_TYPES:
                if t.value in rec.get(key, {}):
                    series.setdefault(f"{key}_{t.value}", []).append((step, rec[key][t.value]))
        for key, v in (rec.get("eval") or {}).items():
            series.setdefault(f"eval_{key}", []).append((step, v))
    return series


def cmd_analyze(args) -> int:
    if not args.metrics and not args.ckpt:
        raise UsageError("analyze needs --metrics and/or --ckpt")
    out = Path(args.out)
    m = _manifest(args, "analyze")
    m.seed = args.seed
    m.options = {"n_resamples": args.n_resamples, "confidence": args.confidence, "upper_bound": args.upper_bound}
    summary: dict = {}
    if args.metrics:
        metrics = list(iter_jsonl(args.metrics))
        m.add_input(args.metrics)
        for name, pts in metric_series(metrics).items():
            path = out / "series" / f"{name}.csv"
            m.add_output(path, atomic_write_text(path, _csv_text([("step", "value"), *((s, repr(v)) for s, v in pts)])))
        expected = T.recompute_thresholds(metrics, args.upper_bound)
        dev = max((abs(e[k] - rec["th"][k]) for e, rec in zip(expected, metrics) for k in e), default=0.0)
        means = T.epoch_means(metrics, "REL")
        summary["thresholds"] = {"max_trace_deviation": dev, "epoch_mean_th_REL": {str(k): v for k, v in means.items()}}
        path = out / "threshold_epochs.csv"
        rows = [("epoch", *(t.value for t in NEG_TYPES))]
        per_type = {t.value: T.epoch_means(metrics, t.value) for t in NEG_TYPES}
        rows += [(e, *(repr(per_type[t.value][e]) for t in NEG_TYPES)) for e in means]
        m.add_output(path, atomic_write_text(path, _csv_text(rows)))
    if args.ckpt:
        if not args.items:
            raise UsageError("--ckpt needs --items")
        items = EB.load_items(args.items)
        m.add_input(args.items)
        summary["representations"] = {}
        for spec in args.ckpt:
            name, _, path = spec.rpartition("=")
            name = name or Path(path).parent.name or Path(path).stem
            params = T.load_checkpoint(path)[0].params
            m.add_input(path)
            stats = EB.modality_gap_stats(params, items)
            block = dict(stats.summary)
            block["intra_ci"] = EB.bootstrap_ci(stats.intra, args.n_resamples, args.confidence, args.seed)
            block["gap_ci"] = EB.bootstrap_ci(stats.gap, args.n_resamples, args.confidence, args.seed)
            summary["representations"][name] = block
            rows = [("type", "intra", "gap"), *((t, repr(a), repr(g)) for t, a, g in zip(stats.types, stats.intra, stats.gap))]
            p = out / f"pairs_{name}.csv"
            m.add_output(p, atomic_write_text(p, _csv_text(rows)))
    m.add_output(out / "analysis.json", atomic_write_text(out / "analysis.json", dump_json(summary)))
    m.write(out / MANIFEST_NAME)
    print(dump_json(summary), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out)
    m = _manifest(args, "ablate")
    grid_file = read_toml(args.grid) if args.grid else {}
    unknown = set(grid_file) - {"seeds", "base", "grid", "variants"}
    if unknown:
        raise UsageError(f"{args.grid}: unknown top-level keys {sorted(unknown)}")
    try:
        points = A.expand_grid(grid_file.get("grid"), grid_file.get("variants"))
    except ValueError as e:
        raise UsageError(f"{args.grid}: {e}") from None
    base_cfg = effective_config(args, extra=grid_file.get("base"))
    base = base_cfg.to_dict()
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = [int(s) for s in grid_file.get("seeds", [base_cfg.seed])]
    m.config, m.seed = base, seeds[0] if seeds else None
    m.options = {"seeds": seeds, "points": [p.key for p in points], "pretrain_epochs": args.pretrain_epochs}
    if args.grid:
        m.add_input(args.grid)

    if args.data:
        if not args.items:
            raise UsageError("--data needs --items")
        records = load_records(args.data)
        items = EB.load_items(args.items)
        m.add_input(args.data)
        m.add_input(args.items)
        data_for_seed = functools.partial(_fixed_seed_data, records, items, args.pretrain_epochs)
        m.options["data"] = "files"
    else:
        data_for_seed = functools.partial(A.synthetic_seed_data, n=args.n, sigma=args.sigma, pretrain_epochs=args.pretrain_epochs)
        m.options.update({"data": "synthetic", "n": args.n, "sigma": args.sigma})

    report = A.run_ablation(points, seeds, data_for_seed, base, jobs=args.jobs)
    m.add_output(out / "ablation.json", atomic_write_text(out / "ablation.json", dump_json(report.to_json())))
    m.add_output(out / "ablation.csv", atomic_write_text(out / "ablation.csv", _csv_text(report.to_csv_rows())))
    table = report.to_table()
    m.add_output(out / "ablation.txt", atomic_write_text(out / "ablation.txt", table + "\n"))
    m.write(out / MANIFEST_NAME)
    print(table)
    return EXIT_OK


def _fixed_seed_data(records, items, pretrain_epochs, seed) -> A.SeedData:
    recs = records if all(r.hard_negatives for r in records) else T.attach_hard_negatives(records, seed)
    init = T.pretrain_base(recs, seed, pretrain_epochs) if pretrain_epochs > 0 else None
    return A.SeedData(recs, items, init)


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cecl", description="Compositional contrastive fine-tuning toolkit.")
    p.add_argument("--version", action="version", version=f"cecl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate the synthetic world dataset")
    s.add_argument("--n", type=int, default=2000, help="number of distinct scenes (default: 2000)")
    s.add_argument("--sigma", type=float, default=0.05, help="feature noise half-width (default: 0.05)")
    s.add_argument("--eval-fraction", type=float, default=0.2, help="share of scenes held out (default: 0.2)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gen-hardneg", help="generate REL/ATT/ACT/OBJ hard negatives for a caption file")
    g.add_argument("--data", required=True, help="JSONL with 'id' and 'caption' per row")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--epoch", type=int, default=None, help="mix an epoch index into the per-record streams")
    g.add_argument("--lexicon", default=None, help="word<TAB>CLASS file (default: bundled lexicon)")
    g.add_argument(
        "--filler", choices=("corpus", "lexicon"), default="corpus",
        help="draw replacement words from the corpus vocabulary or the whole lexicon (default: corpus)",
    )
    g.set_defaults(func=cmd_gen_hardneg)

    t = sub.add_parser("train", help="fine-tune the dual encoder")
    t.add_argument("--config", default=None, help="flat TOML file of config keys")
    t.add_argument("--data", required=True, help="training records JSONL")
    t.add_argument("--hardneg", default=None, help="hard-negative JSONL from gen-hardneg (default: generate with --seed)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--init", default=None, help="start from this checkpoint's model")
    t.add_argument("--resume", default=None, help="continue an interrupted run from its checkpoint")
    t.add_argument(
        "--pretrain-epochs", type=int, default=T.BASE_EPOCHS,
        help=f"epochs of order-blind base pretraining when neither --init nor --resume is given; 0 starts from random init (default: {T.BASE_EPOCHS})",
    )
    t.add_argument("--eval-items", default=None, help="bench JSONL scored during training")
    t.add_argument("--eval-every", type=int, default=0, help="steps between evaluations (default: off)")
    _add_dims_flags(t)
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="pairwise accuracy and recall on bench items")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--items", required=True, help="bench JSONL")
    e.add_argument("--ks", default="1,5,10", help="comma-separated k for R@k (default: 1,5,10)")
    e.add_argument("--analysis", action="store_true", help="add intra-modal similarity and gap statistics")
    e.add_argument("--n-resamples", type=int, default=50_000)
    e.add_argument("--confidence", type=float, default=0.99)
    e.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    e.add_argument("--out", default=None, help="also write report.json, report.txt and scores.csv here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="threshold traces as CSV series and representation statistics")
    a.add_argument("--metrics", default=None, help="metrics.jsonl of a run")
    a.add_argument("--ckpt", action="append", default=[], help="NAME=PATH checkpoint to analyze (repeatable)")
    a.add_argument("--items", default=None, help="bench JSONL for representation statistics")
    a.add_argument("--upper-bound", type=float, default=10.0, help="u used to recompute the threshold trace")
    a.add_argument("--n-resamples", type=int, default=50_000)
    a.add_argument("--confidence", type=float, default=0.99)
    a.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("ablate", help="train and evaluate every point of a config grid")
    b.add_argument("--grid", default=None, help="TOML with [grid], optional [base], [variants.*] and seeds")
    b.add_argument("--config", default=None, help="flat TOML of base config keys")
    b.add_argument("--seeds", default=None, help="comma-separated seeds (default: grid file 'seeds' or --seed)")
    b.add_argument("--n", type=int, default=2000, help="synthetic scenes per seed when --data is not given")
    b.add_argument("--sigma", type=float, default=0.05)
    b.add_argument("--data", default=None, help="fixed training records instead of a synthetic world per seed")
    b.add_argument("--items", default=None, help="bench JSONL used with --data")
    b.add_argument("--pretrain-epochs", type=int, default=T.BASE_EPOCHS, help="base pretraining per seed; 0 = random init")
    b.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    b.add_argument("--out", required=True)
    _add_config_flags(b)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CeclError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
