"""Command-line entry point: gen, mine, train, eval, baseline, report.

Heavy modules are imported inside the command handlers so that ``--threads``
can cap the numeric libraries' thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
SPLITS_FILE = "splits.json"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("namelink")


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        rec = {"level": record.levelname.lower(), "logger": record.name,
               "message": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, sort_keys=True, default=str)


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_namelink", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    handler._namelink = True
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def _event(message: str, **fields) -> None:
    log.info(message, extra={"fields": fields})


def _artifact_version() -> str:
    """Package version plus a short digest of the installed sources."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+g{h.hexdigest()[:7]}"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def load_structured(path) -> dict:
    """Read a YAML or JSON mapping."""
    import yaml

    from .datamodel import ConfigurationError

    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    return data


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs,
                   started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": _artifact_version(),
        "started_at": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_time_s": round(time.time() - started, 3),
    }
    path = out_dir / f"run-{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _dump_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args, out_dir: Path) -> tuple[dict, list, list]:
    from .datamodel import FilterPolicy, filter_examples, make_splits
    from .synthgen import (ORACLE_FILE, REFERENCES_FILE, WorldConfig, generate_corpus,
                           generate_world, world_config_dict)

    data = load_structured(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = WorldConfig.from_dict(data)
    world = generate_world(cfg)
    examples, _ = generate_corpus(world, args.count, out_dir)
    clean = filter_examples(examples, FilterPolicy())
    splits = make_splits(clean, args.eval_fraction, cfg.seed)
    splits.save(out_dir / SPLITS_FILE)
    _event("generated", examples=len(examples), kept=len(clean), train=len(splits.train_ids),
           val=len(splits.val_ids), test=len(splits.test_ids))
    outputs = [out_dir / f for f in ("manifest.json", "examples.jsonl", "features.bin",
                                     REFERENCES_FILE, ORACLE_FILE, SPLITS_FILE)]
    config = {"world": world_config_dict(cfg), "count": args.count,
              "eval_fraction": args.eval_fraction}
    return config, [args.config] if args.config else [], outputs


def mine_records(examples, references, threshold, area_ratio, blur_threshold, threads=1):
    from concurrent.futures import ThreadPoolExecutor

    from .gtmine import estimate_example_links, select_unlinked_boxes

    def one(ex):
        est = estimate_example_links(references.get(ex.example_id, {}), ex, threshold)
        labels = select_unlinked_boxes(ex, est, area_ratio, blur_threshold)
        return {"example_id": ex.example_id,
                "links": [[p, d, round(c, 8)] for p, d, c in est.links],
                "unlinked": [lab.detection_index for lab in labels if lab.selected]}

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(one, examples))


def load_links(path) -> dict:
    """Mined records keyed by example id, as ``(links, selected)``."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["example_id"]] = ([(p, d) for p, d, _ in rec["links"]],
                                          set(rec["unlinked"]))
    return out


def cmd_mine(args, out_dir: Path):
    from .datamodel import load_corpus
    from .synthgen import ORACLE_FILE, REFERENCES_FILE, load_oracle, load_references

    corpus = Path(args.corpus)
    ref_path = Path(args.references) if args.references else corpus / REFERENCES_FILE
    examples, _ = load_corpus(corpus)
    refs = load_references(ref_path)
    records = mine_records(examples, refs, args.threshold, args.area_ratio,
                           args.blur_threshold, args.threads or 1)
    out = out_dir / args.out
    _dump_jsonl(out, records)
    summary = {"examples": len(records), "links": sum(len(r["links"]) for r in records),
               "unlinked": sum(len(r["unlinked"]) for r in records)}
    oracle_path = corpus / ORACLE_FILE
    if oracle_path.exists():
        oracle = load_oracle(oracle_path)
        tp = fp = fn = 0
        for rec in records:
            o = oracle.get(rec["example_id"])
            if o is None:
                continue
            truth = {(p, d) for p, d in o["mapping"] if p in set(o["reference_persons"])}
            got = {(p, d) for p, d, _ in rec["links"]}
            tp += len(got & truth)
            fp += len(got - truth)
            fn += len(truth - got)
        summary["precision"] = tp / (tp + fp) if tp + fp else float("nan")
        summary["recall"] = tp / (tp + fn) if tp + fn else float("nan")
    _event("mined", **summary)
    config = {"threshold": args.threshold, "area_ratio": args.area_ratio,
              "blur_threshold": args.blur_threshold}
    return config, [corpus, ref_path], [out]


def _splits_path(args) -> Path:
    return Path(args.splits) if args.splits else Path(args.corpus) / SPLITS_FILE


def resolve_train_config(args):
    from .trainer import PRESETS, TrainConfig

    data = PRESETS[args.preset].to_dict()
    if args.config:
        extra = load_structured(args.config)
        if "model" in extra:
            extra["model"] = {**data.get("model", {}), **extra["model"]}
        data.update(extra)
    for flag, key in (("steps", "max_steps"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    return TrainConfig.from_dict(data)


def cmd_train(args, out_dir: Path):
    from .datamodel import SplitAssignment, load_corpus, select
    from .encoder import save_checkpoint
    from .trainer import prepare_items, train_loop

    config = resolve_train_config(args)
    examples, header = load_corpus(args.corpus)
    splits = SplitAssignment.load(_splits_path(args))
    train = select(examples, splits.train_ids)
    val = select(examples, splits.val_ids)
    mined = load_links(args.links) if args.links else None
    model_cfg = config.model_config(header.d_v, header.vocab_size)
    items = prepare_items(train, mined, model_cfg)
    _event("training", items=len(items), val=len(val), steps=config.max_steps,
           preset=args.preset)
    ckpt = out_dir / args.out_checkpoint
    log_path = out_dir / args.log
    with open(log_path, "w") as sink:
        res = train_loop(items, val, config, header.d_v, header.vocab_size, log_sink=sink)
    save_checkpoint(ckpt, res.params, res.model_config,
                    {"train_config": config.to_dict(), "best_step": res.best_step,
                     "best_val_accuracy": res.best_val_accuracy})
    _event("trained", best_step=res.best_step, best_val_accuracy=res.best_val_accuracy)
    inputs = [Path(args.corpus), _splits_path(args)] + ([Path(args.links)] if args.links else [])
    return config.to_dict(), inputs, [ckpt, log_path]


def _eval_examples(args):
    from .datamodel import SplitAssignment, interactive_subset, load_corpus, select

    examples, _ = load_corpus(args.corpus)
    splits = SplitAssignment.load(_splits_path(args))
    chosen = select(examples, splits.test_ids if args.split == "test" else splits.val_ids)
    if args.subset == "interactive":
        chosen = interactive_subset(chosen)
    if not chosen:
        from .evaluation import EvaluationError
        raise EvaluationError(f"no examples in split={args.split} subset={args.subset}")
    return chosen


def _report_dict(report, label: str, args) -> dict:
    data = report.to_json()
    data.update({"label": label, "split": args.split, "subset": args.subset})
    return data


def run_baseline_report(name: str, examples, args) -> dict:
    from .evaluation import evaluate_accuracy, run_baseline

    preds = run_baseline(name, examples, args.seed or 0, args.literal_cutoff)
    return _report_dict(evaluate_accuracy(preds, examples, name), name, args)


def cmd_eval(args, out_dir: Path):
    from .encoder import load_checkpoint
    from .evaluation import evaluate_accuracy, predict_model

    examples = _eval_examples(args)
    inputs = [Path(args.corpus), _splits_path(args)]
    if args.checkpoint:
        params, model_cfg, _ = load_checkpoint(args.checkpoint)
        preds = predict_model(params, model_cfg, examples, args.inference)
        bad = sum(not p.is_injective() for p in preds)
        if args.inference == "bipartite" and bad:
            raise RuntimeError(f"{bad} bipartite predictions are not injective")
        label = args.label or f"model-{args.inference}"
        data = _report_dict(evaluate_accuracy(preds, examples, args.inference), label, args)
        inputs.append(Path(args.checkpoint))
    else:
        data = run_baseline_report(args.baseline, examples, args)
        if args.label:
            data["label"] = args.label
    out = out_dir / args.report
    out.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    _event("evaluated", label=data["label"], accuracy=data["accuracy"], links=data["links"])
    config = {k: getattr(args, k) for k in ("baseline", "inference", "subset", "split",
                                            "literal_cutoff")}
    return config, inputs, [out]


def cmd_baseline(args, out_dir: Path):
    from .evaluation import BASELINES

    examples = _eval_examples(args)
    names = args.name or list(BASELINES)
    outputs = []
    for name in names:
        data = run_baseline_report(name, examples, args)
        out = out_dir / f"report-{name}.json"
        out.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
        outputs.append(out)
        _event("evaluated", label=name, accuracy=data["accuracy"], links=data["links"])
    config = {"baselines": names, "subset": args.subset, "split": args.split,
              "literal_cutoff": args.literal_cutoff}
    return config, [Path(args.corpus), _splits_path(args)], outputs


def comparison_rows(reports: list[dict], labels: list[str]) -> list[dict]:
    rows = []
    for rep, label in zip(reports, labels):
        interval = rep.get("interval") or {}
        inter = rep.get("subsets", {}).get("interactive", {})
        rows.append({
            "run": label,
            "accuracy": 100 * rep["accuracy"],
            "lower": 100 * interval.get("lower", float("nan")),
            "upper": 100 * interval.get("upper", float("nan")),
            "links": rep["links"],
            "interactive": 100 * inter.get("accuracy", float("nan")) if inter else float("nan"),
        })
    return rows


def cmd_report(args, out_dir: Path):
    from .plotting import plot_comparison

    reports = [json.loads(Path(p).read_text()) for p in args.runs]
    labels = args.labels or [r.get("label") or r.get("method") or Path(p).stem
                             for r, p in zip(reports, args.runs)]
    if len(labels) != len(reports):
        from .datamodel import ConfigurationError
        raise ConfigurationError("--labels must name every run")
    rows = comparison_rows(reports, labels)
    cols = ["run", "accuracy", "lower", "upper", "links", "interactive"]

    def fmt(v):
        return f"{v:.1f}" if isinstance(v, float) else str(v)

    tsv = out_dir / "comparison.tsv"
    tsv.write_text("\n".join(["\t".join(cols)] +
                             ["\t".join(fmt(r[c]) for c in cols) for r in rows]) + "\n")
    md = out_dir / "comparison.md"
    md.write_text("\n".join(["| " + " | ".join(cols) + " |",
                             "|" + "---|" * len(cols)] +
                            ["| " + " | ".join(fmt(r[c]) for c in cols) + " |" for r in rows])
                  + "\n")
    png = plot_comparison(reports, labels, out_dir / "comparison.png")
    return {"runs": [str(p) for p in args.runs], "labels": labels}, args.runs, [tsv, md, png]


# ---------------------------------------------------------------------------
# argument grammar

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=".", help="directory for every output file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on worker and numeric-library threads")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="namelink", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"namelink {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--config", help="world configuration (YAML or JSON)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--eval-fraction", type=float, default=0.1,
                   help="fraction of identities held out for validation and test")

    p = sub.add_parser("mine", parents=[common], help="estimate links from reference faces")
    p.add_argument("--corpus", required=True)
    p.add_argument("--references", help="reference faces (default: inside the corpus)")
    p.add_argument("--threshold", type=float, default=0.46)
    p.add_argument("--area-ratio", type=float, default=0.6)
    p.add_argument("--blur-threshold", type=float, default=50.0)
    p.add_argument("--out", default="links.jsonl")

    p = sub.add_parser("train", parents=[common], help="train the encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--splits", help="split file (default: inside the corpus)")
    p.add_argument("--links", help="mined links; corpus links are used when absent")
    p.add_argument("--config", help="training configuration (YAML or JSON)")
    p.add_argument("--preset", choices=("tiny", "desk", "full"), default="desk")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out-checkpoint", default="model.ckpt")
    p.add_argument("--log", default="train_log.jsonl")

    def eval_args(p):
        p.add_argument("--corpus", required=True)
        p.add_argument("--splits", help="split file (default: inside the corpus)")
        p.add_argument("--split", choices=("test", "val"), default="test")
        p.add_argument("--subset", choices=("all", "interactive"), default="all")
        p.add_argument("--literal-cutoff", action="store_true",
                       help="L->R (Largest) keeps max(n, m) boxes instead of min(n, m)")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a baseline")
    eval_args(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--baseline", choices=("random", "big-small", "l2r-all", "l2r-largest"))
    p.add_argument("--inference", choices=("argmax", "bipartite"), default="argmax")
    p.add_argument("--label")
    p.add_argument("--report", default="report.json")

    p = sub.add_parser("baseline", parents=[common], help="score the heuristic baselines")
    eval_args(p)
    p.add_argument("--name", action="append",
                   choices=("random", "big-small", "l2r-all", "l2r-largest"),
                   help="repeatable; all baselines by default")

    p = sub.add_parser("report", parents=[common], help="tabulate and plot saved reports")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--labels", nargs="+")
    return parser


COMMANDS = {"gen": cmd_gen, "mine": cmd_mine, "train": cmd_train, "eval": cmd_eval,
            "baseline": cmd_baseline, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    threads = args.threads or os.cpu_count() or 1
    if "numpy" not in sys.modules:
        for var in THREAD_VARS:
            os.environ.setdefault(var, str(threads))
    _setup_logging(args.verbose)
    started = time.time()
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        config, inputs, outputs = COMMANDS[args.command](args, out_dir)
        write_manifest(out_dir, args.command, config, args.seed, inputs, outputs, started)
    except (ValueError, KeyError, OSError, RuntimeError, ArithmeticError) as exc:
        log.error("command failed", extra={"fields": {"command": args.command,
                                                      "error": type(exc).__name__,
                                                      "detail": str(exc)}})
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
