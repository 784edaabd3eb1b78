"""Command-line entry point: ``embryoscore <subcommand> ...``.

Failures print one line ``error: <CLASS>: <message>`` to stderr and exit
with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import config as cfgmod
from .cohort import (
    CohortError,
    DatasetSplit,
    build_dataset,
    dataset_report,
    label_outcomes,
    read_events,
    read_manifest,
    read_split,
    split_dataset,
    write_manifest,
    write_split,
)
from .experiments import (
    clinic_holdout,
    compare_models,
    comparison_data,
    evaluate_cohorts,
    morphokinetic_report,
    render_compare,
    render_holdout,
    render_morpho,
    render_subgroups,
    subgroup_analysis,
    write_comparison_roc,
    write_report,
)
from .morphokinetics import baseline_score, is_scorable
from .network import build_network, load_checkpoint
from .sequences import ContainerError, SequenceError
from .stats import StatsError, write_roc_points
from .synth import generate_cohort
from .trainer import (
    SequenceSource,
    TrainingError,
    assert_no_truth,
    read_scores,
    score_embryos,
    train,
    write_scores,
)

log = logging.getLogger("embryoscore")

DATASET_FILE = "dataset.jsonl"
SPLIT_FILE = "split.json"
CHECKPOINT_FILE = "checkpoint.pt"
SCORES_FILE = "scores.jsonl"


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("USAGE", message)


# --- helpers --------------------------------------------------------------------


def _resolved(args) -> dict:
    try:
        return cfgmod.resolve(args.config, args.profile, args.seed)
    except FileNotFoundError as exc:
        raise CliError("MISSING_CONFIG", str(exc)) from exc
    except ValueError as exc:
        raise CliError("CONFIG_ERROR", str(exc)) from exc


def _snapshot(out: Path, cfg: dict, args, **extra) -> None:
    run = {"subcommand": args.command, **{k: str(v) for k, v in extra.items()}}
    cfgmod.write_snapshot(out, cfg, run)


def _require_provenance(directory: Path) -> dict:
    try:
        return cfgmod.read_snapshot(directory)
    except FileNotFoundError as exc:
        raise CliError("MISSING_PROVENANCE", str(exc)) from exc


def _load_dataset(data_dir: Path):
    _require_provenance(data_dir)
    if not (data_dir / DATASET_FILE).is_file():
        raise CliError("DATA_ERROR", f"{data_dir} has no {DATASET_FILE}; run ingest first")
    records = read_manifest(data_dir / DATASET_FILE)
    split = read_split(data_dir / SPLIT_FILE)
    return records, split


def _subset(records, split: DatasetSplit, which: str):
    ids = {"train": split.train_ids, "test": split.test_ids, "all": split.all_ids}[which]
    return [r for r in records if r.embryo_id in ids]


def _load_model(checkpoint: str | None, profile: str | None):
    if not checkpoint:
        raise CliError("MISSING_CHECKPOINT", "no --checkpoint given")
    path = Path(checkpoint)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.is_file():
        raise CliError("MISSING_CHECKPOINT", f"checkpoint {path} not found")
    net, payload = load_checkpoint(path)
    if profile and net.config.profile != profile:
        raise CliError("INCOMPATIBLE_PROFILE", f"checkpoint profile {net.config.profile!r} vs --profile {profile!r}")
    return net


def _check_model_source(args) -> None:
    if not getattr(args, "scores", None) and not args.checkpoint:
        raise CliError("MISSING_CHECKPOINT", "give --checkpoint or --scores")


def _scores_for(args, records) -> dict[str, float]:
    """Scores from ``--scores`` (a scored run directory) or by running ``--checkpoint``."""
    if getattr(args, "scores", None):
        d = Path(args.scores)
        _require_provenance(d)
        if not (d / SCORES_FILE).is_file():
            raise CliError("DATA_ERROR", f"{d} has no {SCORES_FILE}")
        return {s.embryo_id: s.fh_probability for s in read_scores(d / SCORES_FILE)}
    net = _load_model(args.checkpoint, args.profile)
    scored = score_embryos(net, records, SequenceSource())
    return {s.embryo_id: s.fh_probability for s in scored}


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args, cfg, out: Path) -> None:
    built = cfgmod.build(cfg)
    g = generate_cohort(built.synth, out)
    _snapshot(out, cfg, args)
    print(f"wrote {len(g.cohort.records)} embryos, {len(g.cohort.events)} treatments to {out}")


def cmd_ingest(args, cfg, out: Path) -> None:
    data = Path(args.data)
    manifest, events = data / "manifest.jsonl", data / "events.jsonl"
    assert_no_truth([manifest, events])
    for p in (manifest, events):
        if not p.is_file():
            raise CliError("DATA_ERROR", f"{p} not found")
    labeled = label_outcomes(read_events(events), read_manifest(manifest))
    dataset = build_dataset(labeled)
    root = data.resolve()
    dataset = [
        r if r.sequence_ref is None or Path(r.sequence_ref).is_absolute()
        else replace(r, sequence_ref=str(root / r.sequence_ref))
        for r in dataset
    ]
    split = split_dataset(dataset, cfgmod.build(cfg).split_fraction, seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / DATASET_FILE, dataset)
    write_split(out / SPLIT_FILE, split)
    report = dataset_report(labeled)
    (out / "dataset_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _snapshot(out, cfg, args, data=root)
    print(json.dumps(report, sort_keys=True))


def cmd_train(args, cfg, out: Path) -> None:
    data = Path(args.data)
    records, split = _load_dataset(data)
    built = cfgmod.build(cfg)
    train_set = _subset(records, split, "train")
    net = build_network(built.network, seed=cfg["seed"])
    t0 = time.time()

    def progress(entry):
        if entry["step"] % 50 == 0:
            log.info("step %d lr %.2e loss_fh %.4f loss_discard %.4f", entry["step"], entry["lr"], entry["loss_fh"], entry["loss_discard"])

    out.mkdir(parents=True, exist_ok=True)
    train(
        net, train_set, SequenceSource(), built.train, built.augmentation,
        log_path=out / "train_log.jsonl", checkpoint_path=out / CHECKPOINT_FILE,
        forbidden_ids=split.test_ids, progress=progress,
    )
    _snapshot(out, cfg, args, data=data.resolve())
    print(f"trained {built.train.total_batches} steps in {time.time() - t0:.0f}s; checkpoint {out / CHECKPOINT_FILE}")


def cmd_score(args, cfg, out: Path) -> None:
    _check_model_source(args)
    records, split = _load_dataset(Path(args.data))
    net = _load_model(args.checkpoint, args.profile)
    subset = _subset(records, split, args.subset)
    scored = score_embryos(net, subset, SequenceSource())
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / SCORES_FILE, scored)
    _snapshot(out, cfg, args, checkpoint=args.checkpoint, subset=args.subset)
    print(f"scored {len(scored)} embryos -> {out / SCORES_FILE}")


def cmd_eval(args, cfg, out: Path) -> None:
    _check_model_source(args)
    records, split = _load_dataset(Path(args.data))
    subset = _subset(records, split, args.subset)
    scores = _scores_for(args, subset)
    ev = evaluate_cohorts(scores, subset)
    write_report(out, "cohorts", ev.render(), ev)
    for name, r in (("all", ev.auc_all), ("kid", ev.auc_kid)):
        if r is not None:
            write_roc_points(out / f"roc_{name}.tsv", r)
    _snapshot(out, cfg, args, checkpoint=args.checkpoint, scores=args.scores, subset=args.subset)
    print(ev.render())


def cmd_subgroups(args, cfg, out: Path) -> None:
    _check_model_source(args)
    records, split = _load_dataset(Path(args.data))
    subset = _subset(records, split, args.subset)
    rows = subgroup_analysis(_scores_for(args, subset), subset, alpha=args.alpha)
    text = render_subgroups(rows)
    write_report(out, "subgroups", text, [r.__dict__ for r in rows])
    _snapshot(out, cfg, args, checkpoint=args.checkpoint, scores=args.scores, alpha=args.alpha)
    print(text)


def cmd_morpho(args, cfg, out: Path) -> None:
    _check_model_source(args)
    records, split = _load_dataset(Path(args.data))
    subset = _subset(records, split, args.subset)
    reports = morphokinetic_report(_scores_for(args, subset), subset)
    text = render_morpho(reports)
    write_report(out, "morphokinetics", text, [
        {"name": r.name, "rows": [g.__dict__ for g in r.rows], "p_values": r.p_values} for r in reports
    ])
    _snapshot(out, cfg, args, checkpoint=args.checkpoint, scores=args.scores)
    print(text)


def cmd_compare(args, cfg, out: Path) -> None:
    _check_model_source(args)
    records, split = _load_dataset(Path(args.data))
    subset = _subset(records, split, args.subset)
    scores_a = _scores_for(args, subset)
    # the surrogate rule score is defined only for fully annotated embryos; compare on the common set
    base = {r.embryo_id: baseline_score(r.annotations) for r in subset if r.embryo_id in scores_a}
    base = {k: float(v) for k, v in base.items() if is_scorable(v)}
    scores_a = {k: v for k, v in scores_a.items() if k in base}
    results = compare_models(scores_a, base, subset, tail=args.tail)
    text = render_compare(results, ("network", "baseline"))
    write_report(out, "compare", text, comparison_data(results))
    write_comparison_roc(out, results)
    _snapshot(out, cfg, args, checkpoint=args.checkpoint, scores=args.scores, tail=args.tail)
    print(text)


def cmd_holdout(args, cfg, out: Path) -> None:
    records, _ = _load_dataset(Path(args.data))
    built = cfgmod.build(cfg)
    out.mkdir(parents=True, exist_ok=True)

    def train_fn(training, clinic):
        net = build_network(built.network, seed=cfg["seed"])
        train(net, training, SequenceSource(), built.train, built.augmentation, log_path=out / f"train_log_{clinic}.jsonl")
        return lambda rs: {s.embryo_id: s.fh_probability for s in score_embryos(net, rs, SequenceSource())}

    result = clinic_holdout(records, train_fn, threshold=args.threshold_kid, alpha=args.alpha)
    text = render_holdout(result)
    write_report(out, "holdout", text, result.to_dict())
    _snapshot(out, cfg, args, threshold_kid=args.threshold_kid, alpha=args.alpha)
    print(text)


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "subgroups": cmd_subgroups,
    "holdout": cmd_holdout,
    "morpho": cmd_morpho,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embryoscore", description="Time-lapse embryo scoring pipeline")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="root seed; overrides every seed in the config")
    common.add_argument("--profile", choices=("paper", "tiny"), help="network/training profile")
    common.add_argument("--out", required=True, help="output directory (created if absent)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--data", required=True, help="ingested dataset directory (or synth output for ingest)")

    model = _Parser(add_help=False)
    model.add_argument("--checkpoint", help="checkpoint file or training run directory")
    model.add_argument("--scores", help="scored run directory to reuse instead of a checkpoint")
    model.add_argument("--subset", choices=("test", "train", "all"), default="test")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    sub.add_parser("ingest", parents=[common, data], help="label outcomes and split a cohort")
    sub.add_parser("train", parents=[common, data], help="train a model on the training split")
    p = sub.add_parser("score", parents=[common, data], help="score embryos with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    sub.add_parser("eval", parents=[common, data, model], help="whole-cohort and KID AUC")
    p = sub.add_parser("subgroups", parents=[common, data, model], help="subgroup AUC table")
    p.add_argument("--alpha", type=float, default=0.05)
    p = sub.add_parser("holdout", parents=[common, data], help="leave-one-clinic-out evaluation")
    p.add_argument("--threshold-kid", type=int, default=250)
    p.add_argument("--alpha", type=float, default=0.05)
    sub.add_parser("morpho", parents=[common, data, model], help="score by morphokinetic group")
    p = sub.add_parser("compare", parents=[common, data, model], help="network vs rule-based baseline")
    p.add_argument("--tail", choices=("greater", "less", "two"), default="greater")
    return parser


ERROR_CLASSES = (
    (CohortError, "DATA_ERROR"),
    (ContainerError, "DATA_ERROR"),
    (SequenceError, "DATA_ERROR"),
    (StatsError, "STATS_ERROR"),
    (TrainingError, "TRAINING_ERROR"),
)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = _resolved(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
        return 0
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        kind = next((k for t, k in ERROR_CLASSES if isinstance(exc, t)), "RUNTIME_ERROR")
        msg = f"{type(exc).__name__}: {exc}"
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
