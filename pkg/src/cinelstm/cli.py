"""Command-line entry point.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
The thread count of the numerical libraries defaults to 1 and can be
raised with the ``CINELSTM_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .experiment import (
    RunConfig,
    index_dataset,
    load_dataset,
    make_folds,
    member_seed,
    run_loo,
    thread_limit,
    train_members,
    write_manifest,
)
from .metrics import evaluate_dataset, format_table
from .pipeline.cineio import export_overlays, read_cine, write_cine
from .pipeline.phantom import CohortSpec, phantom_cohort
from .pipeline.sequence import CineSequence
from .segnet import VARIANTS, canonical_variant, load_checkpoint
from .training import TrainingDiverged, ensemble_predict

log = logging.getLogger("cinelstm")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad arguments, config or files; maps to exit code 2."""


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def _read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise InputError(f"{path}: top level must be an object")
    return d


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cohort = CohortSpec.from_dict(_read_json(args.spec)) if args.spec else CohortSpec()
    if args.seed is not None:
        cohort = CohortSpec.from_dict({**cohort.to_dict(), "seed": args.seed})
    if args.subjects < 1 or args.cycles_per_subject < 1:
        raise InputError("--subjects and --cycles-per-subject must be positive")
    out = _out_dir(args.out)
    data = phantom_cohort(cohort, args.subjects, args.cycles_per_subject)
    files = []
    for seqs in data.values():
        for seq in seqs:
            name = f"{seq.ids.tag}.cine"
            write_cine(out / name, seq)
            files.append(name)
    manifest = {
        "cohort": cohort.to_dict(),
        "subjects": args.subjects,
        "cycles_per_subject": args.cycles_per_subject,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(files)} cycles to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.variant:
        cfg.variants = (canonical_variant(args.variant),)
    out = _out_dir(args.out)
    ids, by_tag = index_dataset(load_dataset(cfg))
    if args.fold not in ids:
        raise InputError(f"fold subject {args.fold!r} not in data; subjects are {sorted(ids)}")
    cfg.folds = (args.fold,)
    cfg.write(out / "config.resolved.json")
    folds = make_folds(cfg, ids)
    write_manifest(cfg, folds, out)
    train_members(cfg, folds[0], by_tag, out)
    seeds = [member_seed(cfg.seed, args.fold, k) for k in range(cfg.members)]
    print(f"trained {cfg.members} member(s) of {', '.join(cfg.variants)} for fold {args.fold} (seeds {seeds})")
    return EXIT_OK


def cmd_loo(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    out = _out_dir(args.out)
    reports, failures = run_loo(cfg, out)
    print(format_table(reports))
    if failures:
        for s, msg in sorted(failures.items()):
            print(f"fold {s} failed: {msg}", file=sys.stderr)
        numeric = all(m.startswith(("TrainingDiverged", "FloatingPointError")) for m in failures.values())
        return EXIT_NUMERIC if numeric else EXIT_INPUT
    return EXIT_OK


def _inputs(path) -> list:
    p = Path(path)
    if p.is_dir():
        return [read_cine(f) for f in sorted(p.glob("*.cine"))]
    return [read_cine(p)]


def cmd_segment(args) -> int:
    models = [load_checkpoint(p) for p in args.checkpoints]
    seqs = _inputs(args.inp)
    if not seqs:
        raise InputError(f"no .cine input in {args.inp}")
    out = _out_dir(args.out)
    for seq in seqs:
        if seq.shape != models[0].input_size:
            raise InputError(f"{seq.ids.tag}: frame size {seq.shape} does not match model input {models[0].input_size}")
        masks = ensemble_predict(models, seq, expected=args.expected)
        write_cine(out / f"{seq.ids.tag}.cine", CineSequence(seq.frames, masks, seq.spacing_mm, seq.ids))
        if not args.no_overlays:
            export_overlays(out / "overlays", seq, masks)
    print(f"segmented {len(seqs)} cycle(s) with {len(models)} model(s) into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = {s.ids.tag: s for s in _inputs(args.pred)}
    truth = {s.ids.tag: s for s in _inputs(args.truth)}
    if set(pred) != set(truth):
        raise InputError(
            f"mismatched ids: no prediction for {sorted(set(truth) - set(pred))}, "
            f"no truth for {sorted(set(pred) - set(truth))}"
        )
    for tag, s in truth.items():
        if s.masks is None or pred[tag].masks is None:
            raise InputError(f"{tag}: both prediction and truth files need masks")
    keys = {tag: (s.ids.subject, s.ids.cycle) for tag, s in truth.items()}
    if len(set(keys.values())) != len(keys):
        keys = {tag: (s.ids.subject, k) for k, (tag, s) in enumerate(sorted(truth.items()))}
    report = evaluate_dataset(
        {keys[t]: pred[t].masks for t in keys},
        {keys[t]: truth[t].masks for t in keys},
        {keys[t]: truth[t].spacing_mm[0] for t in keys},
    )
    out = Path(args.out)
    _out_dir(out.parent)
    json_path = out if out.suffix == ".json" else out.with_suffix(".json")
    json_path.write_text(report.to_json())
    table = format_table({"model": report})
    json_path.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cinelstm", description="Cine MRI myocardium segmentation with ConvLSTMs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort as .cine files")
    p.add_argument("--spec", help="JSON cohort spec (defaults apply when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--cycles-per-subject", type=int, default=18)
    p.add_argument("--seed", type=int, help="override the cohort seed")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one fold's ensemble members")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", required=True, help="held-out subject id")
    p.add_argument("--variant", choices=VARIANTS + ("cnn-only",))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loo", help="full leave-one-subject-out experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, help="parallel fold processes (overrides config)")
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("segment", help="ensemble segmentation of .cine cycles")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--in", dest="inp", required=True, help=".cine file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--expected", type=int, default=5, help="ensemble size below which a warning is printed")
    p.add_argument("--no-overlays", action="store_true")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted masks against manual ones")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="report path; .json and .txt are written")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(thread_limit()):
            return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged after epoch {exc.last_finite_epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
