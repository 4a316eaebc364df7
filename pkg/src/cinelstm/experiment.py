"""Leave-one-subject-out experiments: configuration, fold runs and reports.

Each fold trains ``members`` CNN models with consecutive seeds; every
recurrent variant member starts from the CNN member with the same index.
Test cycles are segmented by the members' averaged maps and scored per
slice. Fold directories are self-contained, so a failed fold leaves the
others intact.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from threadpoolctl import threadpool_limits

from .metrics import MetricsReport, evaluate_dataset, format_table
from .pipeline.cineio import export_overlays, read_cine
from .pipeline.phantom import CohortSpec, phantom_cohort
from .pipeline.sequence import CineSequence
from .seeding import substream_seed
from .segnet import VARIANTS, canonical_variant, save_checkpoint
from .training import FoldSpec, TrainConfig, TrainLog, ensemble_predict, loo_split, train_model

log = logging.getLogger(__name__)

THREADS_ENV = "CINELSTM_THREADS"


def thread_limit() -> int:
    """Worker thread count for numerical libraries; 1 unless overridden."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


@dataclass
class RunConfig:
    """Everything a run needs; written back out fully resolved."""

    seed: int = 0
    data_dir: str | None = None
    cohort: CohortSpec = field(default_factory=CohortSpec)
    subjects: int = 8
    cycles_per_subject: int = 18
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple[str, ...] = VARIANTS
    members: int = 5
    folds: tuple[str, ...] | None = None
    val_fraction: float = 0.2
    jobs: int = 1
    overlays: bool = False

    def __post_init__(self):
        self.variants = tuple(canonical_variant(v) for v in self.variants)
        if not self.variants:
            raise ValueError("at least one variant is required")
        if self.members < 1 or self.jobs < 1 or self.subjects < 1 or self.cycles_per_subject < 1:
            raise ValueError("members, jobs, subjects and cycles_per_subject must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "cohort" in d:
            d["cohort"] = CohortSpec.from_dict(d["cohort"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        for key in ("variants", "folds"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cohort"] = self.cohort.to_dict()
        d["train"] = self.train.to_dict()
        d["variants"] = list(self.variants)
        d["folds"] = None if self.folds is None else list(self.folds)
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def load_cine_dir(path) -> dict[str, list[CineSequence]]:
    """Subject -> cycles (sorted by scan, location, cycle) from a directory of ``.cine`` files."""
    files = sorted(Path(path).glob("*.cine"))
    if not files:
        raise ValueError(f"no .cine files in {path}")
    data: dict[str, list[CineSequence]] = {}
    for f in files:
        seq = read_cine(f)
        data.setdefault(seq.ids.subject, []).append(seq)
    for seqs in data.values():
        seqs.sort(key=lambda s: (s.ids.scan, s.ids.location, s.ids.cycle))
    return dict(sorted(data.items()))


def load_dataset(cfg: RunConfig) -> dict[str, list[CineSequence]]:
    if cfg.data_dir is not None:
        return load_cine_dir(cfg.data_dir)
    return phantom_cohort(cfg.cohort, cfg.subjects, cfg.cycles_per_subject)


def index_dataset(data: Mapping[str, list[CineSequence]]) -> tuple[dict[str, list[str]], dict[str, CineSequence]]:
    """Subject -> cycle tags, and tag -> sequence; tags must be unique."""
    by_tag: dict[str, CineSequence] = {}
    ids: dict[str, list[str]] = {}
    for subj, seqs in data.items():
        for s in seqs:
            if s.ids.tag in by_tag:
                raise ValueError(f"duplicate cycle id {s.ids.tag}")
            by_tag[s.ids.tag] = s
            ids.setdefault(subj, []).append(s.ids.tag)
    return ids, by_tag


def member_seed(root: int, subject: str, member: int) -> int:
    """Consecutive seeds per ensemble member, offset per fold."""
    return substream_seed(root, "fold", subject) + member


def make_folds(cfg: RunConfig, ids: Mapping[str, list[str]]) -> list[FoldSpec]:
    folds = loo_split(ids, cfg.seed, cfg.val_fraction)
    if cfg.folds is not None:
        unknown = sorted(set(cfg.folds) - set(ids))
        if unknown:
            raise ValueError(f"fold subjects not in data: {unknown}")
        folds = [f for f in folds if f.test_subject in cfg.folds]
    return folds


# ---------------------------------------------------------------------------
# Fold runs
# ---------------------------------------------------------------------------

def train_members(
    cfg: RunConfig,
    fold: FoldSpec,
    by_tag: Mapping[str, CineSequence],
    out_dir: Path,
    variants: tuple[str, ...] | None = None,
) -> dict[str, list]:
    """Train every member of every variant; checkpoints and logs go to ``out_dir``."""
    variants = variants or cfg.variants
    models: dict[str, list] = {v: [] for v in variants}
    for k in range(cfg.members):
        seed = member_seed(cfg.seed, fold.test_subject, k)
        mdir = out_dir / f"member{k}"
        mdir.mkdir(parents=True, exist_ok=True)
        train_log = TrainLog()
        base_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "variant": "cnn", "seed": seed})
        cnn, _ = train_model(base_cfg, fold, by_tag, train_log=train_log)
        for v in variants:
            if v == "cnn":
                model = cnn
            else:
                vcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "variant": v, "seed": seed})
                model, _ = train_model(vcfg, fold, by_tag, init=cnn, train_log=train_log)
            save_checkpoint(model, mdir / f"{v}.segm")
            models[v].append(model)
        train_log.write(mdir / "train_log.jsonl")
    return models


def evaluate_members(
    models: Mapping[str, list],
    test: list[CineSequence],
    expected: int,
    overlay_dir: Path | None = None,
) -> dict[str, MetricsReport]:
    reports = {}
    for v, members in models.items():
        preds, truths, spacing = {}, {}, {}
        # records are keyed by position in the test list, which is the cycle index for single-location data
        for i, seq in enumerate(test):
            key = (seq.ids.subject, i)
            preds[key] = ensemble_predict(members, seq, expected=expected)
            truths[key] = seq.masks
            spacing[key] = seq.spacing_mm[0]
            if overlay_dir is not None:
                export_overlays(overlay_dir / v, seq, preds[key])
        reports[v] = evaluate_dataset(preds, truths, spacing)
    return reports


def run_fold(cfg: RunConfig, subject: str, out_dir) -> dict[str, MetricsReport]:
    """Train and evaluate one leave-one-out fold under ``out_dir/fold_<subject>``."""
    with threadpool_limits(thread_limit()):
        data = load_dataset(cfg)
        ids, by_tag = index_dataset(data)
        (fold,) = [f for f in make_folds(cfg, ids) if f.test_subject == subject]
        fdir = Path(out_dir) / f"fold_{subject}"
        fdir.mkdir(parents=True, exist_ok=True)
        models = train_members(cfg, fold, by_tag, fdir)
        test = [by_tag[t] for t in fold.test_cycles]
        reports = evaluate_members(models, test, cfg.members, fdir / "overlays" if cfg.overlays else None)
        for v, rep in reports.items():
            (fdir / f"report_{v}.json").write_text(rep.to_json())
        (fdir / "report.txt").write_text(format_table(reports) + "\n")
        return reports


def write_manifest(cfg: RunConfig, folds: list[FoldSpec], out_dir: Path) -> None:
    manifest = {
        "seed": cfg.seed,
        "variants": list(cfg.variants),
        "members": cfg.members,
        "folds": [
            {**f.to_dict(), "member_seeds": [member_seed(cfg.seed, f.test_subject, k) for k in range(cfg.members)]}
            for f in folds
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _run_fold_job(cfg_dict: dict, subject: str, out_dir: str) -> dict:
    reports = run_fold(RunConfig.from_dict(cfg_dict), subject, out_dir)
    return {v: r.to_dict() for v, r in reports.items()}


def run_loo(cfg: RunConfig, out_dir) -> tuple[dict[str, MetricsReport], dict[str, str]]:
    """All folds, then a combined report; returns (reports, failures by subject)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / "config.resolved.json")
    ids, _ = index_dataset(load_dataset(cfg))
    folds = make_folds(cfg, ids)
    write_manifest(cfg, folds, out_dir)

    results: dict[str, dict] = {}
    failures: dict[str, str] = {}
    subjects = [f.test_subject for f in folds]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = {s: pool.submit(_run_fold_job, cfg.to_dict(), s, str(out_dir)) for s in subjects}
            for s, fut in futures.items():
                try:
                    results[s] = fut.result()
                except Exception as exc:  # keep the other folds' results
                    failures[s] = f"{type(exc).__name__}: {exc}"
    else:
        for s in subjects:
            try:
                results[s] = _run_fold_job(cfg.to_dict(), s, str(out_dir))
            except Exception as exc:
                failures[s] = f"{type(exc).__name__}: {exc}"
    for s, msg in failures.items():
        log.error("fold %s failed: %s", s, msg)

    combined: dict[str, MetricsReport] = {}
    for v in cfg.variants:
        rep = MetricsReport()
        for s in subjects:
            if s in results:
                rep = rep.merged(MetricsReport.from_dict(results[s][v]))
        combined[v] = rep
        (out_dir / f"report_{v}.json").write_text(rep.to_json())
    table = format_table(combined)
    if failures:
        table += "\nfailed folds: " + ", ".join(sorted(failures))
    (out_dir / "report.txt").write_text(table + "\n")
    return combined, failures
