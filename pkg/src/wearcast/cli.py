"""Command-line entry point: one subcommand per pipeline stage, artifacts under ``--out``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import pipeline
from .calibration import CalibrationBundle, fit_calibration
from .config import ConfigError, PipelineConfig, load_config
from .evaluation import (SignRecord, render_bar_svg, render_confusion_svg, write_bar_csv,
                         write_reports_csv, write_reports_json)
from .features import FEATURE_NAMES, compute_rmssd, build_feature_frame, minute_bbi, read_frame, write_frame
from .ingest import (StreamFileError, TagRecord, align_minute_grid, parse_streams, parse_tags,
                     read_grid, write_grid, write_parse_report)
from .labeling import make_examples, metric_panel, read_examples, write_examples
from .model import load_model, predict, save_model, train
from .patterns import CLUSTER_METADATA, render_all_levels
from .synth import SynthSpec, generate_cohort, write_cohort

log = logging.getLogger("wearcast")

STAGE_VERSION = 1
MANIFEST = "_stage.json"
COMMANDS = ("simulate", "ingest", "featurize", "label", "split", "train", "calibrate", "evaluate",
            "heatmap")
# config sections each stage depends on, cumulatively with its upstream stages
STAGE_KEYS = {
    "simulate": ("synth", "seed", "tz"),
    "ingest": ("data_root", "tz"),
    "featurize": (),
    "label": ("windows", "epsilon", "context_minutes", "baseline_minutes"),
    "split": ("split",),
    "train": ("model", "seed"),
    "calibrate": ("calibration",),
    "evaluate": (),
    "heatmap": (),
}
UPSTREAM = {
    "simulate": (),
    "ingest": (),
    "featurize": ("ingest",),
    "label": ("featurize", "ingest"),
    "split": ("label",),
    "train": ("label", "split"),
    "calibrate": ("train", "label", "split"),
    "evaluate": ("calibrate", "train", "label", "split"),
    "heatmap": ("evaluate",),
}


class MissingArtifact(FileNotFoundError):
    pass


class StaleArtifact(RuntimeError):
    pass


def _lineage(stage):
    seen, todo = [], [stage]
    while todo:
        s = todo.pop()
        if s not in seen:
            seen.append(s)
            todo.extend(UPSTREAM[s])
    return seen


def stage_hash(cfg: PipelineConfig, stage: str) -> str:
    d = cfg.to_dict()
    keys = sorted({k for s in _lineage(stage) for k in STAGE_KEYS[s]})
    blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
    return hashlib.sha256(f"{stage}:{STAGE_VERSION}:{blob}".encode()).hexdigest()[:16]


def write_manifest(directory: Path, stage: str, cfg: PipelineConfig, extra: dict | None = None):
    payload = {"stage": stage, "stage_version": STAGE_VERSION, "config_hash": stage_hash(cfg, stage),
               "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"), **(extra or {})}
    (directory / MANIFEST).write_text(json.dumps(payload, indent=2, sort_keys=True))


def stage_dir(cfg, stage) -> Path:
    return cfg.out_dir() / stage


def require(cfg: PipelineConfig, stage: str, force: bool):
    """Check that every upstream artifact exists and was built with the current config."""
    for up in UPSTREAM[stage]:
        path = stage_dir(cfg, up) / MANIFEST
        if not path.exists():
            raise MissingArtifact(f"missing upstream artifact {path} (run '{up}' first)")
        recorded = json.loads(path.read_text())["config_hash"]
        if recorded != stage_hash(cfg, up):
            msg = f"config hash of {path} ({recorded}) differs from the current config"
            if not force:
                raise StaleArtifact(msg + "; rerun upstream or pass --force")
            log.warning("%s; continuing because of --force", msg)


def _fresh(directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    return directory


# stages

def run_simulate(cfg: PipelineConfig):
    s = cfg.synth
    spec = SynthSpec(n_users=s.n_users, days=s.days, noise_scale=s.noise_scale, gap_rate=s.gap_rate,
                     start_date=s.start_date, tz=cfg.tz, seed=cfg.seed)
    cohort = generate_cohort(spec)
    d = _fresh(cfg.data_dir())
    write_cohort(cohort, d)
    write_manifest(d, "simulate", cfg, {"n_users": len(cohort.bundles), "n_tags": len(cohort.tags)})


def _user_dirs(root: Path):
    if not root.is_dir():
        raise MissingArtifact(f"missing data root {root}")
    users = sorted(p for p in root.iterdir() if p.is_dir())
    if not users:
        raise MissingArtifact(f"no user directories under {root}")
    return users


def run_ingest(cfg: PipelineConfig):
    out = _fresh(stage_dir(cfg, "ingest"))
    bundles, tags, issues = [], [], {}
    for udir in _user_dirs(cfg.data_dir()):
        b = parse_streams(udir)
        t, iss = parse_tags(udir / "tags.csv", b.user_id)
        bundles.append(b)
        tags.extend(t)
        issues[b.user_id] = iss
        d = _fresh(out / b.user_id)
        write_grid(align_minute_grid(b, tz=cfg.tz), d / "grid.csv")
        np.save(d / "bbi_t.npy", b.bbi_t)
        np.save(d / "bbi.npy", b.bbi)
        sleep = {k.isoformat(): v for k, v in sorted(b.sleep.items())}
        (d / "sleep.json").write_text(json.dumps(sleep, indent=2, sort_keys=True))
    write_parse_report(bundles, out / "parse_report.json")
    (out / "tag_issues.json").write_text(json.dumps(issues, indent=2, sort_keys=True))
    (out / "tags.json").write_text(json.dumps([asdict(g) for g in tags], indent=2))
    write_manifest(out, "ingest", cfg, {"users": [b.user_id for b in bundles]})


def _ingested_users(cfg):
    manifest = json.loads((stage_dir(cfg, "ingest") / MANIFEST).read_text())
    return manifest["users"]


def _read_tags(cfg):
    return [TagRecord(**g) for g in json.loads((stage_dir(cfg, "ingest") / "tags.json").read_text())]


def run_featurize(cfg: PipelineConfig):
    from datetime import date

    src, out = stage_dir(cfg, "ingest"), _fresh(stage_dir(cfg, "featurize"))
    for uid in _ingested_users(cfg):
        grid = read_grid(src / uid / "grid.csv")
        bbi_t, bbi = np.load(src / uid / "bbi_t.npy"), np.load(src / uid / "bbi.npy")
        sleep = {date.fromisoformat(k): v for k, v in
                 json.loads((src / uid / "sleep.json").read_text()).items()}
        series = compute_rmssd(bbi_t, bbi, grid.start, len(grid))
        d = _fresh(out / uid)
        write_frame(build_feature_frame(grid, series, sleep, tz=cfg.tz), d / "frame.csv")
        np.save(d / "bbi_minute.npy", minute_bbi(bbi_t, bbi, grid.start, len(grid)))
    write_manifest(out, "featurize", cfg, {"feature_names": list(FEATURE_NAMES)})


def run_label(cfg: PipelineConfig):
    src, out = stage_dir(cfg, "featurize"), _fresh(stage_dir(cfg, "label"))
    frames, panels = {}, {}
    for uid in _ingested_users(cfg):
        frames[uid] = read_frame(src / uid / "frame.csv")
        panels[uid] = metric_panel(frames[uid], np.load(src / uid / "bbi_minute.npy"))
    examples, rejections = make_examples(frames, panels, _read_tags(cfg), cfg.windows,
                                         epsilon=cfg.epsilon)
    write_examples(examples, rejections, out, {"windows": [list(w) for w in cfg.windows],
                                               "epsilon": cfg.epsilon})
    write_manifest(out, "label", cfg, {"n_examples": len(examples), "n_rejected": len(rejections)})


def _examples(cfg):
    return read_examples(stage_dir(cfg, "label"))[0]


def run_split(cfg: PipelineConfig):
    out = _fresh(stage_dir(cfg, "split"))
    s = cfg.split
    parts = pipeline.split(_examples(cfg), s.test_fraction, s.val_fraction, s.min_examples)
    (out / "assignment.json").write_text(json.dumps(parts.assignment, indent=2, sort_keys=True))
    write_manifest(out, "split", cfg, {k: len(getattr(parts, k)) for k in ("train", "validation", "test")})


def _parts(cfg):
    assignment = json.loads((stage_dir(cfg, "split") / "assignment.json").read_text())
    parts = {"train": [], "validation": [], "test": []}
    for e in _examples(cfg):
        parts[assignment[e.key]].append(e)
    return parts


def run_train(cfg: PipelineConfig):
    out = _fresh(stage_dir(cfg, "train"))
    parts = _parts(cfg)
    result = train(parts["train"], parts["validation"], cfg.model, FEATURE_NAMES)
    save_model(result, out)
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True))
    write_manifest(out, "train", cfg, {"best_epoch": result.report["best_epoch"]})


def run_calibrate(cfg: PipelineConfig):
    out = _fresh(stage_dir(cfg, "calibrate"))
    result = load_model(stage_dir(cfg, "train"), FEATURE_NAMES)
    train_ex = _parts(cfg)["train"]
    c = cfg.calibration
    bundle = fit_calibration(predict(result, train_ex), train_ex, cfg.windows, c.onset_grid,
                             c.tau_grid, cfg.epsilon)
    bundle.save(out / "calibration.json", {"fit_on": "train"})
    write_manifest(out, "calibrate", cfg)


RECORD_FIELDS = ("key", "user_id", "category", "end", "metric")


def run_evaluate(cfg: PipelineConfig):
    out = _fresh(stage_dir(cfg, "evaluate"))
    result = load_model(stage_dir(cfg, "train"), FEATURE_NAMES)
    bundle = CalibrationBundle.load(stage_dir(cfg, "calibrate") / "calibration.json")
    records = pipeline.sign_records(result, bundle, _parts(cfg)["test"])
    reports = pipeline.evaluate(records, cfg.windows)
    for grouping, reps in reports.items():
        write_reports_json(reps, out / f"report_{grouping}.json", {"grouping": grouping})
        write_reports_csv(reps, out / f"report_{grouping}.csv")
        write_bar_csv(reps, out / f"bars_{grouping}.csv", cfg.windows)
    (out / "bars_all.svg").write_text(render_bar_svg(reports["all"], windows=cfg.windows,
                                                      title="called-only accuracy, test"))
    (out / "confusion_all.svg").write_text(render_confusion_svg(reports["all"]))
    rec_dir = _fresh(out / "records")
    index = [{f: getattr(r, f) for f in RECORD_FIELDS} for r in records]
    (rec_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    H = cfg.windows[-1][1]
    for f, dtype in (("s_a", np.int8), ("s_p", np.int8), ("valid", bool)):
        arr = np.stack([getattr(r, f) for r in records]).astype(dtype) if records else np.zeros((0, H), dtype)
        np.save(rec_dir / f"{f}.npy", arr)
    write_manifest(out, "evaluate", cfg, {"n_test_records": len(records)})


def _records(cfg):
    d = stage_dir(cfg, "evaluate") / "records"
    index = json.loads((d / "index.json").read_text())
    arrays = {f: np.load(d / f"{f}.npy") for f in ("s_a", "s_p", "valid")}
    return [SignRecord(**rec, s_a=arrays["s_a"][i], s_p=arrays["s_p"][i], valid=arrays["valid"][i])
            for i, rec in enumerate(index)]


def run_heatmap(cfg: PipelineConfig):
    out = _fresh(stage_dir(cfg, "heatmap"))
    vectors = pipeline.sign_vectors(_records(cfg), cfg.windows)
    written = render_all_levels(vectors, out, cfg.windows)
    write_manifest(out, "heatmap", cfg, {"clustering": CLUSTER_METADATA, "n_heatmaps": len(written),
                                         "window_sign": "majority vote of non-neutral calls"})


RUNNERS = {name: globals()[f"run_{name}"] for name in COMMANDS}


def run(command: str, cfg: PipelineConfig, force: bool = False):
    chain = COMMANDS if command == "all" else (command,)
    if command == "all" and cfg.data_dir().exists() and not (cfg.data_dir() / MANIFEST).exists():
        chain = COMMANDS[1:]  # real data supplied: nothing to simulate
    for stage in chain:
        require(cfg, stage, force)
        log.info("stage %s", stage)
        RUNNERS[stage](cfg)


def build_parser():
    p = argparse.ArgumentParser(prog="wearcast", description=__doc__)
    p.add_argument("command", choices=COMMANDS + ("all",))
    p.add_argument("--config", type=Path, help="TOML file with dotted sections")
    p.add_argument("--out", help="run directory (default from config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="accept upstream artifacts built with another config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"out": args.out, "seed": args.seed})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"missing config file: {exc.filename}", file=sys.stderr)
        return 2
    try:
        run(args.command, cfg, args.force)
    except (MissingArtifact, StreamFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StaleArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
