"""Command-line surface: ingest, synth, train, extract, eval, sweep, and
decode-viz.

Every command resolves a report directory (flag > GAITDIS_REPORT_DIR env >
per-command default), writes its artifacts there, and records a run.json with
the resolved configuration, its hash, the code version, and the seed. Errors
derived from GaitdisError exit nonzero with a machine-readable error record.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, clip_store, engine, evalkit, nets, report, synthgait
from .errors import ConfigError, GaitdisError

REPORT_DIR_ENV = "GAITDIS_REPORT_DIR"


@dataclass
class RunConfig:
    """Resolved run configuration shared by the pipeline commands."""

    archive: str | None = None
    checkpoint: str | None = None
    report_dir: str | None = None
    protocol: str | None = None
    alpha: float = 0.5
    seed: int = 0
    deterministic: bool = False
    train: engine.TrainConfig = field(default_factory=engine.TrainConfig)

    def validate(self) -> None:
        problems = []
        if not 0.0 <= self.alpha <= 1.0:
            problems.append(f"alpha must be in [0,1], got {self.alpha}")
        paths = [p for p in (self.archive, self.checkpoint) if p]
        if len(paths) != len(set(paths)):
            problems.append("archive and checkpoint paths must be distinct")
        try:
            self.train.validate()
        except ConfigError as exc:
            problems.extend(exc.violations)
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {
            "archive": self.archive,
            "checkpoint": self.checkpoint,
            "report_dir": self.report_dir,
            "protocol": self.protocol,
            "alpha": self.alpha,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "train": self.train.to_dict(),
        }


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        raw = json.load(f)
    paths = raw.get("paths", {})
    cfg = RunConfig(
        archive=paths.get("archive"),
        checkpoint=paths.get("checkpoint"),
        report_dir=paths.get("report_dir"),
        protocol=raw.get("protocol"),
        alpha=raw.get("alpha", 0.5),
        seed=raw.get("seed", 0),
        deterministic=raw.get("deterministic", False),
        # deferred validation: RunConfig.validate() reports every violation at once
        train=engine.TrainConfig.from_dict(raw.get("train", {}), validate=False),
    )
    return cfg


def _merge_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for name in ("archive", "checkpoint", "protocol"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "report_dir", None) is not None:
        cfg.report_dir = args.report_dir
    elif os.environ.get(REPORT_DIR_ENV):
        cfg.report_dir = os.environ[REPORT_DIR_ENV]
    if getattr(args, "alpha", None) is not None:
        cfg.alpha = args.alpha
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    if getattr(args, "iters", None) is not None:
        cfg.train.max_iterations = args.iters
    if getattr(args, "large_model", False):
        cfg.train.large_model = True
    if getattr(args, "clips_per_batch", None) is not None:
        cfg.train.clips_per_batch = args.clips_per_batch
    return cfg


def _apply_determinism(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _config_hash(config_dict: dict) -> str:
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_run_record(report_dir: Path, command: str, cfg: RunConfig) -> None:
    report_dir.mkdir(parents=True, exist_ok=True)
    config_dict = cfg.to_dict()
    report.write_json(
        report_dir / "run.json",
        {
            "command": command,
            "config": config_dict,
            "config_hash": _config_hash(config_dict),
            "code_version": __version__,
            "seed": cfg.seed,
        },
    )


def _resolve_report_dir(cfg: RunConfig, default: Path) -> Path:
    return Path(cfg.report_dir) if cfg.report_dir else default


def _load_model(cfg: RunConfig) -> tuple[nets.GaitModel, dict]:
    if not cfg.checkpoint:
        raise ConfigError(["checkpoint path is required"])
    return nets.load_checkpoint(cfg.checkpoint)


def _load_clips(cfg: RunConfig) -> list[clip_store.Clip]:
    if not cfg.archive:
        raise ConfigError(["archive path is required"])
    return clip_store.load_clip_archive(cfg.archive)


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> int:
    manifest = clip_store.Manifest.from_json(args.manifest)
    clips, ingest_report = clip_store.ingest(manifest)
    if not cfg.archive:
        raise ConfigError(["archive path is required"])
    clip_store.save_clip_archive(clips, cfg.archive)
    report_dir = _resolve_report_dir(cfg, Path(cfg.archive))
    report_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(
        report_dir / "ingest_report.json",
        {
            "n_clips": len(clips),
            "n_errors": len(ingest_report.errors),
            "errors": [{"source_id": s, "error": e} for s, e in ingest_report.errors],
        },
    )
    _write_run_record(report_dir, "ingest", cfg)
    print(f"ingested {len(clips)} clips ({len(ingest_report.errors)} errors) -> {cfg.archive}")
    return 0 if ingest_report.ok() else 1


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    labeled, _ = synthgait.make_dataset(
        n_subjects=args.subjects,
        conditions_per_subject=args.conditions,
        clips_per_condition=args.clips,
        seed=cfg.seed,
        view_deg=args.view,
        n_frames_range=(args.frames_min, args.frames_max),
        out_dir=out_dir,
        export_frames=args.export_frames,
    )
    subjects = sorted({lc.clip.subject_id for lc in labeled})
    n_train = args.train_subjects if args.train_subjects is not None else len(subjects) // 2
    if not 0 < n_train < len(subjects):
        raise ConfigError([f"train_subjects must be in 1..{len(subjects) - 1}, got {n_train}"])
    conditions = sorted({lc.clip.condition_id for lc in labeled})
    protocol = evalkit.ProtocolSpec(
        name=f"synthetic-{cfg.seed}",
        train_subjects=subjects[:n_train],
        test_subjects=subjects[n_train:],
        gallery=[evalkit.Selector(conditions=[conditions[0]])],
        probe=[evalkit.Selector(conditions=conditions[1:] or conditions)],
        metric="rank1",
        far_points=[0.01, 0.05],
        notes="condition-crossed gallery/probe over held-out synthetic subjects",
    )
    protocol.to_json(out_dir / "protocol.json")
    report_dir = _resolve_report_dir(cfg, out_dir)
    _write_run_record(report_dir, "synth", cfg)
    print(
        f"wrote {len(labeled)} clips for {len(subjects)} subjects -> {out_dir} "
        f"(protocol: {protocol.name})"
    )
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    clips = _load_clips(cfg)
    if cfg.protocol:
        protocol = evalkit.load_protocol(cfg.protocol)
        train_subjects = set(protocol.train_subjects)
        clips = [c for c in clips if c.subject_id in train_subjects]
        if not clips:
            raise ConfigError([f"no archive clips belong to protocol train subjects"])
    out_path = Path(args.out)
    report_dir = _resolve_report_dir(cfg, out_path.parent)
    result = engine.train(clips, cfg.train, progress=not args.quiet)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(out_path, result.model, cfg.train.max_iterations, result.subjects)
    report_dir.mkdir(parents=True, exist_ok=True)
    log_rows = [r.as_row() for r in result.log]
    if log_rows:
        report.write_csv(report_dir / "training_log.csv", log_rows)
        report.save_loss_curves(report_dir / "loss_curves.png", log_rows)
    _write_run_record(report_dir, "train", cfg)
    print(f"trained {cfg.train.max_iterations} iterations -> {out_path}")
    return 0


def cmd_extract(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, _ = _load_model(cfg)
    clips = _load_clips(cfg)
    records = engine.extract_signatures(model, clips)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    engine.save_signatures(out_path, records)
    report_dir = _resolve_report_dir(cfg, out_path.parent)
    _write_run_record(report_dir, "extract", cfg)
    print(f"extracted {len(records)} signatures -> {out_path}")
    return 0


def _protocol_records(cfg: RunConfig, model) -> tuple[evalkit.ProtocolSpec, list]:
    if not cfg.protocol:
        raise ConfigError(["protocol path is required"])
    protocol = evalkit.load_protocol(cfg.protocol)
    clips = _load_clips(cfg)
    test = set(protocol.test_subjects)
    clips = [c for c in clips if c.subject_id in test]
    if not clips:
        raise ConfigError(["no archive clips belong to protocol test subjects"])
    return protocol, engine.extract_signatures(model, clips)


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, _ = _load_model(cfg)
    protocol, records = _protocol_records(cfg, model)
    report_dir = _resolve_report_dir(cfg, Path("reports"))
    report_dir.mkdir(parents=True, exist_ok=True)

    gallery, probe = evalkit.apply_protocol(protocol, records)
    metrics: dict = {
        "protocol": protocol.name,
        "alpha": cfg.alpha,
        "n_gallery": len(gallery),
        "n_probe": len(probe),
        "channels": {},
    }
    uses_views = bool(protocol.view_pairs) or protocol.exclude_identical_view
    for channel in ("fused", "static", "dynamic"):
        if uses_views:
            metrics["channels"][channel] = evalkit.evaluate_protocol(
                protocol, records, cfg.alpha, channel
            )
        else:
            matrix = evalkit.build_score_matrix(gallery, probe, cfg.alpha, channel)
            metrics["channels"][channel] = evalkit.full_metrics(matrix, protocol.far_points)
            report.write_score_matrix_csv(report_dir / f"score_matrix_{channel}.csv", matrix)
    report.write_json(report_dir / "metrics.json", metrics)
    _write_run_record(report_dir, "eval", cfg)
    fused = metrics["channels"]["fused"]
    headline = fused.get("rank1", fused.get("mean"))
    print(f"eval {protocol.name}: fused {protocol.metric} -> {headline}")
    return 0


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, _ = _load_model(cfg)
    protocol, records = _protocol_records(cfg, model)
    report_dir = _resolve_report_dir(cfg, Path("reports"))
    report_dir.mkdir(parents=True, exist_ok=True)
    metric_name = protocol.metric

    if args.kind == "alpha":
        alphas = [float(a) for a in args.alphas.split(",")]
        gallery, probe = evalkit.apply_protocol(protocol, records)
        rows = evalkit.alpha_sweep(gallery, probe, protocol, alphas)
        report.write_csv(report_dir / "alpha_sweep.csv", rows)
        report.save_alpha_sweep_plot(report_dir / "alpha_sweep.png", rows, metric_name)
    else:
        fractions = [float(x) for x in args.fractions.split(",")]
        clips = _load_clips(cfg)
        test = set(protocol.test_subjects)
        clips = [c for c in clips if c.subject_id in test]
        rows = evalkit.duration_sweep(model, protocol, clips, fractions, cfg.alpha)
        report.write_csv(report_dir / "duration_sweep.csv", rows)
        report.save_duration_sweep_plot(report_dir / "duration_sweep.png", rows, metric_name)
    _write_run_record(report_dir, "sweep", cfg)
    print(f"{args.kind} sweep -> {report_dir}")
    return 0


def cmd_decode_viz(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, _ = _load_model(cfg)
    clips = {c.source_id: c for c in _load_clips(cfg)}
    for source_id in (args.clip_a, args.clip_b):
        if source_id not in clips:
            raise ConfigError([f"clip {source_id!r} not found in archive"])
    clip_a, clip_b = clips[args.clip_a], clips[args.clip_b]
    step_a = max(1, len(clip_a) // args.frames)
    step_b = max(1, len(clip_b) // args.frames)
    frames_a = clip_a.frames[::step_a][: args.frames]
    frames_b = clip_b.frames[::step_b][: args.frames]

    feats_a = nets.encode_frames(model, frames_a)
    feats_b = nets.encode_frames(model, frames_b)
    zeros_a = np.zeros_like(feats_a.f_a)
    zeros_c = np.zeros_like(feats_a.f_c)
    zeros_p = np.zeros_like(feats_a.f_p)

    # per-feature synthesis: zero out the other two feature slices
    appearance_only = nets.decode_features(model, feats_a.f_a, zeros_c, zeros_p)
    canonical_only = nets.decode_features(model, zeros_a, feats_a.f_c, zeros_p)
    pose_only = nets.decode_features(model, zeros_a, zeros_c, feats_a.f_p)
    full = nets.decode_features(model, feats_a.f_a, feats_a.f_c, feats_a.f_p)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        [frames_a[i], appearance_only[i], canonical_only[i], pose_only[i], full[i]]
        for i in range(len(frames_a))
    ]
    report.save_image_grid(out_dir / "feature_grid.png", rows)

    # cross grid: static features of clip A rows x pose features of clip B cols
    cross_rows = []
    for i in range(len(frames_a)):
        row = []
        for j in range(len(frames_b)):
            cell = nets.decode_features(
                model, feats_a.f_a[i], feats_a.f_c[i], feats_b.f_p[j]
            )[0]
            row.append(cell)
        cross_rows.append(row)
    report.save_image_grid(out_dir / "cross_grid.png", cross_rows)

    report_dir = _resolve_report_dir(cfg, out_dir)
    _write_run_record(report_dir, "decode-viz", cfg)
    print(f"decode-viz grids -> {out_dir}")
    return 0


def _add_common(parser: argparse.ArgumentParser, *, train_flags: bool = False) -> None:
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--report-dir", default=None, help=f"overrides ${REPORT_DIR_ENV}")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible numerics")
    if train_flags:
        parser.add_argument("--iters", type=int, default=None)
        parser.add_argument("--large-model", action="store_true")
        parser.add_argument("--clips-per-batch", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitdis", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="preprocess manifest media into a clip archive")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--archive", required=True, help="output archive directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=24)
    p.add_argument("--conditions", type=int, default=2)
    p.add_argument("--clips", type=int, default=2)
    p.add_argument("--train-subjects", type=int, default=None, help="size of the protocol train split")
    p.add_argument("--view", type=float, default=90.0)
    p.add_argument("--frames-min", type=int, default=34)
    p.add_argument("--frames-max", type=int, default=44)
    p.add_argument("--export-frames", action="store_true", help="also write PNG frames + masks")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on an archive")
    _add_common(p, train_flags=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--protocol", default=None, help="restrict to protocol train subjects")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract gait signatures for every archive clip")
    _add_common(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a protocol")
    _add_common(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="alpha or duration sweeps with figures")
    _add_common(p)
    p.add_argument("--kind", choices=("alpha", "duration"), required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--alphas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--fractions", default="0.1,0.25,0.5,0.75,1.0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("decode-viz", help="decoder feature-synthesis image grids")
    _add_common(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip-a", required=True)
    p.add_argument("--clip-b", required=True)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode_viz)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        cfg = _merge_flags(cfg, args)
        cfg.validate()
        _apply_determinism(cfg)
        return args.func(cfg, args)
    except GaitdisError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            record["violations"] = exc.violations
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
