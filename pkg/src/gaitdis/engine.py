"""Batch composition, the training loop, and inference.

Training samples same-subject clip pairs across different conditions, crops a
contiguous window from each, and jointly optimizes the encoder, decoder, LSTM,
and both classifiers with Adam under a step-decayed learning rate. Inference
reduces a clip to a static signature (mean canonical feature) and a dynamic
signature (mean LSTM output over pose features); gallery/probe matching fuses
min-max normalized cosine scores of the two channels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import losses, nets
from .clip_store import Clip
from .containers import read_container, write_container
from .errors import ConfigError, InvalidInputError, NumericFaultError, UndefinedCosineError
from .losses import LossComponents, LossWeights


@dataclass
class TrainConfig:
    """Optimizer schedule and batching knobs; defaults follow the reference
    recipe (Adam at 1e-4 with 0.9 momentum, 1e-3 weight decay, x0.9 decay
    every 500 iterations, 20-frame crops, 16-clip batches, unit loss weights).
    """

    lr: float = 1e-4
    momentum_beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-3
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 500
    clip_len: int = 20
    clips_per_batch: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    large_model: bool = False
    seed: int = 0
    max_iterations: int = 1000

    def validate(self) -> None:
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum_beta1 < 1:
            problems.append(f"momentum_beta1 must be in [0,1), got {self.momentum_beta1}")
        if not 0 <= self.beta2 < 1:
            problems.append(f"beta2 must be in [0,1), got {self.beta2}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay_factor <= 1:
            problems.append(f"lr_decay_factor must be in (0,1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            problems.append(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.clip_len < 1:
            problems.append(f"clip_len must be >= 1, got {self.clip_len}")
        if self.clips_per_batch < 2 or self.clips_per_batch % 2:
            problems.append(f"clips_per_batch must be even and >= 2, got {self.clips_per_batch}")
        if self.max_iterations < 0:
            problems.append(f"max_iterations must be >= 0, got {self.max_iterations}")
        try:
            self.weights.validate()
        except InvalidInputError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict, validate: bool = True) -> "TrainConfig":
        raw = dict(raw)
        if "weights" in raw and isinstance(raw["weights"], dict):
            raw["weights"] = LossWeights(**raw["weights"])
        cfg = cls(**raw)
        if validate:
            cfg.validate()
        return cfg


@dataclass
class GaitSignature:
    """Per-clip matching features: static 128-d and dynamic 256-d vectors."""

    f_sta: np.ndarray
    f_dyn: np.ndarray
    n_frames_used: int


@dataclass
class SignatureRecord:
    """A signature plus the clip labels needed by evaluation protocols."""

    source_id: str
    subject_id: str
    condition_id: str
    view_deg: float
    video_index: int
    signature: GaitSignature


@dataclass
class ClipWindow:
    clip_index: int
    start: int
    t1: int
    t2: int


@dataclass
class BatchPairing:
    """Same-subject, cross-condition clip pairs with sampled frame windows."""

    pairs: list[tuple[ClipWindow, ClipWindow]]


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Step-decayed learning rate at a 0-based iteration."""
    return config.lr * config.lr_decay_factor ** (iteration // config.lr_decay_every)


def _eligible_by_subject(clips: list[Clip], clip_len: int) -> dict[str, dict[str, list[int]]]:
    by_subject: dict[str, dict[str, list[int]]] = {}
    for idx, clip in enumerate(clips):
        if len(clip) < clip_len:
            continue  # shorter videos are discarded for training
        by_subject.setdefault(clip.subject_id, {}).setdefault(clip.condition_id, []).append(idx)
    return {s: conds for s, conds in by_subject.items() if len(conds) >= 2}


def compose_batch(
    clips: list[Clip], config: TrainConfig, rng: np.random.Generator
) -> BatchPairing:
    """Sample clips_per_batch clips as same-subject cross-condition pairs.

    Every sampled subject contributes one clip from each of two distinct
    conditions; each clip contributes a random contiguous clip_len window and
    two distinct frame indices for the cross reconstruction term.
    """
    eligible = _eligible_by_subject(clips, config.clip_len)
    if not eligible:
        raise ConfigError(
            [
                "no subject has clips in >= 2 conditions with length >= "
                f"{config.clip_len}; training pairs cannot be formed"
            ]
        )
    subjects = sorted(eligible)
    n_pairs = config.clips_per_batch // 2
    if len(subjects) >= n_pairs:
        chosen = [subjects[i] for i in rng.permutation(len(subjects))[:n_pairs]]
    else:
        chosen = [subjects[i] for i in rng.integers(0, len(subjects), size=n_pairs)]

    pairs = []
    for subject in chosen:
        conds = sorted(eligible[subject])
        ci = rng.permutation(len(conds))[:2]
        windows = []
        for c in (conds[ci[0]], conds[ci[1]]):
            indices = eligible[subject][c]
            clip_idx = int(indices[rng.integers(0, len(indices))])
            n = len(clips[clip_idx])
            start = int(rng.integers(0, n - config.clip_len + 1))
            if config.clip_len >= 2:
                t_pair = rng.permutation(config.clip_len)[:2]
                t1, t2 = int(t_pair[0]), int(t_pair[1])
            else:
                t1 = t2 = 0
            windows.append(ClipWindow(clip_index=clip_idx, start=start, t1=t1, t2=t2))
        pairs.append((windows[0], windows[1]))
    return BatchPairing(pairs=pairs)


@dataclass
class LossReport:
    iteration: int
    lr: float
    xrecon: float
    pose_sim: float
    cano_cons: float
    id_inc_avg: float
    total: float

    def as_row(self) -> dict:
        return asdict(self)


def make_optimizer(model: nets.GaitModel, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=config.lr,
        betas=(config.momentum_beta1, config.beta2),
        weight_decay=config.weight_decay,
    )


def train_step(
    model: nets.GaitModel,
    clips: list[Clip],
    batch: BatchPairing,
    subject_to_label: dict[str, int],
    optimizer: torch.optim.Adam,
    config: TrainConfig,
    iteration: int,
) -> LossReport:
    """One joint Adam update on the combined objective over a composed batch."""
    lr = lr_at(config, iteration)
    for group in optimizer.param_groups:
        group["lr"] = lr

    model.train()
    device = next(model.parameters()).device
    T = config.clip_len
    n_clips = 2 * len(batch.pairs)

    windows = [w for pair in batch.pairs for w in pair]
    frames = np.stack(
        [clips[w.clip_index].frames[w.start : w.start + T] for w in windows]
    )  # (n_clips, T, 64, 32, 3)
    x = torch.from_numpy(frames).permute(0, 1, 4, 2, 3).to(device)  # (n_clips, T, 3, H, W)
    labels = torch.tensor(
        [subject_to_label[clips[w.clip_index].subject_id] for w in windows],
        dtype=torch.long,
        device=device,
    )

    optimizer.zero_grad()
    feat = model.encoder(x.reshape(n_clips * T, 3, 64, 32)).view(n_clips, T, nets.FEATURE_DIM)
    f_a, f_c, f_p = nets.split_features(feat)

    # cross reconstruction on the sampled (t1, t2) of every clip
    idx = torch.arange(n_clips)
    t1 = torch.tensor([w.t1 for w in windows])
    t2 = torch.tensor([w.t2 for w in windows])
    feats_t1 = (f_a[idx, t1], f_c[idx, t1], f_p[idx, t1])
    feats_t2 = (f_a[idx, t2], f_c[idx, t2], f_p[idx, t2])
    loss_xr = losses.cross_recon_loss(feats_t1, feats_t2, x[idx, t1], x[idx, t2], model.decoder)

    # pair terms: clip 0/1 of each pair are conditions c1/c2 of one subject
    even = torch.arange(0, n_clips, 2)
    odd = even + 1
    fp_c1 = f_p[even].permute(1, 0, 2)  # (T, P, 64)
    fp_c2 = f_p[odd].permute(1, 0, 2)
    loss_ps = losses.pose_sim_loss(fp_c1, fp_c2)

    fc_c1 = f_c[even].permute(1, 0, 2)
    fc_c2 = f_c[odd].permute(1, 0, 2)
    loss_cc = 0.5 * (
        losses.cano_cons_loss(fc_c1, fc_c2, labels[even], model.classifier_sg)
        + losses.cano_cons_loss(fc_c2, fc_c1, labels[odd], model.classifier_sg)
    )

    h = model.lstm_outputs(f_p.permute(1, 0, 2))  # (T, n_clips, 256)
    loss_id = losses.id_inc_avg_loss(h, labels, model.classifier_dg)

    components = LossComponents(
        id_inc_avg=loss_id, xrecon=loss_xr, pose_sim=loss_ps, cano_cons=loss_cc
    )
    total = losses.total_loss(components, config.weights)
    if not torch.isfinite(total):
        parts = {
            "xrecon": loss_xr.item(),
            "pose_sim": loss_ps.item(),
            "cano_cons": loss_cc.item(),
            "id_inc_avg": loss_id.item(),
        }
        bad = [k for k, v in parts.items() if not np.isfinite(v)]
        raise NumericFaultError(f"non-finite loss from component(s): {', '.join(bad) or 'total'}")
    total.backward()
    optimizer.step()

    return LossReport(
        iteration=iteration,
        lr=lr,
        xrecon=loss_xr.item(),
        pose_sim=loss_ps.item(),
        cano_cons=loss_cc.item(),
        id_inc_avg=loss_id.item(),
        total=total.item(),
    )


@dataclass
class TrainResult:
    model: nets.GaitModel
    subjects: list[str]
    log: list[LossReport]


def train(
    clips: list[Clip],
    config: TrainConfig,
    progress: bool = False,
) -> TrainResult:
    """Train a fresh model on `clips` for config.max_iterations steps."""
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    subjects = sorted({c.subject_id for c in clips})
    subject_to_label = {s: i for i, s in enumerate(subjects)}
    model = nets.init_weights(
        nets.GaitModel(n_train_subjects=len(subjects), large_model=config.large_model),
        seed=config.seed,
    )
    optimizer = make_optimizer(model, config)

    log: list[LossReport] = []
    for iteration in range(config.max_iterations):
        batch = compose_batch(clips, config, rng)
        report = train_step(model, clips, batch, subject_to_label, optimizer, config, iteration)
        log.append(report)
        if progress and (iteration % 50 == 0 or iteration == config.max_iterations - 1):
            print(
                f"iter {report.iteration:5d} lr {report.lr:.2e} total {report.total:.4f} "
                f"(xr {report.xrecon:.4f} ps {report.pose_sim:.4f} "
                f"cc {report.cano_cons:.4f} id {report.id_inc_avg:.4f})",
                flush=True,
            )
    model.eval()
    return TrainResult(model=model, subjects=subjects, log=log)


def _halving_sum(rows: np.ndarray) -> np.ndarray:
    # split-at-half summation: summing a clip concatenated with itself yields
    # exactly twice the clip's sum, so the mean is idempotent under duplication
    n = rows.shape[0]
    if n == 1:
        return rows[0].copy()
    half = n // 2
    return _halving_sum(rows[:half]) + _halving_sum(rows[half:])


def extract_signature(model: nets.GaitModel, clip: Clip) -> GaitSignature:
    """Reduce a clip to its static and dynamic gait signatures.

    Static is the mean canonical feature over all frames; dynamic is the mean
    LSTM output over the pose-feature sequence. Uses full clips in evaluation
    mode, so extraction is deterministic.
    """
    if len(clip) < 1:
        raise InvalidInputError("cannot extract a signature from an empty clip")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            param = next(model.parameters())
            x = torch.from_numpy(clip.frames).permute(0, 3, 1, 2).to(param.dtype)
            # encode one frame at a time: per-frame features then do not depend
            # on the clip length (conv kernels vary with batch size), which the
            # duplication-idempotence contract for f_sta requires
            feat = torch.cat([model.encoder(x[t : t + 1]) for t in range(len(clip))])
            _, f_c, f_p = nets.split_features(feat)
            h = model.lstm_outputs(f_p.unsqueeze(1)).squeeze(1)  # (T, 256)
            f_sta = (_halving_sum(f_c.numpy().astype(np.float64)) / len(clip)).astype(np.float32)
            f_dyn = (_halving_sum(h.numpy().astype(np.float64)) / len(clip)).astype(np.float32)
    finally:
        model.train(was_training)
    return GaitSignature(f_sta=f_sta, f_dyn=f_dyn, n_frames_used=len(clip))


def extract_signatures(model: nets.GaitModel, clips: list[Clip]) -> list[SignatureRecord]:
    return [
        SignatureRecord(
            source_id=c.source_id,
            subject_id=c.subject_id,
            condition_id=c.condition_id,
            view_deg=c.view_deg,
            video_index=c.video_index,
            signature=extract_signature(model, c),
        )
        for c in clips
    ]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero-norm inputs are an error, never silently 0."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise UndefinedCosineError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)) / (nu * nv))


@dataclass
class ScoreNormalizer:
    """Per-channel min-max rescaling fitted on full raw score matrices.

    Fitting over the entire gallery x probe matrix keeps identification
    rankings intact; a constant matrix maps to 0.5 everywhere (with a warning
    at fit time).
    """

    sta_min: float
    sta_max: float
    dyn_min: float
    dyn_max: float

    @classmethod
    def fit(cls, raw_static: np.ndarray, raw_dynamic: np.ndarray) -> "ScoreNormalizer":
        for name, mat in (("static", raw_static), ("dynamic", raw_dynamic)):
            if float(np.min(mat)) == float(np.max(mat)):
                warnings.warn(
                    f"{name} score matrix is constant; min-max maps it to 0.5", stacklevel=2
                )
        return cls(
            sta_min=float(np.min(raw_static)),
            sta_max=float(np.max(raw_static)),
            dyn_min=float(np.min(raw_dynamic)),
            dyn_max=float(np.max(raw_dynamic)),
        )

    def normalize(self, raw, channel: str):
        lo, hi = {
            "static": (self.sta_min, self.sta_max),
            "dynamic": (self.dyn_min, self.dyn_max),
        }[channel]
        raw = np.asarray(raw, dtype=np.float64)
        if hi == lo:
            return np.full_like(raw, 0.5)
        return (raw - lo) / (hi - lo)


def match_score(
    gallery_sig: GaitSignature,
    probe_sig: GaitSignature,
    alpha: float,
    normalizer: ScoreNormalizer,
) -> float:
    """Fused similarity: (1-alpha) * static + alpha * dynamic, each channel a
    min-max normalized cosine score."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must be in [0,1], got {alpha}")
    s = normalizer.normalize(cosine(gallery_sig.f_sta, probe_sig.f_sta), "static")
    d = normalizer.normalize(cosine(gallery_sig.f_dyn, probe_sig.f_dyn), "dynamic")
    return float((1.0 - alpha) * s + alpha * d)


def save_signatures(path: str | Path, records: list[SignatureRecord]) -> None:
    """Persist per-clip signature records in the float container format."""
    meta = {
        "source_ids": [r.source_id for r in records],
        "subjects": [r.subject_id for r in records],
        "conditions": [r.condition_id for r in records],
        "views": [r.view_deg for r in records],
        "video_indices": [r.video_index for r in records],
        "n_frames_used": [r.signature.n_frames_used for r in records],
    }
    arrays = {
        "f_sta": np.stack([r.signature.f_sta for r in records]).astype(np.float32),
        "f_dyn": np.stack([r.signature.f_dyn for r in records]).astype(np.float32),
    }
    write_container(path, kind="signatures", meta=meta, arrays=arrays)


def load_signatures(path: str | Path) -> list[SignatureRecord]:
    meta, arrays = read_container(path, expected_kind="signatures")
    records = []
    for i, sid in enumerate(meta["source_ids"]):
        records.append(
            SignatureRecord(
                source_id=sid,
                subject_id=meta["subjects"][i],
                condition_id=meta["conditions"][i],
                view_deg=float(meta["views"][i]),
                video_index=int(meta["video_indices"][i]),
                signature=GaitSignature(
                    f_sta=arrays["f_sta"][i],
                    f_dyn=arrays["f_dyn"][i],
                    n_frames_used=int(meta["n_frames_used"][i]),
                ),
            )
        )
    return records
