"""Gallery/probe protocols and biometric metrics.

Protocols partition a labeled corpus into disjoint train/test subject sets and
select gallery and probe clips by (subject, condition, view, video_index)
predicates. Metrics operate on a gallery x probe score matrix: Rank-1 / CMC
identification, TAR at fixed FAR verification, plus duration and fusion-weight
sweeps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .clip_store import Clip
from .engine import ScoreNormalizer, SignatureRecord, extract_signatures
from .errors import InvalidInputError, ProtocolError

PROTOCOL_SCHEMA_VERSION = 1


@dataclass
class Selector:
    """Predicate over clip labels; None fields match anything."""

    conditions: list[str] | None = None
    views: list[float] | None = None
    exclude_views: list[float] | None = None
    video_indices: list[int] | None = None

    def matches(self, record) -> bool:
        if self.conditions is not None and record.condition_id not in self.conditions:
            return False
        if self.views is not None and record.view_deg not in self.views:
            return False
        if self.exclude_views is not None and record.view_deg in self.exclude_views:
            return False
        if self.video_indices is not None and record.video_index not in self.video_indices:
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "conditions": self.conditions,
            "views": self.views,
            "exclude_views": self.exclude_views,
            "video_indices": self.video_indices,
        }


def _selectors_from_json(raw) -> list[Selector]:
    rows = raw if isinstance(raw, list) else [raw]
    return [
        Selector(
            conditions=r.get("conditions"),
            views=r.get("views"),
            exclude_views=r.get("exclude_views"),
            video_indices=r.get("video_indices"),
        )
        for r in rows
    ]


@dataclass
class ProtocolSpec:
    """A named evaluation protocol.

    `gallery` / `probe` are unions of selectors applied to test-subject clips.
    `exclude_identical_view` computes the metric per probe view against
    gallery entries from other views only, then averages. `view_pairs`
    restricts evaluation to explicit (probe_view, gallery_view) combinations.
    """

    name: str
    train_subjects: list[str]
    test_subjects: list[str]
    gallery: list[Selector]
    probe: list[Selector]
    metric: str = "rank1"
    far_points: list[float] = field(default_factory=lambda: [0.01, 0.05])
    exclude_identical_view: bool = False
    view_pairs: list[tuple[float, float]] | None = None
    gallery_aggregate: str = "max"
    notes: str = ""

    def validate(self) -> None:
        overlap = set(self.train_subjects) & set(self.test_subjects)
        if overlap:
            raise ProtocolError(f"train/test subject sets overlap: {sorted(overlap)[:5]}")
        if self.metric not in ("rank1", "tar_at_far"):
            raise ProtocolError(f"unknown metric {self.metric!r}")
        if self.gallery_aggregate not in ("max", "mean"):
            raise ProtocolError(f"unknown gallery aggregate {self.gallery_aggregate!r}")

    @classmethod
    def from_json(cls, path: str | Path) -> "ProtocolSpec":
        with open(path) as f:
            raw = json.load(f)
        version = raw.get("schema_version")
        if version != PROTOCOL_SCHEMA_VERSION:
            raise ProtocolError(f"protocol schema version {version!r} not supported")
        spec = cls(
            name=raw["name"],
            train_subjects=[str(s) for s in raw["train_subjects"]],
            test_subjects=[str(s) for s in raw["test_subjects"]],
            gallery=_selectors_from_json(raw["gallery"]),
            probe=_selectors_from_json(raw["probe"]),
            metric=raw.get("metric", "rank1"),
            far_points=raw.get("far_points", [0.01, 0.05]),
            exclude_identical_view=raw.get("exclude_identical_view", False),
            view_pairs=[tuple(p) for p in raw["view_pairs"]] if raw.get("view_pairs") else None,
            gallery_aggregate=raw.get("gallery_aggregate", "max"),
            notes=raw.get("notes", ""),
        )
        spec.validate()
        return spec

    def to_json(self, path: str | Path) -> None:
        raw = {
            "schema_version": PROTOCOL_SCHEMA_VERSION,
            "name": self.name,
            "train_subjects": self.train_subjects,
            "test_subjects": self.test_subjects,
            "gallery": [s.to_dict() for s in self.gallery],
            "probe": [s.to_dict() for s in self.probe],
            "metric": self.metric,
            "far_points": self.far_points,
            "exclude_identical_view": self.exclude_identical_view,
            "view_pairs": [list(p) for p in self.view_pairs] if self.view_pairs else None,
            "gallery_aggregate": self.gallery_aggregate,
            "notes": self.notes,
        }
        with open(path, "w") as f:
            json.dump(raw, f, indent=2, sort_keys=True)
            f.write("\n")


def shipped_protocol_path(name: str) -> Path:
    """Path of a protocol spec bundled with the package."""
    return Path(__file__).parent / "protocols" / f"{name}.json"


def load_protocol(name_or_path: str | Path) -> ProtocolSpec:
    path = Path(name_or_path)
    if not path.exists():
        candidate = shipped_protocol_path(str(name_or_path))
        if candidate.exists():
            path = candidate
        else:
            raise ProtocolError(f"protocol spec not found: {name_or_path}")
    return ProtocolSpec.from_json(path)


def _matches_any(selectors: list[Selector], record) -> bool:
    return any(sel.matches(record) for sel in selectors)


def split_train_records(protocol: ProtocolSpec, records: list) -> list:
    train = set(protocol.train_subjects)
    return [r for r in records if r.subject_id in train]


def apply_protocol(protocol: ProtocolSpec, records: list) -> tuple[list, list]:
    """Partition test-subject records into (gallery, probe) lists."""
    protocol.validate()
    test = set(protocol.test_subjects)
    test_records = [r for r in records if r.subject_id in test]
    gallery = [r for r in test_records if _matches_any(protocol.gallery, r)]
    probe = [r for r in test_records if _matches_any(protocol.probe, r)]
    if not gallery or not probe:
        raise ProtocolError(
            f"protocol {protocol.name!r} selected {len(gallery)} gallery and "
            f"{len(probe)} probe clips; both must be non-empty"
        )
    return gallery, probe


@dataclass
class ScoreMatrix:
    """|gallery| x |probe| similarity table with labels."""

    scores: np.ndarray
    gallery_labels: list[str]
    probe_labels: list[str]
    channel: str = "fused"
    excluded: list[tuple[str, str]] = field(default_factory=list)

    def validate(self) -> None:
        g, p = self.scores.shape
        if len(self.gallery_labels) != g or len(self.probe_labels) != p:
            raise InvalidInputError("score matrix labels do not match its dimensions")
        if not np.isfinite(self.scores).all():
            raise InvalidInputError("score matrix contains non-finite entries")


def build_score_matrix(
    gallery: list[SignatureRecord],
    probe: list[SignatureRecord],
    alpha: float = 0.5,
    channel: str = "fused",
) -> ScoreMatrix:
    """Score every gallery/probe pair with the min-max fused cosine rule.

    Zero-norm signatures cannot enter cosine similarity; they are excluded
    from the matrix and reported in `excluded` rather than silently dropped.
    `channel` picks "static", "dynamic", or the alpha-weighted "fused" sum.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must be in [0,1], got {alpha}")
    if channel not in ("fused", "static", "dynamic"):
        raise InvalidInputError(f"unknown channel {channel!r}")
    if not gallery or not probe:
        raise InvalidInputError("gallery and probe must be non-empty")

    excluded = []

    def usable(records, side):
        kept = []
        for r in records:
            if np.linalg.norm(r.signature.f_sta) == 0 or np.linalg.norm(r.signature.f_dyn) == 0:
                excluded.append((side, r.source_id))
            else:
                kept.append(r)
        return kept

    gallery = usable(gallery, "gallery")
    probe = usable(probe, "probe")
    if not gallery or not probe:
        raise InvalidInputError("all signatures on one side were zero-norm")

    g_sta = np.stack([r.signature.f_sta for r in gallery]).astype(np.float64)
    p_sta = np.stack([r.signature.f_sta for r in probe]).astype(np.float64)
    g_dyn = np.stack([r.signature.f_dyn for r in gallery]).astype(np.float64)
    p_dyn = np.stack([r.signature.f_dyn for r in probe]).astype(np.float64)

    def cos_matrix(a, b):
        a = a / np.linalg.norm(a, axis=1, keepdims=True)
        b = b / np.linalg.norm(b, axis=1, keepdims=True)
        return a @ b.T

    raw_sta = cos_matrix(g_sta, p_sta)
    raw_dyn = cos_matrix(g_dyn, p_dyn)
    normalizer = ScoreNormalizer.fit(raw_sta, raw_dyn)
    mm_sta = normalizer.normalize(raw_sta, "static")
    mm_dyn = normalizer.normalize(raw_dyn, "dynamic")
    if channel == "static":
        scores = mm_sta
    elif channel == "dynamic":
        scores = mm_dyn
    else:
        scores = (1.0 - alpha) * mm_sta + alpha * mm_dyn

    matrix = ScoreMatrix(
        scores=scores,
        gallery_labels=[r.subject_id for r in gallery],
        probe_labels=[r.subject_id for r in probe],
        channel=channel,
        excluded=excluded,
    )
    matrix.validate()
    return matrix


@dataclass
class Rank1Result:
    accuracy: float
    tie_count: int


def rank1_details(matrix: ScoreMatrix) -> Rank1Result:
    """Rank-1 identification with deterministic tie handling.

    The top gallery entry per probe is the maximum score; ties go to the
    smallest gallery index and are counted in the result.
    """
    matrix.validate()
    gallery_subjects = set(matrix.gallery_labels)
    missing = [s for s in set(matrix.probe_labels) if s not in gallery_subjects]
    if missing:
        raise ProtocolError(f"probe subject(s) absent from gallery: {sorted(missing)}")
    scores = matrix.scores
    hits = 0
    ties = 0
    for j, probe_subject in enumerate(matrix.probe_labels):
        col = scores[:, j]
        top = col.max()
        top_indices = np.flatnonzero(col == top)
        if top_indices.size > 1:
            ties += 1
        if matrix.gallery_labels[int(top_indices[0])] == probe_subject:
            hits += 1
    return Rank1Result(accuracy=hits / len(matrix.probe_labels), tie_count=ties)


def rank1(matrix: ScoreMatrix) -> float:
    """Fraction of probes whose best-scoring gallery entry shares the subject."""
    return rank1_details(matrix).accuracy


def cmc(matrix: ScoreMatrix, max_rank: int, aggregate: str = "max") -> np.ndarray:
    """Cumulative match curve over subject-level scores.

    A subject's score against a probe aggregates its gallery clips with `max`
    (default) or `mean`. Entry r of the result is the fraction of probes whose
    true subject ranks within the top r+1.
    """
    matrix.validate()
    subjects = sorted(set(matrix.gallery_labels))
    missing = [s for s in set(matrix.probe_labels) if s not in subjects]
    if missing:
        raise ProtocolError(f"probe subject(s) absent from gallery: {sorted(missing)}")
    gal = np.asarray(matrix.gallery_labels)
    agg_fn = np.max if aggregate == "max" else np.mean
    per_subject = np.stack(
        [agg_fn(matrix.scores[gal == s], axis=0) for s in subjects]
    )  # (n_subjects, n_probes)
    max_rank = min(max_rank, len(subjects))
    curve = np.zeros(max_rank, dtype=np.float64)
    for j, probe_subject in enumerate(matrix.probe_labels):
        col = per_subject[:, j]
        true_idx = subjects.index(probe_subject)
        # rank = 1 + number of strictly better subjects (ties favor the probe:
        # equal scores at smaller index count only if they sort earlier)
        better = np.sum(col > col[true_idx])
        equal_before = np.sum(col[:true_idx] == col[true_idx])
        rank = int(better + equal_before)
        if rank < max_rank:
            curve[rank:] += 1
    return curve / len(matrix.probe_labels)


def tar_at_far(matrix: ScoreMatrix, far_points: list[float]) -> list[float]:
    """Exact empirical TAR at each FAR target, no interpolation.

    Genuine pairs share the subject label; impostors do not. For each target,
    the threshold is the smallest observed score whose empirical FAR is <= the
    target (conservative); TAR is the fraction of genuine scores >= threshold.
    If no observed score qualifies, TAR is 0.
    """
    matrix.validate()
    gal = np.asarray(matrix.gallery_labels)
    prb = np.asarray(matrix.probe_labels)
    genuine_mask = gal[:, None] == prb[None, :]
    genuine = np.sort(matrix.scores[genuine_mask])
    impostor = np.sort(matrix.scores[~genuine_mask])
    if genuine.size == 0:
        raise ProtocolError("no genuine pairs in score matrix")
    if impostor.size == 0:
        raise ProtocolError("no impostor pairs in score matrix; FAR undefined")

    candidates = np.unique(matrix.scores)
    # count of impostors >= threshold, via searchsorted on the sorted array
    far = (impostor.size - np.searchsorted(impostor, candidates, side="left")) / impostor.size
    tars = []
    for target in far_points:
        ok = np.flatnonzero(far <= target)
        if ok.size == 0:
            tars.append(0.0)
            continue
        threshold = candidates[ok[0]]
        tar = (genuine.size - np.searchsorted(genuine, threshold, side="left")) / genuine.size
        tars.append(float(tar))
    return tars


def _metric_value(matrix: ScoreMatrix, protocol: ProtocolSpec) -> dict:
    if protocol.metric == "rank1":
        detail = rank1_details(matrix)
        return {"rank1": detail.accuracy, "tie_count": detail.tie_count}
    tars = tar_at_far(matrix, protocol.far_points)
    return {"tar_at_far": {str(fp): tar for fp, tar in zip(protocol.far_points, tars)}}


def evaluate_protocol(
    protocol: ProtocolSpec,
    records: list[SignatureRecord],
    alpha: float = 0.5,
    channel: str = "fused",
) -> dict:
    """Apply a protocol to signature records and compute its metric.

    Returns a JSON-ready dict with the headline metric plus gallery/probe
    sizes. With `exclude_identical_view` or `view_pairs`, per-view results are
    included and the headline value is their mean.
    """
    gallery, probe = apply_protocol(protocol, records)

    if protocol.view_pairs:
        per_pair = {}
        values = []
        for probe_view, gallery_view in protocol.view_pairs:
            g = [r for r in gallery if r.view_deg == gallery_view]
            p = [r for r in probe if r.view_deg == probe_view]
            if not g or not p:
                raise ProtocolError(
                    f"view pair ({probe_view}, {gallery_view}) has no clips under "
                    f"protocol {protocol.name!r}"
                )
            result = _metric_value(build_score_matrix(g, p, alpha, channel), protocol)
            per_pair[f"{probe_view}-{gallery_view}"] = result
            values.append(_headline(result))
        summary = {"mean": float(np.mean(values)), "per_view_pair": per_pair}
    elif protocol.exclude_identical_view:
        probe_views = sorted({r.view_deg for r in probe})
        per_view = {}
        values = []
        for view in probe_views:
            g = [r for r in gallery if r.view_deg != view]
            p = [r for r in probe if r.view_deg == view]
            if not g:
                raise ProtocolError(f"no gallery clips outside probe view {view}")
            result = _metric_value(build_score_matrix(g, p, alpha, channel), protocol)
            per_view[str(view)] = result
            values.append(_headline(result))
        summary = {"mean": float(np.mean(values)), "per_view": per_view}
    else:
        summary = _metric_value(build_score_matrix(gallery, probe, alpha, channel), protocol)

    summary.update(
        {
            "protocol": protocol.name,
            "metric": protocol.metric,
            "channel": channel,
            "alpha": alpha,
            "n_gallery": len(gallery),
            "n_probe": len(probe),
        }
    )
    return summary


def _headline(result: dict) -> float:
    if "rank1" in result:
        return result["rank1"]
    return float(np.mean(list(result["tar_at_far"].values())))


def full_metrics(matrix: ScoreMatrix, far_points: list[float], max_rank: int = 10) -> dict:
    """Rank-1, CMC, and TAR@FAR on one matrix; entries that are undefined for
    the matrix at hand (e.g. no impostor pairs) come back as None."""
    out: dict = {}
    try:
        detail = rank1_details(matrix)
        out["rank1"] = detail.accuracy
        out["tie_count"] = detail.tie_count
        out["cmc"] = [float(v) for v in cmc(matrix, max_rank)]
    except ProtocolError as exc:
        out["rank1"] = None
        out["rank1_error"] = str(exc)
    try:
        tars = tar_at_far(matrix, far_points)
        out["tar_at_far"] = {str(fp): t for fp, t in zip(far_points, tars)}
    except ProtocolError as exc:
        out["tar_at_far"] = None
        out["tar_error"] = str(exc)
    return out


def truncate_clip(clip: Clip, fraction: float) -> Clip:
    """Keep the leading fraction of frames, clamped to at least one frame."""
    n = max(1, int(np.floor(len(clip) * fraction)))
    return replace(clip, frames=clip.frames[:n])


def duration_sweep(
    model,
    protocol: ProtocolSpec,
    clips: list[Clip],
    fractions: list[float],
    alpha: float = 0.5,
) -> list[dict]:
    """Metric versus probe duration: probes truncated to each leading fraction.

    Gallery clips keep their full length. Each row carries the fused metric
    plus single-channel values and the probe frame-count statistics.
    """
    records = extract_signatures(model, clips)
    by_source = {c.source_id: c for c in clips}
    gallery, probe = apply_protocol(protocol, records)

    rows = []
    for fraction in fractions:
        if not 0 < fraction <= 1:
            raise InvalidInputError(f"fractions must be in (0,1], got {fraction}")
        truncated = [truncate_clip(by_source[r.source_id], fraction) for r in probe]
        probe_records = extract_signatures(model, truncated)
        frame_counts = [len(c) for c in truncated]
        row = {
            "fraction": fraction,
            "min_frames": int(min(frame_counts)),
            "median_frames": float(np.median(frame_counts)),
        }
        for channel in ("fused", "static", "dynamic"):
            matrix = build_score_matrix(gallery, probe_records, alpha, channel)
            row[channel] = _headline(_metric_value(matrix, protocol))
        rows.append(row)
    return rows


def alpha_sweep(
    gallery: list[SignatureRecord],
    probe: list[SignatureRecord],
    protocol: ProtocolSpec,
    alphas: list[float],
) -> list[dict]:
    """Metric versus fusion weight over a grid of alpha values."""
    rows = []
    for alpha in alphas:
        matrix = build_score_matrix(gallery, probe, alpha, "fused")
        rows.append({"alpha": alpha, "value": _headline(_metric_value(matrix, protocol))})
    return rows
