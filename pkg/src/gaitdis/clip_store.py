"""Dataset ingestion, frame preprocessing, and the persisted clip archive.

A clip is an ordered stack of soft-masked RGB frames normalized to the fixed
64(H) x 32(W) geometry with values in [0, 1], tagged with subject / condition /
view labels. Preprocessing multiplies the [0,1] RGB by the per-pixel person
probability mask, crops a width:height = 1:2 box around the person (zero
padding outside the image), and bilinearly resizes to 64 x 32.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import read_container, write_container
from .errors import ArchiveCorruptError, ArchiveVersionError, IngestionError, InvalidBoxError

FRAME_HEIGHT = 64
FRAME_WIDTH = 32
ARCHIVE_VERSION = 1
INDEX_NAME = "index.json"

_SOURCE_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*$")
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class RawFrame:
    """One segmented frame before normalization.

    Attributes:
        rgb: H x W x 3 integer image (0..255).
        mask: H x W person probability in [0, 1], same spatial size as rgb.
        box: (center_x, center_y, height) of the person in pixels.
    """

    rgb: np.ndarray
    mask: np.ndarray
    box: tuple[float, float, float]

    def validate(self) -> None:
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise IngestionError(f"rgb must be HxWx3, got shape {self.rgb.shape}")
        if self.mask.shape != self.rgb.shape[:2]:
            raise IngestionError(
                f"mask shape {self.mask.shape} does not match rgb {self.rgb.shape[:2]}"
            )
        if np.nanmin(self.mask) < 0.0 or np.nanmax(self.mask) > 1.0:
            raise IngestionError("mask values must lie in [0, 1]")
        if not self.box[2] > 0:
            raise InvalidBoxError(f"box height must be > 0, got {self.box[2]}")


@dataclass
class Clip:
    """Ordered frames plus identity labels; the unit of training and matching.

    `frames` has shape (n, 64, 32, 3), float32 in [0, 1]. Labels are fixed at
    ingestion time. `video_index` is the 1-based ordinal of this clip within
    its (subject, condition, view) group, used by evaluation protocols.
    """

    frames: np.ndarray
    subject_id: str
    condition_id: str
    view_deg: float
    source_id: str
    video_index: int = 1

    def __post_init__(self):
        validate_frames(self.frames)

    def __len__(self) -> int:
        return self.frames.shape[0]


def validate_frames(frames: np.ndarray) -> None:
    """Check the frame-stack contract: shape (n,64,32,3), float32, [0,1]."""
    if frames.ndim != 4 or frames.shape[1:] != (FRAME_HEIGHT, FRAME_WIDTH, 3):
        raise IngestionError(
            f"frames must be (n, {FRAME_HEIGHT}, {FRAME_WIDTH}, 3), got {frames.shape}"
        )
    if frames.shape[0] < 1:
        raise IngestionError("clip must contain at least one frame")
    if frames.dtype != np.float32:
        raise IngestionError(f"frames must be float32, got {frames.dtype}")
    if not np.isfinite(frames).all():
        raise IngestionError("frames contain non-finite values")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise IngestionError("frame values must lie in [0, 1]")


@dataclass
class ManifestEntry:
    source_id: str
    frames_dir: str
    masks_dir: str
    subject: str
    condition: str
    view: float
    video_index: int | None = None


@dataclass
class Manifest:
    """Ingestion manifest: one entry per source video (a directory of frames)."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def validate(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            if not _SOURCE_ID_RE.match(entry.source_id):
                raise IngestionError(
                    f"source_id {entry.source_id!r} is not filename-safe "
                    "(use letters, digits, '_', '-', '.')"
                )
            if entry.source_id in seen:
                raise IngestionError(f"duplicate source_id {entry.source_id!r}")
            seen.add(entry.source_id)

    @classmethod
    def from_json(cls, path: str | Path) -> "Manifest":
        with open(path) as f:
            raw = json.load(f)
        entries = [
            ManifestEntry(
                source_id=e["source_id"],
                frames_dir=e["frames_dir"],
                masks_dir=e["masks_dir"],
                subject=str(e["subject"]),
                condition=str(e["condition"]),
                view=float(e["view"]),
                video_index=e.get("video_index"),
            )
            for e in raw
        ]
        manifest = cls(entries)
        manifest.validate()
        return manifest

    def to_json(self, path: str | Path) -> None:
        rows = []
        for e in self.entries:
            row = {
                "source_id": e.source_id,
                "frames_dir": e.frames_dir,
                "masks_dir": e.masks_dir,
                "subject": e.subject,
                "condition": e.condition,
                "view": e.view,
            }
            if e.video_index is not None:
                row["video_index"] = e.video_index
            rows.append(row)
        with open(path, "w") as f:
            json.dump(rows, f, indent=2, sort_keys=True)
            f.write("\n")


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize HxW[xC] array with half-pixel-center bilinear interpolation.

    Sample locations follow the corner-aligned=false convention:
    src = (dst + 0.5) * (src_size / out_size) - 0.5, clamped to the image.
    """
    img = np.asarray(img, dtype=np.float64)
    src_h, src_w = img.shape[:2]

    sy = np.clip((np.arange(out_h) + 0.5) * (src_h / out_h) - 0.5, 0.0, src_h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (src_w / out_w) - 0.5, 0.0, src_w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (sy - y0).reshape(-1, 1)
    wx = (sx - x0).reshape(1, -1)
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]

    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def preprocess_frame(raw: RawFrame) -> np.ndarray:
    """Normalize one RawFrame to a 64x32x3 float32 tensor in [0, 1].

    The crop window is width:height = 1:2 (width = box_height / 2) centered on
    the box, clamped to the image with zero padding outside. The mask is kept
    soft: output = resize(mask * rgb/255).

    Raises:
        InvalidBoxError: non-positive box height, or box entirely off-image.
        IngestionError: rgb/mask shape mismatch or out-of-range mask.
    """
    raw.validate()
    img_h, img_w = raw.mask.shape
    cx, cy, box_h = raw.box

    crop_w = max(1, _round_half_up(box_h / 2.0))
    crop_h = 2 * crop_w
    x0 = _round_half_up(cx - crop_w / 2.0)
    y0 = _round_half_up(cy - crop_h / 2.0)

    ix0, ix1 = max(x0, 0), min(x0 + crop_w, img_w)
    iy0, iy1 = max(y0, 0), min(y0 + crop_h, img_h)
    if ix0 >= ix1 or iy0 >= iy1:
        raise InvalidBoxError(f"crop window {(x0, y0, crop_w, crop_h)} lies entirely outside image")

    masked = (raw.rgb.astype(np.float64) / 255.0) * raw.mask.astype(np.float64)[..., None]
    padded = np.zeros((crop_h, crop_w, 3), dtype=np.float64)
    padded[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0] = masked[iy0:iy1, ix0:ix1]

    out = bilinear_resize(padded, FRAME_HEIGHT, FRAME_WIDTH)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class IngestReport:
    """Per-entry ingestion failures; successful clips are returned separately."""

    errors: list[tuple[str, str]] = field(default_factory=list)

    def ok(self) -> bool:
        return not self.errors


def _load_mask(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        mask = np.load(path).astype(np.float64)
    else:
        from PIL import Image

        mask = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return mask


def _box_from_mask(mask: np.ndarray, threshold: float = 0.5) -> tuple[float, float, float]:
    """Derive (center_x, center_y, height) from the mask support >= threshold."""
    ys, xs = np.nonzero(mask >= threshold)
    if ys.size == 0:
        raise InvalidBoxError(f"mask has no support at threshold {threshold}")
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, float(y1 - y0 + 1))


def _ingest_entry(entry: ManifestEntry) -> Clip:
    frames_dir = Path(entry.frames_dir)
    masks_dir = Path(entry.masks_dir)
    if not frames_dir.is_dir():
        raise IngestionError(f"frames_dir not found: {frames_dir}")
    if not masks_dir.is_dir():
        raise IngestionError(f"masks_dir not found: {masks_dir}")

    frame_paths = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not frame_paths:
        raise IngestionError(f"no frame images in {frames_dir}")

    from PIL import Image

    tensors = []
    for fp in frame_paths:
        mask_path = None
        for suffix in (".npy", ".png", ".jpg", ".bmp"):
            candidate = masks_dir / (fp.stem + suffix)
            if candidate.exists():
                mask_path = candidate
                break
        if mask_path is None:
            raise IngestionError(f"no mask found for frame {fp.name}")
        rgb = np.asarray(Image.open(fp).convert("RGB"), dtype=np.uint8)
        mask = _load_mask(mask_path)
        box = _box_from_mask(mask)
        tensors.append(preprocess_frame(RawFrame(rgb=rgb, mask=mask, box=box)))

    return Clip(
        frames=np.stack(tensors),
        subject_id=entry.subject,
        condition_id=entry.condition,
        view_deg=entry.view,
        source_id=entry.source_id,
        video_index=entry.video_index if entry.video_index is not None else 1,
    )


def _assign_video_indices(clips: list[Clip], entries: list[ManifestEntry]) -> None:
    # Entries without an explicit video_index get the 1-based ordinal within
    # their (subject, condition, view) group, in manifest order.
    counters: dict[tuple[str, str, float], int] = {}
    for clip, entry in zip(clips, entries):
        key = (clip.subject_id, clip.condition_id, clip.view_deg)
        counters[key] = counters.get(key, 0) + 1
        if entry.video_index is None:
            clip.video_index = counters[key]


def ingest(manifest: Manifest) -> tuple[list[Clip], IngestReport]:
    """Ingest every manifest entry into a normalized Clip.

    Unreadable entries are collected into the report rather than aborting the
    run; duplicate source_ids abort immediately. Output order follows manifest
    order, so results are identical however entries are processed.
    """
    manifest.validate()
    report = IngestReport()
    clips: list[Clip] = []
    ok_entries: list[ManifestEntry] = []
    for entry in manifest.entries:
        try:
            clips.append(_ingest_entry(entry))
            ok_entries.append(entry)
        except (IngestionError, InvalidBoxError, OSError) as exc:
            report.errors.append((entry.source_id, str(exc)))
    _assign_video_indices(clips, ok_entries)
    return clips, report


def save_clip_archive(clips: list[Clip], archive_dir: str | Path) -> None:
    """Persist clips as `<source_id>.clip` containers plus an index.json."""
    archive_dir = Path(archive_dir)
    archive_dir.mkdir(parents=True, exist_ok=True)
    index = {"archive_version": ARCHIVE_VERSION, "clips": []}
    for clip in clips:
        filename = f"{clip.source_id}.clip"
        meta = {
            "source_id": clip.source_id,
            "subject": clip.subject_id,
            "condition": clip.condition_id,
            "view": clip.view_deg,
            "video_index": clip.video_index,
            "n_frames": len(clip),
        }
        write_container(archive_dir / filename, kind="clip", meta=meta, arrays={"frames": clip.frames})
        index["clips"].append({**meta, "file": filename})
    with open(archive_dir / INDEX_NAME, "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")


def load_clip_archive(archive_dir: str | Path) -> list[Clip]:
    """Load every clip from an archive directory, bit-exact with what was saved."""
    archive_dir = Path(archive_dir)
    index_path = archive_dir / INDEX_NAME
    if not index_path.exists():
        raise ArchiveCorruptError(f"missing {INDEX_NAME} in {archive_dir}")
    with open(index_path) as f:
        index = json.load(f)
    version = index.get("archive_version")
    if version != ARCHIVE_VERSION:
        raise ArchiveVersionError(
            f"archive version {version!r} not supported (expected {ARCHIVE_VERSION})"
        )
    clips = []
    for row in index["clips"]:
        meta, arrays = read_container(archive_dir / row["file"], expected_kind="clip")
        clips.append(
            Clip(
                frames=arrays["frames"],
                subject_id=meta["subject"],
                condition_id=meta["condition"],
                view_deg=float(meta["view"]),
                source_id=meta["source_id"],
                video_index=int(meta["video_index"]),
            )
        )
    return clips


def archive_digest(archive_dir: str | Path) -> str:
    """SHA-256 over index.json plus every clip payload, for determinism checks."""
    archive_dir = Path(archive_dir)
    h = hashlib.sha256()
    h.update((archive_dir / INDEX_NAME).read_bytes())
    with open(archive_dir / INDEX_NAME) as f:
        index = json.load(f)
    for row in index["clips"]:
        h.update((archive_dir / row["file"]).read_bytes())
    return h.hexdigest()
