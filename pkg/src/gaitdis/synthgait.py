"""Deterministic synthetic walking figures with known generative factors.

Each clip renders a 2-D articulated rig (head, torso, and four two-segment
limbs driven by sinusoidal joint angles) as filled shapes at 4x resolution,
box-downsampled to the standard 64 x 32 frame. Identity factors set the static
geometry, appearance factors set fill colors and torso texture, and gait
factors set the joint-angle trajectories, so every latent the training
pipeline is supposed to recover exists here as ground truth.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clip_store import Clip, Manifest, ManifestEntry, save_clip_archive
from .errors import CapacityError, InvalidSpecError

SUPERSAMPLE = 4
FRAME_H, FRAME_W = 64, 32

# Identity lattice: subjects are drawn from distinct cells, so any two
# subjects differ by at least one lattice step in some axis.
_LIMB_GRID = np.linspace(0.40, 0.56, 5)
_TORSO_GRID = np.linspace(0.14, 0.30, 5)
_HEIGHT_GRID = np.linspace(0.62, 0.94, 5)
IDENTITY_SEPARATION = float(
    min(np.diff(_LIMB_GRID).min(), np.diff(_TORSO_GRID).min(), np.diff(_HEIGHT_GRID).min())
)
IDENTITY_CAPACITY = _LIMB_GRID.size * _TORSO_GRID.size * _HEIGHT_GRID.size

# Per-subject gait dynamics come from a lattice too: a subject's walk is part
# of their identity, so distinct subjects get separably distinct dynamics.
_CADENCE_GRID = np.linspace(0.06, 0.14, 9)
_AMPLITUDE_GRID = np.linspace(0.70, 1.40, 14)

N_TEXTURES = 4  # solid, horizontal stripes, vertical stripes, checker


@dataclass
class FactorSpec:
    """Full generative description of one clip.

    identity: (limb_length_ratio, torso_width, height_ratio)
    appearance: (hue in [0,1), texture_id in 0..3, brightness in [0,1])
    gait: (phase_offset in [0,2pi), cadence in cycles/frame, amplitude)
    """

    identity: tuple[float, float, float]
    appearance: tuple[float, int, float]
    gait: tuple[float, float, float]
    view_deg: float = 90.0
    speed: float = 1.0
    n_frames: int = 40

    def validate(self) -> None:
        problems = []
        limb, torso_w, height = self.identity
        if not (0 < limb < 1):
            problems.append(f"limb_length_ratio must be in (0,1), got {limb}")
        if not torso_w > 0:
            problems.append(f"torso_width must be > 0, got {torso_w}")
        if not height > 0:
            problems.append(f"height_ratio must be > 0, got {height}")
        hue, texture_id, brightness = self.appearance
        if not (0 <= hue < 1):
            problems.append(f"hue must be in [0,1), got {hue}")
        if texture_id not in range(N_TEXTURES):
            problems.append(f"texture_id must be in 0..{N_TEXTURES - 1}, got {texture_id}")
        if not (0 <= brightness <= 1):
            problems.append(f"brightness must be in [0,1], got {brightness}")
        _, cadence, amplitude = self.gait
        if not cadence > 0:
            problems.append(f"cadence must be > 0, got {cadence}")
        if amplitude < 0:
            problems.append(f"amplitude must be >= 0, got {amplitude}")
        if self.n_frames < 20:
            problems.append(f"n_frames must be >= 20, got {self.n_frames}")
        if problems:
            raise InvalidSpecError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "identity": list(self.identity),
            "appearance": [self.appearance[0], int(self.appearance[1]), self.appearance[2]],
            "gait": list(self.gait),
            "view_deg": self.view_deg,
            "speed": self.speed,
            "n_frames": self.n_frames,
        }


@dataclass
class LabeledClip:
    """A rendered clip plus its generative ground truth."""

    clip: Clip
    factors: FactorSpec
    per_frame_phase: np.ndarray
    masks: np.ndarray = field(repr=False, default=None)  # (n, 64, 32) soft coverage


def _capsule_mask(xs, ys, p0, p1, radius):
    """Coverage of a thick segment (capsule) on the supersampled grid."""
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    seg_len2 = px * px + py * py
    dx = xs - p0[0]
    dy = ys - p0[1]
    if seg_len2 < 1e-12:
        dist2 = dx * dx + dy * dy
    else:
        t = np.clip((dx * px + dy * py) / seg_len2, 0.0, 1.0)
        ex = dx - t * px
        ey = dy - t * py
        dist2 = ex * ex + ey * ey
    return dist2 <= radius * radius


class _Canvas:
    def __init__(self):
        h4, w4 = FRAME_H * SUPERSAMPLE, FRAME_W * SUPERSAMPLE
        self.rgb = np.zeros((h4, w4, 3), dtype=np.float64)
        self.cover = np.zeros((h4, w4), dtype=bool)
        # pixel-center coordinates in final-frame units
        self.xs = (np.arange(w4, dtype=np.float64) + 0.5) / SUPERSAMPLE
        self.ys = (np.arange(h4, dtype=np.float64) + 0.5) / SUPERSAMPLE

    def draw_capsule(self, p0, p1, radius, color, texture=None):
        x_lo = min(p0[0], p1[0]) - radius
        x_hi = max(p0[0], p1[0]) + radius
        y_lo = min(p0[1], p1[1]) - radius
        y_hi = max(p0[1], p1[1]) + radius
        ix = np.searchsorted(self.xs, [x_lo, x_hi])
        iy = np.searchsorted(self.ys, [y_lo, y_hi])
        ix0, ix1 = max(ix[0] - 1, 0), min(ix[1] + 1, self.xs.size)
        iy0, iy1 = max(iy[0] - 1, 0), min(iy[1] + 1, self.ys.size)
        if ix0 >= ix1 or iy0 >= iy1:
            return
        sub_x = self.xs[ix0:ix1][None, :]
        sub_y = self.ys[iy0:iy1][:, None]
        mask = _capsule_mask(sub_x, sub_y, p0, p1, radius)
        region_rgb = self.rgb[iy0:iy1, ix0:ix1]
        if texture is None:
            region_rgb[mask] = color
        else:
            mod = texture(sub_x, sub_y)
            shaded = np.clip(np.asarray(color)[None, None, :] * mod[..., None], 0.0, 1.0)
            region_rgb[mask] = shaded[mask]
        self.cover[iy0:iy1, ix0:ix1] |= mask

    def downsample(self):
        rgb = self.rgb.reshape(FRAME_H, SUPERSAMPLE, FRAME_W, SUPERSAMPLE, 3).mean(axis=(1, 3))
        cover = self.cover.astype(np.float64)
        cover = cover.reshape(FRAME_H, SUPERSAMPLE, FRAME_W, SUPERSAMPLE).mean(axis=(1, 3))
        return rgb, cover


def _texture_fn(texture_id: int, anchor_y: float, anchor_x: float, fig_h: float, phase01: float):
    """Brightness modulation pattern anchored to the torso frame."""
    if texture_id == 0:
        return None
    depth = 0.18
    period_y = max(0.18 * fig_h, 1.0)
    period_x = max(0.10 * fig_h, 1.0)

    def pattern(xs, ys):
        if texture_id == 1:
            wave = np.sin(2 * np.pi * ((ys - anchor_y) / period_y + phase01))
        elif texture_id == 2:
            wave = np.sin(2 * np.pi * ((xs - anchor_x) / period_x + phase01))
        else:
            wave = np.sin(2 * np.pi * ((ys - anchor_y) / period_y + phase01)) * np.sin(
                2 * np.pi * ((xs - anchor_x) / period_x + phase01)
            )
        shape = np.broadcast_shapes(xs.shape, ys.shape)
        return np.broadcast_to(1.0 + depth * np.sign(wave), shape)

    return pattern


def generate(
    spec: FactorSpec,
    seed: int,
    subject_id: str = "synth",
    condition_id: str = "c0",
    source_id: str | None = None,
    video_index: int = 1,
) -> LabeledClip:
    """Render one walking clip as a pure function of (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    texture_phase = rng.uniform(0.0, 1.0)

    limb_ratio, torso_width, height_ratio = spec.identity
    hue, texture_id, brightness = spec.appearance
    phase_offset, cadence, amplitude = spec.gait

    view_rad = math.radians(spec.view_deg)
    side_factor = 0.25 + 0.75 * abs(math.sin(view_rad))
    # forward advance per frame: a frozen walker (amplitude 0) does not approach
    approach = 0.05 * spec.speed * max(math.cos(view_rad), 0.0) * amplitude * cadence

    body_rgb = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.30 + 0.65 * brightness))
    limb_rgb = body_rgb * 0.9
    head_rgb = np.array([0.85, 0.72, 0.58]) * (0.55 + 0.45 * brightness)

    swing = 0.50 * amplitude * side_factor
    arm_swing = 0.35 * amplitude * side_factor
    knee_amp = 0.80 * amplitude * side_factor
    elbow_amp = 0.45 * amplitude * side_factor

    frames = np.empty((spec.n_frames, FRAME_H, FRAME_W, 3), dtype=np.float32)
    covers = np.empty((spec.n_frames, FRAME_H, FRAME_W), dtype=np.float32)
    phases = np.empty(spec.n_frames, dtype=np.float64)

    base_fig_h = height_ratio * FRAME_H
    cx0 = FRAME_W / 2.0

    for t in range(spec.n_frames):
        phi = phase_offset + 2 * math.pi * cadence * t
        phases[t] = phi % (2 * math.pi)

        fig_h = min(base_fig_h * (1.0 + approach * t), 0.98 * FRAME_H)
        bob = -0.015 * fig_h * amplitude * math.cos(2 * phi)
        sway = 0.020 * fig_h * amplitude * math.sin(phi) * (1.0 - abs(math.sin(view_rad)))
        cx = cx0 + sway
        y_top = FRAME_H / 2.0 - fig_h / 2.0 + bob
        y_feet = y_top + fig_h

        head_r = 0.065 * fig_h
        neck = (cx, y_top + 2 * head_r)
        leg_len = limb_ratio * fig_h
        hip_y = y_feet - leg_len
        hip = (cx, hip_y)
        torso_w = torso_width * fig_h
        leg_r = 0.30 * torso_w
        arm_r = 0.22 * torso_w
        seg = leg_len / 2.0
        arm_seg = 0.55 * leg_len / 2.0
        shoulder_y = neck[1] + 0.04 * fig_h

        def limb_points(origin, a_upper, flex, upper_len, lower_len):
            mid = (origin[0] + upper_len * math.sin(a_upper), origin[1] + upper_len * math.cos(a_upper))
            a_lower = a_upper - flex
            end = (mid[0] + lower_len * math.sin(a_lower), mid[1] + lower_len * math.cos(a_lower))
            return mid, end

        canvas = _Canvas()
        sides = []
        for name, sign, depth_shade in (("far", 1.0, 0.82), ("near", -1.0, 1.0)):
            hip_a = swing * math.sin(phi + (0 if sign > 0 else math.pi))
            knee_f = knee_amp * (1 + math.cos(phi + (0 if sign > 0 else math.pi) - 2.2)) / 2.0
            sh_a = arm_swing * math.sin(phi + (math.pi if sign > 0 else 0))
            el_f = elbow_amp * (1 + math.cos(phi + (math.pi if sign > 0 else 0) - 2.2)) / 2.0
            hip_pt = (cx + sign * 0.20 * torso_w, hip_y)
            sh_pt = (cx + sign * 0.40 * torso_w, shoulder_y)
            knee_pt, ankle_pt = limb_points(hip_pt, hip_a, knee_f, seg, seg)
            el_pt, wrist_pt = limb_points(sh_pt, sh_a, -el_f, arm_seg, arm_seg)
            sides.append((name, depth_shade, hip_pt, knee_pt, ankle_pt, sh_pt, el_pt, wrist_pt))

        # painter's order: far limbs, torso + head, near limbs
        for name, shade, hip_pt, knee_pt, ankle_pt, sh_pt, el_pt, wrist_pt in sides[:1]:
            canvas.draw_capsule(sh_pt, el_pt, arm_r, limb_rgb * shade)
            canvas.draw_capsule(el_pt, wrist_pt, arm_r * 0.9, limb_rgb * shade)
            canvas.draw_capsule(hip_pt, knee_pt, leg_r, limb_rgb * shade)
            canvas.draw_capsule(knee_pt, ankle_pt, leg_r * 0.85, limb_rgb * shade)

        texture = _texture_fn(texture_id, neck[1], cx, fig_h, texture_phase)
        canvas.draw_capsule(neck, hip, torso_w / 2.0, body_rgb, texture=texture)
        canvas.draw_capsule(
            (cx, y_top + head_r), (cx, y_top + head_r), head_r, head_rgb
        )

        for name, shade, hip_pt, knee_pt, ankle_pt, sh_pt, el_pt, wrist_pt in sides[1:]:
            canvas.draw_capsule(hip_pt, knee_pt, leg_r, limb_rgb * shade)
            canvas.draw_capsule(knee_pt, ankle_pt, leg_r * 0.85, limb_rgb * shade)
            canvas.draw_capsule(sh_pt, el_pt, arm_r, limb_rgb * shade)
            canvas.draw_capsule(el_pt, wrist_pt, arm_r * 0.9, limb_rgb * shade)

        rgb, cover = canvas.downsample()
        frames[t] = np.clip(rgb, 0.0, 1.0).astype(np.float32)
        covers[t] = cover.astype(np.float32)

    clip = Clip(
        frames=frames,
        subject_id=subject_id,
        condition_id=condition_id,
        view_deg=spec.view_deg,
        source_id=source_id if source_id is not None else f"synth-{seed}",
        video_index=video_index,
    )
    return LabeledClip(clip=clip, factors=spec, per_frame_phase=phases, masks=covers)


def _draw_identities(n_subjects: int, rng: np.random.Generator) -> list[tuple[float, float, float]]:
    if n_subjects > IDENTITY_CAPACITY:
        raise CapacityError(
            f"requested {n_subjects} subjects but the identity grid holds {IDENTITY_CAPACITY}"
        )
    cells = [
        (float(a), float(b), float(c)) for a in _LIMB_GRID for b in _TORSO_GRID for c in _HEIGHT_GRID
    ]
    order = rng.permutation(len(cells))
    return [cells[i] for i in order[:n_subjects]]


def make_dataset(
    n_subjects: int,
    conditions_per_subject: int,
    clips_per_condition: int,
    seed: int,
    view_deg: float = 90.0,
    n_frames_range: tuple[int, int] = (34, 44),
    out_dir: str | Path | None = None,
    export_frames: bool = False,
    subject_offset: int = 0,
) -> tuple[list[LabeledClip], Manifest]:
    """Generate a labeled dataset of synthetic walking clips.

    Subjects get distinct identity cells (pairwise separation at least
    IDENTITY_SEPARATION) and per-subject gait dynamics (cadence, amplitude);
    each condition redraws appearance only, so clips of one subject differ in
    clothing but not in body or walk. Start phase and clip length are redrawn
    per clip. When `out_dir` is given, writes the clip archive, manifest.json,
    and factors.json there (plus per-frame PNGs when `export_frames`).
    """
    if min(n_subjects, conditions_per_subject, clips_per_condition) < 1:
        raise InvalidSpecError("all dataset counts must be >= 1")
    rng = np.random.default_rng(seed)
    identities = _draw_identities(n_subjects, rng)

    gait_cells = [(float(c), float(a)) for c in _CADENCE_GRID for a in _AMPLITUDE_GRID]
    gait_order = rng.permutation(len(gait_cells))

    labeled: list[LabeledClip] = []
    clip_index = 0
    for si, identity in enumerate(identities):
        subject = f"subj{si + subject_offset:03d}"
        cadence, amplitude = gait_cells[gait_order[si]]
        for ci in range(conditions_per_subject):
            condition = f"cond{ci}"
            appearance = (
                float(rng.uniform(0.0, 1.0)),
                int(rng.integers(0, N_TEXTURES)),
                float(rng.uniform(0.25, 1.0)),
            )
            for ki in range(clips_per_condition):
                spec = FactorSpec(
                    identity=identity,
                    appearance=appearance,
                    gait=(float(rng.uniform(0.0, 2 * math.pi)), cadence, amplitude),
                    view_deg=view_deg,
                    speed=1.0,
                    n_frames=int(rng.integers(n_frames_range[0], n_frames_range[1] + 1)),
                )
                labeled.append(
                    generate(
                        spec,
                        seed=seed ^ clip_index,
                        subject_id=subject,
                        condition_id=condition,
                        source_id=f"{subject}_{condition}_v{ki + 1}",
                        video_index=ki + 1,
                    )
                )
                clip_index += 1

    manifest = _dataset_manifest(labeled, out_dir, export_frames)
    if out_dir is not None:
        save_dataset(labeled, manifest, out_dir, export_frames=export_frames)
    return labeled, manifest


def _dataset_manifest(labeled, out_dir, export_frames) -> Manifest:
    base = Path(out_dir) if out_dir is not None else Path(".")
    entries = []
    for lc in labeled:
        sid = lc.clip.source_id
        if export_frames:
            frames_dir = str(base / "frames" / sid)
            masks_dir = str(base / "masks" / sid)
        else:
            # provenance record: point at the archived clip itself
            frames_dir = masks_dir = str(base / "archive" / f"{sid}.clip")
        entries.append(
            ManifestEntry(
                source_id=sid,
                frames_dir=frames_dir,
                masks_dir=masks_dir,
                subject=lc.clip.subject_id,
                condition=lc.clip.condition_id,
                view=lc.clip.view_deg,
                video_index=lc.clip.video_index,
            )
        )
    return Manifest(entries)


def save_dataset(
    labeled: list[LabeledClip],
    manifest: Manifest,
    out_dir: str | Path,
    export_frames: bool = False,
) -> None:
    """Write archive/, manifest.json, factors.json (and PNG frames if asked)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_clip_archive([lc.clip for lc in labeled], out_dir / "archive")
    manifest.to_json(out_dir / "manifest.json")

    factors = {
        lc.clip.source_id: {
            **lc.factors.to_dict(),
            "subject": lc.clip.subject_id,
            "condition": lc.clip.condition_id,
            "per_frame_phase": [float(p) for p in lc.per_frame_phase],
        }
        for lc in labeled
    }
    with open(out_dir / "factors.json", "w") as f:
        json.dump(factors, f, indent=2, sort_keys=True)
        f.write("\n")

    if export_frames:
        from PIL import Image

        for lc in labeled:
            sid = lc.clip.source_id
            fdir = out_dir / "frames" / sid
            mdir = out_dir / "masks" / sid
            fdir.mkdir(parents=True, exist_ok=True)
            mdir.mkdir(parents=True, exist_ok=True)
            for t in range(len(lc.clip)):
                rgb8 = np.clip(np.rint(lc.clip.frames[t] * 255.0), 0, 255).astype(np.uint8)
                mask8 = np.clip(np.rint(lc.masks[t] * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(rgb8).save(fdir / f"f{t:04d}.png")
                Image.fromarray(mask8, mode="L").save(mdir / f"f{t:04d}.png")
