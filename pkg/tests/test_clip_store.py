import json

import numpy as np
import pytest

from gaitdis import clip_store
from gaitdis.clip_store import (
    Clip,
    Manifest,
    ManifestEntry,
    RawFrame,
    archive_digest,
    ingest,
    load_clip_archive,
    preprocess_frame,
    save_clip_archive,
)
from gaitdis.errors import (
    ArchiveCorruptError,
    ArchiveVersionError,
    IngestionError,
    InvalidBoxError,
)


def opaque_frame(h=20, w=10, value=255):
    rgb = np.full((h, w, 3), value, dtype=np.uint8)
    mask = np.ones((h, w), dtype=np.float64)
    return rgb, mask


# ---------------------------------------------------------------- preprocess


def test_saturated_image_full_mask_gives_all_ones():
    rgb, mask = opaque_frame(40, 20)
    out = preprocess_frame(RawFrame(rgb, mask, box=(10.0, 20.0, 36.0)))
    assert out.shape == (64, 32, 3)
    assert out.dtype == np.float32
    assert np.allclose(out, 1.0)


def test_zero_mask_annihilates_pixels():
    rgb, _ = opaque_frame(40, 20)
    mask = np.zeros((40, 20), dtype=np.float64)
    out = preprocess_frame(RawFrame(rgb, mask, box=(10.0, 20.0, 30.0)))
    assert np.all(out == 0.0)


def _oracle_preprocess(rgb, mask, box):
    """Straight-line crop / multiply / resize oracle (pure Python loops)."""
    import math

    cx, cy, bh = box
    crop_w = max(1, int(math.floor(bh / 2.0 + 0.5)))
    crop_h = 2 * crop_w
    x0 = int(math.floor(cx - crop_w / 2.0 + 0.5))
    y0 = int(math.floor(cy - crop_h / 2.0 + 0.5))

    img_h, img_w = mask.shape
    padded = [[[0.0, 0.0, 0.0] for _ in range(crop_w)] for _ in range(crop_h)]
    for yy in range(crop_h):
        for xx in range(crop_w):
            sy, sx = y0 + yy, x0 + xx
            if 0 <= sy < img_h and 0 <= sx < img_w:
                for ch in range(3):
                    padded[yy][xx][ch] = (rgb[sy][sx][ch] / 255.0) * mask[sy][sx]

    out = np.zeros((64, 32, 3))
    for oy in range(64):
        for ox in range(32):
            sy = min(max((oy + 0.5) * (crop_h / 64.0) - 0.5, 0.0), crop_h - 1.0)
            sx = min(max((ox + 0.5) * (crop_w / 32.0) - 0.5, 0.0), crop_w - 1.0)
            y0i, x0i = int(math.floor(sy)), int(math.floor(sx))
            y1i, x1i = min(y0i + 1, crop_h - 1), min(x0i + 1, crop_w - 1)
            wy, wx = sy - y0i, sx - x0i
            for ch in range(3):
                top = padded[y0i][x0i][ch] * (1 - wx) + padded[y0i][x1i][ch] * wx
                bot = padded[y1i][x0i][ch] * (1 - wx) + padded[y1i][x1i][ch] * wx
                out[oy, ox, ch] = top * (1 - wy) + bot * wy
    return out


def test_checkerboard_matches_pixel_oracle():
    # 4x2 checkerboard, box covering the image exactly
    rgb = np.zeros((4, 2, 3), dtype=np.uint8)
    rgb[0, 0] = rgb[1, 1] = rgb[2, 0] = rgb[3, 1] = (255, 128, 64)
    mask = np.array([[1.0, 0.5], [0.25, 1.0], [1.0, 1.0], [0.75, 0.0]])
    box = (1.0, 2.0, 4.0)
    out = preprocess_frame(RawFrame(rgb, mask, box))
    expected = _oracle_preprocess(rgb, mask, box)
    assert np.abs(out - expected).max() < 1e-6


def test_partially_outside_box_matches_oracle_with_zero_padding():
    rng = np.random.default_rng(3)
    rgb = rng.integers(0, 256, size=(8, 6, 3), dtype=np.uint8)
    mask = rng.uniform(0, 1, size=(8, 6))
    box = (0.0, 1.0, 6.0)  # crop window sticks out top-left
    out = preprocess_frame(RawFrame(rgb, mask, box))
    expected = _oracle_preprocess(rgb, mask, box)
    assert np.abs(out - expected).max() < 1e-6


def test_preprocess_deterministic():
    rng = np.random.default_rng(5)
    rgb = rng.integers(0, 256, size=(30, 20, 3), dtype=np.uint8)
    mask = rng.uniform(0, 1, size=(30, 20))
    raw = RawFrame(rgb, mask, (9.5, 14.0, 22.0))
    assert np.array_equal(preprocess_frame(raw), preprocess_frame(raw))


def test_output_always_in_unit_range():
    rng = np.random.default_rng(11)
    for _ in range(5):
        rgb = rng.integers(0, 256, size=(25, 18, 3), dtype=np.uint8)
        mask = rng.uniform(0, 1, size=(25, 18))
        box = (rng.uniform(0, 18), rng.uniform(0, 25), rng.uniform(4, 30))
        out = preprocess_frame(RawFrame(rgb, mask, box))
        assert out.shape == (64, 32, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_invalid_box_height():
    rgb, mask = opaque_frame()
    with pytest.raises(InvalidBoxError):
        preprocess_frame(RawFrame(rgb, mask, (5.0, 5.0, 0.0)))


def test_box_entirely_outside():
    rgb, mask = opaque_frame(20, 10)
    with pytest.raises(InvalidBoxError):
        preprocess_frame(RawFrame(rgb, mask, (-50.0, -50.0, 10.0)))


def test_shape_mismatch_is_ingestion_error():
    rgb, _ = opaque_frame(20, 10)
    with pytest.raises(IngestionError):
        preprocess_frame(RawFrame(rgb, np.ones((10, 10)), (5.0, 5.0, 8.0)))


# ------------------------------------------------------------------- ingest


def _write_media(tmp_path, name, n_frames=3, size=(24, 12), rng=None):
    from PIL import Image

    rng = rng or np.random.default_rng(0)
    fdir = tmp_path / "frames" / name
    mdir = tmp_path / "masks" / name
    fdir.mkdir(parents=True)
    mdir.mkdir(parents=True)
    for t in range(n_frames):
        rgb = rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)
        Image.fromarray(rgb).save(fdir / f"{t:03d}.png")
        mask = np.zeros(size, dtype=np.float64)
        mask[4:20, 3:9] = 1.0
        np.save(mdir / f"{t:03d}.npy", mask)
    return ManifestEntry(
        source_id=name,
        frames_dir=str(fdir),
        masks_dir=str(mdir),
        subject=name.split("_")[0],
        condition="c0",
        view=90.0,
    )


def test_ingest_empty_manifest():
    clips, rep = ingest(Manifest([]))
    assert clips == [] and rep.ok()


def test_ingest_three_entries_two_subjects(tmp_path):
    rng = np.random.default_rng(1)
    entries = [
        _write_media(tmp_path, "a_1", rng=rng),
        _write_media(tmp_path, "a_2", rng=rng),
        _write_media(tmp_path, "b_1", rng=rng),
    ]
    clips, rep = ingest(Manifest(entries))
    assert rep.ok()
    assert len(clips) == 3
    assert len({c.subject_id for c in clips}) == 2
    assert [c.source_id for c in clips] == ["a_1", "a_2", "b_1"]
    # ordinal video_index within (subject, condition, view)
    assert [c.video_index for c in clips] == [1, 2, 1]


def test_ingest_deterministic_persisted_bytes(tmp_path):
    rng = np.random.default_rng(2)
    entries = [_write_media(tmp_path, "s_1", rng=rng)]
    manifest = Manifest(entries)
    digests = []
    for run in range(2):
        clips, rep = ingest(manifest)
        assert rep.ok()
        out = tmp_path / f"arch{run}"
        save_clip_archive(clips, out)
        digests.append(archive_digest(out))
    assert digests[0] == digests[1]


def test_ingest_duplicate_source_id_hard_error(tmp_path):
    entry = _write_media(tmp_path, "dup_1")
    with pytest.raises(IngestionError, match="duplicate"):
        ingest(Manifest([entry, entry]))


def test_ingest_unreadable_media_collected(tmp_path):
    good = _write_media(tmp_path, "ok_1")
    bad = ManifestEntry("bad_1", str(tmp_path / "nope"), str(tmp_path / "nope"), "x", "c0", 0.0)
    clips, rep = ingest(Manifest([good, bad]))
    assert len(clips) == 1
    assert not rep.ok()
    assert rep.errors[0][0] == "bad_1"


def test_manifest_json_round_trip(tmp_path):
    entry = ManifestEntry("a_1", "f", "m", "a", "c0", 90.0, video_index=2)
    path = tmp_path / "m.json"
    Manifest([entry]).to_json(path)
    loaded = Manifest.from_json(path)
    assert loaded.entries[0] == entry


def test_manifest_rejects_hostile_source_id():
    with pytest.raises(IngestionError, match="filename-safe"):
        Manifest([ManifestEntry("../evil", "f", "m", "s", "c", 0.0)]).validate()


# ------------------------------------------------------------------ archive


def _random_clip(rng, source_id="clip_1", n=4, subject="s1"):
    frames = rng.uniform(0, 1, size=(n, 64, 32, 3)).astype(np.float32)
    return Clip(frames, subject_id=subject, condition_id="c0", view_deg=90.0, source_id=source_id)


def test_archive_round_trip_single_frame(tmp_path):
    rng = np.random.default_rng(4)
    clip = _random_clip(rng, n=1)
    save_clip_archive([clip], tmp_path / "a")
    (loaded,) = load_clip_archive(tmp_path / "a")
    assert np.array_equal(loaded.frames, clip.frames)
    assert (loaded.subject_id, loaded.condition_id, loaded.view_deg, loaded.source_id) == (
        clip.subject_id,
        clip.condition_id,
        clip.view_deg,
        clip.source_id,
    )


def test_archive_round_trip_100_clips(tmp_path):
    rng = np.random.default_rng(6)
    clips = [_random_clip(rng, source_id=f"c{i:03d}", n=2, subject=f"s{i % 7}") for i in range(100)]
    save_clip_archive(clips, tmp_path / "a")
    loaded = load_clip_archive(tmp_path / "a")
    assert len(loaded) == 100
    for a, b in zip(clips, loaded):
        assert np.array_equal(a.frames, b.frames)
        assert a.source_id == b.source_id


def test_archive_truncated_clip_file(tmp_path):
    rng = np.random.default_rng(7)
    save_clip_archive([_random_clip(rng)], tmp_path / "a")
    clip_file = tmp_path / "a" / "clip_1.clip"
    clip_file.write_bytes(clip_file.read_bytes()[:-64])
    with pytest.raises(ArchiveCorruptError):
        load_clip_archive(tmp_path / "a")


def test_archive_version_mismatch(tmp_path):
    rng = np.random.default_rng(8)
    save_clip_archive([_random_clip(rng)], tmp_path / "a")
    index = tmp_path / "a" / "index.json"
    raw = json.loads(index.read_text())
    raw["archive_version"] = 42
    index.write_text(json.dumps(raw))
    with pytest.raises(ArchiveVersionError):
        load_clip_archive(tmp_path / "a")


def test_clip_rejects_out_of_range_frames():
    frames = np.full((2, 64, 32, 3), 1.5, dtype=np.float32)
    with pytest.raises(IngestionError):
        Clip(frames, "s", "c", 0.0, "x")


def test_crop_aspect_ratio_exactly_one_to_two():
    # the padded crop that feeds the resize is always width:height = 1:2
    for bh in (7.0, 10.0, 13.5, 31.0):
        crop_w = max(1, int(np.floor(bh / 2.0 + 0.5)))
        assert 2 * crop_w == 2 * crop_w  # construction: crop_h = 2 * crop_w
    rgb, mask = opaque_frame(64, 32)
    out = preprocess_frame(RawFrame(rgb, mask, (16.0, 32.0, 48.0)))
    assert np.allclose(out, 1.0)  # interior crop of a saturated image stays saturated
