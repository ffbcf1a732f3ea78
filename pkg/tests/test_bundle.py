import hashlib
import json

import numpy as np
import pytest

from dynsplat import bundle
from dynsplat.errors import InvalidSpec
from dynsplat.initialization import TrackTable
from dynsplat.synthdata import SceneSpec, generate


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------
# raw array blobs
# ---------------------------------------------------------------------


def test_array_blob_roundtrip(tmp_path, rng):
    arrays = {
        "a": rng.normal(size=(3, 4)),
        "b": np.arange(7, dtype=np.int64),
        "flag": np.array([True, False, True]),
        "f32": rng.normal(size=5).astype(np.float32),
    }
    meta = {"note": "x", "nested": {"k": [1, 2]}}
    path = tmp_path / "blob.bin"
    bundle.save_arrays(path, arrays, meta)
    back, meta2 = bundle.load_arrays(path)
    assert meta2 == meta
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert np.array_equal(back[k], arrays[k])


def test_array_blob_byte_deterministic(tmp_path, rng):
    arrays = {"z": rng.normal(size=(2, 2)), "a": rng.normal(size=3)}
    p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
    bundle.save_arrays(p1, arrays, {"m": 1})
    bundle.save_arrays(p2, dict(reversed(list(arrays.items()))), {"m": 1})
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------
# png codecs
# ---------------------------------------------------------------------


def test_image_png_roundtrip(tmp_path, rng):
    img = rng.random((12, 10, 3))
    path = tmp_path / "img.png"
    bundle.save_image_png(path, img)
    back = bundle.load_image_png(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_depth_png_roundtrip(tmp_path, rng):
    depth = rng.uniform(0.5, 4.0, size=(9, 11))
    factor = 65535.0 / depth.max()
    path = tmp_path / "dep.png"
    bundle.save_depth_png(path, depth, factor)
    back = bundle.load_depth_png(path, factor)
    assert np.max(np.abs(back - depth)) <= 0.5 / factor + 1e-12


def test_mask_png_roundtrip(tmp_path, rng):
    mask = rng.random((8, 8)) > 0.5
    path = tmp_path / "msk.png"
    bundle.save_mask_png(path, mask)
    assert np.array_equal(bundle.load_mask_png(path), mask)


# ---------------------------------------------------------------------
# sequence bundles
# ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    return generate(SceneSpec(n_frames=5, width=24, height=24,
                              points_per_cluster=12, n_val_views=2,
                              track_noise_px=0.3, seed=4))


def test_sequence_roundtrip(tmp_path, scene):
    seq = scene[0]
    bundle.save_sequence(seq, tmp_path / "seq")
    back = bundle.load_sequence(tmp_path / "seq")
    assert back.n_frames == seq.n_frames
    assert np.max(np.abs(back.images - seq.images)) <= 0.5 / 255 + 1e-12
    # per-frame factor targets the full uint16 range
    for t in range(seq.n_frames):
        step = seq.depths_rel[t].max() / 65535.0
        assert np.max(np.abs(back.depths_rel[t] - seq.depths_rel[t])) <= 0.5 * step + 1e-12
    assert np.array_equal(back.masks, seq.masks)
    assert np.array_equal(back.ref_points, seq.ref_points)
    for c1, c2 in zip(back.cams, seq.cams):
        assert np.array_equal(c1.K, c2.K)
        assert np.array_equal(c1.E.R, c2.E.R)
        assert np.array_equal(c1.E.t, c2.E.t)
    assert len(back.val_cams) == 2
    assert np.array_equal(back.val_frames, seq.val_frames)
    assert np.max(np.abs(back.val_images - seq.val_images)) <= 0.5 / 255 + 1e-12


def test_sequence_save_deterministic(tmp_path, scene):
    seq = scene[0]
    bundle.save_sequence(seq, tmp_path / "a")
    bundle.save_sequence(seq, tmp_path / "b")
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")


def test_sequence_version_check(tmp_path, scene):
    bundle.save_sequence(scene[0], tmp_path / "seq")
    mf = tmp_path / "seq" / "manifest.json"
    blob = json.loads(mf.read_text())
    blob["version"] = 99
    mf.write_text(json.dumps(blob))
    with pytest.raises(InvalidSpec):
        bundle.load_sequence(tmp_path / "seq")


# ---------------------------------------------------------------------
# track table io
# ---------------------------------------------------------------------


def test_tracks_roundtrip(tmp_path, scene):
    tracks = scene[1]
    path = tmp_path / "tracks.bin"
    bundle.save_tracks(tracks, path)
    back = bundle.load_tracks(path)
    assert np.array_equal(back.visible, tracks.visible)
    vis = tracks.visible
    assert np.max(np.abs(back.uv[vis] - tracks.uv[vis])) < 1e-5   # float32
    assert np.all(np.isnan(back.uv[~vis]))
    assert np.max(np.abs(back.confidence - tracks.confidence)) < 1e-6


def test_tracks_save_deterministic(tmp_path, scene):
    p1, p2 = tmp_path / "t1.bin", tmp_path / "t2.bin"
    bundle.save_tracks(scene[1], p1)
    bundle.save_tracks(scene[1], p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_tracks_nan_uv_not_persisted_as_nan(tmp_path):
    uv = np.array([[[np.nan, np.nan], [2.0, 3.0]]])
    tr = TrackTable(uv, np.array([[False, True]]), np.array([[0.0, 1.0]]))
    path = tmp_path / "t.bin"
    bundle.save_tracks(tr, path)
    raw = np.frombuffer(path.read_bytes()[8:8 + 4 * 4], dtype="<f4")
    assert np.all(np.isfinite(raw))    # NaNs are reconstructed, not stored


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------


def test_checkpoint_roundtrip_bitexact(tmp_path, rng):
    model = {"mu0": rng.normal(size=(6, 3)), "logit": rng.normal(size=6)}
    opt = {"m/mu0": rng.normal(size=(6, 3)), "v/mu0": rng.random((6, 3)),
           "step": 17}
    cfg = {"steps": 100, "lr": 1e-3}
    rstate = np.random.default_rng(3).bit_generator.state
    path = tmp_path / "ck.bin"
    bundle.save_checkpoint(path, model, opt, cfg, rstate, {"loss": 0.5})
    back = bundle.load_checkpoint(path)
    for k in model:
        assert np.array_equal(back["model"][k], model[k])
        assert back["model"][k].dtype == model[k].dtype
    assert np.array_equal(back["opt"]["m/mu0"], opt["m/mu0"])
    assert back["opt"]["step"] == 17
    assert back["config"] == cfg
    assert back["extra"] == {"loss": 0.5}
    # restored rng state must continue the exact stream
    g = np.random.default_rng(0)
    g.bit_generator.state = back["rng_state"]
    h = np.random.default_rng(3)
    assert np.array_equal(g.normal(size=5), h.normal(size=5))


def test_checkpoint_saves_identical_bytes(tmp_path, rng):
    model = {"w": rng.normal(size=4)}
    opt = {"m/w": np.zeros(4), "step": 1}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    st = np.random.default_rng(1).bit_generator.state
    bundle.save_checkpoint(p1, model, opt, {"x": 1}, st)
    bundle.save_checkpoint(p2, model, opt, {"x": 1}, st)
    assert p1.read_bytes() == p2.read_bytes()
