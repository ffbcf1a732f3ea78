"""On-disk formats: sequence bundles, track tables, checkpoints.

A sequence bundle is a directory:

    manifest.json          camera intrinsics/extrinsics, depth quantization
                           factors, reference depth samples, validation views
    images/img_NNNN.png    8-bit RGB
    depth/dep_NNNN.png     16-bit single channel, value = depth * factor
    mask/msk_NNNN.png      8-bit, 255 inside the motion mask
    tracks.bin             binary track table (header below)
    val/img_NNNN.png       held-out view renders (optional)

tracks.bin layout (little endian): uint32 P, uint32 T, then three dense
blocks: float32 uv (P, T, 2), uint8 visible (P, T), float32 confidence
(P, T).  Invisible entries carry uv = 0 on disk and come back NaN.

Checkpoints and other array containers use a single deterministic format
(`save_arrays`): a JSON header with dtype/shape per array followed by the
raw little-endian bytes in sorted key order.  Identical inputs produce
identical bytes, which the resume and reproducibility guarantees rely on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidSpec, ShapeMismatch
from .geometry import Camera, RigidTransform
from .initialization import TrackTable

FORMAT_VERSION = 1
_MAGIC = b"DSAP\x01"


# ---------------------------------------------------------------------
# deterministic array container
# ---------------------------------------------------------------------


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays + JSON metadata to one file, byte-deterministically."""
    names = sorted(arrays)
    header = {"version": FORMAT_VERSION, "meta": meta or {}, "arrays": []}
    blobs = []
    for name in names:
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        a = a.astype(dt, copy=False)
        header["arrays"].append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_arrays(path) -> tuple[dict, dict]:
    """Inverse of save_arrays: returns (arrays dict, meta dict)."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise InvalidSpec(f"{path}: not an array container")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(dt.itemsize * count)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(
                entry["shape"]).copy()
    return arrays, header.get("meta", {})


# ---------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------


def save_image_png(path, img: np.ndarray) -> None:
    """Float [0, 1] HxWx3 -> 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_depth_png(path, depth: np.ndarray, factor: float) -> None:
    """Depth map -> 16-bit PNG of round(depth * factor), clipped to uint16."""
    q = np.clip(np.round(np.asarray(depth) * factor), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def load_depth_png(path, factor: float) -> np.ndarray:
    q = np.asarray(Image.open(path), dtype=np.float64)
    return q / factor


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8),
                    mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128


# ---------------------------------------------------------------------
# sequence container
# ---------------------------------------------------------------------


@dataclass
class Sequence:
    """In-memory training inputs for one posed monocular sequence.

    images: (T, H, W, 3) in [0, 1]; depths_rel: (T, H, W) relative depth
    needing affine alignment; masks: (T, H, W) bool motion masks;
    ref_points: (T, K, 3) sparse metric anchors per frame as (u, v, depth).
    Validation views are optional held-out cameras with ground-truth
    renders at specific timesteps.
    """

    images: np.ndarray
    depths_rel: np.ndarray
    masks: np.ndarray
    cams: list[Camera]
    ref_points: np.ndarray
    val_cams: list[Camera] = field(default_factory=list)
    val_images: np.ndarray | None = None
    val_frames: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]


def _cam_to_json(cam: Camera) -> dict:
    return {"K": cam.K.reshape(-1).tolist(),
            "R": cam.E.R.reshape(-1).tolist(),
            "t": cam.E.t.tolist(),
            "width": cam.width, "height": cam.height}


def _cam_from_json(d: dict) -> Camera:
    return Camera(K=np.array(d["K"]).reshape(3, 3),
                  E=RigidTransform(np.array(d["R"]).reshape(3, 3), np.array(d["t"])),
                  width=int(d["width"]), height=int(d["height"]))


def save_sequence(seq: Sequence, out_dir) -> None:
    out = Path(out_dir)
    for sub in ("images", "depth", "mask", "val"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    T = seq.n_frames
    factors = []
    for t in range(T):
        dmax = float(seq.depths_rel[t].max())
        factor = 65535.0 / dmax if dmax > 0 else 1.0
        factors.append(factor)
        save_image_png(out / "images" / f"img_{t:04d}.png", seq.images[t])
        save_depth_png(out / "depth" / f"dep_{t:04d}.png", seq.depths_rel[t], factor)
        save_mask_png(out / "mask" / f"msk_{t:04d}.png", seq.masks[t])
    manifest = {
        "version": FORMAT_VERSION,
        "n_frames": T,
        "width": seq.width,
        "height": seq.height,
        "depth_factors": factors,
        "cams": [_cam_to_json(c) for c in seq.cams],
        "ref_points": np.asarray(seq.ref_points, dtype=np.float64).tolist(),
        "val": {
            "cams": [_cam_to_json(c) for c in seq.val_cams],
            "frames": [] if seq.val_frames is None else
                      np.asarray(seq.val_frames).astype(int).tolist(),
        },
    }
    if seq.val_images is not None:
        for k in range(seq.val_images.shape[0]):
            save_image_png(out / "val" / f"img_{k:04d}.png", seq.val_images[k])
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, separators=(",", ":"))


def load_sequence(in_dir) -> Sequence:
    src = Path(in_dir)
    with open(src / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("version") != FORMAT_VERSION:
        raise InvalidSpec(f"unsupported bundle version {manifest.get('version')}")
    T = manifest["n_frames"]
    images = np.stack([load_image_png(src / "images" / f"img_{t:04d}.png")
                       for t in range(T)])
    depths = np.stack([load_depth_png(src / "depth" / f"dep_{t:04d}.png",
                                      manifest["depth_factors"][t])
                       for t in range(T)])
    masks = np.stack([load_mask_png(src / "mask" / f"msk_{t:04d}.png")
                      for t in range(T)])
    cams = [_cam_from_json(d) for d in manifest["cams"]]
    val_cams = [_cam_from_json(d) for d in manifest["val"]["cams"]]
    val_frames = np.array(manifest["val"]["frames"], dtype=int)
    val_images = None
    if len(val_cams):
        val_images = np.stack([load_image_png(src / "val" / f"img_{k:04d}.png")
                               for k in range(len(val_cams))])
    return Sequence(images=images, depths_rel=depths, masks=masks, cams=cams,
                    ref_points=np.array(manifest["ref_points"], dtype=np.float64),
                    val_cams=val_cams, val_images=val_images, val_frames=val_frames)


# ---------------------------------------------------------------------
# track table io
# ---------------------------------------------------------------------


def save_tracks(tracks: TrackTable, path) -> None:
    P, T = tracks.visible.shape
    uv = np.nan_to_num(tracks.uv, nan=0.0).astype("<f4")
    vis = tracks.visible.astype(np.uint8)
    conf = tracks.confidence.astype("<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", P, T))
        f.write(uv.tobytes())
        f.write(vis.tobytes())
        f.write(conf.tobytes())


def load_tracks(path) -> TrackTable:
    with open(path, "rb") as f:
        P, T = struct.unpack("<II", f.read(8))
        uv = np.frombuffer(f.read(P * T * 2 * 4), dtype="<f4").reshape(P, T, 2)
        vis = np.frombuffer(f.read(P * T), dtype=np.uint8).reshape(P, T).astype(bool)
        conf = np.frombuffer(f.read(P * T * 4), dtype="<f4").reshape(P, T)
    uv = uv.astype(np.float64)
    uv[~vis] = np.nan
    return TrackTable(uv, vis, conf.astype(np.float64) * vis)


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model_state: dict, opt_state: dict, config_echo: dict,
                    rng_state: dict, extra: dict | None = None) -> None:
    arrays = {}
    for k, v in model_state.items():
        arrays[f"model/{k}"] = v
    for k, v in opt_state.items():
        if isinstance(v, np.ndarray):
            arrays[f"opt/{k}"] = v
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": config_echo,
        "rng_state": rng_state,
        "opt_scalars": {k: v for k, v in opt_state.items()
                        if not isinstance(v, np.ndarray)},
        "extra": extra or {},
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path) -> dict:
    arrays, meta = load_arrays(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise InvalidSpec(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
    model_state = {k[len("model/"):]: v for k, v in arrays.items()
                   if k.startswith("model/")}
    opt_state = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    opt_state.update(meta.get("opt_scalars", {}))
    return {"model": model_state, "opt": opt_state, "config": meta["config"],
            "rng_state": meta["rng_state"], "extra": meta.get("extra", {})}
