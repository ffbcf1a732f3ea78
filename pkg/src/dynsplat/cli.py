"""Command-line pipeline: synthesize data, fit, evaluate, export.

One process per command, deterministic under --seed.  Exit codes:
0 success; 2 invalid input (missing or malformed files, bad config keys,
unknown flags); 3 non-finite training loss, with the last good checkpoint
left on disk.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, check_gradients
from .bundle import (load_arrays, load_checkpoint, load_sequence, load_tracks,
                     save_arrays, save_checkpoint, save_image_png,
                     save_sequence, save_tracks)
from .errors import DynsplatError, InvalidSpec, NonFiniteValue
from .evaluation import evaluate_model, render_view
from .geometry import Z_NEAR, RigidTransform, make_camera
from .metrics import report_json
from .motion import blend_vars, quat_to_matrix_var, trajectories
from .splat import render_graph, write_ply
from .synthdata import SceneSpec, generate
from .training import (CH_DEPTH, LossWeights, TrainConfig, Trainer,
                       init_model, loss_isotropy, loss_recon, loss_rigidity,
                       loss_smooth, loss_track, project_var,
                       scene_model_from_state, write_history_csv)

GRAD_TOL = 1e-4


# ---------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    """TrainConfig from a flat or nested keyed dict.

    Loss-weight fields may appear at top level (their names are disjoint
    from TrainConfig's) or under a "weights" key.  Unknown keys raise
    InvalidSpec rather than being ignored.
    """
    d = dict(d)
    wnames = {f.name for f in dataclasses.fields(LossWeights)}
    cnames = {f.name for f in dataclasses.fields(TrainConfig)} - {"weights"}
    wd = dict(d.pop("weights", None) or {})
    for k in [k for k in d if k in wnames]:
        wd[k] = d.pop(k)
    unknown = sorted((set(d) - cnames) | (set(wd) - wnames))
    if unknown:
        raise InvalidSpec(f"unknown config keys: {unknown}")
    return TrainConfig(**d, weights=LossWeights(**wd))


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidSpec(f"{path}: {e}")


# ---------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec_d = _load_json(args.spec)
    if args.seed is not None:
        spec_d["seed"] = args.seed
    try:
        spec = SceneSpec(**spec_d)
    except TypeError as e:
        raise InvalidSpec(f"bad scene spec: {e}")
    seq, tracks, gt = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sequence(seq, out)
    save_tracks(tracks, out / "tracks.bin")
    save_arrays(out / "groundtruth.bin",
                {"xyz": gt.xyz,
                 "occluded": gt.occluded.astype(np.uint8),
                 "cluster": gt.cluster.astype(np.int64),
                 "cluster_R": gt.cluster_R,
                 "cluster_t": gt.cluster_t},
                meta={"spec": dataclasses.asdict(spec)})
    print(f"wrote {seq.n_frames}-frame bundle to {out}")
    return 0


# ---------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------


def _write_ckpt(path, trainer: Trainer, cfg: TrainConfig) -> None:
    save_checkpoint(path, trainer.model.state_dict(), trainer.opt.state_dict(),
                    config_echo=config_to_dict(cfg),
                    rng_state=trainer.rng.bit_generator.state,
                    extra={"history": trainer.history})


def cmd_fit(args) -> int:
    seq = load_sequence(args.bundle)
    tracks = load_tracks(Path(args.bundle) / "tracks.bin")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"

    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg_d = dict(ck["config"])
        if args.epochs is not None:
            cfg_d["epochs"] = args.epochs
        cfg = config_from_dict(cfg_d)
        model = scene_model_from_state(ck["model"])
        trainer = Trainer(model, seq, tracks, cfg)
        trainer.resume_from(ck["opt"], ck["rng_state"], ck["extra"]["history"])
    else:
        cfg_d = _load_json(args.config) if args.config else {}
        cfg = config_from_dict(cfg_d)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.ablate is not None:
            over["ablate"] = args.ablate
        if args.epochs is not None:
            over["epochs"] = args.epochs
        if over:
            cfg = dataclasses.replace(cfg, **over)
        model, _ = init_model(seq, tracks, cfg)
        trainer = Trainer(model, seq, tracks, cfg)

    total = cfg.epochs * trainer.steps_per_epoch()
    try:
        while len(trainer.history) < total:
            trainer.step()
            if args.checkpoint_every and \
                    len(trainer.history) % args.checkpoint_every == 0:
                _write_ckpt(ckpt_path, trainer, cfg)
    except NonFiniteValue as e:
        # the trainer restored its last finite state; persist that
        _write_ckpt(ckpt_path, trainer, cfg)
        write_history_csv(trainer.history, out / "history.csv")
        print(f"error: {e}", file=sys.stderr)
        return 3
    _write_ckpt(ckpt_path, trainer, cfg)
    write_history_csv(trainer.history, out / "history.csv")
    last = trainer.history[-1]["total"] if trainer.history else float("nan")
    print(f"fit: {len(trainer.history)} steps, final total loss {last:.6g}")
    return 0


# ---------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    seq = load_sequence(args.bundle)
    arrays, _ = load_arrays(args.gt)
    model = scene_model_from_state(ck["model"])
    rep = evaluate_model(model, seq, arrays["xyz"],
                         arrays["occluded"].astype(bool))
    doc = report_json(rep)
    if args.out:
        Path(args.out).write_text(doc + "\n")
        print(f"wrote report to {args.out}")
    else:
        print(doc)
    return 0


# ---------------------------------------------------------------------
# export
# ---------------------------------------------------------------------


def _parse_frames(arg: str | None, T: int) -> list[int]:
    if not arg:
        return list(range(T))
    try:
        frames = [int(s) for s in arg.split(",")]
    except ValueError:
        raise InvalidSpec(f"bad --frames list {arg!r}")
    bad = [f for f in frames if not 0 <= f < T]
    if bad:
        raise InvalidSpec(f"frames out of range: {bad} (T={T})")
    return frames


def cmd_export(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = scene_model_from_state(ck["model"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.what == "ply":
        write_ply(model.gaussians(), out / "model.ply")
        print(f"wrote {out / 'model.ply'}")
        return 0

    if args.bundle is None:
        raise InvalidSpec(f"--bundle is required for {args.what}")
    seq = load_sequence(args.bundle)

    if args.what == "tracks-csv":
        gs = model.gaussians()
        dyn = gs.is_dynamic
        bases, coeffs = model.motion()
        xyz = trajectories(gs.mu0[dyn], coeffs.weights(), bases)
        P, T = xyz.shape[:2]
        path = out / "tracks.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["point_id", "frame", "x", "y", "z", "u", "v",
                        "visible"])
            for t in range(T):
                cam = seq.cams[t]
                Xc = xyz[:, t] @ cam.E.R.T + cam.E.t
                z = Xc[:, 2]
                front = z > Z_NEAR
                with np.errstate(divide="ignore", invalid="ignore"):
                    u = cam.fx * Xc[:, 0] / z + cam.cx
                    v = cam.fy * Xc[:, 1] / z + cam.cy
                vis = (front & (u >= 0) & (u <= cam.width - 1)
                       & (v >= 0) & (v <= cam.height - 1))
                for p in range(P):
                    w.writerow([p, t, *(f"{c:.9g}" for c in xyz[p, t]),
                                f"{u[p]:.6g}", f"{v[p]:.6g}", int(vis[p])])
        print(f"wrote {P * T} rows to {path}")
        return 0

    # renders
    frames = _parse_frames(args.frames, seq.n_frames)
    for t in frames:
        ren = render_view(model, seq.cams[t], t)
        save_image_png(out / f"render_{t:04d}.png",
                       np.clip(ren.image, 0.0, 1.0))
    print(f"wrote {len(frames)} renders to {out}")
    return 0


# ---------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------


def _suite_camera(width=10, height=10):
    R = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])
    pos = np.array([0.0, 0.0, 3.0])
    return make_camera(float(width), float(width), (width - 1) / 2.0,
                       (height - 1) / 2.0, RigidTransform(R, -R @ pos),
                       width, height)


def _suite_params(rng, n=4, T=3, B=2):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    rot = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (B, T, 1))
    rot += 0.1 * rng.normal(size=rot.shape)
    return {
        "mu0": Parameter(rng.uniform(-0.5, 0.5, size=(n, 3)), "mu0"),
        "quat": Parameter(q, "quat"),
        "log_scale": Parameter(np.log(rng.uniform(0.15, 0.4, (n, 3))),
                               "log_scale"),
        "opacity": Parameter(rng.uniform(0.0, 2.0, n), "opacity"),
        "color": Parameter(rng.uniform(0.1, 0.9, (n, 3)), "color"),
        "logits": Parameter(0.5 * rng.normal(size=(n, B)), "logits"),
        "rot6d": Parameter(rot, "rot6d"),
        "transl": Parameter(0.2 * rng.normal(size=(B, T, 3)), "transl"),
    }


def _dyn_at(tape, lv, t):
    w = ad.softmax(lv["logits"], axis=-1)
    R_b, t_b = blend_vars(w, lv["rot6d"][:, t], lv["transl"][:, t])
    R0 = quat_to_matrix_var(lv["quat"])
    mu = ad.einsum("nij,nj->ni", R_b, lv["mu0"]) + t_b
    return mu, ad.einsum("nij,njk->nik", R_b, R0)


def _suite_render(tape, cam, lv, t, extra=None):
    mu, R = _dyn_at(tape, lv, t)
    payload = tape.const(np.ones((lv["mu0"].value.shape[0], 1)))
    if extra is not None:
        payload = ad.concat([payload, extra], axis=1)
    return render_graph(tape, cam, mu, R, lv["log_scale"].exp(),
                        lv["opacity"].sigmoid(), lv["color"],
                        extra_payload=payload)


def gradient_suite(n_seeds: int = 20, base_seed: int = 0) -> list[dict]:
    """Finite-difference checks of every loss term on tiny random scenes.

    The four reconstruction terms and the two track terms rotate across
    seeds (one render gradcheck each per seed); rigidity, smoothness and
    isotropy run every seed.  Returns rows {loss, seed, error}.
    """
    cam = _suite_camera()
    H, W = cam.height, cam.width
    rows = []
    recon_terms = ("image", "depth", "mask", "depthgrad")
    track_terms = ("track2d", "trackdepth")
    for i in range(n_seeds):
        seed = base_seed + i
        rng = np.random.default_rng(seed)
        lv = _suite_params(rng)
        params = list(lv.values())
        img = rng.uniform(0.0, 1.0, (H, W, 3))
        dep = rng.uniform(2.0, 4.0, (H, W))
        msk = rng.random((H, W)) > 0.5
        wts = LossWeights()

        term = recon_terms[i % len(recon_terms)]

        def build_recon():
            tape = Tape()
            leaves = {k: tape.leaf(p) for k, p in lv.items()}
            out = _suite_render(tape, cam, leaves, 0)
            return loss_recon(out, img, dep, msk, wts)[term]

        rows.append({"loss": term, "seed": seed,
                     "error": float(check_gradients(build_recon, params)[0])})

        uv_obs = rng.uniform(1.0, W - 2.0, (3, 2))
        uv_q = rng.uniform(2.0, W - 3.0, (3, 2))
        ti = i % len(track_terms)

        def build_track():
            tape = Tape()
            leaves = {k: tape.leaf(p) for k, p in lv.items()}
            mu_tgt, _ = _dyn_at(tape, leaves, 1)
            out = _suite_render(tape, cam, leaves, 0, extra=mu_tgt)
            world = ad.bilinear_sample(out[:, :, 5:8], uv_q)
            tgt = _suite_render(tape, cam, leaves, 1)
            depth_obs = ad.bilinear_sample(tgt[:, :, CH_DEPTH], uv_obs)[:, 0]
            pair = loss_track(world, cam, uv_obs, depth_obs, wts)
            return pair[ti]

        rows.append({"loss": track_terms[ti], "seed": seed,
                     "error": float(check_gradients(build_track, params)[0])})

        centers = np.array([0, 1])
        nbrs = np.array([[2, 3], [3, 2]])

        def build_rigidity():
            tape = Tape()
            leaves = {k: tape.leaf(p) for k, p in lv.items()}
            mu_a, _ = _dyn_at(tape, leaves, 0)
            mu_b, _ = _dyn_at(tape, leaves, 2)
            return loss_rigidity(mu_a, mu_b, centers, nbrs, beta=2.0)

        rows.append({"loss": "rigidity", "seed": seed,
                     "error": float(check_gradients(build_rigidity, params)[0])})

        def build_smooth():
            tape = Tape()
            leaves = {k: tape.leaf(p) for k, p in lv.items()}
            zs = []
            for t in range(3):
                mu_t, _ = _dyn_at(tape, leaves, t)
                zs.append(project_var(cam, mu_t)[1])
            return loss_smooth(leaves["rot6d"], leaves["transl"],
                               ad.stack(zs, axis=1))

        rows.append({"loss": "smooth", "seed": seed,
                     "error": float(check_gradients(build_smooth, params)[0])})

        def build_isotropy():
            tape = Tape()
            return loss_isotropy(tape.leaf(lv["log_scale"]).exp())

        rows.append({"loss": "isotropy", "seed": seed,
                     "error": float(check_gradients(
                         build_isotropy, [lv["log_scale"]])[0])})
    return rows


def cmd_check_grads(args) -> int:
    rows = gradient_suite(args.seeds, args.seed or 0)
    worst: dict = {}
    for r in rows:
        worst[r["loss"]] = max(worst.get(r["loss"], 0.0), r["error"])
    ok = True
    for name in sorted(worst):
        status = "pass" if worst[name] < GRAD_TOL else "FAIL"
        ok &= worst[name] < GRAD_TOL
        print(f"{name:11s} worst rel err {worst[name]:.3e}  {status}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return 0 if ok else 1


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dynsplat",
        description="Dynamic Gaussian scene fitting with shared SE(3) "
                    "motion bases.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a scene bundle")
    g.add_argument("--spec", required=True, help="scene spec JSON")
    g.add_argument("--out", required=True, help="output bundle directory")
    g.add_argument("--seed", type=int, default=None,
                   help="override the spec seed")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model to a bundle")
    f.add_argument("--bundle", required=True, help="input bundle directory")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--config", default=None, help="training config JSON")
    f.add_argument("--seed", type=int, default=None, help="override seed")
    f.add_argument("--ablate", default=None,
                   choices=("none", "no-tracks", "no-init", "transl-bases",
                            "per-gaussian"),
                   help="ablation mode")
    f.add_argument("--epochs", type=int, default=None,
                   help="override epoch count")
    f.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    f.add_argument("--checkpoint-every", type=int, default=0,
                   help="also write a checkpoint every N steps")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a checkpoint against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bundle", required=True)
    e.add_argument("--gt", required=True, help="ground-truth arrays file")
    e.add_argument("--out", default=None, help="report JSON path (stdout "
                   "when omitted)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export model artifacts")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--what", required=True,
                   choices=("ply", "tracks-csv", "renders"))
    x.add_argument("--out", required=True)
    x.add_argument("--bundle", default=None,
                   help="bundle directory (tracks-csv and renders)")
    x.add_argument("--frames", default=None,
                   help="comma-separated frame list for renders")
    x.set_defaults(func=cmd_export)

    c = sub.add_parser("check-grads", help="run the gradient suite")
    c.add_argument("--seeds", type=int, default=20, help="number of seeds")
    c.add_argument("--seed", type=int, default=0, help="base seed")
    c.add_argument("--out", default=None, help="write per-check JSON here")
    c.set_defaults(func=cmd_check_grads)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DynsplatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
