"""Command-line entry point: ``dynsurf <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("dynsurf")

COMMANDS = ("synth", "preprocess", "train", "render", "mesh", "eval", "gradcheck", "denoiser-serve-toy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_toml(path):
    from .training import tomllib

    try:
        return tomllib.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="dynsurf", description="Dynamic surface reconstruction from RGB-D sequences.",
                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", help="TOML file; a [%s] table overrides flag defaults" % name)
        p.add_argument("--seed", type=int, default=None, help="random seed (default: config 'seed' or 0)")
        return p

    p = add("synth", "Generate a synthetic deforming-scene dataset.")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--no-meshes", action="store_true", help="skip ground-truth meshes")

    p = add("preprocess", "Shift cameras onto the object axis and crop around the object.")
    p.add_argument("--data", required=True, help="input dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--dilation", type=float, default=0.1, help="crop margin around the mask")

    p = add("train", "Optimize a scene model on a dataset.")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="run directory (checkpoints, metrics.jsonl)")
    p.add_argument("--denoiser", default="none",
                   help="'none', an http(s) URL of a remote denoiser, or a toy target-bank directory")
    p.add_argument("--timeout", type=float, default=30.0, help="remote denoiser timeout in seconds")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-epoch", type=int, help="stop after this epoch (the schedule is unchanged)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config as TOML and exit")

    p = add("render", "Render a view of a trained model to PNG.")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--frame", type=int, default=0, help="frame index")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--mode", default="lambertian", choices=("albedo", "lambertian", "textureless"),
                   help="shading mode")
    p.add_argument("--size", type=int, default=128, help="image width and height")
    p.add_argument("--fov", type=float, default=45.0, help="field of view in degrees")
    p.add_argument("--radius", type=float, default=2.0, help="camera distance from the origin")
    p.add_argument("--polar-deg", type=float, default=75.0, help="camera polar angle from +z")
    p.add_argument("--azimuth-deg", type=float, default=0.0, help="camera azimuth about +z")
    p.add_argument("--raw", action="store_true", help="use raw instead of EMA parameters")

    p = add("mesh", "Extract a colored mesh at one frame.")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--frame", type=int, default=0, help="frame index")
    p.add_argument("--out", help="output PLY (default: next to the checkpoint)")
    p.add_argument("--resolution", type=int, default=128, help="marching-cubes grid size")
    p.add_argument("--raw", action="store_true", help="use raw instead of EMA parameters")

    p = add("eval", "Accuracy and completion of predicted meshes against ground truth.")
    p.add_argument("--pred", nargs="+", required=True, help="predicted PLY files")
    p.add_argument("--gt", nargs="+", required=True, help="ground-truth PLY files (same order)")
    p.add_argument("--samples", type=int, default=100_000, help="surface samples per mesh")
    p.add_argument("--out", help="metrics JSON output")

    p = add("gradcheck", "Finite-difference check of every loss gradient on a tiny model.")
    p.add_argument("--coords", type=int, default=6, help="checked coordinates per parameter tensor")
    p.add_argument("--step", type=float, default=1e-6, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4, help="maximum relative error")

    p = add("denoiser-serve-toy", "Serve the toy denoiser over HTTP.")
    p.add_argument("--targets", required=True, help="target-bank directory")
    p.add_argument("--port", type=int, default=8765, help="TCP port (0 picks a free one)")
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser, argv) -> tuple[argparse.Namespace, dict]:
    args = parser.parse_args(argv)
    cfg = _read_toml(args.config) if args.config else {}
    section = cfg.get(args.command, {})
    if section:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(k.replace("-", "_") for k in section) - known
        if unknown:
            raise UsageError(f"unknown keys in [{args.command}]: {sorted(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = int(cfg.get("seed", 0))
    return args, cfg


# -- commands ----------------------------------------------------------


def cmd_synth(args, cfg):
    from .dataio import SyntheticSceneSpec, synth_generate

    spec = SyntheticSceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    res = synth_generate(spec, args.out, with_meshes=not args.no_meshes)
    print(f"wrote {len(res.dataset)} frames to {args.out}")


def cmd_preprocess(args, cfg):
    from .dataio import load_dataset, preprocess, save_dataset

    ds = preprocess(load_dataset(args.data), args.dilation)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames to {args.out}")


def _train_config(args, cfg):
    from .training import config_from_dict

    plain = {k: v for k, v in cfg.items() if k not in COMMANDS}
    plain["seed"] = args.seed
    try:
        return config_from_dict(plain)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


def _make_denoiser(spec: str, timeout: float, guidance: float):
    from .denoise_server import TargetBank
    from .diffusion import RemoteDenoiser, ToyDenoiser

    if spec == "none":
        return None
    if spec.startswith(("http://", "https://")):
        return RemoteDenoiser(spec, timeout, guidance)
    return ToyDenoiser(TargetBank.load(spec))


def cmd_train(args, cfg):
    from .training import Trainer, config_to_toml

    if args.resume:
        from .training import config_from_toml, read_checkpoint

        meta = read_checkpoint(args.resume)[1]
        tcfg = config_from_toml(meta["config"])
    else:
        tcfg = _train_config(args, cfg)
    if args.print_config:
        sys.stdout.write(config_to_toml(tcfg))
        return
    if not args.data or not args.out:
        raise UsageError("train needs --data and --out")
    from .dataio import load_dataset

    ds = load_dataset(args.data)
    denoiser = _make_denoiser(args.denoiser, args.timeout, tcfg.guidance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config_to_toml(tcfg))
    log.info("resolved config:\n%s", config_to_toml(tcfg))
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, ds, denoiser)
    else:
        trainer = Trainer(ds, tcfg, denoiser)
    metrics = open(out / "metrics.jsonl", "a")

    def on_epoch(tr, reports):
        real = [r for r in reports if r["kind"] == "real"]
        virt = [r for r in reports if r["kind"] == "virtual" and "skipped" not in r]
        keys = sorted({k for r in real for k in r if isinstance(r[k], float) and k != "lr"})
        row = {"epoch": tr.epoch, "lr": real[0]["lr"] if real else None,
               "real_steps": tr.real_steps, "virtual_steps": tr.virtual_steps,
               "skipped_virtual": tr.skipped_virtual, "beta": float(tr.model.beta.detach())}
        row.update({k: float(np.mean([r[k] for r in real if k in r])) for k in keys})
        if virt:
            row["sds"] = float(np.mean([r.get("sds", 0.0) for r in virt]))
        metrics.write(json.dumps(row) + "\n")
        metrics.flush()
        terms = " ".join(f"{k}={row[k]:.4g}" for k in keys)
        log.info("epoch %d lr=%.3g beta=%.4g %s", tr.epoch, row["lr"] or 0.0, row["beta"], terms)

    try:
        trainer.run(until_epoch=args.stop_epoch, checkpoint_dir=out, on_epoch=on_epoch)
    finally:
        metrics.close()
    name = "final.ckpt" if trainer.epoch >= tcfg.e_max else f"epoch_{trainer.epoch:05d}.ckpt"
    trainer.save(out / name)
    print(f"wrote {out / name}")


def cmd_render(args, cfg):
    from PIL import Image
    import torch

    from .cameras import Intrinsics, PolarPose, from_polar, generate_rays, look_at, pixel_centers
    from .rendering import render_rays
    from .training import model_from_checkpoint

    model = model_from_checkpoint(args.ckpt, use_ema=not args.raw)
    pose = look_at(from_polar(PolarPose(args.radius, math.radians(args.polar_deg),
                                        math.radians(args.azimuth_deg))))
    intr = Intrinsics.from_fov(args.fov, args.size, args.size)
    rays = generate_rays(intr, pose, pixel_centers(args.size, args.size))
    light = pose.translation / np.linalg.norm(pose.translation)
    chunks = []
    with torch.no_grad():
        for i in range(0, len(rays), 4096):
            out = render_rays(model, rays[i : i + 4096], args.frame, args.mode, (1.0, 1.0, 1.0),
                              light_dir=light, with_normals=args.mode != "albedo")
            chunks.append(out.color.numpy())
    img = np.concatenate(chunks).reshape(args.size, args.size, 3)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(args.out)
    print(f"wrote {args.out}")


def cmd_mesh(args, cfg):
    from .evaluation import extract_mesh, write_ply
    from .training import model_from_checkpoint

    model = model_from_checkpoint(args.ckpt, use_ema=not args.raw)
    mesh = extract_mesh(model, args.frame, args.resolution)
    out = args.out or str(Path(args.ckpt).with_name(f"mesh_{args.frame:04d}.ply"))
    write_ply(mesh, out)
    print(f"wrote {out} ({mesh.n_triangles} triangles)")


def cmd_eval(args, cfg):
    from .evaluation import accuracy_completion, read_ply, write_metrics

    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt need the same number of files")
    per_frame = {}
    for i, (p, g) in enumerate(zip(args.pred, args.gt)):
        acc, comp = accuracy_completion(read_ply(p), read_ply(g), args.samples, args.seed)
        per_frame[str(i)] = {"pred": p, "gt": g, "acc": acc, "comp": comp}
    if args.out:
        summary = write_metrics(per_frame, args.out)
    else:
        summary = {k: float(np.mean([v[k] for v in per_frame.values()])) for k in ("acc", "comp")}
    print(json.dumps({"per_frame": per_frame, "mean": summary.get("mean", summary)}, indent=1))


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_gradcheck

    results = run_gradcheck(args.seed, args.coords, args.step)
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_rel_err)
        status = "ok" if r.max_rel_err <= args.tolerance else "FAIL"
        print(f"{r.term:8s} max_rel_err={r.max_rel_err:.3e} coords={r.n_coords:4d} {status}  {r.worst}")
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    if worst > args.tolerance:
        raise RuntimeError("gradient check failed")


def cmd_serve(args, cfg):
    from .denoise_server import TargetBank, make_server

    server = make_server(TargetBank.load(args.targets), args.port, args.host)
    host, port = server.server_address[:2]
    print(f"serving toy denoiser on http://{host}:{port}/v1/denoise", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "denoiser-serve-toy": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, cfg = _apply_config_defaults(parser, argv)
    except UsageError as exc:
        print(f"dynsurf: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse: --help exits 0, usage errors 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    resolved = {k: v for k, v in vars(args).items() if k != "verbose"}
    log.info("command %s seed=%d args=%s", args.command, args.seed, json.dumps(resolved, default=str))
    try:
        HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dynsurf: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.error("%s failed: %s", args.command, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
