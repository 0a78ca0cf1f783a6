"""Command-line entry point: `octran <command> ...`.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Metrics go to stdout as key=value lines; tables are CSV with a header row.
Every command can write a JSON run manifest (`--manifest`); commands that produce a file
default to `<out>.run.json` next to it, so the artifact itself stays byte-reproducible.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from . import attention as A
from . import geometry as G
from . import model as M
from . import scenes as S
from . import tensor as T
from .kvfile import KVError, parse_floats, parse_ints, read_kv

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
SEED_ENV = "OCTRAN_SEED"


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


class NumericalFailure(Exception):
    """Divergence or a failed numerical check; exit code 3."""


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file or directory: {p}")
    return p


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, Path):
        return str(x)
    return x


class RunManifest:
    def __init__(self, command: str, argv: list[str]):
        self.data = {
            "command": command,
            "argv": argv,
            "tool": "octran",
            "version": __version__,
            "started": _now(),
            "finished": None,
            "seed": None,
            "config": None,
            "outputs": [],
            "metrics": {},
        }

    def write(self, path: Path) -> None:
        self.data["finished"] = _now()
        text = json.dumps(_jsonable(self.data), indent=1, sort_keys=True) + "\n"
        _atomic_write(path, text.encode())


def _emit(**metrics) -> None:
    for k, v in metrics.items():
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")


def load_camera(path) -> G.StereoCamera:
    kv = read_kv(_require(path))
    try:
        return G.StereoCamera(
            f_x=float(kv["f_x"]), f_y=float(kv["f_y"]), o_x=float(kv["o_x"]), o_y=float(kv["o_y"]),
            b=float(kv["b"]), width=int(kv["width"]), height=int(kv["height"]),
        )
    except KeyError as e:
        raise InputError(f"camera file {path} lacks key {e.args[0]}") from None


def load_grid(path) -> G.VoxelGridSpec:
    kv = read_kv(_require(path))
    try:
        return G.VoxelGridSpec(parse_ints(kv["grid_dims"], 3), parse_floats(kv["grid_extent"], 3),
                               parse_floats(kv["grid_origin"], 3))
    except KeyError as e:
        raise InputError(f"grid file {path} lacks key {e.args[0]}") from None


# --- commands -------------------------------------------------------------------------------------

def cmd_gen_data(args, run: RunManifest):
    spec = S.SceneSpec.load(_require(args.spec))
    seed = args.seed if args.seed is not None else _env_seed()
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    if args.count < 1:
        raise InputError("--count must be >= 1")
    samples = S.generate_dataset(spec, args.count)
    out = Path(args.out)
    _atomic_write(out, S.shard_bytes(samples, spec.camera, spec.grid, spec.gt_mode))
    occupied = float(np.mean([s.gt.occupancy.mean() for s in samples]))
    run.data.update(seed=spec.seed, config=spec.to_kv(), outputs=[str(out)])
    run.data["metrics"] = {"samples": len(samples), "occupied_fraction": occupied}
    _emit(samples=len(samples), occupied_fraction=occupied, out=str(out))
    return out


def _load_samples(path):
    return S.read_shard(_require(path)).samples


def cmd_train(args, run: RunManifest):
    cfg = M.OctranConfig.load(_require(args.config))
    seed = _env_seed()
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    samples = _load_samples(args.data)
    steps = cfg.steps if args.steps is None else args.steps
    state = None
    if args.resume:
        state = M.load_checkpoint(_require(args.resume))
        if state.model.cfg != cfg:
            raise InputError(f"checkpoint {args.resume} was trained with a different config")
    out = Path(args.out)
    if out.exists() and not (out / "manifest.json").exists() and any(out.iterdir()):
        raise InputError(f"refusing to overwrite non-checkpoint directory {out}")
    run.data.update(seed=cfg.seed, config=cfg.to_dict(), outputs=[str(out)])

    def log(st):
        if args.log_every and (st.step % args.log_every == 0 or st.step == steps):
            h = st.history[-1]
            print(f"step={h['step']} loss={h['loss']!r} iou={h['iou']!r}", flush=True)

    try:
        # overflow on the way to a non-finite loss is expected; divergence is reported below
        with np.errstate(over="ignore", invalid="ignore"):
            state = M.train(cfg, samples, steps=steps, state=state, on_step=log)
    except M.DivergedError as e:
        raise NumericalFailure(f"training diverged at step {e.step}") from None
    tmp = out.with_name(f".{out.name}.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    M.save_checkpoint(state, tmp)
    if out.exists():
        shutil.rmtree(out)
    tmp.replace(out)
    hist = state.history
    metrics = {"steps": state.step}
    if hist:
        metrics.update(initial_loss=hist[0]["loss"], final_loss=hist[-1]["loss"], final_iou=hist[-1]["iou"])
    run.data["metrics"] = metrics
    _emit(**metrics)
    return out


def cmd_eval(args, run: RunManifest):
    state = M.load_checkpoint(_require(args.ckpt))
    samples = _load_samples(args.data)
    threshold = args.threshold if args.threshold is not None else state.model.cfg.threshold
    iou = M.evaluate(state.model, samples, threshold)
    base = M.baseline_ious(samples)
    metrics = {"iou": iou, "baseline_empty": base["empty"], "baseline_full": base["full"], "samples": len(samples)}
    run.data.update(seed=state.model.cfg.seed, config=state.model.cfg.to_dict(), metrics=metrics)
    _emit(**metrics)


def cmd_project(args, run: RunManifest):
    cam = load_camera(args.cam)
    dm = S.load_pfm(_require(args.pfm))
    if (dm.width, dm.height) != (cam.width, cam.height):
        raise InputError(f"disparity map is {dm.width}x{dm.height}, camera is {cam.width}x{cam.height}")
    pc = G.disparity_to_pointcloud(cam, dm)
    out = Path(args.out)
    metrics = {"points": len(pc)}
    if out.suffix == ".ply":
        G.save_ply(pc.points, out)
    elif out.suffix == ".ocgr":
        grid = load_grid(args.grid) if args.grid else S.REFERENCE_GRID
        occ = G.voxelize(pc, grid)
        _atomic_write(out, G.ocgr_bytes(occ))
        metrics.update(occupied=occ.count(), dropped=occ.dropped)
    else:
        raise InputError(f"--out must end in .ply or .ocgr, got {out}")
    run.data.update(outputs=[str(out)], metrics=metrics)
    _emit(**metrics)
    return out


def cmd_depth_error_table(args, run: RunManifest):
    cam = load_camera(args.cam)
    if not 0 < args.zmin <= args.zmax:
        raise InputError("need 0 < --zmin <= --zmax")
    if args.zstep <= 0:
        raise InputError("--zstep must be > 0")
    n = int(np.floor((args.zmax - args.zmin) / args.zstep + 1e-9)) + 1
    print("z,delta_z")
    for k in range(n):
        z = args.zmin + k * args.zstep
        print(f"{z!r},{float(G.depth_error(cam, z, args.dd))!r}")
    run.data["metrics"] = {"rows": n}


def cmd_bench_attention(args, run: RunManifest):
    try:
        ms = parse_ints(args.m_list)
    except (KVError, ValueError):
        raise InputError(f"--m-list must be comma-separated integers, got {args.m_list!r}") from None
    if not ms or min(ms) < 1 or args.n < 1 or args.d < 1:
        raise InputError("M, N and d must all be >= 1")
    print("M,cross_macs,self_macs")
    rows = []
    for m in ms:
        r = A.measure_attention_macs(m, args.n, args.d)
        rows.append([m, r["cross_scores"], r["self_scores"]])
        print(f"{m},{r['cross_scores']},{r['self_scores']}")
    run.data["metrics"] = {"rows": rows}


def cmd_pipeline_check(args, run: RunManifest):
    shard = S.read_shard(_require(args.data))
    violations = 0
    for s in shard.samples:
        violations += S.pipeline_consistency(s, shard.camera, shard.grid).violations
    metrics = {"samples": len(shard.samples), "violations": violations}
    run.data["metrics"] = metrics
    _emit(**metrics)
    if violations:
        raise NumericalFailure(f"{violations} voxels fall outside the dilated surface ground truth")


# --- parser -----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octran", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"octran {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--manifest", help="run manifest path (JSON)")
        return sp

    sp = add("gen-data", cmd_gen_data, "render a synthetic dataset shard")
    sp.add_argument("--spec", required=True, help="scene spec (key=value file)")
    sp.add_argument("--out", required=True, help="output shard")
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--seed", type=int, default=None, help=f"overrides the spec seed and ${SEED_ENV}")

    sp = add("train", cmd_train, "train a model and write a checkpoint directory")
    sp.add_argument("--config", required=True, help="model config (key=value file)")
    sp.add_argument("--data", required=True, help="training shard")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--steps", type=int, default=None, help="total step count (default: config steps)")
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    sp.add_argument("--log-every", type=int, default=0, help="print step/loss/iou every N steps")

    sp = add("eval", cmd_eval, "mean IoU of a checkpoint on a shard")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--threshold", type=float, default=None)

    sp = add("project", cmd_project, "back-project a PFM disparity map to PLY or OCGR")
    sp.add_argument("--pfm", required=True)
    sp.add_argument("--cam", required=True, help="camera (key=value file)")
    sp.add_argument("--out", required=True, help="*.ply or *.ocgr")
    sp.add_argument("--grid", default=None, help="grid (key=value file) for OCGR output")

    sp = add("depth-error-table", cmd_depth_error_table, "CSV of depth error against depth")
    sp.add_argument("--cam", required=True)
    sp.add_argument("--zmin", type=float, required=True)
    sp.add_argument("--zmax", type=float, required=True)
    sp.add_argument("--dd", type=float, required=True, help="disparity error in pixels")
    sp.add_argument("--zstep", type=float, default=1.0)

    sp = add("bench-attention", cmd_bench_attention, "CSV of recorded attention score MACs")
    sp.add_argument("--m-list", required=True, help="comma-separated token counts")
    sp.add_argument("--n", type=int, required=True, help="latent count")
    sp.add_argument("--d", type=int, required=True, help="head width")

    sp = add("pipeline-check", cmd_pipeline_check, "check disparity back-projection against ground truth")
    sp.add_argument("--data", required=True)
    return p


INPUT_ERRORS = (InputError, KVError, G.GeometryError, S.SceneError, S.PfmError, S.ShardError,
                M.ConfigError, M.CheckpointError, T.TensorFormatError, OSError, ValueError)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    run = RunManifest(args.command, argv)
    code = EXIT_OK
    try:
        out = args.fn(args, run)
    except NumericalFailure as e:
        print(f"octran {args.command}: {e}", file=sys.stderr)
        run.data["error"] = str(e)
        code, out = EXIT_NUMERIC, None
    except INPUT_ERRORS as e:
        print(f"octran {args.command}: {e}", file=sys.stderr)
        return EXIT_INPUT
    manifest = args.manifest or (f"{out}.run.json" if out is not None else None)
    if manifest:
        run.data["exit_code"] = code
        run.write(Path(manifest))
    return code


if __name__ == "__main__":
    sys.exit(main())
