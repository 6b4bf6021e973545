#!/usr/bin/env python3
"""
ws_cli.py — Command-line surface for the desk-scale wavelet stereo experiments.

Usage:
    python3 ws_cli.py dwt       --input img.pgm --levels 3 --out bands/ [--verify] [--pad reflect]
    python3 ws_cli.py synth     --spec spec.json --out data/
    python3 ws_cli.py train-toy --config ws_config.json --data data/ --out model.wstw
    python3 ws_cli.py infer     --weights model.wstw --left l.ppm --right r.ppm --iters 16 --out pred/
    python3 ws_cli.py eval      --pred pred/ --gt data/pair000.disp.pfm --ref-image l.ppm \
                                --out metrics.json --trace trace.csv [--chart trace.png]
    python3 ws_cli.py gradcheck [--config c.json] [--seed 17]

Every command accepts --threads (fallback: WSTEREO_THREADS, then
runtime.threads from the config) and writes a run manifest next to its
outputs. Outputs depend only on flags, input files and seed; manifests also
carry wall-clock timings and are therefore not byte-stable.

Exit codes: 0 success, 2 format/IO, 3 dimension/config, 4 numerical or
gradient-check failure, 5 training divergence.
"""

import argparse
import glob
import hashlib
import json
import logging
import os
import re
import sys
import time as _time
from typing import Dict, List, Optional

import numpy as np

import ws_pipeline
from ws_config import config_hash, load_config, make_config
from ws_freqeval import canny, convergence_trace, epe_split, write_trace_csv
from ws_stereo_io import (
    DisparityMap, SynthSpec, load_image, load_synth_dataset, read_pfm, read_pfm_array, read_png16,
    read_pnm, synth_pair, write_json, write_pfm_array, write_synth_dataset,
)
from ws_tensor import (
    ConfigError, DimensionError, FormatError, NumericalError, ParameterStore, Tensor, WaveletStereoError,
    gradcheck, precision, set_num_threads,
)
from ws_wavelet import build_pyramid, pad_reflect, reconstruct

__version__ = "1.0.0"

log = logging.getLogger("ws.cli")

MANIFEST_FILENAME = "manifest.json"
BAND_FILE = "{stem}.l{level}.{band}.pfm"
ITER_FILE = "disp.iter{k:02d}.pfm"
ITER_PATTERN = re.compile(r"disp\.iter(\d+)\.pfm")
FINAL_FILE = "disp.pfm"
WEIGHTS_CONFIG_SUFFIX = ".config.json"
LOSS_CURVE_SUFFIX = ".loss.csv"
THREADS_ENV = "WSTEREO_THREADS"
GRADCHECK_TOLERANCE = 1e-4
VERIFY_TOLERANCE = 1e-4

_BAND_ORDER = ("ll", "lh", "hl", "hh")


# ==============================================================================
# 1) Shared plumbing
# ==============================================================================

def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _file_map(paths: List[str]) -> Dict[str, Optional[str]]:
    return {p: (_sha256(p) if os.path.isfile(p) else None) for p in paths}


def _resolve_threads(args: argparse.Namespace, cfg: Optional[dict]) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    return cfg["runtime"]["threads"] if cfg else 1


def _apply_threads(args: argparse.Namespace, cfg: Optional[dict]) -> int:
    n = _resolve_threads(args, cfg)
    set_num_threads(n)
    args.threads_used = n
    return n


def _write_manifest(path: str, args: argparse.Namespace, cfg: Optional[dict], seed: Optional[int],
                    inputs: List[str], outputs: List[str], timings: Dict[str, float]) -> None:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config_hash": config_hash(cfg) if cfg else None,
        "seed": seed,
        "threads": args.threads_used,
        "inputs": _file_map(inputs),
        "outputs": _file_map(outputs),
        "stage_timings": {k: round(v, 6) for k, v in sorted(timings.items())},
        "version": __version__,
    }
    write_json(path, manifest)
    log.info("Manifest → %s", path)


def _manifest_beside(out_file: str) -> str:
    return os.path.splitext(out_file)[0] + "." + MANIFEST_FILENAME


def _load_grey_or_colour(path: str) -> np.ndarray:
    """PGM/PPM/PFM image as 1×C×H×W float64 (C = 1 or 3)."""
    if path.lower().endswith(".pfm"):
        arr = read_pfm_array(path).astype(np.float64)
    else:
        arr = read_pnm(path).astype(np.float64)
    if arr.ndim == 2:
        return arr[None, None]
    return arr.transpose(2, 0, 1)[None]


def _band_plane(t: Tensor) -> np.ndarray:
    """1×C×H×W band → H×W (grey) or H×W×3 (colour) for PFM."""
    arr = t.data[0]
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


# ==============================================================================
# 2) Commands
# ==============================================================================

def cmd_dwt(args: argparse.Namespace) -> int:
    _apply_threads(args, None)
    t0 = _time.perf_counter()
    img = _load_grey_or_colour(args.input)
    if img.shape[1] not in (1, 3):
        raise DimensionError(f"{args.input}: expected 1 or 3 channels, got {img.shape[1]}")
    if args.pad == "reflect":
        img = pad_reflect(img, args.levels)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    outputs = []
    with precision(np.float64):
        pyr = build_pyramid(Tensor(img), args.levels)
        for i, level in enumerate(pyr.levels, start=1):
            for band in _BAND_ORDER:
                path = os.path.join(args.out, BAND_FILE.format(stem=stem, level=i, band=band))
                write_pfm_array(path, _band_plane(getattr(level, band)))
                outputs.append(path)
        if args.verify:
            err = float(np.max(np.abs(reconstruct(pyr).data - img)))
            print(f"max-abs-err: {err:.3e}")
            if err >= VERIFY_TOLERANCE:
                raise NumericalError(f"stage verify: reconstruction error {err:.3e} >= {VERIFY_TOLERANCE}")
    log.info("dwt: %d levels of %s → %d sub-band files in %s", args.levels, args.input, len(outputs), args.out)
    _write_manifest(os.path.join(args.out, MANIFEST_FILENAME), args, None, None, [args.input], outputs,
                    {"dwt": _time.perf_counter() - t0})
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    _apply_threads(args, None)
    t0 = _time.perf_counter()
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec()
    if args.spec is None:
        log.warning("synth: no --spec given, using the default constant d=%.1f spec", spec.disparity)
    outputs = write_synth_dataset(spec, args.out)
    _write_manifest(os.path.join(args.out, MANIFEST_FILENAME), args, None, spec.seed,
                    [args.spec] if args.spec else [], outputs, {"synth": _time.perf_counter() - t0})
    return 0


def cmd_train_toy(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = make_config({**cfg, "seed": args.seed})
    if args.steps is not None:
        cfg = make_config({**cfg, "train": {**cfg["train"], "steps": args.steps}})
    _apply_threads(args, cfg)
    ws_pipeline.reset_stage_timings()
    pairs = load_synth_dataset(args.data)
    t0 = _time.perf_counter()
    params, curve = ws_pipeline.train_toy(pairs, cfg)
    elapsed = _time.perf_counter() - t0

    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    params.save(args.out)
    config_path = args.out + WEIGHTS_CONFIG_SUFFIX
    curve_path = args.out + LOSS_CURVE_SUFFIX
    write_json(config_path, cfg)
    ws_pipeline.write_loss_curve(curve, curve_path)
    if args.chart:
        from ws_charts import plot_loss_curve
        plot_loss_curve(curve, args.chart)

    inputs = ([args.config] if args.config else []) + sorted(
        p for p in glob.glob(os.path.join(args.data, "*")) if os.path.basename(p) != MANIFEST_FILENAME
    )
    outputs = [args.out, config_path, curve_path] + ([args.chart] if args.chart else [])
    timings = {**ws_pipeline.stage_timings(), "train": elapsed}
    _write_manifest(_manifest_beside(args.out), args, cfg, cfg["seed"], inputs, outputs, timings)
    return 0


def _infer_config(args: argparse.Namespace) -> dict:
    if args.config:
        return load_config(args.config)
    sidecar = args.weights + WEIGHTS_CONFIG_SUFFIX
    if os.path.exists(sidecar):
        return load_config(sidecar)
    log.warning("infer: no --config and no %s; using default config", sidecar)
    return make_config()


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _infer_config(args)
    _apply_threads(args, cfg)
    ws_pipeline.reset_stage_timings()
    params = ParameterStore.load(args.weights)
    left, right = load_image(args.left), load_image(args.right)
    if left.shape != right.shape:
        raise DimensionError(f"left {left.shape[2:]} and right {right.shape[2:]} images differ in size")
    h, w = left.shape[2:]
    if args.pad == "reflect":
        # the update runs at 1/4 and the context encoder halves twice more
        left, right = pad_reflect(left, 4), pad_reflect(right, 4)
    n_k = args.iters if args.iters is not None else cfg["eval"]["n_k"]
    result = ws_pipeline.predict(params, cfg, left, right, n_k)

    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for k, disp in enumerate(result.disparities, start=1):
        path = os.path.join(args.out, ITER_FILE.format(k=k))
        write_pfm_array(path, disp.data[0, 0, :h, :w])
        outputs.append(path)
    final = os.path.join(args.out, FINAL_FILE)
    write_pfm_array(final, result.disparities[-1].data[0, 0, :h, :w])
    outputs.append(final)
    log.info("infer: %d iterations, update stage %.2fs (%.3fs/iter) → %s",
             result.n_k, result.update_runtime, result.update_runtime / result.n_k, args.out)

    inputs = [args.weights, args.left, args.right] + ([args.config] if args.config else [])
    _write_manifest(os.path.join(args.out, MANIFEST_FILENAME), args, cfg, cfg["seed"], inputs, outputs,
                    ws_pipeline.stage_timings())
    return 0


def _read_gt(path: str) -> DisparityMap:
    if path.lower().endswith(".png"):
        return read_png16(path)
    return read_pfm(path)


def _iteration_index(path: str) -> int:
    match = ITER_PATTERN.fullmatch(os.path.basename(path))
    if match is None:
        raise FormatError(f"{path}: not an iteration file (expected disp.iterNN.pfm)")
    return int(match.group(1))


def _prediction_files(pred: str) -> List[str]:
    """Per-iteration files of an infer output dir in iteration order, or a single prediction file."""
    if os.path.isdir(pred):
        files = sorted(glob.glob(os.path.join(pred, "disp.iter*.pfm")), key=_iteration_index)
        if not files:
            final = os.path.join(pred, FINAL_FILE)
            if not os.path.exists(final):
                raise FileNotFoundError(f"{pred}: no disparity PFM files")
            files = [final]
        return files
    return [pred]


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else make_config()
    _apply_threads(args, cfg)
    t0 = _time.perf_counter()
    gt = _read_gt(args.gt)
    files = _prediction_files(args.pred)
    preds = [read_pfm_array(p).astype(np.float64) for p in files]
    for p, arr in zip(files, preds):
        if arr.shape != gt.shape:
            raise DimensionError(f"{p}: prediction {arr.shape} does not match ground truth {gt.shape}")
        bad = int((~np.isfinite(arr[gt.valid])).sum())
        if bad:
            raise NumericalError(f"{p}: {bad} non-finite disparity value(s) at valid pixels")
    low = cfg["eval"]["canny_low"] if args.canny_low is None else args.canny_low
    high = cfg["eval"]["canny_high"] if args.canny_high is None else args.canny_high
    mask = canny(load_image(args.ref_image), low, high)
    if mask.mask.shape != gt.shape:
        raise DimensionError(f"reference image {mask.mask.shape} does not match ground truth {gt.shape}")

    metrics = epe_split(preds[-1], gt, mask)
    report = {**metrics.to_dict(), "n_k": len(preds), "n_valid": int(gt.valid.sum()),
              "canny_low": low, "canny_high": high}
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_json(args.out, report)
    outputs = [args.out]
    trace = convergence_trace(preds, gt, mask)
    if args.trace:
        write_trace_csv(trace, args.trace)
        outputs.append(args.trace)
    if args.chart:
        from ws_charts import plot_convergence
        plot_convergence(trace, args.chart)
        outputs.append(args.chart)
    hi = "absent" if metrics.epe_high is None else f"{metrics.epe_high:.4f}"
    lo = "absent" if metrics.epe_low is None else f"{metrics.epe_low:.4f}"
    log.info("eval: EPE %.4f (edges %s, smooth %s), D1 %.2f%% over %d iteration file(s)",
             metrics.epe_total, hi, lo, metrics.d1, len(preds))

    inputs = files + [args.gt, args.ref_image] + ([args.config] if args.config else [])
    _write_manifest(_manifest_beside(args.out), args, cfg, None, inputs, outputs,
                    {"eval": _time.perf_counter() - t0})
    return 0


def gradcheck_config(cfg: dict) -> dict:
    """Copy of cfg set up for finite differences: 2 iterations, gradients through every path."""
    model = {**cfg["model"], "detach_lookup_disparity": False, "head_zero_init": False}
    return make_config({**cfg, "model": model, "train": {**cfg["train"], "n_k": 2}})


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = gradcheck_config(load_config(args.config))
    seed = cfg["seed"] if args.seed is None else args.seed
    _apply_threads(args, cfg)
    t0 = _time.perf_counter()
    left, right, gt = synth_pair(SynthSpec(width=32, height=16, disparity=2.0, disparity_end=2.0,
                                           seed=seed))
    left_nchw = np.repeat(left[None, None], 3, axis=1)
    right_nchw = np.repeat(right[None, None], 3, axis=1)
    valid = gt.valid.astype(np.float64)
    store = ws_pipeline.init_params(cfg, seed)

    def loss_fn(params: ParameterStore) -> Tensor:
        result = ws_pipeline.predict(params, cfg, left_nchw, right_nchw, cfg["train"]["n_k"])
        return ws_pipeline.loss(result, gt.values, cfg["train"]["gamma"], valid)

    result = gradcheck(loss_fn, store, eps=args.eps, max_entries=args.entries, seed=seed)
    report = result.to_dict(GRADCHECK_TOLERANCE)
    failed = report["failed"]
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_json(args.out, report)
    print(f"gradcheck: {len(result.relative)} parameters, worst relative error {result.worst:.3e}, "
          f"{len(failed)} failing, {len(report['below_noise'])} below noise floor {result.noise_floor:.1e}")
    _write_manifest(_manifest_beside(args.out), args, cfg, seed, [args.config] if args.config else [],
                    [args.out], {"gradcheck": _time.perf_counter() - t0})
    if failed:
        raise NumericalError(f"gradcheck: {len(failed)} parameter(s) at or above {GRADCHECK_TOLERANCE}: "
                             + ", ".join(failed[:5]) + (" ..." if len(failed) > 5 else ""))
    return 0


# ==============================================================================
# 3) Parser and entry point
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ws_cli", description="Desk-scale wavelet stereo experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"Worker threads for row-parallel ops (fallback ${THREADS_ENV}, then config)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dwt", parents=[common], help="Haar pyramid of one image as sub-band PFMs")
    p.add_argument("--input", required=True, help="PGM/PPM/PFM image")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--verify", action="store_true", help="Print the cascaded reconstruction error")
    p.add_argument("--pad", choices=["reflect"], default=None, help="Pad up to a multiple of 2^levels")
    p.set_defaults(func=cmd_dwt)

    p = sub.add_parser("synth", parents=[common], help="Render a synthetic stereo set")
    p.add_argument("--spec", default=None, help="Synthetic spec JSON (default: constant d=4, 64x128)")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-toy", parents=[common], help="Deterministic toy training on a synthetic set")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="Directory written by `synth`")
    p.add_argument("--out", required=True, help="Weights file (.wstw)")
    p.add_argument("--seed", type=int, default=None, help="Override config seed")
    p.add_argument("--steps", type=int, default=None, help="Override train.steps")
    p.add_argument("--chart", default=None, help="Optional loss-curve PNG (needs matplotlib)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", parents=[common], help="Iterative disparity estimation on one pair")
    p.add_argument("--weights", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--iters", type=int, default=None, help="Update iterations (default eval.n_k)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--config", default=None, help="Default: <weights>.config.json, then built-in defaults")
    p.add_argument("--pad", choices=["reflect"], default=None, help="Pad inputs up to a multiple of 16")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="Frequency-split EPE metrics and convergence trace")
    p.add_argument("--pred", required=True, help="Prediction PFM or an `infer` output directory")
    p.add_argument("--gt", required=True, help="Ground truth PFM or 16-bit PNG")
    p.add_argument("--ref-image", required=True, help="Left image the edge mask is computed on")
    p.add_argument("--out", required=True, help="metrics.json")
    p.add_argument("--trace", default=None, help="Convergence CSV")
    p.add_argument("--chart", default=None, help="Optional convergence PNG (needs matplotlib)")
    p.add_argument("--config", default=None)
    p.add_argument("--canny-low", type=float, default=None)
    p.add_argument("--canny-high", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every parameter")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--entries", type=int, default=8, help="Entries probed per parameter tensor")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--out", default="gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    args.argv = argv
    args.threads_used = None
    try:
        return args.func(args) or 0
    except WaveletStereoError as exc:
        log.error("%s failed: %s", args.command, exc)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        log.error("%s failed (I/O): %s", args.command, exc)
        return 2
    except ValueError as exc:
        log.error("%s failed: %s", args.command, exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
