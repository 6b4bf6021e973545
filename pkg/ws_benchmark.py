#!/usr/bin/env python3
"""
ws_benchmark.py — Iteration-count, IFA-round and ablation benchmark.

Runs in-process on a synthetic set and prints a consolidated report:

  Phase 1  update-stage runtime and EPE (all / edges / smooth) for each n_k
  Phase 2  IFA rounds sweep, n_j = 1..6 (--nj-sweep)
  Phase 3  variant ablation: every model variant trained with the same budget,
           compared on edge EPE (--ablation STEPS)

Usage:
    python3 ws_benchmark.py --weights model.wstw --data data/
    python3 ws_benchmark.py --iters 8,16,32 --nj-sweep
    python3 ws_benchmark.py --data train/ --eval-data eval/ --ablation 300

Without --weights the model is freshly initialized (timings only; EPE is
then meaningless). All numbers are also written to ws_benchmark_timing.json.
"""

import argparse
import copy
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import ws_pipeline
from ws_config import VARIANTS, load_config, make_config
from ws_freqeval import canny, epe_split
from ws_stereo_io import DisparityMap, SynthSpec, load_synth_dataset, synth_pair, to_nchw, write_json
from ws_tensor import ParameterStore, set_num_threads

BASE_DIR = Path(__file__).parent
TIMING_FILE = "ws_benchmark_timing.json"

logger = logging.getLogger("ws.benchmark")

Pair = Tuple[np.ndarray, np.ndarray, DisparityMap]


# ── CLI ───────────────────────────────────────────────────────────────────────
_parser = argparse.ArgumentParser(description="Wavelet stereo iteration/ablation benchmark")
_parser.add_argument("--config",    default=None, help="Config JSON (default: built-in defaults)")
_parser.add_argument("--weights",   default=None, help="Trained .wstw (default: fresh init)")
_parser.add_argument("--data",      default=None, help="Synthetic set dir (default: one default pair)")
_parser.add_argument("--eval-data", default=None, help="Eval set for --ablation (default: --data)")
_parser.add_argument("--iters",     default="8,16,32", help="Comma-separated n_k values (default 8,16,32)")
_parser.add_argument("--nj-sweep",  action="store_true", help="Sweep IFA rounds n_j = 1..6")
_parser.add_argument("--ablation",  type=int, default=0, metavar="STEPS",
                     help="Train every variant for STEPS steps and compare edge EPE")
_parser.add_argument("--threads",   type=int, default=1)
_parser.add_argument("--out",       default=str(BASE_DIR / TIMING_FILE))


def _fmt(seconds: float) -> str:
    if seconds >= 60:
        m = int(seconds // 60)
        s = seconds - m * 60
        return f"{m}m {s:.1f}s"
    return f"{seconds:.2f}s"


def _bar(value: float, max_val: float, width: int = 20) -> str:
    if max_val <= 0:
        return " " * width
    filled = int(round(value / max_val * width))
    return "█" * filled + "░" * (width - filled)


def _opt(v: Optional[float]) -> float:
    return np.nan if v is None else v


# ==============================================================================
# Studies
# ==============================================================================

def evaluate(params: ParameterStore, cfg: dict, pairs: Sequence[Pair], n_k: int) -> Dict[str, float]:
    """Mean final-iteration EPE over pairs plus mean update-stage runtime."""
    rows = []
    for left, right, gt in pairs:
        result = ws_pipeline.predict(params, cfg, left, right, n_k)
        mask = canny(left, cfg["eval"]["canny_low"], cfg["eval"]["canny_high"])
        m = epe_split(result.disparities[-1], gt, mask)
        rows.append({"epe_total": m.epe_total, "epe_high": _opt(m.epe_high), "epe_low": _opt(m.epe_low),
                     "update_s": result.update_runtime})
    # absent regions are NaN and skipped by the mean
    return pd.DataFrame(rows).mean().to_dict()


def iteration_study(params: ParameterStore, cfg: dict, pairs: Sequence[Pair],
                    n_ks: Sequence[int] = (8, 16, 32)) -> pd.DataFrame:
    rows = []
    for n_k in n_ks:
        stats = evaluate(params, cfg, pairs, n_k)
        rows.append({"n_k": n_k, **stats})
        logger.info("n_k=%d: update %.3fs, EPE %.4f", n_k, stats["update_s"], stats["epe_total"])
    return pd.DataFrame(rows, columns=["n_k", "epe_total", "epe_high", "epe_low", "update_s"])


def nj_sweep(params: ParameterStore, cfg: dict, pairs: Sequence[Pair], n_k: int,
             n_js: Sequence[int] = (1, 2, 3, 4, 5, 6)) -> pd.DataFrame:
    """IFA parameters do not depend on n_j, so one store serves every round count."""
    rows = []
    for n_j in n_js:
        run_cfg = copy.deepcopy(cfg)
        run_cfg["model"]["n_j"] = n_j
        rows.append({"n_j": n_j, **evaluate(params, make_config(run_cfg), pairs, n_k)})
    return pd.DataFrame(rows, columns=["n_j", "epe_total", "epe_high", "epe_low", "update_s"])


def ablation_study(train_pairs: Sequence[Pair], eval_pairs: Sequence[Pair], cfg: dict, steps: int,
                   variants: Sequence[str] = VARIANTS) -> pd.DataFrame:
    """Each variant trained from the same seed and budget, then evaluated at eval.n_k."""
    rows = []
    for variant in variants:
        run_cfg = copy.deepcopy(cfg)
        run_cfg["model"]["variant"] = variant
        run_cfg["train"]["steps"] = steps
        run_cfg = make_config(run_cfg)
        t0 = time.perf_counter()
        params, curve = ws_pipeline.train_toy(train_pairs, run_cfg)
        train_s = time.perf_counter() - t0
        stats = evaluate(params, run_cfg, eval_pairs, run_cfg["eval"]["n_k"])
        rows.append({"variant": variant, "parameters": params.num_parameters(),
                     "final_loss": float(curve["loss"].iloc[-1]), "train_s": train_s, **stats})
    return pd.DataFrame(rows, columns=["variant", "parameters", "final_loss", "train_s",
                                       "epe_total", "epe_high", "epe_low", "update_s"])


def _default_pairs() -> List[Pair]:
    left, right, gt = synth_pair(SynthSpec())
    return [(to_nchw(left), to_nchw(right), gt)]


def _records(df: pd.DataFrame) -> list:
    # JSON has no NaN; absent values become null
    return [{k: None if isinstance(v, float) and not np.isfinite(v) else v for k, v in row.items()}
            for row in df.to_dict(orient="records")]


# ==============================================================================
# Report
# ==============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    args = _parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    set_num_threads(args.threads)
    cfg = load_config(args.config)
    pairs = load_synth_dataset(args.data) if args.data else _default_pairs()
    if args.weights:
        params = ParameterStore.load(args.weights)
    else:
        print("⚠️  No --weights: fresh initialization, EPE columns are not meaningful")
        params = ws_pipeline.init_params(cfg)
    n_ks = [int(v) for v in args.iters.split(",") if v.strip()]
    timing: Dict[str, object] = {"n_pairs": len(pairs), "threads": args.threads}

    SEP = "═" * 66
    print(f"\n\n{SEP}")
    print("  ⏱  WAVELET STEREO BENCHMARK REPORT")
    print(SEP)

    # ── Phase 1: iteration count ──────────────────────────────────────────────
    it = iteration_study(params, cfg, pairs, n_ks)
    timing["iterations"] = _records(it)
    max_t = max(float(it["update_s"].max()), 0.01)
    print(f"\n  PHASE 1 — ITERATION COUNT  ({len(pairs)} pair(s))")
    print(f"  {'─'*62}")
    for row in it.itertuples():
        print(f"  n_k={row.n_k:<4} {_fmt(row.update_s):>8}  {_bar(row.update_s, max_t)}  "
              f"EPE {row.epe_total:.4f} (edges {row.epe_high:.4f}, smooth {row.epe_low:.4f})")
    if 16 in n_ks and 32 in n_ks:
        t16 = float(it.loc[it["n_k"] == 16, "update_s"].iloc[0])
        t32 = float(it.loc[it["n_k"] == 32, "update_s"].iloc[0])
        ratio = t32 / t16 if t16 > 0 else None
        timing["update_ratio_32_16"] = ratio
        if ratio is not None:
            print(f"  {'update runtime ratio 32/16':<30} {ratio:>8.2f}×")

    # ── Phase 2: IFA rounds ───────────────────────────────────────────────────
    if args.nj_sweep:
        n_k = cfg["eval"]["n_k"]
        sweep = nj_sweep(params, cfg, pairs, n_k)
        timing["nj_sweep"] = _records(sweep)
        max_t = max(float(sweep["update_s"].max()), 0.01)
        print(f"\n  PHASE 2 — IFA ROUNDS  (n_k={n_k})")
        print(f"  {'─'*62}")
        for row in sweep.itertuples():
            print(f"  n_j={row.n_j:<4} {_fmt(row.update_s):>8}  {_bar(row.update_s, max_t)}  "
                  f"EPE {row.epe_total:.4f} (edges {row.epe_high:.4f})")

    # ── Phase 3: variant ablation ─────────────────────────────────────────────
    if args.ablation > 0:
        eval_pairs = load_synth_dataset(args.eval_data) if args.eval_data else pairs
        abl = ablation_study(pairs, eval_pairs, cfg, args.ablation)
        timing["ablation"] = _records(abl)
        print(f"\n  PHASE 3 — ABLATION  ({args.ablation} steps each, {len(eval_pairs)} eval pair(s))")
        print(f"  {'─'*62}")
        for row in abl.itertuples():
            print(f"  {row.variant:<10} {row.parameters:>9,} params  train {_fmt(row.train_s):>8}  "
                  f"EPE {row.epe_total:.4f}  edges {row.epe_high:.4f}")

    write_json(args.out, timing)
    print(f"\n  {SEP}")
    print(f"  Timing JSON → {os.path.relpath(args.out)}")
    print(f"  {SEP}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
