"""
tests/scenarios/test_cli_model.py

End-to-end tests for the model-side CLI commands on a 16×32 toy set:

  train-toy  weights + config sidecar + loss curve + manifest
  infer      one PFM per iteration plus disp.pfm, byte-stable across runs,
             config fallback, --pad reflect, format errors
  eval       metrics JSON and convergence trace, perfect prediction, shape errors,
             non-finite predictions, iteration order past 99
  gradcheck  every toy parameter within tolerance (slow)

The toy set and trained weights are built once per module.
"""
import json
import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

import ws_cli
from tests.conftest import make_spec_dict, make_toy_config
from ws_stereo_io import read_pfm, read_pfm_array, read_pnm, write_pfm_array, write_pnm
from ws_tensor import ParameterStore

pytestmark = pytest.mark.smoke


# ── Helpers ───────────────────────────────────────────────────────────────────

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Synthetic set, toy config and 2-step trained weights."""
    root = tmp_path_factory.mktemp("toy")
    config = root / "toy.json"
    config.write_text(json.dumps(make_toy_config()), encoding="utf-8")
    spec = root / "spec.json"
    spec.write_text(json.dumps(make_spec_dict(count=2)), encoding="utf-8")
    data = str(root / "data")
    assert ws_cli.main(["synth", "--spec", str(spec), "--out", data]) == 0
    weights = str(root / "model.wstw")
    assert ws_cli.main(["train-toy", "--config", str(config), "--data", data, "--out", weights,
                        "--steps", "2"]) == 0
    return {
        "root": root,
        "config": str(config),
        "data": data,
        "weights": weights,
        "left": os.path.join(data, "pair000.left.ppm"),
        "right": os.path.join(data, "pair000.right.ppm"),
        "gt": os.path.join(data, "pair000.disp.pfm"),
    }


def _infer(toy, out, *extra):
    return ws_cli.main(["infer", "--weights", toy["weights"], "--left", toy["left"], "--right", toy["right"],
                        "--out", str(out), *extra])


def _read(path):
    with open(path, "rb") as f:
        return f.read()


# ── Tests ─────────────────────────────────────────────────────────────────────

class TestTrainToyCommand:

    def test_outputs(self, toy):
        w = toy["weights"]
        for path in (w, w + ".config.json", w + ".loss.csv"):
            assert os.path.exists(path)
        assert os.path.exists(os.path.join(str(toy["root"]), "model.manifest.json"))
        assert len(pd.read_csv(w + ".loss.csv")) == 2

    def test_weights_load(self, toy):
        store = ParameterStore.load(toy["weights"])
        assert "fnet.out.w" in store
        assert store.num_parameters() > 0

    def test_sidecar_records_the_effective_config(self, toy):
        with open(toy["weights"] + ".config.json", encoding="utf-8") as f:
            cfg = json.load(f)
        assert cfg["train"]["steps"] == 2
        assert cfg["model"]["matching_channels"] == make_toy_config()["model"]["matching_channels"]

    def test_same_seed_same_weights(self, toy, tmp_path):
        again = str(tmp_path / "again.wstw")
        assert ws_cli.main(["train-toy", "--config", toy["config"], "--data", toy["data"], "--out", again,
                            "--steps", "2"]) == 0
        assert _read(again) == _read(toy["weights"])

    def test_missing_dataset_exits_2(self, toy, tmp_path):
        assert ws_cli.main(["train-toy", "--config", toy["config"], "--data", str(tmp_path / "none"),
                            "--out", str(tmp_path / "m.wstw")]) == 2

    def test_loss_chart(self, toy, tmp_path):
        pytest.importorskip("matplotlib")
        chart = str(tmp_path / "loss.png")
        assert ws_cli.main(["train-toy", "--config", toy["config"], "--data", toy["data"],
                            "--out", str(tmp_path / "m.wstw"), "--steps", "2", "--chart", chart]) == 0
        assert os.path.getsize(chart) > 0


class TestInferCommand:

    def test_one_file_per_iteration(self, toy, tmp_path):
        out = tmp_path / "pred"
        assert _infer(toy, out, "--iters", "3") == 0
        names = sorted(os.listdir(out))
        assert names == ["disp.iter01.pfm", "disp.iter02.pfm", "disp.iter03.pfm", "disp.pfm", "manifest.json"]
        assert read_pfm_array(str(out / "disp.pfm")).shape == (16, 32)
        assert _read(str(out / "disp.pfm")) == _read(str(out / "disp.iter03.pfm"))

    def test_default_iterations_from_config(self, toy, tmp_path):
        out = tmp_path / "pred"
        assert _infer(toy, out) == 0
        n_k = make_toy_config()["eval"]["n_k"]
        assert len([f for f in os.listdir(out) if f.startswith("disp.iter")]) == n_k

    def test_outputs_are_byte_stable(self, toy, tmp_path):
        _infer(toy, tmp_path / "a", "--iters", "2")
        _infer(toy, tmp_path / "b", "--iters", "2", "--threads", "2")
        for name in ("disp.iter01.pfm", "disp.pfm"):
            assert _read(str(tmp_path / "a" / name)) == _read(str(tmp_path / "b" / name))

    def test_manifest(self, toy, tmp_path):
        out = tmp_path / "pred"
        _infer(toy, out, "--iters", "2")
        with open(out / "manifest.json", encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest["command"] == "infer"
        assert manifest["config_hash"]
        assert toy["weights"] in manifest["inputs"]
        assert "update" in manifest["stage_timings"]

    def test_reflect_padding_crops_back(self, toy, tmp_path):
        left = read_pnm(toy["left"])[:12]
        right = read_pnm(toy["right"])[:12]
        lp, rp = str(tmp_path / "l.ppm"), str(tmp_path / "r.ppm")
        write_pnm(lp, left)
        write_pnm(rp, right)
        base = ["infer", "--weights", toy["weights"], "--left", lp, "--right", rp, "--iters", "1"]
        assert ws_cli.main(base + ["--out", str(tmp_path / "p0")]) == 3
        assert ws_cli.main(base + ["--out", str(tmp_path / "p1"), "--pad", "reflect"]) == 0
        assert read_pfm_array(str(tmp_path / "p1" / "disp.pfm")).shape == (12, 32)

    def test_mismatched_pair_exits_3(self, toy, tmp_path):
        rp = str(tmp_path / "r.ppm")
        write_pnm(rp, read_pnm(toy["right"])[:, :16])
        assert ws_cli.main(["infer", "--weights", toy["weights"], "--left", toy["left"], "--right", rp,
                            "--out", str(tmp_path / "p")]) == 3

    def test_corrupt_weights_exit_2(self, toy, tmp_path):
        bad = tmp_path / "bad.wstw"
        bad.write_bytes(b"NOPE" + bytes(8))
        assert ws_cli.main(["infer", "--weights", str(bad), "--left", toy["left"], "--right", toy["right"],
                            "--config", toy["config"], "--out", str(tmp_path / "p")]) == 2


class TestEvalCommand:

    def test_metrics_and_trace(self, toy, tmp_path):
        pred = tmp_path / "pred"
        _infer(toy, pred, "--iters", "3")
        metrics, trace = str(tmp_path / "metrics.json"), str(tmp_path / "trace.csv")
        assert ws_cli.main(["eval", "--pred", str(pred), "--gt", toy["gt"], "--ref-image", toy["left"],
                            "--out", metrics, "--trace", trace, "--config", toy["config"]]) == 0
        with open(metrics, encoding="utf-8") as f:
            report = json.load(f)
        for key in ("epe_total", "epe_high", "epe_low", "d1", "bad_1", "bad_2", "bad_3", "n_k", "n_valid"):
            assert key in report
        assert report["n_k"] == 3
        frame = pd.read_csv(trace)
        assert frame["k"].tolist() == [1, 2, 3]
        assert frame["epe_total"].iloc[-1] == pytest.approx(report["epe_total"], abs=1e-5)
        assert os.path.exists(str(tmp_path / "metrics.manifest.json"))

    def test_ground_truth_against_itself_is_zero(self, toy, tmp_path):
        metrics = str(tmp_path / "metrics.json")
        assert ws_cli.main(["eval", "--pred", toy["gt"], "--gt", toy["gt"], "--ref-image", toy["left"],
                            "--out", metrics]) == 0
        with open(metrics, encoding="utf-8") as f:
            report = json.load(f)
        assert report["epe_total"] == 0.0
        assert report["d1"] == 0.0
        assert report["n_valid"] < 16 * 32

    def test_convergence_chart(self, toy, tmp_path):
        pytest.importorskip("matplotlib")
        pred = tmp_path / "pred"
        _infer(toy, pred, "--iters", "2")
        chart = str(tmp_path / "trace.png")
        assert ws_cli.main(["eval", "--pred", str(pred), "--gt", toy["gt"], "--ref-image", toy["left"],
                            "--out", str(tmp_path / "m.json"), "--chart", chart]) == 0
        assert os.path.getsize(chart) > 0

    def test_shape_mismatch_exits_3(self, toy, tmp_path):
        ref = str(tmp_path / "small.ppm")
        write_pnm(ref, read_pnm(toy["left"])[:8])
        assert ws_cli.main(["eval", "--pred", toy["gt"], "--gt", toy["gt"], "--ref-image", ref,
                            "--out", str(tmp_path / "m.json")]) == 3

    def test_non_finite_prediction_exits_4(self, toy, tmp_path):
        gt = read_pfm(toy["gt"])
        pred = gt.values.copy()
        row, col = np.argwhere(gt.valid)[0]
        pred[row, col] = np.nan
        path = str(tmp_path / "pred.pfm")
        write_pfm_array(path, pred)
        metrics = tmp_path / "m.json"
        assert ws_cli.main(["eval", "--pred", path, "--gt", toy["gt"], "--ref-image", toy["left"],
                            "--out", str(metrics)]) == 4
        assert not metrics.exists()

    def test_iteration_files_scored_in_numeric_order(self, toy, tmp_path):
        gt = read_pfm(toy["gt"])
        pred = tmp_path / "pred"
        pred.mkdir()
        for k in range(1, 106):
            # only the last iteration is exact
            values = gt.values if k == 105 else gt.values + 5.0
            write_pfm_array(str(pred / f"disp.iter{k:02d}.pfm"), values)
        metrics, trace = str(tmp_path / "m.json"), str(tmp_path / "trace.csv")
        assert ws_cli.main(["eval", "--pred", str(pred), "--gt", toy["gt"], "--ref-image", toy["left"],
                            "--out", metrics, "--trace", trace]) == 0
        with open(metrics, encoding="utf-8") as f:
            report = json.load(f)
        assert report["n_k"] == 105
        assert report["epe_total"] == 0.0
        frame = pd.read_csv(trace)
        assert frame["k"].tolist() == list(range(1, 106))
        assert frame["epe_total"].iloc[-1] == 0.0
        assert frame["epe_total"].iloc[98] == pytest.approx(5.0)

    def test_empty_prediction_dir_exits_2(self, toy, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert ws_cli.main(["eval", "--pred", str(empty), "--gt", toy["gt"], "--ref-image", toy["left"],
                            "--out", str(tmp_path / "m.json")]) == 2


@pytest.mark.slow
class TestGradcheckCommand:

    def test_every_parameter_within_tolerance(self, toy, tmp_path):
        out = str(tmp_path / "gradcheck.json")
        code = ws_cli.main(["gradcheck", "--config", toy["config"], "--entries", "1", "--out", out])
        with open(out, encoding="utf-8") as f:
            report = json.load(f)
        assert report["tolerance"] == 1e-4
        assert len(report["relative_errors"]) == len(ParameterStore.load(toy["weights"]))
        assert set(report["absolute_errors"]) == set(report["relative_errors"])
        assert report["noise_floor"] > 0
        assert report["failed"] == [], f"worst relative error {report['worst']}"
        assert code == 0
