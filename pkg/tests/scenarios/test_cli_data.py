"""
tests/scenarios/test_cli_data.py

End-to-end tests for the data-side CLI commands, driven through ws_cli.main():

  dwt    sub-band file layout, --verify, --pad reflect, dimension errors
  synth  dataset layout, determinism, spec errors
  common manifest contents, --threads / WSTEREO_THREADS resolution, exit codes
"""
import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

import ws_cli
from tests.conftest import make_spec_dict
from ws_stereo_io import read_pfm_array, write_pnm

pytestmark = pytest.mark.smoke


# ── Helpers ───────────────────────────────────────────────────────────────────

def _grey(tmp_path, img, name="img.pgm"):
    path = str(tmp_path / name)
    write_pnm(path, img)
    return path


def _spec_file(tmp_path, **overrides):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(make_spec_dict(**overrides)), encoding="utf-8")
    return str(path)


def _manifest(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# ── Tests ─────────────────────────────────────────────────────────────────────

class TestDwtCommand:

    def test_writes_four_bands_per_level(self, tmp_path):
        src = _grey(tmp_path, np.full((32, 64), 100.0))
        out = str(tmp_path / "bands")
        assert ws_cli.main(["dwt", "--input", src, "--levels", "3", "--out", out]) == 0
        pfms = sorted(f for f in os.listdir(out) if f.endswith(".pfm"))
        assert len(pfms) == 12
        assert "img.l3.hh.pfm" in pfms
        assert os.path.exists(os.path.join(out, "manifest.json"))

    def test_constant_image_has_zero_detail(self, tmp_path):
        src = _grey(tmp_path, np.full((32, 64), 100.0))
        out = str(tmp_path / "bands")
        ws_cli.main(["dwt", "--input", src, "--levels", "3", "--out", out])
        for level in (1, 2, 3):
            for band in ("lh", "hl", "hh"):
                assert not read_pfm_array(os.path.join(out, f"img.l{level}.{band}.pfm")).any()
        ll3 = read_pfm_array(os.path.join(out, "img.l3.ll.pfm"))
        assert ll3.shape == (4, 8)
        assert np.all(ll3 == 800.0)

    def test_colour_input_gives_colour_bands(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3)).astype(float)
        src = str(tmp_path / "img.ppm")
        write_pnm(src, img)
        out = str(tmp_path / "bands")
        assert ws_cli.main(["dwt", "--input", src, "--levels", "2", "--out", out]) == 0
        assert read_pfm_array(os.path.join(out, "img.l1.lh.pfm")).shape == (8, 8, 3)

    def test_verify_prints_reconstruction_error(self, tmp_path, capsys):
        src = _grey(tmp_path, np.random.default_rng(1).integers(0, 256, size=(16, 32)))
        assert ws_cli.main(["dwt", "--input", src, "--levels", "3", "--out", str(tmp_path / "b"),
                            "--verify"]) == 0
        line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("max-abs-err:")][0]
        assert float(line.split(":")[1]) < 1e-4

    def test_indivisible_size_exits_3(self, tmp_path):
        src = _grey(tmp_path, np.zeros((30, 60)))
        assert ws_cli.main(["dwt", "--input", src, "--levels", "3", "--out", str(tmp_path / "b")]) == 3

    def test_reflect_padding_accepts_indivisible_size(self, tmp_path):
        src = _grey(tmp_path, np.zeros((30, 60)))
        out = str(tmp_path / "b")
        assert ws_cli.main(["dwt", "--input", src, "--levels", "3", "--out", out, "--pad", "reflect"]) == 0
        assert read_pfm_array(os.path.join(out, "img.l1.ll.pfm")).shape == (16, 32)

    def test_missing_input_exits_2(self, tmp_path):
        assert ws_cli.main(["dwt", "--input", str(tmp_path / "nope.pgm"), "--out", str(tmp_path / "b")]) == 2

    def test_malformed_input_exits_2(self, tmp_path):
        src = tmp_path / "bad.pgm"
        src.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
        assert ws_cli.main(["dwt", "--input", str(src), "--out", str(tmp_path / "b")]) == 2


class TestSynthCommand:

    def test_dataset_layout(self, tmp_path):
        out = str(tmp_path / "data")
        assert ws_cli.main(["synth", "--spec", _spec_file(tmp_path, count=2), "--out", out]) == 0
        names = set(os.listdir(out))
        assert {"pair000.left.ppm", "pair001.right.ppm", "pair001.disp.pfm", "spec.json",
                "manifest.json"} <= names
        manifest = _manifest(os.path.join(out, "manifest.json"))
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 17
        assert len(manifest["outputs"]) == 7

    def test_same_spec_same_bytes(self, tmp_path):
        spec = _spec_file(tmp_path, texture="bandlimited-noise", disparity_field="two-plane",
                          disparity=1.0, disparity_end=5.0)
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        ws_cli.main(["synth", "--spec", spec, "--out", a])
        ws_cli.main(["synth", "--spec", spec, "--out", b])
        for name in ("pair000.left.ppm", "pair000.right.ppm", "pair000.disp.pfm"):
            with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                assert fa.read() == fb.read()

    def test_unknown_spec_key_exits_3(self, tmp_path):
        assert ws_cli.main(["synth", "--spec", _spec_file(tmp_path, wobble=1), "--out",
                            str(tmp_path / "d")]) == 3

    def test_disparity_too_large_exits_3(self, tmp_path):
        spec = _spec_file(tmp_path, disparity=8.0, disparity_end=8.0)
        assert ws_cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "d")]) == 3

    def test_spec_not_json_exits_2(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text("width: 32", encoding="utf-8")
        assert ws_cli.main(["synth", "--spec", str(path), "--out", str(tmp_path / "d")]) == 2


class TestThreadResolution:

    def _run(self, tmp_path, *extra):
        out = str(tmp_path / "d")
        code = ws_cli.main(["synth", "--spec", _spec_file(tmp_path), "--out", out, *extra])
        return code, out

    def test_flag_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WSTEREO_THREADS", "2")
        code, out = self._run(tmp_path, "--threads", "3")
        assert code == 0
        assert _manifest(os.path.join(out, "manifest.json"))["threads"] == 3

    def test_environment_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WSTEREO_THREADS", "2")
        code, out = self._run(tmp_path)
        assert _manifest(os.path.join(out, "manifest.json"))["threads"] == 2

    def test_default_is_one(self, tmp_path, monkeypatch):
        monkeypatch.delenv("WSTEREO_THREADS", raising=False)
        code, out = self._run(tmp_path)
        assert _manifest(os.path.join(out, "manifest.json"))["threads"] == 1

    def test_non_integer_environment_exits_3(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WSTEREO_THREADS", "many")
        code, _ = self._run(tmp_path)
        assert code == 3

    def test_zero_threads_exits_3(self, tmp_path):
        code, _ = self._run(tmp_path, "--threads", "0")
        assert code == 3
