"""
tests/unit/test_pipeline.py

Tests for ws_pipeline: forward contracts, the GRU baseline, the sequence loss,
upsampling consistency and the toy trainer.
"""
import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

import ws_pipeline
from tests.conftest import make_pair, make_toy_config, make_toy_params
from ws_pipeline import (
    InferenceResult, TrainingError, downsample_disparity, forward, forward_gru_baseline, loss,
    loss_weights, normalize_image, predict, stage_timings, train_toy, write_loss_curve,
)
from ws_tensor import (
    ConfigError, DimensionError, NumericalError, ParameterStore, Tensor, gradcheck, precision,
    set_num_threads,
)


# ── Helpers ───────────────────────────────────────────────────────────────────

def _result(*fields):
    return InferenceResult(disparities=[Tensor(f) for f in fields], quarter=[], deltas=[])


def _inputs(seed=17):
    left, right, gt = make_pair(seed=seed)
    return normalize_image(left), normalize_image(right), gt


# ── Tests ─────────────────────────────────────────────────────────────────────

class TestLoss:

    def test_weights(self):
        assert loss_weights(3, 0.9) == pytest.approx([0.81, 0.9, 1.0])
        assert loss_weights(1) == [1.0]

    def test_perfect_prediction_is_zero(self):
        gt = np.random.default_rng(0).uniform(0, 8, size=(1, 1, 4, 4))
        assert loss(_result(gt, gt, gt), gt[0, 0]).item() == 0.0

    def test_constant_one_pixel_error(self):
        gt = np.zeros((1, 1, 4, 4))
        assert loss(_result(gt + 1, gt + 1), gt).item() == pytest.approx(1.9)

    def test_scales_linearly_with_error(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0, 8, size=(1, 1, 4, 6))
        errs = [rng.normal(0, 1, size=gt.shape) for _ in range(3)]
        base = loss(_result(*(gt + e for e in errs)), gt).item()
        scaled = loss(_result(*(gt + 2.5 * e for e in errs)), gt).item()
        assert scaled == pytest.approx(2.5 * base, rel=1e-5)

    def test_mask_restricts_the_mean(self):
        gt = np.zeros((1, 1, 1, 4))
        pred = np.array([[[[1.0, 1.0, 5.0, 5.0]]]])
        mask = np.array([[1.0, 1.0, 0.0, 0.0]])
        assert loss(_result(pred), gt, valid_mask=mask).item() == pytest.approx(1.0)

    def test_all_invalid_mask_rejected(self):
        gt = np.zeros((1, 1, 2, 2))
        with pytest.raises(ValueError, match="no pixels"):
            loss(_result(gt), gt, valid_mask=np.zeros((2, 2)))

    def test_empty_result_rejected(self):
        with pytest.raises(ValueError):
            loss(InferenceResult(disparities=[], quarter=[], deltas=[]), np.zeros((2, 2)))


class TestForward:

    def test_iteration_count_and_shapes(self):
        cfg = make_toy_config()
        I_L, I_R, _ = _inputs()
        result = forward(I_L, I_R, make_toy_params(cfg), 3, cfg)
        assert result.n_k == 3
        assert len(result.per_iter_runtime) == 3
        assert all(d.shape == (1, 1, 16, 32) for d in result.disparities)
        assert all(q.shape == (1, 1, 4, 8) for q in result.quarter)

    def test_single_iteration(self):
        cfg = make_toy_config()
        I_L, I_R, _ = _inputs()
        assert forward(I_L, I_R, make_toy_params(cfg), 1, cfg).n_k == 1

    def test_zero_head_predicts_zero(self):
        cfg = make_toy_config()
        I_L, I_R, _ = _inputs()
        result = forward(I_L, I_R, make_toy_params(cfg), 3, cfg)
        assert not any(d.data.any() for d in result.disparities)

    def test_stage_timings_recorded(self):
        cfg = make_toy_config()
        I_L, I_R, _ = _inputs()
        forward(I_L, I_R, make_toy_params(cfg), 2, cfg)
        assert {"matching", "wavelet", "context", "high", "correlation", "update", "upsample"} <= set(stage_timings())

    def test_deterministic_across_thread_counts(self):
        cfg = make_toy_config(model={"head_zero_init": False})
        params = make_toy_params(cfg)
        I_L, I_R, _ = _inputs()
        a = forward(I_L, I_R, params, 3, cfg)
        set_num_threads(4)
        b = forward(I_L, I_R, params, 3, cfg)
        for x, y in zip(a.disparities, b.disparities):
            assert x.data.tobytes() == y.data.tobytes()

    def test_upsampling_consistency(self):
        cfg = make_toy_config(model={"head_zero_init": False})
        params = make_toy_params(cfg).astype(np.float64)
        left, right, _ = make_pair()
        with precision(np.float64):
            result = predict(params, cfg, left, right, 2)
            for full, quarter in zip(result.disparities, result.quarter):
                assert quarter.data.any()
                np.testing.assert_allclose(downsample_disparity(full).data, quarter.data, atol=1e-5)

    def test_indivisible_input_rejected(self):
        cfg = make_toy_config()
        img = normalize_image(np.zeros((1, 3, 24, 32)))
        with pytest.raises(DimensionError, match="divisible by 16"):
            forward(img, img, make_toy_params(cfg), 1, cfg)

    def test_mismatched_pair_rejected(self):
        cfg = make_toy_config()
        with pytest.raises(DimensionError):
            forward(normalize_image(np.zeros((1, 3, 16, 32))), normalize_image(np.zeros((1, 3, 16, 48))),
                    make_toy_params(cfg), 1, cfg)

    def test_reserved_upsampling_rejected(self):
        cfg = make_toy_config(model={"upsample": "convex"})
        I_L, I_R, _ = _inputs()
        with pytest.raises(ConfigError, match="reserved"):
            forward(I_L, I_R, make_toy_params(cfg), 1, cfg)

    @pytest.mark.parametrize("variant", ["no_fh", "no_hpu", "baseline"])
    def test_every_variant_runs(self, variant):
        cfg = make_toy_config(model={"variant": variant})
        I_L, I_R, _ = _inputs()
        assert forward(I_L, I_R, make_toy_params(cfg), 2, cfg).n_k == 2


class TestGruBaseline:

    def test_fewer_parameters_than_the_full_model(self):
        full = make_toy_params(make_toy_config())
        base = make_toy_params(make_toy_config(model={"variant": "baseline"}))
        assert base.num_parameters() < full.num_parameters()
        assert base.num_parameters("hnet") == 0

    def test_zero_head_predicts_zero(self):
        cfg = make_toy_config(model={"variant": "baseline"})
        I_L, I_R, _ = _inputs()
        result = forward_gru_baseline(I_L, I_R, make_toy_params(cfg), 2, cfg)
        assert result.n_k == 2
        assert not any(d.data.any() for d in result.disparities)

    def test_needs_baseline_parameters(self):
        cfg = make_toy_config()
        I_L, I_R, _ = _inputs()
        with pytest.raises(ConfigError, match="baseline"):
            forward_gru_baseline(I_L, I_R, make_toy_params(cfg), 1, cfg)


class TestGradients:

    def test_selected_parameters_match_finite_differences(self):
        cfg = make_toy_config(model={"detach_lookup_disparity": False, "head_zero_init": False})
        left, right, gt = make_pair()
        valid = gt.valid.astype(np.float64)

        def loss_fn(params):
            return loss(predict(params, cfg, left, right, 2), gt.values, 0.9, valid)

        names = ["fnet.out.w", "cnet.out4.w", "hnet.in1.w", "motion.enc_g.conv2.w",
                 "hpu.s4.lsa.w1", "hpu.s8.lstm.w_f", "hpu.s4.lstm.w_g", "head.conv2.b"]
        report = gradcheck(loss_fn, make_toy_params(cfg), max_entries=2, names=names)
        assert set(report.relative) == set(names)
        assert report.failed(1e-4) == []


class TestOptimizer:

    def _store(self):
        store = ParameterStore()
        store.add("w", np.full((2, 2), 2.0))
        return store

    def test_adamw_decays_weights_without_gradient(self):
        cfg = make_toy_config(train={"optimizer": "adamw", "lr": 0.1, "weight_decay": 0.5})
        store = self._store()
        ws_pipeline._Optimizer(cfg).step(store)
        np.testing.assert_allclose(store["w"].data, 2.0 * (1.0 - 0.1 * 0.5), rtol=1e-6)

    def test_adam_ignores_weight_decay(self):
        cfg = make_toy_config(train={"optimizer": "adam", "lr": 0.1, "weight_decay": 0.5})
        store = self._store()
        ws_pipeline._Optimizer(cfg).step(store)
        np.testing.assert_array_equal(store["w"].data, 2.0)

    def test_adamw_step_matches_adam_plus_decay(self):
        grads = np.array([[0.3, -0.2], [0.0, 1.5]])
        out = {}
        for kind in ("adam", "adamw"):
            cfg = make_toy_config(train={"optimizer": kind, "lr": 0.1, "weight_decay": 0.5})
            store = self._store()
            store["w"].grad = grads
            ws_pipeline._Optimizer(cfg).step(store)
            out[kind] = store["w"].data
        np.testing.assert_allclose(out["adam"] - out["adamw"], 0.1 * 0.5 * 2.0, rtol=1e-5)


class TestTrainToy:

    def test_loss_decreases(self):
        cfg = make_toy_config(train={"steps": 10})
        _, curve = train_toy([make_pair()], cfg)
        assert len(curve) == 10
        assert curve["loss"].iloc[-1] < curve["loss"].iloc[0]

    def test_same_seed_is_bit_identical(self):
        cfg = make_toy_config()
        pairs = [make_pair()]
        p1, c1 = train_toy(pairs, cfg)
        p2, c2 = train_toy(pairs, cfg)
        assert c1["loss"].tolist() == c2["loss"].tolist()
        assert p1.checksum() == p2.checksum()

    @pytest.mark.parametrize("optimizer", ["adam", "adamw"])
    def test_adam_and_crop(self, optimizer):
        cfg = make_toy_config(train={"optimizer": optimizer, "lr": 1e-3, "crop": [16, 16]})
        params, curve = train_toy([make_pair()], cfg)
        assert len(curve) == cfg["train"]["steps"]
        assert np.isfinite(curve["loss"]).all()

    def test_crop_larger_than_image_rejected(self):
        cfg = make_toy_config(train={"crop": [32, 32]})
        with pytest.raises(ConfigError, match="crop"):
            train_toy([make_pair()], cfg)

    def test_numerical_failure_names_the_step(self, monkeypatch):
        def boom(*args, **kwargs):
            raise NumericalError("non-finite values produced by conv2d")
        monkeypatch.setattr(ws_pipeline, "predict", boom)
        with pytest.raises(TrainingError) as info:
            train_toy([make_pair()], make_toy_config())
        assert info.value.step == 0
        assert info.value.exit_code == 5

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_toy([], make_toy_config())

    def test_loss_curve_csv(self, tmp_path):
        curve = pd.DataFrame({"step": [0, 1], "loss": [2.5, 1.25]})
        path = str(tmp_path / "loss.csv")
        write_loss_curve(curve, path)
        back = pd.read_csv(path)
        assert back["loss"].tolist() == [2.5, 1.25]
        assert not os.path.exists(path + ".tmp")
