import numpy as np
import pytest

import dualref.autodiff as ad
from dualref.autodiff import Tape, Tensor2
from dualref.episodes import SamplerConfig
from dualref.errors import DataError
from dualref.model import forward_scores, init_params
from dualref.training import (
    LossConfig,
    OptimizerState,
    TrainConfig,
    TraceRow,
    cls_loss,
    optimizer_step,
    seg_loss,
    total_loss,
    train,
    write_trace,
)

from oracles import unit_rows


def score_node(values):
    return Tensor2(np.asarray(values, dtype=np.float64).reshape(-1, 1),
                   dtype=np.float64)


def focal_dice_reference(scores, mask, cfg):
    eps = cfg.prob_clamp_eps
    p = np.clip(np.asarray(scores, dtype=np.float64) / 2.0, eps, 1.0 - eps)
    m = np.asarray(mask, dtype=np.float64)
    focal_terms = [
        -cfg.focal_alpha * mi * (1 - pi) ** cfg.focal_gamma * np.log(pi)
        - (1 - cfg.focal_alpha) * (1 - mi) * pi ** cfg.focal_gamma * np.log(1 - pi)
        for pi, mi in zip(p, m)
    ]
    dice = 1.0 - (2.0 * float(np.sum(p * m)) + cfg.dice_eps) / (
        float(np.sum(p)) + float(np.sum(m)) + cfg.dice_eps)
    return float(np.mean(focal_terms)) + dice


class TestSegLoss:
    def test_perfect_prediction_near_zero(self):
        cfg = LossConfig()
        mask = np.ones(8, dtype=np.uint8)
        loss = seg_loss(score_node(np.full(8, 2.0)), mask, cfg)
        assert loss.item() < 1e-4

    def test_gamma_zero_half_alpha_reduces_to_half_bce(self):
        cfg = LossConfig(focal_gamma=0.0, focal_alpha=0.5)
        rng = np.random.default_rng(0)
        scores = rng.uniform(0.1, 1.9, 12)
        mask = (rng.random(12) < 0.5).astype(np.uint8)
        loss = seg_loss(score_node(scores), mask, cfg)
        p = np.clip(scores / 2.0, cfg.prob_clamp_eps, 1 - cfg.prob_clamp_eps)
        bce = -(mask * np.log(p) + (1 - mask) * np.log(1 - p)).mean()
        dice = 1.0 - (2 * (p * mask).sum() + 1.0) / (p.sum() + mask.sum() + 1.0)
        assert loss.item() == pytest.approx(0.5 * bce + dice, rel=1e-9)

    def test_matches_scalar_reference(self):
        cfg = LossConfig()
        rng = np.random.default_rng(1)
        for _ in range(10):
            scores = rng.uniform(0.0, 2.0, 16)
            mask = (rng.random(16) < 0.4).astype(np.uint8)
            loss = seg_loss(score_node(scores), mask, cfg)
            assert loss.item() == pytest.approx(
                focal_dice_reference(scores, mask, cfg), rel=1e-9)

    def test_finite_for_extreme_scores(self):
        cfg = LossConfig()
        for value in (0.0, 2.0):
            for mask_bit in (0, 1):
                loss = seg_loss(score_node(np.full(4, value)),
                                np.full(4, mask_bit, dtype=np.uint8), cfg)
                assert np.isfinite(loss.item())

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            seg_loss(score_node(np.zeros(3)), np.zeros(4, dtype=np.uint8), LossConfig())


class TestClsLoss:
    def test_midpoint_is_ln2(self):
        cfg = LossConfig()
        for label in (0, 1):
            loss = cls_loss(score_node([1.0]), label, cfg)
            assert loss.item() == pytest.approx(np.log(2.0), rel=1e-9)

    def test_confident_correct_is_tiny(self):
        cfg = LossConfig()
        loss = cls_loss(score_node([2.0]), 1, cfg)
        assert loss.item() == pytest.approx(-np.log(1 - cfg.prob_clamp_eps), abs=1e-9)

    def test_matches_hand_formula_both_labels(self):
        cfg = LossConfig()
        rng = np.random.default_rng(2)
        for _ in range(10):
            s = float(rng.uniform(0, 2))
            p = np.clip(s / 2, cfg.prob_clamp_eps, 1 - cfg.prob_clamp_eps)
            assert cls_loss(score_node([s]), 1, cfg).item() == pytest.approx(
                -np.log(p), rel=1e-9)
            assert cls_loss(score_node([s]), 0, cfg).item() == pytest.approx(
                -np.log(1 - p), rel=1e-9)


class TestTotalLoss:
    def test_lambda_zero_is_cls_only(self):
        cfg = LossConfig(seg_weight=0.0)
        seg = score_node([0.3])
        cls = score_node([0.7])
        assert total_loss(seg, cls, cfg).item() == pytest.approx(0.7)

    def test_lambda_one_adds(self):
        cfg = LossConfig(seg_weight=1.0)
        assert total_loss(score_node([0.3]), score_node([0.7]), cfg).item() == \
            pytest.approx(1.0)

    def test_gradient_linearity(self):
        """grad(total) equals grad(cls) + lambda*grad(seg), by three backward passes."""
        lam = 0.7
        cfg = LossConfig(seg_weight=lam)
        rng = np.random.default_rng(3)
        params = init_params(3, 8, seed=5, dtype=np.float64)
        l = 12
        inputs = dict(
            query_feats=unit_rows(rng, l, 8),
            abnormal_feats=unit_rows(rng, l, 8),
            abnormal_residuals=rng.normal(size=(l, 8)) * 0.3,
            abnormal_mask_bits=np.r_[1.0, (rng.random(l - 1) < 0.3).astype(float)],
            query_residuals=rng.normal(size=(l, 8)) * 0.3,
            normal_score_values=rng.uniform(0, 1, l),
        )
        mask = (rng.random(l) < 0.3).astype(np.uint8)

        def grads_of(build):
            with Tape() as tape:
                params.zero_grads()
                tape.backward(build())
            return {n: t.grad.copy() for n, t in params.named_tensors()}

        def graph():
            fused, img = forward_scores(params, **inputs)
            return seg_loss(fused, mask, cfg), cls_loss(img, 1, cfg)

        g_total = grads_of(lambda: total_loss(*graph(), cfg))
        g_seg = grads_of(lambda: graph()[0])
        g_cls = grads_of(lambda: graph()[1])
        for name in g_total:
            np.testing.assert_allclose(
                g_total[name], g_cls[name] + lam * g_seg[name],
                rtol=1e-9, atol=1e-15, err_msg=name)


class TestOptimizer:
    def test_zero_grads_zero_decay_is_noop(self):
        params = init_params(2, 4, seed=0, dtype=np.float64)
        before = {n: t.data.copy() for n, t in params.named_tensors()}
        for _, t in params.named_tensors():
            t.grad = np.zeros_like(t.data)
        state = OptimizerState(base_lr=1e-3, weight_decay=0.0)
        optimizer_step(params, state, state.base_lr)
        for name, t in params.named_tensors():
            np.testing.assert_array_equal(t.data, before[name], err_msg=name)

    def test_single_step_matches_hand_computation(self):
        params = init_params(1, 1, seed=1, dtype=np.float64)
        state = OptimizerState(base_lr=1e-2, weight_decay=0.01)
        theta = {n: t.data.copy() for n, t in params.named_tensors()}
        grads = {}
        rng = np.random.default_rng(4)
        for n, t in params.named_tensors():
            g = rng.normal(size=t.data.shape)
            t.grad = g.copy()
            grads[n] = g
        optimizer_step(params, state, state.base_lr)
        for n, t in params.named_tensors():
            g = grads[n]
            m_hat = (0.1 * g) / (1 - 0.9)
            v_hat = (0.001 * g * g) / (1 - 0.999)
            want = theta[n] - 1e-2 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * theta[n])
            np.testing.assert_allclose(t.data, want, rtol=1e-12, err_msg=n)

    def test_missing_grad_is_error(self):
        params = init_params(2, 4, seed=2)
        with pytest.raises(DataError, match="gradient"):
            optimizer_step(params, OptimizerState(), 1e-5)

    def test_lr_schedule(self):
        state = OptimizerState(base_lr=1e-5, milestones=(10, 15))
        assert state.lr_at_epoch(1) == pytest.approx(1e-5)
        assert state.lr_at_epoch(9) == pytest.approx(1e-5)
        assert state.lr_at_epoch(10) == pytest.approx(1e-6)
        assert state.lr_at_epoch(12) == pytest.approx(1e-6)
        assert state.lr_at_epoch(15) == pytest.approx(1e-7)
        assert state.lr_at_epoch(20) == pytest.approx(1e-7)


class TestTrainLoop:
    def test_smoke_two_episodes(self, make_manifest):
        manifest, _ = make_manifest({"catA": {"train": 2, "good": 1, "spot": 2}})
        params, rows = train(
            manifest,
            SamplerConfig(k1=1, k2=1, seed=0),
            TrainConfig(num_proxies=3, epochs=1, episodes_per_epoch=2),
            LossConfig(),
            OptimizerState(),
            seed=0,
        )
        assert len(rows) == 2
        assert all(np.isfinite(r.total_loss) for r in rows)

    def test_deterministic_loss_trace(self, make_manifest):
        manifest, _ = make_manifest(
            {"catA": {"train": 2, "good": 1, "spot": 2},
             "catB": {"train": 2, "good": 1, "mark": 2}})

        def run():
            return train(
                manifest,
                SamplerConfig(k1=1, k2=1, seed=3),
                TrainConfig(num_proxies=4, epochs=2, episodes_per_epoch=5),
                LossConfig(),
                OptimizerState(),
                seed=3,
                dtype=np.float64,
            )

        params_a, rows_a = run()
        params_b, rows_b = run()
        assert rows_a == rows_b
        for (n, a), (_, b) in zip(params_a.named_tensors(), params_b.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=n)

    def test_trace_file_format(self, tmp_path):
        rows = [TraceRow(1, 1, 0.5, 0.25, 0.75, 1e-5)]
        write_trace(rows, tmp_path / "trace.tsv")
        fields = (tmp_path / "trace.tsv").read_text().strip().split("\t")
        assert len(fields) == 6
        assert fields[0] == "1"
