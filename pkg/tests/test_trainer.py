import json
import math

import numpy as np
import pytest

from deskbert.datamix import ArraySource
from deskbert.encoder import EncoderConfig, EncoderModel
from deskbert.tensor import Tensor
from deskbert.trainer import (FULL_SCALE_ANNEAL_STEPS, FULL_SCALE_PRETRAIN_STEPS, AdamWConfig, CheckpointError,
                              JsonlSink, NonFiniteGradientError, OptimizerState, Phase, TrainPlan, adamw_step,
                              clip_grad_norm, load_checkpoint, full_scale_plan, save_checkpoint, tokens_per_step, train,
                              wsd_lr)


def param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


class TestSchedule:
    def test_full_scale_values(self):
        plan = full_scale_plan()
        pre = plan.phases[0].steps
        assert wsd_lr(0, plan) == 0.0
        assert wsd_lr(1000, plan) == pytest.approx(5e-5, abs=1e-18)
        assert all(wsd_lr(s, plan) == 1e-4 for s in (2000, 2001, 250_000, pre - 1))
        mid = pre + (plan.phases[1].steps - 1) / 2
        assert abs(wsd_lr(mid, plan) - 5e-5) < 1e-12
        assert abs(wsd_lr(plan.total_steps - 1, plan)) <= 1e-12

    def test_plan_constants(self):
        plan = full_scale_plan()
        pre, ann = plan.phases
        assert (plan.base_lr, plan.warmup_steps) == (1e-4, 2000)
        assert (pre.masking_ratio, pre.rope_theta, pre.seq_len, pre.length_policy) == (0.5, 1e4, 2048, "packed")
        assert (ann.masking_ratio, ann.rope_theta, ann.seq_len, ann.min_len) == (0.1, 2.5e5, 8192, 12)
        assert plan.optimizer == AdamWConfig(0.9, 0.95, 1e-5, 0.1, 1.0)

    def test_step_budget_from_tokens(self):
        per_step = tokens_per_step(24, 2048, 1, 192)
        assert per_step == 9_437_184
        assert FULL_SCALE_PRETRAIN_STEPS == math.ceil(4_843_357e6 / per_step)
        assert FULL_SCALE_ANNEAL_STEPS == math.ceil(200_000e6 / per_step)

    def test_monotone_decay(self):
        plan = full_scale_plan(pretrain_steps=10, anneal_steps=20, warmup_steps=4)
        lrs = [wsd_lr(s, plan) for s in range(10, 30)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_budget(self):
        plan = full_scale_plan(pretrain_steps=10, anneal_steps=5)
        with pytest.raises(ValueError):
            wsd_lr(15, plan)
        with pytest.raises(ValueError):
            wsd_lr(-1, plan)

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            TrainPlan((Phase("a", 3, 0.5, 1e4, schedule="cosine"), Phase("b", 3, 0.5, 1e4)))
        with pytest.raises(ValueError):
            Phase("a", 3, 0.5, 1e4, length_policy="ragged")


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = param([1.0, -2.0])
        p.grad = np.zeros(2)
        adamw_step({"p": p}, OptimizerState(AdamWConfig(weight_decay=0.0)), 1e-3)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = param([0.5])
        p.grad = np.ones(1)
        h = AdamWConfig(weight_decay=0.0, clip_norm=None)
        adamw_step({"p": p}, OptimizerState(h), 1e-3)
        # m_hat = 1, v_hat = 1 -> update = 1 / (1 + eps)
        assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-5), abs=1e-15)

    def test_constant_gradient_sequence(self):
        p = param([0.0])
        state = OptimizerState(AdamWConfig(weight_decay=0.0, clip_norm=None))
        for _ in range(5):
            p.grad = np.ones(1)
            adamw_step({"p": p}, state, 1e-2)
        assert p.data[0] == pytest.approx(-5e-2 / (1 + 1e-5), rel=1e-12)

    def test_decoupled_weight_decay(self):
        p = param([2.0])
        p.grad = np.zeros(1)
        adamw_step({"p": p}, OptimizerState(AdamWConfig(weight_decay=0.1)), 1e-2)
        assert p.data[0] == pytest.approx(2.0 * (1 - 1e-3), abs=1e-15)

    def test_clipping(self):
        p = param([0.0, 0.0])
        p.grad = np.array([6.0, 8.0])
        assert clip_grad_norm({"p": p}, 1.0) == pytest.approx(10.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])
        q = param([0.0])
        q.grad = np.array([0.5])
        clip_grad_norm({"q": q}, 1.0)
        assert q.grad[0] == 0.5

    def test_non_finite_names_parameter(self):
        p = param([0.0])
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteGradientError, match="'layers.0.wq'"):
            adamw_step({"layers.0.wq": p}, OptimizerState(), 1e-3)


def tiny_setup(steps=(12, 6), seed=0):
    cfg = EncoderConfig(n_layers=1, d_model=16, d_ffn=32, n_heads=2, n_kv_heads=1, vocab_size=40, max_seq_len=32)
    model = EncoderModel.init(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    rows = rng.integers(5, 40, size=(16, 12))
    plan = full_scale_plan(pretrain_steps=steps[0], anneal_steps=steps[1], warmup_steps=4, base_lr=3e-3,
                      checkpoint_every=6)
    sources = {"pretrain": ArraySource(rows, 4, seed=1), "anneal": ArraySource(rows, 4, seed=2)}
    return plan, model, sources


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        plan, model, sources = tiny_setup()
        res = train(plan, model, sources, stop_step=3)
        a = save_checkpoint(tmp_path / "a.ckpt", res.model, res.optimizer, {"note": "x"})
        ck = load_checkpoint(a)
        b = save_checkpoint(tmp_path / "b.ckpt", ck.model, ck.optimizer, {"note": "x"})
        assert a.read_bytes() == b.read_bytes()
        assert ck.optimizer.step == 3 and ck.meta["note"] == "x"

    def test_corruption_detected(self, tmp_path):
        plan, model, _ = tiny_setup()
        path = save_checkpoint(tmp_path / "a.ckpt", model, None)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)
        path.write_bytes(bytes(blob[:40]))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        (tmp_path / "junk").write_bytes(b"hello world" * 10)
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "junk")


class TestTrain:
    def test_log_and_phases(self, tmp_path):
        plan, model, sources = tiny_setup()
        res = train(plan, model, sources, out_dir=tmp_path)
        assert [r["phase"] for r in res.log] == ["pretrain"] * 12 + ["anneal"] * 6
        assert res.log[0]["lr"] == 0.0 and res.log[-1]["lr"] == pytest.approx(0.0, abs=1e-15)
        assert all(abs(r["masked_fraction"] - 0.5) < 0.05 for r in res.log[:12])
        assert sorted(p.name for p in res.checkpoints) == ["step_00000006.ckpt", "step_00000012.ckpt",
                                                            "step_00000018.ckpt"]
        assert res.log[-1]["tokens_seen"] == 18 * 4 * 12

    def test_deterministic(self):
        runs = [train(*tiny_setup()).log for _ in range(2)]
        assert [r["loss"] for r in runs[0]] == [r["loss"] for r in runs[1]]

    def test_resume_matches_straight_run(self, tmp_path):
        straight = train(*tiny_setup())
        plan, model, sources = tiny_setup()
        first = train(plan, model, sources, stop_step=6, out_dir=tmp_path)
        ck = load_checkpoint(first.checkpoints[-1])
        _, _, fresh = tiny_setup()
        for name, state in ck.meta["sources"].items():
            fresh[name].load_state_dict(state)
        rest = train(plan, ck.model, fresh, optimizer=ck.optimizer, start_step=ck.meta["step"],
                     tokens_seen=ck.meta["tokens_seen"])
        assert [r["loss"] for r in first.log + rest.log] == [r["loss"] for r in straight.log]
        for k, p in straight.model.params.items():
            np.testing.assert_array_equal(p.data, rest.model.params[k].data)

    def test_invalid_range(self):
        plan, model, sources = tiny_setup()
        with pytest.raises(ValueError):
            train(plan, model, sources, start_step=5, stop_step=3)

    def test_jsonl_sink_truncates(self, tmp_path):
        sink = JsonlSink(tmp_path / "m.jsonl")
        for s in range(5):
            sink({"step": s})
        JsonlSink(tmp_path / "m.jsonl", truncate_from_step=3)
        steps = [json.loads(x)["step"] for x in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert steps == [0, 1, 2]
