import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest

from crossdim.synth import generate_corpus
from crossdim.tensor import Tensor
from crossdim.trainer import (
    CKPT_MAGIC,
    PAPER_SCALE,
    AdamState,
    Batcher,
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigMismatchError,
    TrainConfig,
    TrainState,
    adamw_step,
    clip_grad_norm,
    decode_checkpoint,
    encode_checkpoint,
    latest_checkpoint,
    load_checkpoint,
    lr_at_step,
    read_metrics,
    save_checkpoint,
    train_loop,
    train_step,
)

ORACLES = json.loads((Path(__file__).parent / "oracles" / "oracles.json").read_text())

TINY = TrainConfig(
    epochs=2,
    warmup_epochs=1,
    batch_size=4,
    num_layers=1,
    num_heads=2,
    model_dim=16,
    mlp_ratio=2,
    text_layers=1,
    embed_dim=8,
    num_prototypes=8,
    k=2,
    warmup_select=1,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(8, 8, seed=0)


@pytest.fixture(scope="module")
def trained(corpus):
    state = TrainState.initial(TINY)
    train_step(state, corpus[:2], corpus[8:10], 4)
    return state


class TestSchedule:
    cfg = PAPER_SCALE

    def test_paper_scale_oracle(self):
        o = ORACLES["lr_paper_scale"]
        assert o["config"] == {"epochs": 50, "warmup": 20, "init_lr": 1e-8, "peak_lr": 2e-5}
        assert lr_at_step(0, self.cfg) == o["step0"]
        assert lr_at_step(20, self.cfg) == pytest.approx(o["warmup_end"], rel=1e-12)
        assert lr_at_step(35, self.cfg) == pytest.approx(o["cosine_mid"], rel=1e-12)
        assert lr_at_step(50, self.cfg) == pytest.approx(0.0, abs=1e-20)

    def test_continuous_at_junction(self):
        below = lr_at_step(20 * 100 - 1, self.cfg, steps_per_epoch=100)
        above = lr_at_step(20 * 100, self.cfg, steps_per_epoch=100)
        assert abs(above - below) < 2e-5 / 1000

    def test_monotone_phases(self):
        lrs = [lr_at_step(s, self.cfg, 10) for s in range(501)]
        assert all(a <= b for a, b in zip(lrs[:200], lrs[1:201]))
        assert all(a >= b for a, b in zip(lrs[200:], lrs[201:]))

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_at_step(-1, self.cfg)


class TestAdamW:
    def test_three_step_oracle(self):
        o = ORACLES["adamw"]
        p = {"w": Tensor(np.array(o["p0"]))}
        state = AdamState()
        for g, expected in zip(o["grads"], o["trajectory"]):
            adamw_step(p, {"w": np.array(g)}, state, o["lr"], o["wd"])
            assert abs(float(p["w"].data) - expected) <= 1e-12

    def test_zero_grad_no_decay_unchanged(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        adamw_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, 0.0)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_zero_grad_decay_shrinks(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        adamw_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, 0.05)
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.05), rtol=1e-15)

    def test_decay_filter(self):
        p = {"w": Tensor(np.array([1.0])), "b": Tensor(np.array([1.0]))}
        adamw_step(p, {"w": np.zeros(1), "b": np.zeros(1)}, AdamState(), 0.1, 0.5, decay=lambda n: n == "w")
        assert p["w"].data[0] == pytest.approx(0.95) and p["b"].data[0] == 1.0

    def test_nan_gradient_aborts(self):
        p = {"w": Tensor(np.array([1.0]))}
        with pytest.raises(FloatingPointError, match="w"):
            adamw_step(p, {"w": np.array([np.nan])}, AdamState(), 0.1, 0.0)
        assert p["w"].data[0] == 1.0

    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0, abs=1e-6)


class TestConfig:
    def test_text_round_trip(self):
        assert TrainConfig.from_text(TINY.to_text()) == TINY

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_text("not_a_field=1\n")

    def test_ablation_arms(self):
        vl = TINY.with_ablation("vl")
        assert not vl.use_sd and not vl.use_attentive_selection
        assert TINY.with_ablation("full").use_attentive_selection
        with pytest.raises(ValueError):
            TINY.with_ablation("nope")

    def test_hash_depends_on_every_field(self):
        assert TINY.config_hash() != TrainConfig.from_text(TINY.to_text(), seed=1).config_hash()


class TestBatcher:
    def test_epoch_covers_every_sample(self, corpus):
        b = Batcher(corpus, 4, seed=0)
        seen = []
        for s in range(b.steps_per_epoch):
            two, three = b.batch(s)
            seen += two + three
        assert sorted(seen) == list(range(16))

    def test_pure_function_of_step(self, corpus):
        assert Batcher(corpus, 4, 3).batch(5) == Batcher(corpus, 4, 3).batch(5)


class TestTrainStep:
    def test_vl_arm_has_no_distillation(self, corpus):
        state = TrainState.initial(TINY.with_ablation("vl"))
        r = train_step(state, corpus[:2], corpus[8:10])
        assert r.icl == 0.0 and r.pcl == 0.0 and r.total == r.vl

    def test_full_arm_reports_all_terms(self, corpus):
        state = TrainState.initial(TINY)
        state.step = 1  # past the selection warm-up
        r = train_step(state, corpus[:2], corpus[8:10], steps_per_epoch=4)
        assert r.icl > 0 and r.pcl > 0
        assert r.total == pytest.approx(r.vl + r.icl + r.pcl)

    def test_deterministic(self, corpus):
        runs = []
        for _ in range(2):
            state = TrainState.initial(TINY)
            runs.append([train_step(state, corpus[:2], corpus[8:10], 4) for _ in range(3)])
        assert runs[0] == runs[1]

    def test_initial_loss_near_log_batch(self):
        # At unit temperature the random-init similarity matrix is close to uniform.
        # The default 0.07 magnifies the spread of random cosines, so the loss sits above ln n there.
        data = generate_corpus(8, 8, seed=5)
        at_unit, at_default = [], []
        for seed in range(3):
            state = TrainState.initial(TrainConfig(batch_size=16, seed=seed))
            at_default.append(train_step(state, data[:8], data[8:]).vl)
            state = TrainState.initial(TrainConfig(batch_size=16, seed=seed))
            lt = state.text["log_temperature"]
            lt.data = np.zeros_like(lt.data)
            at_unit.append(train_step(state, data[:8], data[8:]).vl)
        assert abs(np.median(at_unit) - math.log(16)) < 0.1
        assert np.median(at_default) > math.log(16)

    def test_teacher_drift_bounded(self, corpus):
        # the teacher starts at the student and only averages toward later students,
        # so elementwise it stays between the smallest and largest student value seen
        state = TrainState.initial(TINY)
        lo = {k: v.data.copy() for k, v in state.student.items()}
        hi = {k: v.data.copy() for k, v in state.student.items()}
        for _ in range(4):
            train_step(state, corpus[:2], corpus[8:10], 4)
            for k, v in state.student.items():
                lo[k] = np.minimum(lo[k], v.data)
                hi[k] = np.maximum(hi[k], v.data)
                t = state.teacher.params[k].data
                assert np.all(t >= lo[k] - 1e-6) and np.all(t <= hi[k] + 1e-6)
        assert state.teacher.params.keys() == state.student.keys()

    def test_teacher_receives_no_gradient(self, corpus):
        state = TrainState.initial(TINY)
        state.step = 1
        train_step(state, corpus[:2], corpus[8:10], 4)
        for t in state.teacher.params.values():
            assert t.grad is None or not np.any(t.grad)


class TestCheckpoint:
    def test_save_load_save_identical(self, trained, tmp_path):
        save_checkpoint(trained, tmp_path / "a.ckpt")
        again = load_checkpoint(tmp_path / "a.ckpt", expected=TINY)
        assert encode_checkpoint(again) == (tmp_path / "a.ckpt").read_bytes()
        assert again.step == 1 and again.adam.t == 1

    def test_wrong_config(self, trained):
        with pytest.raises(ConfigMismatchError):
            decode_checkpoint(encode_checkpoint(trained), expected=TrainConfig.from_text(TINY.to_text(), seed=9))

    def test_tampered_length(self, trained):
        buf = bytearray(encode_checkpoint(trained))
        # config-text length field sits after magic, version, digest, step and adam t
        offset = 4 + 2 + 32 + 16
        (n,) = struct.unpack_from("<I", buf, offset)
        struct.pack_into("<I", buf, offset, n + 7)
        with pytest.raises(CheckpointCorruptError):
            decode_checkpoint(bytes(buf))

    def test_version(self, trained):
        buf = bytearray(encode_checkpoint(trained))
        buf[4] = 99
        with pytest.raises(CheckpointVersionError):
            decode_checkpoint(bytes(buf))

    def test_bad_magic(self, trained):
        buf = encode_checkpoint(trained)
        assert buf[:4] == CKPT_MAGIC
        with pytest.raises(CheckpointCorruptError):
            decode_checkpoint(b"ZZZZ" + buf[4:])


class TestLoop:
    def test_zero_epochs(self, corpus, tmp_path):
        cfg = TrainConfig.from_text(TINY.to_text(), epochs=0)
        state = train_loop(cfg, corpus, tmp_path)
        assert (tmp_path / "metrics.csv").read_text() == "step,lr,L_vl,L_icl,L_pcl,total\n"
        assert load_checkpoint(latest_checkpoint(tmp_path)).step == 0 == state.step

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        full = tmp_path / "full"
        train_loop(TINY, corpus, full)
        part = tmp_path / "part"
        train_loop(TINY, corpus, part)
        # throw away the last epoch and restart from the first checkpoint
        (part / "epoch_002.ckpt").unlink()
        train_loop(TINY, corpus, part, resume=part / "epoch_001.ckpt")
        assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
        assert (full / "epoch_002.ckpt").read_bytes() == (part / "epoch_002.ckpt").read_bytes()

    def test_metrics_file(self, corpus, tmp_path):
        train_loop(TINY, corpus, tmp_path)
        m = read_metrics(tmp_path / "metrics.csv")
        assert len(m) == 2 * Batcher(corpus, 4, 0).steps_per_epoch
        assert np.all(np.isfinite(m["total"]))

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(ValueError):
            train_loop(TINY, [], tmp_path)
