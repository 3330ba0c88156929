import dataclasses

import numpy as np
import pytest

from occreid import diffcore as dc
from occreid.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from occreid.data import SyntheticSpec, generate_synthetic
from occreid.errors import ConfigError, LoadError, NumericError
from occreid.gradcheck import tiny_model_config
from occreid.losses import mean_offdiag_cosine
from occreid.model import ModelConfig, build_model
from occreid.train import (Adam, TrainConfig, adam_step, fit, lr_at, model_from_checkpoint, read_trace,
                           write_trace)

TINY_MODEL = ModelConfig(channels=(8, 12, 16, 24), strides=(2, 2, 2, 1), dim=16, heads=2,
                         enc_layers=1, dec_layers=1, num_queries=3, dropout=0.1)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SyntheticSpec(num_ids=4, images_per_id=4, height=32, width=16,
                                            num_test_obstacles=3, seed=1))


def tiny_cfg(**kw):
    base = dict(epochs=3, warmup_epochs=2, decay_epochs=(3,), P=2, K=2, k=1, num_obstacles=3, seed=7)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    @pytest.mark.parametrize("epoch, lr", [(1, 3.5e-5), (10, 3.5e-4), (39, 3.5e-4), (40, 3.5e-5),
                                           (69, 3.5e-5), (70, 3.5e-6), (80, 3.5e-6)])
    def test_reference_values(self, epoch, lr):
        assert lr_at(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)

    def test_linear_warmup(self):
        cfg = TrainConfig()
        for e in range(1, 11):
            assert lr_at(e, cfg) == pytest.approx(3.5e-5 + (e - 1) / 9 * (3.5e-4 - 3.5e-5), rel=1e-12)

    def test_monotone_within_phases(self):
        cfg = TrainConfig()
        lrs = [lr_at(e, cfg) for e in range(1, 81)]
        assert all(a <= b for a, b in zip(lrs[:10], lrs[1:10]))
        assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))

    def test_epoch_zero(self):
        with pytest.raises(ConfigError):
            lr_at(0, TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(start_lr=1e-3), dict(epochs=0), dict(cfl=True, osa=False),
                                    dict(P=1), dict(K=1), dict(decay_epochs=(0,))])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_roundtrip_dict(self):
        cfg = TrainConfig(k=3, decay_epochs=(5, 9))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestAdam:
    def test_zero_grad_unchanged(self):
        p = {"w": np.array([1.0, -2.0])}
        m = {"w": (np.zeros(2), np.zeros(2))}
        adam_step(p, {"w": np.zeros(2)}, m, 1, 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_missing_grad_skipped(self):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": None}, {"w": (np.zeros(1), np.zeros(1))}, 1, 0.1)
        assert p["w"][0] == 1.0

    def test_first_step_closed_form(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = {"w": np.zeros(3)}
        m = {"w": (np.zeros(3), np.zeros(3))}
        adam_step(p, {"w": g}, m, 1, 0.01)
        # m_hat = g, v_hat = g^2  ->  step = -lr * g / (|g| + eps)
        np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_two_steps_closed_form(self):
        g1, g2 = 0.4, -0.2
        p = {"w": np.zeros(1)}
        m = {"w": (np.zeros(1), np.zeros(1))}
        adam_step(p, {"w": np.array([g1])}, m, 1, 0.1)
        adam_step(p, {"w": np.array([g2])}, m, 2, 0.1)
        m2 = 0.9 * 0.1 * g1 + 0.1 * g2
        v2 = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
        step2 = 0.1 * (m2 / (1 - 0.9 ** 2)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
        assert p["w"][0] == pytest.approx(-0.1 * g1 / (abs(g1) + 1e-8) - step2, rel=1e-12)

    def test_non_finite_grad_names_param(self):
        p = {"layer.w": np.zeros(2)}
        with pytest.raises(NumericError, match="layer.w"):
            adam_step(p, {"layer.w": np.array([np.nan, 0])}, {"layer.w": (np.zeros(2), np.zeros(2))}, 1, 0.1)

    def test_state_roundtrip(self, f64):
        model = build_model(tiny_model_config())
        opt = Adam(model)
        for p in model.parameters():
            p.grad = np.ones_like(p.data)
        opt.step(1e-3)
        opt2 = Adam(model)
        opt2.load_state(opt.state_tensors(), opt.t)
        for k, (m, v) in opt.moments.items():
            assert np.array_equal(opt2.moments[k][0], m) and np.array_equal(opt2.moments[k][1], v)


class TestCheckpoint:
    def test_roundtrip_dtypes_and_meta(self, tmp_path):
        t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b/c": np.array([1.5], np.float64),
             "i": np.array([[1, 2]], np.int64), "empty": np.zeros((0, 4), np.float32)}
        save_checkpoint(tmp_path / "x.ckpt", Checkpoint(t, {"step": 3, "nested": {"k": [1, 2]}}))
        back = load_checkpoint(tmp_path / "x.ckpt")
        assert back.meta == {"step": 3, "nested": {"k": [1, 2]}}
        for k, v in t.items():
            assert back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v)

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", Checkpoint({"w": np.array([1.0, 2.0], np.float32)}))
        raw = (tmp_path / "x.ckpt").read_bytes()
        assert raw.startswith(b"OCCREIDCKPT\n")
        version, hlen = np.frombuffer(raw[12:20], "<u4")
        assert version == 1
        assert np.array_equal(np.frombuffer(raw[20 + hlen:], "<f4"), [1.0, 2.0])

    @pytest.mark.parametrize("mutate", [lambda b: b"XX" + b[2:], lambda b: b[:-3]])
    def test_corrupt_files(self, tmp_path, mutate):
        save_checkpoint(tmp_path / "x.ckpt", Checkpoint({"w": np.ones(8, np.float32)}))
        p = tmp_path / "x.ckpt"
        p.write_bytes(mutate(p.read_bytes()))
        with pytest.raises(LoadError):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_dim_mismatch_names_tensor(self):
        a = build_model(dataclasses.replace(TINY_MODEL, height=32, width=16))
        b = build_model(dataclasses.replace(TINY_MODEL, height=32, width=16, num_queries=4))
        with pytest.raises(LoadError, match="queries"):
            b.load_state_dict(a.state_dict())


class TestFit:
    def test_smoke_one_epoch(self, tiny_data, tmp_path):
        res = fit(tiny_data, tiny_cfg(epochs=1), TINY_MODEL, out_dir=tmp_path)
        assert len(res.trace) == 2  # 4 ids / P=2
        assert all(np.all(np.isfinite(row[2:])) for row in res.trace)
        assert read_trace(tmp_path / "loss_trace.tsv") == res.trace
        model, cfg = model_from_checkpoint(load_checkpoint(tmp_path / "model.ckpt"))
        assert cfg.num_classes == 4 and (cfg.height, cfg.width) == (32, 16)

    def test_trace_bit_identical(self, tiny_data):
        a = fit(tiny_data, tiny_cfg(), TINY_MODEL).trace
        b = fit(tiny_data, tiny_cfg(), TINY_MODEL).trace
        assert a == b

    def test_seed_changes_trace(self, tiny_data):
        a = fit(tiny_data, tiny_cfg(seed=1), TINY_MODEL, max_steps=2).trace
        b = fit(tiny_data, tiny_cfg(seed=2), TINY_MODEL, max_steps=2).trace
        assert a != b

    def test_resume_is_bit_exact(self, tiny_data, tmp_path):
        full = fit(tiny_data, tiny_cfg(), TINY_MODEL)
        half = fit(tiny_data, tiny_cfg(), TINY_MODEL, max_steps=3)
        save_checkpoint(tmp_path / "half.ckpt", half.checkpoint)
        rest = fit(tiny_data, tiny_cfg(), resume=load_checkpoint(tmp_path / "half.ckpt"))
        assert half.trace + rest.trace == full.trace
        for k, v in full.checkpoint.tensors.items():
            assert np.array_equal(rest.checkpoint.tensors[k], v), k

    def test_variants_run(self, tiny_data):
        for kw in (dict(osa=False, cfl=False), dict(osa=True, cfl=False)):
            res = fit(tiny_data, tiny_cfg(**kw), TINY_MODEL, max_steps=2)
            assert res.trace[-1][6] == 0.0  # no reverse triplet without contrast mining
        res = fit(tiny_data, tiny_cfg(osa=False, cfl=False, std_aug=False),
                  dataclasses.replace(TINY_MODEL, kind="pooling"), max_steps=2)
        assert res.trace[-1][4] == 0.0  # pooling model has no queries

    def test_per_image_decorrelation_mode(self, tiny_data):
        from occreid.losses import LossConfig
        res = fit(tiny_data, tiny_cfg(loss=LossConfig(decorrelation_mode="per_image")), TINY_MODEL, max_steps=2)
        assert res.trace[-1][4] > 0

    def test_decorrelation_trend(self, tiny_data):
        cfg = dataclasses.replace(TINY_MODEL, height=32, width=16, num_classes=4)
        before = mean_offdiag_cosine(build_model(cfg, 7).queries.data)
        res = fit(tiny_data, tiny_cfg(epochs=6, base_lr=1e-2, start_lr=1e-3, decay_epochs=(6,)), TINY_MODEL)
        assert mean_offdiag_cosine(res.model.queries.data) < before

    def test_non_finite_keeps_last_good(self, tiny_data, tmp_path, monkeypatch):
        import occreid.train as T
        real = T.compute_losses
        calls = {"n": 0}

        def boom(*a, **kw):
            comps, total, mined = real(*a, **kw)
            calls["n"] += 1
            if calls["n"] == 2:
                total = dc.scale(total, float("nan"))
            return comps, total, mined

        monkeypatch.setattr(T, "compute_losses", boom)
        with pytest.raises(NumericError, match="step 1"):
            fit(tiny_data, tiny_cfg(), TINY_MODEL, out_dir=tmp_path)
        ck = load_checkpoint(tmp_path / "last_good.ckpt")
        assert ck.meta["step"] == 1

    def test_periodic_checkpoints(self, tiny_data, tmp_path):
        fit(tiny_data, tiny_cfg(epochs=2, checkpoint_every=1), TINY_MODEL, out_dir=tmp_path)
        assert (tmp_path / "epoch001.ckpt").exists() and (tmp_path / "epoch002.ckpt").exists()
        assert load_checkpoint(tmp_path / "epoch001.ckpt").meta["step"] == 2

    def test_trace_io(self, tmp_path):
        rows = [(0, 1, 3.5e-05, 1.25, 0.1, 0.0, 0.3333333333333333, 1.6833333333333333)]
        write_trace(tmp_path / "t.tsv", rows)
        assert read_trace(tmp_path / "t.tsv") == rows
        assert (tmp_path / "t.tsv").read_text().splitlines()[0].split("\t") == \
            ["step", "epoch", "lr", "ce", "o", "tri", "rtri", "total"]
