import math

import numpy as np
import pytest

from msesc.nn import (
    Adam,
    BatchNorm,
    CheckpointError,
    Conv1d,
    Conv2d,
    Dense,
    Module,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
)
from msesc.tensor import Tensor


def scalar_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Reference Adam written out one scalar at a time."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def _param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = _param([1.0, -2.0])
        opt = Adam({"p": p})
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_has_size_lr(self):
        p = _param([0.0, 0.0, 0.0])
        opt = Adam({"p": p}, lr=1e-3)
        p.grad = np.array([0.5, -3.0, 100.0])
        opt.step()
        np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-6)
        assert np.all(np.sign(p.data) == -np.sign(p.grad))

    def test_two_steps_match_scalar_reference(self, rng):
        start = rng.normal(size=4)
        grads = rng.normal(size=(2, 4))
        p = _param(start.copy())
        opt = Adam({"p": p}, lr=0.01)
        for g in grads:
            p.grad = g.copy()
            opt.step()
        expected = [scalar_adam(start[i], grads[:, i], lr=0.01) for i in range(4)]
        np.testing.assert_allclose(p.data, expected, atol=1e-10)

    def test_lr_override(self):
        p = _param([0.0])
        opt = Adam({"p": p}, lr=1.0)
        p.grad = np.array([1.0])
        opt.step(lr=1e-4)
        assert abs(p.data[0]) == pytest.approx(1e-4, rel=1e-6)

    def test_missing_grad_counts_as_zero(self):
        p, q = _param([1.0]), _param([1.0])
        opt = Adam({"p": p, "q": q})
        p.grad = np.array([1.0])
        opt.step()
        assert q.data[0] == 1.0 and p.data[0] < 1.0

    def test_non_finite_gradient_names_parameter(self):
        p = _param([1.0])
        opt = Adam({"stage.conv.weight": p})
        p.grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="stage.conv.weight"):
            opt.step()
        assert p.data[0] == 1.0


class Tiny(Module):
    def __init__(self, rng):
        self.conv = Conv2d(2, 3, (3, 3), rng)
        self.bn = BatchNorm(3)
        self.wave = Conv1d(1, 2, 5, 2, rng)
        self.heads = [Dense(3, 2, rng), Dense(2, 2, rng)]


class TestModules:
    def test_parameter_discovery(self, rng):
        names = [n for n, _ in Tiny(rng).named_parameters()]
        assert names == [
            "conv.weight", "bn.gamma", "bn.beta", "wave.weight",
            "heads.0.weight", "heads.0.bias", "heads.1.weight", "heads.1.bias",
        ]
        buffers = [n for n, _ in Tiny(rng).named_buffers()]
        assert buffers == ["bn.running_mean", "bn.running_var"]

    def test_train_eval_propagates(self, rng):
        m = Tiny(rng).eval()
        assert not any(x.training for x in m.modules())
        m.train()
        assert all(x.training for x in m.modules())

    def test_astype(self, rng):
        m = Tiny(rng).astype(np.float64)
        assert all(p.dtype == np.float64 for p in m.parameters())
        assert m.bn.running_var.dtype == np.float64

    def test_state_roundtrip(self, rng):
        a, b = Tiny(np.random.default_rng(1)), Tiny(np.random.default_rng(2))
        b.load_state_dict(a.state_dict())
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_state_missing_key(self, rng):
        m = Tiny(rng)
        state = m.state_dict()
        state.pop("bn.gamma")
        with pytest.raises(KeyError):
            m.load_state_dict(state)

    def test_batchnorm_module_updates_running_stats(self, rng):
        bn = BatchNorm(2)
        x = Tensor(rng.normal(1.0, 2.0, size=(8, 3, 2)))
        bn(x)
        assert np.all(bn.running_mean != 0)
        bn.eval()
        before = bn.running_mean.copy()
        bn(x)
        np.testing.assert_array_equal(bn.running_mean, before)

    def test_dense_shape(self, rng):
        assert Dense(5, 3, rng)(Tensor(rng.normal(size=(4, 5)))).shape == (4, 3)


class TestCheckpoint:
    def test_roundtrip_with_optimizer(self, tmp_path, rng):
        model = Tiny(rng)
        params = dict(model.named_parameters())
        opt = Adam(params)
        for p in params.values():
            p.grad = rng.normal(size=p.shape).astype(np.float32)
        opt.step()
        opt.step()
        save_checkpoint(tmp_path / "m.ckpt", model, opt, epoch=7, meta={"k": [1, 2]})

        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert ck.epoch == 7 and ck.adam_step == 2 and ck.meta == {"k": [1, 2]}
        fresh = Tiny(np.random.default_rng(99))
        fresh.load_state_dict(ck.model_state())
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(fresh.state_dict()[name], value)
        opt2 = Adam(dict(fresh.named_parameters()))
        ck.restore_optimizer(opt2)
        assert opt2.state.step == 2
        for name in params:
            np.testing.assert_array_equal(opt2.state.m[name], opt.state.m[name])
            np.testing.assert_array_equal(opt2.state.v[name], opt.state.v[name])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(40))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path, rng):
        save_checkpoint(tmp_path / "m.ckpt", Tiny(rng))
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")
