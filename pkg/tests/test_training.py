import numpy as np
import pytest

from densedenoise import tensor as T
from densedenoise.data import PatchSet
from densedenoise.layers import Parameter
from densedenoise.metrics import SsimParams
from densedenoise.model import ModelConfig, build
from densedenoise.reference import central_difference, max_relative_error
from densedenoise.tensor import Tape, Tensor
from densedenoise.training import (
    Adam,
    DivergenceError,
    SgdMomentum,
    TrainConfig,
    TrainLog,
    loss_combined,
    loss_mse_residual,
    train_stage1,
    train_stage2,
)


def zero_residual_net(seed=0):
    net = build(ModelConfig.micro(), seed=seed)
    net.final.weight.value.data[...] = 0.0
    net.final.bias.value.data[...] = 0.0
    return net


def tiny_dataset(rng, n=8, size=16):
    pairs = []
    for i in range(n):
        clean = rng.random((size, size)).astype(np.float32)
        noisy = (clean + 0.1 * rng.standard_normal((size, size))).astype(np.float32)
        pairs.append((clean, noisy))
    return PatchSet(pairs, size)


class TestLosses:
    def test_zero_net_zero_noise_gives_zero(self, rng):
        net = zero_residual_net()
        x = Tensor(rng.random((2, 1, 12, 12)).astype(np.float32))
        assert loss_mse_residual(net, x, x, mode="infer").item() == 0.0

    def test_mse_arithmetic_with_zero_net(self, rng):
        net = zero_residual_net()
        x = rng.random((1, 1, 8, 8)).astype(np.float64)
        d = rng.standard_normal((1, 1, 8, 8))
        d *= np.sqrt(2.0) / np.linalg.norm(d)  # ||y - x||_F^2 = 2
        y = x + d
        loss = loss_mse_residual(net, Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64), "infer")
        assert loss.item() == pytest.approx(1.0, rel=1e-6)

    def test_combined_zero_for_perfect_residual(self, rng):
        net = zero_residual_net()
        x = Tensor(rng.random((1, 1, 32, 32)).astype(np.float32))
        loss = loss_combined(net, x, x, mode="infer", ssim_params=SsimParams().with_scales(3))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_combined_at_least_mse(self, rng):
        net = build(ModelConfig.micro(), seed=3)
        x = Tensor(rng.random((2, 1, 32, 32)).astype(np.float32))
        y = Tensor(np.clip(x.data + 0.1 * rng.standard_normal(x.shape), 0, 1).astype(np.float32))
        sp = SsimParams().with_scales(3)
        mse = loss_mse_residual(net, x, y, "infer").item()
        combined = loss_combined(net, x, y, "infer", sp).item()
        assert combined >= mse

    def test_empty_batch_rejected(self):
        net = zero_residual_net()
        empty = Tensor(np.zeros((0, 1, 8, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            loss_mse_residual(net, empty, empty)

    def test_batch_shape_mismatch(self, rng):
        net = zero_residual_net()
        with pytest.raises(T.ShapeMismatchError):
            loss_mse_residual(net, Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((2, 1, 8, 8))))


class TestOptimizers:
    def _scalar_param(self, value):
        return Parameter("p", Tensor(np.array([value]), requires_grad=True, dtype=np.float64))

    def test_adam_first_step_moves_by_lr(self):
        p = self._scalar_param(1.0)
        p.value.grad = np.array([1.0])
        Adam([p], lr=0.1).step()
        # bias-corrected first step is lr * g / (|g| + eps) ~= lr
        assert p.value.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_sgd_update_rule(self):
        p = self._scalar_param(2.0)
        p.value.grad = np.array([1.0])
        SgdMomentum([p], lr=0.5, momentum=0.0).step()
        assert p.value.data[0] == pytest.approx(1.5)

    def test_frozen_parameter_not_updated(self):
        p = self._scalar_param(1.0)
        p.frozen = True
        p.value.grad = np.array([5.0])
        Adam([p], lr=0.1).step()
        assert p.value.data[0] == 1.0

    def test_gradients_zeroed_after_step(self):
        p = self._scalar_param(1.0)
        p.value.grad = np.array([1.0])
        Adam([p], lr=0.1).step()
        assert p.value.grad is None

    def test_unknown_param_rejected(self):
        p = self._scalar_param(1.0)
        opt = Adam([p], lr=0.1)
        del opt.state["p"]
        p.value.grad = np.array([1.0])
        with pytest.raises(KeyError):
            opt.step()


class TestStage1:
    def test_loss_decreases_one_epoch(self, rng):
        net = build(ModelConfig.micro(), seed=0)
        ds = tiny_dataset(rng, n=32)
        log = train_stage1(net, ds, TrainConfig(epochs=1, batch_size=8, learning_rate=1e-3, seed=0))
        assert log.losses[-1] < log.losses[0]

    def test_lr_zero_is_identity(self, rng):
        net = build(ModelConfig.micro(), seed=1)
        before = {p.name: p.value.data.copy() for p in net.parameters()}
        train_stage1(net, tiny_dataset(rng), TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, seed=0))
        for p in net.parameters():
            assert np.array_equal(before[p.name], p.value.data)

    def test_deterministic_loss_sequences(self, rng):
        ds = tiny_dataset(rng, n=16)
        logs = []
        for _ in range(2):
            net = build(ModelConfig.micro(), seed=2)
            logs.append(train_stage1(net, ds, TrainConfig(epochs=1, batch_size=4, learning_rate=1e-3, seed=5)))
        assert logs[0].losses == logs[1].losses

    def test_divergence_aborts(self, rng):
        net = build(ModelConfig.micro(), seed=0)
        net.final.bias.value.data[...] = np.nan
        with pytest.raises(DivergenceError):
            train_stage1(net, tiny_dataset(rng), TrainConfig(epochs=1, batch_size=4, seed=0))

    def test_wrong_stage_config_rejected(self, rng):
        net = build(ModelConfig.micro(), seed=0)
        cfg = TrainConfig(stage="stage2_lastlayer_combined")
        with pytest.raises(ValueError):
            train_stage1(net, tiny_dataset(rng), cfg)


class TestStage2:
    def _stage2_cfg(self, **kw):
        kw.setdefault("stage", "stage2_lastlayer_combined")
        kw.setdefault("learning_rate", 1e-4)
        kw.setdefault("batch_size", 4)
        kw.setdefault("epochs", 1)
        kw.setdefault("seed", 0)
        return TrainConfig(**kw)

    def test_non_final_parameters_bit_unchanged(self, rng):
        net = build(ModelConfig.micro(), seed=3)
        before = {p.name: p.value.data.copy() for p in net.parameters()}
        stats_before = {n: b.copy() for n, b in net.buffers()}
        train_stage2(net, tiny_dataset(rng, size=16), self._stage2_cfg())
        for p in net.parameters():
            if not p.name.startswith("final_conv"):
                assert np.array_equal(before[p.name], p.value.data), p.name
        for n, b in net.buffers():
            assert np.array_equal(stats_before[n], b), n

    def test_final_layer_does_change(self, rng):
        net = build(ModelConfig.micro(), seed=3)
        w_before = net.final.weight.value.data.copy()
        train_stage2(net, tiny_dataset(rng, size=16), self._stage2_cfg(learning_rate=1e-3))
        assert not np.array_equal(w_before, net.final.weight.value.data)

    def test_zero_epochs_is_identity(self, rng):
        net = build(ModelConfig.micro(), seed=4)
        before = {p.name: p.value.data.copy() for p in net.parameters()}
        train_stage2(net, tiny_dataset(rng), self._stage2_cfg(epochs=0))
        for p in net.parameters():
            assert np.array_equal(before[p.name], p.value.data)

    def test_all_layers_ablation_flag(self, rng):
        net = build(ModelConfig.micro(), seed=5)
        first_before = net.first.conv.weight.value.data.copy()
        cfg = self._stage2_cfg(stage2_all_layers=True, learning_rate=1e-3)
        train_stage2(net, tiny_dataset(rng, size=16), cfg)
        assert not np.array_equal(first_before, net.first.conv.weight.value.data)


class TestLossGradients:
    """Full-network gradient checks on the 16x16 micro setup, 64-bit."""

    @pytest.mark.parametrize("kind", ["mse_residual", "combined"])
    def test_loss_gradients_match_finite_differences(self, rng, kind):
        net = build(ModelConfig.micro(), seed=7, dtype=np.float64)
        x = Tensor(rng.random((1, 1, 16, 16)), dtype=np.float64)
        y = Tensor(np.clip(x.data + 0.1 * rng.standard_normal(x.shape), 0, 1), dtype=np.float64)
        sp = SsimParams().with_scales(3)

        def compute():
            if kind == "mse_residual":
                return loss_mse_residual(net, x, y, mode="infer")
            return loss_combined(net, x, y, mode="infer", ssim_params=sp)

        net.zero_grad()
        with Tape() as tape:
            tape.backward(compute())

        def f():
            with T.no_grad():
                return compute().item()

        # spot-check a representative subset of parameters end to end;
        # h=1e-5 keeps finite-difference truncation well below tolerance
        # (the full sweep lives in the acceptance suite)
        names = {"first_conv.conv.weight", "first_conv.bn.gamma",
                 "block1.layer2.conv.weight", "trans2.bn.beta",
                 "final_conv.weight", "final_conv.bias"}
        for p in net.parameters():
            if p.name not in names:
                continue
            num = central_difference(f, p.value.data, h=1e-5)
            assert max_relative_error(p.value.grad, num) <= 1e-4, p.name


def test_trainlog_text_format():
    log = TrainLog()
    log.add(0, 0, 0.5, 1e-3, 0.0)
    line = log.text().splitlines()[0]
    assert line.startswith("epoch=0\tstep=0\tloss=")
