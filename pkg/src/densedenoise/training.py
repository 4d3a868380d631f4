"""Losses, optimizers, and the two-stage training protocol.

Stage 1 trains every parameter against the residual MSE loss.  Stage 2
freezes everything except the final reconstruction conv and optimizes the
combined (1 - MS-SSIM) + MSE objective; batch norm runs in inference mode
during stage 2 so frozen layers are truly frozen (training-mode BN would
mutate running statistics).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import set_frozen
from .metrics import SsimParams, ms_ssim_tensor
from .model import Network
from .tensor import Tape, Tensor


class DivergenceError(RuntimeError):
    """Loss became non-finite; training aborted."""


@dataclass
class TrainConfig:
    stage: str = "stage1_full_mse"  # or "stage2_lastlayer_combined"
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    optimizer: str = "adam"  # or "sgd_momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # stage-2 ablation switch: retrain every layer with the combined loss
    stage2_all_layers: bool = False

    def __post_init__(self):
        if self.stage not in ("stage1_full_mse", "stage2_lastlayer_combined"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainLog:
    lines: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def add(self, epoch: int, step: int, loss: float, lr: float, t0: float):
        self.losses.append(loss)
        self.lines.append(
            f"epoch={epoch}\tstep={step}\tloss={loss:.8e}\tlr={lr:g}"
            f"\telapsed={time.perf_counter() - t0:.3f}"
        )

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


# ---------------------------------------------------------------------------
# losses


def residual_target(x: Tensor, y: Tensor) -> Tensor:
    return T.sub(y, x)


def loss_mse_residual(net: Network, x: Tensor, y: Tensor, mode: str = "train") -> Tensor:
    """(1/2N) * sum_i ||R(y_i) - (y_i - x_i)||_F^2 over the batch."""
    if x.shape != y.shape:
        raise T.ShapeMismatchError("loss batch", x.shape, y.shape)
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    r = net.forward(y, mode=mode)
    diff = T.sub(r, residual_target(x, y))
    return T.mul(T.tsum(T.square(diff)), 1.0 / (2 * x.shape[0]))


def loss_combined(net: Network, x: Tensor, y: Tensor, mode: str = "train",
                  ssim_params: SsimParams = SsimParams()) -> Tensor:
    """(1 - mean MS-SSIM(x, y - R(y))) + residual MSE, on one tape."""
    if x.shape != y.shape:
        raise T.ShapeMismatchError("loss batch", x.shape, y.shape)
    n = x.shape[0]
    r = net.forward(y, mode=mode)
    diff = T.sub(r, residual_target(x, y))
    mse = T.mul(T.tsum(T.square(diff)), 1.0 / (2 * n))
    denoised = T.sub(y, r)
    ms = T.tmean(ms_ssim_tensor(x, denoised, ssim_params))
    return T.add(T.mul(T.sub(ms, 1.0), -1.0), mse)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, params):
        self.params = list(params)

    def step(self):
        for p in self.params:
            if not p.frozen and p.value.grad is not None:
                self._update(p)
        for p in self.params:
            p.value.zero_grad()

    def _update(self, p):
        raise NotImplementedError


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {
            p.name: (np.zeros_like(p.value.data), np.zeros_like(p.value.data), 0)
            for p in self.params
        }

    def _update(self, p):
        if p.name not in self.state:
            raise KeyError(f"no optimizer state for {p.name!r}")
        m, v, t = self.state[p.name]
        g = p.value.grad
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * g * g
        self.state[p.name] = (m, v, t)
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        p.value.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)


class SgdMomentum(Optimizer):
    def __init__(self, params, lr=1e-3, momentum=0.9):
        super().__init__(params)
        self.lr, self.momentum = lr, momentum
        self.state = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def _update(self, p):
        if p.name not in self.state:
            raise KeyError(f"no optimizer state for {p.name!r}")
        buf = self.momentum * self.state[p.name] + p.value.grad
        self.state[p.name] = buf
        p.value.data -= (self.lr * buf).astype(p.value.dtype)


def make_optimizer(net: Network, config: TrainConfig) -> Optimizer:
    if config.optimizer == "adam":
        return Adam(net.parameters(), lr=config.learning_rate,
                    beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    if config.optimizer == "sgd_momentum":
        return SgdMomentum(net.parameters(), lr=config.learning_rate,
                           momentum=config.momentum)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


# ---------------------------------------------------------------------------
# training loops


def _batches(dataset, batch_size: int, epoch_seed: int):
    order = np.random.Generator(np.random.Philox(key=epoch_seed)).permutation(len(dataset.pairs))
    for start in range(0, len(order), batch_size):
        sel = order[start : start + batch_size]
        xs = np.stack([dataset.pairs[i][0] for i in sel])[:, None]
        ys = np.stack([dataset.pairs[i][1] for i in sel])[:, None]
        yield Tensor(xs), Tensor(ys)


def _run_epochs(net, dataset, config, loss_fn, mode, log):
    opt = make_optimizer(net, config)
    t0 = time.perf_counter()
    step = 0
    tape = Tape()
    for epoch in range(config.epochs):
        for x, y in _batches(dataset, config.batch_size, config.seed + epoch):
            tape.reset()
            with tape:
                loss = loss_fn(net, x, y, mode)
                lv = loss.item()
                if not np.isfinite(lv):
                    raise DivergenceError(
                        f"non-finite loss {lv} at epoch {epoch} step {step}"
                    )
                tape.backward(loss)
            opt.step()
            log.add(epoch, step, lv, config.learning_rate, t0)
            step += 1
    return log


def train_stage1(net: Network, dataset, config: TrainConfig) -> TrainLog:
    """Full-network minibatch descent on the residual MSE loss."""
    if config.stage != "stage1_full_mse":
        raise ValueError("train_stage1 requires stage1_full_mse config")
    for p in net.parameters():
        p.frozen = False
    return _run_epochs(net, dataset, config, loss_mse_residual, "train", TrainLog())


def train_stage2(net: Network, dataset, config: TrainConfig,
                 ssim_params: SsimParams | None = None) -> TrainLog:
    """Last-layer-only refinement with the combined loss; BN in inference
    mode so every frozen tensor (params and running stats) stays put."""
    if config.stage != "stage2_lastlayer_combined":
        raise ValueError("train_stage2 requires stage2_lastlayer_combined config")
    last = net.final_layer_name
    if config.stage2_all_layers:
        for p in net.parameters():
            p.frozen = False
    else:
        set_frozen(net, lambda name: not name.startswith(last), True)
        set_frozen(net, lambda name: name.startswith(last), False)
    if all(p.frozen for p in net.parameters()):
        raise ValueError("stage 2 freeze left no trainable parameters")
    sp = ssim_params if ssim_params is not None else SsimParams()

    def loss_fn(n, x, y, mode):
        return loss_combined(n, x, y, mode, sp)

    return _run_epochs(net, dataset, config, loss_fn, "infer", TrainLog())
