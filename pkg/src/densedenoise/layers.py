"""Parameterized building blocks: conv units, batch-norm, dense blocks and
transition layers, with deterministic initialization and freeze control."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Parameter:
    """A named trainable tensor; frozen parameters are skipped by optimizers."""

    name: str
    value: Tensor
    frozen: bool = False

    @property
    def count(self) -> int:
        return self.value.size


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & ((1 << 128) - 1)))


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Layer:
    """Base: a layer exposes named parameters and a forward(x, mode)."""

    name: str

    def parameters(self) -> Iterator[Parameter]:
        raise NotImplementedError

    def forward(self, x: Tensor, mode: str) -> Tensor:
        raise NotImplementedError

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state (BN running stats), for checkpointing."""
        return iter(())


class Conv2dLayer(Layer):
    def __init__(self, name, in_channels, out_channels, kernel, rng, dtype, bias=True):
        self.name = name
        self.kernel = kernel
        self.padding = (kernel - 1) // 2
        fan_in = in_channels * kernel * kernel
        w = he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.weight = Parameter(f"{name}.weight", Tensor(w, requires_grad=True))
        self.bias: Optional[Parameter] = None
        if bias:
            b = np.zeros(out_channels, dtype=dtype)
            self.bias = Parameter(f"{name}.bias", Tensor(b, requires_grad=True))

    def parameters(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    def forward(self, x, mode):
        b = self.bias.value if self.bias is not None else None
        return T.conv2d(x, self.weight.value, bias=b, padding=self.padding)


class DepthwiseConv2dLayer(Layer):
    def __init__(self, name, channels, kernel, rng, dtype):
        self.name = name
        self.padding = (kernel - 1) // 2
        w = he_normal(rng, (channels, 1, kernel, kernel), kernel * kernel, dtype)
        self.weight = Parameter(f"{name}.weight", Tensor(w, requires_grad=True))

    def parameters(self):
        yield self.weight

    def forward(self, x, mode):
        return T.depthwise_conv2d(x, self.weight.value, padding=self.padding)


class BatchNormLayer(Layer):
    def __init__(self, name, channels, dtype, epsilon=1e-5, momentum=0.9):
        self.name = name
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", Tensor(np.ones(channels, dtype=dtype), requires_grad=True))
        self.beta = Parameter(f"{name}.beta", Tensor(np.zeros(channels, dtype=dtype), requires_grad=True))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var

    def forward(self, x, mode):
        return T.batch_norm(
            x,
            self.gamma.value,
            self.beta.value,
            self.running_mean,
            self.running_var,
            mode,
            epsilon=self.epsilon,
            momentum=self.momentum,
        )


class ConvUnit(Layer):
    """conv -> BN -> ReLU.  Convs feeding a BN carry no bias (redundant with
    beta).  separable=True swaps the conv for depthwise -> BN -> ReLU ->
    pointwise, the MobileNet form of a separable unit."""

    def __init__(self, name, in_channels, out_channels, kernel, rng, dtype,
                 separable=False):
        self.name = name
        self.separable = separable
        self._sub: list[Layer] = []
        if separable and kernel > 1:
            self.dw = DepthwiseConv2dLayer(f"{name}.dw", in_channels, kernel, rng, dtype)
            self.dw_bn = BatchNormLayer(f"{name}.dw_bn", in_channels, dtype)
            self.pw = Conv2dLayer(f"{name}.pw", in_channels, out_channels, 1, rng, dtype, bias=False)
            self._sub = [self.dw, self.dw_bn, self.pw]
        else:
            self.conv = Conv2dLayer(f"{name}.conv", in_channels, out_channels, kernel, rng, dtype, bias=False)
            self._sub = [self.conv]
        self.bn = BatchNormLayer(f"{name}.bn", out_channels, dtype)
        self._sub.append(self.bn)

    def parameters(self):
        for sub in self._sub:
            yield from sub.parameters()

    def buffers(self):
        for sub in self._sub:
            yield from sub.buffers()

    def forward(self, x, mode):
        if self.separable:
            h = self.dw.forward(x, mode)
            h = self.dw_bn.forward(h, mode)
            h = T.relu(h)
            h = self.pw.forward(h, mode)
        else:
            h = self.conv.forward(x, mode)
        return T.relu(self.bn.forward(h, mode))


@dataclass
class DenseBlockSpec:
    in_channels: int
    growth_rate: int = 16
    num_layers: int = 4
    kernel: int = 3

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.num_layers * self.growth_rate


class DenseBlock(Layer):
    """Each internal conv unit consumes the concat of the block input and all
    previous units' outputs and appends growth_rate channels."""

    def __init__(self, name, spec: DenseBlockSpec, rng, dtype, separable=False):
        self.name = name
        self.spec = spec
        self.units = []
        for i in range(spec.num_layers):
            cin = spec.in_channels + i * spec.growth_rate
            self.units.append(
                ConvUnit(f"{name}.layer{i + 1}", cin, spec.growth_rate,
                         spec.kernel, rng, dtype, separable=separable)
            )

    def parameters(self):
        for u in self.units:
            yield from u.parameters()

    def buffers(self):
        for u in self.units:
            yield from u.buffers()

    def forward(self, x, mode):
        if x.shape[1] != self.spec.in_channels:
            raise T.ShapeMismatchError(
                f"{self.name} input channels", (x.shape[1],), (self.spec.in_channels,)
            )
        feats = [x]
        for u in self.units:
            inp = feats[0] if len(feats) == 1 else T.concat_channels(feats)
            feats.append(u.forward(inp, mode))
        return T.concat_channels(feats)


@dataclass
class TransitionSpec:
    in_channels: int
    out_channels: int = 64
    kernel: int = 1

    def __post_init__(self):
        if self.kernel != 1:
            raise ValueError("transition layers use a 1x1 kernel")


class TransitionLayer(Layer):
    """1x1 conv -> BN -> ReLU compressing the feature volume."""

    def __init__(self, name, spec: TransitionSpec, rng, dtype):
        self.name = name
        self.spec = spec
        self.unit = ConvUnit(name, spec.in_channels, spec.out_channels, 1, rng, dtype)

    def parameters(self):
        yield from self.unit.parameters()

    def buffers(self):
        yield from self.unit.buffers()

    def forward(self, x, mode):
        if x.shape[1] != self.spec.in_channels:
            raise T.ShapeMismatchError(
                f"{self.name} input channels", (x.shape[1],), (self.spec.in_channels,)
            )
        return self.unit.forward(x, mode)


def set_frozen(network, predicate: Callable[[str], bool], frozen: bool = True):
    """Mark every parameter whose name satisfies the predicate.

    Raises if the predicate matches nothing, which almost always means a
    misspelled name pattern.
    """
    matched = 0
    for p in network.parameters():
        if predicate(p.name):
            p.frozen = frozen
            matched += 1
    if matched == 0:
        raise ValueError("freeze predicate matched no parameters")
    return matched
