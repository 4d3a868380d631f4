"""Network assembly: the dense-block denoiser (v1), its depthwise-separable
variant (v2), and a 17-layer plain conv reference used for parameter-count
comparison.  All variants predict the noise residual; the clean estimate is
noisy minus the prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import (
    Conv2dLayer,
    ConvUnit,
    DenseBlock,
    DenseBlockSpec,
    Layer,
    Parameter,
    TransitionLayer,
    TransitionSpec,
    _rng,
)

VARIANTS = ("v1", "v2", "dncnn_ref")


@dataclass
class ModelConfig:
    variant: str = "v1"
    base_channels: int = 64
    pairs: int = 6
    growth_rate: int = 16
    block_layers: int = 4
    input_channels: int = 1
    dncnn_depth: int = 17  # only read by the dncnn_ref variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for f_name in ("base_channels", "pairs", "growth_rate", "block_layers", "input_channels"):
            if getattr(self, f_name) < 1:
                raise ValueError(f"{f_name} must be positive")

    @staticmethod
    def tiny(variant: str = "v1") -> "ModelConfig":
        """Desk-scale override: 2 dense-block/transition pairs."""
        return ModelConfig(variant=variant, pairs=2)

    @staticmethod
    def micro(variant: str = "v1") -> "ModelConfig":
        """Gradient-check scale: 2 pairs, narrow width, shallow blocks."""
        return ModelConfig(variant=variant, pairs=2, base_channels=8,
                           growth_rate=4, block_layers=2)


class Network:
    """Realized layer graph plus the parameter registry."""

    final_layer_name = "final_conv"

    def __init__(self, config: ModelConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in network")

    def parameters(self) -> Iterator[Parameter]:
        for layer in self.layers:
            yield from layer.parameters()

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in self.layers:
            yield from layer.buffers()

    def zero_grad(self):
        for p in self.parameters():
            p.value.zero_grad()

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        """Residual (noise map) prediction for a [N,Cin,H,W] input."""
        raise NotImplementedError

    def denoise(self, noisy: Tensor) -> Tensor:
        """noisy - residual, inference mode; not clipped here."""
        with T.no_grad():
            return T.sub(noisy, self.forward(noisy, mode="infer"))

    def count_parameters(self) -> tuple[int, list[tuple[str, int]]]:
        breakdown = [(p.name, p.count) for p in self.parameters()]
        return sum(c for _, c in breakdown), breakdown


class DenseSkipNetwork(Network):
    """First conv unit, `pairs` dense-block/transition pairs, final conv.

    The first unit's feature map is concatenated into the input of every
    transition layer, so low-level features reach the whole pipeline.
    """

    def __init__(self, config: ModelConfig, seed: int, dtype):
        rng = _rng(seed)
        separable = config.variant == "v2"
        base = config.base_channels
        self.first = ConvUnit("first_conv", config.input_channels, base, 3, rng, dtype)
        self.blocks: list[DenseBlock] = []
        self.transitions: list[TransitionLayer] = []
        for k in range(1, config.pairs + 1):
            bspec = DenseBlockSpec(base, config.growth_rate, config.block_layers, 3)
            block = DenseBlock(f"block{k}", bspec, rng, dtype, separable=separable)
            tspec = TransitionSpec(bspec.out_channels + base, base)
            trans = TransitionLayer(f"trans{k}", tspec, rng, dtype)
            self.blocks.append(block)
            self.transitions.append(trans)
        self.final = Conv2dLayer("final_conv", base, config.input_channels, 3, rng, dtype, bias=True)
        layers = [self.first, *[l for pair in zip(self.blocks, self.transitions) for l in pair], self.final]
        super().__init__(config, layers)

    def forward(self, x, mode="infer"):
        f0 = self.first.forward(x, mode)
        t = f0
        for block, trans in zip(self.blocks, self.transitions):
            d = block.forward(t, mode)
            t = trans.forward(T.concat_channels([d, f0]), mode)
        return self.final.forward(t, mode)


class DncnnReference(Network):
    """Conv+ReLU, (depth-2) x (Conv+BN+ReLU), Conv; residual semantics."""

    final_layer_name = "tail"

    def __init__(self, config: ModelConfig, seed: int, dtype):
        if config.dncnn_depth < 3:
            raise ValueError("dncnn depth must be >= 3")
        rng = _rng(seed)
        width = config.base_channels
        self.head = Conv2dLayer("head", config.input_channels, width, 3, rng, dtype, bias=True)
        self.body = [
            ConvUnit(f"body{i + 1}", width, width, 3, rng, dtype)
            for i in range(config.dncnn_depth - 2)
        ]
        self.tail = Conv2dLayer("tail", width, config.input_channels, 3, rng, dtype, bias=True)
        super().__init__(config, [self.head, *self.body, self.tail])

    def forward(self, x, mode="infer"):
        h = T.relu(self.head.forward(x, mode))
        for unit in self.body:
            h = unit.forward(h, mode)
        return self.tail.forward(h, mode)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Network:
    if config.variant == "dncnn_ref":
        return DncnnReference(config, seed, dtype)
    return DenseSkipNetwork(config, seed, dtype)


def build_dncnn_ref(depth: int = 17, width: int = 64, seed: int = 0, dtype=np.float32) -> Network:
    cfg = ModelConfig(variant="dncnn_ref", base_channels=width, dncnn_depth=depth)
    return build(cfg, seed=seed, dtype=dtype)


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    known = {f for f in ModelConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**d)
