"""Parameter containers and the reusable layers the model is assembled from."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tc
from .errors import CheckpointMismatch, ShapeMismatch
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf. Its ``data`` is the one buffer updated in place by optimizers."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointMismatch(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointMismatch(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
        for name, p in own.items():
            p.data[...] = state[name]


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, bound, (in_features, out_features)))
        self.bias = Parameter(_uniform(rng, bound, (out_features,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(width))
        self.shift = Parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.shift, self.eps)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``rate`` is 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    return tc.mul(x, Tensor(keep / (1.0 - rate)))


@dataclass(frozen=True)
class BranchConfig:
    """Temporal encoder hyperparameters for one modality."""

    input_dim: int
    tcn_channels: tuple[int, ...] = (64, 64)
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2)
    dropout_rate: float = 0.1
    residual: bool = True

    def __post_init__(self):
        if len(self.tcn_channels) != len(self.dilations):
            raise ValueError("tcn_channels and dilations must have the same length")
        if self.input_dim <= 0 or self.kernel_size <= 0 or min(self.tcn_channels, default=0) <= 0:
            raise ValueError("branch dimensions must be positive")
        if min(self.dilations) < 1:
            raise ValueError("dilations must be >= 1")

    @property
    def output_dim(self) -> int:
        return self.tcn_channels[-1]


class TemporalBlock(Module):
    """relu(causal dilated conv) plus a residual path (1x1 projection when widths differ)."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int,
                 dropout_rate: float, residual: bool, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(c_in * kernel_size)
        self.conv_weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel_size)))
        self.conv_bias = Parameter(_uniform(rng, bound, (c_out,)))
        self.proj = Linear(c_in, c_out, rng, bias=False) if residual and c_in != c_out else None
        self.dilation = dilation
        self.dropout_rate = dropout_rate
        self.residual = residual

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = tc.transpose(tc.conv1d_causal(tc.transpose(x), self.conv_weight, self.dilation))
        h = dropout(tc.relu(tc.add(h, self.conv_bias)), self.dropout_rate, rng, self.training)
        if not self.residual:
            return h
        return tc.add(h, x if self.proj is None else self.proj(x))


class TemporalConvNet(Module):
    def __init__(self, cfg: BranchConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.blocks = []
        c_in = cfg.input_dim
        for i, (c_out, d) in enumerate(zip(cfg.tcn_channels, cfg.dilations)):
            block = TemporalBlock(c_in, c_out, cfg.kernel_size, d, cfg.dropout_rate, cfg.residual, rng)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)
            c_in = c_out

    def forward(self, seq: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if seq.ndim != 2 or seq.shape[1] != self.cfg.input_dim:
            raise ShapeMismatch(f"TCN expects (T, {self.cfg.input_dim}), got {seq.shape}")
        for block in self.blocks:
            seq = block(seq, rng)
        return seq


class ConvStage(Module):
    """3x3 same-padded convolution, relu, 2x2 max-pool."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(c_in * 9)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, 3, 3)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,)))

    def forward(self, x: Tensor) -> Tensor:
        bias = tc.reshape(self.bias, (1, self.bias.shape[0], 1, 1))
        return tc.maxpool2d(tc.relu(tc.add(tc.conv2d(x, self.weight, padding=1), bias)), 2)


class VisualBackbone(Module):
    """Stand-in spatial encoder: three conv stages, global average pooling, linear output."""

    stage_names = ("stage1", "stage2", "stage3")

    def __init__(self, channels: tuple[int, int, int], out_dim: int, crop_size: int,
                 rng: np.random.Generator):
        super().__init__()
        if crop_size % 8:
            raise ValueError("crop size must survive three 2x2 poolings")
        self.crop_size = crop_size
        c_prev = 3
        for name, c in zip(self.stage_names, channels):
            setattr(self, name, ConvStage(c_prev, c, rng))
            c_prev = c
        self.out = Linear(c_prev, out_dim, rng)

    def forward(self, frames: Tensor) -> Tensor:
        s = self.crop_size
        if frames.ndim != 4 or frames.shape[1:] != (3, s, s):
            raise ShapeMismatch(f"backbone expects (T, 3, {s}, {s}) frames, got {frames.shape}")
        x = frames
        for name in self.stage_names:
            x = getattr(self, name)(x)
        return self.out(tc.mean(x, axis=(2, 3)))
