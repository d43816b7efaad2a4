"""
Parameter containers. A ``Module`` registers parameters, buffers and child
modules on attribute assignment and exposes them under stable dotted names
(``encoder.stages.0.blocks.1.attn.q.weight``).
"""
from collections import OrderedDict
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from models.errors import DimensionError, UsageError
from services import functional_service as F
from services.tensor_service import Tensor, img2seq, seq2img


class Module:
    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor):
            value.requires_grad = True
            value.name = name
            self._parameters[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, child in self._modules.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self._modules.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in list(self._buffers):
            self.register_buffer(name, np.ascontiguousarray(self._buffers[name], dtype=dtype))
        for _, child in self.children():
            child._cast_buffers(dtype)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy arrays into the registry; names and shapes must match exactly."""
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise DimensionError("state does not match the parameter registry",
                                 {"missing": missing[:10], "unexpected": unexpected[:10]})
        params = dict(self.named_parameters())
        for name, target in own.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise DimensionError("parameter shape mismatch",
                                     {"name": name, "expected": list(target.shape), "got": list(source.shape)})
            if name in params:
                params[name].data = np.array(source, dtype=target.dtype, copy=True)
            else:
                np.copyto(target, source.astype(target.dtype), casting="unsafe")
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._modules)), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, idx: int) -> Module:
        return list(self._modules.values())[idx]


# initializers


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    values = rng.standard_normal(shape) * std
    return np.clip(values, -2 * std, 2 * std).astype(np.float32)


def fan_out_normal(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    c_out, _, kh, kw = shape
    fan_out = kh * kw * c_out // groups
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_out)).astype(np.float32)


def fan_in_normal(rng: np.random.Generator, shape, groups: int = 1, gain: float = np.sqrt(2.0)) -> np.ndarray:
    """std = gain / sqrt(fan_in); the default gain keeps the second moment through a ReLU."""
    _, c_in, kh, kw = shape  # c_in is already per group
    return (rng.standard_normal(shape) * (gain / np.sqrt(kh * kw * c_in))).astype(np.float32)


def conv_trunc_normal(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    return trunc_normal(rng, shape)


ConvInit = Callable[[np.random.Generator, Tuple[int, ...], int], np.ndarray]


# layers


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True,
                 weight_init: Optional[ConvInit] = None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise UsageError("channels must be divisible by groups",
                             {"in": in_channels, "out": out_channels, "groups": groups})
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = Tensor((weight_init or fan_out_normal)(rng, shape, groups))
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Tensor(trunc_normal(rng, (in_features, out_features)))
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Normalizes the last axis of token-layout tensors."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = Tensor(np.ones(channels, dtype=np.float32))
        self.bias = Tensor(np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias)


class MapLayerNorm(LayerNorm):
    """LayerNorm over channels applied to a [N,C,H,W] map."""

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        return seq2img(super().forward(img2seq(x)), h, w)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.weight = Tensor(np.ones(channels, dtype=np.float32))
        self.bias = Tensor(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum)


def param_count(module: Module, trainable_only: bool = True) -> int:
    total = sum(p.size for p in module.parameters())
    if not trainable_only:
        total += sum(b.size for _, b in module.named_buffers())
    return int(total)

