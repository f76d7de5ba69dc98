"""Differentiable primitives.

Arrays and reverse-mode gradients come from torch autograd; this layer fixes
the op vocabulary the blocks are written against and turns shape errors
into :class:`ShapeMismatch` before they reach a kernel.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F

from ..errors import ShapeMismatch

Tensor = torch.Tensor


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


def tensor(values, requires_grad: bool = False, dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.tensor(values, dtype=dtype, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.dim() >= 1 and b.dim() >= 1, "matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    _need(ka == kb, f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    _need(x.shape[-1] == weight.shape[1],
          f"linear expects last dim {weight.shape[1]}, got {tuple(x.shape)}")
    return F.linear(x, weight, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    _need(x.dim() == 4, f"conv2d expects NCHW input, got {tuple(x.shape)}")
    _need(x.shape[1] == weight.shape[1] * groups,
          f"conv2d expects {weight.shape[1] * groups} channels, got {x.shape[1]}")
    kh, kw = weight.shape[-2:]
    _need(x.shape[2] + 2 * padding >= kh and x.shape[3] + 2 * padding >= kw,
          f"conv2d kernel {kh}x{kw} larger than padded input {tuple(x.shape[2:])}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    _need(weight.shape[1] == 1 and weight.shape[0] == x.shape[1],
          f"depthwise weight {tuple(weight.shape)} does not match {x.shape[1]} channels")
    return conv2d(x, weight, bias, stride=stride, padding=padding, groups=x.shape[1])


def batchnorm(x: Tensor, weight: Tensor | None, bias: Tensor | None,
              running_mean: Tensor | None = None, running_var: Tensor | None = None,
              training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    _need(x.dim() >= 2, "batchnorm expects (N, C, ...) input")
    if weight is not None:
        _need(weight.shape[0] == x.shape[1], "batchnorm affine size differs from channels")
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def layernorm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    if weight is not None:
        _need(x.shape[-1] == weight.shape[0], "layernorm size differs from last dim")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=dim)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def relu6(x: Tensor) -> Tensor:
    return torch.clamp(x, 0.0, 6.0)


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def silu(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


ACTIVATIONS = {"relu": relu, "relu6": relu6, "gelu": gelu, "silu": silu,
               "sigmoid": sigmoid, "tanh": tanh, "identity": lambda x: x}


def avgpool(x: Tensor, kernel: int | None = None, stride: int | None = None) -> Tensor:
    """Global average over H, W when ``kernel`` is None, else windowed."""
    _need(x.dim() == 4, "avgpool expects NCHW input")
    if kernel is None:
        return x.mean(dim=(2, 3))
    return F.avg_pool2d(x, kernel, stride or kernel)


def maxpool(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    return F.max_pool2d(x, kernel, stride, padding)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeMismatch(f"cannot add {tuple(a.shape)} and {tuple(b.shape)}") from None
    return a + b


def concat(xs: Sequence[Tensor], dim: int) -> Tensor:
    _need(len(xs) > 0, "concat of nothing")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        _need(len(other) == len(ref), "concat rank mismatch")
        d = dim % len(ref)
        _need(other[:d] + other[d + 1:] == ref[:d] + ref[d + 1:],
              f"concat shapes {tuple(xs[0].shape)} and {tuple(t.shape)} differ off dim {dim}")
    return torch.cat(list(xs), dim=dim)


def reshape(x: Tensor, *shape: int) -> Tensor:
    known = [s for s in shape if s != -1]
    total = math.prod(known) if known else 1
    _need(shape.count(-1) <= 1, "at most one inferred dimension")
    if -1 in shape:
        _need(total > 0 and x.numel() % total == 0, f"cannot reshape {tuple(x.shape)} to {shape}")
    else:
        _need(total == x.numel(), f"cannot reshape {tuple(x.shape)} to {shape}")
    return x.reshape(*shape)


def permute(x: Tensor, *dims: int) -> Tensor:
    _need(sorted(d % x.dim() for d in dims) == list(range(x.dim())), f"bad permutation {dims}")
    return x.permute(*dims)
