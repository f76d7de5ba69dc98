"""Parameterized layers over the primitives in :mod:`tensor`."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import tensor as T

INIT_STD = 0.02


def trunc_normal(*shape: int) -> nn.Parameter:
    w = torch.empty(*shape)
    nn.init.trunc_normal_(w, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
    return nn.Parameter(w)


def he_normal(*shape: int) -> nn.Parameter:
    """Conv kernels: fan-in scaled so activations keep unit scale through eval-mode norms."""
    w = torch.empty(*shape)
    nn.init.kaiming_normal_(w, mode="fan_in", nonlinearity="relu")
    return nn.Parameter(w)


def zeros(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape))


def ones(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.ones(*shape))


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = trunc_normal(d_out, d_in)
        self.bias = zeros(d_out) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = False):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ValueError(f"channels {c_in}->{c_out} not divisible by groups {groups}")
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        self.weight = he_normal(c_out, c_in // groups, kernel, kernel)
        self.bias = zeros(c_out) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = ones(channels)
        self.bias = zeros(channels)
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return T.batchnorm(x, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = ones(dim)
        self.bias = zeros(dim)

    def forward(self, x):
        return T.layernorm(x, self.weight, self.bias, self.eps)


class ConvNormAct(nn.Module):
    """conv -> batchnorm -> activation."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 1, stride: int = 1, groups: int = 1,
                 act: str = "relu", bias: bool = False):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, stride, groups=groups, bias=bias)
        self.bn = BatchNorm2d(c_out)
        self.act = T.ACTIVATIONS[act]

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, act: str = "gelu", out_dim: int | None = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, out_dim or dim)
        self.act = T.ACTIVATIONS[act]

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class ClassifierHead(nn.Module):
    """Global average pool over NCHW, then a linear map to logits."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.fc = Linear(dim, num_classes)

    def forward(self, x):
        return self.fc(T.avgpool(x))


def attention(q, k, v, scale: float, bias=None):
    """softmax(q k^T * scale + bias) v over the last two dims; returns (out, scores)."""
    scores = T.matmul(q, k.transpose(-2, -1)) * scale
    if bias is not None:
        scores = T.add(scores, bias)
    return T.matmul(T.softmax(scores, dim=-1), v), scores


def head_split(x, heads: int):
    """(B, N, C) -> (B, heads, N, C // heads)."""
    b, n, c = x.shape
    if c % heads:
        raise T.ShapeMismatch(f"width {c} not divisible by {heads} heads")
    return T.permute(T.reshape(x, b, n, heads, c // heads), 0, 2, 1, 3)


def head_merge(x):
    b, h, n, d = x.shape
    return T.reshape(T.permute(x, 0, 2, 1, 3), b, n, h * d)


def head_scale(dim: int, heads: int) -> float:
    return 1.0 / math.sqrt(dim // heads)
