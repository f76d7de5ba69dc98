"""Building blocks of the nine model families.

Feature maps are NCHW for convolutional blocks and (B, H, W, C) for the
Swin and Sequencer blocks, which mix along rows, columns and windows.
"""

from __future__ import annotations

import torch
from torch import nn

from ..errors import ShapeMismatch
from . import tensor as T
from .layers import (BatchNorm2d, Conv2d, ConvNormAct, LayerNorm, Linear, Mlp, attention,
                     head_merge, head_scale, head_split, trunc_normal, zeros)


# --- residual ------------------------------------------------------------------

class BasicBlock(nn.Module):
    """Two 3x3 convs with an identity or projected shortcut."""

    expansion = 1

    def __init__(self, c_in: int, width: int, stride: int = 1):
        super().__init__()
        c_out = width * self.expansion
        self.conv1 = ConvNormAct(c_in, width, 3, stride, act="relu")
        self.conv2 = Conv2d(width, c_out, 3)
        self.bn2 = BatchNorm2d(c_out)
        self.downsample = _projection(c_in, c_out, stride)

    def residual(self, x):
        return self.bn2(self.conv2(self.conv1(x)))

    def shortcut(self, x):
        return x if self.downsample is None else self.downsample(x)

    def forward(self, x):
        return T.relu(T.add(self.residual(x), self.shortcut(x)))


class Bottleneck(BasicBlock):
    """1x1 reduce, 3x3, 1x1 expand (x4)."""

    expansion = 4

    def __init__(self, c_in: int, width: int, stride: int = 1):
        nn.Module.__init__(self)
        c_out = width * self.expansion
        self.conv1 = ConvNormAct(c_in, width, 1, act="relu")
        self.conv2 = ConvNormAct(width, width, 3, stride, act="relu")
        self.conv3 = Conv2d(width, c_out, 1)
        self.bn3 = BatchNorm2d(c_out)
        self.downsample = _projection(c_in, c_out, stride)

    def residual(self, x):
        return self.bn3(self.conv3(self.conv2(self.conv1(x))))


def _projection(c_in: int, c_out: int, stride: int) -> nn.Module | None:
    if stride == 1 and c_in == c_out:
        return None
    return nn.Sequential(Conv2d(c_in, c_out, 1, stride), BatchNorm2d(c_out))


# --- inverted residual / MBConv ------------------------------------------------

class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, squeeze: int, act: str = "silu"):
        super().__init__()
        self.reduce = Conv2d(channels, squeeze, 1, bias=True)
        self.expand = Conv2d(squeeze, channels, 1, bias=True)
        self.act = T.ACTIVATIONS[act]
        self.force_open = False  # gate pinned to 1 when set

    def gate(self, x):
        s = T.reshape(T.avgpool(x), x.shape[0], x.shape[1], 1, 1)
        return T.sigmoid(self.expand(self.act(self.reduce(s))))

    def forward(self, x):
        if self.force_open:
            return x
        return x * self.gate(x)


class InvertedResidual(nn.Module):
    """expand (1x1) -> depthwise (kxk) -> [SE] -> project (1x1), residual when shapes allow."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, expand_ratio: float = 6,
                 kernel: int = 3, act: str = "relu6", se_ratio: float | None = None):
        super().__init__()
        mid = int(round(c_in * expand_ratio))
        self.expand = ConvNormAct(c_in, mid, 1, act=act) if expand_ratio != 1 else None
        self.depthwise = ConvNormAct(mid, mid, kernel, stride, groups=mid, act=act)
        self.se = SqueezeExcite(mid, max(1, int(c_in * se_ratio)), act) if se_ratio else None
        self.project = Conv2d(mid, c_out, 1)
        self.project_bn = BatchNorm2d(c_out)
        self.use_residual = stride == 1 and c_in == c_out

    def forward(self, x):
        y = x if self.expand is None else self.expand(x)
        y = self.depthwise(y)
        if self.se is not None:
            y = self.se(y)
        y = self.project_bn(self.project(y))
        return T.add(x, y) if self.use_residual else y


class MBConv(InvertedResidual):
    def __init__(self, c_in: int, c_out: int, stride: int = 1, expand_ratio: float = 6,
                 kernel: int = 3, se_ratio: float = 0.25):
        super().__init__(c_in, c_out, stride, expand_ratio, kernel, act="silu", se_ratio=se_ratio)


# --- transformer ---------------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, qkv_bias: bool = True):
        super().__init__()
        self.heads = heads
        self.scale = head_scale(dim, heads)
        self.qkv = Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = Linear(dim, dim)
        self.last_score_shape: tuple[int, ...] | None = None

    def forward(self, x, bias=None):
        b, n, c = x.shape
        qkv = T.permute(T.reshape(self.qkv(x), b, n, 3, self.heads, c // self.heads), 2, 0, 3, 1, 4)
        out, scores = attention(qkv[0], qkv[1], qkv[2], self.scale, bias)
        self.last_score_shape = tuple(scores.shape)
        return self.proj(head_merge(out))


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int, act: str = "gelu", eps: float = 1e-6):
        super().__init__()
        self.norm1 = LayerNorm(dim, eps)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = Mlp(dim, mlp_hidden, act)

    def forward(self, x):
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection; returns NCHW."""

    def __init__(self, c_in: int, dim: int, patch: int, norm: bool = False):
        super().__init__()
        self.patch = patch
        self.proj = Conv2d(c_in, dim, patch, patch, padding=0, bias=True)
        self.norm = LayerNorm(dim) if norm else None

    def forward(self, x):
        if x.shape[2] % self.patch or x.shape[3] % self.patch:
            raise ShapeMismatch(f"input {tuple(x.shape[2:])} not divisible by patch {self.patch}")
        x = self.proj(x)
        if self.norm is not None:
            x = T.permute(self.norm(T.permute(x, 0, 2, 3, 1)), 0, 3, 1, 2)
        return x


class ViTEncoder(nn.Module):
    """Patch tokens + class token + learned positions through pre-norm blocks."""

    def __init__(self, img: int, patch: int, dim: int, depth: int, heads: int, mlp_hidden: int):
        super().__init__()
        if img % patch:
            raise ShapeMismatch(f"image {img} not divisible by patch {patch}")
        self.num_patches = (img // patch) ** 2
        self.patch_embed = PatchEmbed(3, dim, patch)
        self.cls_token = trunc_normal(1, 1, dim)
        self.pos_embed = trunc_normal(1, self.num_patches + 1, dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, mlp_hidden) for _ in range(depth))
        self.norm = LayerNorm(dim, 1e-6)

    def tokens(self, x):
        p = self.patch_embed(x)
        b, c = p.shape[:2]
        p = T.permute(T.reshape(p, b, c, -1), 0, 2, 1)
        if p.shape[1] != self.num_patches:
            raise ShapeMismatch(f"expected {self.num_patches} patches, got {p.shape[1]}")
        cls = self.cls_token.expand(b, -1, -1)
        return T.add(T.concat([cls, p], dim=1), self.pos_embed)

    def forward(self, x):
        t = self.tokens(x)
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)


# --- Swin ----------------------------------------------------------------------

def window_partition(x, window: int):
    """(B, H, W, C) -> (B * nW, window * window, C), windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeMismatch(f"map {h}x{w} not divisible by window {window}")
    x = T.reshape(x, b, h // window, window, w // window, window, c)
    return T.reshape(T.permute(x, 0, 1, 3, 2, 4, 5), -1, window * window, c)


def window_merge(windows, window: int, h: int, w: int):
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    x = T.reshape(windows, -1, h // window, w // window, window, window, c)
    return T.reshape(T.permute(x, 0, 1, 3, 2, 4, 5), -1, h, w, c)


def cyclic_shift(x, shift: int):
    return torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))


def cyclic_unshift(x, shift: int):
    return torch.roll(x, shifts=(shift, shift), dims=(1, 2))


def shifted_window_mask(h: int, w: int, window: int, shift: int) -> torch.Tensor:
    """(nW, N, N) additive mask: -inf between tokens from different pre-shift regions."""
    region = torch.zeros(1, h, w, 1)
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[:, hs, ws, :] = label
            label += 1
    ids = window_partition(region, window).squeeze(-1)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    flat = coords.flatten(1)
    rel = (flat[:, :, None] - flat[:, None, :]).permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.scale = head_scale(dim, heads)
        self.relative_position_bias_table = trunc_normal((2 * window - 1) ** 2, heads)
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.last_score_shape: tuple[int, ...] | None = None

    def forward(self, x, mask=None):
        bw, n, c = x.shape
        qkv = T.permute(T.reshape(self.qkv(x), bw, n, 3, self.heads, c // self.heads), 2, 0, 3, 1, 4)
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        bias = T.permute(T.reshape(bias, n, n, self.heads), 2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            bias = T.reshape(T.add(T.reshape(bias.expand(bw, -1, -1, -1), bw // nw, nw, self.heads, n, n),
                                   mask.unsqueeze(1).unsqueeze(0)), bw, self.heads, n, n)
        out, scores = attention(qkv[0], qkv[1], qkv[2], self.scale, bias)
        self.last_score_shape = tuple(scores.shape)
        return self.proj(head_merge(out))


class SwinBlock(nn.Module):
    """Windowed attention (optionally cyclically shifted) + MLP on (B, H, W, C)."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, resolution: int,
                 mlp_ratio: float = 4.0):
        super().__init__()
        if resolution <= window:
            window, shift = resolution, 0
        self.window, self.shift = window, shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        mask = shifted_window_mask(resolution, resolution, window, shift) if shift else None
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x):
        b, h, w, c = x.shape
        y = self.norm1(x)
        if self.shift:
            if self.attn_mask.shape[0] != (h // self.window) * (w // self.window):
                raise ShapeMismatch(f"block built for another resolution than {h}x{w}")
            y = cyclic_shift(y, self.shift)
        y = window_merge(self.attn(window_partition(y, self.window), self.attn_mask), self.window, h, w)
        if self.shift:
            y = cyclic_unshift(y, self.shift)
        x = T.add(x, y)
        return T.add(x, self.mlp(self.norm2(x)))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat -> LN -> linear to 2C; halves H and W."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"patch merging needs even dims, got {h}x{w}")
        x = T.concat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    """``depth`` blocks alternating plain and shifted windows, then optional merging."""

    def __init__(self, dim: int, depth: int, heads: int, window: int, resolution: int,
                 mlp_ratio: float = 4.0, merge: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(dim, heads, window, 0 if i % 2 == 0 else window // 2, resolution, mlp_ratio)
            for i in range(depth))
        self.merge = PatchMerging(dim) if merge else None

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x if self.merge is None else self.merge(x)


# --- Sequencer -----------------------------------------------------------------

class LSTM(nn.Module):
    """Single-direction LSTM over (B, L, D); gate order i, f, g, o."""

    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.weight_ih = trunc_normal(4 * hidden, d_in)
        self.weight_hh = trunc_normal(4 * hidden, hidden)
        self.bias_ih = zeros(4 * hidden)
        self.bias_hh = zeros(4 * hidden)

    def forward(self, x, reverse: bool = False):
        b, length, _ = x.shape
        gx = T.linear(x, self.weight_ih, self.bias_ih)
        h = x.new_zeros(b, self.hidden)
        c = x.new_zeros(b, self.hidden)
        outs = [None] * length
        steps = range(length - 1, -1, -1) if reverse else range(length)
        for t in steps:
            g = T.add(gx[:, t], T.linear(h, self.weight_hh, self.bias_hh))
            i, f, u, o = g.chunk(4, dim=-1)
            c = T.sigmoid(f) * c + T.sigmoid(i) * T.tanh(u)
            h = T.sigmoid(o) * T.tanh(c)
            outs[t] = h
        return torch.stack(outs, dim=1)


class BiLSTM(nn.Module):
    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.forward_rnn = LSTM(d_in, hidden)
        self.backward_rnn = LSTM(d_in, hidden)

    def forward(self, x):
        return T.concat([self.forward_rnn(x), self.backward_rnn(x, reverse=True)], dim=-1)


class BiLSTM2D(nn.Module):
    """Vertical and horizontal BiLSTMs over (B, H, W, C), fused by a pointwise linear map."""

    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.rnn_v = BiLSTM(dim, hidden)
        self.rnn_h = BiLSTM(dim, hidden)
        self.fc = Linear(4 * hidden, out_dim or dim)

    def forward(self, x):
        if x.dim() != 4:
            raise ShapeMismatch(f"BiLSTM2D expects (B, H, W, C), got {tuple(x.shape)}")
        b, h, w, c = x.shape
        cols = T.reshape(T.permute(x, 0, 2, 1, 3), b * w, h, c)
        v = T.permute(T.reshape(self.rnn_v(cols), b, w, h, -1), 0, 2, 1, 3)
        rows = T.reshape(x, b * h, w, c)
        hz = T.reshape(self.rnn_h(rows), b, h, w, -1)
        return self.fc(T.concat([v, hz], dim=-1))


class Sequencer2DBlock(nn.Module):
    def __init__(self, dim: int, hidden: int, mlp_ratio: float = 3.0):
        super().__init__()
        self.norm1 = LayerNorm(dim, 1e-6)
        self.rnn = BiLSTM2D(dim, hidden)
        self.norm2 = LayerNorm(dim, 1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = T.add(x, self.rnn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))


# --- MobileViT -----------------------------------------------------------------

def unfold_patches(x, patch: int):
    """(B, C, H, W) -> (B * patch**2, N, C).

    Sequence k of image b collects the pixel at the same offset inside each
    of the N patches, in row-major patch order.
    """
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeMismatch(f"map {h}x{w} not divisible by patch {patch}")
    x = T.reshape(x, b, c, h // patch, patch, w // patch, patch)
    x = T.permute(x, 0, 3, 5, 2, 4, 1)
    return T.reshape(x, b * patch * patch, (h // patch) * (w // patch), c)


def fold_patches(seq, patch: int, h: int, w: int):
    """Inverse of :func:`unfold_patches`."""
    c = seq.shape[-1]
    x = T.reshape(seq, -1, patch, patch, h // patch, w // patch, c)
    x = T.permute(x, 0, 5, 3, 1, 4, 2)
    return T.reshape(x, -1, c, h, w)


class MobileViTBlock(nn.Module):
    def __init__(self, channels: int, d_model: int, depth: int, patch: int = 2, heads: int = 4,
                 mlp_ratio: float = 2.0, kernel: int = 3):
        super().__init__()
        self.patch = patch
        self.conv_kxk = ConvNormAct(channels, channels, kernel, act="silu")
        self.conv_1x1 = Conv2d(channels, d_model, 1)
        self.transformer = nn.ModuleList(
            TransformerBlock(d_model, heads, int(d_model * mlp_ratio), act="silu", eps=1e-5)
            for _ in range(depth))
        self.norm = LayerNorm(d_model)
        self.conv_proj = ConvNormAct(d_model, channels, 1, act="silu")
        self.conv_fusion = ConvNormAct(2 * channels, channels, kernel, act="silu")

    def forward(self, x):
        b, c, h, w = x.shape
        y = self.conv_1x1(self.conv_kxk(x))
        seq = unfold_patches(y, self.patch)
        for blk in self.transformer:
            seq = blk(seq)
        y = fold_patches(self.norm(seq), self.patch, h, w)
        y = self.conv_proj(y)
        return self.conv_fusion(T.concat([x, y], dim=1))


# --- CMT -----------------------------------------------------------------------

class ConvActNorm(nn.Module):
    """conv (with bias) -> GELU -> batchnorm, the CMT ordering."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, groups: int = 1):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, stride, groups=groups, bias=True)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return self.bn(T.gelu(self.conv(x)))


class CMTStem(nn.Module):
    """Stacked 3x3 convolutions; only the first one strides."""

    def __init__(self, width: int, c_in: int = 3, n_convs: int = 3):
        super().__init__()
        self.convs = nn.ModuleList(
            ConvActNorm(c_in if i == 0 else width, width, 3, 2 if i == 0 else 1) for i in range(n_convs))

    @property
    def downsample(self) -> int:
        return 2

    def forward(self, x):
        for conv in self.convs:
            x = conv(x)
        return x


class ConvLNEmbed(nn.Module):
    """2x2 stride-2 conv then channel LayerNorm; NCHW in and out."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.proj = Conv2d(c_in, c_out, 2, 2, padding=0, bias=True)
        self.norm = LayerNorm(c_out)

    def forward(self, x):
        x = self.proj(x)
        return T.permute(self.norm(T.permute(x, 0, 2, 3, 1)), 0, 3, 1, 2)


class LightweightAttention(nn.Module):
    """MHSA with keys/values from a depthwise-strided reduction plus a learned relative bias."""

    def __init__(self, dim: int, heads: int, reduction: int):
        super().__init__()
        self.heads = heads
        self.reduction = reduction
        self.scale = head_scale(dim, heads)
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.proj = Linear(dim, dim)
        if reduction > 1:
            self.sr = Conv2d(dim, dim, reduction, reduction, padding=0, groups=dim, bias=True)
            self.sr_norm = LayerNorm(dim)
        else:
            self.sr = self.sr_norm = None

    def forward(self, x, h: int, w: int, relative_pos):
        b, n, c = x.shape
        if relative_pos.shape != (self.heads, n, n // self.reduction ** 2):
            raise ShapeMismatch(f"relative bias {tuple(relative_pos.shape)} does not fit {n} tokens")
        q = head_split(self.q(x), self.heads)
        kv = x
        if self.sr is not None:
            m = T.reshape(T.permute(x, 0, 2, 1), b, c, h, w)
            kv = self.sr_norm(T.permute(T.reshape(self.sr(m), b, c, -1), 0, 2, 1))
        k = head_split(self.k(kv), self.heads)
        v = head_split(self.v(kv), self.heads)
        out, _ = attention(q, k, v, self.scale, relative_pos)
        return self.proj(head_merge(out))


class IRFFN(nn.Module):
    """Inverted residual feed-forward: 1x1 expand, residual depthwise 3x3, 1x1 project."""

    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.conv1 = ConvActNorm(dim, hidden, 1)
        self.dw = Conv2d(hidden, hidden, 3, groups=hidden, bias=True)
        self.dw_bn = BatchNorm2d(hidden)
        self.conv2 = Conv2d(hidden, dim, 1, bias=True)
        self.bn2 = BatchNorm2d(dim)

    def forward(self, x):
        x = self.conv1(x)
        x = self.dw_bn(T.gelu(T.add(self.dw(x), x)))
        return self.bn2(self.conv2(x))


class CMTBlock(nn.Module):
    """LPU -> LN + lightweight MHSA -> LN + IRFFN, each residual; NCHW."""

    def __init__(self, dim: int, heads: int, reduction: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.lpu = Conv2d(dim, dim, 3, groups=dim, bias=True)
        self.norm1 = LayerNorm(dim)
        self.attn = LightweightAttention(dim, heads, reduction)
        self.norm2 = LayerNorm(dim)
        self.ffn = IRFFN(dim, mlp_ratio)

    def forward(self, x, relative_pos):
        b, c, h, w = x.shape
        x = T.add(x, self.lpu(x))
        t = T.permute(T.reshape(x, b, c, h * w), 0, 2, 1)
        t = T.add(t, self.attn(self.norm1(t), h, w, relative_pos))
        y = T.reshape(T.permute(self.norm2(t), 0, 2, 1), b, c, h, w)
        x = T.reshape(T.permute(t, 0, 2, 1), b, c, h, w)
        return T.add(x, self.ffn(y))


class CMTStage(nn.Module):
    """Patch embedding then CMT blocks sharing one relative position bias."""

    def __init__(self, c_in: int, dim: int, depth: int, heads: int, reduction: int, resolution: int,
                 mlp_ratio: float = 4.0):
        super().__init__()
        tokens = resolution * resolution
        self.embed = ConvLNEmbed(c_in, dim)
        self.relative_pos = trunc_normal(heads, tokens, tokens // reduction ** 2)
        self.blocks = nn.ModuleList(CMTBlock(dim, heads, reduction, mlp_ratio) for _ in range(depth))

    def forward(self, x):
        x = self.embed(x)
        for blk in self.blocks:
            x = blk(x, self.relative_pos)
        return x
