"""Closed-form parameter totals from stage tables, without building weights.

Counts include weights, biases and norm affine terms.  Running statistics
and index buffers are not parameters.
"""

from __future__ import annotations

from ..errors import UnsupportedSpec
from .models import ArchitectureSpec, Family


def conv(c_in: int, c_out: int, k: int, groups: int = 1, bias: bool = False) -> int:
    return c_out * (c_in // groups) * k * k + (c_out if bias else 0)


def linear(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def norm(c: int) -> int:
    return 2 * c


def lstm(d_in: int, hidden: int) -> int:
    return 4 * hidden * (d_in + hidden) + 8 * hidden


def transformer_block(dim: int, mlp: int) -> int:
    return 2 * norm(dim) + linear(dim, 3 * dim) + linear(dim, dim) + linear(dim, mlp) + linear(mlp, dim)


def inverted_residual(c_in: int, c_out: int, expand: float, k: int = 3, se_ratio: float | None = None) -> int:
    mid = int(round(c_in * expand))
    n = 0
    if expand != 1:
        n += conv(c_in, mid, 1) + norm(mid)
    n += conv(mid, mid, k, groups=mid) + norm(mid)
    if se_ratio:
        sq = max(1, int(c_in * se_ratio))
        n += conv(mid, sq, 1, bias=True) + conv(sq, mid, 1, bias=True)
    return n + conv(mid, c_out, 1) + norm(c_out)


def _resnet(p: dict, k: int) -> int:
    expansion = 1 if p["block"] == "basic" else 4
    n = conv(3, p["stem"], 7) + norm(p["stem"])
    c = p["stem"]
    for i, (w, d) in enumerate(zip(p["widths"], p["depths"])):
        for j in range(d):
            stride = 2 if (i > 0 and j == 0) else 1
            out = w * expansion
            if expansion == 1:
                n += conv(c, w, 3) + norm(w) + conv(w, w, 3) + norm(w)
            else:
                n += conv(c, w, 1) + norm(w) + conv(w, w, 3) + norm(w) + conv(w, out, 1) + norm(out)
            if stride != 1 or c != out:
                n += conv(c, out, 1) + norm(out)
            c = out
    return n + linear(c, k)


def _mobilenetv2(p: dict, k: int) -> int:
    n = conv(3, p["stem"], 3) + norm(p["stem"])
    c = p["stem"]
    for t, out, reps, _ in p["stages"]:
        for _ in range(reps):
            n += inverted_residual(c, out, t)
            c = out
    return n + conv(c, p["last"], 1) + norm(p["last"]) + linear(p["last"], k)


def _efficientnet(p: dict, k: int) -> int:
    n = conv(3, p["stem"], 3) + norm(p["stem"])
    c = p["stem"]
    for e, ks, _, out, reps in p["stages"]:
        for _ in range(reps):
            n += inverted_residual(c, out, e, ks, p["se_ratio"])
            c = out
    return n + conv(c, p["last"], 1) + norm(p["last"]) + linear(p["last"], k)


def _vit(p: dict, k: int, px: int) -> int:
    d, tokens = p["dim"], (px // p["patch"]) ** 2
    n = conv(3, d, p["patch"], bias=True) + d + (tokens + 1) * d
    n += p["depth"] * transformer_block(d, p["mlp"])
    return n + norm(d) + linear(d, k)


def _swin(p: dict, k: int, px: int) -> int:
    d, res = p["dim"], px // p["patch"]
    n = conv(3, d, p["patch"], bias=True) + norm(d)
    stages = len(p["depths"])
    for i, (depth, heads) in enumerate(zip(p["depths"], p["heads"])):
        window = min(p["window"], res)
        block = transformer_block(d, int(d * p["mlp_ratio"])) + (2 * window - 1) ** 2 * heads
        n += depth * block
        if i < stages - 1:
            n += norm(4 * d) + linear(4 * d, 2 * d, bias=False)
            d, res = 2 * d, res // 2
    return n + norm(d) + linear(d, k)


def _mobilevit(p: dict, k: int) -> int:
    n = conv(3, p["stem"], 3) + norm(p["stem"])
    c = p["stem"]
    for stage in p["stages"]:
        for out, _, expand in stage["mv2"]:
            n += inverted_residual(c, out, expand)
            c = out
        if "vit" in stage:
            d, depth, _, _, ratio = stage["vit"]
            n += conv(c, c, 3) + norm(c) + conv(c, d, 1)
            n += depth * transformer_block(d, int(d * ratio)) + norm(d)
            n += conv(d, c, 1) + norm(c) + conv(2 * c, c, 3) + norm(c)
    return n + conv(c, p["last"], 1) + norm(p["last"]) + linear(p["last"], k)


def _cmt(p: dict, k: int, px: int) -> int:
    s = p["stem"]
    n = conv(3, s, 3, bias=True) + norm(s) + 2 * (conv(s, s, 3, bias=True) + norm(s))
    res, c = px // 2, s
    ratio = p["mlp_ratio"]
    for dim, depth, heads, r in zip(p["dims"], p["depths"], p["heads"], p["reductions"]):
        res //= 2
        tokens = res * res
        n += conv(c, dim, 2, bias=True) + norm(dim)
        n += heads * tokens * (tokens // (r * r))                              # shared relative bias
        hid = int(dim * ratio)
        block = conv(dim, dim, 3, groups=dim, bias=True)                      # LPU
        block += 2 * norm(dim) + 4 * linear(dim, dim)                          # norms, q, k, v, proj
        if r > 1:
            block += conv(dim, dim, r, groups=dim, bias=True) + norm(dim)      # key/value reduction
        block += conv(dim, hid, 1, bias=True) + norm(hid)                      # IRFFN expand
        block += conv(hid, hid, 3, groups=hid, bias=True) + norm(hid)          # IRFFN depthwise
        block += conv(hid, dim, 1, bias=True) + norm(dim)                      # IRFFN project
        n += depth * block
        c = dim
    return n + conv(c, p["last"], 1, bias=True) + norm(p["last"]) + linear(p["last"], k)


def _sequencer(p: dict, k: int) -> int:
    n, c = 0, 3
    for patch, dim, hidden, depth in zip(p["patches"], p["dims"], p["hidden"], p["depths"]):
        n += conv(c, dim, patch, bias=True)
        mlp = int(dim * p["mlp_ratio"])
        block = 2 * norm(dim) + 4 * lstm(dim, hidden) + linear(4 * hidden, dim)
        block += linear(dim, mlp) + linear(mlp, dim)
        n += depth * block
        c = dim
    return n + norm(c) + linear(c, k)


def count_parameters(spec: ArchitectureSpec) -> int:
    p, k, px = spec.params, spec.num_classes, spec.input_px
    try:
        match spec.family:
            case Family.RESNET18 | Family.RESNET50:
                return _resnet(p, k)
            case Family.MOBILENETV2:
                return _mobilenetv2(p, k)
            case Family.EFFICIENTNET:
                return _efficientnet(p, k)
            case Family.VIT:
                return _vit(p, k, px)
            case Family.SWINT:
                return _swin(p, k, px)
            case Family.MOBILEVIT:
                return _mobilevit(p, k)
            case Family.CMT:
                return _cmt(p, k, px)
            case Family.SEQUENCER2D:
                return _sequencer(p, k)
    except (KeyError, TypeError, ValueError) as exc:
        raise UnsupportedSpec(f"{spec.name}: incomplete stage parameters ({exc})") from None
    raise UnsupportedSpec(f"unknown family {spec.family}")
