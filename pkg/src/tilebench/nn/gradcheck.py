"""Central finite-difference check of reverse-mode gradients.

The numeric side never touches autograd: each scalar of each checked tensor
is nudged by +-eps under ``torch.no_grad`` and the objective re-evaluated.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def _objective(fn: Callable[[], torch.Tensor], probe: torch.Tensor) -> torch.Tensor:
    out = fn()
    return (out * probe).sum()


def finite_difference_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                            eps: float = 1e-6, seed: int = 0, zero_tol: float = 1e-7) -> float:
    """Worst relative error between autograd and central differences.

    ``fn`` recomputes an output from the leaves in ``tensors`` (float64,
    ``requires_grad``).  The scalar objective is the output contracted with a
    fixed random probe, so outputs with constant sums (softmax, norms) still
    have informative gradients.  Relative error per tensor is
    ||a - n|| / max(||a||, ||n||).  A tensor whose analytic and numeric
    gradients both have norm below ``zero_tol`` counts as an exact zero
    (e.g. a bias feeding straight into batchnorm), where the ratio would
    only compare rounding noise.
    """
    for t in tensors:
        if t.dtype != torch.float64:
            raise TypeError("gradient checks run at 64-bit")
    with torch.no_grad():
        shape = fn().shape
    gen = torch.Generator().manual_seed(seed)
    probe = torch.randn(shape, generator=gen, dtype=torch.float64)

    for t in tensors:
        t.grad = None
    _objective(fn, probe).backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for t in tensors]

    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            numeric = np.zeros(t.numel())
            flat = t.view(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + eps
                up = _objective(fn, probe).item()
                flat[i] = keep - eps
                down = _objective(fn, probe).item()
                flat[i] = keep
                numeric[i] = (up - down) / (2 * eps)
            a_np = a.reshape(-1).numpy()
            scale = max(np.linalg.norm(a_np), np.linalg.norm(numeric))
            if scale < zero_tol:
                continue
            worst = max(worst, float(np.linalg.norm(a_np - numeric) / scale))
    return worst


def module_gradcheck(module: torch.nn.Module, inputs: Sequence[torch.Tensor], eps: float = 1e-6,
                     seed: int = 0, check_params: bool = True, zero_tol: float = 1e-7) -> float:
    """Finite-difference check of a module w.r.t. its inputs and parameters (64-bit)."""
    module = module.double()
    leaves = [x.detach().double().requires_grad_(True) for x in inputs]
    params = [p for p in module.parameters() if p.requires_grad] if check_params else []
    return finite_difference_check(lambda: module(*leaves), leaves + params, eps=eps, seed=seed,
                                   zero_tol=zero_tol)
