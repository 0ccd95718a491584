"""Seeded randomness, small trainable layers and a finite-difference checker.

All randomness in the package flows from :func:`seeded_rng`, which returns a
NumPy ``Generator`` backed by PCG64. PCG64 output for a given seed is fixed by
NumPy's stream-compatibility policy, so streams are identical across runs and
platforms. Torch's own RNG is never used for anything stochastic.

Layers are ``torch.nn.Module`` subclasses in float64 whose parameters are drawn
from that generator, uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteError, ValidationError

DTYPE = torch.float64


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` (any 64-bit integer, 0 included)."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def check_tensor2(x, name: str = "x", *, allow_empty: bool = True) -> np.ndarray:
    """Coerce ``x`` to a finite float64 ``(rows, cols)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"numerics: {name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValidationError(f"numerics: {name} has no rows")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"numerics: {name} contains non-finite values")
    return arr


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape)).to(DTYPE)


def affine_forward(x, weight, bias):
    """``y = x @ weight + bias`` for numpy arrays or torch tensors."""
    if x.shape[-1] != weight.shape[0]:
        raise ValidationError(
            f"numerics: affine inner dims disagree ({x.shape[-1]} vs {weight.shape[0]})"
        )
    if bias.shape[-1] != weight.shape[1]:
        raise ValidationError(
            f"numerics: bias length {bias.shape[-1]} != output dim {weight.shape[1]}"
        )
    return x @ weight + bias


class Affine(nn.Module):
    """Affine map with weight stored ``(in, out)`` so that ``y = x W + b``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = nn.Parameter(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = nn.Parameter(uniform_init(rng, (d_out,), d_in))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return affine_forward(x, self.weight, self.bias)


class MLP(nn.Module):
    """Two affine layers with a tanh in between (smooth, so FD checks stay tight)."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.inner = Affine(d_in, d_hidden, rng)
        self.outer = Affine(d_hidden, d_out, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(torch.tanh(self.inner(x)))


class LSTMSummarizer(nn.Module):
    """Single-layer unidirectional LSTM returning the context at every step.

    Gate order in the packed weights is input, forget, cell, output.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d_hidden = d_hidden
        self.w_x = nn.Parameter(uniform_init(rng, (d_in, 4 * d_hidden), d_hidden))
        self.w_h = nn.Parameter(uniform_init(rng, (d_hidden, 4 * d_hidden), d_hidden))
        self.bias = nn.Parameter(uniform_init(rng, (4 * d_hidden,), d_hidden))

    def step(self, x_t, h, c):
        gates = x_t @ self.w_x + h @ self.w_h + self.bias
        i, f, g, o = gates.split(self.d_hidden, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def forward(self, seq: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        """``seq`` is ``(N, T, d_in)``; returns ``(N, steps, d_hidden)``."""
        if seq.ndim != 3:
            raise ValidationError(f"numerics: recurrent input must be (N, T, d), got {tuple(seq.shape)}")
        n, t_len, _ = seq.shape
        steps = t_len if steps is None else steps
        if t_len == 0 or steps < 1:
            raise ValidationError("numerics: recurrent_summarize needs T >= 1")
        h = seq.new_zeros(n, self.d_hidden)
        c = seq.new_zeros(n, self.d_hidden)
        out = []
        for t in range(min(steps, t_len)):
            h, c = self.step(seq[:, t], h, c)
            out.append(h)
        return torch.stack(out, dim=1)


def recurrent_summarize(sequence, cell: LSTMSummarizer) -> torch.Tensor:
    """Context vectors ``o_t`` for one ``(T, d)`` sequence or a ``(N, T, d)`` batch."""
    seq = torch.as_tensor(sequence, dtype=DTYPE)
    if seq.ndim == 2:
        return cell(seq.unsqueeze(0))[0]
    return cell(seq)


class ParamStore:
    """Named parameter tensors, each paired with a gradient buffer of the same shape."""

    def __init__(self, params: dict[str, torch.Tensor]):
        self.params = dict(params)
        self.grads = {k: torch.zeros_like(v) for k, v in self.params.items()}

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    @classmethod
    def from_tensors(cls, tensors: Iterable[tuple[str, torch.Tensor]]) -> "ParamStore":
        return cls(dict(tensors))

    def backward(self, loss_fn: Callable[[], torch.Tensor]) -> float:
        """Fill the gradient buffers with autograd gradients of ``loss_fn()``."""
        names = list(self.params)
        loss = loss_fn()
        grads = torch.autograd.grad(loss, [self.params[k] for k in names], allow_unused=True)
        for k, g in zip(names, grads):
            self.grads[k] = torch.zeros_like(self.params[k]) if g is None else g.detach().clone()
        return float(loss.detach())


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_rel_error.values())

    @property
    def failing(self) -> list[str]:
        return [k for k, err in self.max_rel_error.items() if err > self.tolerance]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare ``store.grads`` with central differences of ``loss_fn``.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    report = GradCheckReport(tolerance=tol)
    with torch.no_grad():
        for name, p in store.params.items():
            analytic = store.grads[name].reshape(-1)
            flat = p.view(-1)
            worst = 0.0
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(f"numerics: non-finite loss probing {name}[{idx}]")
                numeric = (up - down) / (2 * eps)
                a = analytic[idx].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
            report.max_rel_error[name] = worst
    return report
