"""Learned step size quantization (LSQ) for weights and activations.

Forward::

    v_bar = round(clamp(v / s, lower, upper))     # ties to even
    v_hat = v_bar * s

Backward uses the straight-through estimator: rounding is treated as the
identity, so inside the clamp range dv_hat/dv = 1 and
dv_hat/ds = round(v/s) - v/s, while clamped elements pass no gradient to v
and contribute ``lower`` or ``upper`` to the step gradient. The summed step
gradient is multiplied by a fixed ``grad_scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import DTYPE, check_finite

STEP_FLOOR = 1e-8
STEP_FALLBACK = 1e-4


@dataclass(frozen=True)
class QuantBounds:
    bits: int
    signed: bool
    lower: int
    upper: int


def bounds_for(bits: int, signed: bool, paper_literal: bool = False) -> QuantBounds:
    """Integer range of a ``bits``-bit code.

    Signed codes span [-2^(b-1), 2^(b-1) - 1]. Unsigned codes span
    [0, 2^b - 1]; ``paper_literal=True`` selects the narrower [0, 2^(b-1)].
    """
    if not isinstance(bits, int) or bits < 2 or bits > 32:
        raise ValueError(f"bits must be an integer in [2, 32], got {bits!r}")
    if signed:
        return QuantBounds(bits, True, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    upper = 2 ** (bits - 1) if paper_literal else 2 ** bits - 1
    return QuantBounds(bits, False, 0, upper)


def init_step(v: torch.Tensor, bounds: QuantBounds) -> float:
    """Initial step size 2 * mean(|v|) / sqrt(upper)."""
    if v.numel() == 0:
        raise ValueError("init_step needs a nonempty tensor")
    mean_abs = float(v.detach().abs().double().mean())
    if mean_abs == 0.0:
        return STEP_FALLBACK
    return 2.0 * mean_abs / math.sqrt(bounds.upper)


def default_grad_scale(numel: int, bounds: QuantBounds) -> float:
    return 1.0 / math.sqrt(numel * bounds.upper)


def quantize_values(v: torch.Tensor, step: torch.Tensor | float, bounds: QuantBounds):
    """Return (v_bar as int32, v_hat) for the given step; no autograd."""
    check_finite(v, "quantize input")
    s = torch.as_tensor(step, dtype=v.dtype)
    if not bool(s > 0):
        raise ValueError(f"quantizer step must be positive, got {float(s)}")
    v_bar = torch.round(torch.clamp(v / s, bounds.lower, bounds.upper))
    return v_bar.to(torch.int32), v_bar * s


def lsq_backward(v: torch.Tensor, step: torch.Tensor | float, bounds: QuantBounds,
                 upstream: torch.Tensor, grad_scale: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Straight-through gradients of v_hat w.r.t. (v, s), contracted with ``upstream``."""
    s = torch.as_tensor(step, dtype=v.dtype)
    z = v / s
    below = z < bounds.lower
    above = z > bounds.upper
    inside = ~(below | above)
    grad_v = torch.where(inside, upstream, torch.zeros_like(upstream))
    ds = torch.where(inside, torch.round(z) - z, torch.zeros_like(z))
    ds = torch.where(below, torch.full_like(z, float(bounds.lower)), ds)
    ds = torch.where(above, torch.full_like(z, float(bounds.upper)), ds)
    grad_s = (upstream * ds).sum() * grad_scale
    return grad_v, grad_s


class _LsqFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, step, lower, upper, grad_scale):
        bounds = QuantBounds(0, lower < 0, lower, upper)
        _, v_hat = quantize_values(v, step, bounds)
        ctx.save_for_backward(v, step)
        ctx.bounds = bounds
        ctx.grad_scale = grad_scale
        return v_hat

    @staticmethod
    def backward(ctx, grad_out):
        v, step = ctx.saved_tensors
        grad_v, grad_s = lsq_backward(v, step, ctx.bounds, grad_out, ctx.grad_scale)
        return grad_v, grad_s.reshape(step.shape).to(step.dtype), None, None, None


class LsqQuantizer(nn.Module):
    """Per-tensor LSQ quantizer with a learnable scalar step."""

    def __init__(self, bits: int, signed: bool, paper_literal: bool = False,
                 step: float = 1.0, grad_scale: float = 1.0):
        super().__init__()
        self.bounds = bounds_for(bits, signed, paper_literal)
        self.step = nn.Parameter(torch.tensor(float(step), dtype=DTYPE))
        self.register_buffer("grad_scale", torch.tensor(float(grad_scale), dtype=torch.float64))

    @property
    def bits(self) -> int:
        return self.bounds.bits

    def initialize(self, step: float, numel: int) -> None:
        """Set the step and freeze grad_scale for a tensor of ``numel`` elements."""
        with torch.no_grad():
            self.step.fill_(max(float(step), STEP_FLOOR))
            self.grad_scale.fill_(default_grad_scale(numel, self.bounds))

    def initialize_from(self, v: torch.Tensor) -> None:
        self.initialize(init_step(v, self.bounds), v.numel())

    def clamp_step(self) -> None:
        with torch.no_grad():
            self.step.clamp_(min=STEP_FLOOR)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return _LsqFunction.apply(v, self.step, self.bounds.lower, self.bounds.upper,
                                  float(self.grad_scale))

    def quantize(self, v: torch.Tensor):
        return quantize_values(v, self.step.detach(), self.bounds)

    def extra_repr(self) -> str:
        b = self.bounds
        return f"bits={b.bits}, signed={b.signed}, range=[{b.lower}, {b.upper}]"


def quantize(v: torch.Tensor, q: LsqQuantizer):
    """(v_bar, v_hat) for quantizer ``q``. ``v_hat`` is differentiable."""
    v_bar, _ = q.quantize(v.detach())
    return v_bar, q(v)
