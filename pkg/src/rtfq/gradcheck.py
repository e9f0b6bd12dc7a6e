"""Finite-difference verification of the LSQ quantizer.

The analytic gradients come from the quantizer's autograd backward. The
oracle never looks at that code: it differentiates, by central differences,
the straight-through surrogate

    f(v, s) = s * clamp(v / s, lower, upper) + s * r0

where ``r0 = round(clamp(v0/s0)) - clamp(v0/s0)`` is the rounding residual
frozen at the evaluation point. Away from clamp edges and rounding ties this
surrogate equals v_hat at (v0, s0), and its derivatives are exactly what the
straight-through estimator claims.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .quantizer import QuantBounds, _LsqFunction, bounds_for, quantize_values

TIE_MARGIN = 0.01
REL_TOL = 1e-3


@dataclass
class GradcheckReport:
    bits: int
    points: int
    checked: int
    max_rel_err_v: float
    max_rel_err_s: float
    invariant_failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (self.max_rel_err_v < REL_TOL and self.max_rel_err_s < REL_TOL
                and not self.invariant_failures)


def _surrogate(v: np.ndarray, s: np.ndarray | float, r0: np.ndarray, b: QuantBounds) -> np.ndarray:
    return s * np.clip(v / s, b.lower, b.upper) + s * r0


def _rel_err(a: np.ndarray, ref: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - ref) / np.maximum(np.abs(ref), TIE_MARGIN)))


def sample_points(bounds: QuantBounds, n: int, rng: np.random.Generator):
    span = bounds.upper - bounds.lower
    z = rng.uniform(bounds.lower - 0.2 * span, bounds.upper + 0.2 * span, size=n)
    s = np.exp(rng.uniform(np.log(1e-3), np.log(1.0), size=n))
    return z * s, s


def usable_mask(v: np.ndarray, s: np.ndarray, bounds: QuantBounds, h_rel: float) -> np.ndarray:
    """Drop near-ties and points whose perturbation could cross a clamp edge."""
    z = v / s
    zc = np.clip(z, bounds.lower, bounds.upper)
    edge = np.maximum(TIE_MARGIN, 4.0 * h_rel * np.abs(z))
    inside = (z >= bounds.lower) & (z <= bounds.upper)
    near_tie = inside & (np.abs(zc - np.round(zc)) < TIE_MARGIN)
    near_edge = (np.abs(z - bounds.lower) < edge) | (np.abs(z - bounds.upper) < edge)
    return ~(near_tie | near_edge)


def _usable_points(b: QuantBounds, n: int, rng: np.random.Generator, h_rel: float):
    vs, ss, have = [], [], 0
    while have < n:
        v, s = sample_points(b, 2 * n, rng)
        keep = usable_mask(v, s, b, h_rel)
        vs.append(v[keep])
        ss.append(s[keep])
        have += int(keep.sum())
    return np.concatenate(vs)[:n], np.concatenate(ss)[:n]


def check_bits(bits: int, points: int = 1000, seed: int = 0,
               paper_literal: bool = False) -> GradcheckReport:
    rng = np.random.default_rng([seed, bits])
    b_signed = bounds_for(bits, True)
    b_unsigned = bounds_for(bits, False, paper_literal)
    half = points // 2
    failures: list[str] = []
    errs_v, errs_s, checked = [], [], 0

    for b, n in ((b_signed, half), (b_unsigned, points - half)):
        h_rel = 1e-4
        v, s = _usable_points(b, n, rng, h_rel)
        checked += v.size

        # analytic: one scalar quantizer per point, grad_scale = 1
        vt = torch.tensor(v, dtype=torch.float64, requires_grad=True)
        st = torch.tensor(s, dtype=torch.float64)
        ga_v = np.empty_like(v)
        ga_s = np.empty_like(v)
        for i in range(v.size):
            si = st[i].clone().requires_grad_(True)
            out = _LsqFunction.apply(vt[i:i + 1], si, b.lower, b.upper, 1.0)
            gv, gs = torch.autograd.grad(out.sum(), (vt, si))
            ga_v[i] = float(gv[i])
            ga_s[i] = float(gs)

        # oracle: central differences on the frozen-residual surrogate
        zc = np.clip(v / s, b.lower, b.upper)
        r0 = np.round(zc) - zc
        hs = h_rel * s
        fd_s = (_surrogate(v, s + hs, r0, b) - _surrogate(v, s - hs, r0, b)) / (2 * hs)
        hv = h_rel * s
        fd_v = (_surrogate(v + hv, s, r0, b) - _surrogate(v - hv, s, r0, b)) / (2 * hv)
        errs_v.append(_rel_err(ga_v, fd_v))
        errs_s.append(_rel_err(ga_s, fd_s))

        failures.extend(_invariants(b, rng, n))

    return GradcheckReport(bits, points, checked, max(errs_v), max(errs_s), failures)


def _invariants(b: QuantBounds, rng: np.random.Generator, n: int) -> list[str]:
    failures = []
    span = b.upper - b.lower
    s = float(np.exp(rng.uniform(np.log(1e-3), 0.0)))
    z = rng.uniform(b.lower - 0.2 * span, b.upper + 0.2 * span, size=n)
    v = torch.tensor(np.sort(z * s), dtype=torch.float32)
    step = torch.tensor(s, dtype=torch.float32)
    v_bar, v_hat = quantize_values(v, step, b)
    tag = f"{b.bits}-bit {'signed' if b.signed else 'unsigned'}"
    if bool((v_bar < b.lower).any() or (v_bar > b.upper).any()):
        failures.append(f"{tag}: range")
    zz = v / step
    inside = (zz >= b.lower) & (zz <= b.upper)
    # s/2 plus float32 rounding slack of the product v_bar * s
    slack = float(step) * (0.5 + 1e-5)
    if bool(((v_hat - v).abs()[inside] > slack).any()):
        failures.append(f"{tag}: fidelity")
    _, again = quantize_values(v_hat, step, b)
    if not torch.equal(again, v_hat):
        failures.append(f"{tag}: idempotence")
    if bool((v_hat[1:] < v_hat[:-1]).any()):
        failures.append(f"{tag}: monotonicity")
    return failures


def run_suite(bitwidths=(8, 6, 4), points: int = 1000, seed: int = 0,
              paper_literal: bool = False) -> tuple[list[GradcheckReport], float]:
    t0 = time.perf_counter()
    reports = [check_bits(q, points, seed, paper_literal) for q in bitwidths]
    return reports, time.perf_counter() - t0
