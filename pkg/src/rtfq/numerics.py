"""Dense tensor math on top of torch's reverse-mode autograd.

This module fixes the numeric conventions used everywhere else: float32
tensors, explicit train/eval batch normalization with an "uninitialized"
guard, probability-valued losses that validate their inputs, and a hard
abort on non-finite values.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float32
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PROB_ATOL = 1e-5


class NumericalError(RuntimeError):
    """Raised when a forward value or loss becomes NaN/Inf."""


def set_strict(enabled: bool = True) -> None:
    """Single-threaded, deterministic kernels. Bit-identical reruns need this."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        bad = int((~torch.isfinite(t)).sum())
        raise NumericalError(f"{where}: {bad} non-finite value(s) in tensor of shape {tuple(t.shape)}")
    return t


def conv2d(x: torch.Tensor, weight: torch.Tensor, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """NCHW convolution with an OIKK kernel, no bias."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.dim()}-d and {weight.dim()}-d")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return F.conv2d(x, weight, None, stride, padding)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class BatchNormState(nn.Module):
    """Affine parameters and running statistics for one batch-norm site."""

    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(num_features, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(num_features, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(num_features, dtype=DTYPE))
        self.register_buffer("num_batches_tracked", torch.zeros((), dtype=torch.long))

    @property
    def initialized(self) -> bool:
        return int(self.num_batches_tracked) > 0


def batch_norm(x: torch.Tensor, stats: BatchNormState, train: bool) -> torch.Tensor:
    """Normalize over (N, H, W) per channel.

    In train mode the batch statistics are used and the running statistics are
    updated with ``stats.momentum``; in eval mode the running statistics are
    used and must have been populated by at least one train step.
    """
    if x.shape[1] != stats.num_features:
        raise ValueError(f"batch_norm expects {stats.num_features} channels, got {x.shape[1]}")
    if train:
        with torch.no_grad():
            stats.num_batches_tracked.add_(1)
        return F.batch_norm(
            x, stats.running_mean, stats.running_var, stats.weight, stats.bias,
            training=True, momentum=stats.momentum, eps=stats.eps,
        )
    if not stats.initialized:
        raise RuntimeError("batch_norm in eval mode before any train step: running statistics are uninitialized")
    return F.batch_norm(
        x, stats.running_mean, stats.running_var, stats.weight, stats.bias,
        training=False, momentum=stats.momentum, eps=stats.eps,
    )


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear feature mismatch: input has {x.shape[-1]}, weight expects {weight.shape[1]}")
    return F.linear(x, weight, bias)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3))


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(logits, dim=dim)


def validate_probs(p: torch.Tensor, name: str = "probabilities") -> None:
    if bool((p < 0).any()):
        raise ValueError(f"{name} contain negative entries")
    sums = p.detach().sum(dim=-1)
    if not bool(torch.all((sums - 1).abs() <= PROB_ATOL)):
        worst = float((sums - 1).abs().max())
        raise ValueError(f"{name} rows must sum to 1 within {PROB_ATOL}, worst deviation {worst:.3g}")


def cross_entropy(inputs: torch.Tensor, target: torch.Tensor, from_logits: bool = True) -> torch.Tensor:
    """Mean cross-entropy over the batch.

    ``target`` is either a vector of class indices (hard labels) or a matrix of
    per-row probabilities (soft labels). With ``from_logits=False`` the inputs
    are treated as probabilities and validated.
    """
    if from_logits:
        log_p = F.log_softmax(inputs, dim=-1)
    else:
        validate_probs(inputs)
        log_p = torch.log(inputs.clamp_min(torch.finfo(inputs.dtype).tiny))
    if target.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8):
        return -log_p.gather(1, target.long().unsqueeze(1)).squeeze(1).mean()
    validate_probs(target, "soft targets")
    return -(target * log_p).sum(dim=-1).mean()


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Row-wise Shannon entropy in nats (0·log 0 = 0)."""
    validate_probs(p)
    return -torch.xlogy(p, p).sum(dim=-1)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(p || q) in nats."""
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    validate_probs(p)
    validate_probs(q)
    return (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(dim=-1)


def cosine_annealing_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def make_optimizer(params, name: str = "sgd", lr: float = 0.05, momentum: float = 0.9,
                   weight_decay: float = 0.0) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
