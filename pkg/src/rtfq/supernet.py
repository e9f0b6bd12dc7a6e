"""Switchable quantized convolutional classifier.

One set of full-size weights serves every subnet. A subnet is a
``SubnetConfig`` (width multiplier, input resolution, bit-width): convolutions
use the leading ``channels_at(C, w)`` output/input channels, batch norm uses a
bank entry keyed by (domain, width), and weights/activations are quantized by
the LSQ pair registered for that bit-width. ``bits=None`` runs the same
weights at full precision.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .quantizer import LsqQuantizer, STEP_FALLBACK

DOMAINS = ("source", "target")
PIXEL_MEAN_ABS = 0.5  # inputs live in [0, 1]


@dataclass(frozen=True)
class ConfigSpace:
    widths: tuple[float, ...]
    resolutions: tuple[int, ...]
    bitwidths: tuple[int, ...]

    def __post_init__(self):
        for name in ("widths", "resolutions", "bitwidths"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"ConfigSpace.{name} must be nonempty")
            if len(set(vals)) != len(vals):
                raise ValueError(f"ConfigSpace.{name} has duplicate entries: {vals}")
            if any(v <= 0 for v in vals):
                raise ValueError(f"ConfigSpace.{name} entries must be positive: {vals}")
            object.__setattr__(self, name, tuple(sorted(vals, reverse=True)))
        if 1.0 not in self.widths:
            raise ValueError(f"ConfigSpace.widths must contain 1.0, got {self.widths}")
        if max(self.widths) > 1.0:
            raise ValueError(f"width multipliers must lie in (0, 1], got {self.widths}")
        for q in self.bitwidths:
            if not isinstance(q, int) or q < 2:
                raise ValueError(f"bit-widths must be integers >= 2, got {self.bitwidths}")

    @classmethod
    def paper(cls) -> "ConfigSpace":
        return cls((1.00, 0.86, 0.73, 0.60), (224, 192, 160, 128), (8, 6, 4))

    @classmethod
    def desk(cls) -> "ConfigSpace":
        return cls((1.00, 0.75, 0.50), (32, 24, 16), (8, 6, 4))

    def smallest(self) -> "SubnetConfig":
        return SubnetConfig(min(self.widths), min(self.resolutions), min(self.bitwidths))

    def largest(self) -> "SubnetConfig":
        return SubnetConfig(max(self.widths), max(self.resolutions), max(self.bitwidths))

    def configs(self) -> list["SubnetConfig"]:
        return [SubnetConfig(w, r, q) for w in self.widths for r in self.resolutions for q in self.bitwidths]

    def __contains__(self, cfg: "SubnetConfig") -> bool:
        return (cfg.width_mult in self.widths and cfg.resolution in self.resolutions
                and (cfg.bits is None or cfg.bits in self.bitwidths))

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "resolutions": list(self.resolutions),
                "bitwidths": list(self.bitwidths)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfigSpace":
        return cls(tuple(float(w) for w in d["widths"]), tuple(int(r) for r in d["resolutions"]),
                   tuple(int(q) for q in d["bitwidths"]))


@dataclass(frozen=True, order=True)
class SubnetConfig:
    width_mult: float
    resolution: int
    bits: int | None

    def label(self) -> str:
        q = "fp" if self.bits is None else f"q{self.bits}"
        return f"w{self.width_mult:.2f}-r{self.resolution}-{q}"


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1


@dataclass(frozen=True)
class ArchSpec:
    convs: tuple[ConvSpec, ...] = field(default_factory=lambda: (ConvSpec(32), ConvSpec(64), ConvSpec(128)))
    in_channels: int = 3
    num_classes: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.convs:
            raise ValueError("ArchSpec needs at least one conv block")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        for c in self.convs:
            if c.out_channels < 1 or c.kernel < 1 or c.stride < 1 or c.padding < 0:
                raise ValueError(f"invalid conv block {c}")

    @classmethod
    def desk(cls, num_classes: int = 4, in_channels: int = 3) -> "ArchSpec":
        return cls(num_classes=num_classes, in_channels=in_channels)

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "num_classes": self.num_classes,
                "convs": [[c.out_channels, c.kernel, c.stride, c.padding] for c in self.convs]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(ConvSpec(*map(int, c)) for c in d["convs"]), int(d["in_channels"]),
                   int(d["num_classes"]))


def channels_at(base_channels: int, width_mult: float) -> int:
    if base_channels < 1 or not 0 < width_mult <= 1:
        raise ValueError(f"channels_at needs base >= 1 and 0 < w <= 1, got ({base_channels}, {width_mult})")
    return max(1, int(round(base_channels * width_mult)))


def width_key(domain: str, width_mult: float) -> str:
    return f"{domain}_w{round(width_mult * 100):03d}"


def _relu_gaussian_mean(mu: torch.Tensor, sigma: torch.Tensor) -> float:
    """E[max(0, X)] for X ~ N(mu, sigma^2), averaged over channels."""
    sigma = sigma.abs().clamp_min(1e-6).double()
    mu = mu.double()
    a = mu / sigma
    cdf = 0.5 * (1 + torch.erf(a / math.sqrt(2)))
    pdf = torch.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
    return float((mu * cdf + sigma * pdf).mean())


class SwitchableConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, spec: ConvSpec, bitwidths,
                 slim_input: bool, paper_literal: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = spec.kernel
        self.stride = spec.stride
        self.padding = spec.padding
        self.slim_input = slim_input
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, spec.kernel, spec.kernel, dtype=nx.DTYPE))
        self.weight_quant = nn.ModuleDict({str(q): LsqQuantizer(q, True, paper_literal) for q in bitwidths})
        self.act_quant = nn.ModuleDict({str(q): LsqQuantizer(q, False, paper_literal) for q in bitwidths})

    def active_channels(self, width_mult: float) -> tuple[int, int]:
        cin = channels_at(self.in_channels, width_mult) if self.slim_input else self.in_channels
        return channels_at(self.out_channels, width_mult), cin

    def sliced_weight(self, width_mult: float) -> torch.Tensor:
        cout, cin = self.active_channels(width_mult)
        return self.weight[:cout, :cin]

    def forward(self, x: torch.Tensor, width_mult: float, bits: int | None) -> torch.Tensor:
        w = self.sliced_weight(width_mult)
        if bits is not None:
            w = self.weight_quant[str(bits)](w)
            x = self.act_quant[str(bits)](x)
        return nx.conv2d(x, w, self.stride, self.padding)


class SwitchableLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bitwidths, paper_literal: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=nx.DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=nx.DTYPE))
        self.weight_quant = nn.ModuleDict({str(q): LsqQuantizer(q, True, paper_literal) for q in bitwidths})
        self.act_quant = nn.ModuleDict({str(q): LsqQuantizer(q, False, paper_literal) for q in bitwidths})

    def sliced_weight(self, width_mult: float) -> torch.Tensor:
        return self.weight[:, :channels_at(self.in_features, width_mult)]

    def forward(self, x: torch.Tensor, width_mult: float, bits: int | None) -> torch.Tensor:
        w = self.sliced_weight(width_mult)
        if bits is not None:
            w = self.weight_quant[str(bits)](w)
            x = self.act_quant[str(bits)](x)
        return nx.linear(x, w, self.bias)


class DsbnBank(nn.Module):
    """Batch-norm state per (domain, width); entries never share statistics."""

    def __init__(self, channels: int, widths):
        super().__init__()
        self.channels = channels
        self.entries = nn.ModuleDict({
            width_key(d, w): nx.BatchNormState(channels_at(channels, w)) for d in DOMAINS for w in widths
        })

    def entry(self, domain: str, width_mult: float) -> nx.BatchNormState:
        if domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
        try:
            return self.entries[width_key(domain, width_mult)]
        except KeyError:
            raise ValueError(f"no batch-norm entry for width {width_mult}") from None


class Supernet(nn.Module):
    def __init__(self, arch: ArchSpec, space: ConfigSpace, paper_literal: bool = False):
        super().__init__()
        self.arch = arch
        self.space = space
        self.paper_literal = paper_literal
        convs, bns = [], []
        cin = arch.in_channels
        for i, spec in enumerate(arch.convs):
            convs.append(SwitchableConv(cin, spec.out_channels, spec, space.bitwidths,
                                        slim_input=i > 0, paper_literal=paper_literal))
            bns.append(DsbnBank(spec.out_channels, space.widths))
            cin = spec.out_channels
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns)
        self.head = SwitchableLinear(cin, arch.num_classes, space.bitwidths, paper_literal)

    def forward(self, x: torch.Tensor, config: SubnetConfig, domain: str = "source",
                train: bool = False) -> torch.Tensor:
        if config not in self.space:
            raise ValueError(f"{config} is outside the config space {self.space}")
        if x.dim() != 4 or x.shape[-1] != config.resolution or x.shape[-2] != config.resolution:
            raise ValueError(f"input of shape {tuple(x.shape)} does not match resolution {config.resolution}")
        w = config.width_mult
        h = x
        for conv, bank in zip(self.convs, self.bns):
            h = conv(h, w, config.bits)
            h = nx.batch_norm(h, bank.entry(domain, w), train)
            h = nx.relu(h)
        h = nx.global_avg_pool(h)
        return nx.check_finite(self.head(h, w, config.bits), f"logits at {config.label()}")

    def quantized_layers(self) -> list[SwitchableConv | SwitchableLinear]:
        return [*self.convs, self.head]

    def quantizers(self) -> list[LsqQuantizer]:
        out = []
        for layer in self.quantized_layers():
            out.extend(layer.weight_quant.values())
            out.extend(layer.act_quant.values())
        return out

    def clamp_steps(self) -> None:
        for q in self.quantizers():
            q.clamp_step()

    def input_feature_counts(self) -> list[int]:
        """Per-sample element count entering each quantized layer at the largest config."""
        size = max(self.space.resolutions)
        cin = self.arch.in_channels
        counts = []
        for spec in self.arch.convs:
            counts.append(cin * size * size)
            size = nx.conv_output_size(size, spec.kernel, spec.stride, spec.padding)
            cin = spec.out_channels
        counts.append(cin)
        return counts

    def init_quantizers(self) -> None:
        """Weight steps from the current weights; activation steps from BN affine parameters.

        The activation estimate treats each post-BN pre-ReLU channel as
        N(bias, weight^2), which needs no calibration data.
        """
        counts = self.input_feature_counts()
        mean_abs = [PIXEL_MEAN_ABS]
        for bank in self.bns:
            e = bank.entry("source", 1.0)
            mean_abs.append(_relu_gaussian_mean(e.bias.detach(), e.weight.detach()))
        for layer, m, n in zip(self.quantized_layers(), mean_abs, counts):
            for q in layer.weight_quant.values():
                q.initialize_from(layer.weight.detach())
            for q in layer.act_quant.values():
                step = 2.0 * m / math.sqrt(q.bounds.upper) if m > 0 else STEP_FALLBACK
                q.initialize(step, n)

    def subnet_parameter_count(self, width_mult: float) -> int:
        """Learnable entries a single subnet at ``width_mult`` touches (one domain, no quantizer steps)."""
        total = 0
        for conv, bank in zip(self.convs, self.bns):
            total += conv.sliced_weight(width_mult).numel()
            e = bank.entry("source", width_mult)
            total += e.weight.numel() + e.bias.numel()
        return total + self.head.sliced_weight(width_mult).numel() + self.head.bias.numel()


def build_supernet(arch: ArchSpec, space: ConfigSpace, seed: int = 0,
                   paper_literal: bool = False) -> Supernet:
    net = Supernet(arch, space, paper_literal)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for conv in net.convs:
            fan_in = conv.in_channels * conv.kernel * conv.kernel
            conv.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
        net.head.weight.normal_(0.0, math.sqrt(1.0 / net.head.in_features), generator=gen)
        net.head.bias.zero_()
    net.init_quantizers()
    return net


def resize_input(image: torch.Tensor, resolution: int) -> torch.Tensor:
    """Bilinear (half-pixel aligned) square resize; identity when sizes match."""
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"resize_input expects square images, got {tuple(image.shape[-2:])}")
    if image.shape[-1] == resolution:
        return image
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    out = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


class PlainNet(nn.Module):
    """Ordinary fixed-width network with the layout of ``ArchSpec`` at width 1.0."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        cin = arch.in_channels
        for i, spec in enumerate(arch.convs):
            self.add_module(f"conv{i}", nn.Conv2d(cin, spec.out_channels, spec.kernel, spec.stride,
                                                  spec.padding, bias=False))
            self.add_module(f"bn{i}", nn.BatchNorm2d(spec.out_channels, eps=nx.BN_EPS, momentum=nx.BN_MOMENTUM))
            cin = spec.out_channels
        self.fc = nn.Linear(cin, arch.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for i in range(len(self.arch.convs)):
            conv, bn = getattr(self, f"conv{i}"), getattr(self, f"bn{i}")
            h = nx.conv2d(h, conv.weight, conv.stride[0], conv.padding[0])
            h = F.batch_norm(h, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                             training=self.training, momentum=bn.momentum, eps=bn.eps)
            if self.training:
                with torch.no_grad():
                    bn.num_batches_tracked.add_(1)
            h = nx.relu(h)
        return self.fc(nx.global_avg_pool(h))


def export_plain_weights(net: Supernet, domain: str = "source") -> "OrderedDict[str, torch.Tensor]":
    """The width-1.0 view of ``net`` as a plain state dict (``PlainNet`` key layout)."""
    state = OrderedDict()
    for i, (conv, bank) in enumerate(zip(net.convs, net.bns)):
        state[f"conv{i}.weight"] = conv.weight.detach().clone()
        e = bank.entry(domain, 1.0)
        for name in ("weight", "bias", "running_mean", "running_var", "num_batches_tracked"):
            state[f"bn{i}.{name}"] = getattr(e, name).detach().clone()
    state["fc.weight"] = net.head.weight.detach().clone()
    state["fc.bias"] = net.head.bias.detach().clone()
    return state


def import_plain_weights(net: Supernet, plain_state) -> Supernet:
    """Load a plain width-1.0 state dict into every subnet of ``net``, no retraining.

    Conv and linear weights fill the full-size tensors; every (domain, width)
    batch-norm entry takes the leading channels of the plain BN; quantizer
    steps are re-initialized from the imported values.
    """
    expected = export_plain_weights(net)
    problems = []
    for key, ref in expected.items():
        if key not in plain_state:
            problems.append(f"{key}: missing")
        elif tuple(plain_state[key].shape) != tuple(ref.shape):
            problems.append(f"{key}: expected shape {tuple(ref.shape)}, got {tuple(plain_state[key].shape)}")
    extra = sorted(set(plain_state) - set(expected))
    problems.extend(f"{key}: unexpected key" for key in extra)
    if problems:
        raise ValueError("plain checkpoint does not match the architecture:\n  " + "\n  ".join(problems))

    with torch.no_grad():
        for i, (conv, bank) in enumerate(zip(net.convs, net.bns)):
            conv.weight.copy_(plain_state[f"conv{i}.weight"])
            for e in bank.entries.values():
                c = e.num_features
                e.weight.copy_(plain_state[f"bn{i}.weight"][:c])
                e.bias.copy_(plain_state[f"bn{i}.bias"][:c])
                e.running_mean.copy_(plain_state[f"bn{i}.running_mean"][:c])
                e.running_var.copy_(plain_state[f"bn{i}.running_var"][:c])
                e.num_batches_tracked.copy_(plain_state[f"bn{i}.num_batches_tracked"])
        net.head.weight.copy_(plain_state["fc.weight"])
        net.head.bias.copy_(plain_state["fc.bias"])
    net.init_quantizers()
    return net
