"""MACs/BitOPs cost model, budget partitioning and per-budget subnet selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .numerics import conv_output_size
from .supernet import ArchSpec, ConfigSpace, SubnetConfig, channels_at

FP_BITS = 32


@dataclass(frozen=True)
class ConfigCost:
    config: SubnetConfig
    macs: int
    bitops: int

    @property
    def fp_ratio(self) -> Fraction:
        """BitOPs relative to the same subnet at 32-bit precision."""
        return Fraction(self.bitops, bitops_of(self.macs, FP_BITS))


def layer_macs(arch: ArchSpec, config: SubnetConfig) -> list[int]:
    """Per-layer multiply-accumulates: each conv in order, then the linear head."""
    size = config.resolution
    cin = arch.in_channels
    out = []
    for i, spec in enumerate(arch.convs):
        cout = channels_at(spec.out_channels, config.width_mult)
        size = conv_output_size(size, spec.kernel, spec.stride, spec.padding)
        if size < 1:
            raise ValueError(f"resolution {config.resolution} collapses to zero at conv {i}")
        out.append(cin * cout * spec.kernel * spec.kernel * size * size)
        cin = cout
    out.append(cin * arch.num_classes)
    return out


def macs_of(arch: ArchSpec, config: SubnetConfig) -> int:
    """Multiply-accumulates of one forward pass; pooling counts as zero."""
    return sum(layer_macs(arch, config))


def bitops_of(macs: int, bits: int) -> int:
    return macs * bits * bits


def config_cost(arch: ArchSpec, config: SubnetConfig) -> ConfigCost:
    macs = macs_of(arch, config)
    bits = FP_BITS if config.bits is None else config.bits
    return ConfigCost(config, macs, bitops_of(macs, bits))


def _sort_key(c: ConfigCost):
    return (c.bitops, c.config.bits, c.config.width_mult, c.config.resolution)


def enumerate_configs(arch: ArchSpec, space: ConfigSpace) -> list[ConfigCost]:
    """Every (width, resolution, bits) in ``space``, cheapest first."""
    return sorted((config_cost(arch, cfg) for cfg in space.configs()), key=_sort_key)


def cost_on(c: ConfigCost, axis: str) -> int:
    if axis == "macs":
        return c.macs
    if axis == "bitops":
        return c.bitops
    raise ValueError(f"budget axis must be 'macs' or 'bitops', got {axis!r}")


@dataclass
class BudgetPlan:
    costs: list[ConfigCost]
    budgets: list[Fraction]
    axis: str = "macs"
    admissible: list[list[ConfigCost]] = field(default_factory=list)
    selected: list[ConfigCost | None] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.budgets)

    def interval_of(self, c: ConfigCost) -> int:
        """1-based index of the first budget that admits ``c``."""
        x = cost_on(c, self.axis)
        for i, b in enumerate(self.budgets, start=1):
            if x <= b:
                return i
        raise ValueError(f"{c.config} exceeds every budget")

    @property
    def unsatisfiable(self) -> list[int]:
        return [i for i, s in enumerate(self.selected, start=1) if s is None]


def partition_budgets(costs: list[ConfigCost], n: int = 8, axis: str = "macs") -> BudgetPlan:
    """Split [min cost, max cost] into ``n`` equal intervals; b_i is the i-th upper edge.

    Budgets are exact rationals, so b_n equals the maximum cost exactly.
    """
    if not isinstance(n, int) or n < 1:
        raise ValueError(f"number of budget intervals must be a positive integer, got {n!r}")
    if not costs:
        raise ValueError("partition_budgets needs at least one config cost")
    xs = [cost_on(c, axis) for c in costs]
    lo, hi = min(xs), max(xs)
    step = Fraction(hi - lo, n)
    budgets = [lo + i * step for i in range(1, n + 1)]
    admissible = [[c for c in costs if cost_on(c, axis) <= b] for b in budgets]
    return BudgetPlan(list(costs), budgets, axis, admissible)


def select_subnet(plan: BudgetPlan, accuracy: dict[SubnetConfig, float]) -> BudgetPlan:
    """Pick the most accurate admissible config per budget; ties go to fewer BitOPs."""
    missing = [c.config for c in plan.costs if c.config not in accuracy]
    if missing:
        raise ValueError(f"accuracy table lacks {len(missing)} config(s), e.g. {missing[0]}")
    selected = []
    for group in plan.admissible:
        best = None
        for c in group:
            if best is None:
                best = c
                continue
            a, ab = accuracy[c.config], accuracy[best.config]
            if a > ab or (a == ab and _sort_key(c) < _sort_key(best)):
                best = c
        selected.append(best)
    plan.selected = selected
    return plan


def plan_rows(plan: BudgetPlan) -> list[dict]:
    rows = []
    for c in plan.costs:
        rows.append({
            "width": c.config.width_mult,
            "resolution": c.config.resolution,
            "bits": c.config.bits,
            "macs": c.macs,
            "bitops": c.bitops,
            "fp32_ratio": str(c.fp_ratio),
            "budget_interval": plan.interval_of(c),
        })
    return rows
