"""Teacher-student domain adaptation over switchable quantized subnets.

Training runs in two phases. Warmup fits the student on labeled source data
with sandwich-sampled subnets and then copies it into the teacher. Adaptation
optimizes

    L_total = λ_cls·L_cls + λ_rd·L_rd + λ_pl·L_pl + λ_im·L_im

per step, where L_cls is source cross-entropy averaged over the sampled
student subnets, L_rd distills teacher supernet → student intermediate and
teacher intermediate → student smallest on target data, L_pl is the
thresholded pseudo-label loss of the student supernet, and L_im is the
information-maximization regularizer. The teacher follows the student by EMA.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from . import numerics as nx
from .budget import config_cost
from .datagen import DomainDataset
from .supernet import ConfigSpace, Supernet, SubnetConfig, resize_input

log = logging.getLogger(__name__)

PHASES = {"warmup": 0, "adapt": 1}
EVAL_BATCH = 500
STUDENT_PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    cls: float = 1.0
    rd: float = 1.0
    pl: float = 1.0
    im: float = 1.0
    tau_pl: float = 0.9

    def __post_init__(self):
        for name in ("cls", "rd", "pl", "im"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not 0.0 < self.tau_pl < 1.0:
            raise ValueError(f"tau_pl must lie in (0, 1), got {self.tau_pl}")


# Full-scale hyperparameters per benchmark: loss weights, threshold, lr, epochs.
PROFILES = {
    "office31": dict(lambda_cls=1.0, lambda_rd=1.0, tau_pl=0.9, lr=2e-4, warmup_epochs=100, adapt_epochs=30,
                     batch_size=128),
    "officehome": dict(lambda_cls=15.0, lambda_rd=1.0, tau_pl=0.9, lr=2e-4, warmup_epochs=100,
                       adapt_epochs=100, batch_size=128),
    "domainnet": dict(lambda_cls=64.0, lambda_rd=0.5, tau_pl=0.4, lr=3e-5, warmup_epochs=30, adapt_epochs=20,
                      batch_size=128),
}


# --------------------------------------------------------------------- losses

def pseudo_label_loss(probs: torch.Tensor, tau_pl: float) -> torch.Tensor:
    """Batch mean of 1[max p >= tau] * CE(argmax p, p); gated rows count as zeros."""
    nx.validate_probs(probs)
    p_max, _ = probs.max(dim=1)
    keep = (p_max.detach() >= tau_pl).to(probs.dtype)
    return (keep * -torch.log(p_max)).sum() / probs.shape[0]


def distill_loss(teacher_probs: torch.Tensor, student_probs: torch.Tensor) -> torch.Tensor:
    """Mean KL(teacher || student); the teacher side is detached."""
    if teacher_probs.shape != student_probs.shape:
        raise ValueError(f"distill_loss shape mismatch: {tuple(teacher_probs.shape)} vs "
                         f"{tuple(student_probs.shape)}")
    t = teacher_probs.detach()
    nx.validate_probs(t, "teacher probabilities")
    nx.validate_probs(student_probs, "student probabilities")
    log_s = torch.log(student_probs.clamp_min(STUDENT_PROB_FLOOR))
    return (torch.xlogy(t, t) - t * log_s).sum(dim=1).mean()


def im_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-sample entropy minus entropy of the batch-mean prediction."""
    return nx.entropy(probs).mean() - nx.entropy(probs.mean(dim=0, keepdim=True)).squeeze(0)


# ------------------------------------------------------------------- sampling

@dataclass
class SandwichQSample:
    entries: list[tuple[SubnetConfig, str]]

    @property
    def configs(self) -> list[SubnetConfig]:
        return [c for c, _ in self.entries]

    def role(self, role: str) -> list[SubnetConfig]:
        return [c for c, r in self.entries if r == role]


def sandwichq_sample(space: ConfigSpace, k: int, rng: np.random.Generator) -> SandwichQSample:
    """Smallest subnet at the fewest bits, supernet at the most bits, plus ``k``
    configs drawn uniformly (with replacement) from the whole space."""
    if k < 0:
        raise ValueError(f"number of random subnets must be >= 0, got {k}")
    entries = [(space.smallest(), "smallest"), (space.largest(), "supernet")]
    for _ in range(k):
        entries.append((SubnetConfig(space.widths[rng.integers(len(space.widths))],
                                     space.resolutions[rng.integers(len(space.resolutions))],
                                     space.bitwidths[rng.integers(len(space.bitwidths))]), "random"))
    return SandwichQSample(entries)


def per_bit_sandwich_sample(space: ConfigSpace, k: int, rng: np.random.Generator) -> SandwichQSample:
    """Baseline: an independent sandwich at every fixed bit-width."""
    entries = []
    for q in sorted(space.bitwidths):
        sub = ConfigSpace(space.widths, space.resolutions, (q,))
        entries.extend(sandwichq_sample(sub, k, rng).entries)
    return SandwichQSample(entries)


def intermediate_of(sample: SandwichQSample, arch) -> SubnetConfig:
    """Median-cost config among the sampled ones."""
    ranked = sorted(sample.configs, key=lambda c: (config_cost(arch, c).bitops, c.bits, c.width_mult,
                                                   c.resolution))
    return ranked[len(ranked) // 2]


# ---------------------------------------------------------------------- state

@dataclass
class TrainerState:
    student: Supernet
    teacher: Supernet
    optimizer: torch.optim.Optimizer
    weights: LossWeights = field(default_factory=LossWeights)
    ema_momentum: float = 0.96
    base_lr: float = 0.05
    num_random: int = 2
    mode: str = "sandwichq"
    batch_size: int = 64
    seed: int = 0
    phase: str = "warmup"
    step: int = 0
    total_steps: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must lie in (0, 1], got {self.ema_momentum}")
        if self.mode not in ("sandwichq", "per_bit_sandwich"):
            raise ValueError(f"mode must be 'sandwichq' or 'per_bit_sandwich', got {self.mode!r}")
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    @property
    def space(self) -> ConfigSpace:
        return self.student.space

    def sample(self, rng: np.random.Generator) -> SandwichQSample:
        if self.mode == "per_bit_sandwich":
            return per_bit_sandwich_sample(self.space, self.num_random, rng)
        return sandwichq_sample(self.space, self.num_random, rng)


def new_state(student: Supernet, optimizer: str = "sgd", lr: float = 0.05, momentum: float = 0.9,
              weight_decay: float = 0.0, **kwargs) -> TrainerState:
    teacher = copy.deepcopy(student)
    opt = nx.make_optimizer(student.parameters(), optimizer, lr, momentum, weight_decay)
    return TrainerState(student, teacher, opt, base_lr=lr, **kwargs)


def step_rng(seed: int, phase: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, PHASES[phase], 1, step])


def epoch_order(seed: int, phase: str, epoch: int, n: int, stream: int) -> np.ndarray:
    return np.random.default_rng([seed, PHASES[phase], 2 + stream, epoch]).permutation(n)


def steps_per_epoch(n_source: int, n_target: int | None, batch_size: int) -> int:
    n = n_source if n_target is None else min(n_source, n_target)
    spe = n // batch_size
    if spe < 1:
        raise ValueError(f"batch size {batch_size} exceeds the dataset size {n}")
    return spe


# ------------------------------------------------------------------------ EMA

@torch.no_grad()
def ema_update(teacher: Supernet, student: Supernet, momentum: float) -> Supernet:
    """θ_tea <- λ·θ_tea + (1-λ)·θ_stu for every parameter; buffers are copied."""
    t_params = dict(teacher.named_parameters())
    for name, p in student.named_parameters():
        t = t_params.get(name)
        if t is None or t.shape != p.shape:
            raise ValueError(f"teacher/student mismatch at parameter {name}")
        t.mul_(momentum).add_(p, alpha=1.0 - momentum)
    t_bufs = dict(teacher.named_buffers())
    for name, b in student.named_buffers():
        t = t_bufs.get(name)
        if t is None or t.shape != b.shape:
            raise ValueError(f"teacher/student mismatch at buffer {name}")
        t.copy_(b)
    return teacher


@torch.no_grad()
def copy_student_to_teacher(state: TrainerState) -> None:
    state.teacher.load_state_dict(state.student.state_dict())


# --------------------------------------------------------------------- steps

def _forward(net: Supernet, x: torch.Tensor, cfg: SubnetConfig, domain: str) -> torch.Tensor:
    return net(resize_input(x, cfg.resolution), cfg, domain, train=True)


def _finish_step(state: TrainerState, total: torch.Tensor, lr: float) -> None:
    nx.check_finite(total.detach(), f"{state.phase} loss at step {state.step}")
    nx.set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.student.clamp_steps()


def warmup_step(state: TrainerState, xs: torch.Tensor, ys: torch.Tensor,
                rng: np.random.Generator) -> dict:
    sample = state.sample(rng)
    lr = nx.cosine_annealing_lr(state.step, state.total_steps, state.base_lr)
    l_cls = torch.stack([nx.cross_entropy(_forward(state.student, xs, c, "source"), ys)
                         for c in sample.configs]).mean()
    total = state.weights.cls * l_cls
    _finish_step(state, total, lr)
    return {"lr": lr, "l_cls": l_cls.item(), "l_total": total.item(), "subnets": len(sample.configs)}


def adapt_losses(state: TrainerState, xs: torch.Tensor, ys: torch.Tensor, xt: torch.Tensor,
                 sample: SandwichQSample) -> dict[str, torch.Tensor]:
    """The four loss terms for one step; nothing is updated except BN running stats."""
    student, teacher = state.student, state.teacher
    configs = sample.configs
    smallest = min(configs, key=lambda c: config_cost(student.arch, c).bitops)
    supernet = max(configs, key=lambda c: config_cost(student.arch, c).bitops)
    mid = intermediate_of(sample, student.arch)

    l_cls = torch.stack([nx.cross_entropy(_forward(student, xs, c, "source"), ys) for c in configs]).mean()

    with torch.no_grad():
        t_sup = nx.softmax(_forward(teacher, xt, supernet, "target"))
        t_mid = nx.softmax(_forward(teacher, xt, mid, "target"))
    s_mid = nx.softmax(_forward(student, xt, mid, "target"))
    s_small = nx.softmax(_forward(student, xt, smallest, "target"))
    l_rd = distill_loss(t_sup, s_mid) + distill_loss(t_mid, s_small)

    p_sup = nx.softmax(_forward(student, xt, supernet, "target"))
    l_pl = pseudo_label_loss(p_sup, state.weights.tau_pl)
    l_im = im_loss(p_sup)
    return {"l_cls": l_cls, "l_rd": l_rd, "l_pl": l_pl, "l_im": l_im}


def combine(weights: LossWeights, terms: dict[str, torch.Tensor]) -> torch.Tensor:
    return (weights.cls * terms["l_cls"] + weights.rd * terms["l_rd"]
            + weights.pl * terms["l_pl"] + weights.im * terms["l_im"])


def train_step(state: TrainerState, xs: torch.Tensor, ys: torch.Tensor, xt: torch.Tensor,
               rng: np.random.Generator) -> dict:
    """One adaptation step: losses, single backward, optimizer step, EMA."""
    sample = state.sample(rng)
    lr = nx.cosine_annealing_lr(state.step, state.total_steps, state.base_lr)
    terms = adapt_losses(state, xs, ys, xt, sample)
    total = combine(state.weights, terms)
    _finish_step(state, total, lr)
    ema_update(state.teacher, state.student, state.ema_momentum)
    out = {"lr": lr}
    out.update({k: v.item() for k, v in terms.items()})
    out["l_total"] = total.item()
    out["subnets"] = len(sample.configs)
    return out


# ---------------------------------------------------------------------- loops

def run_phase(state: TrainerState, phase: str, source: DomainDataset, target: DomainDataset | None,
              epochs: int, on_step: Callable[[dict], None] | None = None,
              on_epoch: Callable[[int], None] | None = None, max_steps: int | None = None) -> TrainerState:
    """Run (or resume) ``phase`` until ``epochs`` epochs are done or ``max_steps`` new steps ran."""
    if len(source) == 0 or source.labels is None:
        raise ValueError("training needs a nonempty labeled source dataset")
    if phase == "adapt" and (target is None or len(target) == 0):
        raise ValueError("adaptation needs a nonempty target dataset")
    if state.phase != phase:
        state.phase, state.step = phase, 0
    spe = steps_per_epoch(len(source), None if phase == "warmup" else len(target), state.batch_size)
    state.total_steps = epochs * spe
    b = state.batch_size
    ran = 0
    while state.step < state.total_steps:
        if max_steps is not None and ran >= max_steps:
            break
        epoch, i = divmod(state.step, spe)
        s_idx = torch.from_numpy(epoch_order(state.seed, phase, epoch, len(source), 0)[i * b:(i + 1) * b])
        xs, ys = source.images[s_idx], source.labels[s_idx]
        rng = step_rng(state.seed, phase, state.step)
        if phase == "warmup":
            metrics = warmup_step(state, xs, ys, rng)
        else:
            t_idx = torch.from_numpy(epoch_order(state.seed, phase, epoch, len(target), 1)[i * b:(i + 1) * b])
            metrics = train_step(state, xs, ys, target.images[t_idx], rng)
        metrics = {"phase": phase, "step": state.step, "epoch": epoch, **metrics}
        state.step += 1
        ran += 1
        if on_step is not None:
            on_step(metrics)
        if state.step % spe == 0 and on_epoch is not None:
            on_epoch(state.step // spe)
    return state


def warmup(state: TrainerState, source: DomainDataset, epochs: int, **kwargs) -> TrainerState:
    """Source-only sandwich training, then copy the student into the teacher."""
    run_phase(state, "warmup", source, None, epochs, **kwargs)
    if state.step >= state.total_steps:
        copy_student_to_teacher(state)
    return state


def adapt(state: TrainerState, source: DomainDataset, target: DomainDataset, epochs: int,
          **kwargs) -> TrainerState:
    return run_phase(state, "adapt", source, target, epochs, **kwargs)


# ------------------------------------------------------------------ evaluate

def _batches(n: int, size: int = EVAL_BATCH) -> Iterator[slice]:
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


@torch.no_grad()
def predict(net: Supernet, images: torch.Tensor, config: SubnetConfig, domain: str) -> torch.Tensor:
    return torch.cat([net(resize_input(images[s], config.resolution), config, domain).argmax(dim=1)
                      for s in _batches(images.shape[0])])


def evaluate(model, dataset: DomainDataset, config: SubnetConfig, domain: str,
             labels: torch.Tensor | None = None) -> float:
    """Top-1 accuracy of the student (eval mode) at ``config``."""
    net = model.student if isinstance(model, TrainerState) else model
    labels = dataset.labels if labels is None else labels
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if labels is None:
        raise ValueError("evaluation needs labels")
    pred = predict(net, dataset.images, config, domain)
    return float((pred == labels).double().mean())


def accuracy_table(model, dataset: DomainDataset, configs, domain: str,
                   labels: torch.Tensor | None = None) -> dict[SubnetConfig, float]:
    return {c: evaluate(model, dataset, c, domain, labels) for c in configs}
