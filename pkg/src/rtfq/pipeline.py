"""Config-driven orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from . import adapt as ad
from . import numerics as nx
from .budget import BudgetPlan, enumerate_configs, partition_budgets, plan_rows, select_subnet
from .checkpoint import CheckpointError, load_plain_checkpoint, load_training, restore_optimizer, save_training
from .config import RunConfig
from .datagen import DomainDataset, generate_pair, load_dataset
from .supernet import ArchSpec, ConfigSpace, build_supernet, import_plain_weights

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class Data:
    source: DomainDataset
    target: DomainDataset
    target_labels: torch.Tensor | None


def load_data(cfg: RunConfig) -> Data:
    if cfg.source_data or cfg.target_data:
        if not (cfg.source_data and cfg.target_data):
            raise PipelineError("source_data and target_data must be given together")
        source = load_dataset(cfg.source_data, "source", cfg.num_classes)
        target = load_dataset(cfg.target_data, "target", cfg.num_classes)
        labels = target.labels
        if cfg.target_eval_data:
            labels = load_dataset(cfg.target_eval_data, "target", cfg.num_classes).labels
        return Data(source, target.unlabeled(), labels)
    source, target, labels = generate_pair(cfg.num_classes, cfg.n_source, cfg.n_target, cfg.shift(),
                                           cfg.data_seed)
    return Data(source, target, labels)


def new_trainer(cfg: RunConfig) -> ad.TrainerState:
    student = build_supernet(cfg.arch_spec(), cfg.space(), cfg.seed, cfg.paper_literal_unsigned)
    if cfg.init_weights:
        import_plain_weights(student, load_plain_checkpoint(cfg.init_weights))
    return ad.new_state(student, cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay,
                        weights=cfg.loss_weights(), ema_momentum=cfg.ema_momentum, num_random=cfg.num_random,
                        mode=cfg.mode, batch_size=cfg.batch_size, seed=cfg.seed)


def save_state(path, state: ad.TrainerState, cfg: RunConfig) -> None:
    meta = {
        "arch": state.student.arch.to_dict(),
        "space": state.space.to_dict(),
        "paper_literal": state.student.paper_literal,
        "config": cfg.to_dict(),
        "phase": state.phase,
        "step": state.step,
        "total_steps": state.total_steps,
        "seed": state.seed,
    }
    save_training(path, meta, state.student, state.teacher, state.optimizer)


def load_state(path, cfg: RunConfig) -> ad.TrainerState:
    """Rebuild a trainer from a checkpoint; the config must describe the same network."""
    try:
        meta, student_sd, teacher_sd, tensors = load_training(path)
    except FileNotFoundError:
        raise PipelineError(f"checkpoint not found: {path}") from None
    space, arch = ConfigSpace.from_dict(meta["space"]), ArchSpec.from_dict(meta["arch"])
    if space != cfg.space():
        raise PipelineError(f"config space {cfg.space()} does not match checkpoint space {space}")
    if arch != cfg.arch_spec():
        raise PipelineError(f"config architecture does not match checkpoint {path}")
    state = new_trainer(cfg)
    state.student.load_state_dict(student_sd)
    state.teacher.load_state_dict(teacher_sd)
    restore_optimizer(state.optimizer, meta["optimizer"], tensors)
    state.phase, state.step, state.total_steps = meta["phase"], meta["step"], meta["total_steps"]
    state.seed = meta["seed"]
    return state


class MetricsWriter:
    """Append-only JSON-lines sink."""

    def __init__(self, path):
        self.path = Path(path)

    def __call__(self, record: dict) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def eval_record(state: ad.TrainerState, data: Data, epoch: int, phase: str) -> dict:
    domain = "source" if phase == "warmup" else "target"
    ds, labels = (data.source, None) if phase == "warmup" else (data.target, data.target_labels)
    accs = {}
    if labels is not None or ds.labels is not None:
        for c in (state.space.largest(), state.space.smallest()):
            accs[c.label()] = ad.evaluate(state, ds, c, domain, labels)
    return {"phase": phase, "event": "eval", "epoch": epoch, "domain": domain, "accuracy": accs}


def run_training(cfg: RunConfig, phase: str, out_dir, init_from=None, resume=None) -> ad.TrainerState:
    """Warmup or adapt; checkpoints land in ``out_dir/<phase>.ckpt``."""
    if cfg.strict:
        nx.set_strict(True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    ckpt = out / f"{phase}.ckpt"
    if resume is not None:
        state = load_state(resume, cfg)
        if state.phase != phase:
            raise PipelineError(f"{resume} holds a {state.phase} run, cannot resume {phase}")
    elif phase == "adapt":
        src = Path(init_from) if init_from else out / "warmup.ckpt"
        if not src.exists():
            raise PipelineError(f"adapt needs a warmup checkpoint; {src} does not exist")
        state = load_state(src, cfg)
        if state.phase != "warmup" or state.step < state.total_steps:
            raise PipelineError(f"{src} is not a completed warmup checkpoint")
        state.phase, state.step = "adapt", 0
    else:
        state = new_trainer(cfg)

    sink = MetricsWriter(out / f"metrics_{phase}.jsonl")
    epochs = cfg.warmup_epochs if phase == "warmup" else cfg.adapt_epochs

    def on_epoch(epoch: int) -> None:
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            sink(eval_record(state, data, epoch, phase))
        save_state(ckpt, state, cfg)

    kwargs = dict(on_step=sink, on_epoch=on_epoch, max_steps=cfg.max_steps or None)
    if phase == "warmup":
        ad.warmup(state, data.source, epochs, **kwargs)
    else:
        ad.adapt(state, data.source, data.target, epochs, **kwargs)
    save_state(ckpt, state, cfg)
    return state


def make_plan(cfg: RunConfig) -> BudgetPlan:
    costs = enumerate_configs(cfg.arch_spec(), cfg.space())
    return partition_budgets(costs, cfg.budget_intervals, cfg.budget_axis)


def evaluate_budgets(cfg: RunConfig, state: ad.TrainerState, data: Data) -> tuple[BudgetPlan, dict, dict]:
    """Accuracy per config on the target set and the best subnet per budget.

    With ``selection_data = heldout`` the target set is split in half: the first
    half chooses subnets, the second half is reported.
    """
    if data.target_labels is None:
        raise PipelineError("evaluation needs target labels (target_eval_data)")
    plan = make_plan(cfg)
    configs = [c.config for c in plan.costs]
    images, labels = data.target.images, data.target_labels
    if cfg.selection_data == "heldout":
        half = len(labels) // 2
        pick = DomainDataset(images[:half], labels[:half], "target", cfg.num_classes)
        report = DomainDataset(images[half:], labels[half:], "target", cfg.num_classes)
    else:
        pick = report = DomainDataset(images, labels, "target", cfg.num_classes)
    select_acc = ad.accuracy_table(state, pick, configs, "target")
    report_acc = select_acc if report is pick else ad.accuracy_table(state, report, configs, "target")
    select_subnet(plan, select_acc)
    return plan, select_acc, report_acc


def plan_table(plan: BudgetPlan) -> list[dict]:
    return plan_rows(plan)


def budget_table(plan: BudgetPlan, report_acc: dict) -> list[dict]:
    rows = []
    for i, (b, sel) in enumerate(zip(plan.budgets, plan.selected), start=1):
        row = {"interval": i, "budget": float(b), "axis": plan.axis}
        if sel is None:
            row.update({"satisfiable": False})
        else:
            row.update({"satisfiable": True, "width": sel.config.width_mult, "resolution": sel.config.resolution,
                        "bits": sel.config.bits, "macs": sel.macs, "bitops": sel.bitops,
                        "accuracy": report_acc[sel.config]})
        rows.append(row)
    return rows


__all__ = ["CheckpointError", "Data", "PipelineError", "budget_table", "evaluate_budgets", "load_data",
           "load_state", "make_plan", "new_trainer", "run_training", "save_state"]
