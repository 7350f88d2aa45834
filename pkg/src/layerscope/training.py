"""Fine-tuning loop, QA evaluation and grid search."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import Batch, EncodedInput, Encoder

log = logging.getLogger(__name__)

SCHEDULERS = ("constant", "linear-warmup-decay")

# recorded in every report; none of these are fixed by the method being reproduced
ASSUMPTIONS = {
    "optimizer": "adam",
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "weight_decay": 0.0,
    "grad_clip_norm": 1.0,
}

Example = tuple  # (EncodedInput, target) with target an int label or (start, end)


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    scheduler: str = "constant"
    warmup_fraction: float = 0.1
    epochs: int = 5
    eval_interval_steps: int = 200
    seed: int = 0
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")


@dataclass
class TrainReport:
    config: dict
    head: str
    evals: list[dict] = field(default_factory=list)  # {"step", "dev_accuracy"}
    best_step: int = 0
    best_dev: float = float("nan")
    test_accuracy: float | None = None
    final_train_loss: float = float("nan")
    log: list[dict] = field(default_factory=list)  # {"step", "loss"} per step
    assumptions: dict = field(default_factory=lambda: dict(ASSUMPTIONS))

    @property
    def checkpoint_id(self) -> str:
        return f"step-{self.best_step}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoint_id"] = self.checkpoint_id
        return d


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for 0-based ``step`` out of ``total`` steps."""
    if cfg.scheduler == "constant":
        return cfg.learning_rate
    warm = max(1, int(round(cfg.warmup_fraction * total)))
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    return cfg.learning_rate * max(0.0, (total - step) / max(1, total - warm))


def targets_of(examples: Sequence[Example], head: str) -> np.ndarray:
    if head == "span":
        return np.array([list(t) for _, t in examples], dtype=np.int64)
    return np.array([t for _, t in examples], dtype=np.int64)


def predict(model: Encoder, inputs: Sequence[EncodedInput], head: str, batch_size: int = 128) -> np.ndarray:
    out = []
    for i in range(0, len(inputs), batch_size):
        out.append(model.predict(Batch.from_inputs(inputs[i:i + batch_size]), head))
    return np.concatenate(out, axis=0)


def evaluate_qa(model: Encoder, examples: Sequence[Example], head: str) -> float:
    """Fraction of exact matches (class index, or both span ends)."""
    if len(examples) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(model, [x for x, _ in examples], head)
    gold = targets_of(examples, head)
    if head == "span":
        return float(np.mean(np.all(pred == gold, axis=1)))
    return float(np.mean(pred == gold))


def fine_tune(
    model: Encoder,
    data: dict[str, Sequence[Example]],
    head: str,
    config: TrainConfig,
    progress: Callable[[dict], None] | None = None,
) -> tuple[TrainReport, Encoder]:
    """Train ``model`` in place; returns the report and the best-dev model copy.

    ``data`` holds "train", "dev" and optionally "test" example lists.
    """
    train = list(data["train"])
    dev = list(data.get("dev") or [])
    if not train:
        raise ValueError("training set is empty")
    rng = T.make_rng(config.seed)
    drop_rng = T.make_rng(config.seed + 1) if model.config.dropout_rate > 0 else None
    opt = T.Adam(model.params, lr=config.learning_rate, beta1=ASSUMPTIONS["beta1"],
                 beta2=ASSUMPTIONS["beta2"], eps=ASSUMPTIONS["adam_eps"])
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total = steps_per_epoch * config.epochs
    report = TrainReport(config=asdict(config), head=head)
    eval_set = dev or train
    best = model.copy()

    def do_eval(step):
        acc = evaluate_qa(model, eval_set, head)
        report.evals.append({"step": step, "dev_accuracy": acc})
        if progress:
            progress({"step": step, "dev_accuracy": acc})
        if not (acc <= report.best_dev):  # first eval or strictly better
            report.best_dev, report.best_step = acc, step
            best.params = {k: v.copy() for k, v in model.params.items()}

    step = 0
    do_eval(0)
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            chunk = [train[i] for i in idx]
            batch = Batch.from_inputs([x for x, _ in chunk])
            loss, grads = model.loss_and_grads(batch, targets_of(chunk, head), head, rng=drop_rng)
            lr = lr_at(config, step, total)
            if not math.isfinite(loss):
                raise TrainingDivergence(f"loss became {loss} at step {step} (lr={lr:g})")
            T.clip_grad_norm(grads, config.grad_clip_norm)
            opt.step(grads, lr=lr)
            step += 1
            report.log.append({"step": step, "loss": loss})
            if step % config.eval_interval_steps == 0:
                do_eval(step)
    if step % config.eval_interval_steps:
        do_eval(step)
    report.final_train_loss = report.log[-1]["loss"]
    if data.get("test"):
        report.test_accuracy = evaluate_qa(best, data["test"], head)
    return report, best


@dataclass
class GridCell:
    config: dict
    report: TrainReport | None = None
    error: str | None = None

    @property
    def dev(self) -> float:
        return self.report.best_dev if self.report is not None else float("-inf")


@dataclass
class GridReport:
    cells: list[GridCell]
    best_index: int

    @property
    def best(self) -> TrainReport:
        return self.cells[self.best_index].report

    def to_dict(self) -> dict:
        return {
            "best_index": self.best_index,
            "cells": [{"config": c.config, "best_dev": None if c.report is None else c.report.best_dev,
                       "test_accuracy": None if c.report is None else c.report.test_accuracy,
                       "error": c.error} for c in self.cells],
        }


def default_grid(seed: int = 0, epochs: int = 5, eval_interval_steps: int = 200) -> list[TrainConfig]:
    grid = []
    for lr, bs, sched in itertools.product((1e-4, 3e-4), (16, 32), SCHEDULERS):
        grid.append(TrainConfig(learning_rate=lr, batch_size=bs, scheduler=sched, warmup_fraction=0.1,
                                epochs=epochs, eval_interval_steps=eval_interval_steps, seed=seed))
    return grid


def grid_search(
    model_factory: Callable[[], Encoder],
    data: dict[str, Sequence[Example]],
    head: str,
    grid: Sequence[TrainConfig],
) -> tuple[GridReport, Encoder | None]:
    """Run ``fine_tune`` for every cell; best dev wins, earliest cell on ties.

    Failing cells are recorded and skipped.
    """
    if not grid:
        raise ValueError("grid is empty")
    cells: list[GridCell] = []
    best_model, best_i = None, -1
    for i, cfg in enumerate(grid):
        cell = GridCell(config=asdict(cfg))
        try:
            rep, m = fine_tune(model_factory(), data, head, cfg)
            cell.report = rep
            if best_i < 0 or rep.best_dev > cells[best_i].dev:
                best_i, best_model = i, m
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.warning("grid cell %d failed: %s", i, exc)
            cell.error = f"{type(exc).__name__}: {exc}"
        cells.append(cell)
        log.info("grid cell %d/%d %s dev=%.4f", i + 1, len(grid), json.dumps(cell.config), cell.dev)
    if best_i < 0:
        raise RuntimeError("every grid cell failed")
    return GridReport(cells, best_i), best_model
