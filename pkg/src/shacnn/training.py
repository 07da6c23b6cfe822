"""Two-phase training.

Phase 1 trains the bcnn model with per-level loss weights that move from the
coarse branch to the fine branch over epochs.  Phase 2 trains only the shared
FC stack and heads of the sha model, at a lower learning rate, with the trunk
and adapters frozen.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data_io import Dataset
from .label_tree import LabelTree
from .model import HierarchicalModel, predict_batch
from .nn import functional as F
from .nn.optim import Optimizer, OptimizerConfig
from .nn.tensor import Tensor, backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeightSchedule:
    segments: list[tuple[int, list[float]]]

    def __post_init__(self):
        self.segments = [(int(s), [float(w) for w in ws]) for s, ws in self.segments]
        if not self.segments or self.segments[0][0] != 0:
            raise ValueError("schedule must start at epoch 0")
        starts = [s for s, _ in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"segment start epochs must be strictly increasing, got {starts}")
        width = len(self.segments[0][1])
        for start, ws in self.segments:
            if len(ws) != width:
                raise ValueError("all segments must list the same number of weights")
            if any(w < 0 for w in ws):
                raise ValueError(f"negative loss weight in segment starting at {start}")
            if abs(sum(ws) - 1.0) > 1e-9:
                raise ValueError(f"weights of segment starting at {start} sum to {sum(ws)}, not 1")

    @property
    def levels(self) -> int:
        return len(self.segments[0][1])

    @classmethod
    def uniform(cls, levels: int) -> "LossWeightSchedule":
        return cls([(0, [1.0 / levels] * levels)])

    @classmethod
    def coarse_to_fine(cls, levels: int, boundaries: Sequence[int] | None = None) -> "LossWeightSchedule":
        """Default focus-shifting schedule.

        For three levels: [0.98, 0.01, 0.01] -> [0.10, 0.80, 0.10] -> [0.10, 0.20, 0.70].
        Other depths follow the same pattern: most weight on the focused branch,
        a little on every other one, and a final mix that favours the finest level.
        """
        if levels == 1:
            return cls.uniform(1)
        if levels == 3:
            rows = [[0.98, 0.01, 0.01], [0.10, 0.80, 0.10], [0.10, 0.20, 0.70]]
        else:
            rows = []
            for focus in range(levels):
                if focus == 0:
                    rest = 0.02 / (levels - 1)
                    row = [rest] * levels
                    row[0] = 1.0 - rest * (levels - 1)
                else:
                    rest = 0.2 / (levels - 1)
                    row = [rest] * levels
                    row[focus] = 1.0 - rest * (levels - 1)
                rows.append(row)
        bounds = list(boundaries) if boundaries is not None else [5 * i for i in range(1, levels)]
        if len(bounds) != levels - 1:
            raise ValueError(f"need {levels - 1} boundaries for {levels} levels")
        return cls([(0, rows[0])] + list(zip(bounds, rows[1:])))

    def to_list(self) -> list:
        return [[s, ws] for s, ws in self.segments]


def weights_at(schedule: LossWeightSchedule, epoch: int) -> list[float]:
    current = schedule.segments[0][1]
    for start, ws in schedule.segments:
        if start <= epoch:
            current = ws
        else:
            break
    return list(current)


def total_loss(per_level_logits: Sequence[Tensor], per_level_labels: Sequence, weights: Sequence[float]):
    """Weighted sum of per-level cross entropies; also returns the unweighted terms."""
    if not len(per_level_logits) == len(per_level_labels) == len(weights):
        raise ValueError(
            f"{len(per_level_logits)} logits, {len(per_level_labels)} label sets, {len(weights)} weights"
        )
    terms = [F.softmax_cross_entropy(z, y) for z, y in zip(per_level_logits, per_level_labels)]
    loss = terms[0] * weights[0]
    for term, w in zip(terms[1:], weights[1:]):
        loss = loss + term * w
    return loss, terms


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: LossWeightSchedule | None = None
    seed: int = 0
    phase: str = "one"
    progress: bool = False

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig.from_dict(self.optimizer)
        if isinstance(self.schedule, list):
            self.schedule = LossWeightSchedule([tuple(s) for s in self.schedule])
        if self.phase not in ("one", "two"):
            raise ValueError(f"phase must be 'one' or 'two', got {self.phase!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        d["schedule"] = self.schedule.to_list() if self.schedule else None
        d.pop("progress")
        return d


@dataclass
class EpochRecord:
    epoch: int
    loss: list[float]
    accuracy: list[float]
    weights: list[float]
    val_accuracy: list[float] | None = None
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _accuracy(model: HierarchicalModel, data: Dataset, tree: LabelTree) -> list[float]:
    if not len(data):
        return [0.0] * model.levels
    truth = tree.level_label_matrix(data.fine_labels)
    pred = predict_batch(model, data.images)
    return [float(v) for v in (pred == truth).mean(axis=0)]


def _run(model: HierarchicalModel, data: Dataset, tree: LabelTree, cfg: TrainConfig,
         schedule: LossWeightSchedule, val: Dataset | None) -> list[EpochRecord]:
    if schedule.levels != model.levels:
        raise TrainingError(f"schedule has {schedule.levels} weights per segment, model has {model.levels} levels")
    data.check_against(tree)
    labels = tree.level_label_matrix(data.fine_labels)
    params = model.trainable_parameters()
    opt = Optimizer(params, cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochRecord] = []
    n = len(data)

    for epoch in range(cfg.epochs):
        weights = weights_at(schedule, epoch)
        order = rng.permutation(n)
        loss_sum = np.zeros(model.levels)
        correct = np.zeros(model.levels)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = model.forward(data.images[idx], training=True)
            y = labels[idx]
            loss, terms = total_loss(logits, [y[:, l] for l in range(model.levels)], weights)
            opt.zero_grad()
            if loss.requires_grad:
                backward(loss)
                opt.step()
            loss_sum += [t.item() * len(idx) for t in terms]
            correct += [(z.data.argmax(axis=1) == y[:, l]).sum() for l, z in enumerate(logits)]
        record = EpochRecord(
            epoch=epoch,
            loss=[float(v) for v in loss_sum / max(n, 1)],
            accuracy=[float(v) for v in correct / max(n, 1)],
            weights=weights,
            val_accuracy=_accuracy(model, val, tree) if val is not None else None,
            seed=cfg.seed,
        )
        history.append(record)
        if cfg.progress:
            acc = " ".join(f"{a:.4f}" for a in record.accuracy)
            val_s = "" if record.val_accuracy is None else " val " + " ".join(f"{a:.4f}" for a in record.val_accuracy)
            print(f"[phase {cfg.phase}] epoch {epoch + 1}/{cfg.epochs} loss "
                  f"{' '.join(f'{v:.4f}' for v in record.loss)} acc {acc}{val_s}", file=sys.stderr)
    return history


def train_phase1(model: HierarchicalModel, data: Dataset, tree: LabelTree, cfg: TrainConfig,
                 val: Dataset | None = None) -> tuple[HierarchicalModel, list[EpochRecord]]:
    if model.variant != "bcnn":
        raise TrainingError("phase 1 trains a bcnn model")
    schedule = cfg.schedule or LossWeightSchedule.coarse_to_fine(model.levels)
    return model, _run(model, data, tree, cfg, schedule, val)


def train_phase2(model: HierarchicalModel, data: Dataset, tree: LabelTree, cfg: TrainConfig,
                 val: Dataset | None = None) -> tuple[HierarchicalModel, list[EpochRecord]]:
    if model.variant != "sha":
        raise TrainingError("phase 2 trains an sha model")
    if not model.frozen_names():
        raise TrainingError("sha model has no frozen parameters; was it built from a weight bundle?")
    schedule = cfg.schedule or LossWeightSchedule.uniform(model.levels)
    return model, _run(model, data, tree, cfg, schedule, val)


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")
