"""Accuracy / catastrophic distance evaluation and static parameter and MAC counts.

MAC convention: one multiply-accumulate per weight multiplication.  Bias
additions, activations, pooling and softmax cost nothing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data_io import Dataset
from .label_tree import LabelTree
from .model import HierarchicalModel, predict_batch
from .nn import functional as F

AVERAGING = ("all_samples", "errors_only")


@dataclass
class EvalReport:
    per_level_top1: list[float]
    catastrophic_distance: float
    n_samples: int
    averaging: str = "all_samples"

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(tree: LabelTree, fine_true: Sequence[int], predicted: np.ndarray,
                         averaging: str = "all_samples") -> EvalReport:
    """Score an (N, L) array of per-level predictions against fine-class truth."""
    if averaging not in AVERAGING:
        raise ValueError(f"averaging must be one of {AVERAGING}")
    fine_true = np.asarray(fine_true, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if len(fine_true) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    truth = tree.level_label_matrix(fine_true)
    top1 = [float(v) for v in (predicted == truth).mean(axis=0)]
    dist = tree.leaf_distances(fine_true, predicted[:, -1])
    if averaging == "all_samples":
        cd = float(dist.mean())
    else:
        wrong = dist[predicted[:, -1] != fine_true]
        cd = float(wrong.mean()) if len(wrong) else 0.0
    return EvalReport(top1, cd, len(fine_true), averaging)


def evaluate(model: HierarchicalModel, dataset: Dataset, tree: LabelTree,
             averaging: str = "all_samples") -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return evaluate_predictions(tree, dataset.fine_labels, predict_batch(model, dataset.images), averaging)


def count_params(model: HierarchicalModel) -> tuple[int, int]:
    """(total, trainable) parameter counts.  Batch-norm running statistics are not parameters."""
    total = sum(int(p.data.size) for p in model.parameters())
    trainable = sum(int(p.data.size) for p in model.parameters() if not p.frozen)
    return total, trainable


@dataclass
class CostReport:
    total_params: int
    trainable_params: int
    total_macs: int
    per_level_macs: list[int]
    trunk_macs: int
    cumulative_level_macs: list[int]
    variant: str

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_macs(conv, shape: tuple[int, int, int], batch: int) -> tuple[int, tuple[int, int, int]]:
    out = conv.output_shape(shape)
    return batch * out[1] * out[2] * conv.c_out * conv.kernel * conv.kernel * conv.c_in, out


def trunk_segment_macs(model: HierarchicalModel, input_shape: Sequence[int], batch: int = 1) -> list[int]:
    """MACs of each trunk block, in order."""
    shape = tuple(input_shape)
    per_block = []
    for block in model.blocks:
        macs = 0
        for conv in block.convs:
            m, shape = _conv_macs(conv, shape, batch)
            macs += m
        if block.spec.pool:
            stride = block.spec.pool_stride or block.spec.pool
            shape = (shape[0], (shape[1] - block.spec.pool) // stride + 1, (shape[2] - block.spec.pool) // stride + 1)
        per_block.append(macs)
    return per_block


def count_macs(model: HierarchicalModel, input_shape: Sequence[int] | None = None, batch: int = 1) -> CostReport:
    """Static MAC count.

    ``per_level_macs[l]`` counts layers that exist only for level ``l``: its
    adapter, the FC path it runs through (the shared stack counts once per
    level since it is applied to every branch separately) and its head.
    ``cumulative_level_macs[l]`` adds the trunk up to that level's tap.
    """
    shape = tuple(input_shape) if input_shape is not None else tuple(model.config.input_shape)
    if shape != tuple(model.config.input_shape):
        raise F.ShapeError(f"input shape {shape} does not match model input {tuple(model.config.input_shape)}")
    blocks = trunk_segment_macs(model, shape, batch)
    trunk = sum(blocks)
    per_level = []
    cumulative = []
    for lvl in range(model.levels):
        macs = model.adapters[lvl].macs(batch)
        macs += sum(layer.macs(batch) for layer in model.fc_stack(lvl))
        macs += model.heads[lvl].macs(batch)
        per_level.append(macs)
        cumulative.append(macs + sum(blocks[: model.config.taps[lvl]]))
    total, trainable = count_params(model)
    variant = "flat" if model.levels == 1 else model.variant
    return CostReport(total, trainable, trunk + sum(per_level), per_level, trunk, cumulative, variant)


def _pct(value: float, ref: float) -> float:
    return 0.0 if ref == 0 else 100.0 * (ref - value) / ref


def compare_costs(models: Sequence[tuple[str, HierarchicalModel]], input_shape: Sequence[int] | None = None,
                  batch: int = 1) -> list[dict]:
    """One row per model; reductions are relative to the first model (positive = cheaper)."""
    if not models:
        return []
    shapes = {tuple(m.config.input_shape) for _, m in models}
    if input_shape is not None:
        shapes.add(tuple(input_shape))
    if len(shapes) != 1:
        raise F.ShapeError(f"inconsistent input shapes: {sorted(shapes)}")
    shape = shapes.pop()
    rows = []
    ref = None
    for name, model in models:
        rep = count_macs(model, shape, batch)
        if ref is None:
            ref = rep
        row = {"name": name, **rep.to_dict()}
        row["param_reduction_pct"] = _pct(rep.total_params, ref.total_params)
        row["mac_reduction_pct"] = _pct(rep.total_macs, ref.total_macs)
        if len(rep.per_level_macs) == len(ref.per_level_macs):
            row["level_mac_reduction_pct"] = [_pct(a, b) for a, b in zip(rep.per_level_macs, ref.per_level_macs)]
        else:
            row["level_mac_reduction_pct"] = None
        rows.append(row)
    return rows


def format_cost_table(rows: Sequence[dict]) -> str:
    header = ["name", "variant", "params", "trainable", "MACs", "d_MACs%", "d_params%",
              "level MACs (branch)", "level MACs (cumulative)"]
    body = []
    for r in rows:
        body.append([
            r["name"], r["variant"], str(r["total_params"]), str(r["trainable_params"]), str(r["total_macs"]),
            f"{r['mac_reduction_pct']:.2f}", f"{r['param_reduction_pct']:.2f}",
            " ".join(map(str, r["per_level_macs"])), " ".join(map(str, r["cumulative_level_macs"])),
        ])
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines)


def cost_records(rows: Sequence[dict]) -> list[str]:
    """Line-delimited records, one metric per line."""
    out = []
    for r in rows:
        for key in ("total_params", "trainable_params", "total_macs", "trunk_macs",
                    "mac_reduction_pct", "param_reduction_pct"):
            out.append(json.dumps({"name": r["name"], "variant": r["variant"], "metric": key, "value": r[key]}))
        for lvl, (a, b) in enumerate(zip(r["per_level_macs"], r["cumulative_level_macs"]), start=1):
            out.append(json.dumps({"name": r["name"], "variant": r["variant"],
                                   "metric": f"level{lvl}_macs", "value": a}))
            out.append(json.dumps({"name": r["name"], "variant": r["variant"],
                                   "metric": f"level{lvl}_cumulative_macs", "value": b}))
    return out


def format_eval_table(name: str, report: EvalReport) -> str:
    levels = " ".join(f"L{i + 1}" for i in range(len(report.per_level_top1)))
    acc = " ".join(f"{100 * a:.2f}" for a in report.per_level_top1)
    return (
        f"{'model':<16}{'Accuracy (%) ' + levels:<32}Catastrophic Distance\n"
        f"{name:<16}{acc:<32}{report.catastrophic_distance:.4f}\n"
        f"(n={report.n_samples}, averaging={report.averaging})"
    )


def eval_records(name: str, variant: str, report: EvalReport) -> list[str]:
    out = [json.dumps({"name": name, "variant": variant, "metric": f"level{i + 1}_top1", "value": a})
           for i, a in enumerate(report.per_level_top1)]
    out.append(json.dumps({"name": name, "variant": variant, "metric": "catastrophic_distance",
                           "value": report.catastrophic_distance}))
    return out
