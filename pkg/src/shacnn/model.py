"""Branched (bcnn) and shared-FC (sha) hierarchical classifiers over a label tree.

Both variants share the same trunk and per-branch adapter layers::

    trunk block 1 .. block T          (conv [+bn] + relu ..., optional max-pool)
       tap at block taps[l]  ->  flatten -> adapter_l (h units) -> relu
                              -> FC stack -> head_l (c_l classes)

In ``bcnn`` every branch owns its FC stack.  In ``sha`` a single stack is applied
to every branch's adapter output, the trunk and adapters come from a
WeightBundle and are frozen, and only the shared stack and heads train.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .label_tree import LabelTree
from .nn import functional as F
from .nn import serialize
from .nn.layers import BatchNorm, Conv2d, Dense
from .nn.tensor import Parameter, Tensor

VARIANTS = ("bcnn", "sha")


class ConfigError(ValueError):
    pass


class BundleMismatchError(ValueError):
    pass


@dataclass
class ConvSpec:
    out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass
class BlockSpec:
    convs: list[ConvSpec]
    pool: int | None = 2
    pool_stride: int | None = None
    batchnorm: bool = False


@dataclass
class ArchConfig:
    input_shape: tuple[int, int, int]
    trunk: list[BlockSpec]
    taps: list[int]
    adapter_units: int
    branch_fc: list[list[int]] = field(default_factory=list)
    shared_fc: list[int] = field(default_factory=list)
    activation: str = "relu"
    dropout: float = 0.0
    freeze_adapters: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        try:
            trunk = [
                BlockSpec(
                    convs=[ConvSpec(**c) for c in b["convs"]],
                    **{k: v for k, v in b.items() if k != "convs"},
                )
                for b in d.pop("trunk")
            ]
            cfg = cls(trunk=trunk, input_shape=tuple(d.pop("input_shape")), **d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed architecture config: {exc}") from None
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @property
    def levels(self) -> int:
        return len(self.taps)

    def branch_widths(self, level: int) -> list[int]:
        """Hidden sizes of the phase-1 FC stack of branch ``level`` (0-based)."""
        if not self.branch_fc:
            return []
        if isinstance(self.branch_fc[0], int):
            return list(self.branch_fc)
        return list(self.branch_fc[level])

    def validate(self, tree: LabelTree | None = None) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive entries, got {self.input_shape}")
        if not self.trunk:
            raise ConfigError("trunk has no blocks")
        if not self.taps:
            raise ConfigError("at least one tap is required")
        if any(b <= a for a, b in zip(self.taps, self.taps[1:])):
            raise ConfigError(f"taps must be strictly increasing, got {self.taps}")
        if self.taps[0] < 1:
            raise ConfigError(f"taps are 1-based block positions, got {self.taps}")
        if self.taps[-1] > len(self.trunk):
            raise ConfigError(f"tap {self.taps[-1]} beyond trunk length {len(self.trunk)}")
        if self.taps[-1] < len(self.trunk):
            raise ConfigError(
                f"trunk blocks after the last tap ({self.taps[-1]}) would never be evaluated"
            )
        if self.adapter_units <= 0:
            raise ConfigError(f"adapter_units must be positive, got {self.adapter_units}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.branch_fc and not isinstance(self.branch_fc[0], int) and len(self.branch_fc) != self.levels:
            raise ConfigError(f"branch_fc lists {len(self.branch_fc)} stacks for {self.levels} branches")
        for lvl in range(self.levels):
            if any(w <= 0 for w in self.branch_widths(lvl)):
                raise ConfigError("branch_fc widths must be positive")
        if any(w <= 0 for w in self.shared_fc):
            raise ConfigError("shared_fc widths must be positive")
        for block in self.trunk:
            if not block.convs:
                raise ConfigError("every trunk block needs at least one conv")
            for c in block.convs:
                if c.out <= 0 or c.kernel <= 0 or c.stride <= 0 or c.padding < 0:
                    raise ConfigError(f"invalid conv spec {c}")
        if tree is not None and tree.levels != self.levels:
            raise ConfigError(f"config has {self.levels} taps but the tree has {tree.levels} levels")
        self.tap_shapes()

    def tap_shapes(self) -> list[tuple[int, int, int]]:
        """Feature-map shape at every tap."""
        shape = tuple(self.input_shape)
        shapes = []
        for i, block in enumerate(self.trunk, start=1):
            for c in block.convs:
                _, h, w = shape
                if h + 2 * c.padding < c.kernel or w + 2 * c.padding < c.kernel:
                    raise ConfigError(f"block {i}: kernel {c.kernel} larger than padded {h}x{w}")
                shape = (c.out, F.conv_output_size(h, c.kernel, c.stride, c.padding),
                         F.conv_output_size(w, c.kernel, c.stride, c.padding))
            if block.pool:
                stride = block.pool_stride or block.pool
                _, h, w = shape
                if block.pool > min(h, w):
                    raise ConfigError(f"block {i}: pool window {block.pool} larger than {h}x{w}")
                shape = (shape[0], (h - block.pool) // stride + 1, (w - block.pool) // stride + 1)
            if i in self.taps:
                shapes.append(shape)
        return shapes


def load_config(path: str | Path) -> ArchConfig:
    import json

    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return ArchConfig.from_dict(raw.get("arch", raw))


class TrunkBlock:
    def __init__(self, spec: BlockSpec, c_in: int, index: int, rng: np.random.Generator):
        self.spec = spec
        self.convs: list[Conv2d] = []
        self.norms: list[BatchNorm] = []
        for j, c in enumerate(spec.convs, start=1):
            name = f"trunk.block{index}.conv{j}"
            self.convs.append(Conv2d(c_in, c.out, c.kernel, rng, name, stride=c.stride, padding=c.padding))
            if spec.batchnorm:
                self.norms.append(BatchNorm(c.out, f"trunk.block{index}.bn{j}"))
            c_in = c.out
        self.c_out = c_in

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for j, conv in enumerate(self.convs):
            x = conv(x)
            if self.norms:
                x = self.norms[j](x, training)
            x = F.relu(x)
        if self.spec.pool:
            x = F.maxpool2d(x, self.spec.pool, self.spec.pool_stride)
        return x

    def modules(self):
        yield from self.convs
        yield from self.norms


@dataclass
class WeightBundle:
    """Trunk tensors plus the L adapter (weight, bias) pairs, stored as float32."""

    trunk_weights: dict[str, np.ndarray]
    adapter_weights: list[tuple[np.ndarray, np.ndarray]]

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.trunk_weights)
        for lvl, (w, b) in enumerate(self.adapter_weights, start=1):
            out[f"adapter{lvl}.weight"] = w
            out[f"adapter{lvl}.bias"] = b
        return out

    def names(self) -> set[str]:
        return set(self.tensors())

    def to_bytes(self) -> bytes:
        return serialize.dumps(self.tensors())

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "WeightBundle":
        trunk = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items() if k.startswith("trunk.")}
        adapters = []
        lvl = 1
        while f"adapter{lvl}.weight" in tensors:
            if f"adapter{lvl}.bias" not in tensors:
                raise BundleMismatchError(f"bundle has adapter{lvl}.weight but no adapter{lvl}.bias")
            adapters.append((np.asarray(tensors[f"adapter{lvl}.weight"], dtype=np.float32),
                             np.asarray(tensors[f"adapter{lvl}.bias"], dtype=np.float32)))
            lvl += 1
        extra = set(tensors) - set(trunk) - {f"adapter{i}.{s}" for i in range(1, lvl) for s in ("weight", "bias")}
        if extra:
            raise BundleMismatchError(f"unexpected tensors in bundle: {sorted(extra)}")
        return cls(trunk, adapters)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightBundle":
        return cls.from_tensors(serialize.loads(data))

    @classmethod
    def load(cls, path: str | Path) -> "WeightBundle":
        return cls.from_bytes(Path(path).read_bytes())


class HierarchicalModel:
    """A built model.  Use :func:`build_bcnn` / :func:`build_sha` rather than the constructor."""

    def __init__(self, config: ArchConfig, level_classes: Sequence[int], variant: str, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        config.validate()
        if len(level_classes) != config.levels:
            raise ConfigError(f"{len(level_classes)} class levels for {config.levels} taps")
        self.config = config
        self.variant = variant
        self.level_classes = list(level_classes)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])

        self.blocks: list[TrunkBlock] = []
        c_in = config.input_shape[0]
        for i, spec in enumerate(config.trunk, start=1):
            block = TrunkBlock(spec, c_in, i, rng)
            self.blocks.append(block)
            c_in = block.c_out

        h = config.adapter_units
        self.adapters = [
            Dense(int(np.prod(shape)), h, rng, f"adapter{lvl}")
            for lvl, shape in enumerate(config.tap_shapes(), start=1)
        ]

        self.branch_stacks: list[list[Dense]] = []
        self.shared_stack: list[Dense] = []
        if variant == "bcnn":
            for lvl in range(config.levels):
                self.branch_stacks.append(self._stack(h, config.branch_widths(lvl), f"branch{lvl + 1}", rng))
        else:
            self.shared_stack = self._stack(h, config.shared_fc, "shared", rng)

        self.heads = []
        for lvl, c in enumerate(self.level_classes):
            stack = self.fc_stack(lvl)
            width = stack[-1].n_out if stack else h
            self.heads.append(Dense(width, c, rng, f"head{lvl + 1}"))

    @staticmethod
    def _stack(n_in: int, widths: Sequence[int], prefix: str, rng) -> list[Dense]:
        layers = []
        for k, w in enumerate(widths, start=1):
            layers.append(Dense(n_in, w, rng, f"{prefix}.fc{k}"))
            n_in = w
        return layers

    @property
    def levels(self) -> int:
        return len(self.level_classes)

    def fc_stack(self, level: int) -> list[Dense]:
        """FC layers between adapter and head for branch ``level`` (0-based)."""
        return self.branch_stacks[level] if self.variant == "bcnn" else self.shared_stack

    def modules(self) -> Iterator:
        for block in self.blocks:
            yield from block.modules()
        yield from self.adapters
        for stack in self.branch_stacks:
            yield from stack
        yield from self.shared_stack
        yield from self.heads

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [pair for m in self.modules() for pair in m.parameters()]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [pair for m in self.modules() for pair in m.buffers()]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer, by name (live arrays, not copies)."""
        out = {n: p.data for n, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        if strict and set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise BundleMismatchError(f"state mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in tensors.items():
            if name not in own:
                raise BundleMismatchError(f"unknown tensor {name!r}")
            if own[name].shape != tuple(np.shape(value)):
                raise BundleMismatchError(
                    f"shape mismatch for {name}: model {own[name].shape}, given {np.shape(value)}"
                )
            own[name][...] = value

    @property
    def freeze_mask(self) -> dict[str, bool]:
        mask = {n: p.frozen for n, p in self.named_parameters()}
        for m in self.modules():
            for name, _ in m.buffers():
                mask[name] = m.gamma.frozen
        return mask

    def frozen_names(self) -> set[str]:
        return {n for n, frozen in self.freeze_mask.items() if frozen}

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise F.ShapeError(f"expected input (B, {', '.join(map(str, self.config.input_shape))}), got {x.shape}")

    def tap_outputs(self, x, training: bool = False) -> list[Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x.data)
        taps = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, training)
            if i in self.config.taps:
                taps.append(x)
        return taps

    def forward(self, x, training: bool = False) -> list[Tensor]:
        """Per-level logits."""
        logits = []
        for lvl, tap in enumerate(self.tap_outputs(x, training)):
            h = F.relu(self.adapters[lvl](F.flatten(tap)))
            for layer in self.fc_stack(lvl):
                h = F.relu(layer(h))
                if self.variant == "bcnn" and self.config.dropout:
                    h = F.dropout(h, self.config.dropout, self.dropout_rng, training)
            logits.append(self.heads[lvl](h))
        return logits

    __call__ = forward

    def cast(self, dtype) -> "HierarchicalModel":
        """Copy of the model with parameters and buffers in ``dtype`` (e.g. float32 inference)."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
        for m in clone.modules():
            if isinstance(m, BatchNorm):
                m.running_mean = m.running_mean.astype(dtype)
                m.running_var = m.running_var.astype(dtype)
        return clone

    def __repr__(self):
        return (f"HierarchicalModel(variant={self.variant}, levels={self.level_classes}, "
                f"params={sum(p.data.size for p in self.parameters())})")


def build_bcnn(config: ArchConfig, tree: LabelTree, seed: int = 0) -> HierarchicalModel:
    config.validate(tree)
    return HierarchicalModel(config, tree.level_class_counts(), "bcnn", seed)


def bundle_manifest(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes a bundle for ``config`` must contain."""
    probe = HierarchicalModel(config, [1] * config.levels, "bcnn", seed=0)
    state = probe.state_dict()
    return {k: v.shape for k, v in state.items() if k.startswith(("trunk.", "adapter"))}


def extract_weights(model: HierarchicalModel) -> WeightBundle:
    if model.variant != "bcnn":
        raise ValueError("weights are extracted from a bcnn (phase-1) model")
    state = model.state_dict()
    trunk = {k: v.astype(np.float32) for k, v in state.items() if k.startswith("trunk.")}
    adapters = [(a.weight.data.astype(np.float32), a.bias.data.astype(np.float32)) for a in model.adapters]
    return WeightBundle(trunk, adapters)


def build_sha(config: ArchConfig, tree: LabelTree, bundle: WeightBundle, seed: int = 0) -> HierarchicalModel:
    config.validate(tree)
    expected = bundle_manifest(config)
    given = {k: v.shape for k, v in bundle.tensors().items()}
    if set(expected) != set(given):
        raise BundleMismatchError(
            f"bundle tensors {sorted(set(given) ^ set(expected))[:6]} do not match the config"
        )
    for name, shape in expected.items():
        if given[name] != shape:
            raise BundleMismatchError(f"shape mismatch for {name}: config {shape}, bundle {given[name]}")

    model = HierarchicalModel(config, tree.level_class_counts(), "sha", seed)
    model.load_state({k: v.astype(np.float64) for k, v in bundle.tensors().items()}, strict=False)
    frozen = set(expected) if config.freeze_adapters else {k for k in expected if k.startswith("trunk.")}
    for name, p in model.named_parameters():
        p.frozen = name in frozen
    return model


def forward_levels(model: HierarchicalModel, batch, dtype=np.float64) -> list[np.ndarray]:
    """Per-level class probabilities (inference mode)."""
    net = model if dtype == np.float64 else model.cast(dtype)
    x = np.asarray(batch, dtype=dtype)
    return [F.softmax(z).data for z in net.forward(x, training=False)]


def predict(model: HierarchicalModel, image) -> tuple[list[int], list[float]]:
    """Per-level argmax (ties go to the lowest index) and its probability for one image."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise F.ShapeError("predict takes a single image")
    probs = forward_levels(model, x)
    labels = [int(np.argmax(p[0])) for p in probs]
    conf = [float(p[0, k]) for p, k in zip(probs, labels)]
    return labels, conf


def predict_batch(model: HierarchicalModel, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """(N, L) array of per-level argmax predictions."""
    out = []
    for start in range(0, len(images), batch_size):
        logits = model.forward(np.asarray(images[start:start + batch_size], dtype=np.float64))
        out.append(np.stack([z.data.argmax(axis=1) for z in logits], axis=1))
    if not out:
        return np.zeros((0, model.levels), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def save_model(model: HierarchicalModel, path: str | Path) -> None:
    serialize.save(path, model.state_dict())


def load_model_weights(model: HierarchicalModel, path: str | Path) -> None:
    tensors = serialize.load(path)
    model.load_state({k: v.astype(np.float64) for k, v in tensors.items()})
