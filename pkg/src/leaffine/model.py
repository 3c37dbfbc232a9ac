"""Residual CNN construction, parameter registry, layer groups, freezing.

A :class:`Model` is an ordered registry of named :class:`Parameter`
objects plus the layer structure that consumes them. Parameters are
partitioned into contiguous learning-rate groups in forward order; the
classifier head always occupies the last group.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

PRESETS = {
    "mini-basic": dict(block_kind="basic", stage_depths=(2, 2, 2),
                       stage_widths=(16, 32, 64), stem_width=16,
                       stem_kind="mini", image_size=64),
    "mini-bottleneck": dict(block_kind="bottleneck", stage_depths=(2, 2, 2),
                            stage_widths=(4, 8, 16), stem_width=16,
                            stem_kind="mini", image_size=64),
    "resnet34": dict(block_kind="basic", stage_depths=(3, 4, 6, 3),
                     stage_widths=(64, 128, 256, 512), stem_width=64,
                     stem_kind="full", image_size=224),
    "resnet50": dict(block_kind="bottleneck", stage_depths=(3, 4, 6, 3),
                     stage_widths=(64, 128, 256, 512), stem_width=64,
                     stem_kind="full", image_size=224),
}

BOTTLENECK_EXPANSION = 4
DEFAULT_GROUPS = 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; see :data:`PRESETS` for the stock ones.

    For bottleneck blocks ``stage_widths`` are the squeezed inner widths;
    block outputs are ``BOTTLENECK_EXPANSION`` times wider. ``stem_kind``
    "mini" is a 3x3 stride-1 convolution with no pooling (for small
    inputs); "full" is the canonical 7x7 stride-2 stem plus 3x3 stride-2
    max pooling.
    """

    block_kind: str
    stage_depths: tuple
    stage_widths: tuple
    stem_width: int
    num_classes: int
    image_size: int
    input_channels: int = 3
    stem_kind: str = "mini"

    def validate(self):
        if self.block_kind not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block_kind {self.block_kind!r}")
        if self.stem_kind not in ("mini", "full"):
            raise ConfigError(f"unknown stem_kind {self.stem_kind!r}")
        if len(self.stage_depths) != len(self.stage_widths):
            raise ConfigError("stage_depths and stage_widths must have equal length")
        if not self.stage_depths:
            raise ConfigError("at least one stage is required")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage depths and widths must be positive")
        if self.stem_width < 1 or self.input_channels < 1:
            raise ConfigError("stem_width and input_channels must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        divisor = 2 ** (len(self.stage_depths) + 1)
        if self.image_size < divisor or self.image_size % divisor:
            raise ConfigError(
                f"image_size {self.image_size} must be a positive multiple of {divisor}")


def preset_config(name, num_classes, image_size=None, input_channels=3):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    if image_size is not None:
        kw["image_size"] = image_size
    cfg = ModelConfig(num_classes=num_classes, input_channels=input_channels, **kw)
    cfg.validate()
    return cfg


class Parameter:
    """A named trainable tensor with a learning-rate group id."""

    __slots__ = ("name", "value", "group", "_trainable")

    def __init__(self, name, value, trainable=True, group=0):
        self.name = name
        self.value = value
        self.group = group
        self._trainable = trainable
        value.requires_grad = trainable

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.value.requires_grad = self._trainable

    def __repr__(self):
        return (f"Parameter({self.name!r}, shape={self.value.shape}, "
                f"group={self.group}, trainable={self._trainable})")


# ---------------------------------------------------------------------------
# layer units

class ConvUnit:
    def __init__(self, name, cin, cout, kernel, stride, pad, dtype, bias=False):
        self.stride = stride
        self.pad = pad
        self.w = Parameter(f"{name}.w", Tensor(
            np.zeros((cout, cin, kernel, kernel), dtype=dtype)))
        self.b = Parameter(f"{name}.b", Tensor(np.zeros(cout, dtype=dtype))) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.w.value, None if self.b is None else self.b.value,
                        stride=self.stride, pad=self.pad)

    def params(self):
        return [self.w] if self.b is None else [self.w, self.b]


class BatchNormUnit:
    def __init__(self, name, channels, dtype, momentum=0.1, eps=1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.stats_frozen = False
        self.gamma = Parameter(f"{name}.gamma", Tensor(np.ones(channels, dtype=dtype)))
        self.beta = Parameter(f"{name}.beta", Tensor(np.zeros(channels, dtype=dtype)))
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def __call__(self, x, training):
        live = training and not self.stats_frozen
        return T.batch_norm2d(x, self.gamma.value, self.beta.value,
                              self.running_mean, self.running_var,
                              training=live, momentum=self.momentum, eps=self.eps)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.mean", self.running_mean),
                (f"{self.name}.var", self.running_var)]


class LinearUnit:
    def __init__(self, name, fin, fout, dtype):
        self.w = Parameter(f"{name}.w", Tensor(np.zeros((fout, fin), dtype=dtype)))
        self.b = Parameter(f"{name}.b", Tensor(np.zeros(fout, dtype=dtype)))

    def __call__(self, x):
        return T.linear(x, self.w.value, self.b.value)

    def params(self):
        return [self.w, self.b]


class BasicBlock:
    """Two 3x3 convolutions with identity (or 1x1 projected) skip."""

    def __init__(self, name, cin, width, stride, dtype):
        self.conv1 = ConvUnit(f"{name}.conv1", cin, width, 3, stride, 1, dtype)
        self.bn1 = BatchNormUnit(f"{name}.bn1", width, dtype)
        self.conv2 = ConvUnit(f"{name}.conv2", width, width, 3, 1, 1, dtype)
        self.bn2 = BatchNormUnit(f"{name}.bn2", width, dtype)
        self.out_channels = width
        if stride != 1 or cin != width:
            self.proj_conv = ConvUnit(f"{name}.proj.conv", cin, width, 1, stride, 0, dtype)
            self.proj_bn = BatchNormUnit(f"{name}.proj.bn", width, dtype)
        else:
            self.proj_conv = None
            self.proj_bn = None

    def skip(self, x, training):
        if self.proj_conv is None:
            return x
        return self.proj_bn(self.proj_conv(x), training)

    def branch(self, x, training):
        y = T.relu(self.bn1(self.conv1(x), training))
        return self.bn2(self.conv2(y), training)

    def __call__(self, x, training):
        return T.relu(T.residual_add(self.branch(x, training), self.skip(x, training)))

    def final_bn(self):
        return self.bn2

    def params(self):
        out = self.conv1.params() + self.bn1.params() + self.conv2.params() + self.bn2.params()
        if self.proj_conv is not None:
            out += self.proj_conv.params() + self.proj_bn.params()
        return out

    def bn_units(self):
        out = [self.bn1, self.bn2]
        if self.proj_bn is not None:
            out.append(self.proj_bn)
        return out


class BottleneckBlock:
    """1x1 squeeze, 3x3 (strided), 1x1 expand, with projected skip."""

    def __init__(self, name, cin, width, stride, dtype):
        cout = width * BOTTLENECK_EXPANSION
        self.conv1 = ConvUnit(f"{name}.conv1", cin, width, 1, 1, 0, dtype)
        self.bn1 = BatchNormUnit(f"{name}.bn1", width, dtype)
        self.conv2 = ConvUnit(f"{name}.conv2", width, width, 3, stride, 1, dtype)
        self.bn2 = BatchNormUnit(f"{name}.bn2", width, dtype)
        self.conv3 = ConvUnit(f"{name}.conv3", width, cout, 1, 1, 0, dtype)
        self.bn3 = BatchNormUnit(f"{name}.bn3", cout, dtype)
        self.out_channels = cout
        if stride != 1 or cin != cout:
            self.proj_conv = ConvUnit(f"{name}.proj.conv", cin, cout, 1, stride, 0, dtype)
            self.proj_bn = BatchNormUnit(f"{name}.proj.bn", cout, dtype)
        else:
            self.proj_conv = None
            self.proj_bn = None

    def skip(self, x, training):
        if self.proj_conv is None:
            return x
        return self.proj_bn(self.proj_conv(x), training)

    def branch(self, x, training):
        y = T.relu(self.bn1(self.conv1(x), training))
        y = T.relu(self.bn2(self.conv2(y), training))
        return self.bn3(self.conv3(y), training)

    def __call__(self, x, training):
        return T.relu(T.residual_add(self.branch(x, training), self.skip(x, training)))

    def final_bn(self):
        return self.bn3

    def params(self):
        out = (self.conv1.params() + self.bn1.params() + self.conv2.params()
               + self.bn2.params() + self.conv3.params() + self.bn3.params())
        if self.proj_conv is not None:
            out += self.proj_conv.params() + self.proj_bn.params()
        return out

    def bn_units(self):
        out = [self.bn1, self.bn2, self.bn3]
        if self.proj_bn is not None:
            out.append(self.proj_bn)
        return out


# ---------------------------------------------------------------------------
# model

class Model:
    """A residual classifier: stem, stages of blocks, pooled linear head.

    ``forward`` of an (N, C, S, S) batch yields (N, num_classes) logits.
    The model is exclusively owned while training; inference-mode forward
    passes are read-only and may run concurrently.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.class_names = [f"class_{i}" for i in range(config.num_classes)]
        self.num_groups = 1

        dt = self.dtype
        if config.stem_kind == "full":
            self.stem_conv = ConvUnit("stem.conv", config.input_channels,
                                      config.stem_width, 7, 2, 3, dt)
            self.stem_pool = True
        else:
            self.stem_conv = ConvUnit("stem.conv", config.input_channels,
                                      config.stem_width, 3, 1, 1, dt)
            self.stem_pool = False
        self.stem_bn = BatchNormUnit("stem.bn", config.stem_width, dt)

        block_cls = BasicBlock if config.block_kind == "basic" else BottleneckBlock
        self.stages = []
        cin = config.stem_width
        for si, (depth, width) in enumerate(zip(config.stage_depths, config.stage_widths)):
            blocks = []
            for bi in range(depth):
                stride = 2 if (si > 0 and bi == 0) else 1
                blk = block_cls(f"s{si}.b{bi}", cin, width, stride, dt)
                blocks.append(blk)
                cin = blk.out_channels
            self.stages.append(blocks)
        self.feature_width = cin
        self.head = LinearUnit("head", cin, config.num_classes, dt)

    # -- structure walks ---------------------------------------------------

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def stem_params(self):
        return self.stem_conv.params() + self.stem_bn.params()

    def stage_param_lists(self):
        return [[p for blk in stage for p in blk.params()] for stage in self.stages]

    def block_param_lists(self):
        return [blk.params() for blk in self.blocks()]

    def head_params(self):
        return self.head.params()

    def backbone_params(self):
        return self.stem_params() + [p for blk in self.blocks() for p in blk.params()]

    def parameters(self):
        """All parameters in deterministic forward order."""
        return self.backbone_params() + self.head_params()

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def bn_units(self):
        out = [self.stem_bn]
        for blk in self.blocks():
            out.extend(blk.bn_units())
        return out

    def named_buffers(self):
        out = []
        for bn in self.bn_units():
            out.extend(bn.buffers())
        return out

    def param_count(self):
        return sum(p.value.size for p in self.parameters())

    # -- execution ----------------------------------------------------------

    def forward(self, x, training=False):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        y = T.relu(self.stem_bn(self.stem_conv(x), training))
        if self.stem_pool:
            y = T.max_pool2d(y, kernel=3, stride=2, pad=1)
        for blk in self.blocks():
            y = blk(y, training)
        return self.head(T.global_avg_pool(y))

    def loss_on_batch(self, batch, training=True):
        logits = self.forward(batch.images, training=training)
        return T.softmax_cross_entropy(logits, batch.labels)

    def zero_grads(self):
        for p in self.parameters():
            p.value.zero_grad()

    # -- state --------------------------------------------------------------

    def group_map(self):
        return {p.name: p.group for p in self.parameters()}

    def trainable_map(self):
        return {p.name: p.trainable for p in self.parameters()}

    def copy(self):
        """Deep copy: fresh structure, duplicated values, flags and buffers."""
        twin = Model(self.config, dtype=self.dtype)
        twin.class_names = list(self.class_names)
        twin.num_groups = self.num_groups
        mine = {p.name: p for p in self.parameters()}
        for p in twin.parameters():
            src = mine[p.name]
            p.value.data[...] = src.value.data
            p.group = src.group
            p.trainable = src.trainable
        buf = dict(self.named_buffers())
        for name, t in twin.named_buffers():
            t.data[...] = buf[name].data
        frozen = {bn.name: bn.stats_frozen for bn in self.bn_units()}
        for bn in twin.bn_units():
            bn.stats_frozen = frozen[bn.name]
        return twin


def build_resnet(config: ModelConfig, dtype=np.float32) -> Model:
    """Construct a model with default-valued parameters and G=3 groups.

    Call :func:`init_params` afterwards for randomized weights.
    """
    model = Model(config, dtype=dtype)
    return assign_layer_groups(model, DEFAULT_GROUPS)


def init_params(model: Model, seed: int) -> Model:
    """He-initialize weights in registry order, deterministically per seed.

    Convolution and linear weights draw from N(0, 2/fan_in); biases and BN
    shifts are zero, BN scales one, running stats reset to (0, 1).
    """
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        shape = p.value.shape
        if p.name.endswith(".w") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            p.value.data[...] = (rng.standard_normal(shape)
                                 * np.sqrt(2.0 / fan_in)).astype(model.dtype)
        elif p.name.endswith(".w") and len(shape) == 2:
            fan_in = shape[1]
            p.value.data[...] = (rng.standard_normal(shape)
                                 * np.sqrt(2.0 / fan_in)).astype(model.dtype)
        elif p.name.endswith(".gamma"):
            p.value.data[...] = 1
        else:
            p.value.data[...] = 0
    for name, buf in model.named_buffers():
        buf.data[...] = 1 if name.endswith(".var") else 0
    return model


def replace_head(model: Model, num_classes: int, class_names: Sequence[str],
                 seed: int) -> Model:
    """Swap the classifier for a fresh one; every other tensor is untouched.

    The new head lands in the last layer group and is trainable.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if len(class_names) != num_classes:
        raise ConfigError(
            f"got {len(class_names)} class names for {num_classes} classes")
    rng = np.random.default_rng(seed)
    head = LinearUnit("head", model.feature_width, num_classes, model.dtype)
    head.w.value.data[...] = (rng.standard_normal(head.w.value.shape)
                              * np.sqrt(2.0 / model.feature_width)).astype(model.dtype)
    last = model.num_groups - 1
    for p in head.params():
        p.group = last
        p.trainable = True
    model.head = head
    model.class_names = list(class_names)
    model.config = replace(model.config, num_classes=num_classes)
    return model


def _split_contiguous(units, k):
    """Split a list into k contiguous chunks, earlier chunks one longer."""
    n = len(units)
    base, rem = divmod(n, k)
    out = []
    i = 0
    for j in range(k):
        size = base + (1 if j < rem else 0)
        out.append(units[i:i + size])
        i += size
    return out


def assign_layer_groups(model: Model, num_groups: int) -> Model:
    """Partition parameters into contiguous forward-order groups.

    The head is always the last group; the backbone (stem first, then
    stages) is split evenly across the remaining groups. When there are
    more backbone groups than stages the split falls back to block, then
    parameter, granularity.
    """
    if num_groups < 1:
        raise ConfigError(f"need at least one group, got {num_groups}")
    params = model.parameters()
    if num_groups > len(params):
        raise ConfigError(
            f"{num_groups} groups exceed the {len(params)} parameter tensors")
    if num_groups == 1:
        for p in params:
            p.group = 0
        model.num_groups = 1
        return model

    units = [model.stem_params()] + model.stage_param_lists()
    if num_groups - 1 > len(units):
        units = [model.stem_params()] + model.block_param_lists()
    if num_groups - 1 > len(units):
        units = [[p] for p in model.backbone_params()]
    if num_groups - 1 > len(units):
        raise ConfigError(
            f"cannot split {len(units)} backbone tensors into {num_groups - 1} groups")
    for gid, chunk in enumerate(_split_contiguous(units, num_groups - 1)):
        for unit in chunk:
            for p in unit:
                p.group = gid
    for p in model.head_params():
        p.group = num_groups - 1
    model.num_groups = num_groups
    return model


def set_frozen(model: Model, frozen_groups, train_bn=False) -> Model:
    """Mark parameter groups as frozen (untrainable).

    With ``train_bn=False`` the batch-norm layers inside frozen groups
    also stop updating running statistics and normalize with them even in
    training mode; ``train_bn=True`` keeps their statistics and affine
    parameters live.
    """
    frozen = frozenset(frozen_groups)
    for g in frozen:
        if not 0 <= g < model.num_groups:
            raise ConfigError(f"group {g} outside [0, {model.num_groups})")
    for p in model.parameters():
        in_frozen = p.group in frozen
        if in_frozen and train_bn and (".gamma" in p.name or ".beta" in p.name):
            p.trainable = True
        else:
            p.trainable = not in_frozen
    for bn in model.bn_units():
        bn.stats_frozen = (bn.gamma.group in frozen) and not train_bn
    return model
