"""Residual and plain convolutional binary classifiers.

A :class:`ModelConfig` declares the architecture; :func:`build_model` turns it
into named parameter tensors and :func:`forward` evaluates it.  Setting
``skip_connections=False`` builds the same stack without identity paths
(the VGG-style comparison network).

Parameter names follow ``stage{i}.block{j}.{conv|bn|shortcut}{k}.{field}``,
with ``stem.*`` and ``head.dense{k}.*`` for the ends of the network.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import RejectedInputError
from .tensor import Tape, Tensor

BLOCK_KINDS = ("basic", "bottleneck")


@dataclass(frozen=True)
class StemSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = False  # 2x2 max pool, stride 2, after the stem


@dataclass(frozen=True)
class StageSpec:
    block_count: int
    out_channels: int
    first_block_stride: int = 1
    block_kind: str = "basic"


@dataclass(frozen=True)
class ModelConfig:
    stem: StemSpec
    stages: Tuple[StageSpec, ...] = ()
    head_hidden: Tuple[int, ...] = ()
    output_dim: int = 1
    skip_connections: bool = True
    batch_norm: bool = True
    input_size: Tuple[int, int, int] = (3, 64, 64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["head_hidden"] = list(self.head_hidden)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            stem=StemSpec(**d["stem"]),
            stages=tuple(StageSpec(**s) for s in d["stages"]),
            head_hidden=tuple(d["head_hidden"]),
            output_dim=d["output_dim"],
            skip_connections=d["skip_connections"],
            batch_norm=d["batch_norm"],
            input_size=tuple(d["input_size"]),
        )

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def resnet_mini(input_size=(3, 64, 64), skip_connections: bool = True) -> ModelConfig:
    """Desk-scale residual network: 8-channel stem, two stages of two basic blocks.

    The stem only halves the resolution (by pooling) so that a parasite a few
    pixels wide still covers more than one feature-map cell.
    """
    return ModelConfig(
        stem=StemSpec(8, kernel=3, stride=1, pool=True),
        stages=(StageSpec(2, 16, 1, "basic"), StageSpec(2, 32, 2, "basic")),
        skip_connections=skip_connections,
        input_size=tuple(input_size),
    )


def resnet50(input_size=(3, 224, 224)) -> ModelConfig:
    return ModelConfig(
        stem=StemSpec(64, kernel=7, stride=2, pool=True),
        stages=(
            StageSpec(3, 256, 1, "bottleneck"),
            StageSpec(4, 512, 2, "bottleneck"),
            StageSpec(6, 1024, 2, "bottleneck"),
            StageSpec(3, 2048, 2, "bottleneck"),
        ),
        input_size=tuple(input_size),
    )


def vgg16(input_size=(3, 224, 224)) -> ModelConfig:
    """Plain 13-conv + 3-dense stack; downsampling by strided convolutions."""
    return ModelConfig(
        stem=StemSpec(64, kernel=3, stride=1, pool=True),
        stages=(
            StageSpec(1, 128, 2, "basic"),
            StageSpec(2, 256, 2, "basic"),
            StageSpec(2, 512, 2, "basic"),
            StageSpec(1, 512, 2, "basic"),
        ),
        head_hidden=(4096, 4096),
        skip_connections=False,
        input_size=tuple(input_size),
    )


PRESETS = {
    "resnet-mini": resnet_mini,
    "vgg-mini": lambda input_size=(3, 64, 64): resnet_mini(input_size, skip_connections=False),
    "resnet50": resnet50,
    "vgg16": vgg16,
}


def preset(name: str, input_size=None) -> ModelConfig:
    try:
        make = PRESETS[name]
    except KeyError:
        raise RejectedInputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return make() if input_size is None else make(tuple(input_size))


# ---------------------------------------------------------------------------
# layer plan


@dataclass(frozen=True)
class ConvLayer:
    prefix: str
    cin: int
    cout: int
    kernel: int
    stride: int
    pad: int
    relu: bool  # relu after (bn of) this conv; the last conv of a block defers it past the add


@dataclass(frozen=True)
class Block:
    prefix: str
    convs: Tuple[ConvLayer, ...]
    shortcut: Optional[ConvLayer]  # projection; None means identity (or no skip at all)


def _blocks(config: ModelConfig) -> List[Block]:
    blocks = []
    cin = config.stem.out_channels
    for i, st in enumerate(config.stages):
        for j in range(st.block_count):
            stride = st.first_block_stride if j == 0 else 1
            pre = f"stage{i}.block{j}"
            cout = st.out_channels
            if st.block_kind == "basic":
                convs = (
                    ConvLayer(f"{pre}.conv0", cin, cout, 3, stride, 1, True),
                    ConvLayer(f"{pre}.conv1", cout, cout, 3, 1, 1, False),
                )
            else:
                width = max(cout // 4, 1)
                convs = (
                    ConvLayer(f"{pre}.conv0", cin, width, 1, 1, 0, True),
                    ConvLayer(f"{pre}.conv1", width, width, 3, stride, 1, True),
                    ConvLayer(f"{pre}.conv2", width, cout, 1, 1, 0, False),
                )
            shortcut = None
            if config.skip_connections and (stride != 1 or cin != cout):
                shortcut = ConvLayer(f"{pre}.shortcut0", cin, cout, 1, stride, 0, False)
            blocks.append(Block(pre, convs, shortcut))
            cin = cout
    return blocks


def _stem_layer(config: ModelConfig) -> ConvLayer:
    c, _, _ = config.input_size
    k = config.stem.kernel
    return ConvLayer("stem.conv0", c, config.stem.out_channels, k, config.stem.stride, k // 2, True)


def _bn_prefix(conv_prefix: str) -> str:
    # stage0.block0.conv1 -> stage0.block0.bn1; shortcut keeps its own prefix
    head, _, leaf = conv_prefix.rpartition(".")
    if leaf.startswith("conv"):
        return f"{head}.bn{leaf[4:]}"
    return conv_prefix


def validate(config: ModelConfig) -> None:
    """Raise :class:`RejectedInputError` unless ``config`` describes a buildable network."""
    if config.output_dim != 1:
        raise RejectedInputError("output_dim must be 1 (binary sigmoid head)")
    if len(config.input_size) != 3 or min(config.input_size) < 1:
        raise RejectedInputError(f"input_size must be (C, H, W) >= 1, got {config.input_size}")
    stem = config.stem
    if stem.out_channels < 1 or stem.kernel < 1 or stem.stride not in (1, 2):
        raise RejectedInputError(f"invalid stem {stem}")
    for st in config.stages:
        if st.out_channels < 1 or st.block_count < 1:
            raise RejectedInputError(f"invalid stage {st}")
        if st.first_block_stride not in (1, 2):
            raise RejectedInputError(f"stage stride must be 1 or 2, got {st.first_block_stride}")
        if st.block_kind not in BLOCK_KINDS:
            raise RejectedInputError(f"unknown block kind {st.block_kind!r}")
    if any(h < 1 for h in config.head_hidden):
        raise RejectedInputError("head hidden dims must be >= 1")
    h, w = feature_map_sizes(config)[-1]
    if h < 1 or w < 1:
        raise RejectedInputError(f"input {config.input_size} shrinks to nothing")


def feature_map_sizes(config: ModelConfig) -> List[Tuple[int, int]]:
    """Spatial size after the stem (and pool) and after each stage."""
    _, h, w = config.input_size
    stem = _stem_layer(config)
    h = (h + 2 * stem.pad - stem.kernel) // stem.stride + 1
    w = (w + 2 * stem.pad - stem.kernel) // stem.stride + 1
    if config.stem.pool:
        h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    sizes = [(h, w)]
    for st in config.stages:
        s = st.first_block_stride
        h, w = (h - 1) // s + 1, (w - 1) // s + 1
        sizes.append((h, w))
    return sizes


def layer_counts(config: ModelConfig) -> Dict[str, int]:
    """Count main-path conv layers, projection-shortcut convs and dense layers."""
    blocks = _blocks(config)
    return {
        "conv": 1 + sum(len(b.convs) for b in blocks),
        "shortcut_conv": sum(b.shortcut is not None for b in blocks),
        "dense": len(config.head_hidden) + 1,
        "add": sum(1 for _ in blocks) if config.skip_connections else 0,
    }


def param_specs(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """Ordered ``(name, shape, kind)`` for every tensor the config needs.

    ``kind`` is one of ``conv``, ``bias``, ``gamma``, ``beta``, ``dense``,
    ``running_mean``, ``running_var``; the last two are buffers, not
    trainable parameters.
    """
    validate(config)
    specs = []

    def conv(layer: ConvLayer):
        specs.append((f"{layer.prefix}.weight", (layer.cout, layer.cin, layer.kernel, layer.kernel), "conv"))
        if config.batch_norm:
            bn = _bn_prefix(layer.prefix)
            specs.append((f"{bn}.gamma", (layer.cout,), "gamma"))
            specs.append((f"{bn}.beta", (layer.cout,), "beta"))
            specs.append((f"{bn}.running_mean", (layer.cout,), "running_mean"))
            specs.append((f"{bn}.running_var", (layer.cout,), "running_var"))
        else:
            specs.append((f"{layer.prefix}.bias", (layer.cout,), "bias"))

    conv(_stem_layer(config))
    for block in _blocks(config):
        for layer in block.convs:
            conv(layer)
        if block.shortcut is not None:
            conv(block.shortcut)
    fin = config.stages[-1].out_channels if config.stages else config.stem.out_channels
    for k, fout in enumerate(config.head_hidden + (config.output_dim,)):
        specs.append((f"head.dense{k}.weight", (fin, fout), "dense"))
        specs.append((f"head.dense{k}.bias", (fout,), "bias"))
        fin = fout
    return specs


BUFFER_KINDS = ("running_mean", "running_var")


@dataclass
class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    tensors: Dict[str, Tensor]
    buffers: Dict[str, Tensor] = field(default_factory=dict)

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def items(self):
        return self.tensors.items()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name] if name in self.tensors else self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors or name in self.buffers

    def all_tensors(self) -> Dict[str, Tensor]:
        return {**self.tensors, **self.buffers}

    def replace(self, tensors=None, buffers=None) -> "ModelParams":
        return ModelParams(
            dict(self.tensors if tensors is None else tensors),
            dict(self.buffers if buffers is None else buffers),
        )


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, kind in param_specs(config) if kind not in BUFFER_KINDS)


def build_model(config: ModelConfig, init_seed: int = 0, dtype=np.float64) -> ModelParams:
    """Allocate parameters: He-normal conv/dense weights, zero biases, unit gamma."""
    rng = np.random.default_rng(init_seed)
    tensors, buffers = {}, {}
    for name, shape, kind in param_specs(config):
        if kind in ("conv", "dense"):
            fan_in = int(np.prod(shape[1:])) if kind == "conv" else shape[0]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind in ("gamma", "running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        t = Tensor(arr.astype(dtype))
        (buffers if kind in BUFFER_KINDS else tensors)[name] = t
    return ModelParams(tensors, buffers)


# ---------------------------------------------------------------------------
# forward


class _Runner:
    def __init__(self, params: ModelParams, config: ModelConfig, mode: str,
                 tape: Optional[Tape], watch: Optional[Iterable[str]]):
        if mode not in ("train", "eval"):
            raise RejectedInputError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.config = config
        self.mode = mode
        self.buffers = dict(params.buffers)
        self.p: Dict[str, Tensor] = dict(params.tensors)
        if tape is not None:
            names = params.tensors.keys() if watch is None else watch
            for name in names:
                self.p[name] = tape.watch(params.tensors[name], name)

    def conv(self, x: Tensor, layer: ConvLayer) -> Tensor:
        w = self.p[f"{layer.prefix}.weight"]
        if not self.config.batch_norm:
            return ops.conv2d(x, w, self.p[f"{layer.prefix}.bias"], layer.stride, layer.pad)
        y = ops.conv2d(x, w, None, layer.stride, layer.pad)
        bn = _bn_prefix(layer.prefix)
        y, mean, var = ops.batch_norm2d(
            y, self.p[f"{bn}.gamma"], self.p[f"{bn}.beta"],
            self.buffers[f"{bn}.running_mean"], self.buffers[f"{bn}.running_var"], self.mode,
        )
        self.buffers[f"{bn}.running_mean"] = mean
        self.buffers[f"{bn}.running_var"] = var
        return y

    def block(self, x: Tensor, block: Block) -> Tensor:
        y = x
        for layer in block.convs:
            y = self.conv(y, layer)
            if layer.relu:
                y = ops.relu(y)
        if self.config.skip_connections:
            identity = x if block.shortcut is None else self.conv(x, block.shortcut)
            y = ops.add(y, identity)
        return ops.relu(y)

    def run(self, batch: Tensor) -> Tensor:
        cfg = self.config
        x = ops.relu(self.conv(batch, _stem_layer(cfg)))
        if cfg.stem.pool:
            x = ops.max_pool2d(x, 2, 2)
        for block in _blocks(cfg):
            x = self.block(x, block)
        x = ops.global_avg_pool(x)
        n_dense = len(cfg.head_hidden) + 1
        for k in range(n_dense):
            x = ops.dense(x, self.p[f"head.dense{k}.weight"], self.p[f"head.dense{k}.bias"])
            if k < n_dense - 1:
                x = ops.relu(x)
        return ops.sigmoid(ops.reshape(x, (x.shape[0],)))


def _check_batch(config: ModelConfig, batch: Tensor) -> None:
    if batch.data.ndim != 4 or tuple(batch.shape[1:]) != tuple(config.input_size):
        raise RejectedInputError(
            f"batch shape {batch.shape} does not match input size {config.input_size}")


def forward(params: ModelParams, config: ModelConfig, batch: Tensor, mode: str = "eval") -> Tensor:
    """Per-sample probability of the positive class, shape ``[N]``."""
    _check_batch(config, batch)
    return _Runner(params, config, mode, None, None).run(batch)


def forward_train(params: ModelParams, config: ModelConfig, batch: Tensor,
                  tape: Optional[Tape] = None, watch: Optional[Iterable[str]] = None,
                  mode: str = "train") -> Tuple[Tensor, Dict[str, Tensor]]:
    """Forward pass for training.

    Trainable tensors (or only those named in ``watch``) are registered on
    ``tape`` under their parameter names.  Returns the probabilities and the
    running statistics updated by this batch.
    """
    _check_batch(config, batch)
    runner = _Runner(params, config, mode, tape, watch)
    probs = runner.run(batch)
    return probs, runner.buffers


def predict_proba(params: ModelParams, config: ModelConfig, images: np.ndarray,
                  batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities for an (N, C, H, W) array, in chunks."""
    dtype = next(iter(params.tensors.values())).dtype
    out = []
    for i in range(0, len(images), batch_size):
        chunk = Tensor(np.asarray(images[i:i + batch_size], dtype=dtype))
        out.append(forward(params, config, chunk, "eval").data)
    return np.concatenate(out) if out else np.zeros(0)
