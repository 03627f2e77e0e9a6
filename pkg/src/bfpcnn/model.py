"""Full classifier assembly: stem and refinement convolutions, two inception
blocks bracketing the dual attention mechanisms, separable residual blocks,
and the dense head. Also parameter counting and binary checkpoints."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import (
    InceptionConfig,
    InceptionParams,
    ResidualBlockParams,
    SelfAttentionParams,
    SpatialAttentionConfig,
    SpatialAttentionParams,
    inception_block,
    residual_block,
    self_attention,
    spatial_attention,
)
from .errors import (
    BadMagic,
    ConfigError,
    ShapeConflict,
    ShapeMismatch,
    ShapeUnderflow,
    TruncatedFile,
    VersionMismatch,
)
from .layers import (
    BatchNormParams,
    Conv2DParams,
    Mode,
    batchnorm,
    conv2d,
    dense,
    dropout,
    flatten,
    he_uniform,
    maxpool2d,
    relu,
    separable_conv2d,
    softmax,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"BFPC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Widths and knobs for the layer stack. The default geometry follows the
    common inception-style widths; every width is sweepable."""

    input_size: int = 224
    class_count: int = 4
    stem_filters: int = 64
    stem_kernel: int = 7
    refine_filters: tuple[int, ...] = (64, 192)
    inception1: InceptionConfig = field(
        default_factory=lambda: InceptionConfig(64, 96, 128, 16, 32, 32))
    inception2: InceptionConfig = field(
        default_factory=lambda: InceptionConfig(128, 128, 192, 32, 96, 64))
    sep_block_filters: tuple[int, ...] = (128, 256)
    spatial_attn: SpatialAttentionConfig = field(default_factory=SpatialAttentionConfig)
    dense_units: int = 512
    dropout_rate: float = 0.5
    attn_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0 or not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")

    def to_kv(self) -> dict[str, str]:
        def ints(vals):
            return ",".join(str(v) for v in vals)

        sa = self.spatial_attn
        return {
            "model.input_size": str(self.input_size),
            "model.class_count": str(self.class_count),
            "model.stem_filters": str(self.stem_filters),
            "model.stem_kernel": str(self.stem_kernel),
            "model.refine_filters": ints(self.refine_filters),
            "model.inception1": ints(_inception_tuple(self.inception1)),
            "model.inception2": ints(_inception_tuple(self.inception2)),
            "model.sep_blocks": ints(self.sep_block_filters),
            "model.spatial_filters": "auto" if sa.filters is None else str(sa.filters),
            "model.spatial_kernel": str(sa.kernel),
            "model.spatial_dilations": ints(sa.dilations),
            "model.dense_units": str(self.dense_units),
            "model.dropout": repr(self.dropout_rate),
            "model.attn_dropout": repr(self.attn_dropout),
            "model.seed": str(self.seed),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        base = cls()
        try:
            dilations = _parse_ints(kv.get("model.spatial_dilations",
                                           ",".join(map(str, base.spatial_attn.dilations))))
            filters_raw = kv.get("model.spatial_filters", "auto")
            spatial = SpatialAttentionConfig(
                d=len(dilations),
                filters=None if filters_raw == "auto" else int(filters_raw),
                kernel=int(kv.get("model.spatial_kernel", base.spatial_attn.kernel)),
                dilations=tuple(dilations),
            )
            return cls(
                input_size=int(kv.get("model.input_size", base.input_size)),
                class_count=int(kv.get("model.class_count", base.class_count)),
                stem_filters=int(kv.get("model.stem_filters", base.stem_filters)),
                stem_kernel=int(kv.get("model.stem_kernel", base.stem_kernel)),
                refine_filters=tuple(_parse_ints(kv.get(
                    "model.refine_filters", ",".join(map(str, base.refine_filters))))),
                inception1=_inception_from(kv.get("model.inception1"), base.inception1),
                inception2=_inception_from(kv.get("model.inception2"), base.inception2),
                sep_block_filters=tuple(_parse_ints(kv.get(
                    "model.sep_blocks", ",".join(map(str, base.sep_block_filters))))),
                spatial_attn=spatial,
                dense_units=int(kv.get("model.dense_units", base.dense_units)),
                dropout_rate=float(kv.get("model.dropout", base.dropout_rate)),
                attn_dropout=float(kv.get("model.attn_dropout", base.attn_dropout)),
                seed=int(kv.get("model.seed", base.seed)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model configuration value: {exc}") from exc


def _inception_tuple(cfg: InceptionConfig):
    return (cfg.f11, cfg.f21, cfg.f22, cfg.f31, cfg.f32, cfg.f41)


def _inception_from(raw: str | None, default: InceptionConfig) -> InceptionConfig:
    if raw is None:
        return default
    vals = _parse_ints(raw)
    if len(vals) != 6:
        raise ValueError(f"inception config needs 6 filter counts, got {raw!r}")
    return InceptionConfig(*vals)


def _parse_ints(raw: str) -> list[int]:
    return [int(tok) for tok in raw.split(",") if tok.strip() != ""]


# -- layer holders ------------------------------------------------------------

class _ConvRelu:
    def __init__(self, params: Conv2DParams, apply_relu: bool = True):
        self.params = params
        self.apply_relu = apply_relu

    def forward(self, x, mode, rng):
        out = conv2d(x, self.params)
        return relu(out) if self.apply_relu else out

    def tensors(self):
        yield "weight", self.params.weights, True
        yield "bias", self.params.bias, True


class _MaxPool:
    def __init__(self, k: int, stride: int):
        self.k = k
        self.stride = stride

    def forward(self, x, mode, rng):
        return maxpool2d(x, self.k, self.stride)

    def tensors(self):
        return iter(())


class _BatchNorm:
    def __init__(self, params: BatchNormParams):
        self.params = params

    def forward(self, x, mode, rng):
        return batchnorm(x, self.params, mode)

    def tensors(self):
        yield "gamma", self.params.gamma, True
        yield "beta", self.params.beta, True
        yield "running_mean", self.params.running_mean, False
        yield "running_var", self.params.running_var, False


class _Inception:
    def __init__(self, cfg: InceptionConfig, params: InceptionParams):
        self.cfg = cfg
        self.params = params

    def forward(self, x, mode, rng):
        return inception_block(x, self.cfg, self.params)

    def tensors(self):
        for path, conv in (("p1", self.params.p1), ("p2a", self.params.p2a),
                           ("p2b", self.params.p2b), ("p3a", self.params.p3a),
                           ("p3b", self.params.p3b), ("p4", self.params.p4)):
            yield f"{path}.weight", conv.weights, True
            yield f"{path}.bias", conv.bias, True


class _SelfAttention:
    def __init__(self, params: SelfAttentionParams):
        self.params = params

    def forward(self, x, mode, rng):
        return self_attention(x, self.params, mode, rng=rng, residual=True)

    def tensors(self):
        yield "wq", self.params.wq, True
        yield "wk", self.params.wk, True
        yield "wv", self.params.wv, True
        yield "wo", self.params.wo, True


class _SepConvBlock:
    """separable conv -> BN, added to the (projected) input, then relu."""

    def __init__(self, depthwise: Tensor, pointwise: Tensor, bias: Tensor,
                 bn: BatchNormParams, shortcut: Conv2DParams | None):
        self.depthwise = depthwise
        self.pointwise = pointwise
        self.bias = bias
        self.bn = bn
        self.shortcut = shortcut

    def forward(self, x, mode, rng):
        y = batchnorm(separable_conv2d(x, self.depthwise, self.pointwise, self.bias),
                      self.bn, mode)
        s = x if self.shortcut is None else conv2d(x, self.shortcut)
        return relu(y + s)

    def tensors(self):
        yield "depthwise", self.depthwise, True
        yield "pointwise", self.pointwise, True
        yield "bias", self.bias, True
        yield "bn.gamma", self.bn.gamma, True
        yield "bn.beta", self.bn.beta, True
        yield "bn.running_mean", self.bn.running_mean, False
        yield "bn.running_var", self.bn.running_var, False
        if self.shortcut is not None:
            yield "shortcut.weight", self.shortcut.weights, True
            yield "shortcut.bias", self.shortcut.bias, True


class _SpatialAttention:
    def __init__(self, cfg: SpatialAttentionConfig, params: SpatialAttentionParams):
        self.cfg = cfg
        self.params = params

    def forward(self, x, mode, rng):
        return spatial_attention(x, self.cfg, self.params, mode)

    def tensors(self):
        for i, (conv, bn) in enumerate(self.params.branches, start=1):
            yield f"branch{i}.weight", conv.weights, True
            yield f"branch{i}.bias", conv.bias, True
            yield f"branch{i}.bn.gamma", bn.gamma, True
            yield f"branch{i}.bn.beta", bn.beta, True
            yield f"branch{i}.bn.running_mean", bn.running_mean, False
            yield f"branch{i}.bn.running_var", bn.running_var, False


class _Residual:
    def __init__(self, params: ResidualBlockParams):
        self.params = params

    def forward(self, x, mode, rng):
        return residual_block(x, self.params, mode)

    def tensors(self):
        p = self.params
        for prefix, conv, bn in (("a", p.conv1, p.bn1), ("b", p.conv2, p.bn2)):
            yield f"{prefix}.weight", conv.weights, True
            yield f"{prefix}.bias", conv.bias, True
            yield f"{prefix}.bn.gamma", bn.gamma, True
            yield f"{prefix}.bn.beta", bn.beta, True
            yield f"{prefix}.bn.running_mean", bn.running_mean, False
            yield f"{prefix}.bn.running_var", bn.running_var, False


class _Flatten:
    def forward(self, x, mode, rng):
        return flatten(x)

    def tensors(self):
        return iter(())


class _Dense:
    def __init__(self, w: Tensor, b: Tensor, apply_relu: bool):
        self.w = w
        self.b = b
        self.apply_relu = apply_relu

    def forward(self, x, mode, rng):
        out = dense(x, self.w, self.b)
        return relu(out) if self.apply_relu else out

    def tensors(self):
        yield "weight", self.w, True
        yield "bias", self.b, True


class _Dropout:
    def __init__(self, rate: float):
        self.rate = rate

    def forward(self, x, mode, rng):
        if mode == "train" and self.rate > 0 and rng is None:
            raise ValueError("training with dropout needs an explicit rng")
        return dropout(x, self.rate, mode, rng if rng is not None else 0)

    def tensors(self):
        return iter(())


class _Softmax:
    def forward(self, x, mode, rng):
        return softmax(x)

    def tensors(self):
        return iter(())


@dataclass
class ModelGraph:
    """Ordered layer stack with its parameter tensors."""

    config: ModelConfig
    layers: list[tuple[str, object]]
    total_params: int

    def named_tensors(self):
        for layer_name, layer in self.layers:
            for suffix, t, trainable in layer.tensors():
                yield f"{layer_name}.{suffix}", t, trainable

    def parameters(self) -> list[Tensor]:
        return [t for _, t, trainable in self.named_tensors() if trainable]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None


def build_model(cfg: ModelConfig) -> ModelGraph:
    """Instantiate the layer stack; deterministic for a given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    layers: list[tuple[str, object]] = []
    c, side = 1, cfg.input_size

    stem = Conv2DParams.create(rng, c, cfg.stem_filters, cfg.stem_kernel,
                               stride=2, padding="same")
    layers.append(("stem", _ConvRelu(stem)))
    c, side = cfg.stem_filters, -(-side // 2)

    if side < 3:
        raise ShapeUnderflow(f"input size {cfg.input_size} leaves {side} pixels "
                             "for the 3x3 stem pool")
    layers.append(("pool", _MaxPool(3, 2)))
    side = (side - 3) // 2 + 1

    layers.append(("refine.bn", _BatchNorm(BatchNormParams.create(c))))
    for i, f in enumerate(cfg.refine_filters, start=1):
        layers.append((f"refine.conv{i}",
                       _ConvRelu(Conv2DParams.create(rng, c, f, 3))))
        c = f

    layers.append(("inception1",
                   _Inception(cfg.inception1, InceptionParams.create(rng, c, cfg.inception1))))
    c = cfg.inception1.out_channels

    attn = SelfAttentionParams.create(rng, c, attn_dropout=cfg.attn_dropout,
                                      out_dropout=cfg.attn_dropout)
    layers.append(("attention", _SelfAttention(attn)))

    for i, f in enumerate(cfg.sep_block_filters, start=1):
        depthwise = he_uniform(rng, (c, 1, 3, 3), 9)
        pointwise = he_uniform(rng, (f, c, 1, 1), c)
        bias = Tensor([f], 0.0, requires_grad=True)
        shortcut = None if f == c else Conv2DParams.create(rng, c, f, 1)
        layers.append((f"sep{i}", _SepConvBlock(depthwise, pointwise, bias,
                                                BatchNormParams.create(f), shortcut)))
        c = f

    spatial_cfg = cfg.spatial_attn
    if spatial_cfg.filters is None:
        spatial_cfg = replace(spatial_cfg, filters=c)
    layers.append(("spatial",
                   _SpatialAttention(spatial_cfg,
                                     SpatialAttentionParams.create(rng, c, spatial_cfg))))
    c = spatial_cfg.filters

    layers.append(("inception2",
                   _Inception(cfg.inception2, InceptionParams.create(rng, c, cfg.inception2))))
    c = cfg.inception2.out_channels

    layers.append(("residual", _Residual(ResidualBlockParams.create(rng, c))))

    layers.append(("flatten", _Flatten()))
    flat = c * side * side
    if flat < 1 or side < 1:
        raise ShapeUnderflow(f"spatial extent collapsed to {side}")
    layers.append(("head", _Dense(he_uniform(rng, (flat, cfg.dense_units), flat),
                                  Tensor([cfg.dense_units], 0.0, requires_grad=True), True)))
    layers.append(("head_dropout", _Dropout(cfg.dropout_rate)))
    layers.append(("classify", _Dense(he_uniform(rng, (cfg.dense_units, cfg.class_count),
                                                 cfg.dense_units),
                                      Tensor([cfg.class_count], 0.0, requires_grad=True), False)))
    layers.append(("softmax", _Softmax()))

    graph = ModelGraph(cfg, layers, 0)
    graph.total_params = param_count(graph)
    return graph


def forward(model: ModelGraph, batch: Tensor, mode: Mode,
            rng: np.random.Generator | None = None) -> Tensor:
    """Run the stack on a [N, 1, S, S] batch; returns [N, class_count] rows
    of class probabilities."""
    s = model.config.input_size
    if batch.data.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (s, s):
        raise ShapeMismatch(f"expected [N, 1, {s}, {s}], got {list(batch.shape)}")
    x = batch
    for _, layer in model.layers:
        x = layer.forward(x, mode, rng)
    return x


def param_count(model: ModelGraph) -> int:
    """Total elements across trainable tensors (running stats excluded)."""
    return sum(t.size for _, t, trainable in model.named_tensors() if trainable)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: ModelGraph, path) -> None:
    """magic 'BFPC', version u32, count u32, then per tensor: name (u16 length
    + utf-8), rank u8, dims u32 each, f32 little-endian payload."""
    entries = list(model.named_tensors())
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor, _ in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, cfg: ModelConfig | None = None) -> ModelGraph:
    """Rebuild the model and restore every tensor bitwise.

    Without an explicit config, a ``config.txt`` echo next to the checkpoint
    supplies it.
    """
    if cfg is None:
        sibling = Path(path).parent / "config.txt"
        if not sibling.exists():
            raise ConfigError(f"no config given and {sibling} not found")
        cfg = ModelConfig.from_kv(read_kv_file(sibling))
    raw = Path(path).read_bytes()
    view = _Reader(raw, path)
    if view.take(4) != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: expected magic {CHECKPOINT_MAGIC!r}")
    version = view.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, supported {CHECKPOINT_VERSION}")
    count = view.u32()

    model = build_model(cfg)
    table = {name: t for name, t, _ in model.named_tensors()}
    seen: set[str] = set()
    for _ in range(count):
        name = view.take(view.u16()).decode("utf-8")
        rank = view.u8()
        dims = tuple(view.u32() for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        payload = view.take(4 * n)
        if name not in table:
            raise ShapeConflict(f"{path}: unexpected tensor {name!r}")
        target = table[name]
        if target.shape != dims:
            raise ShapeConflict(
                f"{path}: {name!r} has shape {dims}, model expects {target.shape}")
        target.data[...] = np.frombuffer(payload, dtype="<f4").reshape(dims)
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise ShapeConflict(f"{path}: tensors missing from checkpoint: {sorted(missing)[:4]}")
    return model


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"{self.path}: ended at byte {len(self.raw)}, "
                                f"needed {self.pos + n}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_kv_file(path) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values
