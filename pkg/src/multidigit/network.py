"""Convolutional feature extractor plus the ``N + 1`` softmax heads.

A :class:`NetworkConfig` lists hidden layers in order. Spatial layers
(``conv``, ``locally_connected``) come first, then ``dense`` layers; the
feature map is flattened once, before the first dense layer, so the heads
always see a single feature vector per image.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor_nn as nn
from .sequence_head import SequenceDistribution

LAYER_KINDS = ("conv", "locally_connected", "dense")
ACTIVATIONS = ("relu", "maxout", "linear")


class ConfigError(ValueError):
    """Inconsistent network configuration; ``layer`` is the offending index."""

    def __init__(self, message: str, layer: int | None = None):
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)
        self.layer = layer


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int
    kernel: int = 5
    stride: int = 1
    activation: str = "relu"
    pieces: int = 3  # maxout filters per unit
    pool_stride: int | None = None
    normalize: bool = False
    dropout: float = 0.0


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    max_len: int = 5
    alphabet_size: int = 10
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every hidden layer; raises ConfigError on the
        first layer that does not fit the one before it."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input shape must be positive (H, W, C), got {self.input_shape}")
        if self.max_len < 1 or self.alphabet_size < 1:
            raise ConfigError("max_len and alphabet_size must be positive")
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, spec in enumerate(self.layers):
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {spec.kind!r}", i)
            if spec.activation not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {spec.activation!r}", i)
            if spec.width < 1:
                raise ConfigError("width must be positive", i)
            if not 0.0 <= spec.dropout < 1.0:
                raise ConfigError("dropout must be in [0, 1)", i)
            if spec.activation == "maxout" and spec.pieces < 1:
                raise ConfigError("maxout needs at least one piece", i)
            if spec.kind == "dense":
                if spec.pool_stride or spec.normalize:
                    raise ConfigError("dense layers cannot pool or normalize", i)
                shape = (spec.width,)
            else:
                if len(shape) != 3:
                    raise ConfigError(f"{spec.kind} layer needs a spatial input, got {shape}", i)
                if spec.kernel % 2 == 0 or spec.kernel < 1:
                    raise ConfigError("kernel size must be odd", i)
                if spec.stride < 1 or (spec.kind == "locally_connected" and spec.stride != 1):
                    raise ConfigError(f"invalid stride {spec.stride}", i)
                if spec.pool_stride not in (None, 1, 2):
                    raise ConfigError("pool stride must be 1 or 2", i)
                h, w, _ = shape
                h, w = -(-h // spec.stride), -(-w // spec.stride)
                if spec.pool_stride:
                    h, w = -(-h // spec.pool_stride), -(-w // spec.pool_stride)
                shape = (h, w, spec.width)
            out.append(shape)
        return out

    def feature_size(self) -> int:
        shapes = self.shapes()
        return int(np.prod(shapes[-1] if shapes else self.input_shape))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = [dataclasses.asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)

    def describe(self) -> str:
        lines = [f"{self.name}: input {self.input_shape}, N={self.max_len}, K={self.alphabet_size}"]
        for i, (spec, shape) in enumerate(zip(self.layers, self.shapes())):
            extra = []
            if spec.kind != "dense":
                extra.append(f"{spec.kernel}x{spec.kernel}")
            extra.append(spec.activation)
            if spec.pool_stride:
                extra.append(f"pool/{spec.pool_stride}")
            if spec.normalize:
                extra.append("subnorm")
            if spec.dropout:
                extra.append(f"dropout {spec.dropout}")
            lines.append(f"  {i}: {spec.kind:<17} {spec.width:>5}  {' '.join(extra):<40} -> {shape}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# presets


def svhn_paper_config(max_len: int = 5, alphabet_size: int = 10, conv_dropout: float = 0.2, dense_dropout: float = 0.5) -> NetworkConfig:
    """Full-size street-number architecture: 8 conv, 1 locally connected and
    2 dense hidden layers on 54x54 RGB crops."""
    widths = [48, 64, 128, 160, 192, 192, 192, 192]
    layers = []
    for i, w in enumerate(widths):
        layers.append(
            LayerSpec(
                "conv",
                w,
                kernel=5,
                activation="maxout" if i == 0 else "relu",
                pieces=3,
                pool_stride=2 if i % 2 == 0 else 1,
                normalize=True,
                dropout=conv_dropout,
            )
        )
    layers.append(LayerSpec("locally_connected", 192, kernel=5, dropout=conv_dropout))
    layers.append(LayerSpec("dense", 3072, dropout=dense_dropout))
    layers.append(LayerSpec("dense", 3072, dropout=dense_dropout))
    return NetworkConfig((54, 54, 3), tuple(layers), max_len, alphabet_size, name="svhn-paper")


def desk_config(
    depth: int = 3,
    widths: tuple[int, ...] | None = None,
    dense: int = 64,
    input_shape: tuple[int, int, int] = (32, 64, 1),
    max_len: int = 5,
    alphabet_size: int = 10,
    pool_strides: tuple[int, ...] | None = None,
    normalize: bool = False,
    dropout: float = 0.0,
    name: str | None = None,
) -> NetworkConfig:
    """Reduced single-CPU architecture.

    The default is three 5x5 conv layers of widths 8, 16, 32, each followed by
    2x2/2 pooling, then one dense layer of 64 units.
    """
    if widths is None:
        widths = (8, 16, 32, 32, 32, 32, 32, 32)[:depth]
    if len(widths) != depth:
        raise ConfigError(f"expected {depth} widths, got {len(widths)}")
    if pool_strides is None:
        pool_strides = _desk_pool_schedule(depth)
    layers = [
        LayerSpec("conv", w, kernel=5, pool_stride=p, normalize=normalize, dropout=dropout)
        for w, p in zip(widths, pool_strides)
    ]
    layers.append(LayerSpec("dense", dense, dropout=dropout))
    return NetworkConfig(input_shape, tuple(layers), max_len, alphabet_size, name=name or f"desk-{depth}")


def _desk_pool_schedule(depth: int) -> tuple[int, ...]:
    # three downsamplings in total, spread as late as the depth allows
    if depth <= 3:
        return (2,) * depth
    strides = [1] * depth
    for i in np.linspace(0, depth - 1, 3).round().astype(int):
        strides[i] = 2
    return tuple(strides)


PRESETS = {
    "svhn-paper": svhn_paper_config,
    "desk": desk_config,
    "desk-1": lambda **kw: desk_config(1, **kw),
    "desk-3": lambda **kw: desk_config(3, **kw),
    "desk-5": lambda **kw: desk_config(5, **kw),
}


def preset(name: str, **overrides) -> NetworkConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**overrides)


# --------------------------------------------------------------------------
# model


@dataclass
class ForwardCache:
    steps: list
    feature: np.ndarray
    version: int
    squeezed: bool


@dataclass
class HeadOutput:
    """Raw logits and log-probabilities for a batch."""

    length_logits: np.ndarray  # (B, N+2)
    char_logits: np.ndarray  # (B, N, K)
    cache: ForwardCache | None = None

    @property
    def length_logp(self) -> np.ndarray:
        return nn.log_softmax(self.length_logits, axis=-1)

    @property
    def char_logp(self) -> np.ndarray:
        return nn.log_softmax(self.char_logits, axis=-1)

    def distributions(self) -> list[SequenceDistribution]:
        return [SequenceDistribution(l, c) for l, c in zip(self.length_logp, self.char_logp)]


@dataclass
class Model:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    version: int = field(default=0, compare=False)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def bump(self) -> None:
        """Mark parameters as modified; invalidates forward caches."""
        self.version += 1

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        images: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        dropout: bool = True,
        keep_cache: bool | None = None,
    ) -> HeadOutput:
        """Run a batch ``(B, H, W, C)`` (or one image) through the network.

        Dropout applies only when ``train`` and ``dropout`` are both true.
        The cache needed by :meth:`backward` is kept in train mode unless
        ``keep_cache`` says otherwise.
        """
        cfg = self.config
        x = np.asarray(images)
        squeezed = x.ndim == 3
        if squeezed:
            x = x[None]
        if x.shape[1:] != cfg.input_shape:
            raise nn.ShapeError(f"image shape {x.shape[1:]} does not match the configured input {cfg.input_shape}")
        keep = train if keep_cache is None else keep_cache
        use_dropout = train and dropout
        steps = []
        for i, spec in enumerate(cfg.layers):
            w, b = self.params[f"layer{i}.w"], self.params[f"layer{i}.b"]
            layer_steps = []
            if spec.kind == "dense" and x.ndim == 4:
                layer_steps.append(("flatten", x.shape))
                x = x.reshape(len(x), -1)
            if spec.kind == "conv":
                x, c = nn.conv2d_forward(x, w, b, spec.stride)
            elif spec.kind == "locally_connected":
                x, c = nn.locally_connected_forward(x, w, b)
            else:
                x, c = nn.fully_connected_forward(x, w, b)
            layer_steps.append((spec.kind, c))
            if spec.activation == "maxout":
                x, c = nn.maxout_forward(x, spec.pieces)
                layer_steps.append(("maxout", c))
            elif spec.activation == "relu":
                x, c = nn.rectifier_forward(x)
                layer_steps.append(("relu", c))
            if spec.pool_stride:
                x, c = nn.max_pool2d_forward(x, spec.pool_stride)
                layer_steps.append(("pool", c))
            if spec.normalize:
                x, c = nn.subtractive_normalize_forward(x)
                layer_steps.append(("subnorm", c))
            if spec.dropout and use_dropout:
                x, c = nn.dropout_forward(x, spec.dropout, True, rng)
                layer_steps.append(("dropout", c))
            if keep:
                steps.append((i, layer_steps))
        if x.ndim == 4:
            if keep:
                steps.append((None, [("flatten", x.shape)]))
            x = x.reshape(len(x), -1)
        feature = x
        length_logits = feature @ self.params["length.w"] + self.params["length.b"]
        char_logits = np.einsum("bf,nfk->bnk", feature, self.params["chars.w"]) + self.params["chars.b"]
        cache = ForwardCache(steps, feature, self.version, squeezed) if keep else None
        if squeezed:
            return HeadOutput(length_logits[0], char_logits[0], cache)
        return HeadOutput(length_logits, char_logits, cache)

    def distribution(self, image: np.ndarray) -> SequenceDistribution:
        out = self.forward(image)
        return SequenceDistribution(out.length_logp, out.char_logp)

    # -- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache | None, d_length_logits, d_char_logits) -> dict[str, np.ndarray]:
        """Gradients of every parameter given the gradients of the head logits."""
        if cache is None:
            raise StaleCacheError("no forward cache; run forward in train mode first")
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the latest parameter update")
        d_len = np.asarray(d_length_logits)
        d_chr = np.asarray(d_char_logits)
        if cache.squeezed:
            d_len, d_chr = d_len[None], d_chr[None]
        feat = cache.feature
        grads: dict[str, np.ndarray] = {
            "length.w": feat.T @ d_len,
            "length.b": d_len.sum(axis=0),
            "chars.w": np.einsum("bf,bnk->nfk", feat, d_chr),
            "chars.b": d_chr.sum(axis=0),
        }
        dx = d_len @ self.params["length.w"].T + np.einsum("bnk,nfk->bf", d_chr, self.params["chars.w"])
        for i, layer_steps in reversed(cache.steps):
            for op, c in reversed(layer_steps):
                if op == "flatten":
                    dx = dx.reshape(c)
                elif op == "dropout":
                    dx = nn.dropout_backward(dx, c)
                elif op == "subnorm":
                    dx = nn.subtractive_normalize_backward(dx, c)
                elif op == "pool":
                    dx = nn.max_pool2d_backward(dx, c)
                elif op == "relu":
                    dx = nn.rectifier_backward(dx, c)
                elif op == "maxout":
                    dx = nn.maxout_backward(dx, c)
                else:
                    backward = {
                        "conv": nn.conv2d_backward,
                        "locally_connected": nn.locally_connected_backward,
                        "dense": nn.fully_connected_backward,
                    }[op]
                    dx, dw, db = backward(dx, c)
                    grads[f"layer{i}.w"] = dw
                    grads[f"layer{i}.b"] = db
        return grads


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes = config.shapes()
    prev: tuple[int, ...] = config.input_shape
    out: dict[str, tuple[int, ...]] = {}
    for i, (spec, shape) in enumerate(zip(config.layers, shapes)):
        units = spec.width * (spec.pieces if spec.activation == "maxout" else 1)
        k = spec.kernel
        if spec.kind == "conv":
            out[f"layer{i}.w"] = (k, k, prev[2], units)
            out[f"layer{i}.b"] = (units,)
        elif spec.kind == "locally_connected":
            out[f"layer{i}.w"] = (prev[0], prev[1], k, k, prev[2], units)
            out[f"layer{i}.b"] = (prev[0], prev[1], units)
        else:
            out[f"layer{i}.w"] = (int(np.prod(prev)), units)
            out[f"layer{i}.b"] = (units,)
        prev = shape
    feat = int(np.prod(prev))
    n, k = config.max_len, config.alphabet_size
    out["length.w"] = (feat, n + 2)
    out["length.b"] = (n + 2,)
    out["chars.w"] = (n, feat, k)
    out["chars.b"] = (n, k)
    return out


def count_parameters(config: NetworkConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(config).values()))


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh model with fan-in scaled normal weights (He scaling for hidden
    layers, ``1/sqrt(fan_in)`` for the heads) and zero biases."""
    config.shapes()  # validate the chain
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if name.startswith("layer"):
            fan_in = math.prod(shape[-4:-1]) if len(shape) == 6 else math.prod(shape[:-1])
            std = math.sqrt(2.0 / fan_in)
        else:
            fan_in = shape[-2]
            std = 1.0 / math.sqrt(fan_in)
        params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return Model(config, params)


# --------------------------------------------------------------------------
# checkpoints

_CONFIG_KEY = "__config__"
_META_KEY = "__meta__"
_STATE_PREFIX = "state/"


def save_checkpoint(path, model: Model, meta: dict[str, Any] | None = None, state: dict[str, np.ndarray] | None = None) -> Path:
    """Write config, parameters and optional trainer state to an ``.npz``.

    Arrays are stored uncompressed with their dtypes, so a round trip is
    bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays[_CONFIG_KEY] = np.array(json.dumps(model.config.to_dict()))
    arrays[_META_KEY] = np.array(json.dumps(meta or {}))
    for k, v in (state or {}).items():
        arrays[_STATE_PREFIX + k] = v
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[Model, dict[str, Any], dict[str, np.ndarray]]:
    """Returns ``(model, meta, state)``."""
    with np.load(path, allow_pickle=False) as data:
        config = NetworkConfig.from_dict(json.loads(str(data[_CONFIG_KEY])))
        meta = json.loads(str(data[_META_KEY]))
        params = {k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")}
        state = {k[len(_STATE_PREFIX) :]: data[k] for k in data.files if k.startswith(_STATE_PREFIX)}
    expected = parameter_shapes(config)
    order = {k: params[k] for k in expected}
    for k, shape in expected.items():
        if order[k].shape != shape:
            raise ConfigError(f"checkpoint parameter {k} has shape {order[k].shape}, expected {shape}")
    return Model(config, order), meta, state
