"""Network assembly and execution.

Defines the two fixed architectures (the frozen VGG16-prefix feature
extractor and the compact six-class classifier head), a named parameter
store with per-parameter trainable flags, tape-based forward/backward
execution, weight-container load/save, and per-channel feature-map dumps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .kernels import (
    BatchNormParams,
    ConvParams,
    NumericError,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dropout_backward,
    dropout_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
)

CLASS_COUNT = 6

LAYER_KINDS = ("conv", "relu", "maxpool", "batchnorm", "dropout", "global_avg_pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    keep_prob: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def padding(self) -> int:
        # Shape-preserving padding for the odd kernels used here.
        return (self.kernel_size - 1) // 2


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W), batch-free

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique within a network")
        c = self.input_shape[0]
        for l in self.layers:
            if l.kind == "conv":
                if l.in_channels != c:
                    raise ValueError(
                        f"layer {l.name}: expects {l.in_channels} input channels, chain has {c}"
                    )
                c = l.out_channels
            elif l.kind == "batchnorm" and l.in_channels != c:
                raise ValueError(
                    f"layer {l.name}: normalizes {l.in_channels} channels, chain has {c}"
                )

    @property
    def output_channels(self) -> int:
        c = self.input_shape[0]
        for l in self.layers:
            if l.kind == "conv":
                c = l.out_channels
        return c

    def param_shapes(self) -> dict:
        """Ordered name -> shape table of every stored tensor."""
        shapes = {}
        for l in self.layers:
            if l.kind == "conv":
                k = l.kernel_size
                shapes[f"{l.name}.weight"] = (l.out_channels, l.in_channels, k, k)
                shapes[f"{l.name}.bias"] = (l.out_channels,)
            elif l.kind == "batchnorm":
                for part in ("gamma", "beta", "running_mean", "running_var"):
                    shapes[f"{l.name}.{part}"] = (l.in_channels,)
        return shapes


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool


class ParamStore:
    """Named parameters with gradient slots and per-parameter trainable flags."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        self._params[name] = Param(value, np.zeros_like(value), trainable)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def merge(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore()
        for name, p in list(self.items()) + list(other.items()):
            out.add(name, p.value, p.trainable)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self.items():
            out.add(name, p.value.copy(), p.trainable)
            out[name].grad[...] = p.grad
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, p in self.items():
            out.add(name, p.value.astype(dtype), p.trainable)
        return out

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(
            p.value.size
            for name, p in self.items()
            if (p.trainable or not trainable_only) and not name.endswith(("running_mean", "running_var"))
        )


def build_feature_extractor() -> NetworkSpec:
    """VGG16 prefix through the third pooling layer: 7 convolutions, 3 pools."""
    layers = []
    widths = {1: (3, 64, 64), 2: (64, 128, 128), 3: (128, 256, 256, 256)}
    for block, chain in widths.items():
        for i in range(len(chain) - 1):
            name = f"conv{block}_{i + 1}"
            layers.append(LayerSpec("conv", name, chain[i], chain[i + 1], 3))
            layers.append(LayerSpec("relu", f"relu{block}_{i + 1}"))
        layers.append(LayerSpec("maxpool", f"pool{block}"))
    return NetworkSpec(tuple(layers), (3, 224, 224))


def build_classifier() -> NetworkSpec:
    """Batch norm on the incoming feature maps, two dropout-regularized conv
    stages, a 1x1 projection to 6 channels and global average pooling."""
    layers = (
        LayerSpec("batchnorm", "cls.bn", in_channels=256),
        LayerSpec("conv", "cls.conv1", 256, 128, 3),
        LayerSpec("relu", "cls.relu1"),
        LayerSpec("dropout", "cls.drop1", keep_prob=0.6),
        LayerSpec("conv", "cls.conv2", 128, 64, 3),
        LayerSpec("relu", "cls.relu2"),
        LayerSpec("dropout", "cls.drop2", keep_prob=0.8),
        LayerSpec("conv", "cls.conv3", 64, CLASS_COUNT, 1),
        LayerSpec("global_avg_pool", "cls.gap"),
    )
    return NetworkSpec(layers, (256, 28, 28))


def build_full_network() -> NetworkSpec:
    """Extractor plus classifier, for training without transfer."""
    ext, cls = build_feature_extractor(), build_classifier()
    return NetworkSpec(ext.layers + cls.layers, ext.input_shape)


def _conv_params(params: ParamStore, layer: LayerSpec) -> ConvParams:
    return ConvParams(
        params[f"{layer.name}.weight"].value,
        params[f"{layer.name}.bias"].value,
        stride=1,
        padding=layer.padding,
    )


def _bn_params(params: ParamStore, layer: LayerSpec) -> BatchNormParams:
    return BatchNormParams(
        params[f"{layer.name}.gamma"].value,
        params[f"{layer.name}.beta"].value,
        params[f"{layer.name}.running_mean"].value,
        params[f"{layer.name}.running_var"].value,
    )


@dataclass
class Tape:
    """Per-layer activation record retained by a forward pass for backward."""

    mode: str
    entries: list = field(default_factory=list)


def forward(spec: NetworkSpec, params: ParamStore, x: np.ndarray, mode: str, rng=None):
    """Applies the layers in order; returns (output, tape).

    The batch dimension is free, and spatial extents may differ from the
    declared input shape as long as every pooling stage divides evenly;
    the channel count must match.
    """
    if x.ndim != 4:
        raise ShapeError(f"forward: expected rank-4 NCHW input, got {x.shape}")
    if x.shape[1] != spec.input_shape[0]:
        raise ShapeError(
            f"forward: input has {x.shape[1]} channels, network expects {spec.input_shape[0]}"
        )
    tape = Tape(mode=mode)
    y = x
    for layer in spec.layers:
        try:
            if layer.kind == "conv":
                saved = {"x": y}
                y = conv2d_forward(y, _conv_params(params, layer))
            elif layer.kind == "relu":
                saved = {"x": y}
                y = relu_forward(y)
            elif layer.kind == "maxpool":
                saved = {"shape": y.shape}
                y, cache = maxpool2d_forward(y)
                saved["cache"] = cache
            elif layer.kind == "batchnorm":
                saved = {"x": y}
                y = batchnorm_forward(y, _bn_params(params, layer), mode)
            elif layer.kind == "dropout":
                y, mask = dropout_forward(y, layer.keep_prob, mode, rng)
                saved = {"mask": mask}
            else:  # global_avg_pool
                saved = {"hw": (y.shape[2], y.shape[3])}
                y = global_avg_pool_forward(y)
        except (ShapeError, ValueError, NumericError) as e:
            raise type(e)(f"layer {layer.name!r}: {e}") from e
        tape.entries.append((layer, saved))
    return y, tape


def _layer_is_trainable(params: ParamStore, layer: LayerSpec) -> bool:
    if layer.kind == "conv":
        return params[f"{layer.name}.weight"].trainable
    if layer.kind == "batchnorm":
        return params[f"{layer.name}.gamma"].trainable
    return False


def backward(spec: NetworkSpec, params: ParamStore, tape: Tape, grad_output: np.ndarray) -> None:
    """Accumulates analytic gradients into the trainable parameters' slots.

    The input gradient at each layer is only computed while some trainable
    layer remains upstream, so a frozen prefix costs nothing.
    """
    if tape.mode != "train":
        raise ValueError("backward requires a tape from a train-mode forward")
    if len(tape.entries) != len(spec.layers) or any(
        e[0] != l for e, l in zip(tape.entries, spec.layers)
    ):
        raise ValueError("tape does not match the network it is applied to")
    trainable_idx = [
        i for i, l in enumerate(spec.layers) if _layer_is_trainable(params, l)
    ]
    if not trainable_idx:
        return
    lowest = trainable_idx[0]
    g = grad_output
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, saved = tape.entries[i]
        need_gx = i > lowest
        if layer.kind == "conv":
            trainable = params[f"{layer.name}.weight"].trainable
            if not trainable and not need_gx:
                break
            gx, gw, gb = conv2d_backward(saved["x"], _conv_params(params, layer), g,
                                         need_grad_x=need_gx)
            if trainable:
                params[f"{layer.name}.weight"].grad += gw
                params[f"{layer.name}.bias"].grad += gb
            g = gx
        elif layer.kind == "relu":
            g = relu_backward(saved["x"], g)
        elif layer.kind == "maxpool":
            g = maxpool2d_backward(g, saved["cache"], saved["shape"])
        elif layer.kind == "batchnorm":
            trainable = params[f"{layer.name}.gamma"].trainable
            if not trainable and not need_gx:
                break
            gx, gg, gb = batchnorm_backward(saved["x"], _bn_params(params, layer), g)
            if trainable:
                params[f"{layer.name}.gamma"].grad += gg
                params[f"{layer.name}.beta"].grad += gb
            g = gx
        elif layer.kind == "dropout":
            g = dropout_backward(saved["mask"], layer.keep_prob, g)
        else:  # global_avg_pool
            g = global_avg_pool_backward(g, *saved["hw"])
        if i == lowest:
            break


def save_weights(params: ParamStore, path) -> None:
    container.write_tensors(path, {name: p.value for name, p in params.items()})


def load_weights(path, spec: NetworkSpec, trainable: bool = True) -> ParamStore:
    """Loads a container and validates names and shapes against `spec`.

    Running statistics are never trainable; everything else follows the
    `trainable` flag (False for a frozen feature extractor).
    """
    tensors = container.read_tensors(path)
    expected = spec.param_shapes()
    container.validate_names_and_shapes(tensors, expected, path=str(path))
    store = ParamStore()
    for name in expected:
        value = np.ascontiguousarray(tensors[name], dtype=np.float32)
        frozen = name.endswith(("running_mean", "running_var"))
        store.add(name, value, trainable and not frozen)
    return store


def dump_feature_maps(params: ParamStore, image: np.ndarray, after_pool: int, out_dir,
                      raw_path=None) -> list:
    """Writes one 8-bit grayscale PNG per channel of the activation after the
    requested pooling stage (min-max normalized per channel; a constant
    channel maps to black). Optionally also stores the raw float activation
    tensor in a container at `raw_path`. Returns the written image paths."""
    from PIL import Image

    if after_pool not in (1, 2, 3):
        raise ValueError(f"after_pool must be 1, 2 or 3, got {after_pool}")
    spec = build_feature_extractor()
    stop = f"pool{after_pool}"
    x = image[None] if image.ndim == 3 else image
    y = x.astype(np.float32, copy=False)
    for layer in spec.layers:
        if layer.kind == "conv":
            y = conv2d_forward(y, _conv_params(params, layer))
        elif layer.kind == "relu":
            y = relu_forward(y)
        else:
            y, _ = maxpool2d_forward(y)
        if layer.name == stop:
            break
    maps = y[0]
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    if raw_path is not None:
        container.write_tensors(raw_path, {stop: maps})
    paths = []
    for ch in range(maps.shape[0]):
        m = maps[ch]
        lo, hi = float(m.min()), float(m.max())
        if hi > lo:
            img = np.round((m - lo) * (255.0 / (hi - lo))).astype(np.uint8)
        else:
            img = np.zeros(m.shape, np.uint8)
        path = out_dir / f"{after_pool}_{ch}.png"
        try:
            Image.fromarray(img, mode="L").save(path)
        except OSError as e:
            raise OSError(f"failed to write {path}: {e}") from e
        paths.append(path)
    return paths
