"""Quantizable layers and the two toy model families.

Every conv/linear weight is fake-quantized per tensor; when an activation
bit-width is given, every conv/linear input is quantized too. Batch-norm inputs
are never quantized. The first and last weight layers always use 8 bits.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .normstats import NormStats, bn_forward_eval, bn_forward_train
from .oscillation import OscillationTracker
from .quant import EstimatorKind, QuantizerState, fake_quantize, mse_range_init, quantize_forward

logger = logging.getLogger(__name__)

__all__ = [
    "LayerSpec",
    "Ctx",
    "ActQuantizer",
    "WeightQuantizer",
    "QConv2d",
    "QLinear",
    "BatchNorm2d",
    "Activation",
    "InvertedResidual",
    "BasicBlock",
    "GlobalPool",
    "Model",
    "build_model",
    "toy_dwnet_spec",
    "toy_resnet_spec",
    "build_named_model",
    "fanin_per_output",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

EDGE_BITS = 8
WEIGHT_KINDS = ("conv", "depthwise-conv", "pointwise-conv", "linear")
LAYER_KINDS = WEIGHT_KINDS + ("bn", "relu", "relu6", "residual-block", "inverted-residual", "pool")


@dataclass
class LayerSpec:
    kind: str
    in_ch: int | None = None
    out_ch: int | None = None
    kernel: int = 1
    stride: int = 1
    expand: int = 6
    w_bits: int | None = None
    a_bits: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class Ctx:
    """Per-forward switches.

    ``bn`` is "train" (batch stats, update EMA), "batch" (batch stats, no update)
    or "eval" (running stats). ``quantize=False`` bypasses every quantizer.
    """

    bn: str = "train"
    quantize: bool = True
    capture_bn: list | None = None
    capture_act: list | None = None


# quantizers

class ActQuantizer:
    def __init__(self, bits: int):
        self.bits = bits
        self.q = QuantizerState.for_bits(bits, signed=False)
        self.scale = Tensor([1.0], requires_grad=True)
        self.initialized = False

    def calibrate(self, x: np.ndarray) -> None:
        signed = bool(np.min(x) < 0)
        s = mse_range_init(x, self.bits, signed=signed)
        self.q = QuantizerState.for_bits(self.bits, signed=signed, scale=s)
        self.scale.data = np.array([s])
        self.initialized = True

    def sync(self) -> None:
        s = float(self.scale.data[0])
        if s != self.q.scale:
            self.q = self.q.with_scale(s)

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        if ctx.capture_act is not None:
            ctx.capture_act.append((self, x.data))
        if not ctx.quantize or not self.initialized:
            return x
        return fake_quantize(x, self.scale, self.q)


class WeightQuantizer:
    def __init__(self, bits: int, estimator: EstimatorKind):
        self.bits = bits
        self.q = QuantizerState.for_bits(bits, signed=True, estimator=estimator)
        self.scale = Tensor([1.0], requires_grad=True)
        self.tracker: OscillationTracker | None = None
        self.initialized = False

    def calibrate(self, w: np.ndarray) -> None:
        s = mse_range_init(w, self.bits, signed=True)
        self.set_scale(s)
        self.initialized = True

    def set_scale(self, s: float) -> None:
        self.scale.data = np.array([float(s)])
        self.q = self.q.with_scale(float(s))

    def sync(self) -> None:
        """Pull the learned scale tensor back into the quantizer state."""
        s = float(self.scale.data[0])
        if s != self.q.scale:
            self.q = self.q.with_scale(s)

    def integers(self, w: np.ndarray) -> np.ndarray:
        _, w_int = quantize_forward(w, self.q)
        t = self.tracker
        if t is not None and t.frozen.any():
            w_int = np.where(t.frozen, t.frozen_int, w_int)
        return w_int

    def __call__(self, w: Tensor, ctx: Ctx) -> Tensor:
        if not ctx.quantize or not self.initialized:
            return w
        t = self.tracker
        if t is not None:
            return fake_quantize(w, self.scale, self.q, t.frozen, t.frozen_int)
        return fake_quantize(w, self.scale, self.q)


# layers

def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class QConv2d:
    has_weight = True

    def __init__(self, in_ch, out_ch, kernel, stride, groups, w_bits, a_bits, estimator, rng, kind="conv"):
        self.kind = kind
        self.in_ch, self.out_ch, self.kernel, self.stride, self.groups = in_ch, out_ch, kernel, stride, groups
        self.padding = kernel // 2
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Tensor(_kaiming_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in), requires_grad=True)
        self.wq = WeightQuantizer(w_bits, estimator)
        self.aq = ActQuantizer(a_bits) if a_bits is not None else None

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        if self.aq is not None:
            x = self.aq(x, ctx)
        return ad.conv2d(x, self.wq(self.weight, ctx), self.stride, self.padding, self.groups)


class QLinear:
    has_weight = True
    kind = "linear"

    def __init__(self, in_f, out_f, w_bits, a_bits, estimator, rng):
        self.in_ch, self.out_ch = in_f, out_f
        self.weight = Tensor(_kaiming_uniform(rng, (in_f, out_f), in_f), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)
        self.wq = WeightQuantizer(w_bits, estimator)
        self.aq = ActQuantizer(a_bits) if a_bits is not None else None

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        if self.aq is not None:
            x = self.aq(x, ctx)
        return ad.matmul(x, self.wq(self.weight, ctx)) + self.bias


class BatchNorm2d:
    has_weight = False
    kind = "bn"

    def __init__(self, channels: int, momentum: float = 0.1):
        self.stats = NormStats.init(channels, momentum)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        if ctx.capture_bn is not None:
            ctx.capture_bn.append(x.data)
        if ctx.bn == "eval":
            return bn_forward_eval(x, self.stats, self.gamma, self.beta)
        return bn_forward_train(x, self.stats, self.gamma, self.beta, update=ctx.bn == "train")


class Activation:
    has_weight = False

    def __init__(self, kind: str):
        self.kind = kind
        self._fn = ad.relu6 if kind == "relu6" else ad.relu

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        return self._fn(x)


class GlobalPool:
    has_weight = False
    kind = "pool"

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ad.global_avg_pool(x)


class _Sequence:
    has_weight = False

    def __init__(self, layers):
        self.layers = layers

    def run(self, x: Tensor, ctx: Ctx) -> Tensor:
        for layer in self.layers:
            x = layer(x, ctx)
        return x


class InvertedResidual(_Sequence):
    """Point-wise expand, depth-wise 3x3, point-wise project; skip when shapes match."""

    kind = "inverted-residual"

    def __init__(self, in_ch, out_ch, expand, stride, bits, a_bits, estimator, rng, bn_momentum=0.1):
        hidden = in_ch * expand
        b1, b2, b3 = bits
        super().__init__([
            QConv2d(in_ch, hidden, 1, 1, 1, b1, a_bits, estimator, rng, kind="pointwise-conv"),
            BatchNorm2d(hidden, bn_momentum),
            Activation("relu6"),
            QConv2d(hidden, hidden, 3, stride, hidden, b2, a_bits, estimator, rng, kind="depthwise-conv"),
            BatchNorm2d(hidden, bn_momentum),
            Activation("relu6"),
            QConv2d(hidden, out_ch, 1, 1, 1, b3, a_bits, estimator, rng, kind="pointwise-conv"),
            BatchNorm2d(out_ch, bn_momentum),
        ])
        self.use_skip = stride == 1 and in_ch == out_ch

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        y = self.run(x, ctx)
        return y + x if self.use_skip else y


class BasicBlock(_Sequence):
    """Two 3x3 convs with BN and a (projected) identity shortcut."""

    kind = "residual-block"

    def __init__(self, in_ch, out_ch, stride, bits, a_bits, estimator, rng, bn_momentum=0.1):
        b1, b2, b3 = bits
        super().__init__([
            QConv2d(in_ch, out_ch, 3, stride, 1, b1, a_bits, estimator, rng),
            BatchNorm2d(out_ch, bn_momentum),
            Activation("relu"),
            QConv2d(out_ch, out_ch, 3, 1, 1, b2, a_bits, estimator, rng),
            BatchNorm2d(out_ch, bn_momentum),
        ])
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = _Sequence([
                QConv2d(in_ch, out_ch, 1, stride, 1, b3, a_bits, estimator, rng, kind="pointwise-conv"),
                BatchNorm2d(out_ch, bn_momentum),
            ])

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        y = self.run(x, ctx)
        skip = self.shortcut.run(x, ctx) if self.shortcut is not None else x
        return ad.relu(y + skip)


def _walk(layer, prefix: str) -> Iterator[tuple[str, object]]:
    yield prefix, layer
    if isinstance(layer, _Sequence):
        for i, child in enumerate(layer.layers):
            yield from _walk(child, f"{prefix}.{i}")
        if getattr(layer, "shortcut", None) is not None:
            for i, child in enumerate(layer.shortcut.layers):
                yield from _walk(child, f"{prefix}.shortcut.{i}")


class Model:
    def __init__(self, layers: list, specs: list[LayerSpec], seed: int):
        self.layers = layers
        self.specs = specs
        self.seed = seed

    def __call__(self, x, ctx: Ctx | None = None) -> Tensor:
        ctx = ctx or Ctx()
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            h = layer(h, ctx)
        return h

    def modules(self) -> Iterator[tuple[str, object]]:
        for i, layer in enumerate(self.layers):
            yield from _walk(layer, str(i))

    def weight_layers(self) -> list[tuple[str, QConv2d | QLinear]]:
        return [(n, m) for n, m in self.modules() if getattr(m, "has_weight", False)]

    def weight_quantizers(self) -> list[tuple[str, WeightQuantizer, Tensor]]:
        return [(n, m.wq, m.weight) for n, m in self.weight_layers()]

    def act_quantizers(self) -> list[tuple[str, ActQuantizer]]:
        return [(n, m.aq) for n, m in self.weight_layers() if m.aq is not None]

    def batchnorms(self) -> list[BatchNorm2d]:
        return [m for _, m in self.modules() if isinstance(m, BatchNorm2d)]

    def named_batchnorms(self) -> list[tuple[str, BatchNorm2d]]:
        return [(n, m) for n, m in self.modules() if isinstance(m, BatchNorm2d)]

    def parameters(self, include_scales: bool = True) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, m in self.modules():
            if getattr(m, "has_weight", False):
                params[f"{name}.weight"] = m.weight
                if isinstance(m, QLinear):
                    params[f"{name}.bias"] = m.bias
                if include_scales:
                    params[f"{name}.wq.scale"] = m.wq.scale
                    if m.aq is not None:
                        params[f"{name}.aq.scale"] = m.aq.scale
            elif isinstance(m, BatchNorm2d):
                params[f"{name}.gamma"] = m.gamma
                params[f"{name}.beta"] = m.beta
        return params

    def collect_bn_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        ctx = Ctx(bn="batch", capture_bn=[])
        self(x, ctx)
        return ctx.capture_bn

    def init_quantizers(self, calib_x: np.ndarray | None = None) -> None:
        """MSE range init of every weight quantizer and, given data, every activation quantizer."""
        for _, wq, w in self.weight_quantizers():
            wq.calibrate(w.data)
        if calib_x is not None and self.act_quantizers():
            ctx = Ctx(bn="batch", quantize=False, capture_act=[])
            self(calib_x, ctx)
            for aq, xa in ctx.capture_act:
                aq.calibrate(xa)

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, m in self.modules():
            if getattr(m, "has_weight", False):
                out[f"{name}.weight"] = m.weight.data
                if isinstance(m, QLinear):
                    out[f"{name}.bias"] = m.bias.data
                out[f"{name}.wq.scale"] = m.wq.scale.data
                out[f"{name}.wq.initialized"] = np.array([float(m.wq.initialized)])
                if m.wq.tracker is not None:
                    for key, arr in m.wq.tracker.state_arrays().items():
                        out[f"{name}.wq.tracker.{key}"] = arr
                if m.aq is not None:
                    out[f"{name}.aq.scale"] = m.aq.scale.data
                    out[f"{name}.aq.signed"] = np.array([float(m.aq.q.signed)])
                    out[f"{name}.aq.initialized"] = np.array([float(m.aq.initialized)])
            elif isinstance(m, BatchNorm2d):
                out[f"{name}.gamma"] = m.gamma.data
                out[f"{name}.beta"] = m.beta.data
                out[f"{name}.running_mean"] = m.stats.mean
                out[f"{name}.running_var"] = m.stats.var
        return {k: np.array(v, dtype=np.float64) for k, v in out.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        def take(key, shape=None):
            if key not in state:
                raise CheckpointError(f"checkpoint is missing tensor {key!r}")
            arr = np.array(state[key], dtype=np.float64)
            if shape is not None and arr.shape != shape:
                raise CheckpointError(f"tensor {key!r} has shape {arr.shape}, model expects {shape}")
            return arr

        for name, m in self.modules():
            if getattr(m, "has_weight", False):
                m.weight.data = take(f"{name}.weight", m.weight.shape)
                if isinstance(m, QLinear):
                    m.bias.data = take(f"{name}.bias", m.bias.shape)
                m.wq.initialized = bool(take(f"{name}.wq.initialized")[0])
                m.wq.set_scale(take(f"{name}.wq.scale")[0])
                prefix = f"{name}.wq.tracker."
                keys = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
                m.wq.tracker = OscillationTracker.from_arrays(keys) if keys else None
                if m.aq is not None:
                    s = take(f"{name}.aq.scale")[0]
                    m.aq.q = QuantizerState.for_bits(m.aq.bits, signed=bool(take(f"{name}.aq.signed")[0]), scale=s)
                    m.aq.scale.data = np.array([s])
                    m.aq.initialized = bool(take(f"{name}.aq.initialized")[0])
            elif isinstance(m, BatchNorm2d):
                m.gamma.data = take(f"{name}.gamma", m.gamma.shape)
                m.beta.data = take(f"{name}.beta", m.beta.shape)
                m.stats.mean = take(f"{name}.running_mean", m.stats.mean.shape)
                m.stats.var = take(f"{name}.running_var", m.stats.var.shape)


def fanin_per_output(layer) -> int:
    """Number of weights accumulated into one output channel."""
    if isinstance(layer, QConv2d):
        return (layer.in_ch // layer.groups) * layer.kernel * layer.kernel
    if isinstance(layer, QLinear):
        return layer.in_ch
    raise TypeError(f"{type(layer).__name__} has no weights")


def build_model(
    specs: list[LayerSpec],
    w_bits: int = 8,
    a_bits: int | None = None,
    estimator: EstimatorKind | None = None,
    seed: int = 0,
    bn_momentum: float = 0.1,
) -> Model:
    """Instantiate ``specs`` with quantizers attached; initialization is seeded."""
    estimator = estimator or EstimatorKind()
    rng = np.random.default_rng(seed)
    specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]

    # bit-width of every weight tensor in build order, then force the edges to 8
    counts = {"inverted-residual": 3, "residual-block": 3}
    slots: list[tuple[int, int]] = []
    for i, s in enumerate(specs):
        if s.kind in WEIGHT_KINDS:
            slots.append((i, 0))
        elif s.kind in counts:
            n = counts[s.kind]
            if s.kind == "residual-block" and s.stride == 1 and s.in_ch == s.out_ch:
                n = 2
            slots.extend((i, j) for j in range(n))
    bits = {slot: (specs[slot[0]].w_bits or w_bits) for slot in slots}
    if slots:
        for edge in {slots[0], slots[-1]}:
            if bits[edge] != EDGE_BITS:
                if specs[edge[0]].w_bits is not None:
                    logger.warning(
                        "layer %d requested %d-bit weights; first/last layers are kept at %d bits",
                        edge[0], bits[edge], EDGE_BITS,
                    )
                bits[edge] = EDGE_BITS

    layers: list = []
    channels: int | None = None
    flat: bool | None = None  # unknown until the first layer fixes it
    for i, s in enumerate(specs):
        def need(value, what):
            if value is None:
                raise ValueError(f"layer {i} ({s.kind}): missing {what}")
            return value

        if s.kind in WEIGHT_KINDS or s.kind in counts:
            cin = need(s.in_ch, "in_ch")
            if channels is not None and cin != channels:
                raise ValueError(f"layer {i} ({s.kind}): expects {cin} input channels, previous layer produces {channels}")
            if s.kind == "linear":
                if flat is False:
                    raise ValueError(f"layer {i} (linear): needs a pool layer before it")
                flat = True
            elif flat:
                raise ValueError(f"layer {i} ({s.kind}): spatial layer after pooling")
            else:
                flat = False
        if s.kind == "conv":
            layers.append(QConv2d(s.in_ch, need(s.out_ch, "out_ch"), s.kernel, s.stride, 1, bits[(i, 0)], s.a_bits or a_bits, estimator, rng))
        elif s.kind == "pointwise-conv":
            layers.append(QConv2d(s.in_ch, need(s.out_ch, "out_ch"), 1, s.stride, 1, bits[(i, 0)], s.a_bits or a_bits, estimator, rng, kind="pointwise-conv"))
        elif s.kind == "depthwise-conv":
            if s.out_ch not in (None, s.in_ch):
                raise ValueError(f"layer {i} (depthwise-conv): out_ch must equal in_ch")
            layers.append(QConv2d(s.in_ch, s.in_ch, s.kernel, s.stride, s.in_ch, bits[(i, 0)], s.a_bits or a_bits, estimator, rng, kind="depthwise-conv"))
        elif s.kind == "linear":
            layers.append(QLinear(s.in_ch, need(s.out_ch, "out_ch"), bits[(i, 0)], s.a_bits or a_bits, estimator, rng))
        elif s.kind == "inverted-residual":
            b = tuple(bits[(i, j)] for j in range(3))
            layers.append(InvertedResidual(s.in_ch, need(s.out_ch, "out_ch"), s.expand, s.stride, b, s.a_bits or a_bits, estimator, rng, bn_momentum))
        elif s.kind == "residual-block":
            b = tuple(bits.get((i, j), w_bits) for j in range(3))
            layers.append(BasicBlock(s.in_ch, need(s.out_ch, "out_ch"), s.stride, b, s.a_bits or a_bits, estimator, rng, bn_momentum))
        elif s.kind == "bn":
            if channels is None:
                raise ValueError(f"layer {i} (bn): channel count unknown")
            layers.append(BatchNorm2d(s.in_ch or channels, bn_momentum))
            if s.in_ch not in (None, channels):
                raise ValueError(f"layer {i} (bn): expects {s.in_ch} channels, previous layer produces {channels}")
        elif s.kind in ("relu", "relu6"):
            layers.append(Activation(s.kind))
        elif s.kind == "pool":
            layers.append(GlobalPool())
            flat = True
        if s.kind in WEIGHT_KINDS or s.kind in counts:
            channels = s.out_ch if s.out_ch is not None else s.in_ch
    return Model(layers, specs, seed)


def toy_dwnet_spec(in_ch: int = 1, classes: int = 4, width: int = 16, expand: int = 6) -> list[LayerSpec]:
    """Stem conv, three inverted-residual blocks, point-wise head, classifier."""
    w2 = width + width // 2
    return [
        LayerSpec("conv", in_ch, width, kernel=3, stride=2),
        LayerSpec("bn"),
        LayerSpec("relu6"),
        LayerSpec("inverted-residual", width, width, expand=expand),
        LayerSpec("inverted-residual", width, w2, expand=expand, stride=2),
        LayerSpec("inverted-residual", w2, w2, expand=expand),
        LayerSpec("pointwise-conv", w2, 4 * width),
        LayerSpec("bn"),
        LayerSpec("relu6"),
        LayerSpec("pool"),
        LayerSpec("linear", 4 * width, classes),
    ]


def toy_resnet_spec(in_ch: int = 1, classes: int = 4, width: int = 16) -> list[LayerSpec]:
    """Stem conv and two basic residual blocks with full 3x3 convolutions."""
    return [
        LayerSpec("conv", in_ch, width, kernel=3, stride=2),
        LayerSpec("bn"),
        LayerSpec("relu"),
        LayerSpec("residual-block", width, width),
        LayerSpec("residual-block", width, 2 * width, stride=2),
        LayerSpec("pool"),
        LayerSpec("linear", 2 * width, classes),
    ]


MODEL_ZOO = {"toydwnet": toy_dwnet_spec, "toyresnet": toy_resnet_spec}


def build_named_model(name: str, in_ch: int, classes: int, **kwargs) -> Model:
    try:
        spec_fn = MODEL_ZOO[name.lower()]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_ZOO)}") from None
    return build_model(spec_fn(in_ch=in_ch, classes=classes), **kwargs)


# checkpoint file: b"OQAT", u32 version, then records until EOF:
#   u32 name length, utf-8 name, u32 rank, rank x u64 dims, little-endian f64 data

MAGIC = b"OQAT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: tensor {name!r} truncated at offset {pos}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record at offset {pos}") from exc
    return out
