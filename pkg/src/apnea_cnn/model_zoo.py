"""Architecture profiles, model assembly, inference and the model file format.

The generic detector (``M1``) is::

    window(1408) -> BN(1 channel)
      -> conv(3 x 100, stride 2) -> maxpool(2) -> ReLU
      -> conv(50 x 10)           -> maxpool(2) -> ReLU
      -> conv(30 x 30)           -> maxpool(2) -> ReLU
      -> BN(30 channels) -> flatten(1950) -> dropout(0.25) -> dense(2) -> softmax

which holds 50,909 scalars when batch-norm running statistics are counted.
``M3`` is the same topology without biases (50,824) and ``M4`` drops the third
conv block (17,959).
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor_nn as nn

WINDOW_SAMPLES = 1408
NON_APNEA, APNEA = 0, 1
MODES = ("dense", "pruned", "binarized")

OUTPUT_INIT_SCALE = 0.01

# Batch-norm running statistics are stored scalars and are part of "total".
COUNT_BN_RUNNING_STATS = True


class ConfigError(ValueError):
    """Raised for architecture or training configurations that cannot be realized."""


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel_len: int
    stride: int = 1
    padding: str = "valid"
    pool_size: int = 2


@dataclass(frozen=True)
class DenseBlock:
    """A hidden fully connected layer: dropout -> dense -> ReLU."""

    units: int
    dropout_p: float = 0.25


@dataclass(frozen=True)
class ArchitectureConfig:
    conv_blocks: tuple[ConvBlock, ...]
    input_len: int = WINDOW_SAMPLES
    input_bn: bool = True
    input_bn_per_position: bool = False
    head_bn: bool = True
    dense_blocks: tuple[DenseBlock, ...] = ()
    output_dropout: float = 0.25
    use_bias: bool = True
    output_units: int = 2
    bn_epsilon: float = 1e-3
    name: str = "custom"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvBlock(**b) for b in d["conv_blocks"])
        d["dense_blocks"] = tuple(DenseBlock(**b) for b in d.get("dense_blocks", ()))
        return cls(**d)


M1 = ArchitectureConfig(
    conv_blocks=(
        ConvBlock(3, 100, stride=2),
        ConvBlock(50, 10),
        ConvBlock(30, 30),
    ),
    name="M1",
)


def binarized_profile(base: ArchitectureConfig = M1) -> ArchitectureConfig:
    return replace(base, use_bias=False, name="M3" if base.name == "M1" else base.name + "-bin")


def patient_profile(base: ArchitectureConfig = M1) -> ArchitectureConfig:
    """Drop the last conv block (conv + pool + activation)."""
    if len(base.conv_blocks) < 2:
        raise ConfigError("patient profile needs at least two conv blocks in the base model")
    return replace(base, conv_blocks=base.conv_blocks[:-1], name="M4" if base.name == "M1" else base.name + "-patient")


M3 = binarized_profile(M1)
M4 = patient_profile(M1)
PROFILES = {"M1": M1, "M3": M3, "M4": M4}


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    kind: str  # input_bn | conv | pool | relu | head_bn | flatten | dropout | dense
    name: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


def layer_plan(config: ArchitectureConfig) -> list[LayerSpec]:
    """Resolve the config into a concrete per-sample layer sequence with shapes."""
    plan: list[LayerSpec] = []
    shape: tuple[int, ...] = (1, config.input_len)
    if config.input_len < 1:
        raise ConfigError("input_len must be positive")
    if config.input_bn:
        plan.append(LayerSpec("input_bn", "input_bn", shape, shape, {"per_position": config.input_bn_per_position}))
    for i, block in enumerate(config.conv_blocks):
        name = f"conv{i}"
        c, length = shape
        if block.kernel_len < 1 or block.stride < 1 or block.filters < 1:
            raise ConfigError(f"{name}: filters, kernel_len and stride must be >= 1")
        out_len = nn.conv_output_length(length, block.kernel_len, block.stride, block.padding)
        if out_len < 1:
            raise ConfigError(f"{name}: input length {length} is shorter than kernel length {block.kernel_len}")
        out = (block.filters, out_len)
        plan.append(LayerSpec("conv", name, shape, out, {"stride": block.stride, "padding": block.padding}))
        shape = out
        if block.pool_size > 1:
            pooled = out_len // block.pool_size
            if pooled < 1:
                raise ConfigError(f"pool{i}: input length {out_len} is shorter than pool size {block.pool_size}")
            plan.append(LayerSpec("pool", f"pool{i}", shape, (block.filters, pooled), {"size": block.pool_size}))
            shape = (block.filters, pooled)
        plan.append(LayerSpec("relu", f"relu{i}", shape, shape))
    if config.head_bn:
        plan.append(LayerSpec("head_bn", "head_bn", shape, shape))
    flat = (int(np.prod(shape)),)
    plan.append(LayerSpec("flatten", "flatten", shape, flat))
    shape = flat
    for i, block in enumerate(config.dense_blocks):
        if block.dropout_p > 0:
            plan.append(LayerSpec("dropout", f"dropout{i}", shape, shape, {"p": block.dropout_p}))
        plan.append(LayerSpec("dense", f"dense{i}", shape, (block.units,)))
        plan.append(LayerSpec("relu", f"dense_relu{i}", (block.units,), (block.units,)))
        shape = (block.units,)
    if config.output_dropout > 0:
        plan.append(LayerSpec("dropout", "output_dropout", shape, shape, {"p": config.output_dropout}))
    plan.append(LayerSpec("dense", "output", shape, (config.output_units,)))
    return plan


def closed_form_param_count(config: ArchitectureConfig) -> int:
    """Parameter total straight from the layer descriptors (no tensors allocated)."""
    per_bn = 4 if COUNT_BN_RUNNING_STATS else 2
    total = 0
    for spec in layer_plan(config):
        if spec.kind == "input_bn":
            total += per_bn * (config.input_len if spec.attrs["per_position"] else 1)
        elif spec.kind == "conv":
            block = config.conv_blocks[int(spec.name[4:])]
            total += block.filters * spec.in_shape[0] * block.kernel_len + (block.filters if config.use_bias else 0)
        elif spec.kind == "head_bn":
            total += per_bn * spec.in_shape[0]
        elif spec.kind == "dense":
            total += spec.in_shape[0] * spec.out_shape[0] + (spec.out_shape[0] if config.use_bias else 0)
    return total


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Model:
    """Trainable tensors, batch-norm buffers, pruning masks and binarization latents.

    ``params`` holds everything the optimizer touches except in binarized mode,
    where conv kernels and dense weights in ``params`` are the effective
    ``sign(latent)`` values and the optimizer updates ``latents`` instead.
    """

    def __init__(self, config: ArchitectureConfig, mode: str = "dense"):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if mode == "binarized" and config.use_bias:
            raise ConfigError("binarized models carry no biases; use a config with use_bias=False")
        self.config = config
        self.mode = mode
        self.plan = layer_plan(config)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}
        self.latents: dict[str, np.ndarray] = {}
        self.metadata: dict = {}
        self._tape: list = []

    # -- structure ---------------------------------------------------------

    def weight_names(self) -> list[str]:
        """Conv kernels and dense weights: the only prunable / binarizable tensors."""
        return [n for n in self.params if n.endswith(".kernel") or n.endswith(".weight")]

    def bias_names(self) -> list[str]:
        return [n for n in self.params if n.endswith(".bias")]

    def copy(self) -> "Model":
        clone = copy.copy(self)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.buffers = {k: v.copy() for k, v in self.buffers.items()}
        clone.masks = {k: v.copy() for k, v in self.masks.items()}
        clone.latents = {k: v.copy() for k, v in self.latents.items()}
        clone.metadata = copy.deepcopy(self.metadata)
        clone._tape = []
        return clone

    def apply_masks(self) -> None:
        for name, mask in self.masks.items():
            self.params[name] *= mask

    def sync_binary(self) -> None:
        """Refresh effective weights from the latents (sign with sign(0) = +1)."""
        for name, latent in self.latents.items():
            self.params[name] = np.where(latent >= 0, 1.0, -1.0)

    # -- forward / backward ------------------------------------------------

    def _bn_state(self, prefix: str, momentum: float) -> nn.BatchNormState:
        return nn.BatchNormState(
            self.params[prefix + ".gamma"],
            self.params[prefix + ".beta"],
            self.buffers[prefix + ".running_mean"],
            self.buffers[prefix + ".running_var"],
            epsilon=self.config.bn_epsilon,
            momentum=momentum,
        )

    def forward_batch(
        self,
        x: np.ndarray,
        mode: str = "infer",
        rng: np.random.Generator | None = None,
        bn_momentum: float = 0.99,
    ) -> np.ndarray:
        """Logits for a batch of windows ``(N, input_len)``.

        Train mode records what :meth:`backward` needs, updates batch-norm
        running statistics and applies dropout.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_len:
            raise nn.ShapeError(f"expected windows of shape (N, {self.config.input_len}), got {x.shape}")
        train = mode == "train"
        tape = []
        h = x[:, None, :]
        for spec in self.plan:
            kind = spec.kind
            if kind in ("input_bn", "head_bn"):
                state = self._bn_state(spec.name, bn_momentum)
                per_position = spec.attrs.get("per_position", False)
                inp = h[:, 0, :] if per_position else h
                out, cache = nn.batchnorm_forward(inp, state, mode)
                if train:
                    self.buffers[spec.name + ".running_mean"] = state.running_mean
                    self.buffers[spec.name + ".running_var"] = state.running_var
                tape.append((spec, cache))
                h = out[:, None, :] if per_position else out
            elif kind == "conv":
                layer = self._conv_state(spec)
                tape.append((spec, h))
                h = nn.conv1d_forward(h, layer)
            elif kind == "pool":
                h_in_shape = h.shape
                h, idx = nn.maxpool1d_forward(h, spec.attrs["size"])
                tape.append((spec, (idx, h_in_shape)))
            elif kind == "relu":
                tape.append((spec, h))
                h = nn.relu(h)
            elif kind == "flatten":
                tape.append((spec, h.shape))
                h = h.reshape(h.shape[0], -1)
            elif kind == "dropout":
                h, dmask = nn.dropout(h, spec.attrs["p"], mode, rng)
                tape.append((spec, dmask))
            elif kind == "dense":
                tape.append((spec, h))
                h = nn.dense_forward(h, self.params[spec.name + ".weight"], self.params.get(spec.name + ".bias"))
        self._tape = tape if train else []
        return h

    def _conv_state(self, spec: LayerSpec) -> nn.ConvLayerState:
        return nn.ConvLayerState(
            self.params[spec.name + ".kernel"],
            self.params.get(spec.name + ".bias"),
            stride=spec.attrs["stride"],
            padding=spec.attrs["padding"],
        )

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every entry in ``params`` from the last train-mode forward."""
        if not self._tape:
            raise nn.InvariantError("backward() needs a preceding train-mode forward_batch()")
        grads: dict[str, np.ndarray] = {}
        g = grad_logits
        for spec, cache in reversed(self._tape):
            kind = spec.kind
            if kind == "dense":
                w = self.params[spec.name + ".weight"]
                has_bias = spec.name + ".bias" in self.params
                g, grads[spec.name + ".weight"], db = nn.dense_backward(g, cache, w, has_bias)
                if has_bias:
                    grads[spec.name + ".bias"] = db
            elif kind == "dropout":
                g = nn.dropout_backward(g, cache)
            elif kind == "flatten":
                g = g.reshape(cache)
            elif kind == "relu":
                g = nn.relu_backward(g, cache)
            elif kind == "pool":
                idx, in_shape = cache
                g = nn.maxpool1d_backward(g, idx, in_shape)
            elif kind == "conv":
                layer = self._conv_state(spec)
                g, grads[spec.name + ".kernel"], db = nn.conv1d_backward(g, cache, layer)
                if db is not None:
                    grads[spec.name + ".bias"] = db
            elif kind in ("input_bn", "head_bn"):
                state = self._bn_state(spec.name, 0.99)
                per_position = spec.attrs.get("per_position", False)
                gin = g[:, 0, :] if per_position else g
                gin, grads[spec.name + ".gamma"], grads[spec.name + ".beta"] = nn.batchnorm_backward(gin, cache, state)
                g = gin[:, None, :] if per_position else gin
        self._tape = []
        return grads


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def build_model(config: ArchitectureConfig, rng: np.random.Generator, mode: str = "dense") -> Model:
    """Allocate and initialize a model.

    Conv kernels and hidden dense weights are He-uniform, biases zero, batch
    norm gamma=1 / beta=0. The output layer is drawn at 1/100 of the He
    scale so an untrained model predicts close to 50/50 (loss near ln 2) in
    both train and infer mode while every weight stays nonzero.
    """
    model = Model(config, mode)
    for spec in model.plan:
        if spec.kind in ("input_bn", "head_bn"):
            feats = config.input_len if spec.attrs.get("per_position") else spec.in_shape[0]
            model.params[spec.name + ".gamma"] = np.ones(feats)
            model.params[spec.name + ".beta"] = np.zeros(feats)
            model.buffers[spec.name + ".running_mean"] = np.zeros(feats)
            model.buffers[spec.name + ".running_var"] = np.ones(feats)
        elif spec.kind == "conv":
            block = config.conv_blocks[int(spec.name[4:])]
            in_ch = spec.in_shape[0]
            shape = (block.filters, in_ch, block.kernel_len)
            model.params[spec.name + ".kernel"] = _fan_in_uniform(rng, shape, in_ch * block.kernel_len)
            if config.use_bias:
                model.params[spec.name + ".bias"] = np.zeros(block.filters)
        elif spec.kind == "dense":
            f, u = spec.in_shape[0], spec.out_shape[0]
            w = _fan_in_uniform(rng, (f, u), f)
            model.params[spec.name + ".weight"] = w * OUTPUT_INIT_SCALE if spec.name == "output" else w
            if config.use_bias:
                model.params[spec.name + ".bias"] = np.zeros(u)
    if mode == "pruned":
        model.masks = {n: np.ones_like(model.params[n]) for n in model.weight_names()}
    elif mode == "binarized":
        model.latents = {n: np.clip(model.params[n], -1.0, 1.0) for n in model.weight_names()}
        model.sync_binary()
    return model


def count_params(model: Model) -> tuple[int, int]:
    """``(total, nonzero)`` stored scalars.

    ``total`` covers every trainable tensor plus batch-norm running statistics
    (masks and latents shadow existing weights and are not counted again).
    ``nonzero`` subtracts masked or exactly-zero entries of the prunable
    weight tensors.
    """
    total = sum(v.size for v in model.params.values())
    if COUNT_BN_RUNNING_STATS:
        total += sum(v.size for v in model.buffers.values())
    zeros = sum(model.params[n].size - np.count_nonzero(model.params[n]) for n in model.weight_names())
    return int(total), int(total - zeros)


def bias_count(model: Model) -> int:
    return sum(model.params[n].size for n in model.bias_names())


def predict_proba(model: Model, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Infer-mode class probabilities for an ``(N, input_len)`` array."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 1:
        windows = windows[None]
    out = np.empty((windows.shape[0], model.config.output_units))
    for start in range(0, windows.shape[0], batch_size):
        logits = model.forward_batch(windows[start : start + batch_size], "infer")
        out[start : start + batch_size] = nn.softmax(logits)
    return out


def predict_labels(probs: np.ndarray) -> np.ndarray:
    # ties go to non-apnea
    return (probs[:, APNEA] > probs[:, NON_APNEA]).astype(np.int64)


def forward(model: Model, window, mode: str = "infer", rng: np.random.Generator | None = None):
    """Classify a single window. Returns ``(probabilities, predicted_label)``."""
    values = getattr(window, "values", window)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (model.config.input_len,):
        raise nn.ShapeError(f"window must hold exactly {model.config.input_len} samples, got {values.shape}")
    if mode != "infer":
        raise ConfigError("train-mode batch statistics need a batch; use Model.forward_batch")
    logits = model.forward_batch(values[None], "infer", rng)
    probs = nn.softmax(logits)[0]
    return probs, int(predict_labels(probs[None])[0])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

MAGIC = b"APNEACNN"
FORMAT_VERSION = 1
_KINDS = {"param": 0, "buffer": 1, "mask": 2, "latent": 3}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}
_PREAMBLE = struct.Struct("<8sIQ")  # magic, version, total file length
_DIGEST_LEN = 32


class ModelFormatError(ValueError):
    """Base class for model-file load failures."""


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


def _tensor_groups(model: Model):
    return (
        ("param", model.params),
        ("buffer", model.buffers),
        ("mask", model.masks),
        ("latent", model.latents),
    )


def serialize_model(model: Model) -> bytes:
    header = json.dumps(
        {"config": model.config.to_dict(), "mode": model.mode, "metadata": model.metadata},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    body = bytearray()
    body += struct.pack("<I", len(header)) + header
    tensors = [(kind, name, arr) for kind, group in _tensor_groups(model) for name, arr in sorted(group.items())]
    body += struct.pack("<I", len(tensors))
    for kind, name, arr in tensors:
        encoded = name.encode()
        body += struct.pack("<BH", _KINDS[kind], len(encoded)) + encoded
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    total = _PREAMBLE.size + len(body) + _DIGEST_LEN
    blob = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, total) + bytes(body)
    return blob + hashlib.sha256(blob).digest()


def save_model(model: Model, destination) -> None:
    Path(destination).write_bytes(serialize_model(model))


def deserialize_model(blob: bytes) -> Model:
    if len(blob) < _PREAMBLE.size:
        raise TruncatedFileError("file too short for the model preamble")
    magic, version, total = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, this build reads {FORMAT_VERSION}")
    if len(blob) < total:
        raise TruncatedFileError(f"model file holds {len(blob)} of {total} bytes")
    if len(blob) > total:
        raise ModelFormatError("trailing bytes after model checksum")
    content, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(content).digest() != digest:
        raise ChecksumError("model checksum mismatch")

    pos = _PREAMBLE.size

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(content):
            raise TruncatedFileError("tensor directory runs past the end of the file")
        chunk = content[pos : pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen))
    model = Model(ArchitectureConfig.from_dict(header["config"]), header["mode"])
    model.metadata = header["metadata"]
    groups = dict(_tensor_groups(model))
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        kind, nlen = struct.unpack("<BH", take(3))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        groups[_KIND_NAMES[kind]][name] = arr
    if pos != len(content):
        raise ModelFormatError("unparsed bytes before checksum")
    return model


def load_model(source) -> Model:
    return deserialize_model(Path(source).read_bytes())
