"""Backbone family, model construction, surgery, and the weight container.

A model is: conv stages (conv -> channel norm -> SiLU, first conv of each
stage downsamples by 2) -> global average pooling -> a 512-wide dense layer
with SiLU (whose output is the model's embedding) -> a dense classifier.
The embedding width is 512 for every model regardless of the backbone.

The same parametric family expresses block-pruned variants: truncating the
stage list produces the ``-kB`` ladder of progressively smaller students.
Full-size external backbones can be plugged in through the same
``BackboneSpec`` interface by supplying wider/deeper stages and a weight file.
"""

from __future__ import annotations

import functools
import io
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import (
    InvalidArgumentError,
    NotFoundError,
    WeightFormatError,
    WeightShapeError,
)

EMBED_DIM = 512

BACKBONE_PREFIX = "stage"

WEIGHT_MAGIC = b"DKW1"


@dataclass(frozen=True)
class BackboneSpec:
    """Parametric description of a conv backbone.

    ``stage_widths[i]`` is the channel count of stage i, ``stage_depths[i]``
    how many conv-norm-activation units it stacks.
    """

    name: str
    stage_widths: tuple[int, ...]
    stage_depths: tuple[int, ...]
    input_resolution: tuple[int, int, int]
    pretrained_weights: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "input_resolution", tuple(self.input_resolution))
        if len(self.stage_widths) != len(self.stage_depths):
            raise InvalidArgumentError("stage_widths and stage_depths must align")
        if not self.stage_widths:
            raise InvalidArgumentError("at least one stage is required")
        if any(w <= 0 for w in self.stage_widths) or any(d <= 0 for d in self.stage_depths):
            raise InvalidArgumentError("stage widths and depths must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def arch_key(self) -> tuple:
        return (self.stage_widths, self.stage_depths, self.input_resolution)


@dataclass(frozen=True)
class ModelHandle:
    """A differentiable classifier: backbone + 512-dim embedding + head.

    ``params`` maps flat tensor names to arrays; ``frozen_names`` marks
    tensors excluded from optimizer updates and the trainable count.
    """

    spec: BackboneSpec
    num_classes: int
    params: dict[str, np.ndarray]
    frozen_names: frozenset[str] = frozenset()
    embed_dim: int = EMBED_DIM

    def parameter_names(self) -> frozenset[str]:
        return frozenset(self.params)


@dataclass
class ForwardOutput:
    logits: np.ndarray  # [B, C]
    probabilities: np.ndarray  # [B, C], rows sum to 1
    embedding: np.ndarray  # [B, 512]


@functools.lru_cache(maxsize=64)
def _layers_for(arch_key: tuple, num_classes: int):
    stage_widths, stage_depths, input_resolution = arch_key
    layers = []
    c_in = input_resolution[2]
    for i, (width, depth) in enumerate(zip(stage_widths, stage_depths)):
        for j in range(depth):
            stride = 2 if j == 0 else 1
            layers.append(nn.Conv2d(f"stage{i}.conv{j}", c_in, width, stride=stride))
            layers.append(nn.ChannelNorm(f"stage{i}.norm{j}", width))
            layers.append(nn.Silu(f"stage{i}.act{j}"))
            c_in = width
    layers.append(nn.GlobalAvgPool("pool"))
    layers.append(nn.Dense("embed", c_in, EMBED_DIM))
    layers.append(nn.Silu("embed.act"))
    embed_index = len(layers) - 1
    layers.append(nn.Dense("head", EMBED_DIM, num_classes))
    return tuple(layers), embed_index


def model_layers(model: ModelHandle):
    """(layer stack, index of the layer whose output is the embedding)."""
    return _layers_for(model.spec.arch_key(), model.num_classes)


def build_model(
    spec: BackboneSpec,
    num_classes: int,
    seed: int,
    dtype=np.float32,
) -> ModelHandle:
    """Construct a seeded-random model; optionally load backbone weights.

    When ``spec.pretrained_weights`` names a file, every ``stage*`` tensor is
    loaded from it (shape-checked) while the dense head stays random.
    """
    if num_classes < 2:
        raise InvalidArgumentError(f"num_classes must be >= 2, got {num_classes}")
    layers, _ = _layers_for(spec.arch_key(), num_classes)
    rng = np.random.default_rng(seed)
    params = nn.init_params(layers, rng, dtype=dtype)
    if spec.pretrained_weights is not None:
        stored = load_weights(spec.pretrained_weights)
        for name, value in params.items():
            if not name.startswith(BACKBONE_PREFIX):
                continue
            if name not in stored:
                raise WeightShapeError(
                    f"weight file {spec.pretrained_weights} is missing tensor {name!r}"
                )
            if stored[name].shape != value.shape:
                raise WeightShapeError(
                    f"tensor {name!r} has shape {stored[name].shape} in "
                    f"{spec.pretrained_weights}, expected {value.shape}"
                )
            params[name] = stored[name].astype(dtype)
    return ModelHandle(spec=spec, num_classes=num_classes, params=params)


def prune_variant(spec: BackboneSpec, blocks_kept: int) -> BackboneSpec:
    """Truncate to the first ``blocks_kept`` stages; name gains a ``-kB`` tag."""
    if not 1 <= blocks_kept <= spec.num_stages:
        raise InvalidArgumentError(
            f"blocks_kept must lie in [1, {spec.num_stages}], got {blocks_kept}"
        )
    return replace(
        spec,
        name=f"{spec.name}-{blocks_kept}B",
        stage_widths=spec.stage_widths[:blocks_kept],
        stage_depths=spec.stage_depths[:blocks_kept],
    )


def count_trainable_params(model) -> int:
    """Total element count over parameters not marked frozen.

    Accepts anything exposing ``params`` and ``frozen_names`` (models and
    teachers alike).
    """
    named = model.params
    frozen = model.frozen_names
    return sum(v.size for name, v in named.items() if name not in frozen)


def set_frozen(model: ModelHandle, names) -> ModelHandle:
    """Return a handle with exactly ``names`` frozen (shares parameters)."""
    names = frozenset(names)
    unknown = names - model.parameter_names()
    if unknown:
        raise InvalidArgumentError(f"unknown parameter names: {sorted(unknown)}")
    return replace(model, frozen_names=names)


def _check_resolution(model: ModelHandle, images: np.ndarray) -> None:
    expected = model.spec.input_resolution
    if images.ndim != 4 or images.shape[1:] != tuple(expected):
        raise InvalidArgumentError(
            f"expected images of shape [B, {expected[0]}, {expected[1]}, "
            f"{expected[2]}], got {images.shape}"
        )


def params_f64(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: value.astype(np.float64) for name, value in params.items()}


def forward_with_tape(model: ModelHandle, images: np.ndarray, params=None):
    """Training-mode forward pass; returns (ForwardOutput, tape)."""
    _check_resolution(model, images)
    layers, embed_index = model_layers(model)
    params = params if params is not None else params_f64(model.params)
    x = images.astype(np.float64)
    tape = []
    embedding = None
    for i, layer in enumerate(layers):
        x, cache = layer.forward(params, x)
        tape.append(cache)
        if i == embed_index:
            embedding = x
    logits = x
    return ForwardOutput(logits, nn.softmax(logits), embedding), tape


def forward(model: ModelHandle, images: np.ndarray) -> ForwardOutput:
    """Inference forward pass (no augmentation, deterministic)."""
    out, _ = forward_with_tape(model, images)
    return out


def embed_forward(model: ModelHandle, images: np.ndarray, params=None) -> np.ndarray:
    """Embedding only: backbone through the 512-dim dense layer."""
    _check_resolution(model, images)
    layers, embed_index = model_layers(model)
    params = params if params is not None else params_f64(model.params)
    x = images.astype(np.float64)
    for layer in layers[: embed_index + 1]:
        x, _ = layer.forward(params, x)
    return x


def backward(
    model: ModelHandle,
    tape,
    dlogits: np.ndarray,
    dembedding: np.ndarray | None = None,
    params=None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(logits).

    ``dembedding`` injects an extra gradient at the embedding output (the
    feature-distance path of distillation).
    """
    layers, embed_index = model_layers(model)
    params = params if params is not None else params_f64(model.params)
    inject = {embed_index: dembedding} if dembedding is not None else None
    return nn.backward_layers(layers, params, tape, dlogits, inject)


def theta_sq_norm(params: dict[str, np.ndarray], frozen: frozenset[str]) -> float:
    """Sum of squared entries over unfrozen parameters."""
    return float(
        sum((v.astype(np.float64) ** 2).sum() for n, v in params.items() if n not in frozen)
    )


# --------------------------------------------------------------------------
# Weight container: magic "DKW1", u32 LE manifest length, canonical-JSON
# manifest [{name, dtype, shape, offset}...] sorted by name, then raw
# float32 little-endian tensor data (C order). Offsets are relative to the
# start of the data section. See README for the bit-exact layout.
# --------------------------------------------------------------------------


def save_weights(params: dict[str, np.ndarray], path: str | Path) -> None:
    """Write named tensors as float32; byte-identical for identical inputs."""
    entries = []
    buf = io.BytesIO()
    offset = 0
    for name in sorted(params):
        data = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append(
            {"name": name, "dtype": "float32", "shape": list(data.shape), "offset": offset}
        )
        raw = data.tobytes()
        buf.write(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        fh.write(buf.getvalue())


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"weight file {path} does not exist")
    blob = path.read_bytes()
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path} is not a weight file (bad magic header)")
    if len(blob) < 8:
        raise WeightFormatError(f"{path} is truncated")
    (manifest_len,) = np.frombuffer(blob[4:8], dtype="<u4")
    manifest_end = 8 + int(manifest_len)
    if manifest_end > len(blob):
        raise WeightFormatError(f"{path} is truncated")
    try:
        manifest = json.loads(blob[8:manifest_end].decode())
        entries = manifest["tensors"]
    except (ValueError, KeyError) as exc:
        raise WeightFormatError(f"{path} has a corrupt manifest: {exc}") from exc
    data = blob[manifest_end:]
    params: dict[str, np.ndarray] = {}
    for entry in entries:
        if entry.get("dtype") != "float32":
            raise WeightFormatError(
                f"tensor {entry.get('name')!r} in {path} has unsupported dtype "
                f"{entry.get('dtype')!r}"
            )
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(data):
            raise WeightFormatError(f"tensor {entry['name']!r} in {path} is truncated")
        array = np.frombuffer(data[start:end], dtype="<f4").reshape(shape)
        params[entry["name"]] = array.copy()
    return params


def save_model(model: ModelHandle, path: str | Path) -> None:
    save_weights(model.params, path)


def load_model_weights(model: ModelHandle, path: str | Path) -> ModelHandle:
    """Replace every parameter of ``model`` from a weight file (shape-checked)."""
    stored = load_weights(path)
    params = {}
    for name, value in model.params.items():
        if name not in stored:
            raise WeightShapeError(f"weight file {path} is missing tensor {name!r}")
        if stored[name].shape != value.shape:
            raise WeightShapeError(
                f"tensor {name!r} has shape {stored[name].shape} in {path}, "
                f"expected {value.shape}"
            )
        params[name] = stored[name].astype(value.dtype)
    return replace(model, params=params)
