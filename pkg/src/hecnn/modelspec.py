"""Declarative CNN descriptions, their JSON files, and weight/input streams."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .convlower import ConvShape, FilterBank, conv_out_size
from .slotvec import ShapeError, is_power_of_two

MODEL_DIR_ENV = "HECNN_MODEL_DIR"
BUILTIN_MODELS = ("cryptonets-hs", "me", "ce")


class LayerKind(enum.Enum):
    CONV = "conv"
    SUBCONV = "subconv"
    AVGPOOL = "avgpool"
    SQUARE = "square"
    FLATTEN = "flatten"
    DENSE = "dense"

    @property
    def is_linear(self) -> bool:
        return self is not LayerKind.SQUARE

    @property
    def is_conv(self) -> bool:
        return self in (LayerKind.CONV, LayerKind.SUBCONV)

    @property
    def has_params(self) -> bool:
        return self.is_conv or self is LayerKind.DENSE


class Policy(enum.Enum):
    CONV_PACK = "conv-pack"
    HS = "hs"
    LOLA_DENSE = "lola-dense"
    LOLA_STACKED = "lola-stacked"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    label: str
    k: int | None = None
    s: int | None = None
    out_channels: int | None = None
    units: int | None = None
    policy: Policy | None = None
    stage: str | None = None

    def __post_init__(self):
        kind = self.kind
        need = {
            LayerKind.CONV: {"k", "out_channels"},
            LayerKind.SUBCONV: {"k", "out_channels"},
            LayerKind.AVGPOOL: {"k"},
            LayerKind.DENSE: {"units"},
        }.get(kind, set())
        allowed = need | ({"s"} if kind.is_conv or kind is LayerKind.AVGPOOL else set())
        for name in ("k", "s", "out_channels", "units"):
            value = getattr(self, name)
            if name in need and value is None:
                raise ValueError(f"layer '{self.label}': {kind.value} needs '{name}'")
            if name not in allowed and value is not None:
                raise ValueError(f"layer '{self.label}': '{name}' is meaningless for {kind.value}")
            if value is not None and value < 1:
                raise ValueError(f"layer '{self.label}': '{name}' must be positive")
        if allowed & {"s"} and self.s is None:
            object.__setattr__(self, "s", 1)
        if self.policy is not None and not kind.is_linear:
            raise ValueError(f"layer '{self.label}': square layers take no kernel policy")
        if self.policy is Policy.CONV_PACK and not kind.is_conv:
            raise ValueError(f"layer '{self.label}': conv-pack policy applies to convolutions only")

    def output_shape(self, in_shape: tuple) -> tuple:
        kind = self.kind
        if kind is LayerKind.SQUARE:
            return in_shape
        if kind is LayerKind.FLATTEN:
            return (int(np.prod(in_shape)),)
        if kind is LayerKind.DENSE:
            return (self.units,)
        if len(in_shape) != 3:
            raise ShapeError(f"layer '{self.label}' needs a (c, d, d) input, got {in_shape}")
        c, d, _ = in_shape
        d_out = conv_out_size(d, self.k, self.s)
        return (self.out_channels if kind.is_conv else c, d_out, d_out)

    def conv_shape(self, in_shape: tuple) -> ConvShape:
        c, d, _ = in_shape
        return ConvShape(d_in=d, c_in=c, c_out=self.out_channels, kernel_k=self.k, stride=self.s)

    def param_shapes(self, in_shape: tuple) -> tuple[tuple, tuple]:
        if self.kind.is_conv:
            return (self.out_channels, in_shape[0], self.k, self.k), (self.out_channels,)
        if self.kind is LayerKind.DENSE:
            return (self.units, int(np.prod(in_shape))), (self.units,)
        return (), ()

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        for name in ("k", "s", "out_channels", "units"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.policy is not None:
            out["policy"] = self.policy.value
        out["label"] = self.label
        if self.stage is not None:
            out["stage"] = self.stage
        return out


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    n_slots: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(x) for x in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not is_power_of_two(self.n_slots):
            raise ValueError(f"n_slots must be a power of two, got {self.n_slots}")
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        labels = [layer.label for layer in self.layers]
        if len(set(labels)) != len(labels):
            raise ValueError(f"layer labels must be unique: {labels}")
        self.shapes()  # raises on inconsistent geometry

    def shapes(self) -> list[tuple]:
        """Input shape followed by the output shape of every layer."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    @property
    def output_size(self) -> int:
        return int(np.prod(self.shapes()[-1]))

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def with_slots(self, n_slots: int) -> "ModelSpec":
        return ModelSpec(self.name, self.input_shape, n_slots, self.layers)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input": list(self.input_shape),
            "n_slots": self.n_slots,
            "layers": [layer.to_dict() for layer in self.layers],
        }


_POS = {"type": "integer", "minimum": 1}
MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "input", "n_slots", "layers"],
    "properties": {
        "name": {"type": "string"},
        "input": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
        "n_slots": _POS,
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind", "label"],
                "properties": {
                    "kind": {"enum": [k.value for k in LayerKind]},
                    "k": _POS,
                    "s": _POS,
                    "out_channels": _POS,
                    "units": _POS,
                    "policy": {"enum": [p.value for p in Policy]},
                    "label": {"type": "string", "minLength": 1},
                    "stage": {"type": "string", "minLength": 1},
                },
            },
        },
    },
}


def model_from_dict(data: dict) -> ModelSpec:
    jsonschema.validate(data, MODEL_SCHEMA)
    c, d1, d2 = data["input"]
    if d1 != d2:
        raise ValueError(f"input images must be square, got {d1}x{d2}")
    layers = []
    for item in data["layers"]:
        item = dict(item)
        kind = LayerKind(item.pop("kind"))
        policy = item.pop("policy", None)
        layers.append(LayerSpec(kind=kind, policy=Policy(policy) if policy else None, **item))
    return ModelSpec(data["name"], (c, d1, d2), data["n_slots"], layers)


def load_model(name_or_path: str | os.PathLike) -> ModelSpec:
    """Load a model by file path, by name from ``$HECNN_MODEL_DIR``, or a built-in name."""
    path = Path(name_or_path)
    if not path.is_file():
        model_dir = os.environ.get(MODEL_DIR_ENV)
        candidate = Path(model_dir) / f"{name_or_path}.json" if model_dir else None
        if candidate is not None and candidate.is_file():
            path = candidate
        elif str(name_or_path) in BUILTIN_MODELS:
            text = resources.files("hecnn.models").joinpath(f"{name_or_path}.json").read_text()
            return model_from_dict(json.loads(text))
        else:
            raise FileNotFoundError(f"no model file or built-in model named '{name_or_path}'")
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def builtin_models() -> dict[str, ModelSpec]:
    return {name: load_model(name) for name in BUILTIN_MODELS}


# --------------------------------------------------------------------------
# weights and inputs

Weights = dict  # layer label -> (weights, bias)


def param_layers(model: ModelSpec):
    shapes = model.shapes()
    for layer, in_shape in zip(model.layers, shapes):
        if layer.kind.has_params:
            yield layer, in_shape


def random_weights(model: ModelSpec, rng: np.random.Generator | int | None = None) -> Weights:
    """Gaussian weights scaled by fan-in; small Gaussian biases."""
    rng = np.random.default_rng(rng)
    weights = {}
    for layer, in_shape in param_layers(model):
        w_shape, b_shape = layer.param_shapes(in_shape)
        fan_in = int(np.prod(w_shape[1:]))
        weights[layer.label] = (rng.normal(0.0, 1.0 / np.sqrt(fan_in), w_shape),
                                rng.normal(0.0, 0.1, b_shape))
    return weights


def random_input(model: ModelSpec, rng: np.random.Generator | int | None = None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    return rng.uniform(0.0, 1.0, model.input_shape)


def check_weights(model: ModelSpec, weights: Weights):
    for layer, in_shape in param_layers(model):
        if layer.label not in weights:
            raise ShapeError(f"missing weights for layer '{layer.label}'")
        w, b = weights[layer.label]
        w_shape, b_shape = layer.param_shapes(in_shape)
        if np.shape(w) != w_shape or np.shape(b) != b_shape:
            raise ShapeError(f"layer '{layer.label}': weights {np.shape(w)}/{np.shape(b)}, "
                             f"expected {w_shape}/{b_shape}")


def filter_bank(layer: LayerSpec, weights: Weights) -> FilterBank:
    w, b = weights[layer.label]
    return FilterBank(w, b)


def _read_f32(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def read_weights(path, model: ModelSpec) -> Weights:
    """Little-endian float32 stream: per layer, weights (C order) then biases."""
    flat = _read_f32(path)
    weights, pos = {}, 0
    for layer, in_shape in param_layers(model):
        w_shape, b_shape = layer.param_shapes(in_shape)
        n_w, n_b = int(np.prod(w_shape)), int(np.prod(b_shape))
        if pos + n_w + n_b > flat.size:
            raise ShapeError(f"weights file too short at layer '{layer.label}'")
        weights[layer.label] = (flat[pos:pos + n_w].reshape(w_shape), flat[pos + n_w:pos + n_w + n_b])
        pos += n_w + n_b
    if pos != flat.size:
        raise ShapeError(f"weights file has {flat.size - pos} trailing values")
    return weights


def write_weights(path, model: ModelSpec, weights: Weights):
    check_weights(model, weights)
    parts = []
    for layer, _ in param_layers(model):
        w, b = weights[layer.label]
        parts += [np.ravel(w), np.ravel(b)]
    np.concatenate(parts).astype("<f4").tofile(path)


def read_input(path, model: ModelSpec) -> np.ndarray:
    flat = _read_f32(path)
    if flat.size != model.input_size:
        raise ShapeError(f"input file has {flat.size} values, model expects {model.input_size}")
    return flat.reshape(model.input_shape)


def write_input(path, x):
    np.asarray(x).astype("<f4").tofile(path)


# --------------------------------------------------------------------------
# published operation counts, keyed by this package's stage labels
# columns: total, add_pc, add_cc, mul_pc, mul_cc, rot

REFERENCE_COUNTS = {
    "me": {
        "Conv1": (90, 5, 40, 45, 0, 0),
        "Flat1": (8, 0, 4, 0, 0, 4),
        "Square1": (1, 0, 0, 0, 1, 0),
        "Conv2-Dense1": (110, 1, 38, 32, 0, 39),
        "Square2": (1, 0, 0, 0, 1, 0),
        "Dense2": (36, 1, 12, 10, 0, 13),
        "Total": (246, 7, 94, 87, 2, 56),
    },
    "cryptonets-hs": {
        "Conv1": (250, 5, 120, 125, 0, 0),
        "Flat1": (8, 0, 4, 0, 0, 4),
        "Square1": (1, 0, 0, 0, 1, 0),
        "Conv2-Dense1": (308, 1, 103, 100, 0, 104),
        "Square2": (1, 0, 0, 0, 1, 0),
        "Dense2": (38, 1, 13, 10, 0, 14),
        "Total": (606, 7, 240, 235, 2, 122),
    },
    # LoLa-MNIST on the same architecture; not reproducible by execution
    "lola-mnist": {
        "Conv1": (250, 5, 120, 125, 0, 0),
        "Flat1": (8, 0, 4, 0, 0, 4),
        "Square1": (1, 0, 0, 0, 1, 0),
        "Conv2-Dense1": (492, 0, 246, 13, 0, 246),
        "Square2": (1, 0, 0, 0, 1, 0),
        "Dense2": (279, 0, 139, 10, 0, 130),
        "Total": (1031, 5, 509, 148, 2, 380),
    },
    "ce": {
        "Conv1": (972, 18, 468, 486, 0, 0),
        "Flat1": (30, 0, 15, 0, 0, 15),
        "Square1": (3, 0, 0, 0, 3, 0),
        "Pool1-Conv2": (7506, 1, 2504, 2496, 0, 2505),
        "Conv3": (1677, 64, 768, 832, 0, 13),
        "Flat2": (126, 0, 63, 0, 0, 63),
        "Square2": (1, 0, 0, 0, 1, 0),
        "Pool2-Dense1": (778, 1, 260, 256, 0, 261),
        "Square3": (1, 0, 0, 0, 1, 0),
        "Dense2": (40, 1, 14, 10, 0, 15),
        "Total": (11134, 85, 4092, 4080, 5, 2872),
    },
}
