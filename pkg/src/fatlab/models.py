"""Feed-forward ReLU classifiers, their parameters, and checkpoint files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from fatlab.autodiff import Graph, Tensor, Var, as_array, forward

CHECKPOINT_MAGIC = b"FATLABCK"
CHECKPOINT_VERSION = 1
_FLAG_AVERAGED = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """MLP shape.  An empty ``hidden_dims`` gives a linear softmax model,
    whose feature output is the input itself."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def total_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def param_names(self) -> list[str]:
        names = []
        for k in range(len(self.layer_dims)):
            names += [f"W{k}", f"b{k}"]
        return names

    def describe(self) -> str:
        return "->".join(str(d) for d in (self.input_dim, *self.hidden_dims, self.num_classes))


class ModelParams:
    """Ordered (weight, bias) pairs; arrays are frozen read-only."""

    __slots__ = ("spec", "layers")

    def __init__(self, spec: ModelSpec, layers):
        layers = tuple((np.asarray(w), np.asarray(b)) for w, b in layers)
        if len(layers) != len(spec.layer_dims):
            raise ValueError(f"expected {len(spec.layer_dims)} layers, got {len(layers)}")
        for k, ((w, b), (i, o)) in enumerate(zip(layers, spec.layer_dims)):
            if w.shape != (i, o) or b.shape != (o,):
                raise ValueError(f"layer {k}: shapes {w.shape}/{b.shape} do not chain as ({i},{o})/({o},)")
            w.flags.writeable = False
            b.flags.writeable = False
        self.spec = spec
        self.layers = layers

    def __iter__(self) -> Iterator[np.ndarray]:
        for w, b in self.layers:
            yield w
            yield b

    @property
    def total_count(self) -> int:
        return sum(a.size for a in self)

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def bindings(self) -> dict[str, np.ndarray]:
        return dict(zip(self.spec.param_names(), self))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self])

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays) -> "ModelParams":
        arrays = list(arrays)
        return cls(spec, zip(arrays[0::2], arrays[1::2]))

    @classmethod
    def from_flat(cls, spec: ModelSpec, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec)
        if vec.shape != (spec.total_count,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({spec.total_count},)")
        arrays, pos = [], 0
        for i, o in spec.layer_dims:
            arrays.append(vec[pos:pos + i * o].reshape(i, o).copy())
            pos += i * o
            arrays.append(vec[pos:pos + o].copy())
            pos += o
        return cls.from_arrays(spec, arrays)

    def map(self, fn) -> "ModelParams":
        return ModelParams.from_arrays(self.spec, [fn(a) for a in self])

    def combine(self, other: "ModelParams", a: float, b: float) -> "ModelParams":
        """Elementwise ``a * self + b * other``."""
        if other.spec != self.spec:
            raise ValueError(f"spec mismatch: {self.spec.describe()} vs {other.spec.describe()}")
        return ModelParams.from_arrays(self.spec, [a * p + b * q for p, q in zip(self, other)])

    def astype(self, dtype) -> "ModelParams":
        if self.dtype == np.dtype(dtype):
            return self
        return self.map(lambda a: a.astype(dtype))

    def equal(self, other: "ModelParams") -> bool:
        """Bit-level equality."""
        return self.spec == other.spec and all(
            p.dtype == q.dtype and p.tobytes() == q.tobytes() for p, q in zip(self, other))


def init_params(spec: ModelSpec, seed: int, dtype=np.float64) -> ModelParams:
    """He-scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for fan_in, fan_out in spec.layer_dims:
        bound = np.sqrt(6.0 / fan_in)
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        arrays.append(np.zeros(fan_out, dtype=dtype))
    return ModelParams.from_arrays(spec, arrays)


def mlp(g: Graph, spec: ModelSpec, x: Var) -> tuple[Var, Var]:
    """Add the network applied to ``x`` to ``g``; returns (logits, features).

    Parameters are graph inputs named ``W0, b0, W1, ...`` so several
    applications inside one graph share them.
    """
    h = x
    features = x
    n_layers = len(spec.layer_dims)
    for k in range(n_layers):
        h = g.add_bias(g.matmul(h, g.input(f"W{k}")), g.input(f"b{k}"))
        if k < n_layers - 1:
            h = g.relu(h)
            features = h
    return h, features


def logits_graph(spec: ModelSpec) -> Graph:
    g = Graph()
    logits, features = mlp(g, spec, g.input("x"))
    g.set_output("logits", logits)
    g.set_output("features", features)
    return g


def model_forward(params: ModelParams, batch) -> tuple[Tensor, Tensor]:
    x = as_array(batch)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(f"batch width {x.shape[-1] if x.ndim else None} != input_dim {params.spec.input_dim}")
    outs = forward(logits_graph(params.spec), {"x": x, **params.bindings()})
    return outs["logits"], outs["features"]


def predict(params: ModelParams, batch) -> np.ndarray:
    return np.argmax(model_forward(params, batch)[0].data, axis=1)


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams, manifest: Mapping[str, object] | None = None,
                    averaged: bool = False) -> Path:
    """Binary layout: magic, version, flags, spec dims (u32 LE), then every
    tensor in declaration order as float64 LE.  A ``.manifest`` text file is
    written alongside."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = params.spec
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<IIIII{len(spec.hidden_dims)}I", CHECKPOINT_VERSION, _FLAG_AVERAGED if averaged else 0,
        spec.input_dim, spec.num_classes, len(spec.hidden_dims), *spec.hidden_dims)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params)
    path.write_bytes(header + body)
    lines = {"format_version": CHECKPOINT_VERSION, "spec": spec.describe(), "averaged": averaged}
    lines.update(manifest or {})
    Path(str(path) + ".manifest").write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return path


def load_checkpoint(path: str | Path, dtype=np.float64) -> tuple[ModelParams, dict[str, str]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    if len(raw) < 28:
        raise CheckpointError(f"{path}: truncated header")
    version, flags, input_dim, num_classes, n_hidden = struct.unpack_from("<IIIII", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    offset = 28
    if len(raw) < offset + 4 * n_hidden:
        raise CheckpointError(f"{path}: truncated header at byte {len(raw)}")
    hidden = struct.unpack_from(f"<{n_hidden}I", raw, offset)
    offset += 4 * n_hidden
    try:
        spec = ModelSpec(input_dim, hidden, num_classes)
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid spec in header: {exc}") from exc
    expected = offset + 8 * spec.total_count
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vec = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    params = ModelParams.from_flat(spec, vec).astype(dtype)
    manifest = {"averaged": str(bool(flags & _FLAG_AVERAGED))}
    mpath = Path(str(path) + ".manifest")
    if mpath.exists():
        for line in mpath.read_text().splitlines():
            if "=" in line:
                key, _, value = line.partition("=")
                manifest[key.strip()] = value.strip()
    return params, manifest
