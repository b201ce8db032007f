"""The four melt-pool regressors and their checkpoint format.

A :class:`Model` is a set of named input branches, each a list of layers,
whose outputs are concatenated (when there is more than one) and fed through
a shared head that ends in a single linear unit.

Checkpoint layout (one file)::

    b"MFCKPT\\n"                  magic
    uint32 little-endian          manifest length in bytes
    manifest                      UTF-8 JSON
    payload                       float32 LE arrays, manifest order

The manifest carries the model spec, each array's name and shape, the format
version and a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .layers import (LSTM, BatchNorm, Conv2D, Dense, Dropout, Flatten, GlobalAvgPool, Layer,
                     MaxPool2, MultiHeadAttention, TimeMean, layer_from_config)
from .tensor import ShapeError, Tensor

IMAGE = "image"
ABSORPTIVITY = "absorptivity"

CHECKPOINT_MAGIC = b"MFCKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class Model:
    """Multi-input regressor with a scalar output.

    ``inputs`` maps port name to per-sample shape (no batch axis).  Layers are
    built in place, so ``shape_trace`` records each layer's output shape.
    """

    def __init__(self, name: str, inputs: Mapping[str, tuple], branches: Mapping[str, list[Layer]],
                 head: list[Layer], seed: int = 0, metadata: dict | None = None):
        if set(inputs) != set(branches):
            raise ValueError(f"ports {sorted(inputs)} do not match branches {sorted(branches)}")
        self.name = name
        self.inputs = {k: tuple(v) for k, v in inputs.items()}
        self.branches = {k: list(v) for k, v in branches.items()}
        self.head = list(head)
        self.seed = seed
        self.metadata = dict(metadata or {})
        self.rng = np.random.default_rng(seed)
        self.shape_trace: dict[str, list[tuple]] = {}
        self._build()

    @property
    def ports(self) -> tuple[str, ...]:
        return tuple(self.inputs)

    def _build(self):
        widths = []
        for port, layers in self.branches.items():
            shape = self.inputs[port]
            trace = [shape]
            for i, layer in enumerate(layers):
                layer.name = f"{port}.{i}.{layer.kind}"
                shape = layer.build(shape, self.rng)
                trace.append(shape)
            self.shape_trace[port] = trace
            if len(self.branches) > 1 and len(shape) != 1:
                raise ShapeError(f"branch {port!r} must end flat to be concatenated, got {shape}")
            widths.append(shape)
        shape = (sum(w[0] for w in widths),) if len(widths) > 1 else widths[0]
        trace = [shape]
        for i, layer in enumerate(self.head):
            layer.name = f"head.{i}.{layer.kind}"
            shape = layer.build(shape, self.rng)
            trace.append(shape)
        self.shape_trace["head"] = trace
        if shape != (1,):
            raise ShapeError(f"model {self.name!r} must end in one output unit, got {shape}")
        names = [n for n, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")

    def layers(self):
        for layers in self.branches.values():
            yield from layers
        yield from self.head

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{layer.name}.{k}", p) for layer in self.layers() for k, p in layer.params.items()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{layer.name}.{k}", b) for layer in self.layers() for k, b in layer.buffers.items()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, inputs: Mapping[str, np.ndarray | Tensor], training: bool = False) -> Tensor:
        missing = [p for p in self.ports if p not in inputs]
        if missing:
            raise KeyError(f"model {self.name!r} needs input ports {list(self.ports)}; missing {missing}")
        outs = []
        for port, layers in self.branches.items():
            x = inputs[port]
            x = x if isinstance(x, Tensor) else Tensor(x)
            if x.shape[1:] != self.inputs[port]:
                raise ShapeError(f"port {port!r} expects [B,{','.join(map(str, self.inputs[port]))}], got {x.shape}")
            for layer in layers:
                x = layer(x, training=training, rng=self.rng)
            outs.append(x)
        x = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
        for layer in self.head:
            x = layer(x, training=training, rng=self.rng)
        return x

    __call__ = forward

    def predict(self, inputs: Mapping[str, np.ndarray], batch_size: int = 64) -> np.ndarray:
        """Eval-mode predictions as a flat float32 array."""
        n = len(next(iter(inputs.values())))
        out = []
        with T.no_grad():
            for s in range(0, n, batch_size):
                batch = {k: np.asarray(v[s:s + batch_size]) for k, v in inputs.items() if k in self.inputs}
                out.append(self.forward(batch, training=False).data.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)

    # ---- state

    def spec(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "ports": list(self.inputs),  # branch and concat order; JSON key order is not kept
            "inputs": {k: list(v) for k, v in self.inputs.items()},
            "branches": {k: [layer.config() for layer in v] for k, v in self.branches.items()},
            "head": [layer.config() for layer in self.head],
        }

    @classmethod
    def from_spec(cls, spec: dict, metadata: dict | None = None) -> "Model":
        def rebuild(cfgs):
            layers = []
            for c in cfgs:
                c = {k: v for k, v in c.items() if k != "name"}
                layers.append(layer_from_config(c))
            return layers
        ports = spec.get("ports", list(spec["inputs"]))
        return cls(spec["name"], {k: tuple(spec["inputs"][k]) for k in ports},
                   {k: rebuild(spec["branches"][k]) for k in ports},
                   rebuild(spec["head"]), seed=spec.get("seed", 0), metadata=metadata)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.data) for n, p in self.named_parameters()] + self.named_buffers()

    def get_weights(self) -> list[np.ndarray]:
        return [a.copy() for _, a in self.state_arrays()]

    def set_weights(self, weights: list[np.ndarray]):
        for (name, cur), new in zip(self.state_arrays(), weights, strict=True):
            if cur.shape != new.shape:
                raise ShapeError(f"{name}: {cur.shape} vs {new.shape}")
            cur[...] = new


# ------------------------------------------------------------------- builders

def build_cnn_xray(seed: int = 0, image_size: int = 128, filters=(32, 64, 128, 256),
                   head_units: int = 512, dropout: float = 0.2) -> Model:
    """Image-only CNN: four conv/BN/pool blocks, GAP, dense head."""
    layers: list[Layer] = []
    for f in filters:
        layers += [Conv2D(f, 3, "relu"), BatchNorm(), MaxPool2()]
    layers += [GlobalAvgPool(), Dense(head_units, "relu"), Dropout(dropout), Dense(1)]
    return Model("cnn", {IMAGE: (image_size, image_size, 1)}, {IMAGE: layers}, [], seed=seed)


def build_rnn_absorptivity(seed: int = 0, seq_len: int = 1, units: int = 128, heads: int = 4,
                           key_dim: int = 16, ff_units: int = 128, ff_layers: int = 4,
                           dropout: float = 0.05) -> Model:
    """Absorptivity-only stacked Bi-LSTM with self-attention and a 4-layer head."""
    layers: list[Layer] = []
    for _ in range(2):
        layers += [LSTM(units, bidirectional=True, return_sequences=True), BatchNorm(), Dropout(dropout)]
    layers += [MultiHeadAttention(heads, key_dim), TimeMean()]
    for _ in range(ff_layers):
        layers += [Dense(ff_units, "relu"), Dropout(dropout)]
    layers.append(Dense(1))
    return Model("rnn", {ABSORPTIVITY: (seq_len, 1)}, {ABSORPTIVITY: layers}, [], seed=seed)


def build_fused(seed: int = 0, image_size: int = 128) -> Model:
    """Early fusion: conv image branch (64) and dense absorptivity branch (32)."""
    image = [Conv2D(32, 3, "relu"), MaxPool2(), Conv2D(32, 3, "relu"), MaxPool2(),
             Flatten(), Dense(64, "relu")]
    absorb = [Dense(32, "relu")]
    head = [Dense(64, "relu"), Dense(1)]
    return Model("fused", {IMAGE: (image_size, image_size, 1), ABSORPTIVITY: (1,)},
                 {IMAGE: image, ABSORPTIVITY: absorb}, head, seed=seed)


def build_student(seed: int = 0, seq_len: int = 5, units: int = 32, hidden: int = 64) -> Model:
    """Light absorptivity-only LSTM used as the distillation student."""
    layers = [LSTM(units, bidirectional=False, return_sequences=False), Dense(hidden, "relu"), Dense(1)]
    return Model("student", {ABSORPTIVITY: (seq_len, 1)}, {ABSORPTIVITY: layers}, [], seed=seed)


BUILDERS = {
    "cnn": build_cnn_xray,
    "rnn": build_rnn_absorptivity,
    "fused": build_fused,
    "student": build_student,
}


def build_model(name: str, seed: int = 0, **kw) -> Model:
    try:
        return BUILDERS[name](seed=seed, **kw)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILDERS)}") from None


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(model: Model, path: str | os.PathLike) -> Path:
    """Write ``model`` atomically (temp file, then rename)."""
    path = Path(path)
    arrays = model.state_arrays()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.spec(),
        "metadata": model.metadata,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_manifest(path: str | os.PathLike) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (mlen,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    try:
        manifest = json.loads(raw[off:off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: manifest unreadable ({exc})") from None
    return manifest, raw[off + mlen:]


def write_manifest(path: str | os.PathLike, manifest: dict, payload: bytes):
    head = json.dumps(manifest, sort_keys=True).encode()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + payload)


def load_checkpoint(path: str | os.PathLike) -> Model:
    manifest, payload = read_manifest(path)
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(payload) != manifest["payload_bytes"] or hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch (truncated or corrupted)")
    model = Model.from_spec(manifest["model"], metadata=manifest.get("metadata"))
    expected = model.state_arrays()
    listed = manifest["arrays"]
    if [a["name"] for a in listed] != [n for n, _ in expected]:
        raise ShapeMismatchError(f"{path}: array names do not match model {model.name!r}")
    for entry, (name, arr) in zip(listed, expected):
        if tuple(entry["shape"]) != arr.shape:
            raise ShapeMismatchError(
                f"{path}: parameter {name!r} has shape {tuple(entry['shape'])} in manifest, model expects {arr.shape}")
    off = 0
    for name, arr in expected:
        nbytes = arr.size * 4
        arr[...] = np.frombuffer(payload, dtype="<f4", count=arr.size, offset=off).reshape(arr.shape)
        off += nbytes
    return model
