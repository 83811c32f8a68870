"""Per-patch encoders (linear, two-layer MLP, MLP-Mixer) and their heads.

Parameters live in a flat ``dict[str, ndarray]`` so the optimizer, the
gradient oracle and the weight file all see the same named tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core_math as cm
from .core_math import DTYPE, RngState, ShapeError

KINDS = ("linear", "mlp", "mixer")
AGGS = ("max", "avg", "concat")
FORMAT_VERSION = 1
MAGIC = b"PITSWT01"

ENCODER_NAMES = {
    "linear": ("enc.W1", "enc.b1"),
    "mlp": ("enc.W1", "enc.b1", "enc.W2", "enc.b2"),
    "mixer": ("enc.Wt", "enc.bt", "enc.W1", "enc.b1", "enc.W2", "enc.b2"),
}
RECON_NAMES = ("recon.W", "recon.b")
HEAD_NAMES = ("head.W", "head.b")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class HeadSpec:
    task: str  # "forecast" | "classify"
    out_dim: int  # H or K
    agg: str = "max"
    layer: str = "z2"

    def to_dict(self) -> dict:
        return {"task": self.task, "out_dim": self.out_dim, "agg": self.agg, "layer": self.layer}


@dataclass
class ModelParams:
    kind: str
    P: int
    D: int
    N: int
    dropout: float = 0.0
    stride: int | None = None
    pad_mode: str = "none"
    head: HeadSpec | None = None
    seed: int = 0
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def encoder_names(self) -> tuple[str, ...]:
        return ENCODER_NAMES[self.kind]

    @property
    def head_names(self) -> tuple[str, ...]:
        return HEAD_NAMES if self.head is not None else ()

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.kind, self.P, self.D, self.N, self.dropout, self.stride, self.pad_mode,
            self.head, self.seed,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.grads.items()},
        )

    def count(self, names=None) -> int:
        names = self.tensors if names is None else names
        return int(sum(self.tensors[k].size for k in names))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def init_params(kind: str, P: int, D: int, N: int, rng: RngState, dropout: float = 0.0,
                stride: int | None = None, pad_mode: str = "none") -> ModelParams:
    if kind not in KINDS:
        raise ModelError(f"unknown encoder kind {kind!r}; expected one of {KINDS}")
    if P < 1 or D < 1 or N < 1:
        raise ModelError(f"P, D, N must be >= 1 (got P={P}, D={D}, N={N})")
    g = rng.stream("init", 0)
    t: dict[str, np.ndarray] = {}
    if kind == "mixer":
        t["enc.Wt"] = _uniform(g, N, (N, N))
        t["enc.bt"] = np.zeros(N)
    t["enc.W1"] = _uniform(g, P, (P, D))
    t["enc.b1"] = np.zeros(D)
    if kind != "linear":
        t["enc.W2"] = _uniform(g, D, (D, D))
        t["enc.b2"] = np.zeros(D)
    t["recon.W"] = _uniform(g, D, (D, P))
    t["recon.b"] = np.zeros(P)
    params = ModelParams(kind, P, D, N, dropout, stride if stride is not None else P,
                         pad_mode, None, rng.seed, t)
    params.zero_grads()
    return params


def head_in_dim(params: ModelParams, spec: HeadSpec) -> int:
    if spec.task == "forecast" or spec.agg == "concat":
        return params.N * params.D
    return params.D


def attach_head(params: ModelParams, spec: HeadSpec, rng: RngState) -> ModelParams:
    """Return a copy of ``params`` with a freshly initialized downstream head."""
    if spec.task not in ("forecast", "classify"):
        raise ModelError(f"unknown head task {spec.task!r}")
    if spec.agg not in AGGS:
        raise ModelError(f"unknown aggregation {spec.agg!r}; expected one of {AGGS}")
    if spec.layer not in ("z1", "z2"):
        raise ModelError(f"representation layer must be z1 or z2, got {spec.layer!r}")
    out = params.copy()
    fan_in = head_in_dim(params, spec)
    g = rng.stream("init", 1)
    out.tensors["head.W"] = _uniform(g, fan_in, (fan_in, spec.out_dim))
    out.tensors["head.b"] = np.zeros(spec.out_dim)
    out.head = spec
    out.zero_grads()
    return out


# ---------------------------------------------------------------- encoder


def encode(params: ModelParams, x: np.ndarray):
    """Map B x C x N x P patches to (z1, z2, cache), each z of shape B x C x N x D.

    For ``linear`` the single layer output serves as both z1 and z2.
    """
    t = params.tensors
    if x.shape[-1] != params.P:
        raise ShapeError(f"patch length {x.shape[-1]} does not match encoder P={params.P}")
    cache = {"x": x}
    h = x
    if params.kind == "mixer":
        if x.shape[-2] != params.N:
            raise ShapeError(f"mixer built for N={params.N}, got N={x.shape[-2]}")
        xt = np.swapaxes(x, -1, -2)  # ... x P x N
        h = np.swapaxes(cm.linear(xt, t["enc.Wt"], t["enc.bt"]), -1, -2)
        cache["xt"] = xt
    cache["h0"] = h
    a1 = cm.linear(h, t["enc.W1"], t["enc.b1"])
    if params.kind == "linear":
        return a1, a1, cache
    z1 = cm.relu(a1)
    z2 = cm.linear(z1, t["enc.W2"], t["enc.b2"])
    cache["a1"], cache["z1"] = a1, z1
    return z1, z2, cache


def encode_backward(params: ModelParams, cache: dict, dz1, dz2) -> np.ndarray:
    """Accumulate encoder grads into ``params.grads``; returns d(input patches)."""
    t, g = params.tensors, params.grads
    if params.kind == "linear":
        da1 = _add(dz1, dz2)
    else:
        dz1 = np.zeros_like(cache["z1"]) if dz1 is None else dz1.copy()
        if dz2 is not None:
            dz1_from2, dW2, db2 = cm.linear_backward(cache["z1"], t["enc.W2"], dz2)
            g["enc.W2"] += dW2
            g["enc.b2"] += db2
            dz1 += dz1_from2
        da1 = cm.relu_backward(cache["a1"], dz1)
    dh, dW1, db1 = cm.linear_backward(cache["h0"], t["enc.W1"], da1)
    g["enc.W1"] += dW1
    g["enc.b1"] += db1
    if params.kind != "mixer":
        return dh
    dxt, dWt, dbt = cm.linear_backward(cache["xt"], t["enc.Wt"], np.swapaxes(dh, -1, -2))
    g["enc.Wt"] += dWt
    g["enc.bt"] += dbt
    return np.swapaxes(dxt, -1, -2)


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# ---------------------------------------------------------------- reconstruction head


def reconstruct(params: ModelParams, z2: np.ndarray) -> np.ndarray:
    return cm.linear(z2, params.tensors["recon.W"], params.tensors["recon.b"])


def reconstruct_backward(params: ModelParams, z2: np.ndarray, dxhat: np.ndarray) -> np.ndarray:
    dz, dW, db = cm.linear_backward(z2, params.tensors["recon.W"], dxhat)
    params.grads["recon.W"] += dW
    params.grads["recon.b"] += db
    return dz


# ---------------------------------------------------------------- downstream heads


def _require_head(params: ModelParams, task: str) -> HeadSpec:
    if params.head is None or params.head.task != task:
        raise ModelError(f"model has no {task} head (head={params.head})")
    return params.head


def forecast(params: ModelParams, z: np.ndarray, training: bool = False,
             rng: np.random.Generator | None = None, rate: float = 0.0):
    """B x C x N x D representations -> (B x C x H forecasts, cache)."""
    _require_head(params, "forecast")
    B, C, N, D = z.shape
    if N * D != params.tensors["head.W"].shape[0]:
        raise ShapeError(
            f"forecast head expects N*D={params.tensors['head.W'].shape[0]}, got N={N}, D={D}"
        )
    flat = z.reshape(B, C, N * D)
    dropped, mask = cm.dropout(flat, rate, training, rng)
    y = cm.linear(dropped, params.tensors["head.W"], params.tensors["head.b"])
    return y, {"shape": z.shape, "dropped": dropped, "mask": mask}


def forecast_backward(params: ModelParams, cache: dict, dy: np.ndarray) -> np.ndarray:
    dflat, dW, db = cm.linear_backward(cache["dropped"], params.tensors["head.W"], dy)
    params.grads["head.W"] += dW
    params.grads["head.b"] += db
    return cm.dropout_backward(cache["mask"], dflat).reshape(cache["shape"])


def aggregate(z: np.ndarray, agg: str):
    """Pool B x C x N x D over patches, then average channels -> (B x D_agg, cache)."""
    B, C, N, D = z.shape
    if agg == "max":
        idx = np.argmax(z, axis=2)  # first max wins ties
        pooled = np.take_along_axis(z, idx[:, :, None, :], axis=2)[:, :, 0, :]
    elif agg == "avg":
        idx = None
        pooled = z.mean(axis=2)
    elif agg == "concat":
        idx = None
        pooled = z.reshape(B, C, N * D)
    else:
        raise ModelError(f"unknown aggregation {agg!r}; expected one of {AGGS}")
    return pooled.mean(axis=1), {"shape": z.shape, "idx": idx, "agg": agg}


def aggregate_backward(cache: dict, dout: np.ndarray) -> np.ndarray:
    B, C, N, D = cache["shape"]
    dpooled = np.repeat(dout[:, None, :] / C, C, axis=1)
    if cache["agg"] == "concat":
        return dpooled.reshape(B, C, N, D)
    if cache["agg"] == "avg":
        return np.repeat(dpooled[:, :, None, :] / N, N, axis=2)
    dz = np.zeros((B, C, N, D))
    np.put_along_axis(dz, cache["idx"][:, :, None, :], dpooled[:, :, None, :], axis=2)
    return dz


def classify(params: ModelParams, z: np.ndarray, training: bool = False,
             rng: np.random.Generator | None = None, rate: float = 0.0):
    """B x C x N x D representations -> (B x K logits, cache)."""
    spec = _require_head(params, "classify")
    pooled, agg_cache = aggregate(z, spec.agg)
    if pooled.shape[-1] != params.tensors["head.W"].shape[0]:
        raise ShapeError(
            f"classifier head expects {params.tensors['head.W'].shape[0]} features, "
            f"got {pooled.shape[-1]}"
        )
    dropped, mask = cm.dropout(pooled, rate, training, rng)
    logits = cm.linear(dropped, params.tensors["head.W"], params.tensors["head.b"])
    return logits, {"agg": agg_cache, "dropped": dropped, "mask": mask}


def classify_backward(params: ModelParams, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    dpool, dW, db = cm.linear_backward(cache["dropped"], params.tensors["head.W"], dlogits)
    params.grads["head.W"] += dW
    params.grads["head.b"] += db
    return aggregate_backward(cache["agg"], cm.dropout_backward(cache["mask"], dpool))


def representation(params: ModelParams, x: np.ndarray, layer: str = "z2"):
    z1, z2, cache = encode(params, x)
    return (z1 if layer == "z1" else z2), cache


# ---------------------------------------------------------------- weight files
#
# Layout (all little-endian):
#   8 bytes   magic "PITSWT01"
#   4 bytes   uint32 header length n
#   n bytes   UTF-8 JSON header: format_version, kind, P, D, N, dropout,
#             stride, pad_mode, seed, head, extra, tensors=[[name, shape], ...]
#   then each tensor in header order as raw float64, C order.


def save_params(params: ModelParams, path, extra: dict | None = None) -> None:
    names = list(params.tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": params.kind,
        "P": params.P,
        "D": params.D,
        "N": params.N,
        "dropout": params.dropout,
        "stride": params.stride,
        "pad_mode": params.pad_mode,
        "seed": params.seed,
        "init": "uniform_fan_in",
        "head": params.head.to_dict() if params.head else None,
        "extra": extra or {},
        "tensors": [[k, list(params.tensors[k].shape)] for k in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes())


def read_header(path) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(8) != MAGIC:
            raise ModelError(f"{path}: not a weight file")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_params(path, expect: dict | None = None) -> ModelParams:
    """Load a weight file; ``expect`` maps header keys (kind, P, D, N) to required values."""
    with Path(path).open("rb") as fh:
        if fh.read(8) != MAGIC:
            raise ModelError(f"{path}: not a weight file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        if header["format_version"] != FORMAT_VERSION:
            raise ModelError(f"{path}: unsupported format version {header['format_version']}")
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            tensors[name] = np.frombuffer(buf, dtype="<f8").astype(DTYPE).reshape(shape)
    for key, want in (expect or {}).items():
        if want is not None and header[key] != want:
            raise ModelError(f"{path}: {key} mismatch, expected {want}, file has {header[key]}")
    head = HeadSpec(**header["head"]) if header["head"] else None
    params = ModelParams(header["kind"], header["P"], header["D"], header["N"],
                         header["dropout"], header["stride"], header["pad_mode"], head,
                         header["seed"], tensors)
    params.zero_grads()
    return params


def transfer(pretrained: ModelParams, spec: HeadSpec, rng: RngState) -> ModelParams:
    """Pretrained encoder plus a fresh downstream head."""
    return attach_head(pretrained, spec, rng)


def param_counts(params: ModelParams) -> dict[str, int]:
    return {
        "encoder": params.count(params.encoder_names),
        "recon_head": params.count(RECON_NAMES),
        "downstream_head": params.count(params.head_names),
        "total": params.count(),
    }
