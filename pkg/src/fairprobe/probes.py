"""Classifier heads over frozen embeddings and their checkpoint format.

Heads are small dataclasses of float64 arrays. Training code works on a flat
``{name: array}`` dict; ``as_dict``/``from_dict`` convert with a name prefix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Mapping

import numpy as np

from ._io import atomic_path
from .errors import ConfigError, DimensionError, HeaderError
from .numerics import Params, sigmoid, softmax, uniform_init


def _check_dim(x: np.ndarray, m: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m:
        raise DimensionError(f"feature dimension {x.shape[-1]} does not match head input {m}")
    return x


@dataclass
class ProbeParams:
    W: np.ndarray  # K x m
    b: np.ndarray  # K

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError("probe weights must be K x m with a length-K bias")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def as_dict(self, prefix: str) -> Params:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    @classmethod
    def from_dict(cls, params: Mapping[str, np.ndarray], prefix: str) -> "ProbeParams":
        return cls(params[f"{prefix}.W"], params[f"{prefix}.b"])


# A domain head is a linear softmax classifier over domains.
DomainHeadParams = ProbeParams


@dataclass
class ProjectionParams:
    W1: np.ndarray  # h x m
    b1: np.ndarray
    W2: np.ndarray  # z x h
    b2: np.ndarray

    def __post_init__(self):
        h, _ = self.W1.shape
        z, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (z,):
            raise DimensionError("inconsistent projection head shapes")
        if not h >= z >= 2:
            raise DimensionError(f"projection needs hidden >= z_dim >= 2, got h={h}, z={z}")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def z_dim(self) -> int:
        return self.W2.shape[0]

    def as_dict(self, prefix: str) -> Params:
        return {f"{prefix}.W1": self.W1, f"{prefix}.b1": self.b1,
                f"{prefix}.W2": self.W2, f"{prefix}.b2": self.b2}

    @classmethod
    def from_dict(cls, params: Mapping[str, np.ndarray], prefix: str) -> "ProjectionParams":
        return cls(*(params[f"{prefix}.{k}"] for k in ("W1", "b1", "W2", "b2")))


@dataclass
class MoEParams:
    experts: list[ProbeParams]
    gate_W: np.ndarray  # E x m
    gate_b: np.ndarray

    def __post_init__(self):
        if len(self.experts) < 2:
            raise DimensionError("a mixture needs at least 2 experts")
        shape = self.experts[0].W.shape
        if any(e.W.shape != shape for e in self.experts):
            raise DimensionError("experts must share one shape")
        if self.gate_W.shape != (len(self.experts), shape[1]):
            raise DimensionError("gate must be E x m")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def as_dict(self, prefix: str) -> Params:
        out = {f"{prefix}.gate.W": self.gate_W, f"{prefix}.gate.b": self.gate_b}
        for e, ex in enumerate(self.experts):
            out.update(ex.as_dict(f"{prefix}.expert{e}"))
        return out

    @classmethod
    def from_dict(cls, params: Mapping[str, np.ndarray], prefix: str) -> "MoEParams":
        experts = []
        e = 0
        while f"{prefix}.expert{e}.W" in params:
            experts.append(ProbeParams.from_dict(params, f"{prefix}.expert{e}"))
            e += 1
        return cls(experts, params[f"{prefix}.gate.W"], params[f"{prefix}.gate.b"])


# -- initialisation ----------------------------------------------------------

def init_probe(rng: np.random.Generator, num_classes: int, input_dim: int) -> ProbeParams:
    return ProbeParams(uniform_init(rng, (num_classes, input_dim), input_dim),
                       np.zeros(num_classes))


def init_projection(rng: np.random.Generator, input_dim: int, hidden: int = 64,
                    z_dim: int = 32) -> ProjectionParams:
    return ProjectionParams(uniform_init(rng, (hidden, input_dim), input_dim), np.zeros(hidden),
                            uniform_init(rng, (z_dim, hidden), hidden), np.zeros(z_dim))


def init_moe(rng: np.random.Generator, num_experts: int, num_classes: int,
             input_dim: int) -> MoEParams:
    experts = [init_probe(rng, num_classes, input_dim) for _ in range(num_experts)]
    return MoEParams(experts, uniform_init(rng, (num_experts, input_dim), input_dim),
                     np.zeros(num_experts))


# -- forward passes ----------------------------------------------------------

def probe_logits(params: ProbeParams, x: np.ndarray) -> np.ndarray:
    x = _check_dim(x, params.input_dim)
    return x @ params.W.T + params.b


def probs_from_logits(logits: np.ndarray) -> np.ndarray:
    """Softmax for K >= 3; for K = 2 the sigmoid of the logit difference."""
    if logits.shape[-1] == 2:
        p1 = sigmoid(logits[..., 1] - logits[..., 0])
        return np.stack([1.0 - p1, p1], axis=-1)
    return softmax(logits)


def probe_forward(params: ProbeParams, x: np.ndarray) -> np.ndarray:
    return probs_from_logits(probe_logits(params, x))


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Hard decisions; for two classes this is the 0.5 threshold on class 1."""
    probs = np.asarray(probs)
    if probs.shape[-1] == 2:
        return (probs[..., 1] > 0.5).astype(np.int64)
    return np.argmax(probs, axis=-1)


def projection_hidden(params: ProjectionParams, x: np.ndarray) -> np.ndarray:
    x = _check_dim(x, params.input_dim)
    return x @ params.W1.T + params.b1


def projection_forward(params: ProjectionParams, x: np.ndarray) -> np.ndarray:
    pre = projection_hidden(params, x)
    return np.maximum(pre, 0.0) @ params.W2.T + params.b2


def projection_backward(params: ProjectionParams, x: np.ndarray, pre: np.ndarray,
                        dz: np.ndarray, prefix: str) -> Params:
    """Parameter gradients of the projection given the upstream ``dL/dz``."""
    hidden = np.maximum(pre, 0.0)
    dh = (dz @ params.W2) * (pre > 0)
    return {
        f"{prefix}.W1": dh.T @ x,
        f"{prefix}.b1": dh.sum(axis=0),
        f"{prefix}.W2": dz.T @ hidden,
        f"{prefix}.b2": dz.sum(axis=0),
    }


def grl_backward(upstream_grad: np.ndarray, lam: float = 1.0) -> np.ndarray:
    """Backward rule of the gradient-reversal connector (its forward is identity)."""
    if lam < 0:
        raise ConfigError("gradient reversal coefficient must be >= 0")
    return -lam * np.asarray(upstream_grad, dtype=np.float64)


def moe_forward(moe: MoEParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mixture probabilities ``sum_e alpha_e * p_e`` together with the gate ``alpha``."""
    x = _check_dim(x, moe.gate_W.shape[1])
    alpha = softmax(x @ moe.gate_W.T + moe.gate_b)
    expert_probs = np.stack([probe_forward(e, x) for e in moe.experts], axis=-2)
    mixed = (alpha[..., :, None] * expert_probs).sum(axis=-2)
    return mixed, alpha


# -- checkpoints -------------------------------------------------------------

class HeadKind(IntEnum):
    PROBE = 1
    PROJECTED = 2  # projection + task probe + domain head
    FADES = 3      # projection with partitioned z and auxiliary heads
    MOE = 4


CHECKPOINT_MAGIC = b"FMPB"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, kind: HeadKind, params: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> None:
    """Write ``FMPB`` | version | kind | metadata JSON | named float32 arrays."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with atomic_path(path) as tmp, open(tmp, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, int(kind)))
        fh.write(struct.pack("<I", len(meta_bytes)) + meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[HeadKind, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    try:
        magic, version, kind = struct.unpack_from("<4sII", raw, 0)
        if magic != CHECKPOINT_MAGIC:
            raise HeaderError(f"{path}: bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise HeaderError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        (meta_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, HeaderError):
            raise
        raise HeaderError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(raw):
        raise HeaderError(f"{path}: trailing bytes after checkpoint payload")
    return HeadKind(kind), params, meta
