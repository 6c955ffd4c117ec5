"""Per-point MLP encoder with max-pool, plus a single linear classifier."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionError, FormatError

HIDDEN = 32
FEATURE_DIM = 64
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W", "b")

_CKPT_MAGIC = b"PTCK"
_CKPT_VERSION = 1


@dataclass
class ModelParams:
    W1: np.ndarray  # (HIDDEN, 3)
    b1: np.ndarray
    W2: np.ndarray  # (FEATURE_DIM, HIDDEN)
    b2: np.ndarray
    W: np.ndarray  # (C, FEATURE_DIM)
    b: np.ndarray

    @property
    def num_classes(self):
        return self.W.shape[0]

    def as_dict(self):
        """Live references to the parameter arrays, keyed by name."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return ModelParams(**{k: v.copy() for k, v in self.as_dict().items()})


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    confidence: float
    label: int


def init_params(num_classes, rng, hidden=HIDDEN, feature_dim=FEATURE_DIM):
    """Glorot-uniform encoder, zero biases, zero classifier."""

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return ModelParams(
        W1=glorot(hidden, 3),
        b1=np.zeros(hidden),
        W2=glorot(feature_dim, hidden),
        b2=np.zeros(feature_dim),
        W=np.zeros((num_classes, feature_dim)),
        b=np.zeros(num_classes),
    )


def encode_batch(points, params):
    """Features for a (B, m, 3) stack. Returns ``(feats, cache)``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[2] != 3:
        raise DimensionError(f"points must be (B, m, 3), got {points.shape}")
    feats, argmax = kernels.encoder_forward(points, params.W1, params.b1, params.W2, params.b2)
    return feats, (points, argmax, feats)


def encode(points, params):
    """Feature vector of one (m, 3) point set."""
    feats, _ = encode_batch(np.asarray(points, dtype=np.float64)[None], params)
    return feats[0]


def encode_dataset(points, params, chunk=256):
    out = [encode_batch(points[i : i + chunk], params)[0] for i in range(0, len(points), chunk)]
    return np.concatenate(out, axis=0)


def logits(feats, params):
    return feats @ params.W.T + params.b


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(f, params):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (params.W.shape[1],):
        raise DimensionError(f"feature has shape {f.shape}, expected ({params.W.shape[1]},)")
    z = params.W @ f + params.b
    p = softmax(z)
    k = int(np.argmax(p))
    return Prediction(z, p, float(p[k]), k)


def predict_batch(feats, params):
    """Vectorised :func:`classify`: returns (probabilities, confidences, labels)."""
    p = softmax(logits(feats, params))
    labels = np.argmax(p, axis=1)
    return p, p[np.arange(len(p)), labels], labels


def model_backward(cache, params, grad_feats=None, grad_logits=None):
    """Parameter gradients given upstream gradients on features and/or logits.

    ``grad_logits`` flows through the classifier into the features; the
    combined feature gradient then flows through the encoder.
    """
    points, argmax, feats = cache
    B = feats.shape[0]
    gf = np.zeros_like(feats) if grad_feats is None else np.array(grad_feats, dtype=np.float64)
    if gf.shape != feats.shape:
        raise DimensionError(f"grad_feats has shape {gf.shape}, expected {feats.shape}")
    gW = np.zeros_like(params.W)
    gb = np.zeros_like(params.b)
    if grad_logits is not None:
        grad_logits = np.asarray(grad_logits, dtype=np.float64)
        if grad_logits.shape != (B, params.num_classes):
            raise DimensionError(f"grad_logits has shape {grad_logits.shape}")
        gW += grad_logits.T @ feats
        gb += grad_logits.sum(axis=0)
        gf += grad_logits @ params.W
    gW1, gb1, gW2, gb2 = kernels.encoder_backward(
        gf, points, argmax, feats, params.W1, params.b1, params.W2
    )
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "W": gW, "b": gb}


def save_checkpoint(params, path):
    """Binary dump: magic, version, tensor count, then name/shape/float64 data per tensor."""
    tensors = params.as_dict()
    parts = [struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError("truncated checkpoint header", len(raw))
    magic, version, count = struct.unpack_from("<4sII", raw, 0)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(raw):
                raise FormatError(f"tensor {name!r} truncated", pos)
            tensors[name] = np.frombuffer(raw, "<f8", int(np.prod(shape)), pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}", pos) from None
    missing = set(PARAM_NAMES) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}", pos)
    return ModelParams(**{k: tensors[k] for k in PARAM_NAMES})
