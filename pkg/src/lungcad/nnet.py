"""Minimal dense/convolutional numerics.

Tensors are plain float64 ndarrays (row-major). Spatial tensors carry a
leading channel axis: (C, X, Y, Z). The base candidate-scoring network is
implemented forward-only (three conv blocks of 32/64/128 filters, each
5^3 same-padded convolution + PReLU + batchnorm + 2^3 maxpool, then
8192 -> 1024 -> 1 dense layers with dropout in between); backpropagation
exists only for the dense/PReLU/dropout pieces needed by the MIL head.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

BN_EPS = 1e-5
DEFAULT_DROPOUT_RATE = 0.5


def conv3d(x, kernel):
    """Dense 3D cross-correlation, zero-padded "same", stride 1.

    x: (C_in, X, Y, Z); kernel: (C_out, C_in, kx, ky, kz) with odd spatial
    extents. Returns (C_out, X, Y, Z).
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValidationError("conv3d expects (C,X,Y,Z) input and (O,C,kx,ky,kz) kernel")
    if x.shape[0] != kernel.shape[1]:
        raise ValidationError(
            f"channel mismatch: input {x.shape[0]} vs kernel {kernel.shape[1]}"
        )
    if any(k % 2 == 0 for k in kernel.shape[2:]):
        raise ValidationError("kernel spatial extents must be odd for same padding")
    pads = [(0, 0)] + [(k // 2, k // 2) for k in kernel.shape[2:]]
    padded = np.pad(x, pads)
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, kernel.shape[2:], axis=(1, 2, 3)
    )
    return np.einsum("cxyzijk,ocijk->oxyz", windows, kernel, optimize=True)


def prelu(x, slope):
    """x if x >= 0 else slope * x; slope broadcasts over the channel axis."""
    x = np.asarray(x, dtype=np.float64)
    slope = np.asarray(slope, dtype=np.float64)
    if slope.ndim == 1 and x.ndim > 1:
        slope = slope.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(x >= 0, x, slope * x)


def prelu_backward(grad_out, x, slope):
    """Gradient of prelu w.r.t. x (slope treated as fixed)."""
    x = np.asarray(x, dtype=np.float64)
    slope = np.asarray(slope, dtype=np.float64)
    if slope.ndim == 1 and x.ndim > 1:
        slope = slope.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(x >= 0, grad_out, slope * grad_out)


def batchnorm_infer(x, mean, var, gain, bias):
    """Inference-mode batchnorm with stored per-channel statistics."""
    var = np.asarray(var, dtype=np.float64)
    if (var <= 0).any():
        raise ValidationError("batchnorm variance must be positive")
    def chan(a):
        a = np.asarray(a, dtype=np.float64)
        return a.reshape((-1,) + (1,) * (x.ndim - 1)) if a.ndim == 1 else a
    return chan(gain) * (x - chan(mean)) / np.sqrt(chan(var) + BN_EPS) + chan(bias)


def maxpool3d(x):
    """2x2x2 max pooling with stride 2 over (C, X, Y, Z)."""
    c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ValidationError(f"maxpool needs even spatial extents, got {x.shape}")
    return x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).max(axis=(2, 4, 6))


def dense(x, weight, bias):
    """y = W x + b for a flat input vector."""
    return np.asarray(weight) @ np.asarray(x) + np.asarray(bias)


def dense_backward(grad_y, x, weight):
    """Returns (grad_x, grad_W, grad_b) for y = W x + b."""
    grad_y = np.asarray(grad_y)
    x = np.asarray(x)
    return np.asarray(weight).T @ grad_y, np.outer(grad_y, x), grad_y.copy()


def dropout_mask(rng, rate, n):
    """Inverted-scaling Bernoulli mask: kept entries are 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return np.ones(n)
    keep = rng.random(n) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Base candidate-scoring network (forward only)

@dataclass(frozen=True)
class ConvBlockParams:
    kernel: np.ndarray        # (C_out, C_in, 5, 5, 5)
    prelu_slope: np.ndarray   # (C_out,)
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_gain: np.ndarray
    bn_bias: np.ndarray

    def __post_init__(self):
        if (np.asarray(self.bn_var) <= 0).any():
            raise ValidationError("batchnorm variance must be positive")


@dataclass(frozen=True)
class BaseNetParams:
    blocks: tuple                 # three ConvBlockParams (32, 64, 128 filters)
    dense1_w: np.ndarray          # (1024, 128 * 4^3)
    dense1_b: np.ndarray
    dense1_slope: np.ndarray      # scalar or (1024,)
    dropout_rate: float
    dense2_w: np.ndarray          # (1, 1024)
    dense2_b: np.ndarray

    def __post_init__(self):
        if len(self.blocks) != 3:
            raise ValidationError("expected three conv blocks")


def random_base_net_params(rng, channels=(32, 64, 128), feature_dim=1024,
                           input_extent=32, dropout_rate=DEFAULT_DROPOUT_RATE):
    """Small random parameters with correctly chained dimensions."""
    blocks = []
    c_in = 1
    for c_out in channels:
        blocks.append(
            ConvBlockParams(
                kernel=rng.normal(0, 0.05, size=(c_out, c_in, 5, 5, 5)),
                prelu_slope=np.full(c_out, 0.25),
                bn_mean=rng.normal(0, 0.1, size=c_out),
                bn_var=np.full(c_out, 1.0),
                bn_gain=np.ones(c_out),
                bn_bias=np.zeros(c_out),
            )
        )
        c_in = c_out
    flat = channels[-1] * (input_extent // 2 ** len(channels)) ** 3
    return BaseNetParams(
        blocks=tuple(blocks),
        dense1_w=rng.normal(0, 1.0 / np.sqrt(flat), size=(feature_dim, flat)),
        dense1_b=np.zeros(feature_dim),
        dense1_slope=np.array(0.25),
        dropout_rate=dropout_rate,
        dense2_w=rng.normal(0, 1.0 / np.sqrt(feature_dim), size=(1, feature_dim)),
        dense2_b=np.zeros(1),
    )


def base_net_forward(block, params, mode="deterministic", rng=None,
                     return_trace=False):
    """Forward pass of the candidate scoring net on a 32^3 block.

    Returns (logit, feature) where feature is the 1024-d post-PReLU
    hidden vector (pre-dropout). In "mc_dropout" mode a fresh dropout mask
    is sampled before the final dense layer.
    """
    x = np.asarray(block, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValidationError(f"expected single-channel input, got {x.shape}")
    if mode not in ("deterministic", "mc_dropout"):
        raise ValidationError(f"unknown mode {mode!r}")
    if mode == "mc_dropout" and rng is None:
        raise ValidationError("mc_dropout mode needs a generator")

    trace = []
    for blk in params.blocks:
        x = conv3d(x, blk.kernel)
        x = prelu(x, blk.prelu_slope)
        x = batchnorm_infer(x, blk.bn_mean, blk.bn_var, blk.bn_gain, blk.bn_bias)
        x = maxpool3d(x)
        trace.append(x.shape)
    flat = x.ravel()
    feature = prelu(dense(flat, params.dense1_w, params.dense1_b),
                    params.dense1_slope)
    trace.append(feature.shape)
    h = feature
    if mode == "mc_dropout":
        h = h * dropout_mask(rng, params.dropout_rate, h.size)
    logit = float(dense(h, params.dense2_w, params.dense2_b)[0])
    trace.append((1,))
    if return_trace:
        return logit, feature, trace
    return logit, feature


# ---------------------------------------------------------------------------
# Parameter blob format
#
# Layout: 4-byte little-endian unsigned manifest length, then a UTF-8 JSON
# manifest {"entries": [{"name": ..., "shape": [...]}, ...]}, then the
# concatenated little-endian float64 data of each entry in manifest order,
# C-contiguous.

def save_params(params_dict, path):
    entries = []
    blobs = []
    for name, arr in params_dict.items():
        # astype (not ascontiguousarray) so 0-d shapes survive the round trip
        arr = np.asarray(arr).astype("<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    manifest = json.dumps({"entries": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_params(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated parameter blob")
    (mlen,) = struct.unpack("<I", raw[:4])
    try:
        manifest = json.loads(raw[4:4 + mlen].decode("utf-8"))
        entries = manifest["entries"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from None
    out = {}
    offset = 4 + mlen
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated data for {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after parameter data")
    return out
