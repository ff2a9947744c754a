"""Convolutional panorama encoder with a projector head, in plain numpy.

The backbone is a stack of (3x3 conv, stride 2, batch norm, ReLU) blocks
followed by global average pooling to a feature vector; the projector is
three fully connected layers with batch normalization and ReLU after the
first two, final layer linear. Forward and backward passes are implemented
directly; gradients are validated against central finite differences in the
test suite.

Parameters live in a flat dict of named arrays, batch-norm running
statistics in a parallel state dict. Checkpoints are a small binary
container: magic ``S2VC``, a version tag, a JSON header (config plus caller
metadata), then named little-endian float32 arrays with shape headers.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointError, ConfigError
from .seeding import substream

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"S2VC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    feature_dim: int = 128
    hidden_dim: int = 256
    embedding_dim: int = 128
    init_seed: int = 0

    def __post_init__(self):
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.feature_dim != self.channels[-1]:
            raise ConfigError(
                f"feature_dim ({self.feature_dim}) must equal the last backbone "
                f"channel count ({self.channels[-1]}): features are the pooled maps"
            )
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be positive")
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            channels=tuple(d["channels"]),
            feature_dim=int(d["feature_dim"]),
            hidden_dim=int(d["hidden_dim"]),
            embedding_dim=int(d["embedding_dim"]),
            init_seed=int(d["init_seed"]),
        )


def param_count(config: EncoderConfig) -> int:
    """Trainable parameter count.

    Per conv block with fan C_in -> C_out: 9*C_in*C_out + C_out (bias)
    + 2*C_out (norm scale/shift). Projector: (F*H + 3H) + (H*H + 3H)
    + (H*D + D).
    """
    total = 0
    c_in = 3
    for c_out in config.channels:
        total += 9 * c_in * c_out + 3 * c_out
        c_in = c_out
    f, h, d = config.feature_dim, config.hidden_dim, config.embedding_dim
    total += f * h + 3 * h
    total += h * h + 3 * h
    total += h * d + d
    return total


# ---------------------------------------------------------------------------
# Layer primitives (NHWC)


def _conv_out_hw(h: int, w: int) -> tuple[int, int]:
    # 3x3 kernel, stride 2, pad 1
    return (h + 1) // 2, (w + 1) // 2


def _im2col(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    n, h, w, c = x.shape
    oh, ow = _conv_out_hw(h, w)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, oh, ow, 3, 3, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki : ki + 2 * oh - 1 : 2, kj : kj + 2 * ow - 1 : 2, :]
    return cols.reshape(n * oh * ow, 9 * c), (oh, ow)


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    cols, (oh, ow) = _im2col(x)
    out = cols @ w.reshape(9 * c, -1) + b
    return out.reshape(n, oh, ow, -1), (cols, x.shape)


def _conv_backward(dout, cache, w):
    cols, x_shape = cache
    n, h, wd, c = x_shape
    oh, ow = _conv_out_hw(h, wd)
    k = dout.shape[-1]
    dflat = dout.reshape(-1, k)
    dw = (cols.T @ dflat).reshape(3, 3, c, k)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(9 * c, k).T).reshape(n, oh, ow, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki : ki + 2 * oh - 1 : 2, kj : kj + 2 * ow - 1 : 2, :] += dcols[:, :, :, ki, kj, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _bn_forward_train(x, gamma, beta, running_mean, running_var, axes):
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)  # biased, matching the normalization below
    inv = 1.0 / np.sqrt(var + BN_EPSILON)
    xhat = (x - mu) * inv
    out = gamma * xhat + beta
    running_mean *= 1.0 - BN_MOMENTUM
    running_mean += BN_MOMENTUM * mu.astype(running_mean.dtype)
    running_var *= 1.0 - BN_MOMENTUM
    running_var += BN_MOMENTUM * var.astype(running_var.dtype)
    m = x.size // gamma.size
    return out, (xhat, inv, gamma, axes, m)


def _bn_forward_eval(x, gamma, beta, mean, var):
    inv = 1.0 / np.sqrt(var + BN_EPSILON)
    return gamma * ((x - mean) * inv) + beta


def _bn_backward(dout, cache):
    xhat, inv, gamma, axes, m = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = (inv / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def _linear_forward(x, w, b):
    return x @ w.T + b, x


def _linear_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


@dataclass
class ForwardResult:
    features: np.ndarray    # (N, F) pooled backbone features
    embeddings: np.ndarray  # (N, D) projector outputs
    cache: list | None      # None in eval mode


class Encoder:
    """The image-to-embedding function; owns parameters and norm statistics."""

    def __init__(self, config: EncoderConfig, params: dict, state: dict,
                 dtype=np.float32):
        self.config = config
        self.params = params
        self.state = state
        self.dtype = np.dtype(dtype)

    # -- construction -----------------------------------------------------

    @classmethod
    def initialize(cls, config: EncoderConfig, dtype=np.float32) -> "Encoder":
        """Fan-in-scaled uniform weights, zero biases, unit norm scales."""
        rng = substream(config.init_seed, "encoder-init")
        dtype = np.dtype(dtype)
        params: dict[str, np.ndarray] = {}
        state: dict[str, np.ndarray] = {}

        def uniform(shape, fan_in):
            bound = np.sqrt(1.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        c_in = 3
        for i, c_out in enumerate(config.channels):
            params[f"conv{i}_w"] = uniform((3, 3, c_in, c_out), 9 * c_in)
            params[f"conv{i}_b"] = np.zeros(c_out, dtype=dtype)
            params[f"bn{i}_gamma"] = np.ones(c_out, dtype=dtype)
            params[f"bn{i}_beta"] = np.zeros(c_out, dtype=dtype)
            state[f"bn{i}_mean"] = np.zeros(c_out, dtype=dtype)
            state[f"bn{i}_var"] = np.ones(c_out, dtype=dtype)
            c_in = c_out
        f, h, d = config.feature_dim, config.hidden_dim, config.embedding_dim
        params["fc0_w"] = uniform((h, f), f)
        params["fc0_b"] = np.zeros(h, dtype=dtype)
        params["pbn0_gamma"] = np.ones(h, dtype=dtype)
        params["pbn0_beta"] = np.zeros(h, dtype=dtype)
        state["pbn0_mean"] = np.zeros(h, dtype=dtype)
        state["pbn0_var"] = np.ones(h, dtype=dtype)
        params["fc1_w"] = uniform((h, h), h)
        params["fc1_b"] = np.zeros(h, dtype=dtype)
        params["pbn1_gamma"] = np.ones(h, dtype=dtype)
        params["pbn1_beta"] = np.zeros(h, dtype=dtype)
        state["pbn1_mean"] = np.zeros(h, dtype=dtype)
        state["pbn1_var"] = np.ones(h, dtype=dtype)
        params["fc2_w"] = uniform((d, h), h)
        params["fc2_b"] = np.zeros(d, dtype=dtype)
        return cls(config, params, state, dtype)

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "train") -> ForwardResult:
        """Run a batch of (N, H, W, 3) panoramas through backbone + projector.

        Train mode normalizes with batch statistics (N >= 2 required) and
        updates running statistics; eval mode uses the stored running
        statistics, so each row's output is independent of the rest of the
        batch.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) input, got shape {x.shape}")
        if mode == "train" and x.shape[0] < 2:
            raise ValueError("train mode needs a batch of at least 2 (batch statistics)")
        if not np.isfinite(x).all():
            raise ValueError("non-finite values in input batch")
        if x.min() < 0.0 or x.max() > 1.0:
            raise ValueError("input values must lie in [0, 1]")

        p, s = self.params, self.state
        train = mode == "train"
        cache: list = []
        out = x
        for i in range(len(self.config.channels)):
            out, conv_cache = _conv_forward(out, p[f"conv{i}_w"], p[f"conv{i}_b"])
            if train:
                out, bn_cache = _bn_forward_train(
                    out, p[f"bn{i}_gamma"], p[f"bn{i}_beta"],
                    s[f"bn{i}_mean"], s[f"bn{i}_var"], axes=(0, 1, 2),
                )
            else:
                out = _bn_forward_eval(out, p[f"bn{i}_gamma"], p[f"bn{i}_beta"],
                                       s[f"bn{i}_mean"], s[f"bn{i}_var"])
                bn_cache = None
            relu_mask = out > 0
            out = out * relu_mask
            if train:
                cache.append(("conv", i, conv_cache, bn_cache, relu_mask))

        pool_hw = out.shape[1] * out.shape[2]
        features = out.mean(axis=(1, 2))
        if train:
            cache.append(("pool", out.shape, pool_hw))

        h = features
        for i in range(2):
            h, lin_cache = _linear_forward(h, p[f"fc{i}_w"], p[f"fc{i}_b"])
            if train:
                h, bn_cache = _bn_forward_train(
                    h, p[f"pbn{i}_gamma"], p[f"pbn{i}_beta"],
                    s[f"pbn{i}_mean"], s[f"pbn{i}_var"], axes=(0,),
                )
            else:
                h = _bn_forward_eval(h, p[f"pbn{i}_gamma"], p[f"pbn{i}_beta"],
                                     s[f"pbn{i}_mean"], s[f"pbn{i}_var"])
                bn_cache = None
            relu_mask = h > 0
            h = h * relu_mask
            if train:
                cache.append(("fc", i, lin_cache, bn_cache, relu_mask))
        embeddings, lin_cache = _linear_forward(h, p["fc2_w"], p["fc2_b"])
        if train:
            cache.append(("head", lin_cache))

        if not np.isfinite(embeddings).all():
            raise FloatingPointError("non-finite embeddings produced")
        return ForwardResult(features=features, embeddings=embeddings,
                             cache=cache if train else None)

    def backward(self, cache: list | None, d_embeddings: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter.

        ``cache`` must come from a train-mode forward; eval mode keeps no
        graph and cannot be differentiated.
        """
        if cache is None:
            raise ValueError("no backward graph: run forward in train mode first")
        p = self.params
        grads = {name: None for name in p}
        d = np.asarray(d_embeddings, dtype=self.dtype)

        kind = cache[-1]
        assert kind[0] == "head"
        d, grads["fc2_w"], grads["fc2_b"] = _linear_backward(d, kind[1], p["fc2_w"])

        for entry in reversed(cache[:-1]):
            if entry[0] == "fc":
                _, i, lin_cache, bn_cache, relu_mask = entry
                d = d * relu_mask
                d, grads[f"pbn{i}_gamma"], grads[f"pbn{i}_beta"] = _bn_backward(d, bn_cache)
                d, grads[f"fc{i}_w"], grads[f"fc{i}_b"] = _linear_backward(d, lin_cache, p[f"fc{i}_w"])
            elif entry[0] == "pool":
                _, shape, pool_hw = entry
                d = np.broadcast_to(d[:, None, None, :] / pool_hw, shape).astype(self.dtype)
            elif entry[0] == "conv":
                _, i, conv_cache, bn_cache, relu_mask = entry
                d = d * relu_mask
                d, grads[f"bn{i}_gamma"], grads[f"bn{i}_beta"] = _bn_backward(d, bn_cache)
                d, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = _conv_backward(d, conv_cache, p[f"conv{i}_w"])
            else:
                raise AssertionError(f"unknown cache entry {entry[0]}")
        return grads

    # -- persistence --------------------------------------------------------

    def save(self, path, meta: dict | None = None, extra_arrays: dict | None = None) -> None:
        save_checkpoint(path, config=self.config, params=self.params,
                        state=self.state, meta=meta, extra_arrays=extra_arrays)

    @classmethod
    def from_checkpoint(cls, path, dtype=np.float32) -> "Encoder":
        ckpt = load_checkpoint(path)
        dtype = np.dtype(dtype)
        params = {k: v.astype(dtype) for k, v in ckpt.params.items()}
        state = {k: v.astype(dtype) for k, v in ckpt.state.items()}
        return cls(ckpt.config, params, state, dtype)


# ---------------------------------------------------------------------------
# Checkpoint container


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    meta: dict
    extra_arrays: dict[str, np.ndarray]


def save_checkpoint(path, *, config: EncoderConfig, params: dict, state: dict,
                    meta: dict | None = None, extra_arrays: dict | None = None) -> None:
    """Write the binary container atomically (temp file + rename)."""
    arrays: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        arrays[f"param/{name}"] = arr
    for name, arr in state.items():
        arrays[f"state/{name}"] = arr
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra/{name}"] = arr

    header = {
        "config": config.to_json_dict(),
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(struct.pack("<I", len(arrays)))
            for name in sorted(arrays):
                arr = np.ascontiguousarray(arrays[name], dtype="<f4")
                name_bytes = name.encode("utf-8")
                fh.write(struct.pack("<H", len(name_bytes)))
                fh.write(name_bytes)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (0,))))
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_checkpoint(path) -> Checkpoint:
    """Read a container written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` on missing files, bad magic, version
    mismatch (reporting both versions), or truncation.
    """
    path = os.fspath(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (this build reads {CHECKPOINT_VERSION})"
            )
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        try:
            config = EncoderConfig.from_json_dict(header["config"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc

        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        params: dict[str, np.ndarray] = {}
        state: dict[str, np.ndarray] = {}
        extra: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = struct.unpack(
                f"<{max(ndim, 1)}I", _read_exact(fh, 4 * max(ndim, 1), f"shape of {name}")
            )
            if ndim == 0:
                shape = ()
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * size, f"data of {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            if name.startswith("param/"):
                params[name[len("param/"):]] = arr
            elif name.startswith("state/"):
                state[name[len("state/"):]] = arr
            elif name.startswith("extra/"):
                extra[name[len("extra/"):]] = arr
            else:
                raise CheckpointError(f"unknown array section for {name!r}")
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"checkpoint {path} has trailing bytes")
    return Checkpoint(config=config, params=params, state=state,
                      meta=header.get("meta", {}), extra_arrays=extra)
