"""Backbone, projector, predictor and box decoder for the online/target pair."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class NetConfig:
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 2, 2, 1)
    proj_hidden: int = 64
    embed_dim: int = 32
    decoder_dim: int = 32
    batch_norm: bool = True

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))


# ---------------------------------------------------------------- init


def _uniform(rng, shape, fan_in, gain=math.sqrt(2.0)):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_backbone(rng, cfg: NetConfig, prefix: str = "backbone") -> dict:
    params, cin = {}, 3
    for s, cout in enumerate(cfg.channels):
        for layer in range(2):
            name = f"{prefix}.s{s}.conv{layer}"
            params[f"{name}.w"] = _uniform(rng, (3, 3, cin, cout), 9 * cin)
            params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)
            cin = cout
    return params


def init_mlp(rng, prefix: str, dims: tuple) -> dict:
    d_in, d_hidden, d_out = dims
    return {
        f"{prefix}.fc0.w": _uniform(rng, (d_in, d_hidden), d_in),
        f"{prefix}.fc0.b": np.zeros(d_hidden, dtype=np.float32),
        f"{prefix}.fc1.w": _uniform(rng, (d_hidden, d_out), d_hidden, gain=1.0),
        f"{prefix}.fc1.b": np.zeros(d_out, dtype=np.float32),
    }


def init_decoder(rng, cfg: NetConfig, prefix: str = "decoder") -> dict:
    d, c, e = cfg.decoder_dim, cfg.out_channels, cfg.embed_dim
    return {
        f"{prefix}.q.w": _uniform(rng, (e, d), e, gain=1.0),
        f"{prefix}.q.b": np.zeros(d, dtype=np.float32),
        f"{prefix}.k.w": _uniform(rng, (c, d), c, gain=1.0),
        f"{prefix}.v.w": _uniform(rng, (c, d), c, gain=1.0),
        f"{prefix}.head0.w": _uniform(rng, (d, d), d),
        f"{prefix}.head0.b": np.zeros(d, dtype=np.float32),
        f"{prefix}.head1.w": _uniform(rng, (d, 4), d, gain=1.0),
        f"{prefix}.head1.b": np.zeros(4, dtype=np.float32),
    }


# ---------------------------------------------------------------- forward


def backbone_forward(x, params: dict, cfg: NetConfig, prefix: str = "backbone") -> Tensor:
    """Channels-last images (N, H, W, 3) to feature maps (N, H/8, W/8, C)."""
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[3] != 3:
        raise ShapeError(f"backbone: expected (N, H, W, 3) images, got {x.shape}")
    if x.shape[1] % cfg.total_stride or x.shape[2] % cfg.total_stride:
        raise ShapeError(f"backbone: spatial size {x.shape[1:3]} not divisible by {cfg.total_stride}")
    for s, stride in enumerate(cfg.strides):
        for layer in range(2):
            name = f"{prefix}.s{s}.conv{layer}"
            x = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride if layer == 0 else 1, padding=1)
            x = T.relu(x)
    return x


def batch_standardize(h: Tensor) -> Tensor:
    """Zero mean, unit variance per column over the rows of ``h`` (no affine part)."""
    n = h.shape[0]
    centered = h - T.mean(h, axis=0)
    cols = T.l2_normalize(T.transpose(centered, (1, 0)), axis=-1)
    return T.transpose(cols, (1, 0)) * float(math.sqrt(n))


def mlp_forward(x: Tensor, params: dict, prefix: str, batch_norm: bool = True) -> Tensor:
    h = x @ params[f"{prefix}.fc0.w"] + params[f"{prefix}.fc0.b"]
    if batch_norm:
        h = batch_standardize(h)
    h = T.relu(h)
    return h @ params[f"{prefix}.fc1.w"] + params[f"{prefix}.fc1.b"]


def positional_encoding(h: int, w: int, channels: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine/cosine encoding, (h*w, channels); first half encodes rows."""
    half = channels // 2
    quarter = half // 2
    freq = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))

    def encode(n):
        pos = (np.arange(n) + 0.5) / n * 2 * np.pi
        ang = pos[:, None] * freq[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    ey, ex = encode(h), encode(w)
    pe = np.zeros((h, w, channels))
    pe[:, :, :half] = ey[:, None, :]
    pe[:, :, half : 2 * quarter + half] = ex[None, :, :]
    return pe.reshape(h * w, channels).astype(dtype)


def decoder_forward(fmaps: Tensor, map_index, queries: Tensor, params: dict, prefix: str = "decoder") -> Tensor:
    """One cross-attention block: each query attends over its map; returns (P, 4) cxcywh in (0, 1)."""
    n, h, w, c = fmaps.shape
    p = queries.shape[0]
    d = params[f"{prefix}.q.w"].shape[1]
    flat = T.reshape(fmaps, (n, h * w, c))
    keys = (flat + positional_encoding(h, w, c, fmaps.dtype)) @ params[f"{prefix}.k.w"]
    values = flat @ params[f"{prefix}.v.w"]
    map_index = np.asarray(map_index, dtype=np.intp)
    q = queries @ params[f"{prefix}.q.w"] + params[f"{prefix}.q.b"]
    scores = T.reshape(q, (p, 1, d)) @ T.transpose(keys[map_index], (0, 2, 1))
    attn = T.softmax(scores * (1.0 / math.sqrt(d)), axis=-1)
    ctx = T.reshape(attn @ values[map_index], (p, d))
    hidden = T.relu((q + ctx) @ params[f"{prefix}.head0.w"] + params[f"{prefix}.head0.b"])
    return T.sigmoid(hidden @ params[f"{prefix}.head1.w"] + params[f"{prefix}.head1.b"])


# ---------------------------------------------------------------- network pair


class NetworkPair:
    """Online weights (backbone, projector, predictor, decoder) and their EMA target.

    The target holds only backbone and projector copies and its tensors are
    created with ``requires_grad=False``, so no graph is ever recorded through
    them.
    """

    TARGET_GROUPS = ("backbone", "projector")

    def __init__(self, cfg: NetConfig, feature_dim: int, seed: int = 0, decoder: bool = False):
        self.cfg = cfg
        self.feature_dim = feature_dim
        rng = np.random.default_rng(seed)
        arrays = init_backbone(rng, cfg)
        arrays.update(init_mlp(rng, "projector", (feature_dim, cfg.proj_hidden, cfg.embed_dim)))
        arrays.update(init_mlp(rng, "predictor", (cfg.embed_dim, cfg.proj_hidden, cfg.embed_dim)))
        if decoder:
            arrays.update(init_decoder(rng, cfg))
        self.online = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        self.target_master: dict = {}
        self.target: dict = {}
        self.copy_online_to_target()

    @property
    def has_decoder(self) -> bool:
        return "decoder.q.w" in self.online

    def copy_online_to_target(self) -> None:
        self.target_master = {
            k: v.data.astype(np.float64) for k, v in self.online.items() if k.split(".")[0] in self.TARGET_GROUPS
        }
        self.refresh_target()

    def refresh_target(self) -> None:
        """Rebuild the float32 target tensors from the float64 EMA accumulators."""
        self.target = {k: Tensor(v.astype(np.float32)) for k, v in self.target_master.items()}

    def params(self, which: str) -> dict:
        if which not in ("online", "target"):
            raise ValueError(f"unknown network {which!r}")
        return self.online if which == "online" else self.target

    def backbone(self, images, which: str = "online") -> Tensor:
        return backbone_forward(images, self.params(which), self.cfg)

    def project(self, features: Tensor, which: str = "online", predict: bool = False) -> Tensor:
        if predict and which == "target":
            raise ValueError("the target network has no predictor")
        u = mlp_forward(features, self.params(which), "projector", self.cfg.batch_norm)
        return self.predict(u) if predict else u

    def predict(self, u: Tensor) -> Tensor:
        return mlp_forward(u, self.online, "predictor", self.cfg.batch_norm)

    def decode(self, fmaps: Tensor, map_index, queries: Tensor) -> Tensor:
        if not self.has_decoder:
            raise ValueError("network pair was built without a decoder")
        return decoder_forward(fmaps, map_index, queries, self.online)

    def zero_grad(self) -> None:
        for t in self.online.values():
            t.grad = None

    def registry(self) -> dict:
        """Flat name -> array mapping of every parameter, online and target."""
        out = {f"online.{k}": v.data for k, v in self.online.items()}
        out.update({f"target.{k}": v.data for k, v in self.target.items()})
        return out

    def load_registry(self, arrays: dict) -> None:
        expected = self.registry()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter registry mismatch: missing={missing} extra={extra}")
        for name, arr in arrays.items():
            if arr.shape != expected[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {expected[name].shape}")
            which, key = name.split(".", 1)
            if which == "online":
                self.online[key].data = np.array(arr, dtype=np.float32)
            else:
                self.target_master[key] = np.array(arr, dtype=np.float64)
        self.refresh_target()

    def snapshot(self) -> "NetworkPair":
        clone = object.__new__(NetworkPair)
        clone.cfg = self.cfg
        clone.feature_dim = self.feature_dim
        clone.online = {k: Tensor(v.data.copy()) for k, v in self.online.items()}
        clone.target_master = {k: v.copy() for k, v in self.target_master.items()}
        clone.refresh_target()
        return clone


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "boxcorr-checkpoint"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write a JSON header line followed by little-endian float32 data."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dtype": "<f4",
        "data_bytes": offset,
        "tensors": entries,
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise CheckpointError(f"{path}: no header terminator found (scanned {len(raw)} bytes)")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise CheckpointError(f"{path}: malformed header at byte offset {pos}: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file (header at byte offset 0)")
    if header.get("dtype") != "<f4":
        raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    data = raw[end + 1 :]
    if len(data) != header.get("data_bytes"):
        raise CheckpointError(
            f"{path}: data section is {len(data)} bytes at byte offset {end + 1}, header declares {header.get('data_bytes')}"
        )
    arrays, expected = {}, 0
    for entry in header.get("tensors", []):
        try:
            name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed tensor entry {entry!r}") from exc
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off != expected or off + nbytes > len(data):
            raise CheckpointError(
                f"{path}: tensor {name!r} has byte offset {off} (+{nbytes} bytes); "
                f"expected offset {expected} within a {len(data)}-byte data section"
            )
        arrays[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
        expected = off + nbytes
    if expected != len(data):
        raise CheckpointError(f"{path}: {len(data) - expected} trailing bytes after byte offset {expected}")
    return arrays, header.get("meta", {})
