"""Scoring network: a validated layer stack over the kernels module, mapping a
stitched pair image [3, S, S] to a scalar similarity, plus binary checkpoints.

The final layer is always a 1-output fully connected layer without relu, so
its weight/bias act as the learned metric over the penultimate joint feature.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .kernels import ConvParams, ShapeError

CHECKPOINT_MAGIC = b"DRNK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {"float32": 0, "float64": 1}


class CheckpointError(RuntimeError):
    """Raised on malformed, truncated or mismatching checkpoint files."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack; unused fields stay at their defaults."""

    kind: str                      # conv | maxpool | lrn | fc | dropout
    out_channels: int = 0          # conv
    kernel: int = 0                # conv
    stride: int = 1                # conv / maxpool
    pad: int = 0                   # conv
    relu: bool = True              # conv / fc
    window: int = 0                # maxpool
    k: float = 2.0                 # lrn
    n: int = 5                     # lrn
    alpha: float = 1e-4            # lrn
    beta: float = 0.75             # lrn
    out_dim: int = 0               # fc
    rate: float = 0.5              # dropout


def conv(out_channels: int, kernel: int, stride: int = 1, pad: int = 0,
         relu: bool = True) -> LayerSpec:
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel,
                     stride=stride, pad=pad, relu=relu)


def maxpool(window: int, stride: int) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=stride)


def lrn(k: float = 2.0, n: int = 5, alpha: float = 1e-4, beta: float = 0.75) -> LayerSpec:
    return LayerSpec("lrn", k=k, n=n, alpha=alpha, beta=beta)


def fc(out_dim: int, relu: bool = True) -> LayerSpec:
    return LayerSpec("fc", out_dim=out_dim, relu=relu)


def dropout(rate: float = 0.5) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description: square input side plus the ordered layers."""

    input_side: int
    layers: tuple[LayerSpec, ...]
    preset: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def plan_shapes(self) -> list[tuple[int, ...]]:
        """Shape after each layer, validating compatibility as it goes."""
        shape: tuple[int, ...] = (3, self.input_side, self.input_side)
        plan = []
        for i, spec in enumerate(self.layers):
            name = f"{spec.kind}{i + 1}"
            if spec.kind == "conv":
                c, h, w = _spatial(shape, name)
                oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
                ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
                if spec.kernel > h + 2 * spec.pad or spec.kernel > w + 2 * spec.pad or oh < 1:
                    raise ShapeError(f"layer {name}: kernel {spec.kernel} too large for {h}x{w}")
                shape = (spec.out_channels, oh, ow)
            elif spec.kind == "maxpool":
                c, h, w = _spatial(shape, name)
                if spec.window > min(h, w):
                    raise ShapeError(f"layer {name}: window {spec.window} too large for {h}x{w}")
                shape = (c, (h - spec.window) // spec.stride + 1,
                         (w - spec.window) // spec.stride + 1)
            elif spec.kind == "lrn":
                _spatial(shape, name)
            elif spec.kind == "fc":
                shape = (spec.out_dim,)
            elif spec.kind == "dropout":
                pass
            else:
                raise ShapeError(f"layer {name}: unknown kind {spec.kind!r}")
            plan.append(shape)
        last = self.layers[-1] if self.layers else None
        if last is None or last.kind != "fc" or last.out_dim != 1:
            raise ShapeError("final layer must be fc with out_dim 1")
        return plan

    def to_dict(self) -> dict:
        return {"input_side": self.input_side, "preset": self.preset,
                "layers": [asdict(s) for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        layers = tuple(LayerSpec(**s) for s in d["layers"])
        return cls(input_side=d["input_side"], layers=layers, preset=d.get("preset", "custom"))


def desk_small(dropout_rate: float = 0.5) -> NetworkConfig:
    """Small preset that trains in minutes on a CPU yet uses every layer kind."""
    return NetworkConfig(
        input_side=64,
        layers=(
            conv(16, 5, stride=2), maxpool(2, 2), lrn(),
            conv(32, 3, stride=1), maxpool(2, 2),
            fc(128), dropout(dropout_rate),
            fc(64), dropout(dropout_rate),
            fc(1, relu=False),
        ),
        preset="desk_small",
    )


def paper_alexnet_like(dropout_rate: float = 0.5) -> NetworkConfig:
    """Full-size preset: 5 conv layers then fc 4096/4096/1 on a 227x227 crop.

    conv2-conv5 paddings are chosen so the flattened top conv feature is
    exactly 9216 = 6*6*256.
    """
    return NetworkConfig(
        input_side=227,
        layers=(
            conv(96, 11, stride=4), maxpool(3, 2), lrn(),
            conv(256, 5, stride=1, pad=2), maxpool(3, 2), lrn(),
            conv(384, 3, stride=1, pad=1),
            conv(384, 3, stride=1, pad=1),
            conv(256, 3, stride=1, pad=1), maxpool(3, 2),
            fc(4096), dropout(dropout_rate),
            fc(4096), dropout(dropout_rate),
            fc(1, relu=False),
        ),
        preset="paper_alexnet_like",
    )


def _spatial(shape: tuple[int, ...], name: str) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeError(f"layer {name} needs a spatial [C, H, W] input, got {shape} "
                         "(a conv/pool/lrn cannot follow an fc layer)")
    return shape


PRESETS = {"desk_small": desk_small, "paper_alexnet_like": paper_alexnet_like}


class Network:
    """Layer stack with named parameter arrays and a scalar-score forward.

    Safe for concurrent read-only scoring; training (backward + update)
    mutates `params` and needs exclusive ownership.
    """

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray],
                 dtype=np.float32, seed: int | None = None,
                 channel_means: np.ndarray | None = None, metadata: dict | None = None):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.channel_means = channel_means
        self.metadata = dict(metadata or {})
        self._shapes = config.plan_shapes()

    def layer_names(self) -> list[str]:
        return [f"{s.kind}{i + 1}" for i, s in enumerate(self.config.layers)]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()},
                       self.dtype, self.seed,
                       None if self.channel_means is None else self.channel_means.copy(),
                       dict(self.metadata))


def build_network(config: NetworkConfig, init: str = "he",
                  rng: np.random.Generator | int | None = 0,
                  dtype=np.float32) -> Network:
    """Allocate and initialize parameters for a validated config.

    init is one of zeros | uniform (fan-in scaled uniform(-a, a)) |
    he (fan-in scaled normal).  Deterministic for a given seed.
    """
    config.plan_shapes()
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dtype = np.dtype(dtype)

    params: dict[str, np.ndarray] = {}
    shape: tuple[int, ...] = (3, config.input_side, config.input_side)
    for i, spec in enumerate(config.layers):
        name = f"{spec.kind}{i + 1}"
        if spec.kind == "conv":
            fan_in = shape[0] * spec.kernel * spec.kernel
            kshape = (spec.out_channels, shape[0], spec.kernel, spec.kernel)
            params[f"{name}.kernels"] = _init_array(gen, init, kshape, fan_in, dtype)
            params[f"{name}.bias"] = np.zeros(spec.out_channels, dtype=dtype)
            oh = (shape[1] + 2 * spec.pad - spec.kernel) // spec.stride + 1
            ow = (shape[2] + 2 * spec.pad - spec.kernel) // spec.stride + 1
            shape = (spec.out_channels, oh, ow)
        elif spec.kind == "maxpool":
            shape = (shape[0], (shape[1] - spec.window) // spec.stride + 1,
                     (shape[2] - spec.window) // spec.stride + 1)
        elif spec.kind == "fc":
            fan_in = int(np.prod(shape))
            params[f"{name}.weight"] = _init_array(gen, init, (spec.out_dim, fan_in),
                                                   fan_in, dtype)
            params[f"{name}.bias"] = np.zeros(spec.out_dim, dtype=dtype)
            shape = (spec.out_dim,)
    return Network(config, params, dtype=dtype, seed=seed)


def _init_array(gen, init, shape, fan_in, dtype):
    if init == "zeros":
        return np.zeros(shape, dtype=dtype)
    if init == "uniform":
        a = 1.0 / np.sqrt(fan_in)
        return gen.uniform(-a, a, size=shape).astype(dtype)
    if init == "he":
        return (gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    raise ValueError(f"unknown init scheme {init!r}")


def score_pair(net: Network, pair_image: np.ndarray, mode: str = "infer",
               rng: np.random.Generator | None = None):
    """Run the stack on a prepared [3, side, side] input.

    Returns (score, forward_cache); the cache is kept only in train mode and
    is what backward_pair consumes.
    """
    x = np.asarray(pair_image)
    side = net.config.input_side
    if x.shape != (3, side, side):
        raise ShapeError(f"pair image must be (3, {side}, {side}), got {x.shape}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"

    caches = [] if train else None
    for i, spec in enumerate(net.config.layers):
        name = f"{spec.kind}{i + 1}"
        if spec.kind == "conv":
            p = ConvParams(net.params[f"{name}.kernels"], net.params[f"{name}.bias"],
                           spec.stride, spec.pad)
            x, c = kernels.conv2d(x, p, with_relu=spec.relu)
            entry = ("conv", name, c)
        elif spec.kind == "maxpool":
            x, c = kernels.maxpool(x, spec.window, spec.stride)
            entry = ("maxpool", name, c)
        elif spec.kind == "lrn":
            x, c = kernels.lrn(x, spec.k, spec.n, spec.alpha, spec.beta)
            entry = ("lrn", name, c)
        elif spec.kind == "fc":
            pre_shape = x.shape
            flat = x.reshape(-1)
            y, c = kernels.fully_connected(flat, net.params[f"{name}.weight"],
                                           net.params[f"{name}.bias"])
            mask = (y > 0) if spec.relu else None
            x = np.maximum(y, 0) if spec.relu else y
            entry = ("fc", name, (c, pre_shape, mask))
        else:  # dropout
            x, mask = kernels.dropout(x, spec.rate, mode, rng)
            entry = ("dropout", name, mask)
        if train:
            caches.append(entry)

    score = float(x[0])
    if not np.isfinite(score):
        raise FloatingPointError("network produced a non-finite score")
    return score, caches


def backward_pair(net: Network, forward_cache, dL_df: float) -> dict[str, np.ndarray]:
    """Chain rule of dL_df * score through every layer; returns a gradient map
    keyed like net.params.  Call repeatedly and sum the maps to accumulate."""
    if forward_cache is None:
        raise ValueError("backward_pair needs a train-mode forward cache")
    g = np.array([dL_df], dtype=net.dtype)
    grads: dict[str, np.ndarray] = {}
    for kind, name, c in reversed(forward_cache):
        if kind == "fc":
            fc_cache, pre_shape, mask = c
            if mask is not None:
                g = g * mask
            g, gw, gb = kernels.fc_backward(fc_cache, g)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
            g = g.reshape(pre_shape)
        elif kind == "conv":
            g, gk, gb = kernels.conv2d_backward(c, g)
            grads[f"{name}.kernels"] = gk
            grads[f"{name}.bias"] = gb
        elif kind == "maxpool":
            g = kernels.maxpool_backward(c, g)
        elif kind == "lrn":
            g = kernels.lrn_backward(c, g)
        else:  # dropout
            g = g * c
    return grads


def accumulate_grads(total: dict[str, np.ndarray], part: dict[str, np.ndarray],
                     scale: float = 1.0) -> dict[str, np.ndarray]:
    """total += scale * part, creating entries as needed."""
    for name, g in part.items():
        if name in total:
            total[name] += scale * g
        else:
            total[name] = scale * g if scale != 1.0 else g.copy()
    return total


@dataclass
class Checkpoint:
    """Everything needed to reconstruct a network and resume training."""

    version: int
    config: NetworkConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def to_network(self) -> Network:
        meta = dict(self.metadata)
        means = meta.get("channel_means")
        net = Network(self.config, {k: v.copy() for k, v in self.params.items()},
                      dtype=next(iter(self.params.values())).dtype if self.params else np.float32,
                      seed=meta.get("seed"),
                      channel_means=None if means is None else np.asarray(means, dtype=np.float32),
                      metadata=meta)
        return net


def checkpoint_from(net: Network, **metadata) -> Checkpoint:
    meta = dict(net.metadata)
    meta.update(metadata)
    if net.channel_means is not None:
        meta["channel_means"] = [float(v) for v in net.channel_means]
    if net.seed is not None:
        meta.setdefault("seed", int(net.seed))
    return Checkpoint(CHECKPOINT_VERSION, net.config,
                      {k: v.copy() for k, v in net.params.items()}, meta)


def save_checkpoint(obj: Network | Checkpoint, path) -> None:
    """Write the bit-exact binary format:

    magic "DRNK" | u32 version | u32 blob length + UTF-8 canonical JSON blob
    (config + metadata) | u32 array count | per array: u32 name length + name,
    u8 dtype code (0 = f32, 1 = f64), u8 rank, u64 extents, raw LE data.
    """
    cp = obj if isinstance(obj, Checkpoint) else checkpoint_from(obj)
    blob = json.dumps({"config": cp.config.to_dict(), "metadata": cp.metadata},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", cp.version))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(cp.params)))
        for name, arr in cp.params.items():
            enc = name.encode("utf-8")
            code = _CODE_FOR_KIND.get(arr.dtype.name)
            if code is None:
                raise CheckpointError(f"unsupported parameter dtype {arr.dtype} for {name!r}")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_checkpoint(path) -> Network:
    """Read a checkpoint, validating magic, version and per-array lengths.
    Truncation errors name the array being read."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(blob_len, "header").decode("utf-8"))
        config = NetworkConfig.from_dict(header["config"])
        metadata = header.get("metadata", {})
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e

    (count,) = struct.unpack("<I", take(4, "array count"))
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"array {i} name length"))
        name = take(name_len, f"array {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"array {name!r} dtype/rank"))
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"array {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"array {name!r} extents"))
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE_CODES[code].itemsize
        raw = take(nbytes, f"array {name!r} data")
        params[name] = np.frombuffer(raw, dtype=_DTYPE_CODES[code]).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last array")

    cp = Checkpoint(version, config, params, metadata)
    return cp.to_network()


def require_matching_config(cp_config: NetworkConfig, expected: NetworkConfig) -> None:
    """Fine-tune guard: the loaded architecture must equal the expected one."""
    if cp_config != expected:
        raise CheckpointError(
            "checkpoint config does not match the requested network: "
            f"checkpoint preset {cp_config.preset!r} input {cp_config.input_side}, "
            f"expected preset {expected.preset!r} input {expected.input_side}")
