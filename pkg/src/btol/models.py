"""The four networks of the adaptation setup and their checkpoint format.

* adapter A: ``x + f(x)`` where ``f`` is ``k`` conv blocks and the last
  block is zero-initialised, so a fresh adapter is the exact identity;
* segmentation nets (source S, target T, simulator M) in two desk-scale
  flavours, ``tinyA`` (plain conv stack) and ``tinyB`` (encoder/decoder
  with one skip).

Checkpoint layout (all little-endian)::

    b"BTOL1" | u32 version | u32 meta_len | meta JSON | u32 n_tensors
    per tensor: u16 name_len | name | u8 ndim | ndim * u32 dims | f32 data
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .netcore import (DTYPE, Param, ParamSet, Tensor, add, avg_pool2, concat_channels,
                      conv2d, relu, upsample2)
from .rng import SplitMix64

MAGIC = b"BTOL1"
CHECKPOINT_VERSION = 1
SEGNET_ARCHS = ("tinyA", "tinyB")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    k: int = 3
    in_channels: int = 1
    hidden_channels: int = 16
    kernel: int = 3

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"adapter needs k >= 1 blocks, got {self.k}")
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ValueError("adapter channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"adapter kernel must be odd, got {self.kernel}")


@dataclass(frozen=True)
class SegNetSpec:
    arch: str = "tinyA"
    in_channels: int = 1
    num_classes: int = 3
    width: int = 16

    def validate(self) -> None:
        if self.arch not in SEGNET_ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {SEGNET_ARCHS}")
        if self.in_channels < 1 or self.width < 1:
            raise ValueError("segnet channel counts must be positive")
        if self.num_classes < 2:
            raise ValueError("segnet needs at least 2 classes")


class Network:
    """Named parameters plus a forward function over :class:`Tensor`."""

    kind = "network"

    def __init__(self, seed: int = 0):
        self.params = ParamSet()
        self.seed = seed
        self.step = 0

    def spec_dict(self) -> dict:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        return self.forward(x if isinstance(x, Tensor) else Tensor(x))

    def freeze(self) -> None:
        self.params.freeze(True)

    def thaw(self) -> None:
        self.params.freeze(False)

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def _conv(self, name: str, cin: int, cout: int, k: int, rng: SplitMix64, zero: bool = False) -> None:
        shape = (cout, cin, k, k)
        if zero:
            w = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in, fan_out = cin * k * k, cout * k * k
            w = rng.uniform_sym(shape, float(np.sqrt(6.0 / (fan_in + fan_out))))
        self.params.add(f"{name}.weight", w)
        self.params.add(f"{name}.bias", np.zeros(cout, dtype=DTYPE))

    def _apply(self, name: str, x: Tensor) -> Tensor:
        w = self.params[f"{name}.weight"]
        return conv2d(x, w, self.params[f"{name}.bias"], stride=1, pad=w.shape[-1] // 2)


class Adapter(Network):
    kind = "adapter"

    def __init__(self, spec: AdapterSpec, seed: int = 0):
        spec.validate()
        super().__init__(seed)
        self.spec = spec
        rng = SplitMix64(seed)
        chans = [spec.in_channels] + [spec.hidden_channels] * (spec.k - 1) + [spec.in_channels]
        for i in range(spec.k):
            self._conv(f"block{i}", chans[i], chans[i + 1], spec.kernel, rng, zero=(i == spec.k - 1))

    def spec_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.spec)}

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(self.spec.k):
            h = self._apply(f"block{i}", h)
            if i < self.spec.k - 1:
                h = relu(h)
        return add(x, h)


class SegNet(Network):
    kind = "segnet"

    def __init__(self, spec: SegNetSpec, seed: int = 0):
        spec.validate()
        super().__init__(seed)
        self.spec = spec
        rng = SplitMix64(seed)
        c, w, k = spec.in_channels, spec.width, spec.num_classes
        if spec.arch == "tinyA":
            self._conv("conv0", c, w, 3, rng)
            self._conv("conv1", w, w, 3, rng)
            self._conv("conv2", w, w, 3, rng)
            self._conv("head", w, k, 1, rng)
        else:
            self._conv("enc", c, w, 3, rng)
            self._conv("mid0", w, 2 * w, 3, rng)
            self._conv("mid1", 2 * w, w, 3, rng)
            self._conv("dec", 2 * w, w, 3, rng)
            self._conv("head", w, k, 1, rng)

    def spec_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.spec)}

    def forward(self, x: Tensor) -> Tensor:
        if self.spec.arch == "tinyA":
            h = relu(self._apply("conv0", x))
            h = relu(self._apply("conv1", h))
            h = relu(self._apply("conv2", h))
            return self._apply("head", h)
        skip = relu(self._apply("enc", x))
        h = avg_pool2(skip)
        h = relu(self._apply("mid0", h))
        h = relu(self._apply("mid1", h))
        h = upsample2(h)
        h = relu(self._apply("dec", concat_channels(h, skip)))
        return self._apply("head", h)


class Composed(Network):
    """``outer(inner(x))`` sharing the children's parameter objects."""

    kind = "composed"

    def __init__(self, inner: Network, outer: Network):
        super().__init__(0)
        self.inner, self.outer = inner, outer
        for prefix, net in (("inner", inner), ("outer", outer)):
            for name, p in net.params.items():
                self.params[f"{prefix}.{name}"] = p

    def spec_dict(self) -> dict:
        return {"kind": self.kind, "inner": self.inner.spec_dict(), "outer": self.outer.spec_dict()}

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(self.inner(x))


def build_adapter(spec: AdapterSpec = AdapterSpec(), seed: int = 0) -> Adapter:
    return Adapter(spec, seed)


def build_segnet(spec: SegNetSpec = SegNetSpec(), seed: int = 0) -> SegNet:
    return SegNet(spec, seed)


def clone_into_simulator(target: Network) -> Network:
    """Independent deep copy of ``target`` with fresh optimiser state."""
    sim = copy.deepcopy(target)
    for p in sim.params.values():
        p.grad = None
        p.set_frozen(False)
        p.reset_optimizer()
    sim.step = 0
    return sim


def network_from_spec(spec: dict, seed: int = 0) -> Network:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == Adapter.kind:
        return Adapter(AdapterSpec(**spec), seed)
    if kind == SegNet.kind:
        return SegNet(SegNetSpec(**spec), seed)
    raise CheckpointError(f"cannot rebuild network of kind {kind!r}")


# --------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(net: Network) -> bytes:
    meta = {"spec": net.spec_dict(), "seed": int(net.seed), "step": int(net.step)}
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_raw)), meta_raw,
             struct.pack("<I", len(net.params))]
    for name, p in net.params.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf: bytes) -> Network:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a BTOL1 checkpoint")
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    net = network_from_spec(meta["spec"], seed=meta.get("seed", 0))
    net.step = meta.get("step", 0)
    (count,) = r.unpack("<I")
    loaded = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        loaded[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(DTYPE).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    if set(loaded) != set(net.params):
        raise CheckpointError(f"tensor names {sorted(loaded)} do not match architecture {sorted(net.params)}")
    for name, p in net.params.items():
        if loaded[name].shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {loaded[name].shape}, expected {p.data.shape}")
        p.data = loaded[name].copy()
    return net


def load_checkpoint(path) -> Network:
    return checkpoint_from_bytes(Path(path).read_bytes())


def params_equal(a: Network, b: Network) -> bool:
    """Bitwise equality of every parameter tensor."""
    if list(a.params) != list(b.params):
        return False
    return all(pa.data.tobytes() == pb.data.tobytes() for pa, pb in zip(a.params.values(), b.params.values()))


__all__ = [
    "AdapterSpec", "SegNetSpec", "Network", "Adapter", "SegNet", "Composed", "Param",
    "build_adapter", "build_segnet", "clone_into_simulator", "save_checkpoint",
    "load_checkpoint", "checkpoint_bytes", "checkpoint_from_bytes", "CheckpointError",
    "params_equal", "network_from_spec",
]
