"""Frozen CNN backbone + per-block adapters + prototype layer + linear head.

The trainable surface is split into three named groups:

* ``omega`` -- backbone conv kernels and biases, frozen after (optional)
  central warmup,
* ``alpha`` -- the adapter bottleneck kernels attached at the end of every
  block,
* ``phi``   -- prototype tensors plus the prototype-to-class head weights.

Only ``alpha`` and ``phi`` are ever communicated or optimized during
federated training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ProtocolError
from .tensor import Tensor

_CKPT_MAGIC = b"PFCK"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class BackboneConfig:
    """Shape of the convolutional feature extractor."""

    num_blocks: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    in_channels: int = 1
    image_hw: tuple[int, int] = (64, 64)
    kernel_size: int = 3
    pool_size: int = 2
    freeze_mode: str = "warmup-pretrained"  # or "frozen-random"

    def validate(self):
        if self.num_blocks < 1:
            raise ConfigurationError("backbone needs at least one block")
        if len(self.channels) != self.num_blocks:
            raise ConfigurationError(
                f"{self.num_blocks} blocks but {len(self.channels)} channel counts"
            )
        if any(c < 1 for c in self.channels):
            raise ConfigurationError("channel counts must be positive")
        if self.freeze_mode not in ("warmup-pretrained", "frozen-random"):
            raise ConfigurationError(f"unknown freeze mode '{self.freeze_mode}'")
        h, w = self.feature_hw()
        if h < 1 or w < 1:
            raise ConfigurationError(
                f"input {self.image_hw} collapses to {h}x{w} after {self.num_blocks} blocks"
            )

    def feature_hw(self) -> tuple[int, int]:
        h, w = self.image_hw
        for _ in range(self.num_blocks):
            h //= self.pool_size
            w //= self.pool_size
        return h, w


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter_rank: int = 4
    protos_per_class: int = 5
    proto_hw: tuple[int, int] = (1, 1)
    num_classes: int = 2
    precision: str = "double"  # or "single"

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def num_prototypes(self) -> int:
        return self.protos_per_class * self.num_classes

    def validate(self):
        self.backbone.validate()
        if self.precision not in ("double", "single"):
            raise ConfigurationError(f"unknown precision '{self.precision}'")
        if self.adapter_rank < 1:
            raise ConfigurationError("adapter rank must be >= 1")
        for c in self.backbone.channels:
            if self.adapter_rank >= c:
                raise ConfigurationError(
                    f"adapter rank {self.adapter_rank} must be smaller than block depth {c}"
                )
        if self.protos_per_class < 1:
            raise ConfigurationError("every class needs at least one prototype")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        fh, fw = self.backbone.feature_hw()
        ph, pw = self.proto_hw
        if ph > fh or pw > fw:
            raise ConfigurationError(
                f"prototype extent {ph}x{pw} exceeds feature map {fh}x{fw}"
            )


@dataclass
class AdapterModule:
    """Residual bottleneck: h + relu(conv1x1(h, down)) conv1x1 up."""

    down: Tensor  # (r, D, 1, 1)
    up: Tensor  # (D, r, 1, 1)

    @property
    def rank(self) -> int:
        return self.down.data.shape[0]

    @property
    def depth(self) -> int:
        return self.down.data.shape[1]


@dataclass
class PrototypeLayer:
    prototypes: Tensor  # (m, D, h, w)
    class_ids: np.ndarray  # (m,) int

    def validate(self, num_classes: int):
        counts = np.bincount(self.class_ids, minlength=num_classes)
        if np.any(counts == 0):
            missing = int(np.argmin(counts))
            raise ConfigurationError(f"class {missing} has no prototypes")


@dataclass
class ClassificationHead:
    weights: Tensor  # (m, C), no bias


class ParamGroups:
    """The omega / alpha / phi partition as ordered name -> Tensor maps."""

    def __init__(self, omega: dict[str, Tensor], alpha: dict[str, Tensor], phi: dict[str, Tensor]):
        names = list(omega) + list(alpha) + list(phi)
        if len(set(names)) != len(names):
            raise ConfigurationError("parameter groups must use disjoint names")
        self.omega = omega
        self.alpha = alpha
        self.phi = phi

    def group(self, name: str) -> dict[str, Tensor]:
        return getattr(self, name)

    def named(self) -> Iterator[tuple[str, str, Tensor]]:
        for gname in ("omega", "alpha", "phi"):
            for tname, t in self.group(gname).items():
                yield gname, tname, t

    def trainable(self) -> list[Tensor]:
        return [t for _, _, t in self.named() if t.trainable]

    @staticmethod
    def flatten(group: dict[str, Tensor]) -> np.ndarray:
        if not group:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in group.values()])

    @staticmethod
    def unflatten(group: dict[str, Tensor], vec: np.ndarray):
        offset = 0
        for t in group.values():
            n = t.data.size
            t.data = vec[offset : offset + n].reshape(t.data.shape).astype(t.data.dtype, copy=True)
            offset += n
        if offset != vec.size:
            raise ConfigurationError(
                f"flat vector has {vec.size} elements, group expects {offset}"
            )

    def arrays(self, gname: str) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.group(gname).items()}


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class PrototypeModel:
    """One client's full network; owns its parameter groups."""

    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        dtype = config.dtype
        bb = config.backbone
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))

        omega: dict[str, Tensor] = {}
        alpha: dict[str, Tensor] = {}
        self.adapters: list[AdapterModule] = []
        cin = bb.in_channels
        k = bb.kernel_size
        for b, cout in enumerate(bb.channels):
            kernel = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), trainable=True)
            bias = Tensor(np.zeros(cout, dtype=dtype), trainable=True)
            omega[f"block{b}.kernel"] = kernel
            omega[f"block{b}.bias"] = bias
            down = Tensor(
                _he_uniform(rng, (config.adapter_rank, cout, 1, 1), cout, dtype), trainable=True
            )
            up = Tensor(
                np.zeros((cout, config.adapter_rank, 1, 1), dtype=dtype), trainable=True
            )
            alpha[f"adapter{b}.down"] = down
            alpha[f"adapter{b}.up"] = up
            self.adapters.append(AdapterModule(down=down, up=up))
            cin = cout

        m = config.num_prototypes
        depth = bb.channels[-1]
        ph, pw = config.proto_hw
        protos = Tensor(rng.uniform(0.0, 1.0, size=(m, depth, ph, pw)).astype(dtype), trainable=True)
        class_ids = np.repeat(np.arange(config.num_classes), config.protos_per_class)
        head_w = np.full((m, config.num_classes), -0.5, dtype=dtype)
        head_w[np.arange(m), class_ids] = 1.0
        head = Tensor(head_w, trainable=True)
        phi = {"prototypes": protos, "head": head}

        self.proto_layer = PrototypeLayer(prototypes=protos, class_ids=class_ids)
        self.proto_layer.validate(config.num_classes)
        self.head = ClassificationHead(weights=head)
        self.params = ParamGroups(omega, alpha, phi)
        if bb.freeze_mode == "frozen-random":
            self.freeze_backbone()

    def freeze_backbone(self):
        for t in self.params.omega.values():
            t.trainable = False
            t.zero_grad()

    def clone(self) -> "PrototypeModel":
        """Copy with fresh alpha/phi tensors and shared frozen omega tensors."""
        if any(t.trainable for t in self.params.omega.values()):
            raise ConfigurationError("clone requires a frozen backbone")
        other = object.__new__(PrototypeModel)
        other.config = self.config
        omega = self.params.omega  # shared: read-only once frozen
        alpha = {k: Tensor(t.data.copy(), trainable=True) for k, t in self.params.alpha.items()}
        phi = {k: Tensor(t.data.copy(), trainable=True) for k, t in self.params.phi.items()}
        other.params = ParamGroups(omega, alpha, phi)
        other.adapters = [
            AdapterModule(down=alpha[f"adapter{b}.down"], up=alpha[f"adapter{b}.up"])
            for b in range(self.config.backbone.num_blocks)
        ]
        other.proto_layer = PrototypeLayer(
            prototypes=phi["prototypes"], class_ids=self.proto_layer.class_ids.copy()
        )
        other.head = ClassificationHead(weights=phi["head"])
        return other

    # forward pieces -------------------------------------------------------

    def backbone_forward(self, x: Tensor, use_adapters: bool = True) -> Tensor:
        bb = self.config.backbone
        if x.data.ndim != 4 or x.data.shape[1] != bb.in_channels or x.data.shape[2:] != tuple(bb.image_hw):
            raise ConfigurationError(
                f"input shape {x.data.shape} does not match configured "
                f"{bb.in_channels}x{bb.image_hw[0]}x{bb.image_hw[1]} images"
            )
        h = x
        pad = bb.kernel_size // 2
        for b in range(bb.num_blocks):
            h = T.conv2d(h, self.params.omega[f"block{b}.kernel"],
                         self.params.omega[f"block{b}.bias"], stride=1, padding=pad)
            h = T.relu(h)
            h = T.maxpool2d(h, bb.pool_size, bb.pool_size)
            if use_adapters:
                h = adapter_forward(h, self.adapters[b])
        return h

    def prototype_similarities(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return prototype_similarities(z, self.proto_layer)

    def forward(self, x: Tensor, use_adapters: bool = True) -> tuple[Tensor, Tensor, Tensor]:
        """Full pass: (logits, distance_maps, similarity scores)."""
        z = self.backbone_forward(x, use_adapters=use_adapters)
        dmaps, scores = self.prototype_similarities(z)
        logits = head_logits(scores, self.head)
        return logits, dmaps, scores


def adapter_forward(h: Tensor, adapter: AdapterModule) -> Tensor:
    """h + relu(h * W_down) * W_up with 1x1 convolutions."""
    if h.data.shape[1] != adapter.depth:
        raise ConfigurationError(
            f"adapter depth {adapter.depth} does not match feature depth {h.data.shape[1]}"
        )
    mid = T.relu(T.conv2d(h, adapter.down, None))
    delta = T.conv2d(mid, adapter.up, None)
    return T.add(h, delta)


def prototype_similarities(z: Tensor, layer: PrototypeLayer) -> tuple[Tensor, Tensor]:
    """Distance maps (B, m, H-h+1, W-w+1) and scores (B, m) = -min distance."""
    dmaps = T.sq_l2_maps(z, layer.prototypes)
    scores = T.negate(T.spatial_min(dmaps))
    return dmaps, scores


def head_logits(scores: Tensor, head: ClassificationHead) -> Tensor:
    return T.linear(scores, head.weights)


def model_forward(x: Tensor, model: PrototypeModel, use_adapters: bool = True):
    return model.forward(x, use_adapters=use_adapters)


def init_params(config: ModelConfig, seed: int) -> ParamGroups:
    """Deterministic fresh parameter groups for the given seed."""
    return PrototypeModel(config, seed).params


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, then ordered (name, shape, raw LE data)
# records per group
# ---------------------------------------------------------------------------


def _write_str(buf: bytearray, s: str):
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def _read_str(data: bytes, offset: int) -> tuple[str, int]:
    if offset + 4 > len(data):
        raise ProtocolError(f"truncated string length at offset {offset}")
    (n,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + n > len(data):
        raise ProtocolError(f"truncated string at offset {offset}")
    return data[offset : offset + n].decode("utf-8"), offset + n


def _write_record(buf: bytearray, name: str, arr: np.ndarray):
    _write_str(buf, name)
    buf += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    for d in arr.shape:
        buf += struct.pack("<I", d)
    buf += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _read_record(data: bytes, offset: int) -> tuple[str, np.ndarray, int]:
    name, offset = _read_str(data, offset)
    if offset + 2 > len(data):
        raise ProtocolError(f"truncated record header at offset {offset}")
    code, ndim = struct.unpack_from("<BB", data, offset)
    offset += 2
    if code not in _CODE_DTYPES:
        raise ProtocolError(f"unknown dtype code {code} at offset {offset - 2}")
    dtype = _CODE_DTYPES[code]
    shape = []
    for _ in range(ndim):
        if offset + 4 > len(data):
            raise ProtocolError(f"truncated shape at offset {offset}")
        (d,) = struct.unpack_from("<I", data, offset)
        shape.append(d)
        offset += 4
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(data):
        raise ProtocolError(f"truncated tensor data at offset {offset}")
    arr = np.frombuffer(data[offset : offset + nbytes], dtype=dtype.newbyteorder("<"))
    arr = arr.astype(dtype).reshape(shape)
    return name, arr, offset + nbytes


def serialize_groups(groups: ParamGroups) -> bytes:
    buf = bytearray()
    buf += _CKPT_MAGIC
    buf += struct.pack("<I", _CKPT_VERSION)
    buf += struct.pack("<I", 3)
    for gname in ("omega", "alpha", "phi"):
        group = groups.group(gname)
        _write_str(buf, gname)
        buf += struct.pack("<I", len(group))
        for tname, t in group.items():
            _write_record(buf, tname, t.data)
    return bytes(buf)


def deserialize_groups(data: bytes) -> dict[str, dict[str, np.ndarray]]:
    if data[:4] != _CKPT_MAGIC:
        raise ProtocolError(f"bad checkpoint magic at offset 0: {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise ProtocolError(f"unsupported checkpoint version {version}")
    (ngroups,) = struct.unpack_from("<I", data, 8)
    offset = 12
    out: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(ngroups):
        gname, offset = _read_str(data, offset)
        (ntensors,) = struct.unpack_from("<I", data, offset)
        offset += 4
        group: dict[str, np.ndarray] = {}
        for _ in range(ntensors):
            tname, arr, offset = _read_record(data, offset)
            group[tname] = arr
        out[gname] = group
    if offset != len(data):
        raise ProtocolError(f"{len(data) - offset} trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path, groups: ParamGroups):
    with open(path, "wb") as f:
        f.write(serialize_groups(groups))


def load_checkpoint(path) -> dict[str, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return deserialize_groups(f.read())


def apply_checkpoint(model: PrototypeModel, loaded: dict[str, dict[str, np.ndarray]]):
    """Overwrite a model's tensors from a loaded checkpoint, validating shapes."""
    for gname in ("omega", "alpha", "phi"):
        group = model.params.group(gname)
        src = loaded.get(gname)
        if src is None or set(src) != set(group):
            raise ProtocolError(
                f"checkpoint group '{gname}' does not match the model "
                f"(have {sorted(src or ())}, expect {sorted(group)})"
            )
        for tname, t in group.items():
            if src[tname].shape != t.data.shape:
                raise ProtocolError(
                    f"checkpoint tensor '{tname}' has shape {src[tname].shape}, "
                    f"model expects {t.data.shape}"
                )
            np.copyto(t.data, src[tname].astype(t.data.dtype))
