"""Detector (encoder-decoder) and conditional discriminator networks, plus checkpoints."""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ShapeError

# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class DetectorSpec:
    in_channels: int = 1
    base_filters: int = 32
    max_filters: int = 512
    depth: int = 5
    kernel_size: int = 5
    pool: int = 2
    n_classes: int = 7
    multitask: bool = True

    @property
    def encoder_widths(self) -> list[int]:
        return [min(self.base_filters * 2 ** i, self.max_filters) for i in range(self.depth)]

    @property
    def decoder_widths(self) -> list[int]:
        # mirror of the encoder: each block halves back down, ending at base_filters
        enc = self.encoder_widths
        return enc[-2::-1] + [enc[0]]

    @property
    def downsampling(self) -> int:
        return self.pool ** self.depth

    def encoder_layers(self) -> list[tuple[int, int]]:
        """``(kernel, stride)`` of every layer up to the bottleneck."""
        out = []
        for _ in range(self.depth):
            out += [(self.kernel_size, 1), (self.pool, self.pool)]
        return out


DISCRIMINATOR_POOLS = (4, 4, 4, 2, 2, 2)


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 2
    base_filters: int = 32
    max_filters: int = 512
    kernel_size: int = 5
    pools: tuple[int, ...] = DISCRIMINATOR_POOLS

    @classmethod
    def for_size(cls, size: int, **kw) -> "DiscriminatorSpec":
        """Six blocks whose pool factors shrink ``size`` to exactly 1.

        Follows (4, 4, 4, 2, 2, 2) and uses factor 1 once the map is 1 px wide,
        so 512 gives the full chain and 64 gives (4, 4, 4, 1, 1, 1).
        """
        pools, rem = [], size
        for p in DISCRIMINATOR_POOLS:
            f = p if rem % p == 0 and rem >= p else (2 if rem % 2 == 0 and rem >= 2 else 1)
            pools.append(f)
            rem //= f
        if rem != 1:
            raise ShapeError(f"size {size} cannot be reduced to 1 with pools {DISCRIMINATOR_POOLS}")
        return cls(pools=tuple(pools), **kw)

    @property
    def widths(self) -> list[int]:
        return [min(self.base_filters * 2 ** i, self.max_filters) for i in range(len(self.pools))]

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.pools))

    def encoder_layers(self) -> list[tuple[int, int]]:
        out = []
        for p in self.pools:
            out += [(self.kernel_size, 1), (p, p)]
        return out


def audit_receptive_field(spec) -> int:
    """Receptive field (px) of the bottleneck via ``rf += (k - 1) * jump; jump *= stride``."""
    layers = spec.encoder_layers() if hasattr(spec, "encoder_layers") else spec
    rf, jump = 1, 1
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf


def spatial_trace(spec, size: int) -> list[int]:
    pools = spec.pools if isinstance(spec, DiscriminatorSpec) else [spec.pool] * spec.depth
    trace = [size]
    for p in pools:
        trace.append(trace[-1] // p)
    return trace


# ---------------------------------------------------------------------------
# networks


def conv_block(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride=1, padding=k // 2),
                         nn.BatchNorm2d(cout, momentum=0.1), nn.ReLU(inplace=True))


class Detector(nn.Module):
    """Plain encoder-decoder; per-pixel 7-class logits and an optional contour logit."""

    def __init__(self, spec: DetectorSpec):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        enc, dec = spec.encoder_widths, spec.decoder_widths
        cins = [spec.in_channels] + enc[:-1]
        self.encoder = nn.ModuleList([conv_block(a, b, k) for a, b in zip(cins, enc)])
        self.pool = nn.MaxPool2d(spec.pool)
        self.decoder = nn.ModuleList([conv_block(a, b, k) for a, b in zip([enc[-1]] + dec[:-1], dec)])
        self.landmark_head = nn.Conv2d(dec[-1], spec.n_classes, 1)
        # built last so baseline and multitask models share initial weights under one seed
        self.contour_head = nn.Conv2d(dec[-1], 1, 1) if spec.multitask else None

    def forward(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        d = self.spec.downsampling
        if h % d or w % d:
            raise ShapeError(f"input {h}x{w} must be divisible by {d}")
        for block in self.encoder:
            x = self.pool(block(x))
        for block in self.decoder:
            x = block(F.interpolate(x, scale_factor=self.spec.pool, mode="nearest"))
        logits = self.landmark_head(x)
        contour = self.contour_head(x) if self.contour_head is not None else None
        return logits, contour


class Discriminator(nn.Module):
    """Scores an (image, contour map) pair; returns the pre-sigmoid logit per item."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        cins = [spec.in_channels] + widths[:-1]
        self.blocks = nn.ModuleList([conv_block(a, b, spec.kernel_size) for a, b in zip(cins, widths)])
        self.pools = spec.pools
        self.head = nn.Linear(widths[-1], 1)

    def forward(self, image: torch.Tensor, contour: torch.Tensor) -> torch.Tensor:
        x = torch.cat([image, contour], dim=1)
        h, w = x.shape[-2:]
        d = self.spec.downsampling
        if h % d or w % d:
            raise ShapeError(f"input {h}x{w} must be divisible by {d}")
        for block, p in zip(self.blocks, self.pools):
            x = block(x)
            if p > 1:
                x = F.max_pool2d(x, p)
        return self.head(x.mean(dim=(2, 3))).squeeze(1)

    def probability(self, image, contour, eps: float = 1e-7) -> torch.Tensor:
        return torch.sigmoid(self(image, contour)).clamp(eps, 1 - eps)


def build_detector(spec: DetectorSpec) -> Detector:
    return Detector(spec)


def build_discriminator(spec: DiscriminatorSpec) -> Discriminator:
    return Discriminator(spec)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (names, dtypes, values)."""
    h = hashlib.sha256()
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CMRK"
FORMAT_VERSION = 1
KINDS = ("detector", "discriminator", "oracle")


@dataclass
class Checkpoint:
    kind: str
    spec: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def capture_rng_state(np_rng: np.random.Generator | None = None) -> dict:
    state = {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")}
    if np_rng is not None:
        state["numpy"] = np_rng.bit_generator.state
    return state


def restore_torch_rng(state: dict) -> None:
    if "torch" in state:
        raw = np.frombuffer(base64.b64decode(state["torch"]), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))


def checkpoint_from_module(module: nn.Module, step: int = 0, rng_state: dict | None = None,
                           cfg_hash: str = "", meta: dict | None = None) -> Checkpoint:
    kind = "detector" if isinstance(module, Detector) else "discriminator"
    params = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
    return Checkpoint(kind, asdict(module.spec), params, step, rng_state or {}, cfg_hash, meta or {})


def module_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    if ckpt.kind == "detector":
        model = Detector(DetectorSpec(**ckpt.spec))
    elif ckpt.kind == "discriminator":
        spec = dict(ckpt.spec)
        spec["pools"] = tuple(spec["pools"])
        model = Discriminator(DiscriminatorSpec(**spec))
    else:
        raise CheckpointError(f"checkpoint kind {ckpt.kind!r} has no network")
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    meta = {
        "format_version": ckpt.format_version, "kind": ckpt.kind, "spec": ckpt.spec,
        "step": ckpt.step, "rng_state": ckpt.rng_state, "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            tag = le.dtype.str.encode("ascii")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<B", len(tag)) + tag)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = np.ascontiguousarray(le).tobytes()
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = 4
    version, mlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta: dict[str, Any] = json.loads(data[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (t,) = struct.unpack_from("<B", data, off)
        off += 1
        dtype = np.dtype(data[off:off + t].decode("ascii"))
        off += t
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        params[name] = np.frombuffer(data, dtype=dtype, count=nbytes // max(dtype.itemsize, 1),
                                     offset=off).reshape(shape).copy()
        off += nbytes
    return Checkpoint(meta["kind"], meta["spec"], params, meta["step"], meta["rng_state"],
                      meta["config_hash"], meta.get("meta", {}), meta["format_version"])
