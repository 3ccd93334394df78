"""Shared value types, configuration, RNG, and checkpoint serialization."""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

LOG_THETA_MIN = -8.0
LOG_THETA_MAX = 8.0

CHECKPOINT_MAGIC = b"SUFC"
CHECKPOINT_VERSION = 1

ROLES = ("teacher", "student", "discriminator")


class ShapeError(ValueError):
    """A tensor violated a shape or divisibility contract."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint config does not match the network it is loaded into."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters for the 5-stage dehazing U-Net."""

    embed_dims: tuple[int, ...] = (16, 32, 64, 32, 16)
    depths: tuple[int, ...] = (1, 1, 2, 1, 1)
    window_size: int = 4
    num_heads: tuple[int, ...] = (1, 2, 4, 2, 1)
    mlp_ratio: float = 2.0
    kl_tap_stage: int = 2
    mdb_fusion: bool = True          # residual conv fusion after the DF stack
    input_skip: bool = False         # global hazy-input skip at the output
    ueb_on_image: bool = False       # feed the UEB the dehazed image instead of decoder features

    def __post_init__(self):
        object.__setattr__(self, "embed_dims", tuple(int(d) for d in self.embed_dims))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        if not (len(self.embed_dims) == len(self.depths) == len(self.num_heads) == 5):
            raise ValueError("embed_dims, depths and num_heads must each have 5 stages")
        if any(d <= 0 for d in self.embed_dims + self.depths + self.num_heads):
            raise ValueError("embed_dims, depths and num_heads must be positive")
        for dim, heads in zip(self.embed_dims, self.num_heads):
            if dim % heads != 0:
                raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        if self.window_size <= 0:
            raise ValueError("window_size must be positive")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if not 0 <= self.kl_tap_stage <= 4:
            raise ValueError("kl_tap_stage must be in [0, 4]")

    @property
    def size_divisor(self) -> int:
        # two stride-2 downsamplings, each level must stay window-aligned
        return self.window_size * 4


@dataclass(frozen=True)
class LossWeights:
    """The six loss weights of the composite objectives."""

    lambda1: float = 1.0
    lambda2: float = 1e-2
    lambda3: float = 2.0
    lambda4: float = 1e-2
    lambda5: float = 1e-5
    lambda6: float = 1e-6

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


def validate_image_batch(data: torch.Tensor, divisor: int | None = None) -> torch.Tensor:
    """Check the [B,3,H,W] / values-in-[0,1] contract of an image batch."""
    if data.ndim != 4 or data.shape[1] != 3:
        raise ShapeError(f"image batch must be [B,3,H,W], got {tuple(data.shape)}")
    if not torch.isfinite(data).all():
        raise ShapeError("image batch contains non-finite values")
    if data.min() < 0 or data.max() > 1:
        raise ShapeError("image batch values must lie in [0, 1]")
    if divisor is not None:
        _, _, h, w = data.shape
        if h % divisor or w % divisor:
            raise ShapeError(
                f"spatial size {h}x{w} not divisible by {divisor} "
                "(window_size x 4 for the two-level U-Net)"
            )
    return data


def clamp_log_theta(log_theta: torch.Tensor) -> torch.Tensor:
    return log_theta.clamp(LOG_THETA_MIN, LOG_THETA_MAX)


def seeded_rng(seed: int) -> torch.Generator:
    """Deterministic random stream; identical seeds give identical draws."""
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


def split_seed(parent_seed: int, index: int) -> int:
    """Derive an independent child seed; stable across platforms and runs."""
    digest = hashlib.sha256(struct.pack("<QQ", parent_seed & 0xFFFF_FFFF_FFFF_FFFF, index)).digest()
    return struct.unpack("<Q", digest[:8])[0]


@dataclass
class Checkpoint:
    version: int
    role: str
    tensors: dict[str, np.ndarray]
    config: NetConfig
    rng_state: bytes = b""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def sha256(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype=np.float32).tobytes())
        return h.hexdigest()


_CONFIG_BOOL_KEYS = ("mdb_fusion", "input_skip", "ueb_on_image")


def _config_to_text(cfg: NetConfig) -> str:
    lines = [
        "embed_dims=" + ",".join(str(d) for d in cfg.embed_dims),
        "depths=" + ",".join(str(d) for d in cfg.depths),
        f"window_size={cfg.window_size}",
        "num_heads=" + ",".join(str(h) for h in cfg.num_heads),
        f"mlp_ratio={cfg.mlp_ratio!r}",
        f"kl_tap_stage={cfg.kl_tap_stage}",
    ]
    lines += [f"{k}={int(getattr(cfg, k))}" for k in _CONFIG_BOOL_KEYS]
    return "\n".join(lines)


def _config_from_text(text: str) -> NetConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    kwargs = {}
    for key in ("embed_dims", "depths", "num_heads"):
        if key in kv:
            kwargs[key] = tuple(int(v) for v in kv[key].split(","))
    if "window_size" in kv:
        kwargs["window_size"] = int(kv["window_size"])
    if "mlp_ratio" in kv:
        kwargs["mlp_ratio"] = float(kv["mlp_ratio"])
    if "kl_tap_stage" in kv:
        kwargs["kl_tap_stage"] = int(kv["kl_tap_stage"])
    for key in _CONFIG_BOOL_KEYS:
        if key in kv:
            kwargs[key] = bool(int(kv[key]))
    return NetConfig(**kwargs)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write a checkpoint atomically (write-then-rename); round-trips bit-exactly."""
    path = os.fspath(path)
    config_blob = _config_to_text(ckpt.config).encode()
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<B", ROLES.index(ckpt.role)))
            fh.write(struct.pack("<I", len(config_blob)))
            fh.write(config_blob)
            fh.write(struct.pack("<I", len(ckpt.rng_state)))
            fh.write(ckpt.rng_state)
            fh.write(struct.pack("<I", len(ckpt.tensors)))
            for name in sorted(ckpt.tensors):
                arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
                name_b = name.encode()
                fh.write(struct.pack("<H", len(name_b)))
                fh.write(name_b)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                payload = arr.tobytes()
                fh.write(struct.pack("<I", zlib.crc32(payload)))
                fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike, expected_config: NetConfig | None = None) -> Checkpoint:
    """Read and fully validate a checkpoint; rejects corruption and config mismatch."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()

    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint file")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (role_idx,) = struct.unpack("<B", take(1))
    if role_idx >= len(ROLES):
        raise CheckpointError(f"{path}: unknown role index {role_idx}")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        config = _config_from_text(bytes(take(cfg_len)).decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: bad embedded config: {exc}") from exc
    (rng_len,) = struct.unpack("<I", take(4))
    rng_state = bytes(take(rng_len))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (crc,) = struct.unpack("<I", take(4))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
        payload = bytes(take(n_bytes))
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: checksum mismatch for tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError(f"{path}: trailing garbage after checkpoint payload")

    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(
            f"{path}: checkpoint config {config} does not match expected {expected_config}"
        )
    return Checkpoint(version=version, role=ROLES[role_idx], tensors=tensors,
                      config=config, rng_state=rng_state)


@dataclass(frozen=True)
class RunConfig:
    """Flat key=value run configuration (network + loss weights + schedule)."""

    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    batch_size: int = 2
    epochs_teacher: int = 100
    epochs_student: int = 60
    seed: int = 0


def load_run_config(path: str | os.PathLike) -> RunConfig:
    """Parse the flat key=value config file format."""
    with open(path) as fh:
        text = fh.read()
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"bad config line: {line!r}")
        kv[key.strip()] = value.strip()

    net = _config_from_text(text)
    lam = {f"lambda{i}": float(kv[f"lambda{i}"]) for i in range(1, 7) if f"lambda{i}" in kv}
    weights = LossWeights(**lam)
    run = RunConfig(net=net, weights=weights)
    if "lr" in kv:
        run = replace(run, lr=float(kv["lr"]))
    if "batch_size" in kv:
        run = replace(run, batch_size=int(kv["batch_size"]))
    if "epochs_teacher" in kv:
        run = replace(run, epochs_teacher=int(kv["epochs_teacher"]))
    if "epochs_student" in kv:
        run = replace(run, epochs_student=int(kv["epochs_student"]))
    if "seed" in kv:
        run = replace(run, seed=int(kv["seed"]))
    return run
