"""2D generator / discriminator pairs and their on-disk checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class FrozenModelError(RuntimeError):
    """Raised when a frozen model is handed to a training loop."""


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int
    filters: tuple[int, int, int] = (24, 48, 96)
    n_res_blocks: int = 9
    out_channels: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if len(self.filters) != 3 or any(f < 1 for f in self.filters):
            raise ValueError(f"filters must be three positive ints, got {self.filters}")
        if self.n_res_blocks < 0:
            raise ValueError(f"n_res_blocks must be >= 0, got {self.n_res_blocks}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int
    filters: tuple[int, int, int, int] = (24, 48, 96, 192)

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if len(self.filters) != 4 or any(f < 1 for f in self.filters):
            raise ValueError(f"filters must be four positive ints, got {self.filters}")


def scale_config(cfg, n_f: float):
    """Rescale hidden widths so parameter count scales roughly by n_f.

    Parameters are quadratic in width, so each hidden filter count is
    multiplied by sqrt(n_f) and rounded (floor 1). Input/output channels
    are untouched.
    """
    if n_f <= 0:
        raise ValueError(f"n_f must be positive, got {n_f}")
    s = math.sqrt(n_f)
    scaled = tuple(max(1, round(f * s)) for f in cfg.filters)
    return dataclasses.replace(cfg, filters=scaled)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder / residual trunk / decoder image translator.

    Downsamples twice, so inputs are padded to a multiple of 4 on the fly
    and the output is cropped back; arbitrary slice shapes pass through.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        f1, f2, f3 = cfg.filters
        layers = [
            nn.Conv2d(cfg.in_channels, f1, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(f1),
            nn.ReLU(inplace=True),
            nn.Conv2d(f1, f2, 3, stride=2, padding=1),
            nn.InstanceNorm2d(f2),
            nn.ReLU(inplace=True),
            nn.Conv2d(f2, f3, 3, stride=2, padding=1),
            nn.InstanceNorm2d(f3),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(f3) for _ in range(cfg.n_res_blocks)]
        layers += [
            nn.ConvTranspose2d(f3, f2, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(f2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(f2, f1, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(f1),
            nn.ReLU(inplace=True),
            nn.Conv2d(f1, cfg.out_channels, 7, padding=3, padding_mode="reflect"),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        ph = (-h) % 4
        pw = (-w) % 4
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        y = self.model(x)
        return y[..., :h, :w]


class Discriminator(nn.Module):
    """Patch critic emitting an unbounded score map.

    Three stride-2 layers then two stride-1 layers shrink the input; the
    instance norms need more than one spatial element while training, so
    inputs must be at least 24 pixels on each side.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        f1, f2, f3, f4 = cfg.filters
        self.model = nn.Sequential(
            nn.Conv2d(cfg.in_channels, f1, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f1, f2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(f2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f2, f3, 4, stride=2, padding=1),
            nn.InstanceNorm2d(f3),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f3, f4, 4, stride=1, padding=1),
            nn.InstanceNorm2d(f4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f4, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.model(x)


def _init_weights(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    net = Generator(cfg)
    _init_weights(net, seed)
    return net


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    net = Discriminator(cfg)
    _init_weights(net, seed)
    return net


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def freeze(model: nn.Module) -> nn.Module:
    """Permanently switch a model to inference: no grads, eval mode."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    model._provo_frozen = True
    return model


def is_frozen(model: nn.Module) -> bool:
    return bool(getattr(model, "_provo_frozen", False))


def weights_digest(model: nn.Module) -> str:
    """sha256 over all parameters as little-endian float32, state_dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint format
#
#   bytes 0..7   magic "PROVOCK1"
#   bytes 8..11  u32 little-endian header length N
#   bytes 12..   N bytes of UTF-8 JSON header, then raw tensor data
#
# Header: {"version": 1, "kind": ..., "config": {...}, "fingerprint": ...,
#          "tensors": [{"name", "shape", "dtype"}, ...]}. Tensor data follows
# in header order as little-endian float32.

MAGIC = b"PROVOCK1"
CHECKPOINT_VERSION = 1


def config_fingerprint(kind: str, config: dict) -> str:
    blob = json.dumps({"kind": kind, "config": config}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["filters"] = list(d["filters"])
    return d


def save_checkpoint(path, model: nn.Module, kind: str | None = None) -> None:
    """Write a model's config and weights to the versioned binary format."""
    if kind is None:
        kind = "generator" if isinstance(model, Generator) else "discriminator"
    if kind not in ("generator", "discriminator"):
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    config = _config_dict(model.cfg)
    state = model.state_dict()
    tensors = []
    blobs = []
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(arr.tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "fingerprint": config_fingerprint(kind, config),
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a checkpoint file into (header, {tensor name: float32 array})."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    expected = config_fingerprint(header["kind"], header["config"])
    if header.get("fingerprint") != expected:
        raise CheckpointError(f"{path}: config fingerprint mismatch")
    tensors = {}
    off = 12 + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, tensors


def load_model(path) -> nn.Module:
    """Rebuild the model a checkpoint describes and load its weights."""
    header, tensors = read_checkpoint(path)
    config = dict(header["config"])
    config["filters"] = tuple(config["filters"])
    if header["kind"] == "generator":
        model = Generator(GeneratorConfig(**config))
    else:
        model = Discriminator(DiscriminatorConfig(**config))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model
