"""Rhythm, pitch, content and timbre encoders plus the shared decoder."""

from __future__ import annotations

import dataclasses
import io
import os
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .signal import ResampleSpec, interpolation_matrix, resample_positions

FACTORS = ("rhythm", "pitch", "content", "timbre")
CHECKPOINT_FORMAT = "cycleflow-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    pitch_dim: int = 2
    d_r: int = 2
    d_f: int = 4
    d_c: int = 8
    d_t: int = 16
    down_r: int = 8
    down_f: int = 8
    down_c: int = 8
    enc_channels: int = 64
    enc_layers: int = 3
    dec_channels: int = 128
    dec_layers: int = 4
    kernel_size: int = 5
    rr_segment_range: Tuple[int, int] = (19, 32)
    rr_rate_range: Tuple[float, float] = (0.5, 1.5)
    learnable_timbre: bool = False
    spec_offset: float = -4.0
    spec_scale: float = 2.0

    def __post_init__(self):
        for name in ("n_mels", "pitch_dim", "d_r", "d_f", "d_c", "d_t", "down_r", "down_f",
                     "down_c", "enc_channels", "enc_layers", "dec_channels", "dec_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        # tuples survive JSON round-trips as lists
        object.__setattr__(self, "rr_segment_range", tuple(int(x) for x in self.rr_segment_range))
        object.__setattr__(self, "rr_rate_range", tuple(float(x) for x in self.rr_rate_range))
        ResampleSpec(self.rr_segment_range, self.rr_rate_range)

    @property
    def resample_spec(self) -> ResampleSpec:
        return ResampleSpec(self.rr_segment_range, self.rr_rate_range)

    def dims(self) -> Dict[str, int]:
        return {"rhythm": self.d_r, "pitch": self.d_f, "content": self.d_c, "timbre": self.d_t}

    def downs(self) -> Dict[str, int]:
        return {"rhythm": self.down_r, "pitch": self.down_f, "content": self.down_c}

    def factor_len(self, factor: str, n_frames: int) -> int:
        return -(-n_frames // self.downs()[factor])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rr_segment_range"] = list(self.rr_segment_range)
        d["rr_rate_range"] = list(self.rr_rate_range)
        return d


@dataclass
class FactorSet:
    """Batched factors: rhythm/pitch/content are ``(B, T_x, d_x)``, timbre ``(B, d_t)``."""

    rhythm: torch.Tensor
    pitch: torch.Tensor
    content: torch.Tensor
    timbre: torch.Tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        if name not in FACTORS:
            raise KeyError(name)
        return getattr(self, name)

    def items(self):
        return [(name, getattr(self, name)) for name in FACTORS]

    def replace(self, **changes) -> "FactorSet":
        return dataclasses.replace(self, **changes)

    def detach(self) -> "FactorSet":
        return FactorSet(*(t.detach() for _, t in self.items()))

    def index(self, idx) -> "FactorSet":
        return FactorSet(*(t[idx] for _, t in self.items()))

    @property
    def batch_size(self) -> int:
        return self.timbre.shape[0]

    def shapes(self) -> Dict[str, tuple]:
        return {name: tuple(t.shape) for name, t in self.items()}

    @staticmethod
    def cat(sets: Sequence["FactorSet"]) -> "FactorSet":
        return FactorSet(*(torch.cat([s[name] for s in sets], dim=0) for name in FACTORS))


# --------------------------------------------------------------------------
# random resampling as batched interpolation matrices
# --------------------------------------------------------------------------

def rr_matrices(n_frames: int, batch: int, spec: ResampleSpec, rng: np.random.Generator,
                dtype=torch.float32):
    """Forward (B, T', T) and back (B, T, T') linear maps for per-item RR.

    The forward map stretches/shrinks segments; the back map uniformly
    resamples the encoder output to the input length so codes keep a fixed
    frame rate while their timing stays warped.
    """
    fwd, lens = [], []
    for _ in range(batch):
        pos = resample_positions(n_frames, spec, rng)
        fwd.append(interpolation_matrix(pos, n_frames))
        lens.append(len(pos))
    t_max = max(lens)
    fwd_b = np.zeros((batch, t_max, n_frames))
    back_b = np.zeros((batch, n_frames, t_max))
    for b, (m, t_out) in enumerate(zip(fwd, lens)):
        fwd_b[b, :t_out] = m
        back_b[b, :, :t_out] = interpolation_matrix(np.linspace(0, t_out - 1, n_frames), t_out)
    return torch.tensor(fwd_b, dtype=dtype), torch.tensor(back_b, dtype=dtype)


def downsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Average non-overlapping windows along time; the last window may be partial."""
    b, t, d = x.shape
    n = -(-t // factor)
    pad = n * factor - t
    if pad:
        x = torch.cat([x, x[:, -1:].expand(b, pad, d)], dim=1)
    return x.reshape(b, n, factor, d).mean(dim=2)


def upsample(z: torch.Tensor, factor: int, n_frames: int) -> torch.Tensor:
    return z.repeat_interleave(factor, dim=1)[:, :n_frames]


def resize_time(z: torch.Tensor, length: int) -> torch.Tensor:
    """Linear resample of ``(B, T, d)`` along time to ``length`` frames."""
    if z.shape[1] == length:
        return z
    m = interpolation_matrix(np.linspace(0, z.shape[1] - 1, length), z.shape[1])
    return torch.tensor(m, dtype=z.dtype) @ z


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int = 1):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.conv = nn.Conv1d(channels, channels, kernel_size,
                              padding=dilation * (kernel_size - 1) // 2, dilation=dilation)

    def forward(self, x):
        return x + self.conv(F.silu(self.norm(x)))


class Encoder(nn.Module):
    """Conv stack -> tanh-bounded bottleneck projection -> temporal average pooling."""

    def __init__(self, in_dim: int, channels: int, layers: int, kernel_size: int,
                 out_dim: int, down: int):
        super().__init__()
        self.down = down
        self.inp = nn.Conv1d(in_dim, channels, kernel_size, padding=(kernel_size - 1) // 2)
        self.blocks = nn.ModuleList(ConvBlock(channels, kernel_size) for _ in range(layers))
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.out = nn.Linear(channels, out_dim)

    def forward(self, x: torch.Tensor, rr: Optional[tuple] = None) -> torch.Tensor:
        if rr is not None:
            x = torch.bmm(rr[0], x)
        h = self.inp(x.transpose(1, 2))
        for block in self.blocks:
            h = block(h)
        h = F.silu(self.norm(h)).transpose(1, 2)
        if rr is not None:
            h = torch.bmm(rr[1], h)
        return downsample(torch.tanh(self.out(h)), self.down)


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        in_dim = c.d_r + c.d_f + c.d_c + c.d_t
        self.inp = nn.Conv1d(in_dim, c.dec_channels, 1)
        self.blocks = nn.ModuleList(
            ConvBlock(c.dec_channels, c.kernel_size, dilation=2 ** (i % 4))
            for i in range(c.dec_layers))
        self.norm = nn.GroupNorm(_groups(c.dec_channels), c.dec_channels)
        self.out = nn.Linear(c.dec_channels, c.n_mels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.inp(x.transpose(1, 2))
        for block in self.blocks:
            h = block(h)
        return self.out(F.silu(self.norm(h)).transpose(1, 2))


class TimbreEncoder(nn.Module):
    """Optional learned replacement for the fixed speaker vector."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(config.n_mels, config.enc_channels), nn.SiLU(),
                                 nn.Linear(config.enc_channels, config.d_t))

    def forward(self, spec):
        v = self.net(spec).mean(dim=1)
        return v / torch.sqrt((v ** 2).sum(-1, keepdim=True) + 1e-12)


class FactorModel(nn.Module):
    """E_r, E_f, E_c (plus an optional learned E_t) and the decoder D."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = c = config or ModelConfig()
        args = (c.enc_channels, c.enc_layers, c.kernel_size)
        self.rhythm_encoder = Encoder(c.n_mels, *args, c.d_r, c.down_r)
        self.pitch_encoder = Encoder(c.pitch_dim, *args, c.d_f, c.down_f)
        self.content_encoder = Encoder(c.n_mels, *args, c.d_c, c.down_c)
        self.timbre_encoder = TimbreEncoder(c) if c.learnable_timbre else None
        self.decoder = Decoder(c)
        self.register_buffer("step", torch.zeros((), dtype=torch.long))
        self.extras: dict = {}

    @property
    def dtype(self):
        return self.decoder.out.weight.dtype

    def _norm(self, spec):
        return (spec - self.config.spec_offset) / self.config.spec_scale

    def _check(self, spec, pitch, spk):
        c = self.config
        if spec.ndim != 3 or spec.shape[-1] != c.n_mels:
            raise ShapeMismatch(f"spectrogram must be (B, T, {c.n_mels}), got {tuple(spec.shape)}")
        if pitch.shape[:2] != spec.shape[:2] or pitch.shape[-1] != c.pitch_dim:
            raise ShapeMismatch(f"pitch must be (B, T, {c.pitch_dim}) aligned with the spectrogram, "
                                f"got {tuple(pitch.shape)}")
        if spk.shape != (spec.shape[0], c.d_t):
            raise ShapeMismatch(f"speaker vectors must be (B, {c.d_t}), got {tuple(spk.shape)}")
        if spec.shape[1] < 1:
            raise ShapeMismatch("need at least one frame")

    def encode(self, spec, pitch, spk, rr_seed=None) -> FactorSet:
        """Encode a batch. ``rr_seed=None`` disables random resampling.

        Pitch and content get independent RR draws derived from ``rr_seed``;
        rhythm always sees the unresampled spectrogram.
        """
        spec = torch.as_tensor(spec, dtype=self.dtype)
        pitch = torch.as_tensor(pitch, dtype=self.dtype)
        spk = torch.as_tensor(spk, dtype=self.dtype)
        self._check(spec, pitch, spk)
        b, t, _ = spec.shape
        rr_f = rr_c = None
        if rr_seed is not None:
            rs = self.config.resample_spec
            rr_f = rr_matrices(t, b, rs, np.random.default_rng([int(rr_seed), 1]), self.dtype)
            rr_c = rr_matrices(t, b, rs, np.random.default_rng([int(rr_seed), 2]), self.dtype)
        x = self._norm(spec)
        z_r = self.rhythm_encoder(x)
        z_f = self.pitch_encoder(pitch, rr_f)
        z_c = self.content_encoder(x, rr_c)
        z_t = self.timbre_encoder(spec) if self.timbre_encoder is not None else spk
        return FactorSet(z_r, z_f, z_c, z_t)

    def decode(self, z: FactorSet, n_frames: Optional[int] = None) -> torch.Tensor:
        """``(B, T, n_mels)`` log-mel from a FactorSet; T defaults to the longest factor span."""
        c = self.config
        dims, downs = c.dims(), c.downs()
        for name, t in z.items():
            want = dims[name]
            if t.shape[-1] != want or t.ndim != (2 if name == "timbre" else 3):
                raise ShapeMismatch(f"{name} factor has shape {tuple(t.shape)}, expected width {want}")
        if n_frames is None:
            n_frames = max(z[n].shape[1] * downs[n] for n in downs)
        parts = [upsample(z[n], downs[n], n_frames) for n in ("rhythm", "pitch", "content")]
        for name, p in zip(("rhythm", "pitch", "content"), parts):
            if p.shape[1] != n_frames:
                raise ShapeMismatch(f"{name} factor too short for {n_frames} frames")
        parts.append(z.timbre[:, None, :].expand(-1, n_frames, -1))
        out = self.decoder(torch.cat(parts, dim=-1))
        return out * c.spec_scale + c.spec_offset


def factor_means(model: FactorModel, utterances, batch_size: int = 16) -> Dict[str, list]:
    """Per-factor mean code over all frames of a corpus (no RR)."""
    sums: Dict[str, torch.Tensor] = {}
    counts: Dict[str, int] = {}
    with torch.no_grad():
        for u in utterances:
            z = model.encode(u.spectrogram.frames[None], u.pitch.as_features()[None],
                             u.speaker_vector[None])
            for name, t in z.items():
                flat = t.reshape(-1, t.shape[-1]).double()
                sums[name] = sums.get(name, 0) + flat.sum(0)
                counts[name] = counts.get(name, 0) + flat.shape[0]
    return {n: (sums[n] / counts[n]).tolist() for n in FACTORS}


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: FactorModel, path) -> None:
    """Versioned container: header (format, version, config) + named tensors."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "extras": model.extras,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, os.fspath(path))


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> FactorModel:
    path = os.fspath(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CorruptCheckpoint(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"{path}: not a cycleflow checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: checkpoint version {payload.get('version')} "
                                 f"!= supported {CHECKPOINT_VERSION}")
    config = ModelConfig(**payload["config"])
    if expected_config is not None and config != expected_config:
        diff = [k for k, v in expected_config.to_dict().items() if config.to_dict()[k] != v]
        raise CheckpointMismatch(f"{path}: config differs from expected in {diff}")
    state = payload["state_dict"]
    dtype = next(v.dtype for k, v in state.items() if v.is_floating_point())
    model = FactorModel(config).to(dtype)
    own = model.state_dict()
    bad = [k for k in own if k not in state or own[k].shape != state[k].shape]
    if bad or set(state) - set(own):
        raise CheckpointMismatch(f"{path}: parameter shapes do not match config ({bad[:3]})")
    model.load_state_dict(state)
    model.extras = payload.get("extras") or {}
    return model
