"""Reconstruction and cycle losses, random factor substitution and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .dataset import PairBatch, SpeakerEmbedder, Utterance, pair_batches
from .model import FACTORS, FactorModel, FactorSet, ShapeMismatch, factor_means, save_checkpoint
from .signal import MAX_FRAMES, SpectrogramConfig, mel_basis

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 5.0


class NonFiniteLoss(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class LossBreakdown:
    rec: float
    cyc: float
    total: float
    alpha: float

    def as_row(self, step: int) -> dict:
        return {"step": step, "rec": self.rec, "cyc": self.cyc, "total": self.total}


@dataclass
class RFSOutcome:
    substituted_factor: str
    z_prime: FactorSet


@dataclass
class TrainConfig:
    alpha: float = DEFAULT_ALPHA
    lr: float = 1e-3
    batch_size: int = 8
    crop_len: int = 96
    steps: int = 1000
    seed: int = 0
    detach_cycle_target: bool = True
    cross_speaker: bool = False
    checkpoint_every: int = 0
    divergence_patience: int = 5
    grad_clip: float = 5.0
    surrogate_temperature: float = 0.02
    cycle_rr: bool = False

    def __post_init__(self):
        if not 1 <= self.crop_len <= MAX_FRAMES:
            raise ValueError(f"crop_len must be in [1, {MAX_FRAMES}]")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


# --------------------------------------------------------------------------
# losses and substitution
# --------------------------------------------------------------------------

def reconstruction_loss(s_hat, s) -> torch.Tensor:
    """Mean squared error per element."""
    s_hat, s = torch.as_tensor(s_hat), torch.as_tensor(s)
    if s_hat.shape != s.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(s_hat.shape)} vs {tuple(s.shape)}")
    return ((s_hat - s) ** 2).mean()


def cycle_loss(z_prime: FactorSet, z_hat_prime: FactorSet) -> torch.Tensor:
    """Sum over the four factors of the per-element mean squared distance."""
    total = 0.0
    for name in FACTORS:
        a, b = z_prime[name], z_hat_prime[name]
        if a.shape != b.shape:
            raise ShapeMismatch(f"{name}: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = total + ((a - b) ** 2).mean()
    return total


def _check_compatible(z1: FactorSet, z2: FactorSet):
    for name in FACTORS:
        if z1[name].shape != z2[name].shape:
            raise ShapeMismatch(f"factor sets disagree on {name}: "
                                f"{tuple(z1[name].shape)} vs {tuple(z2[name].shape)}")


def rfs(z1: FactorSet, z2: FactorSet, seed) -> RFSOutcome:
    """Replace one uniformly chosen factor of ``z1`` with the one from ``z2``."""
    _check_compatible(z1, z2)
    name = FACTORS[int(np.random.default_rng(seed).integers(len(FACTORS)))]
    return RFSOutcome(name, z1.replace(**{name: z2[name]}))


def substitute(z1: FactorSet, z2: FactorSet, choices) -> FactorSet:
    """Per-item substitution: item ``b`` takes factor ``FACTORS[choices[b]]`` from ``z2``."""
    _check_compatible(z1, z2)
    choices = torch.as_tensor(np.asarray(choices))
    out = {}
    for i, name in enumerate(FACTORS):
        a, b = z1[name], z2[name]
        mask = (choices == i).reshape((-1,) + (1,) * (a.ndim - 1))
        out[name] = torch.where(mask, b, a)
    return FactorSet(**out)


# --------------------------------------------------------------------------
# differentiable pitch surrogate
# --------------------------------------------------------------------------

class PitchSurrogate:
    """Soft pitch contour from a log-mel spectrogram.

    Each frame is correlated with log-mel templates of harmonic combs over a
    log-spaced F0 grid; a softmax over the grid gives a soft log-F0. The
    contour is z-normalized per utterance with soft voicing weights, mirroring
    :func:`cycleflow.signal.extract_pitch`.
    """

    def __init__(self, config: Optional[SpectrogramConfig] = None, n_candidates: int = 64,
                 temperature: float = 0.02, voicing_threshold: float = 0.3,
                 voicing_width: float = 0.05):
        config = config or SpectrogramConfig()
        self.config = config
        self.temperature = temperature
        self.voicing_threshold = voicing_threshold
        self.voicing_width = voicing_width
        n_fft = config.win_length
        freqs = np.arange(n_fft // 2 + 1) * config.sample_rate / n_fft
        bin_hz = config.sample_rate / n_fft
        basis = mel_basis(config)
        cands = np.exp(np.linspace(np.log(config.f0_min), np.log(config.f0_max), n_candidates))
        templates = []
        for f0 in cands:
            lin = np.zeros_like(freqs)
            for k in range(1, int(4000 // f0) + 1):
                lin += np.exp(-0.5 * ((freqs - k * f0) / (0.8 * bin_hz)) ** 2) / np.sqrt(k)
            mel = basis @ lin
            templates.append(np.log(mel + 1e-3 * mel.max()))
        t = np.asarray(templates)
        t -= t.mean(axis=1, keepdims=True)
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        self.templates = t
        self.log_candidates = np.log(cands)

    def __call__(self, spec: torch.Tensor) -> torch.Tensor:
        """``(B, T, M)`` -> ``(B, T, 2)`` of (normalized log-F0, soft voicing)."""
        dtype = spec.dtype
        tmpl = torch.as_tensor(self.templates, dtype=dtype)
        logc = torch.as_tensor(self.log_candidates, dtype=dtype)
        centred = spec - spec.mean(dim=-1, keepdim=True)
        norm = torch.sqrt((centred ** 2).sum(-1, keepdim=True) + 1e-8)
        scores = (centred / norm) @ tmpl.T
        w = torch.softmax(scores / self.temperature, dim=-1)
        log_f0 = (w * logc).sum(-1)
        peak = self.temperature * torch.logsumexp(scores / self.temperature, dim=-1)
        voiced = torch.sigmoid((peak - self.voicing_threshold) / self.voicing_width)
        wsum = voiced.sum(1, keepdim=True) + 1e-6
        mean = (voiced * log_f0).sum(1, keepdim=True) / wsum
        var = (voiced * (log_f0 - mean) ** 2).sum(1, keepdim=True) / wsum
        std = torch.sqrt(var + self.config.pitch_std_floor ** 2)
        z = (log_f0 - mean) / std * voiced + self.config.unvoiced_fill * (1 - voiced)
        return torch.stack([z, voiced], dim=-1)


# --------------------------------------------------------------------------
# the CycleFlow step
# --------------------------------------------------------------------------

def _as_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def compute_losses(model: FactorModel, batch: PairBatch, alpha: float, seed: int,
                   surrogate: PitchSurrogate, embedder: SpeakerEmbedder,
                   detach_target: bool = True, cycle_grad: bool = True,
                   cycle_rr: bool = False):
    """Forward pass of one CycleFlow step; returns ``(rec, cyc, total)`` tensors.

    1. encode both utterances of every pair (with RR);
    2. substitute one random factor (direction chosen per pair);
    3. decode the substituted set;
    4. re-encode the decoded spectrogram without RR, with the surrogate pitch
       contour and the plug-in speaker vector of the decoded spectrogram;
    5. cycle loss against the substituted set, plus self-reconstruction loss
       of both utterances.
    """
    dtype = model.dtype
    rng = np.random.default_rng([int(seed), 11])
    spec = torch.cat([_as_tensor(batch.spec_a, dtype), _as_tensor(batch.spec_b, dtype)])
    pitch = torch.cat([_as_tensor(batch.pitch_a, dtype), _as_tensor(batch.pitch_b, dtype)])
    spk = torch.cat([_as_tensor(batch.spk_a, dtype), _as_tensor(batch.spk_b, dtype)])
    n, t = len(batch), spec.shape[1]

    z1 = model.encode(spec, pitch, spk, rr_seed=int(rng.integers(2 ** 31)))
    rec = reconstruction_loss(model.decode(z1, t), spec)

    choices = rng.integers(0, len(FACTORS), size=n)
    flip = rng.random(n) < 0.5
    order = np.arange(n)
    base_idx = np.where(flip, order + n, order)
    donor_idx = np.where(flip, order, order + n)
    base, donor = z1.index(torch.as_tensor(base_idx)), z1.index(torch.as_tensor(donor_idx))

    with torch.set_grad_enabled(cycle_grad and torch.is_grad_enabled()):
        if not cycle_rr:
            z_src = model.encode(spec, pitch, spk, rr_seed=None)
            base = z_src.index(torch.as_tensor(base_idx))
            donor = z_src.index(torch.as_tensor(donor_idx))
        z_prime = substitute(base, donor, choices)
        s_hat_prime = model.decode(z_prime, t)
        p_hat = surrogate(s_hat_prime)
        v_hat = embedder.torch_vector(s_hat_prime)
        z_hat = model.encode(s_hat_prime, p_hat, v_hat, rr_seed=None)
        target = z_prime.detach() if detach_target else z_prime
        cyc = cycle_loss(target, z_hat)
    return rec, cyc, rec + alpha * cyc


class Trainer:
    """Owns the mutable model and optimizer for one training run."""

    def __init__(self, model: FactorModel, config: TrainConfig, embedder: SpeakerEmbedder,
                 spec_config: Optional[SpectrogramConfig] = None):
        self.model = model
        self.config = config
        self.embedder = embedder
        self.surrogate = PitchSurrogate(spec_config, temperature=config.surrogate_temperature)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    def train_step(self, batch: PairBatch, seed: int) -> LossBreakdown:
        cfg = self.config
        self.model.train()
        rec, cyc, total = compute_losses(
            self.model, batch, cfg.alpha, seed, self.surrogate, self.embedder,
            detach_target=cfg.detach_cycle_target, cycle_grad=cfg.alpha != 0,
            cycle_rr=cfg.cycle_rr)
        values = [rec.item(), cyc.item(), total.item()]
        if not all(np.isfinite(values)):
            raise NonFiniteLoss(f"step {int(self.model.step)}: non-finite loss "
                                f"(rec={values[0]}, cyc={values[1]}, total={values[2]})")
        self.optimizer.zero_grad()
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.model.step += 1
        return LossBreakdown(values[0], values[1], values[2], cfg.alpha)

    def train(self, utterances: Sequence[Utterance], checkpoint_dir=None,
              callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> List[dict]:
        cfg = self.config
        history: List[dict] = []
        if cfg.steps == 0:
            return history
        crop = min(cfg.crop_len, min(u.n_frames for u in utterances))
        batches = pair_batches(utterances, cfg.batch_size, seed=int(np.random.default_rng([cfg.seed, 3]).integers(2 ** 31)),
                               crop_len=crop, cross_speaker=cfg.cross_speaker)
        bad = 0
        for i in range(cfg.steps):
            batch = next(batches)
            step = int(self.model.step)
            try:
                loss = self.train_step(batch, seed=int(np.random.default_rng([cfg.seed, 5, step]).integers(2 ** 31)))
            except NonFiniteLoss as exc:
                bad += 1
                log.warning("%s", exc)
                history.append({"step": step, "rec": float("nan"), "cyc": float("nan"),
                                "total": float("nan")})
                if bad >= cfg.divergence_patience:
                    raise TrainingDiverged(
                        f"{bad} consecutive non-finite steps ending at step {step}", history)
                continue
            bad = 0
            history.append(loss.as_row(step))
            if callback is not None:
                callback(step, loss)
            if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(self.model, os.path.join(os.fspath(checkpoint_dir), f"step{step + 1:06d}.pt"))
        return history


def build_model(model_config, seed: int = 0) -> FactorModel:
    torch.manual_seed(seed)
    return FactorModel(model_config)


def train(model: FactorModel, utterances: Sequence[Utterance], config: TrainConfig,
          embedder: SpeakerEmbedder, spec_config: Optional[SpectrogramConfig] = None,
          checkpoint_dir=None):
    """Run ``config.steps`` CycleFlow steps (SpeechFlow when ``alpha == 0``).

    Returns ``(model, history)``. The speaker embedder and corpus factor means
    are stored in ``model.extras`` so checkpoints are self-contained.
    """
    if not utterances:
        raise ValueError("empty corpus")
    torch.manual_seed(config.seed)
    trainer = Trainer(model, config, embedder, spec_config)
    history = trainer.train(utterances, checkpoint_dir)
    model.eval()
    model.extras.update({
        "speaker_embedder": embedder.state_dict(),
        "train_config": dataclasses.asdict(config),
        "spectrogram_config": dataclasses.asdict(spec_config or utterances[0].spectrogram.config),
    })
    if config.steps:
        model.extras["factor_means"] = factor_means(model, utterances)
    return model, history


def write_history(path, history: Sequence[dict]) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "rec", "cyc", "total"], lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (row[k] if k == "step" else repr(float(row[k])))
                             for k in ("step", "rec", "cyc", "total")})


def evaluate_reconstruction(model: FactorModel, utterances: Sequence[Utterance]) -> float:
    """Mean self-reconstruction MSE over whole utterances, no RR."""
    model.eval()
    losses = []
    with torch.no_grad():
        for u in utterances:
            z = model.encode(u.spectrogram.frames[None], u.pitch.as_features()[None],
                             u.speaker_vector[None])
            s_hat = model.decode(z, u.n_frames)
            losses.append(float(reconstruction_loss(s_hat, torch.as_tensor(u.spectrogram.frames[None], dtype=s_hat.dtype))))
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# linear toy instantiation
# --------------------------------------------------------------------------

class LinearToy:
    """Two scalar factors, linear encoders and a linear decoder.

    Data are ``x = M s + noise`` with independent non-Gaussian sources ``s``.
    Training uses the same reconstruction + RFS cycle objective as the full
    model.
    """

    def __init__(self, dim: int = 6, noise: float = 0.01, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.noise = noise
        self.seed = seed
        self.mixing = torch.randn(dim, 2, generator=g, dtype=torch.float64)
        self.enc = (0.5 * torch.randn(2, dim, generator=g, dtype=torch.float64)).requires_grad_()
        self.dec = (0.5 * torch.randn(dim, 2, generator=g, dtype=torch.float64)).requires_grad_()

    def sample(self, n: int, seed: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(seed)
        s1 = torch.rand(n, generator=g, dtype=torch.float64) * 2 - 1
        s2 = torch.sign(torch.randn(n, generator=g, dtype=torch.float64)) * \
            torch.rand(n, generator=g, dtype=torch.float64) ** 2
        s = torch.stack([s1, s2], dim=1)
        return s @ self.mixing.T + self.noise * torch.randn(n, self.dim, generator=g, dtype=torch.float64)

    def encode(self, x):
        return x @ self.enc.T

    def decode(self, z):
        return z @ self.dec.T

    def losses(self, x1, x2, choices):
        z1, z2 = self.encode(x1), self.encode(x2)
        rec = 0.5 * (((self.decode(z1) - x1) ** 2).mean() + ((self.decode(z2) - x2) ** 2).mean())
        mask = torch.nn.functional.one_hot(choices, 2).to(z1.dtype)
        z_prime = z1 * (1 - mask) + z2 * mask
        z_hat = self.encode(self.decode(z_prime))
        cyc = ((z_hat - z_prime.detach()) ** 2).mean(dim=0).sum()
        return rec, cyc

    def fit(self, alpha: float = DEFAULT_ALPHA, n: int = 2000, iters: int = 3000,
            lr: float = 1e-2) -> List[tuple]:
        x = self.sample(2 * n, self.seed + 1)
        x1, x2 = x[:n], x[n:]
        opt = torch.optim.Adam([self.enc, self.dec], lr=lr)
        g = torch.Generator().manual_seed(self.seed + 2)
        history = []
        for _ in range(iters):
            choices = torch.randint(0, 2, (n,), generator=g)
            rec, cyc = self.losses(x1, x2, choices)
            history.append((rec.item(), cyc.item()))
            opt.zero_grad()
            (rec + alpha * cyc).backward()
            opt.step()
        return history

    @torch.no_grad()
    def cycle_loss(self, n: int = 10000, seed: int = 99) -> float:
        x = self.sample(2 * n, seed)
        choices = torch.randint(0, 2, (n,), generator=torch.Generator().manual_seed(seed))
        return float(self.losses(x[:n], x[n:], choices)[1])

    @torch.no_grad()
    def substituted_correlation(self, n: int = 10000, seed: int = 123) -> float:
        """corr of the re-encoded factors when each factor comes from an independent utterance."""
        x = self.sample(2 * n, seed)
        z1, z2 = self.encode(x[:n]), self.encode(x[n:])
        z_prime = torch.stack([z1[:, 0], z2[:, 1]], dim=1)
        z_hat = self.encode(self.decode(z_prime)).numpy()
        return float(np.corrcoef(z_hat[:, 0], z_hat[:, 1])[0, 1])
