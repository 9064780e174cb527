"""Corpus ingestion, speaker vectors, RFS pairing and the synthetic toy corpus."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis

from .signal import (
    MAX_FRAMES,
    PitchContour,
    SignalError,
    Spectrogram,
    SpectrogramConfig,
    Waveform,
    compute_spectrogram,
    extract_pitch,
    load_audio,
    save_audio,
)

log = logging.getLogger(__name__)


class CorpusError(Exception):
    pass


@dataclass
class UtteranceDescriptor:
    utt_id: str
    speaker_id: str
    path: str
    split: str = "train"


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    spectrogram: Spectrogram
    pitch: PitchContour
    speaker_vector: np.ndarray
    labels: Dict[str, int] = field(default_factory=dict)
    frame_labels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.spectrogram.n_frames != len(self.pitch):
            raise ValueError(f"{self.utt_id}: spectrogram and pitch are not frame-aligned")
        for name, arr in self.frame_labels.items():
            if len(arr) != self.spectrogram.n_frames:
                raise ValueError(f"{self.utt_id}: frame label {name!r} has the wrong length")

    @property
    def n_frames(self) -> int:
        return self.spectrogram.n_frames


# --------------------------------------------------------------------------
# corpus scanning
# --------------------------------------------------------------------------

def split_speakers(speakers: Sequence[str], test_fraction: float, seed: int = 0) -> set:
    """Return the set of held-out test speakers."""
    speakers = sorted(speakers)
    if test_fraction <= 0 or len(speakers) < 2:
        return set()
    n_test = int(round(test_fraction * len(speakers)))
    n_test = min(max(n_test, 1), len(speakers) - 1)
    order = np.random.default_rng(seed).permutation(len(speakers))
    return {speakers[i] for i in order[:n_test]}


def scan_corpus(root, test_fraction: float = 0.0, seed: int = 0) -> List[UtteranceDescriptor]:
    """Index ``<root>/<speaker>/<utt>.wav``.

    Unreadable files are skipped with a warning. The train/test split is made
    by speaker, so no speaker lands in both splits.
    """
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise CorpusError(f"corpus root {root!r} is not a directory")
    found: Dict[str, List[UtteranceDescriptor]] = {}
    for spk in sorted(os.listdir(root)):
        spk_dir = os.path.join(root, spk)
        if not os.path.isdir(spk_dir):
            continue
        wavs = sorted(f for f in os.listdir(spk_dir) if f.lower().endswith(".wav"))
        usable = []
        for name in wavs:
            path = os.path.join(spk_dir, name)
            try:
                load_audio(path)
            except SignalError as exc:
                log.warning("skipping unreadable file %s: %s", path, exc)
                continue
            usable.append(UtteranceDescriptor(os.path.splitext(name)[0], spk, path))
        if not usable:
            raise CorpusError(f"speaker {spk!r} has no usable WAV files")
        found[spk] = usable
    if not found:
        raise CorpusError(f"no speaker directories with WAV files under {root!r}")
    test = split_speakers(list(found), test_fraction, seed)
    out = []
    for spk, descs in found.items():
        for d in descs:
            d.split = "test" if spk in test else "train"
            out.append(d)
    return out


# --------------------------------------------------------------------------
# speaker vectors
# --------------------------------------------------------------------------

class SpeakerEmbedder:
    """Speaker vectors from long-term average log-mel spectra.

    The average spectrum is centred on the corpus mean, projected and scaled
    to unit length. When speaker labels are given to :meth:`fit` the
    projection is a shrinkage LDA fitted on per-utterance spectra, so the
    vector tracks the speaker rather than what was said; directions beyond
    the ``n_speakers - 1`` discriminant ones are left at zero. Without labels
    a seeded random orthonormal projection is used. The torch path is
    differentiable with respect to the spectrogram.
    """

    def __init__(self, n_mels: int = 80, dim: int = 16, seed: int = 0,
                 mean: Optional[np.ndarray] = None, projection: Optional[np.ndarray] = None):
        if dim > n_mels:
            raise ValueError("speaker vector dim cannot exceed the band count")
        self.n_mels = n_mels
        self.dim = dim
        self.seed = seed
        self.mean = np.zeros(n_mels) if mean is None else np.asarray(mean, dtype=np.float64)
        if projection is None:
            g = np.random.default_rng(seed).standard_normal((n_mels, dim))
            projection, _ = np.linalg.qr(g)
        self.projection = np.asarray(projection, dtype=np.float64)

    def fit(self, spectrograms: Sequence[Spectrogram],
            speakers: Optional[Sequence[str]] = None) -> "SpeakerEmbedder":
        ltas = np.stack([s.frames.mean(axis=0) for s in spectrograms])
        self.mean = ltas.mean(axis=0)
        if speakers is not None and len(set(speakers)) >= 2:
            lda = LinearDiscriminantAnalysis(solver="eigen", shrinkage="auto")
            lda.fit(ltas - self.mean, np.asarray(speakers))
            rank = min(self.dim, len(set(speakers)) - 1)
            proj = np.zeros((self.n_mels, self.dim))
            proj[:, :rank] = lda.scalings_[:, :rank]
            self.projection = proj
        return self

    def vector(self, spectrograms: Sequence[Spectrogram]) -> np.ndarray:
        if not spectrograms:
            raise ValueError("need at least one utterance")
        frames = np.concatenate([s.frames for s in spectrograms], axis=0)
        v = (frames.mean(axis=0) - self.mean) @ self.projection
        return v / max(np.linalg.norm(v), 1e-12)

    def torch_vector(self, spec: torch.Tensor) -> torch.Tensor:
        """``(B, T, M)`` spectrogram batch -> ``(B, dim)`` unit vectors."""
        mean = torch.as_tensor(self.mean, dtype=spec.dtype)
        proj = torch.as_tensor(self.projection, dtype=spec.dtype)
        v = (spec.mean(dim=1) - mean) @ proj
        return v / torch.sqrt((v ** 2).sum(dim=-1, keepdim=True) + 1e-12)

    def state_dict(self) -> dict:
        return {"n_mels": self.n_mels, "dim": self.dim, "seed": self.seed,
                "mean": [float(x) for x in self.mean],
                "projection": [[float(x) for x in row] for row in self.projection]}

    @classmethod
    def from_state(cls, state: dict) -> "SpeakerEmbedder":
        proj = state.get("projection")
        return cls(state["n_mels"], state["dim"], state["seed"], np.asarray(state["mean"]),
                   None if proj is None else np.asarray(proj))


class ExternalSpeakerVectors:
    """Plug-in for precomputed embeddings (e.g. d-vectors), keyed by speaker."""

    def __init__(self, vectors: Dict[str, np.ndarray]):
        self.vectors = {k: np.asarray(v, dtype=np.float64) / np.linalg.norm(v)
                        for k, v in vectors.items()}

    def for_speaker(self, speaker_id: str) -> np.ndarray:
        return self.vectors[speaker_id]


def make_speaker_vector(spectrograms: Sequence[Spectrogram], embedder: SpeakerEmbedder) -> np.ndarray:
    return embedder.vector(spectrograms)


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------

def featurize(w: Waveform, config: SpectrogramConfig):
    return compute_spectrogram(w, config), extract_pitch(w, config)


def build_utterances(items, config: Optional[SpectrogramConfig] = None,
                     embedder: Optional[SpeakerEmbedder] = None, speaker_dim: int = 16,
                     embedder_seed: int = 0):
    """Turn ``(utt_id, speaker_id, waveform, labels[, frame_labels])`` items into Utterances.

    When no embedder is given one is fitted on these utterances. Every
    utterance of a speaker gets the same vector.
    """
    config = config or SpectrogramConfig()
    feats = []
    for item in items:
        utt_id, spk, wav, labels = item[:4]
        frame_labels = item[4] if len(item) > 4 else None
        spec, pitch = featurize(wav, config)
        feats.append((utt_id, spk, spec, pitch, labels, frame_labels))
    if not feats:
        raise CorpusError("no utterances to featurize")
    if embedder is None:
        embedder = SpeakerEmbedder(config.n_mels, speaker_dim, embedder_seed)
        embedder.fit([f[2] for f in feats], [f[1] for f in feats])
    by_spk: Dict[str, List[Spectrogram]] = {}
    for f in feats:
        by_spk.setdefault(f[1], []).append(f[2])
    vectors = {spk: make_speaker_vector(specs, embedder) for spk, specs in by_spk.items()}
    utts = [Utterance(u, s, spec, pitch, vectors[s], dict(labels or {}), dict(fl or {}))
            for u, s, spec, pitch, labels, fl in feats]
    return utts, embedder


def read_sidecar_labels(wav_path):
    """Labels and frame labels from a generator sidecar next to ``wav_path``, if any."""
    path = os.path.splitext(os.fspath(wav_path))[0] + ".json"
    if not os.path.isfile(path):
        return {}, {}
    with open(path) as fh:
        meta = json.load(fh)
    labels = {k: int(v) for k, v in (meta.get("labels") or {}).items()}
    frame_labels = {k: np.asarray(v, dtype=np.int64)
                    for k, v in (meta.get("frame_labels") or {}).items()}
    return labels, frame_labels


def load_utterances(descriptors: Sequence[UtteranceDescriptor],
                    config: Optional[SpectrogramConfig] = None,
                    embedder: Optional[SpeakerEmbedder] = None, speaker_dim: int = 16):
    items = [(d.utt_id, d.speaker_id, load_audio(d.path), *read_sidecar_labels(d.path))
             for d in descriptors]
    return build_utterances(items, config, embedder, speaker_dim)


def save_prepared(root, utterances: Sequence[Utterance], embedder: SpeakerEmbedder,
                  splits: Optional[Dict[str, str]] = None) -> None:
    """Write a feature cache: one ``.npz`` per utterance plus ``index.json``."""
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "features"), exist_ok=True)
    index = {"format": "cycleflow-features", "version": 1,
             "spectrogram_config": utterances[0].spectrogram.config.__dict__,
             "embedder": embedder.state_dict(), "utterances": []}
    for u in utterances:
        rel = os.path.join("features", f"{u.utt_id}.npz")
        with open(os.path.join(root, rel), "wb") as fh:
            np.savez(fh, spectrogram=u.spectrogram.frames, f0=u.pitch.f0,
                     voiced=u.pitch.voiced, speaker_vector=u.speaker_vector,
                     **{f"frame_label_{k}": v for k, v in u.frame_labels.items()})
        index["utterances"].append({
            "utt_id": u.utt_id, "speaker": u.speaker_id, "file": rel,
            "split": (splits or {}).get(u.utt_id, "train"), "labels": u.labels})
    with open(os.path.join(root, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def load_prepared(root, split: Optional[str] = None):
    """Read a feature cache; returns ``(utterances, embedder)``."""
    root = os.fspath(root)
    path = os.path.join(root, "index.json")
    if not os.path.isfile(path):
        raise CorpusError(f"{root!r} has no index.json (run `prepare` first)")
    with open(path) as fh:
        index = json.load(fh)
    config = SpectrogramConfig(**index["spectrogram_config"])
    utts = []
    for entry in index["utterances"]:
        if split is not None and entry["split"] != split:
            continue
        with np.load(os.path.join(root, entry["file"])) as data:
            frame_labels = {k[len("frame_label_"):]: data[k] for k in data.files
                            if k.startswith("frame_label_")}
            utts.append(Utterance(
                entry["utt_id"], entry["speaker"], Spectrogram(data["spectrogram"], config),
                PitchContour(data["f0"], data["voiced"]), data["speaker_vector"],
                {k: int(v) for k, v in entry["labels"].items()}, frame_labels))
    if not utts:
        raise CorpusError(f"no utterances in {root!r} for split {split!r}")
    return utts, SpeakerEmbedder.from_state(index["embedder"])


# --------------------------------------------------------------------------
# pairing
# --------------------------------------------------------------------------

@dataclass
class PairBatch:
    pairs: List[tuple]
    spec_a: np.ndarray
    pitch_a: np.ndarray
    spk_a: np.ndarray
    spec_b: np.ndarray
    pitch_b: np.ndarray
    spk_b: np.ndarray

    @property
    def crop_len(self) -> int:
        return self.spec_a.shape[1]

    def __len__(self):
        return len(self.pairs)


def crop_features(u: Utterance, length: int, rng: Optional[np.random.Generator] = None):
    """Crop (random if ``rng`` is given, else centred) or pad to ``length`` frames."""
    spec = u.spectrogram.frames
    pitch = u.pitch.as_features()
    t = len(spec)
    if t >= length:
        start = int(rng.integers(0, t - length + 1)) if rng is not None else (t - length) // 2
        return spec[start:start + length], pitch[start:start + length]
    pad = length - t
    floor = u.spectrogram.config.log_floor_value
    spec = np.concatenate([spec, np.full((pad, spec.shape[1]), floor)], axis=0)
    pitch = np.concatenate([pitch, np.zeros((pad, 2))], axis=0)
    return spec, pitch


def stack_utterances(utts: Sequence[Utterance], length: int, rng=None):
    specs, pitches = zip(*(crop_features(u, length, rng) for u in utts))
    return (np.stack(specs), np.stack(pitches),
            np.stack([u.speaker_vector for u in utts]))


def pair_batches(utterances: Sequence[Utterance], batch_size: int, seed: int = 0,
                 crop_len: int = MAX_FRAMES, cross_speaker: bool = False,
                 random_crop: bool = True) -> Iterator[PairBatch]:
    """Endless stream of uniformly random (A, B) pairs with A != B."""
    n = len(utterances)
    if n < 2:
        raise CorpusError("pairing needs at least two utterances")
    if not 1 <= crop_len <= MAX_FRAMES:
        raise ValueError(f"crop length must be in [1, {MAX_FRAMES}]")
    if cross_speaker and len({u.speaker_id for u in utterances}) < 2:
        raise CorpusError("cross-speaker pairing needs at least two speakers")
    rng = np.random.default_rng(seed)
    while True:
        pairs = []
        while len(pairs) < batch_size:
            i, j = rng.integers(0, n, size=2)
            if i == j:
                continue
            if cross_speaker and utterances[i].speaker_id == utterances[j].speaker_id:
                continue
            pairs.append((int(i), int(j)))
        crop_rng = rng if random_crop else None
        a = stack_utterances([utterances[i] for i, _ in pairs], crop_len, crop_rng)
        b = stack_utterances([utterances[j] for _, j in pairs], crop_len, crop_rng)
        ids = [(utterances[i].utt_id, utterances[j].utt_id) for i, j in pairs]
        yield PairBatch(ids, *a, *b)


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

# (F1, F2, F3) in Hz
VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480],
    [570, 840, 2410], [660, 1720, 2410], [520, 1190, 2390], [390, 1990, 2550],
], dtype=np.float64)
PHONES_PER_UTT = 5
FORMANT_BW = np.array([90.0, 110.0, 170.0])
FORMANT_GAIN = np.array([1.0, 0.6, 0.3])
PITCH_LEVELS = 4


@dataclass(frozen=True)
class SyntheticSpec:
    n_speakers: int = 4
    n_contents: int = 4
    pitch_patterns: int = 2
    rhythm_patterns: int = 2
    utterances_per_cell: int = 1
    seed: int = 0
    min_phone_frames: int = 10
    max_phone_frames: int = 26

    def __post_init__(self):
        for name in ("n_speakers", "n_contents", "pitch_patterns", "rhythm_patterns"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.utterances_per_cell < 1:
            raise ValueError("utterances_per_cell must be >= 1")


@dataclass
class SyntheticUtterance:
    utt_id: str
    speaker: str
    content: int
    pitch: int
    rhythm: int
    take: int
    waveform: Waveform
    frame_labels: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def labels(self) -> Dict[str, int]:
        return {"speaker": int(self.speaker[3:]), "content": self.content,
                "pitch": self.pitch, "rhythm": self.rhythm, "take": self.take}


def _design(spec: SyntheticSpec):
    """Label -> generative parameters, fixed by the seed."""
    rng = np.random.default_rng([spec.seed, 0])
    contents = []
    while len(contents) < spec.n_contents:
        seq = tuple(int(x) for x in rng.choice(len(VOWELS), PHONES_PER_UTT, replace=True))
        if seq not in contents and all(a != b for a, b in zip(seq, seq[1:])):
            contents.append(seq)
    rhythms = []
    while len(rhythms) < spec.rhythm_patterns:
        d = tuple(int(x) for x in rng.integers(spec.min_phone_frames, spec.max_phone_frames + 1,
                                               PHONES_PER_UTT))
        if d not in rhythms:
            rhythms.append(d)
    shapes = [
        lambda u: u,                          # rise
        lambda u: 1.0 - u,                    # fall
        lambda u: np.sin(np.pi * u),          # rise-fall
        lambda u: 1.0 - np.sin(np.pi * u),    # fall-rise
    ]
    pitches = []
    for p in range(spec.pitch_patterns):
        if p < len(shapes):
            pitches.append(shapes[p])
        else:
            c = rng.standard_normal(3)
            pitches.append(lambda u, c=c: 0.5 + 0.5 * np.tanh(c[0] * np.sin(2 * np.pi * (c[1] * u + c[2]))))
    speakers = []
    scales = np.linspace(0.85, 1.18, spec.n_speakers)
    tilts = np.linspace(-4.0, -10.0, spec.n_speakers)
    order = rng.permutation(spec.n_speakers)
    for s in range(spec.n_speakers):
        speakers.append({
            "formant_scale": float(scales[s]),
            "tilt_db_per_oct": float(tilts[order[s]]),
            "extra_formant": float(rng.uniform(2800, 4500)),
            "extra_gain": float(rng.uniform(0.1, 0.5)),
        })
    return contents, rhythms, pitches, speakers


def _envelope(freqs: np.ndarray, formants: np.ndarray, speaker: dict) -> np.ndarray:
    """Spectral envelope at ``freqs`` (frames x harmonics) for frame formants (frames x 3)."""
    env = np.full(freqs.shape, 0.01)
    fmts = formants * speaker["formant_scale"]
    for i in range(3):
        env += FORMANT_GAIN[i] / (1.0 + ((freqs - fmts[:, i:i + 1]) / (FORMANT_BW[i] / 2)) ** 2)
    env += speaker["extra_gain"] / (1.0 + ((freqs - speaker["extra_formant"]) / 200.0) ** 2)
    tilt = (np.maximum(freqs, 50.0) / 100.0) ** (speaker["tilt_db_per_oct"] / 6.02)
    return env * tilt


def synthesize(content_seq, durations, pitch_shape, speaker: dict, rng: np.random.Generator,
               config: Optional[SpectrogramConfig] = None, f0_lo: float = 110.0,
               f0_hi: float = 200.0) -> Waveform:
    config = config or SpectrogramConfig()
    hop, win, sr = config.hop_length, config.win_length, config.sample_rate
    n_frames = int(sum(durations))
    n = (n_frames - 1) * hop + win

    # frame-level formant tracks with short linear transitions between phones
    track = np.concatenate([np.repeat(VOWELS[p][None], d, axis=0)
                            for p, d in zip(content_seq, durations)])
    kernel = np.ones(5) / 5
    track = np.stack([np.convolve(np.pad(track[:, i], 2, mode="edge"), kernel, "valid")
                      for i in range(3)], axis=1)

    u = np.linspace(0.0, 1.0, n_frames)
    f0_scale = 1.0 + 0.03 * rng.uniform(-1, 1)
    f0_frames = f0_lo * (f0_hi / f0_lo) ** pitch_shape(u) * f0_scale

    frame_t = (np.arange(n_frames) * hop + win / 2) / sr
    t = np.arange(n) / sr
    f0 = np.interp(t, frame_t, f0_frames)
    k_max = int(7800 // f0_lo)
    harm = np.arange(1, k_max + 1)
    amps_frames = _envelope(f0_frames[:, None] * harm[None, :], track, speaker)
    amps_frames[f0_frames[:, None] * harm[None, :] > 7800] = 0.0
    phase = 2 * np.pi * np.cumsum(f0) / sr
    y = np.zeros(n)
    for k in harm:
        a = np.interp(t, frame_t, amps_frames[:, k - 1])
        y += a * np.sin(k * phase)
    ramp = min(160, n // 4)
    fade = np.ones(n)
    fade[:ramp] = np.linspace(0, 1, ramp)
    fade[-ramp:] = np.linspace(1, 0, ramp)
    y *= fade
    y = y / np.max(np.abs(y)) * rng.uniform(0.3, 0.5)
    y += 10 ** (-45 / 20) * rng.standard_normal(n)
    return Waveform(np.clip(y, -1, 1), sr)


def generate_synthetic(spec: SyntheticSpec, config: Optional[SpectrogramConfig] = None):
    """Full factorial toy corpus with ground-truth factor labels.

    Content sets the vowel sequence (spectral envelope), pitch the F0 shape,
    rhythm the per-phone durations and speaker a timbral filter (formant
    scaling, spectral tilt, an extra resonance). Frame-level labels give the
    vowel (``phone``) and the quantized pitch height (``pitch_level``) of
    every spectrogram frame.
    """
    contents, rhythms, pitches, speakers = _design(spec)
    out = []
    for s in range(spec.n_speakers):
        for c in range(spec.n_contents):
            for p in range(spec.pitch_patterns):
                for r in range(spec.rhythm_patterns):
                    for take in range(spec.utterances_per_cell):
                        rng = np.random.default_rng([spec.seed, 1, s, c, p, r, take])
                        w = synthesize(contents[c], rhythms[r], pitches[p], speakers[s], rng, config)
                        height = pitches[p](np.linspace(0.0, 1.0, sum(rhythms[r])))
                        frame_labels = {
                            "phone": np.repeat(contents[c], rhythms[r]),
                            "pitch_level": np.minimum((height * PITCH_LEVELS).astype(int),
                                                      PITCH_LEVELS - 1),
                        }
                        out.append(SyntheticUtterance(
                            f"spk{s}_c{c}_p{p}_r{r}_t{take}", f"spk{s}", c, p, r, take, w,
                            frame_labels))
    return out


def write_synthetic(root, corpus: Sequence[SyntheticUtterance],
                    spec: Optional[SyntheticSpec] = None) -> str:
    """Emit ``<root>/<speaker>/<utt>.wav`` plus ``labels.csv``; returns the CSV path.

    Each WAV gets a ``.json`` sidecar holding its labels, frame labels and the
    generator settings needed to regenerate it.
    """
    root = os.fspath(root)
    for u in corpus:
        os.makedirs(os.path.join(root, u.speaker), exist_ok=True)
        wav = os.path.join(root, u.speaker, f"{u.utt_id}.wav")
        save_audio(wav, u.waveform)
        sidecar = {"utt_id": u.utt_id, "speaker": u.speaker, "labels": u.labels,
                   "frame_labels": {k: np.asarray(v).tolist() for k, v in u.frame_labels.items()},
                   "generator": "synthetic",
                   "synthetic_spec": dataclasses.asdict(spec) if spec is not None else None}
        with open(wav[:-4] + ".json", "w") as fh:
            json.dump(sidecar, fh, sort_keys=True)
    path = os.path.join(root, "labels.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utt_id", "speaker", "content", "pitch", "rhythm"])
        for u in corpus:
            writer.writerow([u.utt_id, u.speaker, u.content, u.pitch, u.rhythm])
    return path


def read_labels(path) -> Dict[str, Dict[str, int]]:
    with open(os.fspath(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        spk = r["speaker"]
        out[r["utt_id"]] = {"speaker": int(spk[3:]) if spk[3:].isdigit() else -1,
                            "content": int(r["content"]), "pitch": int(r["pitch"]),
                            "rhythm": int(r["rhythm"])}
    return out


def synthetic_utterances(corpus: Sequence[SyntheticUtterance], config=None, embedder=None,
                         speaker_dim: int = 16):
    items = [(u.utt_id, u.speaker, u.waveform, u.labels, u.frame_labels) for u in corpus]
    return build_utterances(items, config, embedder, speaker_dim)
