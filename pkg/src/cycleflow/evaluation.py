"""Disentanglement measurement: K-means discretization and plug-in mutual information."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans

from .model import FactorModel, upsample

DEFAULT_K = 10
PROTOCOL_VERSION = 1
VARIABLES = ("S", "Z_c", "Z_r", "Z_f")
PAIRS = (("S", "Z_c"), ("S", "Z_r"), ("S", "Z_f"),
         ("Z_c", "Z_r"), ("Z_c", "Z_f"), ("Z_r", "Z_f"))
PAIR_NAMES = tuple(f"{a}-{b}" for a, b in PAIRS)
MIN_FRAMES_PER_CLUSTER = 50


class ClusteringError(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    variable_id: str = ""
    inertia: float = 0.0

    def predict(self, samples: np.ndarray) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        d = ((x[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def fit_clusters(samples, k: int = DEFAULT_K, seed: int = 0, variable_id: str = "",
                 n_init: int = 10, max_iter: int = 300) -> ClusterModel:
    """K-means with ``n_init`` restarts; keeps the lowest-inertia solution."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ClusteringError("k must be >= 1")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        raise ClusteringError(f"{variable_id or 'samples'}: {n_distinct} distinct points < k={k}")
    km = KMeans(n_clusters=k, n_init=n_init, max_iter=max_iter, random_state=seed).fit(x)
    return ClusterModel(k, km.cluster_centers_, variable_id, float(km.inertia_))


def entropy(ids) -> float:
    _, counts = np.unique(np.asarray(ids), return_counts=True)
    p = counts / counts.sum()
    return -math.fsum(p * np.log(p))


def discrete_mi(ids_a, ids_b) -> float:
    """Plug-in mutual information (nats) of two discrete sequences.

    Terms are accumulated with ``math.fsum`` so the result does not depend on
    argument order.
    """
    a = np.asarray(ids_a).ravel()
    b = np.asarray(ids_b).ravel()
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty id sequences")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    n = float(len(a))
    pa = joint.sum(axis=1) / n
    pb = joint.sum(axis=0) / n
    rows, cols = np.nonzero(joint)
    p = joint[rows, cols] / n
    mi = math.fsum(p * np.log(p / (pa[rows] * pb[cols])))
    bound = min(entropy(a), entropy(b))
    return float(min(max(mi, 0.0), bound))


# --------------------------------------------------------------------------
# frame collection
# --------------------------------------------------------------------------

@torch.no_grad()
def collect_frames(model: FactorModel, utterances) -> Dict[str, np.ndarray]:
    """Frame-rate vectors for S, Z_c, Z_r, Z_f (factors upsampled) plus labels.

    Encoding runs without random resampling.
    """
    model.eval()
    downs = model.config.downs()
    out: Dict[str, List[np.ndarray]] = {v: [] for v in VARIABLES}
    labels: Dict[str, List[np.ndarray]] = {}
    for u in utterances:
        t = u.n_frames
        z = model.encode(u.spectrogram.frames[None], u.pitch.as_features()[None],
                         u.speaker_vector[None])
        out["S"].append(u.spectrogram.frames)
        out["Z_c"].append(upsample(z.content, downs["content"], t)[0].double().numpy())
        out["Z_r"].append(upsample(z.rhythm, downs["rhythm"], t)[0].double().numpy())
        out["Z_f"].append(upsample(z.pitch, downs["pitch"], t)[0].double().numpy())
        for name, value in u.labels.items():
            labels.setdefault(name, []).append(np.full(t, value))
        for name, value in u.frame_labels.items():
            labels.setdefault(f"frame_{name}", []).append(np.asarray(value))
    frames = {v: np.concatenate(x) for v, x in out.items()}
    frames.update({f"label:{k}": np.concatenate(v) for k, v in labels.items()})
    return frames


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class MIReport:
    model: str
    values: Dict[str, float]
    n_frames: int
    k: int
    seed: int
    metadata: dict = field(default_factory=dict)

    def rows(self) -> List[dict]:
        return [{"pair": p, "model": self.model, "mi_nats": self.values[p],
                 "n_frames": self.n_frames, "k": self.k, "seed": self.seed}
                for p in PAIR_NAMES]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def mi_from_frames(frames: Dict[str, np.ndarray], k: int = DEFAULT_K, seed: int = 0):
    n = len(frames["S"])
    if n < k * MIN_FRAMES_PER_CLUSTER:
        raise ClusteringError(f"{n} frames is too few for k={k} (need {k * MIN_FRAMES_PER_CLUSTER})")
    ids = {v: fit_clusters(frames[v], k, seed, v).predict(frames[v]) for v in VARIABLES}
    return {f"{a}-{b}": discrete_mi(ids[a], ids[b]) for a, b in PAIRS}, ids


def mi_report(model: FactorModel, utterances, k: int = DEFAULT_K, seed: int = 0,
              label: str = "model", metadata: Optional[dict] = None) -> MIReport:
    """Six pairwise MI values between S and the factors, per the K-means protocol."""
    frames = collect_frames(model, utterances)
    values, _ = mi_from_frames(frames, k, seed)
    meta = {"protocol": PROTOCOL_VERSION, "n_utterances": len(utterances)}
    meta.update(metadata or {})
    return MIReport(label, values, len(frames["S"]), k, seed, meta)


def label_mi(model: FactorModel, utterances, variable: str, label: str,
             k: int = DEFAULT_K, seed: int = 0) -> float:
    """MI between a factor's cluster ids and a ground-truth label (synthetic corpus)."""
    frames = collect_frames(model, utterances)
    ids = fit_clusters(frames[variable], k, seed, variable).predict(frames[variable])
    return discrete_mi(ids, frames[f"label:{label}"])


@dataclass
class Comparison:
    labels: tuple
    reports_a: List[MIReport]
    reports_b: List[MIReport]

    def mean(self, which: str) -> Dict[str, float]:
        reports = self.reports_a if which == "a" else self.reports_b
        return {p: float(np.mean([r.values[p] for r in reports])) for p in PAIR_NAMES}

    @property
    def deltas(self) -> Dict[str, float]:
        a, b = self.mean("a"), self.mean("b")
        return {p: b[p] - a[p] for p in PAIR_NAMES}

    def rows(self) -> List[dict]:
        return [row for r in self.reports_a + self.reports_b for row in r.rows()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["pair", "model", "mi_nats", "n_frames", "k", "seed"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({**row, "mi_nats": repr(float(row["mi_nats"]))})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "labels": list(self.labels),
            "reports": [asdict(r) for r in self.reports_a + self.reports_b],
            "mean": {self.labels[0]: self.mean("a"), self.labels[1]: self.mean("b")},
            "delta": self.deltas,
        }, sort_keys=True, indent=1)

    def table(self) -> str:
        a, b = self.mean("a"), self.mean("b")
        lines = [f"{'No.':<4}{'Factors':<12}{self.labels[0]:>12}{self.labels[1]:>12}{'delta':>10}"]
        for i, p in enumerate(PAIR_NAMES, 1):
            lines.append(f"{i:<4}{p.replace('-', ' vs. '):<12}{a[p]:>12.4f}{b[p]:>12.4f}"
                         f"{b[p] - a[p]:>+10.4f}")
        return "\n".join(lines)


def compare_models(model_a: FactorModel, model_b: FactorModel, utterances,
                   seeds: Sequence[int] = (0,), k: int = DEFAULT_K,
                   labels=("SpeechFlow", "CycleFlow")) -> Comparison:
    """Same protocol for both models, independent cluster fits per model and seed."""
    if model_a.config != model_b.config:
        raise ConfigMismatch("models must share one ModelConfig")
    frames_a = collect_frames(model_a, utterances)
    frames_b = collect_frames(model_b, utterances)
    reps_a, reps_b = [], []
    for seed in seeds:
        va, _ = mi_from_frames(frames_a, k, seed)
        vb, _ = mi_from_frames(frames_b, k, seed)
        meta = {"protocol": PROTOCOL_VERSION, "n_utterances": len(utterances)}
        reps_a.append(MIReport(labels[0], va, len(frames_a["S"]), k, seed, dict(meta)))
        reps_b.append(MIReport(labels[1], vb, len(frames_b["S"]), k, seed, dict(meta)))
    return Comparison(tuple(labels), reps_a, reps_b)
