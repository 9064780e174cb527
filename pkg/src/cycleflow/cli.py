"""Command-line entry point: ``cycleflow <subcommand> ...``.

Subcommands: ``gen-synthetic``, ``prepare``, ``train``, ``eval-mi``, ``convert``
and ``edit``. Options that tune the underlying modules live in plain
``key = value`` config files (``--config``) and can be overridden one at a
time with ``--set key=value``. Unknown keys are rejected by name.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .dataset import (
    CorpusError,
    SpeakerEmbedder,
    SyntheticSpec,
    generate_synthetic,
    load_prepared,
    load_utterances,
    make_speaker_vector,
    save_prepared,
    scan_corpus,
    write_synthetic,
)
from .evaluation import (
    DEFAULT_K,
    PAIR_NAMES,
    ClusteringError,
    ConfigMismatch,
    MIReport,
    compare_models,
    mi_report,
)
from .model import (
    FACTORS,
    CheckpointError,
    FactorModel,
    FactorSet,
    ModelConfig,
    load_checkpoint,
    resize_time,
    save_checkpoint,
)
from .signal import (
    SignalError,
    Spectrogram,
    SpectrogramConfig,
    compute_spectrogram,
    extract_pitch,
    invert_spectrogram,
    load_audio,
    save_audio,
)
from .training import TrainConfig, TrainingDiverged, build_model, train, write_history

log = logging.getLogger("cycleflow")


class ConfigError(ValueError):
    """Bad config file or ``--set`` override."""


# --------------------------------------------------------------------------
# key = value configs
# --------------------------------------------------------------------------

def read_config_file(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    try:
        with open(os.fspath(path)) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _parse_overrides(items: Optional[Iterable[str]]) -> Dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(type(d)(p) for d, p in zip(default, parts, strict=True))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from exc
    return text


def gather_config(args, *targets) -> List[dict]:
    """Split config-file entries and overrides across dataclass ``targets``.

    Returns one kwargs dict per target. A key that no target declares raises
    :class:`ConfigError` naming it.
    """
    raw: Dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    raw.update(_parse_overrides(getattr(args, "set", None)))
    defaults = [{f.name: getattr(t(), f.name) for f in dataclasses.fields(t)} for t in targets]
    out: List[dict] = [{} for _ in targets]
    for key, text in raw.items():
        owners = [i for i, d in enumerate(defaults) if key in d]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        for i in owners:
            out[i][key] = _coerce(key, text, defaults[i][key])
    return out


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(os.fspath(path), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, payload) -> None:
    with open(os.fspath(path), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sidecar_path(wav_path) -> str:
    return os.path.splitext(os.fspath(wav_path))[0] + ".json"


def _parse_factor_set(text: str, flag: str) -> List[str]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    bad = [n for n in names if n not in FACTORS]
    if bad:
        raise ConfigError(f"{flag}: unknown factor(s) {bad}; choose from {list(FACTORS)}")
    if not names:
        raise ConfigError(f"{flag} must name at least one factor")
    return [f for f in FACTORS if f in names]


class _Encoded:
    """One WAV run through the checkpoint's front end and encoders."""

    def __init__(self, model: FactorModel, path):
        extras = model.extras
        self.config = SpectrogramConfig(**extras.get("spectrogram_config", {}))
        if "speaker_embedder" not in extras:
            raise CheckpointError("checkpoint lacks a speaker embedder (was it written by `train`?)")
        embedder = SpeakerEmbedder.from_state(extras["speaker_embedder"])
        self.path = os.fspath(path)
        w = load_audio(path, self.config.sample_rate)
        self.spectrogram = compute_spectrogram(w, self.config)
        pitch = extract_pitch(w, self.config)
        self.speaker_vector = make_speaker_vector([self.spectrogram], embedder)
        with torch.no_grad():
            self.z = model.encode(self.spectrogram.frames[None], pitch.as_features()[None],
                                  self.speaker_vector[None])

    @property
    def n_frames(self) -> int:
        return self.spectrogram.n_frames


def _render(model: FactorModel, z: FactorSet, n_frames: int, config: SpectrogramConfig,
            out_path, seed: int, sidecar: dict) -> None:
    with torch.no_grad():
        frames = model.decode(z, n_frames)[0].double().numpy()
    wav = invert_spectrogram(Spectrogram(frames, config), seed=seed)
    out_dir = os.path.dirname(os.fspath(out_path))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_audio(out_path, wav)
    sidecar = dict(sidecar)
    sidecar.update({"version": __version__, "seed": seed, "n_frames": n_frames,
                    "griffin_lim_iters": config.griffin_lim_iters,
                    "sample_rate": wav.sample_rate, "wav_sha256": _sha256(out_path)})
    _write_json(_sidecar_path(out_path), sidecar)


def _reconcile(z_source: FactorSet, z_other: FactorSet, factors: Sequence[str]):
    """Swap ``factors`` of ``z_other`` into ``z_source``, resizing time linearly."""
    changes, notes = {}, {}
    for name in factors:
        incoming = z_other[name]
        if name != "timbre":
            want = z_source[name].shape[1]
            if incoming.shape[1] != want:
                notes[name] = {"from": int(incoming.shape[1]), "to": int(want),
                               "method": "linear"}
                incoming = resize_time(incoming, want)
        changes[name] = incoming
    return z_source.replace(**changes), notes


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    (spec_kw,) = gather_config(args, SyntheticSpec)
    if args.seed is not None:
        spec_kw["seed"] = args.seed
    spec = SyntheticSpec(**spec_kw)
    corpus = generate_synthetic(spec)
    path = write_synthetic(args.out, corpus, spec)
    print(f"wrote {len(corpus)} utterances and {path}")
    return 0


def cmd_prepare(args) -> int:
    (spec_kw,) = gather_config(args, SpectrogramConfig)
    config = SpectrogramConfig(**spec_kw)
    descs = scan_corpus(args.corpus, test_fraction=args.test_fraction, seed=args.seed)
    utts, embedder = load_utterances(descs, config, speaker_dim=args.speaker_dim)
    splits = {d.utt_id: d.split for d in descs}
    if args.test_label:
        key, _, value = args.test_label.partition("=")
        for u in utts:
            if str(u.labels.get(key)) == value:
                splits[u.utt_id] = "test"
    save_prepared(args.out, utts, embedder, splits)
    n_test = sum(1 for s in splits.values() if s == "test")
    print(f"prepared {len(utts)} utterances ({n_test} test) in {args.out}")
    return 0


def cmd_train(args) -> int:
    model_kw, train_kw = gather_config(args, ModelConfig, TrainConfig)
    for name in ("alpha", "steps", "seed"):
        value = getattr(args, name)
        if value is not None:
            train_kw[name] = value
    tconf = TrainConfig(**train_kw)
    mconf = ModelConfig(**model_kw)
    utts, embedder = load_prepared(args.data, args.split)
    _seed_everything(tconf.seed)
    model = build_model(mconf, tconf.seed)
    ckpt_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(ckpt_dir, exist_ok=True)
    try:
        model, history = train(model, utts, tconf, embedder, utts[0].spectrogram.config,
                               checkpoint_dir=ckpt_dir if tconf.checkpoint_every else None)
    except TrainingDiverged as exc:
        write_history(args.history or os.path.splitext(args.out)[0] + ".history.csv", exc.history)
        raise
    save_checkpoint(model, args.out)
    history_path = args.history or os.path.splitext(args.out)[0] + ".history.csv"
    write_history(history_path, history)
    last = history[-1] if history else {"rec": float("nan"), "cyc": float("nan")}
    print(f"alpha={tconf.alpha} steps={tconf.steps} rec={last['rec']:.4f} cyc={last['cyc']:.4f} "
          f"-> {args.out}")
    return 0


def cmd_eval_mi(args) -> int:
    if len(args.checkpoints) > 2:
        raise ConfigError("--checkpoints takes one checkpoint or a baseline/CycleFlow pair")
    utts, _ = load_prepared(args.data, args.split)
    models = [load_checkpoint(p) for p in args.checkpoints]
    out_dir = os.path.dirname(os.fspath(args.out))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    run = {"checkpoints": [{"file": os.path.basename(p), "sha256": _sha256(p)}
                           for p in args.checkpoints],
           "split": args.split, "k": args.k, "seeds": list(args.seeds), "version": __version__}
    if len(models) == 2:
        comp = compare_models(models[0], models[1], utts, seeds=args.seeds, k=args.k,
                              labels=tuple(args.labels[:2]))
        csv_text, payload, table = comp.to_csv(), json.loads(comp.to_json()), comp.table()
    else:
        reports = [mi_report(models[0], utts, k=args.k, seed=s, label=args.labels[0])
                   for s in args.seeds]
        csv_text = _reports_csv(reports)
        payload = {"labels": [args.labels[0]],
                   "reports": [dataclasses.asdict(r) for r in reports],
                   "mean": {args.labels[0]: _mean_values(reports)}}
        table = _single_table(reports)
    payload["run"] = run
    with open(args.out + ".csv", "w", newline="") as fh:
        fh.write(csv_text)
    _write_json(args.out + ".json", payload)
    with open(args.out + ".txt", "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def _mean_values(reports: Sequence[MIReport]) -> Dict[str, float]:
    return {p: float(np.mean([r.values[p] for r in reports])) for p in PAIR_NAMES}


def _reports_csv(reports: Sequence[MIReport]) -> str:
    lines = ["pair,model,mi_nats,n_frames,k,seed"]
    for r in reports:
        for row in r.rows():
            lines.append(f"{row['pair']},{row['model']},{float(row['mi_nats'])!r},"
                         f"{row['n_frames']},{row['k']},{row['seed']}")
    return "\n".join(lines) + "\n"


def _single_table(reports: Sequence[MIReport]) -> str:
    label = reports[0].model
    mean = _mean_values(reports)
    lines = [f"{'No.':<4}{'Factors':<12}{label:>12}"]
    for i, p in enumerate(PAIR_NAMES, 1):
        lines.append(f"{i:<4}{p.replace('-', ' vs. '):<12}{mean[p]:>12.4f}")
    return "\n".join(lines)


def cmd_convert(args) -> int:
    swap = _parse_factor_set(args.swap, "--swap")
    if os.path.abspath(args.source) == os.path.abspath(args.target):
        raise ConfigError("--source and --target must be different utterances")
    _seed_everything(args.seed)
    model = load_checkpoint(args.checkpoint)
    src = _Encoded(model, args.source)
    tgt = _Encoded(model, args.target)
    z, notes = _reconcile(src.z, tgt.z, swap)
    sidecar = {"command": "convert", "checkpoint": os.path.basename(args.checkpoint),
               "checkpoint_sha256": _sha256(args.checkpoint),
               "source": args.source, "source_sha256": _sha256(args.source),
               "target": args.target, "target_sha256": _sha256(args.target),
               "swap": swap, "time_reconciliation": notes}
    _render(model, z, src.n_frames, src.config, args.out, args.seed, sidecar)
    print(f"converted {args.source} (swap {','.join(swap)} from {args.target}) -> {args.out}")
    return 0


def cmd_edit(args) -> int:
    frozen = _parse_factor_set(args.freeze, "--freeze")
    if args.policy == "reference" and not args.reference:
        raise ConfigError("--policy reference needs --reference")
    _seed_everything(args.seed)
    model = load_checkpoint(args.checkpoint)
    src = _Encoded(model, args.input)
    sidecar = {"command": "edit", "checkpoint": os.path.basename(args.checkpoint),
               "checkpoint_sha256": _sha256(args.checkpoint),
               "input": args.input, "input_sha256": _sha256(args.input),
               "frozen": frozen, "policy": args.policy}
    if args.policy == "reference":
        ref = _Encoded(model, args.reference)
        z, notes = _reconcile(src.z, ref.z, frozen)
        sidecar.update({"reference": args.reference, "reference_sha256": _sha256(args.reference),
                        "time_reconciliation": notes})
    else:
        if args.policy == "mean" and "factor_means" not in model.extras:
            raise CheckpointError("checkpoint has no corpus factor means; use --policy zeros")
        changes = {}
        for name in frozen:
            like = src.z[name]
            if args.policy == "zeros":
                changes[name] = torch.zeros_like(like)
            else:
                mean = torch.tensor(model.extras["factor_means"][name], dtype=like.dtype)
                changes[name] = mean.expand_as(like).clone()
        z = src.z.replace(**changes)
    _render(model, z, src.n_frames, src.config, args.out, args.seed, sidecar)
    print(f"edited {args.input} (froze {','.join(frozen)} with {args.policy}) -> {args.out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cycleflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write the labelled toy corpus as WAVs")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, help="generator seed (overrides config)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("prepare", help="featurize a <speaker>/<utt>.wav corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="feature cache directory")
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="fraction of speakers held out as the test split")
    p.add_argument("--test-label", metavar="NAME=VALUE",
                   help="also hold out utterances whose sidecar label matches, e.g. take=2")
    p.add_argument("--speaker-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train CycleFlow (alpha > 0) or SpeechFlow (alpha = 0)")
    p.add_argument("--data", required=True, help="feature cache from `prepare`")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--split", default="train")
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--history", help="loss CSV (default: <out>.history.csv)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-mi", help="pairwise MI between S and the factors")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True,
                   help="one checkpoint, or baseline then CycleFlow")
    p.add_argument("--out", required=True, help="output prefix for .csv/.json/.txt")
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--labels", nargs="+", default=["SpeechFlow", "CycleFlow"])
    p.set_defaults(func=cmd_eval_mi)

    p = sub.add_parser("convert", help="swap factors of SOURCE with those of TARGET")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--swap", required=True, help="comma list from rhythm,pitch,content,timbre")
    p.add_argument("--out", required=True, help="output WAV (a .json sidecar is written beside it)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("edit", help="hold some factors constant")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--freeze", required=True, help="comma list from rhythm,pitch,content,timbre")
    p.add_argument("--policy", choices=("mean", "zeros", "reference"), default="mean")
    p.add_argument("--reference", help="reference WAV for --policy reference")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_edit)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cycleflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SignalError, CorpusError, CheckpointError, ClusteringError, ConfigMismatch,
            TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"cycleflow {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
