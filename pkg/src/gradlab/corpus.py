"""Synthetic speaker/utterance corpus, feature normalization and MAE.

Each speaker owns a signature vector; each token of the alphabet owns a
content vector shared by all speakers. Frame ``t`` of an utterance is

    signature + content[token aligned to t] + noise

with tokens laid out over the frames in equal contiguous segments. Features
are then standardized per dimension with statistics pooled over the whole
corpus, which puts them on the same scale as the attacker's ``[-1, 1]``
initialization.

On-disk layout written by :func:`save_corpus`::

    corpus.json          generation parameters, normalization stats, speakers
    manifest.csv         id,speaker_id,T,transcript (space-separated tokens)
    features/<id>.csv    first row "T,d", then T rows of d values
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateStd, ShapeMismatch

STD_FLOOR = 1e-12


@dataclass
class SpeakerSpec:
    speaker_id: int
    signature: np.ndarray
    signature_scale: float
    content_scale: float
    noise_scale: float


@dataclass
class Utterance:
    utt_id: str
    speaker_id: int
    transcript: list[int]
    features: np.ndarray

    @property
    def T(self) -> int:
        return self.features.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class CorpusConfig:
    num_speakers: int = 8
    utterances_per_speaker: int = 8
    length_buckets: list = field(default_factory=lambda: [[4, 5], [6, 8]])
    dim: int = 6
    alphabet_size: int = 4
    signature_scale: float = 0.3
    content_scale: float = 1.5
    noise_scale: float = 0.1
    max_transcript_ratio: float = 0.5
    avoid_palindromes: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Corpus:
    config: CorpusConfig
    speakers: list[SpeakerSpec]
    utterances: list[Utterance]
    stats: NormStats
    content_table: Optional[np.ndarray] = None

    def by_speaker(self) -> dict[int, list[Utterance]]:
        out: dict[int, list[Utterance]] = {}
        for u in self.utterances:
            out.setdefault(u.speaker_id, []).append(u)
        return out


def fit_normalizer(frames: np.ndarray) -> NormStats:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ShapeMismatch("normalizer needs a nonempty (N, d) frame matrix")
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    bad = np.flatnonzero(std < STD_FLOOR)
    if bad.size:
        raise DegenerateStd(f"constant feature dimension(s): {bad.tolist()}")
    return NormStats(mean, std)


def normalize_features(x: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeMismatch(f"expected nonempty (T, d) features, got {x.shape}")
    return (x - stats.mean) / stats.std


def frame_mae(x: np.ndarray, x_ref: np.ndarray) -> np.ndarray:
    """Mean absolute error per frame."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ShapeMismatch(f"shape {x.shape} != {x_ref.shape}")
    return np.abs(x - x_ref).mean(axis=1)


def mae(x: np.ndarray, x_ref: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ShapeMismatch(f"shape {x.shape} != {x_ref.shape}")
    return float(np.abs(x - x_ref).mean())


def aligned_mae(x: np.ndarray, x_ref: np.ndarray) -> float:
    """MAE after truncating or zero-padding ``x`` to the length of ``x_ref``."""
    T = x_ref.shape[0]
    if x.shape[0] >= T:
        return mae(x[:T], x_ref)
    padded = np.zeros_like(x_ref)
    padded[: x.shape[0]] = x
    return mae(padded, x_ref)


def _token_alignment(T: int, S: int) -> np.ndarray:
    return (np.arange(T) * S) // T


def _draw_transcript(rng: np.random.Generator, T: int, config: CorpusConfig) -> np.ndarray:
    """Random transcript of 1..T*ratio tokens.

    With ``avoid_palindromes`` the draw is repeated until the transcript differs
    from its reverse: for a per-frame model, the gradient of a palindromic
    transcript cannot tell an utterance from its time reversal.
    """
    s_max = max(1, int(T * config.max_transcript_ratio))
    need_asym = config.avoid_palindromes and s_max >= 2 and config.alphabet_size >= 2
    while True:
        S = int(rng.integers(1, s_max + 1))
        tokens = rng.integers(0, config.alphabet_size, size=S)
        if not need_asym or not np.array_equal(tokens, tokens[::-1]):
            return tokens


def generate_corpus(config: CorpusConfig) -> Corpus:
    if config.num_speakers < 2:
        raise ValueError("need at least two speakers")
    root = np.random.SeedSequence(config.seed)
    spk_seq, content_seq, utt_seq = root.spawn(3)
    content_table = np.random.default_rng(content_seq).standard_normal((config.alphabet_size, config.dim))

    speakers = []
    for sid, seq in enumerate(spk_seq.spawn(config.num_speakers)):
        sig = np.random.default_rng(seq).standard_normal(config.dim) * config.signature_scale
        speakers.append(SpeakerSpec(sid, sig, config.signature_scale, config.content_scale, config.noise_scale))

    raw = []
    buckets = [tuple(b) for b in config.length_buckets]
    seqs = utt_seq.spawn(config.num_speakers * config.utterances_per_speaker)
    for spk in speakers:
        for j in range(config.utterances_per_speaker):
            rng = np.random.default_rng(seqs[spk.speaker_id * config.utterances_per_speaker + j])
            lo, hi = buckets[j % len(buckets)]
            T = int(rng.integers(lo, hi + 1))
            tokens = _draw_transcript(rng, T, config)
            S = tokens.size
            content = content_table[tokens[_token_alignment(T, S)]]
            frames = (spk.signature + config.content_scale * content
                      + config.noise_scale * rng.standard_normal((T, config.dim)))
            raw.append((f"s{spk.speaker_id:03d}u{j:03d}", spk.speaker_id, tokens.tolist(), frames))

    stats = fit_normalizer(np.concatenate([r[3] for r in raw]))
    utts = [Utterance(uid, sid, tr, normalize_features(fr, stats)) for uid, sid, tr, fr in raw]
    return Corpus(config, speakers, utts, stats, content_table)


def write_feature_file(path: Path, x: np.ndarray) -> None:
    T, d = x.shape
    lines = [f"{T},{d}"]
    lines += [",".join(repr(float(v)) for v in row) for row in x]
    Path(path).write_text("\n".join(lines) + "\n")


def read_feature_file(path: Path) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()
    T, d = (int(v) for v in rows[0].split(","))
    x = np.array([[float(v) for v in r.split(",")] for r in rows[1:]], dtype=np.float64)
    if x.shape != (T, d):
        raise ShapeMismatch(f"{path}: header says {(T, d)}, body has {x.shape}")
    return x


def save_corpus(corpus: Corpus, directory: Path) -> None:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    meta = {
        "config": asdict(corpus.config),
        "norm_mean": corpus.stats.mean.tolist(),
        "norm_std": corpus.stats.std.tolist(),
        "speakers": [
            {"speaker_id": s.speaker_id, "signature": s.signature.tolist(),
             "signature_scale": s.signature_scale, "content_scale": s.content_scale,
             "noise_scale": s.noise_scale}
            for s in corpus.speakers
        ],
    }
    (directory / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(directory / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "speaker_id", "T", "transcript"])
        for u in corpus.utterances:
            w.writerow([u.utt_id, u.speaker_id, u.T, " ".join(str(t) for t in u.transcript)])
            write_feature_file(directory / "features" / f"{u.utt_id}.csv", u.features)


def load_corpus(directory: Path) -> Corpus:
    """Load a corpus directory; features are taken as already normalized.

    ``corpus.json`` is optional so externally computed features can be dropped
    in with just a manifest; normalization stats are then fitted on the loaded
    frames.
    """
    directory = Path(directory)
    utts = []
    with open(directory / "manifest.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            x = read_feature_file(directory / "features" / f"{rec['id']}.csv")
            if x.shape[0] != int(rec["T"]):
                raise ShapeMismatch(f"{rec['id']}: manifest T={rec['T']} but features have {x.shape[0]} frames")
            tokens = [int(t) for t in rec["transcript"].split()]
            utts.append(Utterance(rec["id"], int(rec["speaker_id"]), tokens, x))
    meta_path = directory / "corpus.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        config = CorpusConfig.from_dict(meta["config"])
        stats = NormStats(np.array(meta["norm_mean"]), np.array(meta["norm_std"]))
        speakers = [SpeakerSpec(s["speaker_id"], np.array(s["signature"]), s["signature_scale"],
                                s["content_scale"], s["noise_scale"]) for s in meta["speakers"]]
    else:
        stats = fit_normalizer(np.concatenate([u.features for u in utts]))
        ids = sorted({u.speaker_id for u in utts})
        dim = utts[0].features.shape[1]
        alphabet = max(t for u in utts for t in u.transcript) + 1
        config = CorpusConfig(num_speakers=len(ids), dim=dim, alphabet_size=alphabet)
        speakers = [SpeakerSpec(i, np.zeros(dim), 0.0, 0.0, 0.0) for i in ids]
    return Corpus(config, speakers, utts, stats)
