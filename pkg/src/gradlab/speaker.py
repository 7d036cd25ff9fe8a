"""Speaker embeddings, triplet-loss training, enrollment and ranking.

The encoder is a per-frame feed-forward stack; frame encodings are averaged
over time and L2-normalized into an utterance embedding. Speakers are scored
by the mean cosine similarity between the query embedding and each of their
enrollment embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InsufficientCorpus, ShapeMismatch


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 6
    hidden: tuple[int, ...] = (32,)
    embed_dim: int = 16
    steps: int = 1500
    lr: float = 0.1
    batch_size: int = 16
    margin: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.embed_dim]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "hidden" in known:
            known["hidden"] = tuple(known["hidden"])
        return cls(**known)


@dataclass
class Encoder:
    config: EncoderConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)])

    @classmethod
    def unflatten(cls, config: EncoderConfig, flat: np.ndarray) -> "Encoder":
        widths = config.widths
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(flat[pos:pos + fan_out].copy())
            pos += fan_out
        if pos != len(flat):
            raise ShapeMismatch(f"encoder expects {pos} parameters, got {len(flat)}")
        return cls(config, weights, biases)


def init_encoder(config: EncoderConfig) -> Encoder:
    rng = np.random.default_rng(config.seed)
    widths = config.widths
    weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return Encoder(config, weights, biases)


@dataclass
class SpeakerProfile:
    speaker_id: int
    embeddings: np.ndarray  # (n, e), rows unit-norm

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.shape[0] < 1:
            raise ConfigError("a profile needs at least one enrollment")


@dataclass
class RankingResult:
    ranking: list[tuple[int, float]]
    rank: Optional[int] = None

    def rank_of(self, speaker_id: int) -> int:
        for i, (sid, _) in enumerate(self.ranking):
            if sid == speaker_id:
                return i + 1
        raise KeyError(speaker_id)


def _encode_frames(enc: Encoder, x: np.ndarray):
    acts = [x]
    a = x
    n = len(enc.weights)
    for i, (W, b) in enumerate(zip(enc.weights, enc.biases)):
        a = a @ W + b
        if i < n - 1:
            a = np.tanh(a)
        acts.append(a)
    return acts


def _embed_cached(enc: Encoder, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != enc.config.input_dim:
        raise ShapeMismatch(f"expected nonempty (T, {enc.config.input_dim}) features, got {x.shape}")
    acts = _encode_frames(enc, x)
    pooled = acts[-1].mean(axis=0)
    norm = np.linalg.norm(pooled)
    return pooled / norm, (acts, norm)


def embed(enc: Encoder, x: np.ndarray) -> np.ndarray:
    return _embed_cached(enc, x)[0]


def _embed_backward(enc: Encoder, emb: np.ndarray, cache, d_emb: np.ndarray, gw, gb) -> None:
    acts, norm = cache
    d_pooled = (d_emb - emb * (emb @ d_emb)) / norm
    T = acts[0].shape[0]
    d = np.broadcast_to(d_pooled / T, acts[-1].shape)
    for i in range(len(enc.weights) - 1, -1, -1):
        a_in = acts[i]
        gw[i] += a_in.T @ d
        gb[i] += d.sum(axis=0)
        if i > 0:
            d = (d @ enc.weights[i].T) * (1.0 - acts[i] ** 2)


def triplet_loss(s_ap, s_an, margin: float = 0.1):
    """Hinge on the gap between negative and positive cosine similarity."""
    return np.maximum(0.0, np.asarray(s_an) - np.asarray(s_ap) + margin)


def _check_corpus(groups: dict[int, list[np.ndarray]]) -> None:
    if len(groups) < 2:
        raise InsufficientCorpus("need at least two speakers")
    few = [sid for sid, utts in groups.items() if len(utts) < 2]
    if few:
        raise InsufficientCorpus(f"speakers with fewer than two utterances: {few}")


def triplet_batch_loss_and_grad(enc: Encoder, triplets: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]):
    """Mean triplet loss over ``(anchor, positive, negative)`` feature triples and its gradient."""
    gw = [np.zeros_like(w) for w in enc.weights]
    gb = [np.zeros_like(b) for b in enc.biases]
    total = 0.0
    m = enc.config.margin
    scale = 1.0 / len(triplets)
    for xa, xp, xn in triplets:
        ea, ca = _embed_cached(enc, xa)
        ep, cp = _embed_cached(enc, xp)
        en, cn = _embed_cached(enc, xn)
        s_ap, s_an = ea @ ep, ea @ en
        loss = float(triplet_loss(s_ap, s_an, m))
        total += loss
        if loss > 0:
            _embed_backward(enc, ea, ca, scale * (en - ep), gw, gb)
            _embed_backward(enc, ep, cp, -scale * ea, gw, gb)
            _embed_backward(enc, en, cn, scale * ea, gw, gb)
    return total * scale, gw, gb


def train_embedder(groups: dict[int, list[np.ndarray]], config: EncoderConfig) -> Encoder:
    """Train an encoder with SGD on randomly sampled triplets.

    ``groups`` maps speaker id to that speaker's training utterances.
    """
    _check_corpus(groups)
    enc = init_encoder(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    ids = sorted(groups)
    for _ in range(config.steps):
        triplets = []
        for _ in range(config.batch_size):
            a = ids[rng.integers(len(ids))]
            n = ids[rng.integers(len(ids) - 1)]
            if n >= a:
                n = ids[ids.index(n) + 1]
            i, j = rng.choice(len(groups[a]), size=2, replace=False)
            k = rng.integers(len(groups[n]))
            triplets.append((groups[a][i], groups[a][j], groups[n][k]))
        _, gw, gb = triplet_batch_loss_and_grad(enc, triplets)
        for W, g in zip(enc.weights, gw):
            W -= config.lr * g
        for b, g in zip(enc.biases, gb):
            b -= config.lr * g
    return enc


def enroll(enc: Encoder, groups: dict[int, list[np.ndarray]]) -> list[SpeakerProfile]:
    return [SpeakerProfile(sid, np.stack([embed(enc, x) for x in groups[sid]])) for sid in sorted(groups)]


def rank_speakers(query: np.ndarray, profiles: Sequence[SpeakerProfile],
                  true_speaker: Optional[int] = None) -> RankingResult:
    """Order speakers by mean cosine similarity to ``query``; ties go to the lower id."""
    if not profiles:
        raise ConfigError("no enrolled speakers")
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scores = [(p.speaker_id, float(np.mean(p.embeddings @ q))) for p in profiles]
    scores.sort(key=lambda s: (-s[1], s[0]))
    result = RankingResult(scores)
    if true_speaker is not None:
        result.rank = result.rank_of(true_speaker)
    return result


def metrics(ranks: Iterable, ks: Sequence[int] = (1, 5)) -> tuple[float, ...]:
    """Top-k accuracies for each ``k`` followed by the mean reciprocal rank.

    Accepts integer ranks or :class:`RankingResult` objects.
    """
    r = np.array([x.rank if isinstance(x, RankingResult) else x for x in ranks], dtype=np.float64)
    if r.size == 0:
        raise ValueError("metrics need at least one result")
    return tuple(float(np.mean(r <= k)) for k in ks) + (float(np.mean(1.0 / r)),)
