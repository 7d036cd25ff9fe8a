"""CTC loss and its gradient with respect to per-frame logits.

All lattice arithmetic is done in log space. The blank symbol is the last
column of the logit matrix, i.e. index ``|L|`` for an alphabet of size ``|L|``.

The batched entry point :func:`ctc_loss_grad_batch` evaluates many logit
matrices against one transcript at once; the reconstruction attack relies on
it to score all candidate moves of an iteration in a single pass.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EnumerationTooLarge, InfeasibleAlignment, ShapeMismatch

BRUTE_FORCE_MAX_T = 8
BRUTE_FORCE_MAX_LABELS = 4


@dataclass
class CtcResult:
    loss: float
    grad_logits: np.ndarray
    log_alpha: np.ndarray  # (2S+1, T)
    log_beta: np.ndarray  # (2S+1, T)


def extend_labels(y: Sequence[int], blank: int) -> list[int]:
    """Interleave ``y`` with blanks: ``[b, y1, b, y2, ..., yS, b]``."""
    ext = [blank]
    for token in y:
        ext.append(int(token))
        ext.append(blank)
    return ext


def min_frames(y: Sequence[int]) -> int:
    """Shortest input length that admits a CTC path for ``y``."""
    repeats = sum(1 for a, b in zip(y[:-1], y[1:]) if a == b)
    return len(y) + repeats


def check_feasible(y: Sequence[int], T: int, num_labels: int) -> None:
    for token in y:
        if not 0 <= token < num_labels:
            raise ShapeMismatch(f"token {token} outside alphabet of size {num_labels}")
    need = min_frames(y)
    if need > T:
        raise InfeasibleAlignment(
            f"transcript of length {len(y)} needs at least {need} frames, got T={T}"
        )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _lattices(lp_ext: np.ndarray, skip: np.ndarray):
    """Forward and backward log lattices for stacked inputs.

    ``lp_ext`` has shape (K, T, S') and holds the log-probability of the
    extended label at each state; both lattices include the emission at t.
    """
    K, T, S = lp_ext.shape
    neg_inf = -np.inf
    alpha = np.full((K, T, S), neg_inf)
    beta = np.full((K, T, S), neg_inf)
    # states reachable by skipping a blank: forward from s-2, backward from s+2
    fwd_skip = np.flatnonzero(skip)
    bwd_skip = fwd_skip - 2

    alpha[:, 0, :2] = lp_ext[:, 0, :2]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(prev[:, 1:], prev[:, :-1])
        if fwd_skip.size:
            acc[:, fwd_skip] = np.logaddexp(acc[:, fwd_skip], prev[:, bwd_skip])
        alpha[:, t] = acc + lp_ext[:, t]

    beta[:, T - 1, -2:] = lp_ext[:, T - 1, -2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1]
        acc = nxt.copy()
        acc[:, :-1] = np.logaddexp(nxt[:, :-1], nxt[:, 1:])
        if fwd_skip.size:
            acc[:, bwd_skip] = np.logaddexp(acc[:, bwd_skip], nxt[:, fwd_skip])
        beta[:, t] = acc + lp_ext[:, t]
    return alpha, beta


def ctc_loss_grad_batch(logits: np.ndarray, y: Sequence[int], lattices: bool = False):
    """Negative log-likelihood and logit gradient for a stack of inputs.

    ``logits`` has shape (K, T, |L|+1). Returns ``(loss, grad)`` with shapes
    (K,) and (K, T, |L|+1); with ``lattices=True`` the (K, T, S') log-space
    forward/backward lattices are appended.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3:
        raise ShapeMismatch(f"expected (K, T, C) logits, got shape {logits.shape}")
    K, T, C = logits.shape
    blank = C - 1
    y = [int(t) for t in y]
    check_feasible(y, T, blank)

    ext = np.asarray(extend_labels(y, blank))
    S = len(ext)
    skip = np.zeros(S, dtype=bool)
    for s in range(2, S):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    logp = log_softmax(logits)
    lp_ext = logp[:, :, ext]
    alpha, beta = _lattices(lp_ext, skip)

    if S > 1:
        log_p = np.logaddexp(alpha[:, T - 1, S - 1], alpha[:, T - 1, S - 2])
    else:
        log_p = alpha[:, T - 1, 0]

    # state posteriors lie in [0, 1], so the scatter onto labels is done in linear space
    post = np.exp(alpha + beta - lp_ext - log_p[:, None, None])
    onehot = np.zeros((S, C))
    onehot[np.arange(S), ext] = 1.0
    occupancy = post @ onehot
    grad = np.exp(logp) - occupancy
    if lattices:
        return -log_p, grad, alpha, beta
    return -log_p, grad


def ctc_loss_grad(logits: np.ndarray, y: Sequence[int]) -> CtcResult:
    """CTC loss ``-ln p(y|x)`` for one (T, |L|+1) logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeMismatch(f"expected (T, C) logits, got shape {logits.shape}")
    loss, grad, alpha, beta = ctc_loss_grad_batch(logits[None], y, lattices=True)
    return CtcResult(
        loss=float(loss[0]),
        grad_logits=grad[0],
        log_alpha=alpha[0].T.copy(),
        log_beta=beta[0].T.copy(),
    )


def collapse(path: Sequence[int], blank: int) -> tuple[int, ...]:
    """Merge repeated symbols, then drop blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_brute_force(logits: np.ndarray, y: Sequence[int]) -> float:
    """p(y|x) by summing over every length-T path. Test oracle only."""
    logits = np.asarray(logits, dtype=np.float64)
    T, C = logits.shape
    if T > BRUTE_FORCE_MAX_T or C - 1 > BRUTE_FORCE_MAX_LABELS:
        raise EnumerationTooLarge(f"T={T}, |L|={C - 1} exceeds enumeration bounds")
    probs = np.exp(log_softmax(logits))
    target = tuple(int(t) for t in y)
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, C - 1) == target:
            total += float(np.prod(probs[np.arange(T), path]))
    return total
