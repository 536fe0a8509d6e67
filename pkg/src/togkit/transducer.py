"""Transducer (RNN-T) negative log-likelihood over the T x (U+1) lattice.

Alpha/beta recursions run along anti-diagonals in float64 log space, so one
numpy logaddexp per diagonal replaces the cell-by-cell Python loop. A path
enumeration oracle (`brute_force_nll`) implements the marginalization
definition directly for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .tape import Tensor, _record

BLANK_ID = 0

# Finite stand-in for log(0): representable in float32 and float64, absorbs
# additions without producing inf - inf = NaN anywhere downstream.
LOG_ZERO = -1.0e30

_MAX_BRUTE_PATHS = 10**6


@dataclass
class LossLattice:
    log_probs: np.ndarray  # [T, U+1, K] float64
    alpha: np.ndarray      # [T, U+1]
    beta: np.ndarray       # [T, U+1]; includes the cell's own outgoing emission
    nll: float

    # beta extended with a virtual row T: beta_ext[T, U] = 0 (log 1) at the
    # terminal, LOG_ZERO elsewhere; lets the gradient use one formula for all t
    _beta_ext: np.ndarray = None


def _validate(log_probs: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    if log_probs.ndim != 3:
        raise ValueError(f"log-probs must be [T, U+1, K], got shape {log_probs.shape}")
    T, U1, K = log_probs.shape
    U = len(labels)
    if T < 1:
        raise ValueError("transducer loss needs T >= 1 frames")
    if U1 != U + 1:
        raise ValueError(f"label count {U} does not match lattice width {U1} (want U+1)")
    if any(int(y) == BLANK_ID for y in labels):
        raise ValueError("labels must not contain BLANK")
    if any(not 0 <= int(y) < K for y in labels):
        raise ValueError(f"label id out of range for K={K}")
    return T, U, K


def _label_slice(log_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """log_probs[t, u, labels[u]] for u < U, shape [T, U]."""
    T, U1, _ = log_probs.shape
    U = U1 - 1
    if U == 0:
        return np.zeros((T, 0), dtype=log_probs.dtype)
    idx = np.broadcast_to(np.asarray(labels, dtype=np.int64)[None, :, None], (T, U, 1))
    return np.take_along_axis(log_probs[:, :U, :], idx, axis=2)[:, :, 0]


def rnnt_nll(log_probs: np.ndarray, labels) -> LossLattice:
    """Exact -log p(labels | log_probs), marginalized over all alignments."""
    labels = np.asarray(labels, dtype=np.int64)
    T, U, K = _validate(log_probs, labels)
    lp = np.asarray(log_probs, dtype=np.float64)
    blank_lp = lp[:, :, BLANK_ID]            # [T, U+1]
    lab_lp = _label_slice(lp, labels)        # [T, U]

    alpha = np.full((T, U + 1), LOG_ZERO)
    alpha[0, 0] = 0.0
    for s in range(1, T + U):
        u_lo = max(0, s - (T - 1))
        u_hi = min(U, s)
        if u_lo > u_hi:
            continue
        us = np.arange(u_lo, u_hi + 1)
        ts = s - us
        tm = np.maximum(ts - 1, 0)
        from_blank = alpha[tm, us] + blank_lp[tm, us]
        from_blank[ts == 0] = LOG_ZERO
        um = np.maximum(us - 1, 0)
        from_label = alpha[ts, um] + (lab_lp[ts, um] if U else LOG_ZERO)
        from_label[us == 0] = LOG_ZERO
        alpha[ts, us] = np.logaddexp(from_blank, from_label)

    beta_ext = np.full((T + 1, U + 1), LOG_ZERO)
    beta_ext[T, U] = 0.0
    for s in range(T - 1 + U, -1, -1):
        u_lo = max(0, s - (T - 1))
        u_hi = min(U, s)
        if u_lo > u_hi:
            continue
        us = np.arange(u_lo, u_hi + 1)
        ts = s - us
        down = blank_lp[ts, us] + beta_ext[ts + 1, us]
        uc = np.minimum(us, max(U - 1, 0))
        right = (lab_lp[ts, uc] if U else LOG_ZERO) + beta_ext[ts, np.minimum(us + 1, U)]
        right = np.where(us < U, right, LOG_ZERO)
        beta_ext[ts, us] = np.logaddexp(down, right)

    log_like = alpha[T - 1, U] + blank_lp[T - 1, U]
    return LossLattice(
        log_probs=lp,
        alpha=alpha,
        beta=beta_ext[:T],
        nll=float(-log_like),
        _beta_ext=beta_ext,
    )


def rnnt_grad(lattice: LossLattice, labels) -> np.ndarray:
    """d(nll)/d(log-probs), shape [T, U+1, K].

    Occupancy of transition (t,u)--k-->successor is
    exp(alpha(t,u) + logp(t,u,k) + beta(successor) + nll); the gradient is its
    negation, zero for transitions that cannot reach the terminal.
    """
    if lattice is None or lattice._beta_ext is None or lattice.alpha is None:
        raise ValueError("lattice not populated; call rnnt_nll first")
    labels = np.asarray(labels, dtype=np.int64)
    T, U1, K = lattice.log_probs.shape
    U = U1 - 1
    lp = lattice.log_probs
    log_like = -lattice.nll

    grad = np.zeros((T, U1, K))
    occ_blank = np.exp(lattice.alpha + lp[:, :, BLANK_ID]
                       + lattice._beta_ext[1:, :] - log_like)
    grad[:, :, BLANK_ID] = -occ_blank
    if U:
        lab_lp = _label_slice(lp, labels)
        occ_label = np.exp(lattice.alpha[:, :U] + lab_lp
                           + lattice._beta_ext[:T, 1:] - log_like)
        tt = np.repeat(np.arange(T), U)
        uu = np.tile(np.arange(U), T)
        np.subtract.at(grad, (tt, uu, labels[uu]), occ_label[tt, uu])
    return grad


def brute_force_nll(log_probs: np.ndarray, labels) -> float:
    """Enumerate every monotone alignment and log-sum the path scores."""
    labels = np.asarray(labels, dtype=np.int64)
    T, U, K = _validate(log_probs, labels)
    n_paths = comb(T - 1 + U, U)
    if n_paths > _MAX_BRUTE_PATHS:
        raise ValueError(f"{n_paths} alignments exceed the enumeration budget")
    lp = np.asarray(log_probs, dtype=np.float64)

    scores = np.empty(n_paths)
    moves = T - 1 + U
    for i, label_slots in enumerate(combinations(range(moves), U)):
        slots = set(label_slots)
        t = u = 0
        score = 0.0
        for m in range(moves):
            if m in slots:
                score += lp[t, u, labels[u]]
                u += 1
            else:
                score += lp[t, u, BLANK_ID]
                t += 1
        score += lp[T - 1, U, BLANK_ID]
        scores[i] = score
    return float(-np.logaddexp.reduce(scores))


def transducer_loss(logp: Tensor, labels) -> Tensor:
    """Tape node: nll of one utterance given per-node log-probs [T, U+1, K].

    Pair with log_softmax on the joint logits; the chain rule then yields
    logit gradients that sum to zero over the alphabet at every node.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lattice = rnnt_nll(logp.data, labels)

    def backward_fn(g):
        return ((float(g) * rnnt_grad(lattice, labels)).astype(logp.data.dtype),)

    out_data = np.asarray(lattice.nll, dtype=logp.data.dtype)
    return _record(out_data, (logp,), backward_fn)
