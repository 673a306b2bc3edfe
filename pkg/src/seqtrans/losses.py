"""Alignment losses and their exhaustive-enumeration oracles.

ctc_loss and transducer_loss are exact negative log path-sums computed by
forward (alpha) recursions in log space; their gradients with respect to the
input log-probability grids come from the matching backward (beta)
recursions, so both register as single custom nodes on the autodiff tape.

brute_force_ctc and brute_force_rnnt recompute the same quantities by
explicit enumeration of labelings/emission paths and exist only to check the
recursions; they refuse instances large enough to be combinatorial.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

NEG_INF = -np.inf


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.5  # CTC
    alpha2: float = 1.0  # transducer
    alpha3: float = 1.0  # LM

    def __post_init__(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.alpha1 == self.alpha2 == self.alpha3 == 0:
            raise ConfigError("at least one loss weight must be positive")


def _extended_targets(target: tuple[int, ...]) -> list[int]:
    """Interleave blanks: y1 y2 -> 0 y1 0 y2 0."""
    ext = [0]
    for t in target:
        ext.append(t)
        ext.append(0)
    return ext


def ctc_feasible(n_frames: int, target: tuple[int, ...]) -> bool:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return n_frames >= len(target) + repeats


def ctc_forward_backward(log_probs: np.ndarray, target: tuple[int, ...]
                         ) -> tuple[float, np.ndarray]:
    """Exact CTC negative log-likelihood and its gradient w.r.t. log_probs.

    log_probs: (T, D) log-softmaxed rows with the blank in column 0.
    """
    t_len, n_sym = log_probs.shape
    ext = _extended_targets(target)
    s_len = len(ext)

    if not ctc_feasible(t_len, target):
        warnings.warn(
            f"CTC target of length {len(target)} infeasible for {t_len} frames; loss is +inf",
            RuntimeWarning,
            stacklevel=3,
        )
        return math.inf, np.zeros_like(log_probs)

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = np.logaddexp(acc, alpha[t - 1, s - 1])
            # skip transition allowed between distinct non-blank labels
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                acc = np.logaddexp(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + log_probs[t, ext[s]]

    log_p = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        log_p = np.logaddexp(log_p, alpha[t_len - 1, s_len - 2])

    # beta excludes the emission at its own frame so alpha+beta is a full path sum
    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            acc = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < s_len:
                acc = np.logaddexp(acc, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < s_len and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                acc = np.logaddexp(acc, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = acc

    grad = np.zeros_like(log_probs)
    with np.errstate(invalid="ignore"):
        occupancy = np.exp(alpha + beta - log_p)  # P(state s at frame t | target)
    for s in range(s_len):
        grad[:, ext[s]] -= occupancy[:, s]
    return float(-log_p), grad


def ctc_loss(log_probs, target) -> Tensor:
    """-log sum over all CTC alignments of the target; infeasible -> +inf."""
    target = tuple(int(t) for t in target)
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(np.asarray(log_probs, dtype=np.float64))
    if lp.data.ndim != 2:
        raise ShapeError(f"ctc_loss: expected (T, D) log-probs, got shape {lp.data.shape}")
    if any(not 1 <= t < lp.data.shape[1] for t in target):
        raise ConfigError(f"ctc_loss: target ids must lie in [1, {lp.data.shape[1] - 1}]")
    nll, grad = ctc_forward_backward(lp.data, target)
    return ad.record(np.asarray(nll), (lp,), lambda g: (g * grad,))


def rnnt_forward_backward(grid: np.ndarray, target: tuple[int, ...]
                          ) -> tuple[float, np.ndarray]:
    """Exact transducer negative log-likelihood and grid gradient.

    grid: (T, U+1, D) log-softmaxed joint outputs, blank in column 0. A path
    emits the blank to advance one frame and target[u] to advance one label;
    it terminates with the blank at (T-1, U).
    """
    t_len, u_rows, _ = grid.shape
    u_len = len(target)

    alpha = np.full((t_len, u_rows), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(t_len):
        for u in range(u_rows):
            if t == 0 and u == 0:
                continue
            acc = NEG_INF
            if t > 0:
                acc = alpha[t - 1, u] + grid[t - 1, u, 0]
            if u > 0:
                acc = np.logaddexp(acc, alpha[t, u - 1] + grid[t, u - 1, target[u - 1]])
            alpha[t, u] = acc

    log_p = alpha[t_len - 1, u_len] + grid[t_len - 1, u_len, 0]

    beta = np.full((t_len, u_rows), NEG_INF)
    beta[t_len - 1, u_len] = grid[t_len - 1, u_len, 0]
    for t in range(t_len - 1, -1, -1):
        for u in range(u_len, -1, -1):
            if t == t_len - 1 and u == u_len:
                continue
            acc = NEG_INF
            if t + 1 < t_len:
                acc = grid[t, u, 0] + beta[t + 1, u]
            if u < u_len:
                acc = np.logaddexp(acc, grid[t, u, target[u]] + beta[t, u + 1])
            beta[t, u] = acc

    grad = np.zeros_like(grid)
    with np.errstate(invalid="ignore"):
        for t in range(t_len):
            for u in range(u_len + 1):
                if alpha[t, u] == NEG_INF:
                    continue
                # blank edge: (t,u) -> (t+1,u), or termination at the corner
                if t + 1 < t_len:
                    grad[t, u, 0] -= np.exp(alpha[t, u] + grid[t, u, 0] + beta[t + 1, u] - log_p)
                elif u == u_len:
                    grad[t, u, 0] -= np.exp(alpha[t, u] + grid[t, u, 0] - log_p)
                # label edge: (t,u) -> (t,u+1)
                if u < u_len:
                    grad[t, u, target[u]] -= np.exp(
                        alpha[t, u] + grid[t, u, target[u]] + beta[t, u + 1] - log_p)
    return float(-log_p), grad


def transducer_loss(grid, target) -> Tensor:
    """-log sum over all monotonic blank/label emission paths of the target."""
    target = tuple(int(t) for t in target)
    g = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid, dtype=np.float64))
    if g.data.ndim != 3:
        raise ShapeError(f"transducer_loss: expected (T, U+1, D) grid, got shape {g.data.shape}")
    if g.data.shape[0] < 1:
        raise ConfigError("transducer_loss: need at least one frame")
    if g.data.shape[1] != len(target) + 1:
        raise ShapeError(
            f"transducer_loss: grid label axis {g.data.shape[1]} != target length {len(target)} + 1")
    if any(not 1 <= t < g.data.shape[2] for t in target):
        raise ConfigError(f"transducer_loss: target ids must lie in [1, {g.data.shape[2] - 1}]")
    nll, grad = rnnt_forward_backward(g.data, target)
    return ad.record(np.asarray(nll), (g,), lambda og: (og * grad,))


def lm_loss(lm_log_probs, target) -> Tensor:
    """Mean negative log-probability of each label given its prefix.

    lm_log_probs: (U+1, D_LM) rows from the LM classifier; row u predicts
    target[u], and the trailing row is unused. Column k-1 scores token id k.
    """
    target = tuple(int(t) for t in target)
    if not target:
        raise ConfigError("lm_loss: empty target")
    lp = lm_log_probs if isinstance(lm_log_probs, Tensor) else Tensor(np.asarray(lm_log_probs, dtype=np.float64))
    u_len = len(target)
    if lp.data.ndim != 2 or lp.data.shape[0] < u_len:
        raise ShapeError(f"lm_loss: need >= {u_len} rows, got shape {lp.data.shape}")
    if any(not 1 <= t <= lp.data.shape[1] for t in target):
        raise ConfigError(f"lm_loss: target ids must lie in [1, {lp.data.shape[1]}]")
    rows = ad.narrow(lp, 0, 0, u_len)
    picked = ad.gather_cols(rows, np.asarray(target) - 1)
    return ad.mul(ad.mean_all(picked), -1.0)


def total_loss(l_ctc, l_trans, l_lm, weights: LossWeights) -> Tensor:
    """Weighted sum of the three components; +inf propagates."""
    terms = []
    for w, term in ((weights.alpha1, l_ctc), (weights.alpha2, l_trans), (weights.alpha3, l_lm)):
        if w != 0.0:
            if term is None:
                raise ConfigError("total_loss: weighted component missing")
            terms.append(ad.mul(term if isinstance(term, Tensor) else Tensor(np.asarray(term, dtype=np.float64)), w))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def collapse_ctc(labeling: tuple[int, ...]) -> tuple[int, ...]:
    """Collapse repeats, then drop blanks."""
    out = []
    prev = None
    for sym in labeling:
        if sym != prev:
            out.append(sym)
        prev = sym
    return tuple(s for s in out if s != 0)


def brute_force_ctc(log_probs: np.ndarray, target) -> float:
    """Enumerate every frame labeling and sum those that collapse to target."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    target = tuple(int(t) for t in target)
    t_len, n_sym = log_probs.shape
    if t_len > 6 or n_sym > 5:
        raise ConfigError(f"brute_force_ctc refuses T={t_len}, D={n_sym} (combinatorial guard)")
    total = NEG_INF
    for labeling in product(range(n_sym), repeat=t_len):
        if collapse_ctc(labeling) != target:
            continue
        total = np.logaddexp(total, sum(log_probs[t, s] for t, s in enumerate(labeling)))
    return float(-total)


def brute_force_rnnt(grid: np.ndarray, target) -> float:
    """Depth-first enumeration of transducer emission paths for the target."""
    grid = np.asarray(grid, dtype=np.float64)
    target = tuple(int(t) for t in target)
    t_len, u_rows, _ = grid.shape
    u_len = len(target)
    if t_len + u_len > 10:
        raise ConfigError(f"brute_force_rnnt refuses T+U={t_len + u_len} (combinatorial guard)")

    paths: list[float] = []

    def walk(t: int, u: int, acc: float) -> None:
        if t == t_len - 1 and u == u_len:
            paths.append(acc + grid[t, u, 0])  # terminating blank
        if t + 1 < t_len:
            walk(t + 1, u, acc + grid[t, u, 0])
        if u < u_len:
            walk(t, u + 1, acc + grid[t, u, target[u]])

    walk(0, 0, 0.0)
    if not paths:
        return math.inf
    total = paths[0]
    for p in paths[1:]:
        total = np.logaddexp(total, p)
    return float(-total)


def random_log_prob_grid(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """Random well-conditioned log-softmax grid along the last axis."""
    logits = rng.normal(size=shape) * 2.0
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
