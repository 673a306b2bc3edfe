"""One-pass transducer beam search with internal-LM shallow fusion.

The search is frame-synchronous: within a frame, hypotheses extend by label
emissions (chains capped at beam_size per frame), and hypotheses with the
same prefix merge by log-adding their transducer scores, which preserves the
path-sum semantics of the transducer probability. The blank emission then
carries every surviving hypothesis to the next frame. Each label extension
adds the LM classifier's log-probability for that label to a separately
tracked LM score; ranking uses the fused score
beta2 * score_trans + beta3 * score_lm. Ties break toward the
lexicographically smaller prefix, making the search deterministic.

exhaustive_decode scores every label sequence up to max_len by the exact
transducer path sum plus the weighted LM score and exists as the oracle for
small instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .errors import ConfigError, DataError
from .losses import rnnt_forward_backward
from .networks import Model


@dataclass(frozen=True)
class DecodeWeights:
    beta1: float = 0.0  # CTC re-scoring; fixed at 0
    beta2: float = 1.0  # transducer
    beta3: float = 0.1  # internal LM

    def __post_init__(self) -> None:
        if self.beta1 != 0.0:
            raise ConfigError("CTC re-scoring (beta1 != 0) is not supported; decoding fuses the LM only")
        if self.beta2 <= 0.0:
            raise ConfigError("transducer weight beta2 must be positive")


@dataclass
class Hypothesis:
    prefix: tuple[int, ...]
    score_trans: float
    score_lm: float
    pred_state: nets.LstmState
    g_row: np.ndarray  # last prediction-network output row (1, D_PR)

    def fused(self, w: DecodeWeights) -> float:
        return w.beta2 * self.score_trans + w.beta3 * self.score_lm


class _PredictionCache:
    """Per-utterance cache of prediction-network rows keyed by prefix."""

    def __init__(self, model: Model) -> None:
        self.model = model
        self.rows: dict[tuple[int, ...], tuple[np.ndarray, nets.LstmState]] = {}

    def root(self) -> tuple[np.ndarray, nets.LstmState]:
        return self.get(())

    def get(self, prefix: tuple[int, ...]) -> tuple[np.ndarray, nets.LstmState]:
        hit = self.rows.get(prefix)
        if hit is not None:
            return hit
        if not prefix:
            out, state = nets.prediction_forward(self.model.params, self.model.cfg.prediction, ())
        else:
            _, parent_state = self.get(prefix[:-1])
            out, state = nets.prediction_forward(self.model.params, self.model.cfg.prediction,
                                                 (prefix[-1],), state=parent_state)
        entry = (out.data.copy(), state)
        self.rows[prefix] = entry
        return entry


def _joint_rows(model: Model, fa_row: np.ndarray, g_row: np.ndarray) -> np.ndarray:
    """Log-probs of one (frame, prefix) cell; fa_row = f_t @ W_TR precomputed."""
    pre = np.tanh(fa_row + g_row @ model.params["joint.w_pr"].data)
    logits = pre @ model.params["joint.w_o"].data
    shifted = logits - logits.max()
    return (shifted - np.log(np.exp(shifted).sum())).reshape(-1)


def _lm_row(model: Model, g_row: np.ndarray) -> np.ndarray:
    logits = (g_row @ model.params["lm.w"].data).reshape(-1)
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _top(hyps: dict[tuple[int, ...], Hypothesis], w: DecodeWeights, beam: int
         ) -> list[Hypothesis]:
    return sorted(hyps.values(), key=lambda h: (-h.fused(w), h.prefix))[:beam]


def beam_search(model: Model, features: np.ndarray, beam_size: int,
                w: DecodeWeights | None = None, max_len: int | None = None,
                nbest: int | None = None) -> list[Hypothesis]:
    """Frame-synchronous transducer beam search with optional LM fusion.

    Returns hypotheses sorted by fused score (best first). `max_len` bounds
    the prefix length; `nbest` trims the returned list.
    """
    w = w or DecodeWeights()
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DataError("beam_search: empty feature sequence")

    f = nets.transcription_forward(model.params, model.cfg.transcription, features).data
    fa = f @ model.params["joint.w_tr"].data  # (T', D_J)
    use_lm = w.beta3 != 0.0
    cache = _PredictionCache(model)
    g0, state0 = cache.root()
    active: dict[tuple[int, ...], Hypothesis] = {
        (): Hypothesis((), 0.0, 0.0, state0, g0)
    }

    for t in range(fa.shape[0]):
        # in-frame label expansion; each unit of probability mass expands once
        agg: dict[tuple[int, ...], Hypothesis] = dict(active)
        frontier = _top(active, w, beam_size)
        joint_cache: dict[tuple[int, ...], np.ndarray] = {}
        for _ in range(beam_size):
            children: dict[tuple[int, ...], Hypothesis] = {}
            for hyp in frontier:
                if max_len is not None and len(hyp.prefix) >= max_len:
                    continue
                lp = joint_cache.get(hyp.prefix)
                if lp is None:
                    lp = _joint_rows(model, fa[t], hyp.g_row)
                    joint_cache[hyp.prefix] = lp
                lm = _lm_row(model, hyp.g_row) if use_lm else None
                for k in range(1, lp.shape[0]):
                    child_prefix = hyp.prefix + (k,)
                    st = hyp.score_trans + lp[k]
                    sl = hyp.score_lm + lm[k - 1] if use_lm else 0.0
                    existing = children.get(child_prefix)
                    if existing is None:
                        g_row, state = cache.get(child_prefix)
                        children[child_prefix] = Hypothesis(child_prefix, st, sl, state, g_row)
                    else:
                        existing.score_trans = np.logaddexp(existing.score_trans, st)
                    merged = agg.get(child_prefix)
                    if merged is None:
                        g_row, state = cache.get(child_prefix)
                        agg[child_prefix] = Hypothesis(child_prefix, st, sl, state, g_row)
                    else:
                        merged.score_trans = np.logaddexp(merged.score_trans, st)
            if not children:
                break
            frontier = _top(children, w, beam_size)

        # blank advances every hypothesis to the next frame
        survivors = _top(agg, w, beam_size)
        active = {}
        for hyp in survivors:
            lp = joint_cache.get(hyp.prefix)
            if lp is None:
                lp = _joint_rows(model, fa[t], hyp.g_row)
            active[hyp.prefix] = Hypothesis(hyp.prefix, hyp.score_trans + lp[0],
                                            hyp.score_lm, hyp.pred_state, hyp.g_row)

    ranked = _top(active, w, beam_size)
    return ranked[:nbest] if nbest is not None else ranked


def greedy_decode(model: Model, features: np.ndarray) -> tuple[int, ...]:
    """Beam-1 search without LM fusion."""
    hyps = beam_search(model, features, 1, DecodeWeights(0.0, 1.0, 0.0))
    return hyps[0].prefix


def lm_score(model: Model, prefix: Sequence[int]) -> float:
    """Sum of per-step internal-LM log-probabilities of the prefix."""
    prefix = tuple(int(t) for t in prefix)
    if not prefix:
        return 0.0
    g, _ = nets.prediction_forward(model.params, model.cfg.prediction, prefix)
    rows = nets.lm_log_probs(model.params, g).data
    return float(sum(rows[u, tok - 1] for u, tok in enumerate(prefix)))


def transducer_score(model: Model, features_or_f: np.ndarray, prefix: Sequence[int],
                     precomputed_f: bool = False) -> float:
    """Exact log path-sum of the prefix under the model (via the loss DP)."""
    prefix = tuple(int(t) for t in prefix)
    if precomputed_f:
        f = features_or_f
    else:
        f = nets.transcription_forward(model.params, model.cfg.transcription,
                                       np.asarray(features_or_f, dtype=np.float64)).data
    g, _ = nets.prediction_forward(model.params, model.cfg.prediction, prefix)
    grid = nets.joint_log_probs(model.params, model.cfg.joint, f, g.data).data
    nll, _ = rnnt_forward_backward(grid, prefix)
    return -nll


def exhaustive_decode(model: Model, features: np.ndarray, max_len: int,
                      w: DecodeWeights | None = None) -> tuple[tuple[int, ...], float]:
    """Best prefix by fused score over every label sequence up to max_len."""
    w = w or DecodeWeights()
    features = np.asarray(features, dtype=np.float64)
    f = nets.transcription_forward(model.params, model.cfg.transcription, features).data
    d_lm = model.cfg.d_lm
    n_candidates = sum(d_lm ** L for L in range(max_len + 1))
    if n_candidates * f.shape[0] > 10**5:
        raise ConfigError(
            f"exhaustive_decode refuses {n_candidates} candidates x {f.shape[0]} frames "
            "(combinatorial guard)")

    candidates: list[tuple[int, ...]] = [()]
    frontier: list[tuple[int, ...]] = [()]
    for _ in range(max_len):
        frontier = [p + (k,) for p in frontier for k in range(1, d_lm + 1)]
        candidates.extend(frontier)

    best_prefix: tuple[int, ...] | None = None
    best_score = -np.inf
    for prefix in candidates:
        score = w.beta2 * transducer_score(model, f, prefix, precomputed_f=True)
        if w.beta3 != 0.0:
            score += w.beta3 * lm_score(model, prefix)
        if score > best_score or (score == best_score and prefix < best_prefix):
            best_prefix, best_score = prefix, score
    return best_prefix, best_score


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance (substitutions + insertions + deletions)."""
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1,          # deletion
                         cur[j - 1] + 1,       # insertion
                         prev[j - 1] + (ref[i - 1] != hyp[j - 1]))
        prev = cur
    return prev[m]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """(S + I + D) / |reference| over word (or token) sequences."""
    if len(reference) == 0:
        raise DataError("wer: empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def wer_text(reference: str, hypothesis: str) -> float:
    """Word-level WER over whitespace-split text."""
    return wer(reference.split(), hypothesis.split())


def corpus_wer(pairs: Sequence[tuple[str, str]]) -> float:
    """Aggregate WER over (reference, hypothesis) text pairs."""
    edits = 0
    words = 0
    for ref, hyp in pairs:
        ref_words = ref.split()
        if not ref_words:
            raise DataError("wer: empty reference")
        edits += edit_distance(ref_words, hyp.split())
        words += len(ref_words)
    return edits / words


def relative_reduction(baseline: float, new: float) -> float:
    """Fractional WER reduction relative to a baseline."""
    if baseline <= 0:
        raise DataError("relative reduction needs a positive baseline WER")
    return (baseline - new) / baseline
