# %%
"""
Decoding: greedy and CTC prefix beam search, n-gram rescoring, alpha tuning,
cascade routing and error-rate metrics.

Rescoring maximizes S(t) = ln p_AM(t|x) + alpha * ln p_LM(t). Both terms are
log-probabilities, so "best" means the largest combined score.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd

from ctc import collapse
from errors import ConfigError, EmptyReference, OovWord
from ngram_lm import BOS, EOS, UNK, score_sentence, score_word

logger = logging.getLogger(__name__)

LN10 = math.log(10)
TO_CASCADE = "to_cascade"
TO_LM = "to_lm_rescoring"

# ----------------------------
# 0. domain types
# ----------------------------

@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 300
    alpha: float = 2.0
    top_n: int = 10
    route_threshold: float = 0.5
    route_above: bool = True
    fusion: str = "rescore"
    word_bonus: float = 0.0
    oov_log10: float = -10.0
    permissive_oov: bool = False
    char_cutoff: Optional[int] = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError("beam_width must be at least 1")
        if not 1 <= self.top_n <= self.beam_width:
            raise ConfigError(f"top_n must lie in [1, beam_width={self.beam_width}], got {self.top_n}")
        if not 0.0 <= self.alpha <= 5.0:
            raise ConfigError(f"alpha must lie in [0, 5], got {self.alpha}")
        if self.fusion not in ("rescore", "shallow"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.char_cutoff is not None and self.char_cutoff < 1:
            raise ConfigError("char_cutoff must be positive when given")


@dataclass(frozen=True)
class BeamHypothesis:
    labels: tuple
    text: str
    log_p_am: float
    log_p_lm: Optional[float] = None

    @property
    def words(self):
        return self.text.split()


@dataclass(frozen=True)
class CascadeRoute:
    decision: str
    normalized_score: float


# ----------------------------
# 1. greedy decoding
# ----------------------------

def greedy_decode(posts, alphabet):
    """Best path: per-frame argmax, collapsed; score is the best-path log-prob."""
    posts = np.asarray(posts, dtype=np.float64)
    path = posts.argmax(axis=1)
    labels = tuple(collapse(path, alphabet.blank_index))
    with np.errstate(divide="ignore"):
        score = float(np.log(posts.max(axis=1)).sum())
    return BeamHypothesis(labels=labels, text=alphabet.decode(labels), log_p_am=score)


# ----------------------------
# 2. prefix beam search
# ----------------------------

def lm_log_score(lm, text, permissive=False):
    """Natural-log LM score of a transcript, including the </s> term."""
    words = text.split()
    if not words:
        return LN10 * score_word(lm, [BOS], EOS)
    return LN10 * score_sentence(lm, words, permissive=permissive).log10_total


class _PrefixScorer:
    """Word-boundary LM scores for in-beam fusion, cached per word history."""

    def __init__(self, lm, cfg):
        self.lm = lm
        self.cfg = cfg
        self.cache = {(): 0.0}

    def _word(self, history, word):
        try:
            return score_word(self.lm, history, word, permissive=self.cfg.permissive_oov)
        except OovWord:
            if not self.cfg.permissive_oov:
                raise
            return self.cfg.oov_log10

    def _words(self, words, final):
        key = (tuple(words), final)
        if key not in self.cache:
            history = [BOS]
            total = 0.0
            for word in list(words) + ([EOS] if final else []):
                total += self._word(history, word)
                mapped = word if (word,) in self.lm.tables[1] else UNK
                history.append(mapped)
            self.cache[key] = LN10 * total
        return self.cache[key]

    def partial(self, text):
        complete = [w for w in text.split(" ")[:-1] if w]
        return self._words(complete, final=False)

    def final(self, text):
        return self._words(text.split(), final=True)


def beam_steps(posts, cfg, alphabet, lm=None):
    """
    Yield the pruned beam after every frame as a list of
    (prefix, log_p_blank_ending, log_p_nonblank_ending), best first.
    """
    log_posts = _log(posts)
    blank = alphabet.blank_index
    shallow = lm is not None and cfg.fusion == "shallow"
    scorer = _PrefixScorer(lm, cfg) if shallow else None

    def rank(item):
        prefix, (pb, pnb) = item
        score = np.logaddexp(pb, pnb)
        if shallow:
            text = alphabet.decode(prefix)
            score += cfg.alpha * scorer.partial(text) + cfg.word_bonus * len(text.split(" ")[:-1])
        return (-score, len(prefix), prefix)

    beams = {(): (0.0, -math.inf)}
    for frame in log_posts:
        if cfg.char_cutoff is not None:
            candidates = np.argsort(-frame, kind="stable")[: cfg.char_cutoff]
        else:
            candidates = range(frame.size)
        candidates = [int(c) for c in candidates if c != blank and frame[c] > -math.inf]

        nxt = {}

        def add(prefix, pb=-math.inf, pnb=-math.inf):
            old_b, old_nb = nxt.get(prefix, (-math.inf, -math.inf))
            nxt[prefix] = (np.logaddexp(old_b, pb), np.logaddexp(old_nb, pnb))

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            if frame[blank] > -math.inf:
                add(prefix, pb=total + frame[blank])
            last = prefix[-1] if prefix else None
            for c in candidates:
                extended = prefix + (c,)
                if c == last:
                    add(prefix, pnb=pnb + frame[c])
                    add(extended, pnb=pb + frame[c])
                else:
                    add(extended, pnb=total + frame[c])

        ranked = sorted(nxt.items(), key=rank)[: cfg.beam_width]
        beams = dict(ranked)
        yield [(prefix, float(pb), float(pnb)) for prefix, (pb, pnb) in ranked]


def prefix_beam_search(posts, cfg, alphabet, lm=None):
    """Top `cfg.top_n` hypotheses from CTC prefix beam search, best first."""
    final = [((), 0.0, -math.inf)]
    for final in beam_steps(posts, cfg, alphabet, lm):
        pass

    shallow = lm is not None and cfg.fusion == "shallow"
    scorer = _PrefixScorer(lm, cfg) if shallow else None
    hyps = []
    for prefix, pb, pnb in final:
        text = alphabet.decode(prefix)
        hyps.append(BeamHypothesis(
            labels=tuple(prefix),
            text=text,
            log_p_am=float(np.logaddexp(pb, pnb)),
            log_p_lm=scorer.final(text) if shallow else None,
        ))

    def total(h):
        score = h.log_p_am
        if shallow:
            score += cfg.alpha * h.log_p_lm + cfg.word_bonus * len(h.words)
        return (-score, len(h.labels), h.labels)

    return sorted(hyps, key=total)[: cfg.top_n]


def decode_corpus(items, cfg, alphabet, lm=None, jobs=1):
    """Beam-decode (id, posts) pairs, optionally on a thread pool; order is kept."""
    def work(item):
        utt_id, posts = item
        return utt_id, prefix_beam_search(posts, cfg, alphabet, lm)

    if jobs <= 1:
        return [work(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, items))


def _log(posts):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(posts, dtype=np.float64))


# ----------------------------
# 3. rescoring and alpha tuning
# ----------------------------

def attach_lm_scores(hyps, lm, permissive=False):
    return [replace(h, log_p_lm=lm_log_score(lm, h.text, permissive)) for h in hyps]


def fused_score(hyp, alpha, word_bonus=0.0):
    return hyp.log_p_am + alpha * hyp.log_p_lm + word_bonus * len(hyp.words)


def rescore(hyps, lm, alpha, word_bonus=0.0, permissive=False):
    """
    Pick argmax of log_p_am + alpha * ln p_LM over an n-best list. Ties go to
    the shorter transcript, then the lexicographically smaller one. With
    lm=None the hypotheses must already carry log_p_lm.
    """
    if not hyps:
        raise ConfigError("cannot rescore an empty hypothesis list")
    if lm is not None:
        hyps = attach_lm_scores(hyps, lm, permissive)
    elif any(h.log_p_lm is None for h in hyps):
        raise ConfigError("hypotheses carry no LM score and no model was given")
    return min(hyps, key=lambda h: (-fused_score(h, alpha, word_bonus), len(h.text), h.text))


def sample_alphas(trials=50, low=0.0, high=5.0, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=trials)


def alpha_sweep(nbests, alphas, word_bonus=0.0):
    """Corpus WER at each alpha for n-best lists that already carry LM scores."""
    rows = []
    for trial, alpha in enumerate(alphas):
        errors = 0
        ref_words = 0
        for hyps, reference in nbests:
            best = rescore(hyps, None, alpha, word_bonus)
            errors += edit_distance(best.words, reference.split())
            ref_words += len(reference.split())
        rows.append({"trial": trial, "alpha": float(alpha), "errors": errors, "wer": errors / ref_words})
    return pd.DataFrame(rows)


def tune_alpha_from_nbest(nbests, alphas, word_bonus=0.0):
    """Alpha with the lowest corpus WER; the smallest alpha wins ties."""
    sweep = alpha_sweep(nbests, alphas, word_bonus)
    best = sweep.sort_values(["wer", "alpha"], kind="mergesort").iloc[0]
    return float(best["alpha"]), float(best["wer"])


def tune_alpha(dev, lm, cfg, alphabet, trials=50, low=0.0, high=5.0, seed=0):
    """
    Random search for the LM weight: draw `trials` uniform alphas in
    [low, high], rescore the dev n-best lists at each and keep the best.
    """
    if not dev:
        raise ConfigError("tune_alpha needs a non-empty dev set")
    am_cfg = replace(cfg, fusion="rescore")
    nbests = []
    for posts, reference in dev:
        hyps = prefix_beam_search(posts, am_cfg, alphabet)
        nbests.append((attach_lm_scores(hyps, lm, cfg.permissive_oov), reference))
    alphas = sample_alphas(trials, low, high, seed)
    alpha, error_rate = tune_alpha_from_nbest(nbests, alphas, cfg.word_bonus)
    logger.info("tuned alpha=%.4f over %d trials, dev WER %.4f", alpha, trials, error_rate)
    return alpha, error_rate


# ----------------------------
# 4. cascade routing
# ----------------------------

def route(best, cfg):
    """
    Route on the per-character score log_p_am / len(s1): its exponent is the
    geometric-mean character probability, compared with the threshold.
    """
    if not best.labels:
        return CascadeRoute(decision=TO_LM, normalized_score=-math.inf)
    normalized = best.log_p_am / len(best.labels)
    log_threshold = math.log(cfg.route_threshold) if cfg.route_threshold > 0 else -math.inf
    above = normalized > log_threshold
    decision = TO_CASCADE if above == cfg.route_above else TO_LM
    return CascadeRoute(decision=decision, normalized_score=normalized)


# ----------------------------
# 5. error rates
# ----------------------------

def edit_distance(hyp, ref):
    """Levenshtein distance between two sequences."""
    hyp = list(hyp)
    ref = list(ref)
    row = np.arange(len(ref) + 1)
    for i, h in enumerate(hyp, start=1):
        prev = row.copy()
        row[0] = i
        for j, r in enumerate(ref, start=1):
            row[j] = min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (h != r))
    return int(row[-1])


def wer(hypothesis, reference):
    ref = reference.split()
    if not ref:
        raise EmptyReference("word error rate needs a non-empty reference")
    return edit_distance(hypothesis.split(), ref) / len(ref)


def cer(hypothesis, reference):
    if not reference:
        raise EmptyReference("character error rate needs a non-empty reference")
    return edit_distance(hypothesis, reference) / len(reference)


def main():
    # -------------------
    # two hypotheses whose ranking flips as the LM weight grows
    # -------------------
    hyps = [
        BeamHypothesis(labels=(0,), text="the cat", log_p_am=-1.0, log_p_lm=-3.0),
        BeamHypothesis(labels=(1,), text="the hat", log_p_am=-1.2, log_p_lm=-1.5),
    ]
    alphas = np.linspace(0.0, 0.5, 11)
    df_winners = pd.DataFrame({
        "alpha": alphas,
        "winner": [rescore(hyps, None, a).text for a in alphas],
        "score": [max(fused_score(h, a) for h in hyps) for a in alphas],
    })
    print(df_winners)


if __name__ == "__main__":
    main()
