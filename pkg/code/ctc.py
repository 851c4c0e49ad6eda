# %%
"""
CTC path probability, loss and gradient.

All recursions run in natural-log space over the blank-interleaved target
(blank, y1, blank, y2, ..., blank).
"""
import itertools
import math
import string
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from errors import ConfigError, ImpossibleAlignment, OracleTooLarge

BLANK = "<blank>"
ORACLE_LIMIT = 10 ** 7

# ----------------------------
# 0. alphabet
# ----------------------------

@dataclass(frozen=True)
class Alphabet:
    symbols: tuple
    blank: str = BLANK

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(set(symbols)) != len(symbols):
            raise ConfigError("alphabet symbols must be unique")
        if symbols.count(self.blank) != 1:
            raise ConfigError("alphabet must contain the blank exactly once")
        if len(symbols) < 2:
            raise ConfigError("alphabet needs at least one label besides the blank")

    @classmethod
    def english(cls):
        return cls(tuple(string.ascii_lowercase) + (" ", "'", BLANK))

    @classmethod
    def from_letters(cls, letters):
        return cls(tuple(letters) + (BLANK,))

    @property
    def size(self):
        return len(self.symbols)

    @property
    def blank_index(self):
        return self.symbols.index(self.blank)

    @property
    def space_index(self):
        return self.symbols.index(" ") if " " in self.symbols else None

    def encode(self, text):
        index = {s: i for i, s in enumerate(self.symbols)}
        try:
            return [index[ch] for ch in text.lower()]
        except KeyError as exc:
            raise ConfigError(f"character {exc.args[0]!r} is not in the alphabet") from exc

    def decode(self, labels):
        return "".join(self.symbols[i] for i in labels)


# ----------------------------
# 1. path collapse
# ----------------------------

def collapse(path, blank):
    """Merge repeated symbols, then drop blanks."""
    labels = []
    previous = None
    for symbol in path:
        symbol = int(symbol)
        if symbol != previous and symbol != blank:
            labels.append(symbol)
        previous = symbol
    return labels


def min_frames(target):
    """Shortest path length: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _interleave(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(ext.size, dtype=bool)
    if ext.size > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


# ----------------------------
# 2. forward-backward
# ----------------------------

def forward_backward(log_probs, target, blank):
    """
    Log alpha and beta tables over the interleaved target.

    Both tables include the emission at their own frame, so
    alpha[t, s] + beta[t, s] - log_probs[t, ext[s]] is the log mass of all
    paths visiting state s at frame t.
    """
    target = [int(y) for y in target]
    n_frames = log_probs.shape[0]
    needed = min_frames(target)
    if n_frames < needed or n_frames == 0:
        raise ImpossibleAlignment(n_frames, max(needed, 1))

    ext, skip = _interleave(target, blank)
    n_states = ext.size
    emit = log_probs[:, ext]

    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.full((n_frames, n_states), -np.inf)
        alpha[0, 0] = emit[0, 0]
        if n_states > 1:
            alpha[0, 1] = emit[0, 1]
        for t in range(1, n_frames):
            prev = alpha[t - 1]
            cur = prev.copy()
            cur[1:] = np.logaddexp(cur[1:], prev[:-1])
            cur[2:] = np.where(skip[2:], np.logaddexp(cur[2:], prev[:-2]), cur[2:])
            alpha[t] = cur + emit[t]

        beta = np.full((n_frames, n_states), -np.inf)
        beta[-1, -1] = emit[-1, -1]
        if n_states > 1:
            beta[-1, -2] = emit[-1, -2]
        for t in range(n_frames - 2, -1, -1):
            nxt = beta[t + 1]
            cur = nxt.copy()
            cur[:-1] = np.logaddexp(cur[:-1], nxt[1:])
            cur[:-2] = np.where(skip[2:], np.logaddexp(cur[:-2], nxt[2:]), cur[:-2])
            beta[t] = cur + emit[t]

    log_prob = logsumexp(alpha[-1, -2:]) if n_states > 1 else alpha[-1, -1]
    if not np.isfinite(log_prob):
        raise ImpossibleAlignment(n_frames, needed)
    return alpha, beta, float(log_prob)


def ctc_log_prob(posts, target, blank):
    """ln p_ctc(y|x): sum over every path collapsing to `target`."""
    with np.errstate(divide="ignore"):
        log_probs = np.log(np.asarray(posts, dtype=np.float64))
    _, _, log_prob = forward_backward(log_probs, target, blank)
    return log_prob


def ctc_backward_log_prob(posts, target, blank):
    """Same quantity read from the beta table at frame 0."""
    with np.errstate(divide="ignore"):
        log_probs = np.log(np.asarray(posts, dtype=np.float64))
    _, beta, _ = forward_backward(log_probs, target, blank)
    return float(logsumexp(beta[0, :2]))


@dataclass(frozen=True)
class CtcResult:
    log_prob: float
    loss: float
    grad: np.ndarray


def ctc_loss_and_grad(logits, target, blank):
    """
    Loss -ln p_ctc(y|x) and its gradient with respect to pre-softmax logits.

    grad[t, k] = softmax(logits)[t, k] - occupancy of label k at frame t,
    so every row sums to zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    log_probs = log_softmax(logits, axis=1)
    alpha, beta, log_prob = forward_backward(log_probs, target, blank)

    ext, _ = _interleave([int(y) for y in target], blank)
    log_occupancy = alpha + beta - log_probs[:, ext] - log_prob
    occupancy = np.zeros_like(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        for label in np.unique(ext):
            occupancy[:, label] = np.exp(logsumexp(log_occupancy[:, ext == label], axis=1))

    grad = np.exp(log_probs) - occupancy
    return CtcResult(log_prob=log_prob, loss=-log_prob, grad=grad)


# ----------------------------
# 3. enumeration oracle
# ----------------------------

def brute_force_ctc(posts, target, blank):
    """Enumerate all |alphabet|^T paths; test oracle for ctc_log_prob."""
    posts = np.asarray(posts, dtype=np.float64)
    n_frames, n_symbols = posts.shape
    if n_symbols ** n_frames > ORACLE_LIMIT:
        raise OracleTooLarge(f"{n_symbols}^{n_frames} paths exceed the {ORACLE_LIMIT} limit")
    target = [int(y) for y in target]
    terms = []
    for path in itertools.product(range(n_symbols), repeat=n_frames):
        if collapse(path, blank) == target:
            terms.append(math.prod(posts[t, c] for t, c in enumerate(path)))
    total = math.fsum(terms)
    return math.log(total) if total > 0 else -math.inf
