# %%
"""
ARPA n-gram language models: parsing, serialization, backoff scoring and a
small count-based estimator for building test models.

Probabilities stay in log10 (the file convention); conversion to natural log
happens once, where the decoder combines acoustic and LM scores.
"""
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from errors import EmptySentence, MalformedArpa, OovWord

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
MAX_ORDER = 5
LOG10_ZERO = -99.0

_COUNT_LINE = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION_LINE = re.compile(r"^\\(\d+)-grams:$")

# ----------------------------
# 0. model
# ----------------------------

@dataclass(frozen=True)
class ArpaModel:
    order: int
    tables: dict = field(repr=False)

    @property
    def vocabulary(self):
        return {ngram[0] for ngram in self.tables[1]}

    def counts(self):
        return {k: len(self.tables[k]) for k in range(1, self.order + 1)}

    def backoff(self, context):
        entry = self.tables.get(len(context), {}).get(tuple(context))
        return entry[1] if entry is not None else 0.0


@dataclass(frozen=True)
class SentenceScore:
    log10_total: float
    oov_count: int = 0

    @property
    def ln_total(self):
        return self.log10_total * math.log(10)


# ----------------------------
# 1. parsing and serialization
# ----------------------------

def parse_arpa(text):
    """Parse ARPA text (a string or an iterable of lines) into an ArpaModel."""
    lines = text.splitlines() if isinstance(text, str) else [line.rstrip("\n") for line in text]
    lines = [line.strip() for line in lines]

    try:
        start = lines.index("\\data\\")
    except ValueError:
        raise MalformedArpa("\\data\\", detail="missing header") from None

    declared = {}
    pos = start + 1
    while pos < len(lines) and not lines[pos].startswith("\\"):
        match = _COUNT_LINE.match(lines[pos])
        if match:
            declared[int(match.group(1))] = int(match.group(2))
        elif lines[pos]:
            raise MalformedArpa("\\data\\", detail=f"unexpected line {lines[pos]!r}")
        pos += 1
    if not declared:
        raise MalformedArpa("\\data\\", detail="no ngram counts declared")
    order = max(declared)
    if order > MAX_ORDER or sorted(declared) != list(range(1, order + 1)):
        raise MalformedArpa("\\data\\", detail=f"orders {sorted(declared)} are not 1..n with n <= {MAX_ORDER}")

    tables = {k: {} for k in range(1, order + 1)}
    current = None
    ended = False
    for line in lines[pos:]:
        if not line:
            continue
        if line == "\\end\\":
            ended = True
            break
        section = _SECTION_LINE.match(line)
        if section:
            current = int(section.group(1))
            if current not in tables:
                raise MalformedArpa(line, detail="section order not declared in header")
            continue
        if current is None:
            raise MalformedArpa("\\data\\", detail=f"entry outside a section: {line!r}")
        fields = line.split()
        if len(fields) not in (current + 1, current + 2):
            raise MalformedArpa(f"\\{current}-grams:", detail=f"bad entry {line!r}")
        words = tuple(w.lower() for w in fields[1 : current + 1])
        prob = float(fields[0])
        backoff = float(fields[current + 1]) if len(fields) == current + 2 else 0.0
        tables[current][words] = (prob, backoff)
    if not ended:
        raise MalformedArpa("\\end\\", detail="missing end marker")

    for k in range(1, order + 1):
        if len(tables[k]) != declared[k]:
            raise MalformedArpa(f"\\{k}-grams:", expected=declared[k], found=len(tables[k]))
    for k in range(2, order + 1):
        for ngram in tables[k]:
            if ngram[:-1] not in tables[k - 1]:
                raise MalformedArpa(f"\\{k}-grams:", detail=f"prefix of {' '.join(ngram)!r} is missing")
    return ArpaModel(order=order, tables=tables)


def load_arpa(path):
    with open(path, "r", encoding="utf-8") as f:
        model = parse_arpa(f)
    logger.info("loaded %d-gram model from %s: %s", model.order, path, model.counts())
    return model


def serialize_arpa(model):
    out = ["\\data\\"]
    for k in range(1, model.order + 1):
        out.append(f"ngram {k}={len(model.tables[k])}")
    for k in range(1, model.order + 1):
        out.append("")
        out.append(f"\\{k}-grams:")
        for ngram, (prob, backoff) in sorted(model.tables[k].items()):
            row = f"{prob!r}\t{' '.join(ngram)}"
            if k < model.order:
                row += f"\t{backoff!r}"
            out.append(row)
    out.append("")
    out.append("\\end\\")
    return "\n".join(out) + "\n"


# ----------------------------
# 2. scoring
# ----------------------------

def _resolve(model, word, permissive):
    word = word.lower()
    if (word,) in model.tables[1]:
        return word, False
    if permissive and (UNK,) in model.tables[1]:
        return UNK, True
    raise OovWord(word)


def score_word(model, context, word, permissive=False):
    """
    log10 p(word | context) with standard backoff: use the stored n-gram if
    present, otherwise add the context's backoff weight and drop its oldest
    word. Recurses at most order - 1 times.
    """
    word, _ = _resolve(model, word, permissive)
    context = tuple(w.lower() for w in context)
    context = context[-(model.order - 1):] if model.order > 1 else ()
    penalty = 0.0
    while True:
        entry = model.tables[len(context) + 1].get(context + (word,))
        if entry is not None:
            return penalty + entry[0]
        penalty += model.backoff(context)
        context = context[1:]


def score_sentence(model, words, permissive=False):
    """Sum of per-word log10 scores with <s> history and a final </s> term."""
    words = [w.lower() for w in words]
    if not words:
        raise EmptySentence("cannot score an empty word sequence")
    history = [BOS]
    total = 0.0
    oov = 0
    for word in words + [EOS]:
        resolved, was_oov = _resolve(model, word, permissive)
        oov += was_oov
        total += score_word(model, history, resolved)
        history.append(resolved)
    return SentenceScore(log10_total=total, oov_count=oov)


# ----------------------------
# 3. fixture estimator
# ----------------------------

def _padded_ngrams(sentences, k):
    counts = Counter()
    for words in sentences:
        padded = [BOS] + [w.lower() for w in words] + [EOS]
        for i in range(len(padded) - k + 1):
            counts[tuple(padded[i : i + k])] += 1
    return counts


def estimate_arpa(sentences, order=3, discount=0.5):
    """
    Build a small, properly normalized ARPA model from tokenized sentences.

    Unigrams are maximum likelihood; higher orders use absolute discounting
    and each context gets the backoff weight that makes its conditional
    distribution sum to one over the vocabulary.
    """
    sentences = [list(s) for s in sentences if len(s)]
    if not sentences:
        raise EmptySentence("estimator needs at least one non-empty sentence")

    unigram_counts = _padded_ngrams(sentences, 1)
    del unigram_counts[(BOS,)]
    total = sum(unigram_counts.values())
    tables = {1: {ngram: (math.log10(c / total), 0.0) for ngram, c in unigram_counts.items()}}
    tables[1][(BOS,)] = (LOG10_ZERO, 0.0)
    vocab = [ngram[0] for ngram in unigram_counts]

    for k in range(2, order + 1):
        lower = ArpaModel(order=k - 1, tables={j: dict(tables[j]) for j in range(1, k)})
        by_context = defaultdict(dict)
        for ngram, c in _padded_ngrams(sentences, k).items():
            by_context[ngram[:-1]][ngram[-1]] = c

        tables[k] = {}
        for context, followers in by_context.items():
            context_total = sum(followers.values())
            lower_seen = sum(10 ** score_word(lower, context[1:], w) for w in followers)
            lower_unseen = 1.0 - lower_seen
            d = discount if lower_unseen > 1e-12 and len(followers) < len(vocab) else 0.0
            for w, c in followers.items():
                tables[k][context + (w,)] = (math.log10((c - d) / context_total), 0.0)
            if d > 0:
                reserved = d * len(followers) / context_total
                prob, _ = tables[k - 1][context]
                tables[k - 1][context] = (prob, math.log10(reserved / lower_unseen))
    return ArpaModel(order=order, tables=tables)
