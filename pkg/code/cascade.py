# %%
"""
Two-stage cascade: a first model decodes everything, utterances whose best
hypothesis scores high per character are routed to a deeper second model
trained only on such samples, and LM rescoring finishes whichever n-best
list survives.
"""
import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from config import cache_dir
from ctc import Alphabet
from decoder import TO_CASCADE, TO_LM, DecodeConfig, decode_corpus, edit_distance, prefix_beam_search, rescore, route
from errors import CascadeDegenerate, ConfigError, EmptySentence, InputTooShort
from frontend import FrontendConfig, augment, compute_spectrogram, read_spectrogram, read_wav, write_spectrogram
from nnet import build_model, forward, load_checkpoint, parameter_digest, save_checkpoint, train, transfer_cnn_weights
from scheduler import Manifest, ManifestEntry, plan_varied

logger = logging.getLogger(__name__)

SELECTORS = ("score", "wrong")

# ----------------------------
# 0. sample statistics
# ----------------------------

@dataclass(frozen=True)
class SampleStats:
    sample_count: int
    avg_words_per_sentence: float
    avg_chars_per_second: float
    per_character_rate: dict = field(repr=False)


def compute_sample_stats(samples):
    """
    Corpus statistics over (transcript, duration_s) pairs. Only letters count
    as characters: spaces and punctuation are left out of both the
    speaking-speed figure and the character rates.
    """
    samples = list(samples)
    if not samples:
        raise EmptySentence("statistics need at least one sample")
    words = 0
    letters = Counter()
    seconds = 0.0
    for text, duration in samples:
        if not text.split():
            raise EmptySentence("statistics need non-empty transcripts")
        words += len(text.split())
        letters.update(ch for ch in text.lower() if ch.isalpha())
        seconds += duration
    total_letters = sum(letters.values())
    rates = {ch: n / total_letters for ch, n in sorted(letters.items())} if total_letters else {}
    return SampleStats(
        sample_count=len(samples),
        avg_words_per_sentence=words / len(samples),
        avg_chars_per_second=total_letters / seconds if seconds > 0 else math.nan,
        per_character_rate=rates,
    )


def compare_stats(wrong, everything):
    """Side-by-side statistics with the relative difference (wrong - all) / all in percent."""
    rows = [
        ("avg_words_per_sentence", wrong.avg_words_per_sentence, everything.avg_words_per_sentence),
        ("avg_chars_per_second", wrong.avg_chars_per_second, everything.avg_chars_per_second),
    ]
    for ch in sorted(set(wrong.per_character_rate) | set(everything.per_character_rate)):
        rows.append((f"rate[{ch}]", wrong.per_character_rate.get(ch, 0.0), everything.per_character_rate.get(ch, 0.0)))
    table = pd.DataFrame(rows, columns=["metric", "wrong", "all"]).set_index("metric")
    table["relative_diff_pct"] = (table["wrong"] - table["all"]) / table["all"].replace(0.0, np.nan) * 100
    return table


# ----------------------------
# 1. selection
# ----------------------------

def select_hard_samples(decodes, threshold, use_lm=False, cfg=None):
    """
    Ids whose best hypothesis routes to the second stage. Training-side
    selection is acoustic only; with use_lm the per-character score also
    includes alpha * ln p_LM and the hypotheses must carry LM scores.
    """
    cfg = replace(cfg or DecodeConfig(), route_threshold=threshold)
    selected = []
    for utt_id, hyp in decodes:
        if use_lm:
            if hyp.log_p_lm is None:
                raise ConfigError(f"{utt_id}: LM-aware selection needs LM scores")
            hyp = replace(hyp, log_p_am=hyp.log_p_am + cfg.alpha * hyp.log_p_lm)
        if route(hyp, cfg).decision == TO_CASCADE:
            selected.append(utt_id)
    return selected


def select_wrong_samples(decodes, references):
    """Ids whose best hypothesis has at least one word error against its reference."""
    return [utt_id for utt_id, hyp in decodes if edit_distance(hyp.words, references[utt_id].split()) > 0]


# ----------------------------
# 2. features
# ----------------------------

def _cache_key(path, cfg):
    stat = Path(path).stat()
    raw = f"{Path(path).resolve()}|{stat.st_mtime_ns}|{stat.st_size}|{sorted(vars(cfg).items())}"
    return hashlib.sha256(raw.encode()).hexdigest()[:32]


def load_features(entry, cfg=FrontendConfig(), use_cache=True):
    """Spectrogram frames for a manifest entry, cached under config.cache_dir()."""
    if use_cache:
        cached = cache_dir() / "features" / f"{_cache_key(entry.audio, cfg)}.spec"
        if cached.exists():
            return read_spectrogram(cached).frames
    spec = compute_spectrogram(read_wav(entry.audio), cfg)
    if use_cache:
        cached.parent.mkdir(parents=True, exist_ok=True)
        write_spectrogram(cached, spec)
    # round through float32 so cached and fresh features agree
    return spec.frames.astype(np.float32).astype(np.float64)


def build_dataset(manifest, alphabet, cfg=FrontendConfig(), use_cache=True):
    """id -> (frames, target labels) for every entry of a manifest."""
    return {
        entry.id: (load_features(entry, cfg, use_cache), alphabet.encode(entry.text))
        for entry in manifest.entries
    }


def augment_dataset(manifest, alphabet, cfg=FrontendConfig(), speeds=(0.9, 1.1), noise_snr_db=None, seed=0):
    """Speed-perturbed (and optionally noisy) copies of every entry."""
    entries = []
    data = {}
    for n, entry in enumerate(manifest.entries):
        clip = read_wav(entry.audio)
        variants = [(f"speed{s}", augment(clip, "speed", s)) for s in speeds]
        if noise_snr_db is not None:
            variants.append((f"snr{noise_snr_db}", augment(clip, "noise", noise_snr_db, seed=seed + n)))
        for tag, variant in variants:
            utt_id = f"{entry.id}#{tag}"
            entries.append(ManifestEntry(id=utt_id, audio=entry.audio, text=entry.text, duration=variant.duration_s))
            data[utt_id] = (compute_spectrogram(variant, cfg).frames, alphabet.encode(entry.text))
    return Manifest(entries=tuple(entries)), data


# ----------------------------
# 3. training
# ----------------------------

@dataclass
class CascadeArtifacts:
    stage1: object
    stage2: Optional[object]
    route_threshold: float
    alphabet: Alphabet
    selection_log: pd.DataFrame = field(repr=False)
    cnn_digest: str = ""


def first_best(ckpt, frames, cfg, alphabet):
    """AM-only top hypothesis of one model, or None when the input is too short."""
    try:
        posts = forward(ckpt, frames).posts
    except InputTooShort:
        return None
    return prefix_beam_search(posts, replace(cfg, fusion="rescore"), alphabet)[0]


def run_cascade(manifest, stage1_cfg, stage2_cfg, sched1, sched2, decode_cfg, alphabet,
                threshold=0.5, base_k=8, cap_ratio=5, seed=0, jobs=1, data=None, augment_hard=False, freeze_cnn=False,
                out_dir=None, selector="score"):
    """
    Train stage 1, re-decode the training set without an LM, select hard
    samples, then train stage 2 from stage 1's CNN weights on that subset.
    `selector` is "score" (the route decision at `threshold`) or "wrong" (at
    least one word error against the manifest text). Raises CascadeDegenerate
    when nothing is selected.
    """
    if selector not in SELECTORS:
        raise ConfigError(f"unknown selector {selector!r}; expected one of {SELECTORS}")
    data = data if data is not None else build_dataset(manifest, alphabet)

    stage1 = build_model(stage1_cfg, seed)
    stage1, metrics1 = train(stage1, plan_varied(manifest, base_k, cap_ratio), sched1, data, seed=seed, jobs=jobs)
    logger.info("stage 1 finished: final train loss %.4f", metrics1["train_loss"].iloc[-1])

    route_cfg = replace(decode_cfg, route_threshold=threshold)
    rows = []
    decodes = []
    for entry in manifest.entries:
        best = first_best(stage1, data[entry.id][0], route_cfg, alphabet)
        if best is None:
            rows.append({"id": entry.id, "normalized_score": -math.inf, "routed_to": TO_LM})
            continue
        decision = route(best, route_cfg)
        decodes.append((entry.id, best))
        rows.append({"id": entry.id, "normalized_score": decision.normalized_score, "routed_to": decision.decision})
    selection_log = pd.DataFrame(rows, columns=["id", "normalized_score", "routed_to"])
    if selector == "wrong":
        hard = select_wrong_samples(decodes, {entry.id: entry.text for entry in manifest.entries})
        chosen = set(hard)
        selection_log["routed_to"] = [TO_CASCADE if utt_id in chosen else TO_LM for utt_id in selection_log["id"]]
    else:
        hard = select_hard_samples(decodes, route_cfg.route_threshold, cfg=route_cfg)
    logger.info("routed %d of %d training utterances to stage 2", len(hard), len(manifest.entries))

    artifacts = CascadeArtifacts(stage1=stage1, stage2=None, route_threshold=route_cfg.route_threshold,
                                 alphabet=alphabet, selection_log=selection_log)
    if not hard:
        logger.warning("no hard samples selected; stage 2 skipped")
        if out_dir is not None:
            save_artifacts(out_dir, artifacts)
        raise CascadeDegenerate(artifacts)

    hard_manifest = manifest.subset(hard)
    hard_data = {utt_id: data[utt_id] for utt_id in hard}
    if augment_hard:
        extra, extra_data = augment_dataset(hard_manifest, alphabet, seed=seed)
        hard_manifest = Manifest(entries=hard_manifest.entries + extra.entries)
        hard_data.update(extra_data)

    stage2 = transfer_cnn_weights(stage1, build_model(stage2_cfg, seed + 1), freeze=freeze_cnn)
    artifacts.cnn_digest = parameter_digest(stage2.params, prefix="cnn.")
    stage2, _ = train(stage2, plan_varied(hard_manifest, base_k, cap_ratio), sched2, hard_data, seed=seed, jobs=jobs)
    artifacts.stage2 = stage2
    if out_dir is not None:
        save_artifacts(out_dir, artifacts)
    return artifacts


def save_artifacts(out_dir, artifacts):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "stage1.ckpt", artifacts.stage1)
    if artifacts.stage2 is not None:
        save_checkpoint(out_dir / "stage2.ckpt", artifacts.stage2)
    artifacts.selection_log.to_csv(out_dir / "selection_log.csv", index=False)
    meta = {
        "route_threshold": artifacts.route_threshold,
        "alphabet": list(artifacts.alphabet.symbols),
        "blank": artifacts.alphabet.blank,
        "cnn_digest": artifacts.cnn_digest,
        "has_stage2": artifacts.stage2 is not None,
    }
    (out_dir / "cascade.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_artifacts(out_dir):
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "cascade.json").read_text(encoding="utf-8"))
    return CascadeArtifacts(
        stage1=load_checkpoint(out_dir / "stage1.ckpt"),
        stage2=load_checkpoint(out_dir / "stage2.ckpt") if meta["has_stage2"] else None,
        route_threshold=meta["route_threshold"],
        alphabet=Alphabet(tuple(meta["alphabet"]), blank=meta["blank"]),
        selection_log=pd.read_csv(out_dir / "selection_log.csv", dtype={"id": str}),
        cnn_digest=meta["cnn_digest"],
    )


# ----------------------------
# 4. inference
# ----------------------------

@dataclass(frozen=True)
class InferenceResult:
    transcript: str
    route: Optional[str]
    normalized_score: float
    hypothesis: object


def _finish(hyps, lm, cfg):
    if lm is None:
        return hyps[0]
    return rescore(hyps, lm, cfg.alpha, cfg.word_bonus, cfg.permissive_oov)


def single_stage_infer(frames, ckpt, alphabet, lm, cfg):
    posts = forward(ckpt, frames).posts
    hyps = prefix_beam_search(posts, replace(cfg, fusion="rescore"), alphabet)
    best = _finish(hyps, lm, cfg)
    return InferenceResult(transcript=best.text, route=None, normalized_score=math.nan, hypothesis=best)


def two_stage_infer(frames, artifacts, lm, cfg, counter=None, threshold=None):
    """
    Stage-1 decode, route on its best hypothesis, re-decode with stage 2 when
    routed, then rescore the surviving n-best list. Routing uses the
    threshold stored with the artifacts unless `threshold` is given.
    `counter` (a Counter) records how many times each stage ran.
    """
    cfg = replace(cfg, route_threshold=artifacts.route_threshold if threshold is None else threshold)
    am_cfg = replace(cfg, fusion="rescore")
    alphabet = artifacts.alphabet
    posts = forward(artifacts.stage1, frames).posts
    if counter is not None:
        counter["stage1"] += 1
    hyps = prefix_beam_search(posts, am_cfg, alphabet)
    decision = route(hyps[0], cfg)
    if decision.decision == TO_CASCADE and artifacts.stage2 is not None:
        posts = forward(artifacts.stage2, frames).posts
        if counter is not None:
            counter["stage2"] += 1
        hyps = prefix_beam_search(posts, am_cfg, alphabet)
    best = _finish(hyps, lm, cfg)
    return InferenceResult(transcript=best.text, route=decision.decision,
                           normalized_score=decision.normalized_score, hypothesis=best)


def evaluate_cascade(items, artifacts, lm, cfg, threshold=None):
    """
    Per-utterance results over (id, frames, reference) triples and a WER
    summary for all, routed and non-routed utterances.
    """
    rows = []
    for utt_id, frames, reference in items:
        result = two_stage_infer(frames, artifacts, lm, cfg, threshold=threshold)
        rows.append({
            "id": utt_id,
            "route": result.route,
            "normalized_score": result.normalized_score,
            "hypothesis": result.transcript,
            "reference": reference,
            "errors": edit_distance(result.transcript.split(), reference.split()),
            "ref_words": len(reference.split()),
        })
    per_utt = pd.DataFrame(rows, columns=["id", "route", "normalized_score", "hypothesis", "reference", "errors", "ref_words"])

    def summary_row(name, part):
        words = int(part["ref_words"].sum())
        return {"subset": name, "utterances": len(part), "errors": int(part["errors"].sum()),
                "wer": part["errors"].sum() / words if words else math.nan}

    summary = pd.DataFrame([
        summary_row("all", per_utt),
        summary_row("routed", per_utt[per_utt["route"] == TO_CASCADE]),
        summary_row("not_routed", per_utt[per_utt["route"] != TO_CASCADE]),
    ]).set_index("subset")
    return per_utt, summary


def decode_with_stage(ckpt, items, cfg, alphabet, lm=None, jobs=1):
    """Beam-decode (id, frames) pairs with one model; ids too short are dropped."""
    posts = []
    for utt_id, frames in items:
        try:
            posts.append((utt_id, forward(ckpt, frames).posts))
        except InputTooShort:
            logger.warning("%s is shorter than the CNN receptive field; skipped", utt_id)
    return decode_corpus(posts, cfg, alphabet, lm, jobs)


def main():
    # -------------------
    # sentence-length gap between misrecognized samples and the whole set
    # -------------------
    def sentences(n_words, count):
        return [(" ".join(["word"] * n_words), 4.0)] * count

    everything = compute_sample_stats(sentences(12, 176) + sentences(13, 74))
    wrong = compute_sample_stats(sentences(14, 161) + sentences(13, 89))
    print(compare_stats(wrong, everything).loc[["avg_words_per_sentence", "avg_chars_per_second"]])


if __name__ == "__main__":
    main()
