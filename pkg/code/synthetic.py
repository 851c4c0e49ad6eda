# %%
"""
Synthetic tone corpus: each letter of a small alphabet is a pure tone,
letters are separated by short gaps and words by longer silences.
"""
import logging
from pathlib import Path

import numpy as np

from ctc import Alphabet
from frontend import AudioClip, write_wav
from scheduler import ManifestEntry, write_manifest

logger = logging.getLogger(__name__)

LETTER_HZ = {"a": 400.0, "b": 800.0, "c": 1200.0, "d": 1600.0, "e": 2000.0}
TONE_S = 0.10
LETTER_GAP_S = 0.04
WORD_GAP_S = 0.12
EDGE_S = 0.05
AMPLITUDE = 0.5
NOISE_STD = 0.01


def tone_alphabet():
    return Alphabet.from_letters(tuple(LETTER_HZ) + (" ",))


def random_text(rng, max_words=3, max_letters=3):
    letters = list(LETTER_HZ)
    words = []
    for _ in range(rng.integers(1, max_words + 1)):
        words.append("".join(rng.choice(letters, size=rng.integers(1, max_letters + 1))))
    return " ".join(words)


def synthesize(text, rng, sample_rate=16000):
    """Render `text` over the tone alphabet as a mono clip."""
    def silence(seconds):
        return np.zeros(int(round(seconds * sample_rate)))

    t = np.arange(int(round(TONE_S * sample_rate))) / sample_rate
    pieces = [silence(EDGE_S)]
    for w, word in enumerate(text.split(" ")):
        if w:
            pieces.append(silence(WORD_GAP_S))
        for i, letter in enumerate(word):
            if i:
                pieces.append(silence(LETTER_GAP_S))
            pieces.append(AMPLITUDE * np.sin(2 * np.pi * LETTER_HZ[letter] * t))
    pieces.append(silence(EDGE_S))
    samples = np.concatenate(pieces)
    samples = samples + NOISE_STD * rng.standard_normal(samples.size)
    return AudioClip(samples, sample_rate)


def generate_corpus(out_dir, n_train=200, n_test=50, seed=0):
    """Write WAVs plus train.jsonl and test.jsonl; returns the two manifest paths."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = {}
    for split, count in (("train", n_train), ("test", n_test)):
        entries = []
        for i in range(count):
            utt_id = f"{split}-{i:04d}"
            text = random_text(rng)
            clip = synthesize(text, rng)
            wav_path = out_dir / "wav" / f"{utt_id}.wav"
            write_wav(wav_path, clip)
            entries.append(ManifestEntry(id=utt_id, audio=str(wav_path), text=text, duration=clip.duration_s))
        paths[split] = out_dir / f"{split}.jsonl"
        write_manifest(paths[split], entries)
        logger.info("wrote %d %s utterances to %s", count, split, paths[split])
    return paths["train"], paths["test"]
