import math
from collections import Counter

import numpy as np
import pandas as pd
import pytest

from cascade import (CascadeArtifacts, augment_dataset, build_dataset, compare_stats, compute_sample_stats,
                     decode_with_stage, evaluate_cascade, first_best, load_artifacts, load_features, run_cascade,
                     save_artifacts, select_hard_samples, select_wrong_samples, single_stage_infer, two_stage_infer)
from ctc import Alphabet
from decoder import TO_CASCADE, TO_LM, BeamHypothesis, DecodeConfig, cer, greedy_decode
from errors import CascadeDegenerate, ConfigError, EmptySentence
from frontend import write_wav
from nnet import ConvSpec, ModelConfig, TrainSchedule, build_model, forward, parameter_digest
from scheduler import Manifest, ManifestEntry, load_manifest
from synthetic import generate_corpus, synthesize, tone_alphabet

AB = Alphabet.from_letters("ab")
FAST = DecodeConfig(beam_width=4, top_n=2)


def small_cfg(lstm_layers=1, hidden_size=4):
    return ModelConfig(cnn_layers=(ConvSpec(3, 5, 1, 2, 2),), lstm_layers=lstm_layers, hidden_size=hidden_size,
                       activation="tanh", alphabet_size=3, input_features=16)


def forced(bias, seed=0):
    """Model whose every output frame has the softmax of `bias`."""
    ckpt = build_model(small_cfg(), seed)
    ckpt.params["fc.weight"][...] = 0.0
    ckpt.params["fc.bias"][...] = bias
    return ckpt


def one_char(p, utt_id):
    return utt_id, BeamHypothesis(labels=(0,), text="a", log_p_am=math.log(p))


def toy_corpus(rng, n=6):
    entries = tuple(ManifestEntry(id=f"u{i}", audio=f"u{i}.wav", text="ab", duration=0.12) for i in range(n))
    data = {e.id: (rng.normal(size=(10, 16)), [0, 1]) for e in entries}
    return Manifest(entries=entries), data


# ----------------------------
# statistics
# ----------------------------

def test_stats_on_a_small_corpus():
    stats = compute_sample_stats([("ab c", 2.0), ("Don't", 1.0)])
    assert stats.sample_count == 2
    assert stats.avg_words_per_sentence == 1.5
    assert stats.avg_chars_per_second == pytest.approx(7 / 3)
    assert stats.per_character_rate["a"] == pytest.approx(1 / 7)
    assert "'" not in stats.per_character_rate
    assert sum(stats.per_character_rate.values()) == pytest.approx(1.0)


def test_relative_difference_of_sentence_length():
    everything = compute_sample_stats([(" ".join(["a"] * 12), 1.0)] * 176 + [(" ".join(["a"] * 13), 1.0)] * 74)
    wrong = compute_sample_stats([(" ".join(["a"] * 14), 1.0)] * 161 + [(" ".join(["a"] * 13), 1.0)] * 89)
    table = compare_stats(wrong, everything)
    assert round(table.loc["avg_words_per_sentence", "relative_diff_pct"], 1) == 11.0
    assert list(table.columns) == ["wrong", "all", "relative_diff_pct"]


def test_stats_need_samples():
    with pytest.raises(EmptySentence):
        compute_sample_stats([])
    with pytest.raises(EmptySentence):
        compute_sample_stats([("  ", 1.0)])


# ----------------------------
# selection
# ----------------------------

PROBS = [0.1, 0.2, 0.3, 0.4, 0.45, 0.5, 0.6, 0.7, 0.8, 0.9]
DECODES = [one_char(p, f"u{i}") for i, p in enumerate(PROBS)]


def test_threshold_selects_confident_samples():
    assert select_hard_samples(DECODES, 0.5) == ["u6", "u7", "u8", "u9"]


def test_threshold_extremes():
    assert select_hard_samples(DECODES, 1.0) == []
    assert select_hard_samples(DECODES, 0.0) == [utt_id for utt_id, _ in DECODES]


def test_selection_shrinks_as_threshold_rises():
    sizes = [len(select_hard_samples(DECODES, t)) for t in np.linspace(0, 1, 21)]
    assert sizes == sorted(sizes, reverse=True)


def test_empty_hypotheses_are_never_selected():
    decodes = [("e", BeamHypothesis(labels=(), text="", log_p_am=0.0))]
    assert select_hard_samples(decodes, 0.0) == []


def test_lm_aware_selection_needs_lm_scores():
    with pytest.raises(ConfigError):
        select_hard_samples(DECODES, 0.5, use_lm=True)
    with_lm = [(u, BeamHypothesis(h.labels, h.text, h.log_p_am, log_p_lm=-1.0)) for u, h in DECODES]
    assert select_hard_samples(with_lm, 0.5, use_lm=True, cfg=DecodeConfig(alpha=0.0)) == ["u6", "u7", "u8", "u9"]
    assert select_hard_samples(with_lm, 0.5, use_lm=True, cfg=DecodeConfig(alpha=1.0)) == []


def test_wrong_samples_have_word_errors():
    decodes = [("x", BeamHypothesis((0,), "a b", -1.0)), ("y", BeamHypothesis((0,), "a c", -1.0))]
    assert select_wrong_samples(decodes, {"x": "a b", "y": "a b"}) == ["y"]


# ----------------------------
# inference
# ----------------------------

def cascade_of(stage2_bias=(0.0, 5.0, 0.0), threshold=0.5):
    return CascadeArtifacts(stage1=forced([5.0, 0.0, 0.0]), stage2=forced(list(stage2_bias), seed=1),
                            route_threshold=threshold, alphabet=AB,
                            selection_log=pd.DataFrame(columns=["id", "normalized_score", "routed_to"]))


def test_confident_utterance_runs_both_stages(rng):
    counter = Counter()
    result = two_stage_infer(rng.normal(size=(10, 16)), cascade_of(), None, FAST, counter)
    assert result.route == TO_CASCADE
    assert result.transcript == "b"
    assert counter == Counter(stage1=1, stage2=1)


def test_unit_threshold_matches_single_stage(rng):
    frames = rng.normal(size=(10, 16))
    artifacts = cascade_of(threshold=1.0)
    counter = Counter()
    cascaded = two_stage_infer(frames, artifacts, None, FAST, counter)
    single = single_stage_infer(frames, artifacts.stage1, AB, None, FAST)
    assert cascaded.route == TO_LM
    assert cascaded.transcript == single.transcript == "a"
    assert cascaded.hypothesis == single.hypothesis
    assert counter["stage2"] == 0


def test_stored_threshold_wins_over_the_decode_default(rng):
    frames = rng.normal(size=(10, 16))
    artifacts = cascade_of(threshold=1.0)
    assert FAST.route_threshold == 0.5
    counter = Counter()
    assert two_stage_infer(frames, artifacts, None, FAST, counter).route == TO_LM
    assert counter["stage2"] == 0


def test_explicit_threshold_overrides_the_stored_one(rng):
    frames = rng.normal(size=(10, 16))
    counter = Counter()
    result = two_stage_infer(frames, cascade_of(threshold=1.0), None, FAST, counter, threshold=0.5)
    assert (result.route, result.transcript) == (TO_CASCADE, "b")
    assert counter["stage2"] == 1
    per_utt, _ = evaluate_cascade([("u0", frames, "a")], cascade_of(threshold=0.5), None, FAST, threshold=1.0)
    assert list(per_utt["route"]) == [TO_LM]


def test_cascade_without_second_stage_falls_back(rng):
    artifacts = cascade_of()
    artifacts.stage2 = None
    assert two_stage_infer(rng.normal(size=(10, 16)), artifacts, None, FAST).transcript == "a"


def test_rescoring_finishes_the_surviving_list(rng, tiny_lm):
    cfg = DecodeConfig(beam_width=4, top_n=1, alpha=0.0)
    result = two_stage_infer(rng.normal(size=(10, 16)), cascade_of(), tiny_lm, cfg)
    assert result.transcript == "b"
    assert result.hypothesis.log_p_lm is not None


def test_evaluation_summary(rng):
    items = [("u0", rng.normal(size=(10, 16)), "b"), ("u1", rng.normal(size=(10, 16)), "a")]
    per_utt, summary = evaluate_cascade(items, cascade_of(), None, FAST)
    assert list(per_utt["hypothesis"]) == ["b", "b"]
    assert summary.loc["all", "utterances"] == 2
    assert summary.loc["all", "wer"] == 0.5
    assert summary.loc["routed", "errors"] == 1
    assert summary.loc["not_routed", "utterances"] == 0
    assert math.isnan(summary.loc["not_routed", "wer"])


def test_decode_with_stage_skips_short_inputs(rng):
    items = [("ok", rng.normal(size=(10, 16))), ("short", rng.normal(size=(2, 16)))]
    results = decode_with_stage(forced([5.0, 0.0, 0.0]), items, FAST, AB)
    assert [utt_id for utt_id, _ in results] == ["ok"]
    assert results[0][1][0].text == "a"


def test_first_best_of_short_input_is_none():
    assert first_best(forced([5.0, 0.0, 0.0]), np.zeros((2, 16)), FAST, AB) is None


# ----------------------------
# artifacts and training
# ----------------------------

def test_artifacts_round_trip(tmp_path):
    artifacts = cascade_of()
    artifacts.selection_log = pd.DataFrame({"id": ["001", "002"], "normalized_score": [-0.1, -2.0],
                                            "routed_to": [TO_CASCADE, TO_LM]})
    artifacts.cnn_digest = parameter_digest(artifacts.stage1.params, "cnn.")
    save_artifacts(tmp_path, artifacts)
    back = load_artifacts(tmp_path)
    assert parameter_digest(back.stage1.params) == parameter_digest(artifacts.stage1.params)
    assert parameter_digest(back.stage2.params) == parameter_digest(artifacts.stage2.params)
    assert back.alphabet == AB
    assert back.route_threshold == 0.5
    assert back.cnn_digest == artifacts.cnn_digest
    pd.testing.assert_frame_equal(back.selection_log, artifacts.selection_log)


def test_zero_threshold_routes_every_nonempty_decode(rng, tmp_path):
    manifest, data = toy_corpus(rng)
    sched = TrainSchedule(lr_phases=((1, 1e-3),))
    artifacts = run_cascade(manifest, small_cfg(), small_cfg(lstm_layers=2, hidden_size=6), sched, sched, FAST, AB,
                            threshold=0.0, base_k=2, data=data, freeze_cnn=True, out_dir=tmp_path)
    log = artifacts.selection_log
    assert list(log["id"]) == [e.id for e in manifest.entries]
    assert (log["routed_to"] == TO_CASCADE).any()
    assert artifacts.cnn_digest == parameter_digest(artifacts.stage1.params, "cnn.")
    assert parameter_digest(artifacts.stage2.params, "cnn.") == artifacts.cnn_digest
    assert (tmp_path / "stage2.ckpt").exists()


def test_unit_threshold_is_degenerate(rng, tmp_path):
    manifest, data = toy_corpus(rng)
    sched = TrainSchedule(lr_phases=((1, 1e-3),))
    with pytest.raises(CascadeDegenerate) as info:
        run_cascade(manifest, small_cfg(), small_cfg(lstm_layers=2), sched, sched, FAST, AB,
                    threshold=1.0, base_k=2, data=data, out_dir=tmp_path)
    assert info.value.artifacts.stage2 is None
    assert (tmp_path / "stage1.ckpt").exists()
    assert not (tmp_path / "stage2.ckpt").exists()


def test_wrong_selector_routes_misrecognized_utterances(rng, tmp_path):
    manifest, data = toy_corpus(rng)
    sched = TrainSchedule(lr_phases=((1, 1e-3),))
    try:
        artifacts = run_cascade(manifest, small_cfg(), small_cfg(lstm_layers=2), sched, sched, FAST, AB,
                                base_k=2, data=data, selector="wrong")
    except CascadeDegenerate as exc:
        artifacts = exc.artifacts
    wrong = set()
    for entry in manifest.entries:
        best = first_best(artifacts.stage1, data[entry.id][0], FAST, AB)
        if best is not None and best.words != entry.text.split():
            wrong.add(entry.id)
    log = artifacts.selection_log
    assert list(log["id"]) == [e.id for e in manifest.entries]
    assert set(log.loc[log["routed_to"] == TO_CASCADE, "id"]) == wrong
    assert (artifacts.stage2 is None) == (not wrong)


def test_unknown_selector_is_rejected(rng):
    manifest, data = toy_corpus(rng)
    sched = TrainSchedule(lr_phases=((1, 1e-3),))
    with pytest.raises(ConfigError):
        run_cascade(manifest, small_cfg(), small_cfg(), sched, sched, FAST, AB, data=data, selector="longest")


def test_features_are_cached(tmp_path):
    clip = synthesize("ab", np.random.default_rng(0))
    write_wav(tmp_path / "x.wav", clip)
    entry = ManifestEntry(id="x", audio=str(tmp_path / "x.wav"), text="ab", duration=clip.duration_s)
    fresh = load_features(entry)
    cached = load_features(entry)
    np.testing.assert_array_equal(fresh, cached)
    assert fresh.shape[1] == 161


def test_augmented_copies_of_each_entry(tmp_path):
    clip = synthesize("ab", np.random.default_rng(1))
    write_wav(tmp_path / "x.wav", clip)
    entry = ManifestEntry(id="x", audio=str(tmp_path / "x.wav"), text="ab", duration=clip.duration_s)
    alphabet = tone_alphabet()
    extra, data = augment_dataset(Manifest(entries=(entry,)), alphabet, noise_snr_db=20)
    assert [e.id for e in extra.entries] == ["x#speed0.9", "x#speed1.1", "x#snr20"]
    slow, fast, noisy = extra.entries
    assert slow.duration > entry.duration > fast.duration
    assert noisy.duration == pytest.approx(entry.duration)
    assert all(data[e.id][1] == alphabet.encode("ab") for e in extra.entries)
    assert data[slow.id][0].shape[0] > data[fast.id][0].shape[0]


@pytest.mark.slow
def test_tone_corpus_end_to_end(tmp_path):
    train_path, test_path = generate_corpus(tmp_path, n_train=200, n_test=50, seed=0)
    alphabet = tone_alphabet()
    manifest = load_manifest(train_path)
    data = build_dataset(manifest, alphabet)
    cfg = DecodeConfig(beam_width=8, top_n=2)
    try:
        artifacts = run_cascade(manifest, ModelConfig.stage1_toy(alphabet.size), ModelConfig.stage2_toy(alphabet.size),
                                TrainSchedule.scaled(30, 2e-3), TrainSchedule.scaled(10, 2e-3), cfg, alphabet,
                                threshold=0.5, base_k=8, data=data)
    except CascadeDegenerate as exc:
        artifacts = exc.artifacts
    log = artifacts.selection_log
    assert sorted(log["id"]) == sorted(e.id for e in manifest.entries)
    assert set(log["routed_to"]) <= {TO_CASCADE, TO_LM}

    test = load_manifest(test_path)
    rates = []
    for entry, (frames, _) in zip(test.entries, build_dataset(test, alphabet).values()):
        rates.append(cer(greedy_decode(forward(artifacts.stage1, frames).posts, alphabet).text, entry.text))
        single = single_stage_infer(frames, artifacts.stage1, alphabet, None, cfg)
        routed_off = two_stage_infer(frames, artifacts, None, cfg, threshold=1.0)
        assert routed_off.transcript == single.transcript
        assert routed_off.hypothesis == single.hypothesis
    assert np.mean(rates) < 0.15
