# %%
"""
Command-line entry point: `python code/cli.py <subcommand> ...`.

Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from cascade import (SELECTORS, build_dataset, compare_stats, compute_sample_stats, decode_with_stage,
                     load_artifacts, run_cascade, two_stage_infer)
from config import canonical_json, load_overlay, setup_logging, to_dict
from ctc import Alphabet
from decoder import (DecodeConfig, alpha_sweep, attach_lm_scores, prefix_beam_search, rescore, route, sample_alphas,
                     tune_alpha)
from errors import AsrError, CascadeDegenerate, ConfigError, EmptySentence
from frontend import FrontendConfig, compute_spectrogram, featurize_file, read_spectrogram, read_wav
from ngram_lm import load_arpa, score_sentence
from nnet import ModelConfig, TrainSchedule, build_model, forward, load_checkpoint, save_checkpoint, train, transfer_cnn_weights
from reports import plot_alpha_sweep, plot_batch_profile, plot_loss_curve
from scheduler import SchedulerConfig, build_plan, compare_policies, load_manifest, padding_report, plan_sorted_fixed, plan_varied
from synthetic import generate_corpus, tone_alphabet

logger = logging.getLogger(__name__)

SPEC_SUFFIX = ".spec"
ALPHABETS = {"english": Alphabet.english, "tone": tone_alphabet}
PRESETS = {
    "stage1_full": ModelConfig.stage1_full,
    "stage2_full": ModelConfig.stage2_full,
    "stage1_toy": ModelConfig.stage1_toy,
    "stage2_toy": ModelConfig.stage2_toy,
}


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _log_resolved(args, cfg):
    logger.info("seed=%d %s=%s", args.seed, type(cfg).__name__, canonical_json(cfg))


def _load_frames(path, frontend_cfg=FrontendConfig()):
    if Path(path).suffix.lower() == ".wav":
        return compute_spectrogram(read_wav(path), frontend_cfg).frames
    return read_spectrogram(path).frames


def _decode_config(args):
    overrides = {
        "beam_width": getattr(args, "beam_width", None),
        "top_n": getattr(args, "top_n", None),
        "alpha": getattr(args, "alpha", None),
        "route_threshold": getattr(args, "threshold", None),
        "fusion": getattr(args, "fusion", None),
    }
    return load_overlay(DecodeConfig, args.config, overrides)


# ----------------------------
# subcommands
# ----------------------------

def cmd_featurize(args):
    cfg = load_overlay(FrontendConfig, args.config, {"window": args.window, "normalize": args.normalize})
    _log_resolved(args, cfg)
    spec = featurize_file(args.input, args.out, cfg)
    print(f"{args.out}: {spec.frame_count} frames x {spec.feature_dim} features")


def cmd_lm_score(args):
    lm = load_arpa(args.arpa)
    sentences = [line.strip() for line in Path(args.text).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not sentences:
        raise EmptySentence(f"{args.text} holds no sentences")
    rows = []
    for text in sentences:
        score = score_sentence(lm, text.split(), permissive=args.permissive)
        rows.append({"text": text, "log10_prob": score.log10_total, "ln_prob": score.ln_total,
                     "oov_count": score.oov_count})
    if args.out:
        print(pd.DataFrame(rows))
    _write_json(args.out, {"arpa": str(args.arpa), "sentences": rows,
                           "total_log10_prob": sum(r["log10_prob"] for r in rows)})


def _decode_items(args):
    if args.spec_dir:
        paths = sorted(Path(args.spec_dir).glob(f"*{SPEC_SUFFIX}"))
        if not paths:
            raise ConfigError(f"no {SPEC_SUFFIX} files in {args.spec_dir}")
        return [(p.stem, p) for p in paths]
    if args.manifest:
        return [(e.id, e.audio) for e in load_manifest(args.manifest).entries]
    return [(Path(args.input).stem, args.input)]


def cmd_decode(args):
    cfg = _decode_config(args)
    _log_resolved(args, cfg)
    ckpt = load_checkpoint(args.ckpt)
    alphabet = ALPHABETS[args.alphabet]()
    lm = load_arpa(args.arpa) if args.arpa else None
    items = [(utt_id, _load_frames(path)) for utt_id, path in _decode_items(args)]
    results = decode_with_stage(ckpt, items, cfg, alphabet, lm, jobs=args.jobs)
    lines = []
    for utt_id, hyps in results:
        decision = route(hyps[0], cfg)
        if lm is not None and cfg.fusion == "rescore":
            best = rescore(hyps, lm, cfg.alpha, cfg.word_bonus, cfg.permissive_oov)
        else:
            best = hyps[0]
        lines.append(json.dumps({"id": utt_id, "transcript": best.text, "log_p_am": best.log_p_am,
                                 "log_p_lm": best.log_p_lm, "normalized_score": decision.normalized_score,
                                 "route": decision.decision}, sort_keys=True))
    output = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    else:
        sys.stdout.write(output)


def cmd_tune_alpha(args):
    cfg = _decode_config(args)
    _log_resolved(args, cfg)
    ckpt = load_checkpoint(args.ckpt)
    alphabet = ALPHABETS[args.alphabet]()
    lm = load_arpa(args.arpa)
    dev = [(forward(ckpt, _load_frames(e.audio)).posts, e.text) for e in load_manifest(args.manifest).entries]
    low, high = args.range
    alpha, error_rate = tune_alpha(dev, lm, cfg, alphabet, trials=args.trials, low=low, high=high, seed=args.seed)
    _write_json(args.out, {"alpha": alpha, "dev_wer": error_rate, "trials": args.trials,
                           "range": [low, high], "seed": args.seed})
    if args.plot:
        nbests = [(attach_lm_scores(prefix_beam_search(posts, cfg, alphabet), lm, cfg.permissive_oov), ref)
                  for posts, ref in dev]
        plot_alpha_sweep(alpha_sweep(nbests, sample_alphas(args.trials, low, high, args.seed)), args.plot, alpha)


def cmd_train(args):
    alphabet = ALPHABETS[args.alphabet]()
    base = PRESETS[args.preset](alphabet_size=alphabet.size)
    model_cfg = load_overlay(ModelConfig, args.config, {"alphabet_size": alphabet.size}, base=base)
    sched = TrainSchedule.scaled(args.epochs, args.lr) if args.epochs else TrainSchedule()
    sched_cfg = SchedulerConfig(policy=args.policy, base_k=args.base_k, cap_ratio=args.cap)
    _log_resolved(args, model_cfg)
    _log_resolved(args, sched)

    manifest = load_manifest(args.manifest)
    data = build_dataset(manifest, alphabet)
    ckpt = build_model(model_cfg, args.seed)
    if args.stage2:
        if not args.init_cnn:
            raise argparse.ArgumentTypeError("--stage2 requires --init-cnn")
        ckpt = transfer_cnn_weights(load_checkpoint(args.init_cnn), ckpt, freeze=args.freeze_cnn)
    dev_ids = None
    if args.dev_manifest:
        dev = load_manifest(args.dev_manifest)
        data.update(build_dataset(dev, alphabet))
        dev_ids = [e.id for e in dev.entries]
    ckpt, metrics = train(ckpt, build_plan(manifest, sched_cfg), sched, data, dev_ids=dev_ids,
                          seed=args.seed, jobs=args.jobs)
    save_checkpoint(args.out, ckpt)
    print(metrics)
    if args.metrics:
        metrics.to_csv(args.metrics, index=False)
    if args.plot:
        plot_loss_curve(metrics, args.plot)


def cmd_cascade_train(args):
    alphabet = ALPHABETS[args.alphabet]()
    stage1_cfg = load_overlay(ModelConfig, args.stage1_config, {"alphabet_size": alphabet.size},
                              base=ModelConfig.stage1_toy(alphabet.size))
    stage2_cfg = load_overlay(ModelConfig, args.stage2_config, {"alphabet_size": alphabet.size},
                              base=ModelConfig.stage2_toy(alphabet.size))
    sched = TrainSchedule.scaled(args.epochs, args.lr) if args.epochs else TrainSchedule()
    decode_cfg = _decode_config(args)
    for cfg in (stage1_cfg, stage2_cfg, sched, decode_cfg):
        _log_resolved(args, cfg)
    manifest = load_manifest(args.manifest)
    try:
        artifacts = run_cascade(manifest, stage1_cfg, stage2_cfg, sched, sched, decode_cfg, alphabet,
                                threshold=args.threshold, base_k=args.base_k, cap_ratio=args.cap,
                                seed=args.seed, jobs=args.jobs, augment_hard=args.augment,
                                freeze_cnn=args.freeze_cnn, out_dir=args.out_dir, selector=args.selector)
    except CascadeDegenerate:
        logger.error("cascade degenerate: stage 1 artifacts written to %s", args.out_dir)
        raise
    print(artifacts.selection_log["routed_to"].value_counts())


def cmd_cascade_infer(args):
    artifacts = load_artifacts(args.dir)
    cfg = load_overlay(DecodeConfig, args.config, {"alpha": args.alpha, "beam_width": args.beam_width,
                                                   "top_n": args.top_n})
    _log_resolved(args, cfg)
    lm = load_arpa(args.arpa) if args.arpa else None
    result = two_stage_infer(_load_frames(args.input), artifacts, lm, cfg, threshold=args.threshold)
    _write_json(args.report, {"input": str(args.input), "transcript": result.transcript, "route": result.route,
                              "normalized_score": result.normalized_score})


def cmd_stats(args):
    manifest = load_manifest(args.manifest, max_duration_s=float("inf"))
    everything = compute_sample_stats((e.text, e.duration) for e in manifest.entries)
    payload = {"all": to_dict(everything)}
    if args.wrong_ids:
        wrong_ids = set(Path(args.wrong_ids).read_text(encoding="utf-8").split())
        wrong = compute_sample_stats((e.text, e.duration) for e in manifest.entries if e.id in wrong_ids)
        payload["wrong"] = to_dict(wrong)
        table = compare_stats(wrong, everything)
        print(table)
        payload["relative_diff_pct"] = {k: float(v) for k, v in table["relative_diff_pct"].items()}
    _write_json(args.out, payload)


def cmd_bench_sched(args):
    cfg = load_overlay(SchedulerConfig, args.config, {"policy": args.policy, "base_k": args.base_k, "cap_ratio": args.cap})
    _log_resolved(args, cfg)
    manifest = load_manifest(args.manifest, max_duration_s=cfg.max_duration_s)
    plan = build_plan(manifest, cfg)
    report = padding_report(plan)
    print(compare_policies(manifest, cfg.base_k, cfg.cap_ratio, seed=args.seed))
    _write_json(args.report, {"policy": cfg.policy, "base_k": cfg.base_k, "cap_ratio": cfg.cap_ratio, **report.to_dict()})
    if args.plot:
        plot_batch_profile({"fixed": plan_sorted_fixed(manifest, cfg.base_k).to_frame(),
                            "varied": plan_varied(manifest, cfg.base_k, cfg.cap_ratio).to_frame()}, args.plot)


def cmd_synth(args):
    train_path, test_path = generate_corpus(args.out_dir, args.train, args.test, seed=args.seed)
    print(f"train manifest: {train_path}\ntest manifest: {test_path}")


# ----------------------------
# parser
# ----------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single source of randomness")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers; 1 is deterministic")
    common.add_argument("--config", help="JSON or YAML config overlay; flags override it")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="resbilstm", description="Residual BiLSTM CTC recognizer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", parents=[common], help="WAV -> spectrogram file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", choices=["hann", "rectangular"])
    p.add_argument("--no-normalize", dest="normalize", action="store_const", const=False,
                   help="keep raw log spectra instead of per-feature mean/variance normalization")
    p.set_defaults(func=cmd_featurize)

    lm = sub.add_parser("lm", help="language model utilities")
    lm_sub = lm.add_subparsers(dest="lm_command", required=True)
    p = lm_sub.add_parser("score", parents=[common], help="log10 score of every line of a text file")
    p.add_argument("--arpa", required=True)
    p.add_argument("--text", required=True, help="file with one sentence per line")
    p.add_argument("--permissive", action="store_true", help="map unknown words to <unk>")
    p.add_argument("--out")
    p.set_defaults(func=cmd_lm_score)

    def decode_flags(p):
        p.add_argument("--checkpoint", "--ckpt", dest="ckpt", required=True)
        p.add_argument("--alphabet", choices=sorted(ALPHABETS), default="english")
        p.add_argument("--beam", "--beam-width", dest="beam_width", type=int)
        p.add_argument("--top-n", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--fusion", choices=["rescore", "shallow"])

    p = sub.add_parser("decode", parents=[common], help="beam-decode features or audio")
    decode_flags(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--spec-dir", help=f"decode every *{SPEC_SUFFIX} file in this directory")
    source.add_argument("--in", dest="input")
    source.add_argument("--manifest")
    p.add_argument("--arpa")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("tune-alpha", parents=[common], help="random search for the LM weight")
    decode_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--arpa", required=True)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--range", type=float, nargs=2, default=[0.0, 5.0], metavar=("LOW", "HIGH"))
    p.add_argument("--out")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_tune_alpha)

    def train_flags(p):
        p.add_argument("--alphabet", choices=sorted(ALPHABETS), default="english")
        p.add_argument("--epochs", type=int, help="rescale the learning-rate schedule to this many epochs")
        p.add_argument("--lr", type=float, default=5e-4, help="first-phase learning rate when --epochs is given")
        p.add_argument("--base-k", type=int, default=8)
        p.add_argument("--cap", type=int, default=5)
        p.add_argument("--freeze-cnn", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train an acoustic model")
    train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dev-manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="stage1_toy")
    p.add_argument("--policy", choices=["fixed", "varied"], default="varied")
    p.add_argument("--stage2", action="store_true")
    p.add_argument("--init-cnn")
    p.add_argument("--metrics")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_train)

    cascade = sub.add_parser("cascade", help="two-stage cascade")
    cascade_sub = cascade.add_subparsers(dest="cascade_command", required=True)
    p = cascade_sub.add_parser("train", parents=[common], help="train both stages")
    train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage1-config")
    p.add_argument("--stage2-config")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--selector", choices=SELECTORS, default="score",
                   help="pick hard samples by route score or by word errors")
    p.add_argument("--augment", action="store_true", help="add speed-perturbed copies of hard samples")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_cascade_train)

    p = cascade_sub.add_parser("infer", parents=[common], help="two-stage inference")
    p.add_argument("--dir", required=True)
    p.add_argument("--arpa")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beam-width", type=int)
    p.add_argument("--top-n", type=int)
    p.add_argument("--threshold", type=float, help="override the route threshold stored with the artifacts")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_cascade_infer)

    p = sub.add_parser("stats", parents=[common], help="corpus statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--wrong-ids", help="file of whitespace-separated ids to compare against the corpus")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench-sched", parents=[common], help="padding report for a batch plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--base-k", type=int)
    p.add_argument("--cap", type=int)
    p.add_argument("--policy", choices=["fixed", "varied"])
    p.add_argument("--report")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_bench_sched)

    p = sub.add_parser("synth", parents=[common], help="generate the tone corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=50)
    p.set_defaults(func=cmd_synth)
    return parser


def parse_and_dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    setup_logging(args.log_level)
    try:
        args.func(args)
    except AsrError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
