"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 data error (bad manifest, failed check, diverged
training), 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .config import RunConfig, dump_config, load_config
from .errors import ConfigurationError, SiamstError

logger = logging.getLogger("siamst")


# ---------------------------------------------------------------------------
# shared plumbing


def _run_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out_dir or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "command": args.command,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "version": __version__,
        "argv": args.argv,
    }
    (out / "run.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    (out / "config.yaml").write_text(dump_config(cfg))
    return out


def _text_model(cfg: RunConfig, path=None):
    from .siamese import TextEncoder
    from .sttrain import MTModel

    enc = TextEncoder(cfg.encoder, np.random.default_rng(cfg.seed))
    model = MTModel(enc, cfg.encoder.d, seed=cfg.seed)
    if path is not None:
        model.load_state_dict(sio.read_matrices(path))
    return model


def _pretrain_text_model(cfg: RunConfig, train):
    from .sttrain import train_mt

    model = _text_model(cfg)
    tm = cfg.text_model
    train_mt(model, train, max_steps=tm.max_steps, batch_size=tm.batch_size, lr=tm.learning_rate,
             seed=cfg.seed)
    return model


def _load_st_models(cfg: RunConfig, paths):
    from .sttrain import STModel

    models = []
    for path in paths:
        model = STModel(cfg.encoder, seed=cfg.seed)
        model.load_state_dict(sio.read_matrices(path))
        models.append(model)
    return models


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_toy(args, cfg):
    from .toydata import make_corpus, write_corpus

    out = _run_dir(args, cfg)
    corpus = make_corpus(args.train_size, args.valid_size, feature_dim=cfg.encoder.input_dim,
                         noise=args.noise, seed=cfg.seed)
    paths = write_corpus(corpus, out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_filter(args, cfg):
    from .datapipe import filter_siamese, filter_st, tfidf_filter

    out = _run_dir(args, cfg)
    examples = sio.read_manifest(args.manifest)
    hyps = None
    if args.hypotheses:
        hyps = Path(args.hypotheses).read_text(encoding="utf-8").splitlines()
    fc = cfg.filter
    if args.stage == "siamese":
        kept, report = filter_siamese(examples, hyps, fc.target_corpus_wer, jobs=args.jobs)
    elif args.stage == "st":
        kept, report = filter_st(examples, hyps, fc.st_wer_threshold, fc.min_characters,
                                 (fc.length_ratio_min, fc.length_ratio_max))
    else:
        if not args.originals:
            raise ConfigurationError("--stage tfidf needs --originals")
        kept, report = tfidf_filter(sio.read_manifest(args.originals), examples, fc.tfidf_threshold)
    sio.write_manifest(out / "filtered.jsonl", kept)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    print(report.to_json())
    return 0


def cmd_train_siamese(args, cfg):
    from .siamese import SiameseModel, average_checkpoints, ctc_corpus_wer, train_siamese, validation_ot2
    from .toydata import load_utterances

    out = _run_dir(args, cfg)
    train, valid = load_utterances(args.train), load_utterances(args.valid)
    if args.text_model:
        text_model = _text_model(cfg, args.text_model)
    else:
        text_model = _pretrain_text_model(cfg, train)
    sio.write_matrices(out / "text_model.smst", text_model.state_dict())

    model = SiameseModel(cfg.encoder, seed=cfg.seed, text_encoder=text_model.text)
    result = train_siamese(model, train, valid, cfg.siamese)
    model.load_state_dict(average_checkpoints(result.checkpoints, cfg.average_best))
    sio.write_matrices(out / "siamese.smst", model.state_dict())
    (out / "metrics.csv").write_text(result.metrics_csv())
    summary = {
        "steps": result.steps,
        "skipped_empty_compression": result.skipped,
        "initial_val_l_ot2": result.initial_val_ot2,
        "averaged_val_l_ot2": validation_ot2(model, valid),
        "averaged_ctc_wer": ctc_corpus_wer(model, valid),
        "checkpoints_averaged": min(cfg.average_best, len(result.checkpoints)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_train_st(args, cfg):
    from .sttrain import build_teacher_table, init_st_model, train_st
    from .toydata import load_utterances

    out = _run_dir(args, cfg)
    train, valid = load_utterances(args.train), load_utterances(args.valid)
    text_model = _text_model(cfg, args.text_model)
    siamese_state = sio.read_matrices(args.siamese) if args.siamese else None
    model = init_st_model(cfg.encoder, siamese_state, text_model, args.init, seed=cfg.seed)
    teacher = None
    if cfg.st.kd.enabled:
        if args.teacher:
            teacher = sio.read_teacher_table(args.teacher)
        else:
            teacher = build_teacher_table(text_model, train, cfg.st.kd.k, cfg.st.kd.temperature)
            sio.write_teacher_table(out / "teacher.jsonl", teacher)
    result = train_st(model, train, valid, cfg.st, teacher)
    best = min(result.checkpoints, key=lambda c: (c.score, c.step))
    model.load_state_dict(best.state)
    sio.write_matrices(out / "st.smst", model.state_dict())
    (out / "metrics.csv").write_text(result.metrics_csv())
    summary = {"best_val_bleu": -best.score, "best_step": best.step, "skipped": result.skipped}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_decode(args, cfg):
    from .metrics import corpus_bleu
    from .sttrain import translate
    from .toydata import load_utterances

    out = _run_dir(args, cfg)
    utts = load_utterances(args.manifest)
    models = _load_st_models(cfg, args.model)
    beam = args.beam or cfg.decode.beam_size
    hyps = translate(models, [u.features for u in utts], beam, cfg.decode.max_len, jobs=args.jobs)
    (out / "hypotheses.txt").write_text("".join(h + "\n" for h in hyps))
    refs = [u.translation for u in utts]
    if all(refs):
        score = corpus_bleu(hyps, refs)
        (out / "bleu.json").write_text(json.dumps(score.to_dict(), indent=2) + "\n")
        print(score)
    return 0


def cmd_segment_sweep(args, cfg):
    from .segtool import default_grid, mean_length_scorer, sweep

    out = _run_dir(args, cfg)
    tracks = [sio.read_track(p) for p in args.tracks]
    sc = cfg.segment
    grid = default_grid(sc.grid_upper, sc.grid_step, sc.grid_smallest)
    result = sweep(tracks, None, grid, mean_length_scorer(sc.target_mean_length), jobs=args.jobs)
    (out / "sweep.csv").write_text(result.to_csv())
    best = result.best
    print(json.dumps({"min": best.min_length, "max": best.max_length, "score": best.score}))
    return 0


def cmd_ctc_check(args, cfg):
    from .ctc import ctc_bruteforce_nll, ctc_loss, min_frames
    from .numcore import log_softmax

    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    done = 0
    while done < args.instances:
        T, V, L = int(rng.integers(1, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
        target = [int(t) for t in rng.integers(1, V, size=L)]
        if min_frames(target) > T:
            continue
        lp = log_softmax(rng.normal(size=(T, V)), axis=1).value
        worst = max(worst, abs(ctc_loss(lp, target).item() - ctc_bruteforce_nll(lp, target)))
        done += 1
    ok = worst <= args.tolerance
    print(f"instances={done} max_abs_diff={worst:.3e} tolerance={args.tolerance:g} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_ot_check(args, cfg):
    from .ot import SinkhornConfig, exact_ot_oracle, sinkhorn

    rng = np.random.default_rng(cfg.seed)
    sk = SinkhornConfig(args.epsilon, max_iterations=2000, convergence_tolerance=1e-6, newton_refine=True)
    print(f"{'n':>2} {'oracle':>9} {'sinkhorn':>9} {'max_gap':>9} {'max_viol':>9} bound")
    ok = True
    for n in range(2, 7):
        gaps, viols, oracles, costs, bounded = [], [], [], [], True
        for _ in range(args.trials):
            C = rng.random((n, n))
            plan = sinkhorn(C, cfg=sk)
            exact = exact_ot_oracle(C)
            cost = plan.transport_cost.item()
            bounded &= cost >= exact - 1e-9
            gaps.append(cost - exact)
            viols.append(plan.marginal_violation)
            oracles.append(exact)
            costs.append(cost)
        ok &= bounded and max(viols) <= 1e-6
        print(f"{n:>2} {np.mean(oracles):9.5f} {np.mean(costs):9.5f} {max(gaps):9.2e} {max(viols):9.1e} "
              f"{'ok' if bounded else 'VIOLATED'}")
    return 0 if ok else 1


def cmd_bleu(args, cfg):
    from .metrics import corpus_bleu

    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    score = corpus_bleu(hyps, refs, smoothing=args.smoothing)
    print(json.dumps(score.to_dict()))
    if args.out_dir:
        out = _run_dir(args, cfg)
        (out / "bleu.json").write_text(json.dumps(score.to_dict(), indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set siamese.max_steps=100")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for filter, sweep and decode")
    common.add_argument("--out-dir", help="run directory (default: runs/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="siamst", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", parents=[common], help="write the synthetic corpus as manifests")
    p.add_argument("--train-size", type=int, default=500)
    p.add_argument("--valid-size", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.3)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("filter", parents=[common], help="WER / length / TF-IDF corpus filtering")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", choices=["siamese", "st", "tfidf"], required=True)
    p.add_argument("--hypotheses", help="ASR hypotheses, one line per manifest example")
    p.add_argument("--originals", help="manifest of original examples (tfidf stage)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train-siamese", parents=[common], help="Siamese CTC + OT encoder pretraining")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--text-model", help="pretrained text model; trained from --train when omitted")
    p.set_defaults(func=cmd_train_siamese)

    p = sub.add_parser("train-st", parents=[common], help="ST fine-tuning with optional distillation")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--text-model", required=True, help="decoder init and distillation teacher")
    p.add_argument("--siamese", help="Siamese checkpoint for the speech encoder")
    p.add_argument("--init", choices=["all", "frontend"], default="all",
                   help="copy the whole encoder or only the ASR front-end")
    p.add_argument("--teacher", help="precomputed teacher table (JSONL)")
    p.set_defaults(func=cmd_train_st)

    p = sub.add_parser("decode", parents=[common], help="beam search with one model or an ensemble")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("segment-sweep", parents=[common], help="grid sweep over segment-length bounds")
    p.add_argument("--tracks", nargs="+", required=True)
    p.set_defaults(func=cmd_segment_sweep)

    p = sub.add_parser("ctc-check", parents=[common], help="CTC loss vs brute-force enumeration")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_ctc_check)

    p = sub.add_parser("ot-check", parents=[common], help="Sinkhorn vs exact OT gap table")
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_ot_check)

    p = sub.add_parser("bleu", parents=[common], help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--smoothing", choices=["none", "add-k"], default="none")
    p.set_defaults(func=cmd_bleu)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        return args.func(args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SiamstError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
