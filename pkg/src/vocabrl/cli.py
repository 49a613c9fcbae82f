"""Command-line interface: ``vocabrl <command> [--config FILE] [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numerical failure (NaN/Inf abort).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import CheckpointError, load_generator, load_predictor, save_model
from .config import ConfigError, RunConfig, make_config, prepare_run_dir
from .corpus import (EOS, DataError, Example, SyntheticSpec, Vocabulary, build_vocab,
                     load_features, load_parallel, make_synthetic_task, read_features,
                     read_lines, write_parallel)
from .decode import (beam_decode, decode_benchmark, decode_examples, greedy_decode,
                     write_benchmark_csv)
from .generator import GeneratorConfig, GeneratorModel, ReducedHead
from .metrics import corpus_bleu, mean_gleu, percentile_histogram
from .predictor import (PredictorModel, PredictorTrainConfig, build_mask, read_mask_cache,
                        recall_at_k, train_predictor, write_mask_cache)
from .training import (Curves, MaskTable, evaluate, pretrain_then_rl, profile_rl_epoch,
                       train_rl, train_xent)

log = logging.getLogger("vocabrl")

RECALL_KS = (20, 50, 100, 200, 500, 1000, 2000)
SPLIT_OFFSETS = {"train": 0, "dev": 1_000_000, "test": 2_000_000}

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# shared helpers


def _paths(cfg: RunConfig) -> dict[str, Path]:
    run = cfg.run_dir
    ck = run / "checkpoints"
    return {"src_vocab": run / "vocab.src", "tgt_vocab": run / "vocab.tgt",
            "predictor": ck / "predictor.ckpt", "xent": ck / "xent.ckpt", "rl": ck / "rl.ckpt",
            "curves": run / "curves.csv"}


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")


def _vocabs(cfg: RunConfig) -> tuple[Vocabulary | None, Vocabulary]:
    p = _paths(cfg)
    if not p["tgt_vocab"].exists():
        raise DataError(f"{p['tgt_vocab']} not found; run build-vocab first")
    src = Vocabulary.load(p["src_vocab"]) if cfg.source_type == "text" else None
    return src, Vocabulary.load(p["tgt_vocab"])


def _load_split(cfg: RunConfig, split: str, src_vocab, tgt_vocab, src_path=None, tgt_path=None):
    src_path = src_path or getattr(cfg, f"{split}_src")
    tgt_path = tgt_path or getattr(cfg, f"{split}_tgt")
    if src_path is None or tgt_path is None:
        raise ConfigError(f"missing {split}_src/{split}_tgt in the config")
    for p in (src_path, tgt_path):
        if not Path(p).exists():
            raise DataError(f"file not found: {p}")
    if cfg.source_type == "text":
        ex, _ = load_parallel(src_path, tgt_path, src_vocab, tgt_vocab, cfg.max_len,
                              SPLIT_OFFSETS[split])
    else:
        ex, _ = load_features(src_path, tgt_path, tgt_vocab, cfg.max_len, SPLIT_OFFSETS[split])
    if not ex:
        raise DataError(f"no usable examples in the {split} split")
    return ex


def _feature_dim(cfg: RunConfig) -> int:
    return read_features(cfg.train_src).shape[1]


def _new_generator(cfg: RunConfig, src_vocab, tgt_vocab) -> GeneratorModel:
    kw = dict(vocab_size=len(tgt_vocab), d=cfg.d, layers=cfg.layers, attention=cfg.attention,
              input_feed=cfg.input_feed, score=cfg.score, dropout=cfg.dropout, seed=cfg.seed)
    if cfg.source_type == "text":
        kw["src_vocab_size"] = len(src_vocab)
    else:
        kw["feature_dim"] = _feature_dim(cfg)
    return GeneratorModel(GeneratorConfig(**kw))


def _masks(cfg: RunConfig, examples, tgt_vocab, K=None) -> MaskTable | None:
    """Masks for the small head (``None`` for the full head)."""
    if cfg.head == "full" and K is None:
        return None
    K = cfg.K if K is None else K
    K = min(K, len(tgt_vocab))
    cache = Path(cfg.mask_cache) if cfg.mask_cache else None
    if cache is not None and (cache / f"train.k{K}").exists():
        table = MaskTable(read_mask_cache(cache / f"train.k{K}"),
                          read_mask_cache(cache / f"eval.k{K}"))
        missing = [e.id for e in examples if e.id not in table.get("eval")]
        if missing:
            raise DataError(f"mask cache has no entry for example {missing[0]}")
        return table
    pred_path = _paths(cfg)["predictor"]
    if not pred_path.exists():
        raise DataError(f"{pred_path} not found; run train-predictor (or set mask_cache)")
    predictor, _ = load_predictor(pred_path, expect_vocab=len(tgt_vocab))
    table = MaskTable.from_predictor(predictor, examples, K)
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        write_mask_cache(cache / f"train.k{K}", table.get("train"))
        write_mask_cache(cache / f"eval.k{K}", table.get("eval"))
    return table


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# commands


def cmd_make_synthetic(cfg: RunConfig, args) -> None:
    spec = SyntheticSpec(src_vocab=args.src_vocab, tgt_vocab=args.tgt_vocab,
                         n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test,
                         min_len=args.min_len, max_len=args.max_sent_len,
                         swap_prob=args.swap_prob, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, pairs in zip(("train", "dev", "test"), make_synthetic_task(spec)):
        write_parallel(out / name, pairs)
    log.info("wrote synthetic task to %s", out)


def cmd_build_vocab(cfg: RunConfig, args) -> None:
    _require(cfg, "train_tgt")
    p = _paths(cfg)
    tgt = build_vocab(cfg.train_tgt, cfg.min_count)
    if cfg.distractors:
        tgt = tgt.with_distractors(cfg.distractors)
    tgt.save(p["tgt_vocab"])
    if cfg.source_type == "text":
        _require(cfg, "train_src")
        build_vocab(cfg.train_src, cfg.min_count).save(p["src_vocab"])
    log.info("target vocabulary: %d types", len(tgt))


def _predictor_cfg(cfg: RunConfig) -> PredictorTrainConfig:
    return PredictorTrainConfig(epochs=cfg.pred_epochs, batch_size=cfg.pred_batch_size,
                                lr=cfg.pred_lr, smoothing=cfg.smoothing, select_k=cfg.select_k,
                                clip_norm=cfg.clip_norm, weight_decay=cfg.weight_decay,
                                seed=cfg.seed)


def cmd_train_predictor(cfg: RunConfig, args) -> None:
    sv, tv = _vocabs(cfg)
    train = _load_split(cfg, "train", sv, tv)
    dev = _load_split(cfg, "dev", sv, tv)
    kw = {"src_vocab_size": len(sv)} if sv is not None else {"feature_dim": _feature_dim(cfg)}
    model = PredictorModel(len(tv), d_v=cfg.d_v, dropout=cfg.pred_dropout, seed=cfg.seed, **kw)
    hist = train_predictor(model, train, dev, _predictor_cfg(cfg))
    save_model(_paths(cfg)["predictor"], model, "predictor",
               meta={"best_recall": hist.best_recall, "best_epoch": hist.best_epoch})
    rows = [[_fmt(float(r["epoch"])), _fmt(r["loss"]), _fmt(float(r["recall"])), _fmt(r["lr"]),
             "" if cfg.deterministic else _fmt(r["seconds"])] for r in hist.rows]
    _write_csv(cfg.run_dir / "predictor_curves.csv", ["epoch", "loss", "recall", "lr", "seconds"],
               rows)


def cmd_eval_predictor(cfg: RunConfig, args) -> None:
    sv, tv = _vocabs(cfg)
    examples = _load_split(cfg, args.split, sv, tv)
    model, _ = load_predictor(_paths(cfg)["predictor"], expect_vocab=len(tv))
    if args.ks:
        ks = [min(int(k), len(tv)) for k in args.ks.split(",")]
    else:
        ks = [k for k in RECALL_KS if k < len(tv)] + [len(tv)]
    rec = recall_at_k(model, examples, ks)
    out = Path(args.output) if args.output else cfg.run_dir / f"recall_{args.split}.csv"
    _write_csv(out, ["K", "recall"], [[k, f"{r:.6f}"] for k, r in zip(ks, rec)])
    log.info("recall@K %s", dict(zip(ks, np.round(rec, 4))))


def _init_generator(cfg: RunConfig, sv, tv, path) -> GeneratorModel:
    model, _ = load_generator(path, expect_vocab=len(tv))
    if sv is not None and model.cfg.src_vocab_size != len(sv):
        raise CheckpointError(f"{path}: source vocabulary size does not match the run")
    model.cfg.dropout = cfg.dropout
    return model


def cmd_train_xent(cfg: RunConfig, args) -> None:
    sv, tv = _vocabs(cfg)
    train = _load_split(cfg, "train", sv, tv)
    dev = _load_split(cfg, "dev", sv, tv)
    masks = _masks(cfg, train + dev, tv)
    model = _new_generator(cfg, sv, tv)
    curves = Curves(deterministic=cfg.deterministic)
    res = train_xent(model, train, dev, cfg.train_config(), masks, curves=curves)
    p = _paths(cfg)
    save_model(p["xent"], model, "generator",
               meta={"head": cfg.head, "best_bleu": res["best_bleu"], "phase": "xent"})
    curves.write(p["curves"])


def _previous_rows(path: Path, phase_prefix: str) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [r for r in csv.DictReader(fh) if r["phase"].startswith(phase_prefix)]


def cmd_train_rl(cfg: RunConfig, args) -> None:
    sv, tv = _vocabs(cfg)
    train = _load_split(cfg, "train", sv, tv)
    dev = _load_split(cfg, "dev", sv, tv)
    masks = _masks(cfg, train + dev, tv)
    p = _paths(cfg)
    tc = cfg.train_config()
    if args.pretrain_epochs is not None:
        sweep = [int(x) for x in args.pretrain_epochs.split(",")]
        res = pretrain_then_rl(lambda: _new_generator(cfg, sv, tv), train, dev, tc, masks,
                               sweep, p["curves"])
        rows = [[r["pretrain_epochs"], _fmt(r["gleu_before"]), _fmt(r["bleu_before"]),
                 _fmt(r["gleu_after"]), _fmt(r["bleu_after"])] for r in res]
        _write_csv(cfg.run_dir / "sweep.csv",
                   ["pretrain_epochs", "gleu_before", "bleu_before", "gleu_after", "bleu_after"],
                   rows)
        best = max(res, key=lambda r: r["gleu_after"])
        save_model(p["rl"], best["model"], "generator",
                   meta={"head": cfg.head, "phase": "rl", "pretrain_epochs": best["pretrain_epochs"]})
        return
    init = cfg.init_checkpoint or (p["xent"] if p["xent"].exists() else None)
    if init is None and not args.from_scratch:
        raise ConfigError("train-rl needs an initial checkpoint (train-xent first, "
                          "init_checkpoint, or --from-scratch)")
    model = _new_generator(cfg, sv, tv) if init is None else _init_generator(cfg, sv, tv, init)
    curves = Curves(deterministic=cfg.deterministic)
    kept = _previous_rows(p["curves"], "xent") if init is not None else []
    offset = max((float(r["epoch"]) for r in kept), default=0.0)
    res = train_rl(model, train, dev, tc, masks, curves=curves, epoch_offset=offset)
    save_model(p["rl"], model, "generator", extra_modules={"baseline": res["baseline"]},
               meta={"head": cfg.head, "phase": "rl", "best_gleu": res["best_gleu"]})
    all_rows = Curves(deterministic=cfg.deterministic)
    for r in kept:
        all_rows.add(**r)
    for r in curves.rows:
        all_rows.add(**r)
    all_rows.write(p["curves"])


def _read_sources(cfg: RunConfig, path, sv):
    if cfg.source_type == "text":
        return [sv.encode(toks) for toks in read_lines(path)]
    return list(read_features(path))


def _default_generator(cfg: RunConfig) -> Path:
    p = _paths(cfg)
    for key in ("rl", "xent"):
        if p[key].exists():
            return p[key]
    raise DataError(f"no generator checkpoint in {cfg.run_dir / 'checkpoints'}")


def cmd_translate(cfg: RunConfig, args) -> None:
    sv, tv = _vocabs(cfg)
    src_path = args.input or cfg.test_src
    if src_path is None:
        raise ConfigError("translate needs --input or test_src")
    if not Path(src_path).exists():
        raise DataError(f"file not found: {src_path}")
    model, _ = load_generator(args.checkpoint or _default_generator(cfg), expect_vocab=len(tv))
    model.eval()
    predictor = None
    if cfg.head == "small":
        predictor, _ = load_predictor(_paths(cfg)["predictor"], expect_vocab=len(tv))
    K = min(cfg.K, len(tv))
    out_path = Path(args.output) if args.output else cfg.run_dir / "hyp.txt"
    lines = []
    for i, src in enumerate(_read_sources(cfg, src_path, sv)):
        if len(src) == 0:
            lines.append("")
            continue
        head = None
        if predictor is not None:
            with T.no_grad():
                scores = predictor.logits([src]).data[0]
                head = ReducedHead(model, [build_mask(scores, K, mode="eval")])
        if args.nbest:
            for toks, score, norm in beam_decode(model, src, head, max(args.beam, 1),
                                                 cfg.max_n, args.alpha, nbest=True):
                lines.append(f"{i} ||| {' '.join(tv.decode(toks))} ||| {score:.6f} ||| {norm:.6f}")
            continue
        if args.beam > 1:
            toks = beam_decode(model, src, head, args.beam, cfg.max_n, args.alpha)
        else:
            toks = greedy_decode(model, src, head, cfg.max_n)
        lines.append(" ".join(tv.decode(toks)))
    out_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    log.info("wrote %d lines to %s", len(lines), out_path)


def cmd_evaluate(cfg: RunConfig, args) -> None:
    for p in (args.hyp, args.ref):
        if not Path(p).exists():
            raise DataError(f"file not found: {p}")
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    rows = [["bleu", f"{corpus_bleu(hyps, refs):.2f}"], ["gleu", f"{100 * mean_gleu(hyps, refs):.2f}"],
            ["sentences", str(len(hyps))]]
    out = Path(args.output) if args.output else cfg.run_dir / "metrics.csv"
    _write_csv(out, ["metric", "value"], rows)
    for name, val in rows:
        print(f"{name},{val}")


def cmd_analyze_percentiles(cfg: RunConfig, args) -> None:
    _, tv = _vocabs(cfg)
    if not Path(args.input).exists():
        raise DataError(f"file not found: {args.input}")
    hist = percentile_histogram(read_lines(args.input), tv)
    out = Path(args.output) if args.output else cfg.run_dir / "percentiles.csv"
    hist.to_csv(out)


def cmd_benchmark(cfg: RunConfig, args) -> None:
    sv, tv = _vocabs(cfg)
    split = "test" if cfg.test_src else "dev"
    examples = _load_split(cfg, split, sv, tv)[: args.n_sentences]
    K = min(cfg.K, len(tv))
    predictor = None
    pred_path = _paths(cfg)["predictor"]
    if pred_path.exists():
        predictor, _ = load_predictor(pred_path, expect_vocab=len(tv))
    try:
        model, _ = load_generator(_default_generator(cfg), expect_vocab=len(tv))
    except DataError:
        model = _new_generator(cfg, sv, tv)
    if args.what in ("decode", "both"):
        settings = [("full", None)] + ([("small", K)] if predictor is not None else [])
        rows = decode_benchmark(model, examples, predictor, settings, cfg.max_n,
                                threads=cfg.threads)
        write_benchmark_csv(cfg.run_dir / "benchmark_decode.csv", rows)
    if args.what in ("train", "both"):
        train = _load_split(cfg, "train", sv, tv)
        rows = []
        for head in ("full", "small"):
            if head == "small" and predictor is None:
                continue
            cfg.head = head
            masks = None if head == "full" else _masks(cfg, train, tv)
            gen = _new_generator(cfg, sv, tv)
            prof = profile_rl_epoch(gen, train, cfg.train_config(), masks, args.train_batches)
            rows.append([head, len(tv), K if head == "small" else len(tv), prof["batches"],
                         f"{prof['seconds']:.4f}", prof["peak_bytes"],
                         prof["peak_activation_bytes"]])
        base_t, base_m = float(rows[0][4]), rows[0][5]
        for r in rows:
            r += [f"{float(r[4]) / base_t:.4f}", f"{r[5] / base_m:.4f}"]
        _write_csv(cfg.run_dir / "benchmark_train.csv",
                   ["setting", "vocab", "K", "batches", "seconds", "peak_bytes",
                    "peak_activation_bytes", "time_ratio", "memory_ratio"], rows)


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--name", help="run name (directory under runs_dir)")
    p.add_argument("--runs-dir", dest="runs_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--head", choices=["full", "small"])
    p.add_argument("--k", dest="K", type=int, help="small-vocabulary size")
    p.add_argument("--max-len", dest="max_n", type=int, help="maximum generated length")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vocabrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic parallel corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--src-vocab", type=int, default=200)
    p.add_argument("--tgt-vocab", type=int, default=200)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-dev", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-sent-len", type=int, default=10)
    p.add_argument("--swap-prob", type=float, default=0.0)
    p.set_defaults(func=cmd_make_synthetic)

    for name, fn, hlp in [("build-vocab", cmd_build_vocab, "count vocabularies"),
                          ("train-predictor", cmd_train_predictor, "train the vocabulary predictor"),
                          ("train-xent", cmd_train_xent, "cross-entropy training")]:
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval-predictor", help="recall@K curve")
    _common(p)
    p.add_argument("--split", default="dev", choices=["train", "dev", "test"])
    p.add_argument("--ks", help="comma-separated K values")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval_predictor)

    p = sub.add_parser("train-rl", help="REINFORCE training")
    _common(p)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--init", dest="init_checkpoint")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--pretrain-epochs", help="comma-separated sweep, e.g. 0,2,4")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("translate", help="decode a source file")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--checkpoint")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--nbest", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU and GLEU of a hypothesis file")
    _common(p)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-percentiles", help="output share per frequency decile")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_analyze_percentiles)

    p = sub.add_parser("benchmark", help="small vs full head timing and memory")
    _common(p)
    p.add_argument("--what", choices=["decode", "train", "both"], default="both")
    p.add_argument("--n-sentences", type=int, default=50)
    p.add_argument("--train-batches", type=int, default=10)
    p.set_defaults(func=cmd_benchmark)
    return parser


_FLAG_KEYS = ("name", "runs_dir", "seed", "threads", "head", "K", "max_n", "deterministic",
              "lam", "init_checkpoint")


def _overrides(args) -> dict:
    out = {k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _setup_logging(run_dir: Path, command: str, verbose: bool) -> None:
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.INFO if verbose else logging.WARNING)
    err.setFormatter(fmt)
    root.addHandler(err)
    fh = logging.FileHandler(run_dir / "logs" / f"{command}.log", mode="w", encoding="utf-8")
    fh.setFormatter(fmt)
    root.addHandler(fh)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    dtype = T.get_default_dtype()
    try:
        cfg = make_config(args.config, _overrides(args))
        if cfg.deterministic:
            cfg.threads = 1
        env_threads = os.environ.get("VOCABRL_THREADS")
        if env_threads and not cfg.deterministic:
            cfg.threads = int(env_threads)
        run = prepare_run_dir(cfg)
        _setup_logging(run, args.command, args.verbose)
        T.set_default_dtype(np.float64 if cfg.precision == "float64" else np.float32)
        with threadpool_limits(limits=cfg.threads):
            args.func(cfg, args)
        return EXIT_OK
    except (ConfigError, KeyError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (T.NumericalError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        T.set_default_dtype(dtype)
        logging.getLogger().handlers.clear()


if __name__ == "__main__":
    sys.exit(main())
