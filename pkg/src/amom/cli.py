"""Command-line surface: `amom <command>` with a flat key=value config.

Each invocation owns one run directory holding the resolved config and
all artifacts. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure, 1 anything else.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import rng as rngmod
from .autodiff import NonFiniteError
from .config import ConfigError, ExperimentConfig, parse_config
from .data import (
    DataError,
    EOS_ID,
    PAD_ID,
    ParallelCorpus,
    SyntheticTaskSpec,
    Vocabulary,
    combine,
    encode_line,
    decode_line,
    generate_synthetic,
    load_corpus,
    load_vocab,
    save_corpus,
    synthetic_vocab,
)
from .inference import DecodeConfig, decode_corpus, decode_with_length_beam, dedup_consecutive
from .masking import MappingFunction, MaskingPolicy, expected_remask_ratio, simulate_remask_expectation
from .metrics import bucketed_bleu, corpus_bleu, edit_similarity, measure_latency, rouge_scores
from .model import ModelConfig, load_checkpoint, small_config, toy_config
from .training import TrainConfig, distill_corpus, make_batches, train_loop


class RunContext:
    """One run directory per invocation; dry runs write nothing."""

    def __init__(self, command: str, out_dir: str, dry: bool):
        self.command = command
        self.dir = out_dir
        self.dry = dry
        self._logf = None
        if not dry:
            os.makedirs(out_dir, exist_ok=True)
            self._logf = open(os.path.join(out_dir, "log.txt"), "a", encoding="utf-8")

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def log(self, msg: str) -> None:
        print(msg)
        if self._logf is not None:
            self._logf.write(msg + "\n")
            self._logf.flush()

    def close(self) -> None:
        if self._logf is not None:
            self._logf.close()
            self._logf = None


def _build(factory, **kwargs):
    """Construct a validated object, reporting failures as config errors."""
    try:
        return factory(**kwargs)
    except (ConfigError, DataError):
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _read_lines(path: str, key: str) -> list[str]:
    if not path:
        raise ConfigError(f"missing required path: {key}")
    try:
        with open(path, encoding="utf-8") as f:
            return [line.rstrip("\n").rstrip("\r") for line in f]
    except OSError as err:
        raise DataError(f"cannot read {key}={path}: {err}") from None


# ---------------------------------------------------------------------
# config -> domain objects


def _load_setup(cfg: ExperimentConfig, need_train: bool = True):
    """Returns (vocab, train, valid, test); synthetic splits use
    data.seed, data.seed+1 and data.seed+2."""
    if cfg["data.task"]:
        base = SyntheticTaskSpec(
            task=cfg["data.task"],
            vocab_size=cfg["data.vocab_size"],
            len_min=cfg["data.len_min"],
            len_max=cfg["data.len_max"],
            n_pairs=cfg["data.pairs"],
            seed=cfg["data.seed"],
            ambiguity_rate=cfg["data.ambiguity_rate"],
        )
        vocab = synthetic_vocab(base)
        train = generate_synthetic(base) if need_train else None
        valid = generate_synthetic(
            dataclasses.replace(base, seed=base.seed + 1, n_pairs=cfg["data.valid_pairs"]))
        test = generate_synthetic(
            dataclasses.replace(base, seed=base.seed + 2, n_pairs=cfg["data.test_pairs"]))
        return vocab, train, valid, test

    if not cfg["data.vocab"]:
        raise ConfigError("set data.task for synthetic data, or data.vocab + data.src/data.tgt")
    vocab = load_vocab(cfg["data.vocab"])
    train = None
    if need_train:
        if not (cfg["data.src"] and cfg["data.tgt"]):
            raise ConfigError("missing required path: data.src/data.tgt")
        train = load_corpus(cfg["data.src"], cfg["data.tgt"], vocab)
    valid = None
    if cfg["data.valid_src"] and cfg["data.valid_tgt"]:
        valid = load_corpus(cfg["data.valid_src"], cfg["data.valid_tgt"], vocab)
    return vocab, train, valid, None


def _model_config(cfg: ExperimentConfig, n_vocab: int) -> ModelConfig:
    vocab_size = cfg["model.vocab_size"] or n_vocab
    if vocab_size < n_vocab:
        raise ConfigError(f"model.vocab_size {vocab_size} smaller than vocabulary ({n_vocab})")
    overrides = {}
    for key, field in (("model.d_model", "d_model"), ("model.n_heads", "n_heads"),
                       ("model.d_ffn", "d_ffn"), ("model.n_enc_layers", "n_enc_layers"),
                       ("model.n_dec_layers", "n_dec_layers"),
                       ("model.max_positions", "max_positions"),
                       ("model.max_length_class", "max_length_class")):
        if cfg[key]:
            overrides[field] = cfg[key]
    if cfg["model.dropout"] >= 0:
        overrides["dropout_rate"] = cfg["model.dropout"]
    builder = toy_config if cfg["model.preset"] == "toy" else small_config
    return _build(builder, vocab_size=vocab_size, **overrides)


def _policy(cfg: ExperimentConfig) -> MaskingPolicy:
    phi = _build(MappingFunction, kind=cfg["masking.phi.kind"],
                 a=cfg["masking.phi.a"], b=cfg["masking.phi.b"])
    psi = _build(MappingFunction, kind=cfg["masking.psi.kind"],
                 a=cfg["masking.psi.a"], b=cfg["masking.psi.b"])
    return _build(
        MaskingPolicy,
        phi=phi,
        psi=psi,
        second_pass_strategy=cfg["masking.second_pass"],
        same_ratio_flag=cfg["masking.same_ratio"],
        n_refine_passes=cfg["masking.n_refine_passes"],
        use_ground_truth_obs_flag=cfg["masking.use_ground_truth_obs"],
        confidence_based_flag=cfg["masking.confidence_based"],
        psi_convention=cfg["masking.psi_convention"],
    )


def _train_config(cfg: ExperimentConfig, model: ModelConfig, policy: MaskingPolicy) -> TrainConfig:
    return _build(
        TrainConfig,
        model=model,
        policy=policy,
        ar_mode=cfg["train.ar_mode"],
        max_updates=cfg["train.max_updates"],
        tokens_per_batch=cfg["train.tokens_per_batch"],
        base_lr=cfg["train.base_lr"],
        warmup_steps=cfg["train.warmup"],
        label_smoothing=cfg["train.label_smoothing"],
        length_loss_weight=cfg["train.length_loss_weight"],
        clip_norm=cfg["train.clip_norm"],
        valid_interval=cfg["train.valid_interval"],
        average_best=cfg["train.average_best"],
        seed=cfg["seed"],
    )


def _decode_config(cfg: ExperimentConfig) -> DecodeConfig:
    return _build(
        DecodeConfig,
        T=cfg["decode.iterations"],
        length_beam=cfg["decode.length_beam"],
        dedup_consecutive=cfg["decode.dedup"],
        max_output_length=cfg["decode.max_output_length"],
    )


def _load_model(path: str, key: str):
    if not path:
        raise ConfigError(f"missing required path: {key}")
    if not os.path.exists(path):
        raise ConfigError(f"{key}: no such file: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as err:
        raise DataError(f"bad checkpoint {path}: {err}") from None


def _check_fit(corpora, model: ModelConfig) -> None:
    """Every sentence must fit the position table ([LENGTH] costs one
    source slot) and every id must fall inside the model vocabulary."""
    for corpus in corpora:
        if corpus is None:
            continue
        if corpus.max_src_len + 1 > model.max_positions or corpus.max_tgt_len > model.max_positions:
            raise DataError(
                f"sentence length (src {corpus.max_src_len}+1, tgt {corpus.max_tgt_len}) "
                f"exceeds model.max_positions {model.max_positions}")
        if corpus.max_content_id >= model.vocab_size:
            raise DataError(
                f"corpus id {corpus.max_content_id} outside model vocab {model.vocab_size}")


def _decode_sources(cfg: ExperimentConfig, vocab: Vocabulary,
                    test: ParallelCorpus | None) -> list[tuple[str, np.ndarray]]:
    """(text, ids) per sentence, from decode.input or the synthetic test split."""
    if cfg["decode.input"]:
        lines = _read_lines(cfg["decode.input"], "decode.input")
        return [(line, encode_line(vocab, line)) for line in lines]
    if test is not None:
        return [(decode_line(vocab, s), s) for s, _ in test.pairs]
    raise ConfigError("nothing to decode: set decode.input or data.task")


def _strip_ids(ids) -> list[str]:
    """Token ids as strings, cut at the first EOS, padding dropped."""
    out = []
    for t in ids:
        t = int(t)
        if t == EOS_ID:
            break
        if t != PAD_ID:
            out.append(str(t))
    return out


def _parse_floats(text: str, key: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(p) for p in text.split(":" if ":" in text else ",") if p != ""]
    except ValueError:
        raise ConfigError(f"config key '{key}' expects numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"config key '{key}' expects {n} numbers, got {text!r}")
    return vals


# ---------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig, run: RunContext) -> None:
    vocab, train_c, valid_c, _ = _load_setup(cfg)
    model_cfg = _model_config(cfg, len(vocab.id_to_token))
    _check_fit([train_c, valid_c], model_cfg)
    tc = _train_config(cfg, model_cfg, _policy(cfg))
    # surfaces tokens_per_batch problems before any artifact exists
    make_batches(train_c, tc.tokens_per_batch, rngmod.make_stream(tc.seed, "batch-check"))
    if run.dry:
        run.log("dry run: config and data valid")
        return
    mode = "ar" if tc.ar_mode else "nar"
    run.log(f"train[{mode}]: {len(train_c.pairs)} pairs, "
            f"{len(valid_c.pairs) if valid_c else 0} valid, {tc.max_updates} updates")
    metas = train_loop(tc, train_c, valid_c, run.dir, log=run.log)
    run.log(f"done: {len(metas)} checkpoints in {run.dir}")


def cmd_distill(cfg: ExperimentConfig, run: RunContext) -> None:
    teacher, extra = _load_model(cfg["distill.checkpoint"], "distill.checkpoint")
    if extra.get("mode") == "nar":
        raise ConfigError("distill.checkpoint must be an autoregressive (train.ar_mode) model")
    vocab, train_c, _, _ = _load_setup(cfg)
    _check_fit([train_c], teacher.config)
    if run.dry:
        run.log("dry run: config and data valid")
        return
    distilled, dropped = distill_corpus(
        teacher, train_c, max_output_length=cfg["distill.max_output_length"])
    save_corpus(distilled, vocab, run.path("distilled.src"), run.path("distilled.tgt"))
    run.log(f"distilled {len(distilled.pairs)} pairs ({dropped} dropped)")
    if cfg["distill.combine"]:
        merged = combine(train_c, distilled)
        save_corpus(merged, vocab, run.path("combined.src"), run.path("combined.tgt"))
        run.log(f"combined corpus: {len(merged.pairs)} pairs")


def cmd_decode(cfg: ExperimentConfig, run: RunContext) -> None:
    model, _ = _load_model(cfg["decode.checkpoint"], "decode.checkpoint")
    vocab, _, _, test = _load_setup(cfg, need_train=False)
    pairs = _decode_sources(cfg, vocab, test)
    if not pairs:
        raise DataError("decode input is empty")
    dc = _decode_config(cfg)
    top = max(int(ids.max()) for _, ids in pairs if len(ids))
    if top >= model.config.vocab_size:
        raise DataError(f"input id {top} outside model vocab {model.config.vocab_size}")
    if run.dry:
        run.log("dry run: config and data valid")
        return

    latencies: list[float] = []
    if cfg["decode.jsonl"]:
        hyps = []
        for _, ids in pairs:  # batch 1 so per-sentence latency is meaningful
            t0 = time.perf_counter()
            hyps.append(decode_with_length_beam(model, ids, dc))
            latencies.append((time.perf_counter() - t0) * 1e3)
    else:
        hyps = decode_corpus(model, [ids for _, ids in pairs], dc,
                             chunk_size=cfg["decode.batch_size"])

    texts = []
    for hyp in hyps:
        toks = dedup_consecutive(hyp.tokens) if dc.dedup_consecutive else hyp.tokens
        texts.append(decode_line(vocab, toks))
    with open(run.path("hypotheses.txt"), "w", encoding="utf-8") as f:
        f.writelines(t + "\n" for t in texts)
    if cfg["decode.jsonl"]:
        with open(run.path("hypotheses.jsonl"), "w", encoding="utf-8") as f:
            for (src_text, _), hyp, text, ms in zip(pairs, hyps, texts, latencies):
                f.write(json.dumps({
                    "source": src_text,
                    "hypothesis": text,
                    "length": hyp.length,
                    "mean_logprob": round(hyp.mean_logprob, 6),
                    "iterations": dc.T,
                    "latency_ms": round(ms, 3),
                }) + "\n")
    run.log(f"decoded {len(texts)} sentences (T={dc.T}, beam={dc.length_beam})")


def cmd_evaluate(cfg: ExperimentConfig, run: RunContext) -> None:
    hyp_lines = _read_lines(cfg["evaluate.hyps"], "evaluate.hyps")
    ref_lines = _read_lines(cfg["evaluate.refs"], "evaluate.refs")
    if len(hyp_lines) != len(ref_lines):
        raise DataError(f"hyps has {len(hyp_lines)} lines, refs has {len(ref_lines)}")
    src_lines = None
    if cfg["evaluate.sources"]:
        src_lines = _read_lines(cfg["evaluate.sources"], "evaluate.sources")
        if len(src_lines) != len(hyp_lines):
            raise DataError(f"sources has {len(src_lines)} lines, hyps has {len(hyp_lines)}")
    if run.dry:
        run.log("dry run: config and data valid")
        return

    hyp_toks = [l.split() for l in hyp_lines]
    ref_toks = [l.split() for l in ref_lines]
    rows = [("bleu", "corpus", corpus_bleu(hyp_toks, ref_toks).bleu)]
    rouge = rouge_scores(hyp_toks, ref_toks)
    rows += [("rouge1", "corpus", rouge.rouge1_f), ("rouge2", "corpus", rouge.rouge2_f),
             ("rougeL", "corpus", rouge.rougeL_f),
             ("edit_similarity", "corpus", edit_similarity(hyp_lines, ref_lines))]
    if src_lines is not None and cfg["evaluate.buckets"]:
        edges = [int(v) if v == int(v) else v
                 for v in _parse_floats(cfg["evaluate.buckets"], "evaluate.buckets")]
        buckets = bucketed_bleu(hyp_toks, ref_toks, [l.split() for l in src_lines], edges)
        rows += [("bleu", label, rep.bleu) for label, rep in buckets.items()]

    with open(run.path("metrics.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "name", "value"])
        for metric, name, value in rows:
            writer.writerow([metric, name, f"{value:.4f}"])
            run.log(f"{metric:>16s} {name:>12s} {value:8.4f}")


def cmd_analyze_masking(cfg: ExperimentConfig, run: RunContext) -> None:
    convention = cfg["analyze.convention"]
    trials = cfg["analyze.trials"]
    length = cfg["analyze.length"]
    start, stop, step = _parse_floats(cfg["analyze.grid"], "analyze.grid", 3)
    if step <= 0 or stop < start:
        raise ConfigError(f"bad analyze.grid {cfg['analyze.grid']!r}")
    grid = [round(start + i * step, 10) for i in range(int(round((stop - start) / step)) + 1)]
    psi = _build(MappingFunction, kind=cfg["masking.psi.kind"],
                 a=cfg["masking.psi.a"], b=cfg["masking.psi.b"])
    if run.dry:
        run.log(f"dry run: {len(grid)} grid points valid")
        return

    rng = rngmod.make_stream(cfg["seed"], "analysis")
    with open(run.path("analysis.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["beta_err", "analytic_Er", "empirical_Er", "trials", "convention"])
        for beta_err in grid:
            analytic = expected_remask_ratio(beta_err)
            empirical = simulate_remask_expectation(length, beta_err, psi, convention, trials, rng)
            writer.writerow([f"{beta_err:.2f}", f"{analytic:.6f}", f"{empirical:.6f}",
                             trials, convention])
            run.log(f"beta_err={beta_err:.2f} analytic={analytic:.6f} "
                    f"empirical={empirical:.6f} |diff|={abs(analytic - empirical):.6f}")


def cmd_sweep_mapping(cfg: ExperimentConfig, run: RunContext) -> None:
    target = cfg["sweep.target"]
    points = []
    for part in cfg["sweep.grid"].split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigError(f"sweep.grid point {part!r} is not kind:a:b")
        kind, a, b = fields[0], *_parse_floats(f"{fields[1]}:{fields[2]}", "sweep.grid", 2)
        points.append((kind, a, b))
    vocab, train_c, valid_c, _ = _load_setup(cfg)
    if valid_c is None:
        raise ConfigError("sweep-mapping needs a validation split (data.task or data.valid_src)")
    model_cfg = _model_config(cfg, len(vocab.id_to_token))
    _check_fit([train_c, valid_c], model_cfg)
    base_policy = _policy(cfg)
    configs = []
    for kind, a, b in points:
        mapping = _build(MappingFunction, kind=kind, a=a, b=b)
        policy = dataclasses.replace(base_policy, **{target: mapping})
        tc = _train_config(cfg, model_cfg, policy)
        # one validation pass right at the end; grid points only need a final score
        configs.append(dataclasses.replace(tc, max_updates=cfg["sweep.max_updates"],
                                           valid_interval=cfg["sweep.max_updates"]))
    if run.dry:
        run.log(f"dry run: {len(points)} grid points valid")
        return

    dc = _decode_config(cfg)
    refs = [_strip_ids(r) for _, r in valid_c.pairs]
    results = []
    for i, ((kind, a, b), tc) in enumerate(zip(points, configs)):
        point_dir = run.path(f"point_{i}_{kind}")
        run.log(f"sweep point {i}: {target}={kind}({a:g},{b:g})")
        train_loop(tc, train_c, valid_c, point_dir, log=run.log)
        model, _ = _load_model(os.path.join(point_dir, "checkpoint_averaged.amom"), "sweep point")
        hyps = decode_corpus(model, [s for s, _ in valid_c.pairs], dc)
        bleu = corpus_bleu([_strip_ids(h.tokens) for h in hyps], refs).bleu
        results.append((kind, a, b, bleu))
        run.log(f"sweep point {i}: bleu={bleu:.2f}")

    with open(run.path("sweep.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["mapping", "a", "b", "bleu"])
        for kind, a, b, bleu in results:
            writer.writerow([kind, f"{a:g}", f"{b:g}", f"{bleu:.2f}"])


def cmd_latency(cfg: ExperimentConfig, run: RunContext) -> None:
    nar_model, _ = _load_model(cfg["latency.checkpoint"], "latency.checkpoint")
    ar_model, ar_extra = _load_model(cfg["latency.ar_checkpoint"], "latency.ar_checkpoint")
    if ar_extra.get("mode") == "nar":
        raise ConfigError("latency.ar_checkpoint must be an autoregressive model")
    vocab, _, _, test = _load_setup(cfg, need_train=False)
    pairs = _decode_sources(cfg, vocab, test)[:cfg["latency.sample"]]
    t_list = [int(v) for v in _parse_floats(cfg["latency.iterations"], "latency.iterations")]
    dc = _decode_config(cfg)
    if run.dry:
        run.log(f"dry run: {len(pairs)} sentences, T={t_list}")
        return

    report = measure_latency(nar_model, ar_model, [ids for _, ids in pairs], t_list, dc,
                             warmup=cfg["latency.warmup"])
    payload = dataclasses.asdict(report)
    payload["t_list"] = t_list
    payload["n_sentences"] = len(pairs)
    with open(run.path("latency.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    run.log(f"ar: {report.ar_ms:.2f} ms/sentence")
    for T in t_list:
        run.log(f"nar T={T}: {report.nar_ms[T]:.2f} ms/sentence "
                f"(speedup {report.speedup[T]:.2f}x)")


_COMMANDS = {
    "train": (cmd_train, "train a model and write checkpoints + metrics"),
    "distill": (cmd_distill, "re-target a corpus with an autoregressive teacher"),
    "decode": (cmd_decode, "decode sources with mask-predict"),
    "evaluate": (cmd_evaluate, "score hypotheses against references"),
    "analyze-masking": (cmd_analyze_masking, "compare analytic vs simulated remask ratios"),
    "sweep-mapping": (cmd_sweep_mapping, "train a grid of mapping functions and score each"),
    "latency": (cmd_latency, "measure batch-1 decode latency, AR vs NAR"),
}


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="amom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (fn, help_text) in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", metavar="PATH", help="key=value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        sp.add_argument("--out", metavar="DIR", help="run directory (default runs/<command>-<stamp>)")
        sp.add_argument("--dry-run", action="store_true",
                        help="validate config and data, write nothing")
        sp.set_defaults(fn=fn)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    run = None
    try:
        cfg = parse_config(args.config, overrides)
        out_dir = args.out or os.path.join("runs", f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}")
        run = RunContext(args.command, out_dir, args.dry_run)
        if run.dry:
            sys.stdout.write(cfg.resolved_text())
        else:
            with open(run.path("config.txt"), "w", encoding="utf-8") as f:
                f.write(cfg.resolved_text())
        args.fn(cfg, run)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NonFiniteError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4
    except Exception as err:  # argparse handles its own exits
        print(f"error: {err}", file=sys.stderr)
        return 1
    finally:
        if run is not None:
            run.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
