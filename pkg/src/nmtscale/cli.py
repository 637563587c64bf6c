"""Command-line entry point: ``nmtscale <command> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 an
invariant was found violated at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import corpus_io
from .batching import SubBatch, batch_pairs, check_partition, make_batches, pairs_by_id
from .config import POLICIES, ConfigError, RunConfig, load_config, parse_bool, split_list, substream, \
    substream_seed, write_config
from .corpus_io import DataError, dump_json
from .datafilter import FilterConfig, MixRatio, basic_filter, mix_sampler, score_pairs, select_top_k
from .distsim import CommModel, big_transformer_layer_bytes, report_csv, simulate_epoch, speedup_report, \
    train_step_sync
from .lowprec import LossScalerState
from .sgd_core import AdamState, ModelParams, SubBatchTensors, TrainConfig, forward, lr_at
from .sgd_core import checkpoint
from .synthetic import calibrated_corpus, measure, profile_shapes, toy_translation_corpus
from .timing import estimate_time, fit_timing_model, timing_histogram

logger = logging.getLogger("nmtscale")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
PATH_KEYS = ("corpus", "vocab", "measurements", "score_checkpoint", "clean_corpus", "noisy_corpus")


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _require(cfg: RunConfig, key: str) -> str:
    value = getattr(cfg, key)
    if not value:
        raise UsageError(f"this command needs {key}=PATH")
    return value


def _timing_model(cfg: RunConfig):
    rows = corpus_io.read_measurements(_require(cfg, "measurements"))
    if not rows:
        raise DataError(f"{cfg.measurements}: no measurements")
    return fit_timing_model(rows)


def _batches(policy: str, pairs, cfg: RunConfig, timing=None) -> list[SubBatch]:
    batches = make_batches(policy, pairs, max_tokens=cfg.max_tokens, shape_tolerance=cfg.shape_tolerance,
                           timing_model=timing, target_percentile=cfg.target_percentile)
    try:
        check_partition(pairs, batches)
    except AssertionError as e:
        raise InvariantViolation(f"{policy}: {e}") from None
    return batches


def _train_config(cfg: RunConfig, vocab_size: int) -> TrainConfig:
    return TrainConfig(vocab_size=vocab_size, embed_dim=cfg.embed_dim, num_layers=cfg.num_layers,
                       hidden_dim=cfg.hidden_dim, peak_lr=cfg.effective_lr_peak,
                       warmup_steps=cfg.warmup_steps, label_smoothing=cfg.label_smoothing)


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def eval_loss_per_token(params: ModelParams, batches, eps: float) -> float:
    loss = ntok = 0
    for b in batches:
        ls, nt, _ = forward(params, b, eps=eps)
        loss += ls
        ntok += nt
    return loss / ntok if ntok else 0.0


def step_stream(n_batches: int, per_step: int, rng: np.random.Generator):
    """Sub-batch indices for successive steps, reshuffling at each pass over the data."""
    pool: list[int] = []
    while True:
        while len(pool) < per_step:
            pool.extend(int(i) for i in rng.permutation(n_batches))
        take, pool = pool[:per_step], pool[per_step:]
        yield take


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig, out: Path) -> int:
    vocab = corpus_io.read_vocab(_require(cfg, "vocab"))
    pairs = corpus_io.encode(corpus_io.read_corpus(_require(cfg, "corpus")), vocab)
    if not pairs:
        raise DataError("empty corpus")
    timing = _timing_model(cfg) if cfg.batching_policy == "time_balanced" else None
    batches = _batches(cfg.batching_policy, pairs, cfg, timing)
    index = pairs_by_id(pairs)
    tensors = [SubBatchTensors.from_pairs(batch_pairs(b, index)) for b in batches]

    tcfg = _train_config(cfg, len(vocab))
    params = ModelParams.init(tcfg, seed=substream_seed(cfg.seed, "init"))
    adam = AdamState.zeros_like(params)
    scaler = LossScalerState(scale=cfg.init_scale) if cfg.fp16 else None
    W, c = cfg.workers, cfg.cumul
    stream = step_stream(len(tensors), W * c, substream(cfg.seed, "batching"))

    records, skipped = [], 0
    t_start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        take = next(stream)
        assignment = [[tensors[i] for i in take[w::W]] for w in range(W)]
        t0 = time.perf_counter()
        res = train_step_sync(params, assignment, scaler, adam, tcfg, fp16=cfg.fp16,
                              bucket_bytes=cfg.bucket_bytes)
        dt = time.perf_counter() - t0
        params, adam, scaler = res.params, res.adam, res.scaler
        st = res.stats
        skipped += not st["applied"]
        rec = {
            "step": step,
            "loss_per_token": st["loss_per_token"],
            "lr": st["lr"],
            "scale": st["scale"],
            "skipped": not st["applied"],
            "tokens": st["ntokens"],
            "updates": adam.t,
        }
        if st["scaler_event"] is not None:
            rec["scaler_event"] = st["scaler_event"]
        records.append(rec)
        # wall-clock rates are not reproducible, so they only go to the log
        logger.info("step %d loss/token %.4f tokens/s %.0f", step, rec["loss_per_token"],
                    st["ntokens"] / dt if dt > 0 else 0.0)

    (out / "metrics.jsonl").write_text(_jsonl(records), encoding="utf-8")
    checkpoint.save(out / "checkpoint.json", tcfg, params, adam, cfg.steps, scaler)
    summary = {
        "steps": cfg.steps,
        "updates_applied": adam.t,
        "skipped_steps": skipped,
        "final_scale": scaler.scale if scaler is not None else None,
        "num_sub_batches": len(batches),
        "final_eval_loss_per_token": eval_loss_per_token(params, tensors, tcfg.label_smoothing),
    }
    dump_json(summary, out / "summary.json")
    logger.info("trained %d steps in %.1fs", cfg.steps, time.perf_counter() - t_start)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _comm_for(cfg: RunConfig, ref_batches, timing, total_bytes: int) -> CommModel:
    """Network sized so one full all-reduce costs ``comm_ratio`` x the mean sub-batch time (at W=8)."""
    if cfg.comm_ratio == 0:
        return CommModel.ideal()
    mean_t = float(np.mean([estimate_time(timing, b) for b in ref_batches]))
    return CommModel.for_ratio(cfg.comm_ratio, mean_t, total_bytes, workers=8,
                               latency_per_flush=cfg.comm_latency)


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    timing = _timing_model(cfg)
    pairs = corpus_io.read_corpus(_require(cfg, "corpus"))
    if not pairs:
        raise DataError("empty corpus")
    layer_bytes = big_transformer_layer_bytes(2 if cfg.fp16 else 4)
    ref = _batches("token_budget", pairs, cfg)
    comm = _comm_for(cfg, ref, timing, sum(layer_bytes))
    grid_w = [int(v) for v in split_list(cfg.grid_workers)]
    grid_c = [int(v) for v in split_list(cfg.grid_cumul)]
    grid_o = [parse_bool(v) for v in split_list(cfg.grid_overlap)]
    policies = split_list(cfg.grid_policy)
    if not (grid_w and grid_c and grid_o and policies):
        raise UsageError("every grid_* key needs at least one value")

    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    traces = []
    walls = {}
    for policy in policies:
        batches = ref if policy == "token_budget" else _batches(policy, pairs, cfg, timing)
        for W in grid_w:
            for c in grid_c:
                for ov in grid_o:
                    tr = simulate_epoch(batches, timing, W, c, comm, ov, seed=substream_seed(cfg.seed, "jitter"),
                                        layer_bytes=layer_bytes, bucket_bytes=cfg.bucket_bytes,
                                        backward_fraction=cfg.backward_fraction, jitter=cfg.jitter,
                                        max_steps=cfg.steps, label={"policy": policy})
                    name = f"{policy}_W{W}_c{c}_overlap-{'on' if ov else 'off'}.jsonl"
                    (trace_dir / name).write_text(tr.to_jsonl(), encoding="utf-8")
                    traces.append(tr)
                    walls[(policy, W, c, ov)] = tr.wall_time
                    if W == 1 and tr.idle_fraction != 0:
                        raise InvariantViolation(f"single worker run has idle time ({tr.label()})")
    for (policy, W, c, ov), wall in walls.items():
        serial = walls.get((policy, W, c, False))
        if ov and serial is not None and wall > serial * (1 + 1e-12):
            raise InvariantViolation(f"overlap slower than serial for {policy} W={W} cumul={c}")
    rows = speedup_report(traces)
    (out / "report.csv").write_text(report_csv(rows), encoding="utf-8")
    sys.stdout.write(report_csv(rows))
    return EXIT_OK


def cmd_batch_stats(cfg: RunConfig, out: Path) -> int:
    timing = _timing_model(cfg)
    pairs = corpus_io.read_corpus(_require(cfg, "corpus"))
    summary = {}
    for policy in POLICIES:
        batches = _batches(policy, pairs, cfg, timing)
        st = timing_histogram(batches, timing, bins=cfg.bins)
        corpus_io.write_histogram(st.histogram_rows(), out / f"histogram_{policy}.csv")
        padded = sum(b.num_sentences * (b.max_src_len + b.max_tgt_len) for b in batches)
        real = sum(b.src_tokens_nopad + b.tgt_tokens_nopad for b in batches)
        summary[policy] = {**st.summary(), "num_sub_batches": len(batches),
                           "padding_fraction": 1 - real / padded if padded else 0.0}
    dump_json(summary, out / "summary.json")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_filter(cfg: RunConfig, out: Path) -> int:
    pairs = corpus_io.read_corpus(_require(cfg, "corpus"))
    fcfg = FilterConfig(cfg.max_length_ratio, cfg.max_len_words, cfg.drop_copies)
    kept, stats = basic_filter(pairs, fcfg)
    corpus_io.write_corpus(kept, out / "filtered.tsv")
    if cfg.score_checkpoint:
        vocab = corpus_io.read_vocab(_require(cfg, "vocab"))
        try:
            _, params, _, _, _ = checkpoint.load(cfg.score_checkpoint)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot load checkpoint {cfg.score_checkpoint}: {e}") from e
        scored = score_pairs(params, corpus_io.encode(kept, vocab))
        corpus_io.write_scores(scored, out / "scores.csv")
        if cfg.top_k:
            if cfg.top_k > len(scored):
                raise UsageError(f"top_k={cfg.top_k} but only {len(scored)} pairs survive filtering")
            index = pairs_by_id(kept)
            corpus_io.write_corpus([index[i] for i in select_top_k(scored, cfg.top_k)], out / "selected.tsv")
            stats["selected"] = cfg.top_k
    dump_json(stats, out / "filter_stats.json")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_mix(cfg: RunConfig, out: Path) -> int:
    clean = corpus_io.read_corpus(_require(cfg, "clean_corpus"))
    noisy = corpus_io.read_corpus(_require(cfg, "noisy_corpus"))
    if not clean or not noisy:
        raise DataError("both corpora must be non-empty")
    try:
        ratio = MixRatio.parse(cfg.mix_ratio)
    except ValueError as e:
        raise UsageError(f"mix_ratio must look like 1:4 ({e})") from None
    counts = {"clean": 0, "noisy": 0}
    with open(out / "mixed.tsv", "w", encoding="utf-8", newline="\n") as f:
        for src, p in mix_sampler(clean, noisy, ratio, substream_seed(cfg.seed, "mixing"), cfg.n_samples):
            counts[src] += 1
            f.write(corpus_io.format_pair(p) + "\n")
    stats = {"ratio": str(ratio), "n_samples": cfg.n_samples, **counts,
             "clean_fraction": counts["clean"] / cfg.n_samples if cfg.n_samples else 0.0}
    dump_json(stats, out / "mix_stats.json")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def lr_table(cfg: RunConfig) -> str:
    tcfg = TrainConfig(peak_lr=cfg.effective_lr_peak, warmup_steps=cfg.warmup_steps)
    return "step,lr\n" + "".join(f"{s},{lr_at(s, tcfg)!r}\n" for s in range(1, cfg.steps + 1))


def cmd_lr_schedule(cfg: RunConfig, out: Path) -> int:
    text = lr_table(cfg)
    (out / "lr_schedule.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args, out: Path) -> int:
    """Write a synthetic corpus (and vocabulary or measurements) to ``out``."""
    seed = args.seed
    if args.kind == "toy":
        pairs = toy_translation_corpus(args.pairs or 400, vocab_size=args.vocab_size, seed=seed)
        words = [f"w{i}" for i in range(1, args.vocab_size)]
        corpus_io.write_vocab(words, out / "vocab.txt")
        corpus_io.write_corpus(corpus_io.decode(pairs, corpus_io.read_vocab(out / "vocab.txt")),
                               out / "corpus.tsv")
    else:
        pairs = calibrated_corpus(args.pairs or 40000, seed=seed)
        corpus_io.write_corpus([replace(p, src=("x",) * len(p.src), tgt=("x",) * len(p.tgt)) for p in pairs],
                               out / "corpus.tsv")
        shapes = list(profile_shapes(make_batches("token_budget", pairs)))
        corpus_io.write_measurements(measure(shapes, seed=substream_seed(seed, "measure")),
                                     out / "measurements.csv")
    print(json.dumps({"kind": args.kind, "pairs": len(pairs), "out": str(out)}))
    return EXIT_OK


HELP = {
    "train": "train the toy model with W workers x cumul sub-batches per step",
    "simulate": "simulate steps over a (workers, cumul, overlap, policy) grid",
    "batch-stats": "estimated sub-batch time statistics for every batching policy",
    "filter": "rule-based corpus filter, optionally with model scoring and top-k",
    "mix": "sample a clean/noisy corpus mixture at a fixed ratio",
    "lr-schedule": "print the warmup / inverse-square-root learning rate",
}

COMMANDS = {
    "train": cmd_train,
    "simulate": cmd_simulate,
    "batch-stats": cmd_batch_stats,
    "filter": cmd_filter,
    "mix": cmd_mix,
    "lr-schedule": cmd_lr_schedule,
}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nmtscale", description="Scaled-up translation training experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        g = p.add_argument_group("config keys")
        for f in fields(RunConfig):
            opts = [f"--{f.name}"]
            if "_" in f.name:
                opts.append(f"--{f.name.replace('_', '-')}")
            g.add_argument(*opts, dest=f"key_{f.name}", default=None, metavar="V")
    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("kind", choices=("toy", "calibrated"))
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs", type=int, default=0, help="number of pairs (0: 400 toy, 40000 calibrated)")
    s.add_argument("--vocab-size", type=int, default=64, help="toy vocabulary size including <pad>")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    for f in fields(RunConfig):
        v = getattr(args, f"key_{f.name}")
        if v is not None:
            out[f.name] = v
    return out


def _absolute_paths(cfg: RunConfig) -> RunConfig:
    return replace(cfg, **{k: str(Path(getattr(cfg, k)).resolve()) for k in PATH_KEYS if getattr(cfg, k)})


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"nmtscale: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            return cmd_synth(args, out)
        cfg = _absolute_paths(load_config(args.config, _overrides(args)))
        write_config(cfg, out)
        return COMMANDS[args.command](cfg, out)
    except (UsageError, ConfigError) as e:
        print(f"nmtscale: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as e:
        print(f"nmtscale: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, ValueError, OSError) as e:
        print(f"nmtscale: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
