"""Command line interface.

Subcommands: gen-data (write a synthetic CSV), train (fit the classifier and
write a checkpoint plus JSONL metrics), reorder (learn locality-driven index
bijections), bench-lookup (count forward-path work with and without prefix
reuse), report (summarize metrics and checkpoints).

Exit codes: 0 success, 1 usage error, 2 unreadable or malformed data file,
3 numeric failure (non-finite loss, reuse/direct mismatch).

`--config FILE` (gen-data, train) reads `key=value` lines where keys are the
long flag names; flags given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time

import numpy as np

from . import data as dd
from . import model as md
from . import reorder as ro
from .lookup import OpCounters, forward_batch
from .tt_core import TtShape, factorize_dims, init_random, param_stats

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

METRIC_COUNTER_KEYS = ("slice_mults", "row_adds", "buffer_hits", "buffer_misses")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class _Parser(argparse.ArgumentParser):
    """argparse maps usage problems to exit status 2; remap them to 1."""

    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: error: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-joined integers, got {text!r}")


def build_parser():
    parser = _Parser(prog="ttemb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subparsers = {}

    p = subparsers["gen-data"] = sub.add_parser(
        "gen-data", help="write a synthetic detection dataset as CSV"
    )
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--samples", type=int, default=24800)
    p.add_argument("--dense", type=int, default=6)
    p.add_argument("--rows", type=_int_list, default=dd.DEFAULT_ROWS_PER_FIELD,
                   help="comma-joined rows per sparse field")
    p.add_argument("--zipf-s", type=float, default=1.05)
    p.add_argument("--attack-fraction", type=float, default=4800 / 24800)
    p.add_argument("--clusters", type=int, default=0,
                   help="plant per-sample co-occurrence groups")
    p.add_argument("--cluster-noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key=value defaults file")

    p = subparsers["train"] = sub.add_parser(
        "train", help="train the classifier, write checkpoint and metrics"
    )
    p.add_argument("--data", required=True, help="input CSV path")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", default=None, help="JSONL metrics path")
    p.add_argument("--rows", type=_int_list, default=None,
                   help="rows per sparse field; inferred from data if omitted")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--emb-dim", type=int, default=16)
    p.add_argument("--ranks", type=_int_list, default=(1, 8, 8, 1))
    p.add_argument("--tt-threshold", type=int, default=1000)
    p.add_argument("--bottom", type=_int_list, default=(64,),
                   help="bottom MLP hidden sizes")
    p.add_argument("--top", type=_int_list, default=(64, 32),
                   help="top MLP hidden sizes")
    p.add_argument("--loss", choices=("bce", "mse"), default="bce")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key=value defaults file")

    p = subparsers["reorder"] = sub.add_parser(
        "reorder", help="learn per-field locality bijections from a dataset"
    )
    p.add_argument("--data", required=True, help="input CSV path")
    p.add_argument("--out", required=True,
                   help="output prefix; writes <out>.f<k>.txt and <out>.report.txt")
    p.add_argument("--rows", type=_int_list, default=None)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--hot-ratio", type=float, default=0.05)
    p.add_argument("--emb-dim", type=int, default=16)
    p.add_argument("--ranks", type=_int_list, default=(1, 8, 8, 1))
    p.add_argument("--tt-threshold", type=int, default=1000)

    p = subparsers["bench-lookup"] = sub.add_parser(
        "bench-lookup", help="compare reuse vs direct lookup operation counts"
    )
    p.add_argument("--table-rows", type=int, default=4096)
    p.add_argument("--emb-dim", type=int, default=16)
    p.add_argument("--ranks", type=_int_list, default=(1, 8, 8, 1))
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--n-batches", type=int, default=10)
    p.add_argument("--zipf-s", type=float, default=1.05)
    p.add_argument("--indices", type=_int_list, default=None,
                   help="run one explicit flat batch instead of sampling")
    p.add_argument("--seed", type=int, default=0)

    p = subparsers["report"] = sub.add_parser(
        "report", help="summarize a metrics stream and optionally a checkpoint"
    )
    p.add_argument("--metrics", default=None, help="JSONL metrics path")
    p.add_argument("--checkpoint", default=None, help="checkpoint path")

    return parser, subparsers


# ------------------------------------------------------------- config file


def _read_config_pairs(path) -> list[tuple[str, str]]:
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise CliError(EXIT_DATA, f"cannot read config: {err}")
    pairs = []
    for no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(EXIT_DATA, f"{path}:{no}: expected key=value")
        key, value = stripped.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _flag_given(argv, option_strings) -> bool:
    return any(
        tok == opt or tok.startswith(opt + "=")
        for tok in argv
        for opt in option_strings
    )


def apply_config(args, argv, subparser) -> None:
    """Fill parsed args with config-file values; explicit flags win."""
    if not getattr(args, "config", None):
        return
    actions = {
        a.dest: a
        for a in subparser._actions
        if a.option_strings and a.dest not in ("help", "config")
    }
    for key, raw in _read_config_pairs(args.config):
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise CliError(EXIT_USAGE, f"unknown config key {key!r}")
        if _flag_given(argv, action.option_strings):
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = raw.lower()
            if low not in ("0", "1", "true", "false", "yes", "no"):
                raise CliError(EXIT_USAGE, f"config key {key!r}: not a boolean")
            value = low in ("1", "true", "yes")
        elif action.type is not None:
            try:
                value = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as err:
                raise CliError(EXIT_USAGE, f"config key {key!r}: {err}")
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise CliError(EXIT_USAGE, f"config key {key!r}: invalid choice {value!r}")
        setattr(args, dest, value)


# ------------------------------------------------------------- subcommands


def _load_dataset(path, rows) -> dd.Dataset:
    try:
        return dd.read_csv(path, rows_per_field=rows or None)
    except OSError as err:
        raise CliError(EXIT_DATA, f"cannot read dataset: {err}")
    except ValueError as err:
        raise CliError(EXIT_DATA, str(err))


def cmd_gen_data(args) -> int:
    try:
        spec = dd.DatasetSpec(
            n_samples=args.samples,
            n_dense=args.dense,
            rows_per_field=tuple(args.rows),
            zipf_s=args.zipf_s,
            attack_fraction=args.attack_fraction,
            seed=args.seed,
            cooccur_clusters=args.clusters,
            cooccur_noise=args.cluster_noise,
        )
        ds = dd.gen_synthetic(spec)
    except ValueError as err:
        raise CliError(EXIT_USAGE, str(err))
    try:
        dd.write_csv(ds, args.out)
    except OSError as err:
        raise CliError(EXIT_DATA, f"cannot write {args.out}: {err}")
    positives = int(ds.labels.sum())
    print(
        f"wrote {ds.n} samples ({positives} positive) with {ds.n_dense} dense "
        f"and {ds.n_sparse} sparse fields to {args.out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_dataset(args.data, args.rows)
    try:
        config = md.ModelConfig(
            n_dense=ds.n_dense,
            rows_per_field=ds.rows_per_field,
            emb_dim=args.emb_dim,
            ranks=tuple(args.ranks),
            tt_threshold=args.tt_threshold,
            bottom_sizes=tuple(args.bottom),
            top_sizes=tuple(args.top),
            loss=args.loss,
            seed=args.seed,
        )
        model = md.DlrmModel(config)
        train_ds, test_ds = dd.train_test_split(ds, args.train_frac)
    except ValueError as err:
        raise CliError(EXIT_USAGE, str(err))
    stats = dd.dense_stats(train_ds)
    train_n = dd.apply_normalization(train_ds, stats)
    test_n = dd.apply_normalization(test_ds, stats)

    if args.lr < 0 or not 0.0 <= args.momentum < 1.0 or args.batch_size < 1:
        raise CliError(EXIT_USAGE,
                       "need lr >= 0, 0 <= momentum < 1, batch-size >= 1")
    counters = OpCounters()
    records = []
    step = 0
    for epoch in range(args.epochs):
        t0 = time.perf_counter()
        loss_sum = 0.0
        for sub in dd.batch_iter(train_n, args.batch_size,
                                 shuffle_seed=args.seed * 1009 + epoch):
            try:
                loss = model.train_step(sub, args.lr, args.momentum, counters)
            except ValueError as err:
                # overflowing parameters trip the kernels' finiteness checks
                raise CliError(EXIT_NUMERIC, f"step {step}: {err}")
            if not math.isfinite(loss):
                raise CliError(EXIT_NUMERIC,
                               f"non-finite training loss at step {step}")
            loss_sum += loss * sub.n
            step += 1
        elapsed = max(time.perf_counter() - t0, 1e-9)
        held = model.evaluate(test_n, batch_size=max(args.batch_size, 512))
        record = {
            "step": step,
            "epoch": epoch,
            "loss": held["loss"],
            "train_loss": loss_sum / train_n.n,
            "accuracy": held["accuracy"],
            "precision": held["precision"],
            "recall": held["recall"],
            "f1": held["f1"],
            "samples_per_sec": train_n.n / elapsed,
        }
        record.update(counters.as_dict())
        records.append(record)
        print(
            f"epoch {epoch} step {step} loss {record['loss']:.6f} "
            f"f1 {record['f1']:.4f} accuracy {record['accuracy']:.4f}"
        )

    try:
        md.save_checkpoint(model, args.out)
        dd.save_stats(stats, f"{args.out}.stats.txt")
        if args.metrics:
            with open(args.metrics, "w", encoding="ascii", newline="\n") as fh:
                for record in records:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as err:
        raise CliError(EXIT_DATA, f"cannot write outputs: {err}")
    print(f"saved checkpoint to {args.out}")
    return EXIT_OK


def cmd_reorder(args) -> int:
    ds = _load_dataset(args.data, args.rows)
    if not 0.0 <= args.hot_ratio <= 1.0 or args.batch_size < 1:
        raise CliError(EXIT_USAGE, "need 0 <= hot-ratio <= 1 and batch-size >= 1")
    d = len(tuple(args.ranks)) - 1
    report = []
    for f, rows in enumerate(ds.rows_per_field):
        if rows < args.tt_threshold:
            report.append(f"field {f} rows {rows} below threshold, skipped")
            continue
        try:
            m, _ = factorize_dims(rows, args.emb_dim, d)
        except ValueError as err:
            raise CliError(EXIT_USAGE, f"field {f}: {err}")
        batches = [
            [i for bag in sub.bags[f] for i in bag]
            for sub in dd.batch_iter(ds, args.batch_size)
        ]
        freq = ro.count_frequencies(batches, rows)
        graph, hot_rows = ro.build_index_graph(batches, freq, args.hot_ratio)
        if graph.n_nodes == 0:
            assignment = ro.CommunityAssignment(
                community_of=np.empty(0, dtype=np.int64), n_communities=0, q=0.0
            )
        else:
            assignment = ro.detect_communities(graph)
        bijection = ro.build_bijection(assignment, hot_rows, freq, rows)
        before = ro.mean_distinct_prefixes(batches, m[-1])
        after = ro.mean_distinct_prefixes(
            ro.apply_bijection(bijection, batches), m[-1]
        )
        path = f"{args.out}.f{f}.txt"
        try:
            ro.save_bijection(bijection, path)
        except OSError as err:
            raise CliError(EXIT_DATA, f"cannot write {path}: {err}")
        report.append(
            f"field {f} rows {rows} q {assignment.q:.6f} "
            f"communities {assignment.n_communities} "
            f"prefixes_before {before:.4f} prefixes_after {after:.4f}"
        )
    try:
        with open(f"{args.out}.report.txt", "w", encoding="ascii") as fh:
            fh.write("\n".join(report) + "\n")
    except OSError as err:
        raise CliError(EXIT_DATA, f"cannot write report: {err}")
    for line in report:
        print(line)
    return EXIT_OK


def cmd_bench_lookup(args) -> int:
    if args.batch < 1 or args.n_batches < 1 or args.table_rows < 2:
        raise CliError(EXIT_USAGE, "need batch, n-batches >= 1 and table-rows >= 2")
    try:
        m, n = factorize_dims(args.table_rows, args.emb_dim, len(args.ranks) - 1)
        shape = TtShape(m=m, n=n, ranks=tuple(args.ranks))
    except ValueError as err:
        raise CliError(EXIT_USAGE, str(err))
    table = init_random(shape, seed=args.seed, dtype=np.float64)
    if args.indices is not None:
        if not args.indices:
            raise CliError(EXIT_USAGE, "--indices needs at least one index")
        batches = [list(args.indices)]
    else:
        rng = np.random.default_rng(args.seed + 1)
        probs = dd.zipf_probs(shape.rows, args.zipf_s)
        batches = [
            rng.choice(shape.rows, size=args.batch, p=probs).tolist()
            for _ in range(args.n_batches)
        ]

    reuse = OpCounters()
    direct = OpCounters()
    max_rel = 0.0
    for flat in batches:
        try:
            out_r, c_r = forward_batch(table, [flat], use_reuse=True)
            out_d, c_d = forward_batch(table, [flat], use_reuse=False)
        except ValueError as err:
            raise CliError(EXIT_USAGE, str(err))
        reuse.add(c_r)
        direct.add(c_d)
        scale = max(float(np.abs(out_d).max()), 1e-30)
        max_rel = max(max_rel, float(np.abs(out_r - out_d).max()) / scale)
    if max_rel > 1e-9:
        raise CliError(
            EXIT_NUMERIC,
            f"reuse and direct lookups disagree (relative error {max_rel:.3e})",
        )

    pstats = param_stats(shape, args.table_rows, args.emb_dim)
    result = {
        "table_rows": args.table_rows,
        "m": list(shape.m),
        "indices": sum(len(b) for b in batches),
        "slice_mults_reuse": reuse.slice_mults,
        "slice_mults_direct": direct.slice_mults,
        "buffer_hits": reuse.buffer_hits,
        "buffer_misses": reuse.buffer_misses,
        "row_adds_reuse": reuse.row_adds,
        "row_adds_direct": direct.row_adds,
        "max_rel_diff": max_rel,
        "tt_params": pstats["tt_params"],
        "dense_params": pstats["dense_params"],
        "param_ratio": pstats["ratio"],
    }
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.metrics and not args.checkpoint:
        raise CliError(EXIT_USAGE, "report needs --metrics and/or --checkpoint")
    if args.metrics:
        try:
            with open(args.metrics, "r", encoding="ascii") as fh:
                lines = [ln for ln in fh.read().splitlines() if ln.strip()]
            records = [json.loads(ln) for ln in lines]
        except OSError as err:
            raise CliError(EXIT_DATA, f"cannot read metrics: {err}")
        except json.JSONDecodeError as err:
            raise CliError(EXIT_DATA, f"{args.metrics}: malformed JSONL: {err}")
        if not records:
            raise CliError(EXIT_DATA, f"{args.metrics}: no records")
        last = records[-1]
        best_f1 = max(float(r.get("f1", 0.0)) for r in records)
        print(f"metrics records {len(records)}")
        print(
            f"final epoch {last.get('epoch')} step {last.get('step')} "
            f"loss {float(last.get('loss', float('nan'))):.6f} "
            f"f1 {float(last.get('f1', 0.0)):.4f}"
        )
        print(f"best f1 {best_f1:.4f}")
        totals = " ".join(
            f"{key} {int(last.get(key, 0))}" for key in METRIC_COUNTER_KEYS
        )
        print(f"counters {totals}")
    if args.checkpoint:
        try:
            records = md.read_checkpoint_records(args.checkpoint)
        except OSError as err:
            raise CliError(EXIT_DATA, f"cannot read checkpoint: {err}")
        except ValueError as err:
            raise CliError(EXIT_DATA, str(err))
        names = dict(records)
        if "config" not in names:
            raise CliError(EXIT_DATA, "checkpoint has no config record")
        doc = json.loads(names["config"].decode("ascii"))
        print(
            f"checkpoint fields {len(doc['rows_per_field'])} "
            f"emb_dim {doc['emb_dim']} loss {doc['loss']} seed {doc['seed']}"
        )
        d = len(doc["ranks"]) - 1
        for f, rows in enumerate(doc["rows_per_field"]):
            if rows >= doc["tt_threshold"]:
                m, n = factorize_dims(rows, doc["emb_dim"], d)
                shape = TtShape(m=m, n=n, ranks=tuple(doc["ranks"]))
                st = param_stats(shape, rows, doc["emb_dim"])
                print(
                    f"field {f} tt rows {rows} m {','.join(map(str, m))} "
                    f"params {st['tt_params']} ratio {st['ratio']:.2f}"
                )
            else:
                print(f"field {f} dense rows {rows} params {rows * doc['emb_dim']}")
        total = sum(len(payload) for _, payload in records)
        print(f"records {len(records)} bytes {total + len(md.CKPT_MAGIC)}")
    return EXIT_OK


DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "reorder": cmd_reorder,
    "bench-lookup": cmd_bench_lookup,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in ("gen-data", "train"):
            apply_config(args, argv, subparsers[args.command])
        return DISPATCH[args.command](args)
    except CliError as err:
        print(err.message, file=sys.stderr)
        return err.code
    except SystemExit as err:  # argparse --help
        return int(err.code or 0)


def entry() -> None:
    sys.exit(main())
