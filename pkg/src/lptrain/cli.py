"""Command-line front end.

Subcommands: ``formats`` (inspect the built-in number formats), ``assign``
(print a per-tensor precision plan), ``train`` (one run), ``sweep``
(ratio sweep to CSV), and ``reduce`` (knapsack-to-precision reduction
report).  Configuration comes from a flat ``key = value`` file and/or
repeated ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Optional, Sequence

from .assign import HI_16, LO_BWD_8, LO_FWD_8, low_precision_ratio
from .experiments import (
    apply_overrides,
    build_scheme,
    config_from_mapping,
    load_config_file,
    run_single,
    run_sweep,
    write_epoch_csv,
    write_rows_csv,
    write_summary_json,
)
from .fpnum import FP32, FpFormat, enumerate_values
from .graph import build_graph, group_tensors
from .reduction import (
    KnapsackInstance,
    build_instance,
    closed_form_accuracy,
    extract_selection,
    knapsack_bruteforce,
    simulate_assignment,
    solve_tradeoff_bruteforce,
)

NAMED_FORMATS = (
    ("fp32", FP32),
    ("hi16", HI_16),
    ("lo8_fwd", LO_FWD_8),
    ("lo8_bwd", LO_BWD_8),
)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry (repeatable, wins over the file)",
    )


def _load_config(args: argparse.Namespace):
    kv = load_config_file(args.config) if args.config else {}
    kv = apply_overrides(kv, args.overrides)
    return config_from_mapping(kv)


def _parse_format(text: str) -> FpFormat:
    for name, fmt in NAMED_FORMATS:
        if text == name:
            return fmt
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(
            f"format must be a name ({', '.join(n for n, _ in NAMED_FORMATS)}) "
            f"or 'exp_bits,man_bits,bias_offset', got {text!r}"
        )
    return FpFormat(int(parts[0]), int(parts[1]), int(parts[2]))


def _cmd_formats(args: argparse.Namespace) -> int:
    rows = list(NAMED_FORMATS)
    if args.fmt:
        rows.append((args.fmt, _parse_format(args.fmt)))
    writer = csv.writer(sys.stdout)
    writer.writerow(
        ["name", "layout", "bits", "max_magnitude", "min_subnormal", "values"]
    )
    for name, fmt in rows:
        count = "" if fmt.bitwidth > 16 else str(len(enumerate_values(fmt)))
        writer.writerow(
            [name, str(fmt), fmt.bitwidth, repr(fmt.max_magnitude), repr(fmt.min_subnormal), count]
        )
    return 0


def _cmd_assign(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    g = build_graph(cfg.layers, cfg.input_shape)
    _, assignment, _, _ = build_scheme(g, cfg.scheme)
    group_of = {}
    for grp in group_tensors(g):
        for t in grp.members:
            group_of[t] = grp.index
    writer = csv.writer(sys.stdout)
    writer.writerow(["tensor", "kind", "size", "group", "level"])
    for t in g.tensors.values():
        writer.writerow([t.id, t.kind, t.size, group_of[t.id], assignment.level_of[t.id]])
    print(f"# low_precision_ratio={low_precision_ratio(g, assignment)!r}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    row, result = run_single(cfg, run_index=args.run_index)
    writer = csv.writer(sys.stdout)
    writer.writerow(
        [
            "epoch",
            "train_loss",
            "eval_accuracy",
            "eval_accuracy_fp32",
            "low_ratio",
            "loss_scale_end",
            "promotions",
            "skipped_steps",
        ]
    )
    for rec in result.records:
        writer.writerow(
            [
                rec.epoch,
                repr(rec.train_loss),
                repr(rec.eval_accuracy),
                repr(rec.eval_accuracy_fp32),
                repr(rec.low_ratio),
                repr(rec.loss_scale_end),
                rec.promotions,
                rec.skipped_steps,
            ]
        )
    print(
        f"# scheme={row.scheme} r={row.r!r} seed={row.seed} "
        f"mean_low_ratio={row.mean_low_ratio!r} best_eval_accuracy={row.best_eval_accuracy!r}"
    )
    out_dir = args.out or cfg.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_epoch_csv(result, os.path.join(out_dir, "epochs.csv"))
        write_summary_json(row, result, os.path.join(out_dir, "summary.json"))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    rows = run_sweep(cfg)
    out_dir = args.out or cfg.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "tradeoff.csv")
        write_rows_csv(rows, path)
        print(f"wrote {len(rows)} rows to {path}")
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(
            ["scheme", "r", "run_index", "seed", "mean_low_ratio", "best_eval_accuracy", "flagged"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.scheme,
                    repr(r.r),
                    r.run_index,
                    r.seed,
                    "" if r.mean_low_ratio is None else repr(r.mean_low_ratio),
                    "" if r.best_eval_accuracy is None else repr(r.best_eval_accuracy),
                    "1" if r.flagged else "0",
                ]
            )
    flagged = sum(1 for r in rows if r.flagged)
    if flagged:
        print(f"# {flagged} flagged rows", file=sys.stderr)
    return 0


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _cmd_reduce(args: argparse.Namespace) -> int:
    inst = KnapsackInstance(_csv_ints(args.weights), _csv_ints(args.profits), args.capacity)
    ri = build_instance(inst, loss_exp=args.loss_exp, lr_exp=args.lr_exp)
    print(f"items={inst.item_count} weights={inst.weights} profits={inst.profits} capacity={inst.capacity}")
    print(f"fmt_lo={ri.fmt_lo} ({ri.fmt_lo.bitwidth} bits)  fmt_hi={ri.fmt_hi} ({ri.fmt_hi.bitwidth} bits)")
    print(f"loss_scale=2^-{ri.loss_exp}  learning_rate=2^-{ri.lr_exp}")
    print("branch_inputs=" + " ".join(repr(v) for v in ri.branch_inputs))
    print(f"target={ri.target!r}")
    print(
        f"tensors={len(ri.tensor_order)}  min_low_elements={ri.min_low_elements}"
        f"  min_low_ratio={ri.min_low_ratio!r}"
    )
    alpha_ks, profit_ks = knapsack_bruteforce(inst)
    assignment, acc = solve_tradeoff_bruteforce(ri)
    alpha_tr = extract_selection(ri, assignment)
    profit_tr = sum(a * p for a, p in zip(alpha_tr, inst.profits))
    weight_tr = sum(a * w for a, w in zip(alpha_tr, inst.weights))
    print(f"knapsack_optimum={alpha_ks} profit={profit_ks}")
    print(f"tradeoff_optimum={alpha_tr} profit={profit_tr} carried_weight={weight_tr}")
    print(f"best_accuracy={acc!r}")
    closed = closed_form_accuracy(ri, alpha_tr)
    simulated = simulate_assignment(ri, assignment)
    print(f"closed_form={closed!r} simulated={simulated!r} agree={closed == acc == simulated}")
    ok = weight_tr <= inst.capacity and profit_tr == profit_ks
    print("verdict: " + ("selection matches the knapsack optimum" if ok else "MISMATCH"))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lptrain",
        description="Mixed-precision training simulator with per-tensor formats.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("formats", help="show the built-in number formats")
    p.add_argument("--fmt", help="also show 'exp_bits,man_bits,bias_offset'")
    p.set_defaults(fn=_cmd_formats)

    p = sub.add_parser("assign", help="print the per-tensor precision plan")
    _add_config_args(p)
    p.set_defaults(fn=_cmd_assign)

    p = sub.add_parser("train", help="train once and print per-epoch stats")
    _add_config_args(p)
    p.add_argument("--run-index", type=int, default=0, help="repeat index added to the seed")
    p.add_argument("--out", help="directory for epochs.csv and summary.json")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sweep", help="sweep the configured scheme over ratios")
    _add_config_args(p)
    p.add_argument("--out", help="directory for tradeoff.csv")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("reduce", help="solve a knapsack instance through precision assignment")
    p.add_argument("--weights", required=True, help="comma-separated item weights")
    p.add_argument("--profits", required=True, help="comma-separated item profits")
    p.add_argument("--capacity", type=int, required=True)
    p.add_argument("--loss-exp", type=int, default=None, help="fixed loss-scale exponent k")
    p.add_argument("--lr-exp", type=int, default=1, help="learning-rate exponent l")
    p.set_defaults(fn=_cmd_reduce)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
