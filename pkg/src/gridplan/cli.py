"""Command line front end: ``gridplan {plan,sweep,simulate,crossover,reconcile}``.

Exit codes: 0 success, 1 input error, 2 infeasible query or failed check.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys

import numpy as np

from . import exec15d, planner
from ._oracles import central_difference, conv_oracle
from .costmodel import (
    CostModelError,
    HardwareModel,
    cost_batch_parallel,
    crossover_batch,
    load_hardware,
)
from .exec15d import DivisibilityError
from .netspec import NetSpecError, alexnet_preset, load_network

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_FAIL = 2

# commonly quoted crossover for AlexNet's 3x3 layers on 13x13x384 activations
CLAIMED_CROSSOVER = 12
COMMON_BATCHES = (1, 2, 4, 8, 16, 32, 64, 128, 256)

ORACLE_TOL = 1e-10
FD_TOL = 1e-5


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


def _int_list(text: str) -> list:
    if text is None or not text.strip():
        return []
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text: str) -> tuple:
    try:
        r, c = text.lower().split("x")
        p_r, p_c = int(r), int(c)
    except ValueError:
        raise InputError(f"--grid must look like RxC, got {text!r}") from None
    if p_r < 1 or p_c < 1:
        raise InputError("--grid dimensions must be >= 1")
    return p_r, p_c


def _load_net(args):
    if args.preset:
        return alexnet_preset()
    if not args.net:
        raise InputError("one of --net FILE or --preset alexnet is required")
    try:
        return load_network(args.net)
    except FileNotFoundError:
        raise InputError(f"network file not found: {args.net}") from None
    except NetSpecError as exc:
        raise InputError(f"{args.net}: {exc}") from None


def _load_hw(args) -> HardwareModel:
    if args.hw:
        try:
            return load_hardware(args.hw)
        except FileNotFoundError:
            raise InputError(f"hardware file not found: {args.hw}") from None
        except CostModelError as exc:
            raise InputError(f"{args.hw}: {exc}") from None
    return HardwareModel()


def _write(text: str, path):
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _add_model_flags(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--net", help="network JSON document")
    src.add_argument("--preset", choices=["alexnet"])
    hw = p.add_mutually_exclusive_group()
    hw.add_argument("--hw", help="hardware JSON document")
    hw.add_argument("--default", action="store_true", help="alpha=2us, 6 GB/s, 4-byte words")
    p.add_argument("--policy", default="conv-batch-fc-model",
                   choices=[x.value for x in planner.Policy])
    p.add_argument("--overlap", action="store_true", help="overlap backprop all-reduces with compute")
    p.add_argument("--max-bpp", type=int, default=None, help="cap on per-process batch B/p_c")
    p.add_argument("--out", help="write CSV here as well")


def _print_table(results, out=sys.stdout):
    out.write(f"{'rank':>4} {'grid':>9} {'t_comm_s':>12} {'t_comp_s':>12} {'t_total_s':>12} {'speedup':>8}\n")
    for i, r in enumerate(results, 1):
        out.write(
            f"{i:>4} {r.grid.label():>9} {r.t_comm:>12.5g} {r.t_comp:>12.5g} "
            f"{r.t_total:>12.5g} {r.speedup_vs_pure_batch:>8.3f}\n"
        )


def cmd_plan(args) -> int:
    net, hw = _load_net(args), _load_hw(args)
    try:
        query = planner.PlanQuery(
            net, hw, args.procs, args.batch, planner.Policy(args.policy),
            planner.Overlap.BACKPROP if args.overlap else planner.Overlap.NONE,
            args.max_bpp,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        results = planner.plan(query)
    except planner.NoFeasiblePlan as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _print_table(results)
    best = results[0]
    ref_comm = _pure_batch_comm(net, hw, args.procs, args.batch)
    if best.t_comm > 0:
        print(f"best grid {best.grid.label()}: communication speedup "
              f"{ref_comm / best.t_comm:.2f}x vs 1x{args.procs}")
    _write(planner.results_to_csv(results), args.out)
    return EXIT_OK


def _pure_batch_comm(net, hw, P, B) -> float:
    return math.ceil(net.sample_count / B) * cost_batch_parallel(net, P, hw).to_seconds(hw)


def cmd_sweep(args) -> int:
    net, hw = _load_net(args), _load_hw(args)
    procs = _int_list(args.procs_list)
    policy = planner.Policy(args.policy)
    overlap = planner.Overlap.BACKPROP if args.overlap else planner.Overlap.NONE
    if any(p < 1 for p in procs):
        raise InputError("--procs-list entries must be >= 1")
    try:
        if args.mode == "weak":
            batches = _int_list(args.batch_list)
            if not batches:
                raise InputError("weak sweep needs a non-empty --batch-list")
            if len(batches) != len(procs):
                raise InputError("--batch-list and --procs-list must have equal length")
            table = planner.sweep_weak(net, hw, procs, batches, policy, overlap, args.max_bpp)
        else:
            if args.batch is None or args.batch < 1:
                raise InputError(f"{args.mode} sweep needs --batch >= 1")
            if args.mode == "strong":
                table = planner.sweep_strong(net, hw, args.batch, procs, policy, overlap, args.max_bpp)
            else:
                table = planner.sweep_beyond_batch(net, hw, args.batch, procs, policy, overlap)
    except planner.NoFeasiblePlan as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    text = planner.sweep_to_csv(table)
    sys.stdout.write(text)
    _write(text, args.out)
    return EXIT_OK


def _rel(a, b) -> float:
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom > 0 else 1.0))


def _simulate(args):
    p_r, p_c = _grid(args.grid)
    widths = _int_list(args.layers)
    if len(widths) < 2:
        raise InputError("--layers needs at least two widths, e.g. 8,6")
    if args.batch < 1:
        raise InputError("--batch must be >= 1")
    try:
        run = exec15d.run_fc_chain(widths, p_r, p_c, args.batch, args.seed)
    except DivisibilityError as exc:
        raise InputError(f"divisibility: {exc}") from None
    loss, grads, out = exec15d.fc_oracle(run.weights, run.inputs, run.targets)
    err = max([_rel(run.outputs, out)] + [_rel(g, o) for g, o in zip(run.grads, grads)])
    report = exec15d.reconcile_fc_run(run)
    conv_run = None
    if args.conv:
        conv_run = _conv_run(args.conv, p_r, p_c, args.batch, args.seed)
    return run, err, report, conv_run


def _conv_run(text, p_r, p_c, batch, seed):
    try:
        h, w, c, k, out = _int_list(text)
    except ValueError:
        raise InputError("--conv must be H,W,C,K,OUT") from None
    try:
        return exec15d.run_domain_conv((batch, c, h, w), out, k, p_r, p_c, seed)
    except DivisibilityError as exc:
        raise InputError(f"divisibility: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _conv_error(run) -> float:
    y, dx, dw = conv_oracle(run.images, run.kernel, run.dy)
    return max(_rel(run.y, y), _rel(run.dx, dx), _rel(run.dw, dw))


def cmd_simulate(args) -> int:
    run, err, report, conv_run = _simulate(args)
    ok = err < ORACLE_TOL and report.passed
    print(f"grid {run.fabric.p_r}x{run.fabric.p_c}  layers {','.join(map(str, run.widths))}  "
          f"batch {run.batch}  seed {args.seed}")
    print(f"max relative error vs sequential oracle: {err:.3e}")
    sys.stdout.write(report.to_text())
    if conv_run is not None:
        cerr = _conv_error(conv_run)
        creport = exec15d.reconcile_conv_run(conv_run)
        print(f"domain conv max relative error: {cerr:.3e}")
        sys.stdout.write(creport.to_text())
        ok = ok and cerr < ORACLE_TOL and creport.passed
    if args.check:
        fd = _fd_check(run)
        print(f"finite-difference gradient relative error: {fd:.3e}")
        ok = ok and fd < FD_TOL
    if args.ledger_out:
        _write(run.fabric.ledger.to_csv(), args.ledger_out)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def _fd_check(run) -> float:
    def loss_of(ws):
        fab = exec15d.Fabric(run.fabric.p_r, run.fabric.p_c)
        return exec15d.fc_loss_and_grads(fab, ws, run.inputs, run.targets, need_grads=False)[0]

    fd = central_difference(loss_of, run.weights)
    num = np.sqrt(sum(np.sum((g - f) ** 2) for g, f in zip(run.grads, fd)))
    den = np.sqrt(sum(np.sum(f ** 2) for f in fd))
    return float(num / den)


def cmd_reconcile(args) -> int:
    run, _err, report, conv_run = _simulate(args)
    text = report.to_text()
    csv_text = report.to_csv()
    ok = report.passed
    if conv_run is not None:
        creport = exec15d.reconcile_conv_run(conv_run)
        text += creport.to_text()
        csv_text += "".join(creport.to_csv().splitlines(keepends=True)[1:])
        ok = ok and creport.passed
    sys.stdout.write(text)
    _write(csv_text, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_crossover(args) -> int:
    net = _load_net(args)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "kh", "kw", "x_c", "y_h", "y_w", "b_star", "model_wins_at", "claimed"])
    for i, dims in enumerate(net.dims):
        if not dims.is_conv:
            continue
        b_star = crossover_batch(dims)
        wins = [b for b in COMMON_BATCHES if b < b_star]
        claim = ""
        if (dims.kernel_h, dims.kernel_w, dims.x_c, dims.y_h, dims.y_w) == (3, 3, 384, 13, 13):
            claim = f"B<={CLAIMED_CROSSOVER}"
        writer.writerow([i, dims.kernel_h, dims.kernel_w, dims.x_c, dims.y_h, dims.y_w,
                         f"{b_star:.4f}", " ".join(map(str, wins)), claim])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="rank process grids for one (P, B)")
    _add_model_flags(p)
    p.add_argument("--procs", type=int, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sweep", help="scaling sweeps as CSV")
    _add_model_flags(p)
    p.add_argument("--mode", choices=["strong", "weak", "beyond-batch"], default="strong")
    p.add_argument("--procs-list", required=True, help="e.g. 8,32,128,512")
    p.add_argument("--batch", type=int)
    p.add_argument("--batch-list", help="weak mode: one batch size per process count")
    p.set_defaults(func=cmd_sweep)

    for name, func, helptext in (
        ("simulate", cmd_simulate, "run the distributed products and check them"),
        ("reconcile", cmd_reconcile, "compare simulated traffic with the cost model"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--layers", required=True, help="FC widths, e.g. 8,6,4")
        p.add_argument("--grid", default="1x1", help="RxC process grid")
        p.add_argument("--batch", type=int, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--conv", help="also run a domain-parallel conv layer: H,W,C,K,OUT")
        if name == "simulate":
            p.add_argument("--check", action="store_true", help="add a finite-difference gradient check")
            p.add_argument("--ledger-out", help="write the traffic ledger CSV here")
        else:
            p.add_argument("--out", help="write the reconcile report CSV here")
        p.set_defaults(func=func)

    p = sub.add_parser("crossover", help="batch size where batch beats model parallelism, per conv layer")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--net")
    src.add_argument("--preset", choices=["alexnet"])
    p.set_defaults(func=cmd_crossover)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, NetSpecError, CostModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
