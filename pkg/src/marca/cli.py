"""Command-line harness: ``marca <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from .approx import ExpParams, calibrate_exp_bias, mean_relative_error
from .compiler import LowerFlags, PlanningError, lower, plan_json
from .core import (
    PRESETS,
    MambaConfig,
    NumericError,
    Nonlinearity,
    Reduction,
    load_config,
    load_tensor,
    make_input,
    make_weights,
    mamba_model_ref,
    save_tensor,
    tiny_config,
)
from .engine import MachineConfig
from .isa import AssemblyError, EncodingError, Program, assemble, disassemble
from .report import build_report, compare, dumps
from .simulator import format_trace, simulate

DEFAULT_SWEEP = (16, 64, 256, 1024, 2048)


class CliError(RuntimeError):
    pass


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", type=Path, help="MambaConfig JSON file")
    g.add_argument("--preset", choices=sorted(PRESETS), help="model size preset")
    p.add_argument("--scale", type=int, default=1, help="divide preset widths by this factor (desk-scale proxy)")
    p.add_argument("--layers", type=int, default=None, help="override the preset layer count")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


def _add_flag_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--intra-bm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--inter-bm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--max-instructions", type=int, default=10**7)


def _config(args) -> MambaConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.preset is not None:
        cfg = MambaConfig.from_preset(args.preset, seq_len=args.seq_len or 16, scale=args.scale,
                                      n_layers=args.layers)
    else:
        cfg = tiny_config()
    if args.seq_len is not None:
        cfg = cfg.with_seq_len(args.seq_len)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _lower(cfg: MambaConfig, args):
    return lower(cfg, LowerFlags(args.intra_bm, args.inter_bm), max_instructions=args.max_instructions)


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


# ---------------------------------------------------------------------------


def cmd_calibrate_exp(args) -> int:
    params = calibrate_exp_bias()
    doc = {"params": params.to_dict(),
           "mean_rel_error_uncalibrated": mean_relative_error(ExpParams()),
           "mean_rel_error_calibrated": mean_relative_error(params)}
    _emit(json.dumps(doc, indent=1, sort_keys=True) + "\n", args.out)
    return 0


def cmd_assemble(args) -> int:
    prog = assemble(args.source.read_text())
    if args.out is None:
        raise CliError("assemble needs --out")
    prog.save(args.out)
    print(f"{len(prog)} instructions -> {args.out}")
    return 0


def cmd_disassemble(args) -> int:
    _emit(disassemble(Program.load(args.program), annotate=args.annotate), args.out)
    return 0


def cmd_lower(args) -> int:
    cfg = _config(args)
    low = _lower(cfg, args)
    if args.out is None:
        sys.stdout.write(low.plan.summary())
        return 0
    args.out.mkdir(parents=True, exist_ok=True)
    low.program.save(args.out / "program.bin")
    (args.out / "plan.json").write_text(plan_json(low))
    (args.out / "plan.txt").write_text(low.plan.summary())
    print(f"{len(low.program)} instructions -> {args.out}")
    return 0


def _input(cfg: MambaConfig, args):
    if getattr(args, "input", None) is not None:
        return load_tensor(args.input)
    return make_input(cfg)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    low = _lower(cfg, args)
    machine = MachineConfig(baseline_tensor_core=args.baseline_tensor_core, overlap=not args.serial)
    weights = None if args.timing_only else make_weights(cfg)
    x = None if args.timing_only else _input(cfg, args)
    res = simulate(low, weights, x, machine=machine, exact_kernels=args.exact_kernels,
                   numeric=not args.timing_only, trace=args.trace is not None)
    diff = None
    if not args.timing_only:
        nl = Nonlinearity.EXACT if args.exact_kernels else Nonlinearity.APPROX
        red = Reduction(args.reference)
        golden = mamba_model_ref(x, weights, cfg, nonlinearity=nl, reduction=red)
        diff = compare(res.output, golden, args.tol, reference=f"golden-{red.value}")
        if args.save_output is not None:
            save_tensor(res.output, args.save_output)
    flags = {"intra_bm": args.intra_bm, "inter_bm": args.inter_bm,
             "baseline_tensor_core": args.baseline_tensor_core, "exact_kernels": args.exact_kernels,
             "overlap": not args.serial}
    _emit(dumps(build_report(res.stats, config=cfg, flags=flags, diff=diff)), args.out)
    if args.trace is not None:
        args.trace.write_text(format_trace(res.trace))
    return 0 if diff is None or diff.passed else 1


def sweep_rows(cfg: MambaConfig, seq_lens, flags: LowerFlags, *, baseline: bool,
               max_instructions: int = 10**7) -> list[dict]:
    rows = []
    for L in seq_lens:
        c = cfg.with_seq_len(L)
        low = lower(c, flags, max_instructions=max_instructions)
        res = simulate(low, machine=MachineConfig(baseline_tensor_core=baseline), numeric=False)
        shares = res.stats.class_shares()
        rows.append({"seq_len": L, "cycles_total": res.stats.cycles_total,
                     "hbm_bytes": res.stats.hbm_bytes,
                     "ew_share": shares["ew1"] + shares["ew2"],
                     **{f"share_{k}": v for k, v in shares.items()}})
    return rows


def cmd_sweep(args) -> int:
    seq_lens = [int(s) for s in args.seq_lens.split(",")]
    if seq_lens != sorted(seq_lens):
        raise CliError("--seq-lens must be ascending")
    cfg = _config(args)
    rows = sweep_rows(cfg, seq_lens, LowerFlags(args.intra_bm, args.inter_bm),
                      baseline=args.baseline_tensor_core, max_instructions=args.max_instructions)
    buf = io.StringIO()
    buf.write(f"# {'desk-scale proxy' if cfg.is_proxy else 'full-size'}: d_model={cfg.d_model} "
              f"d_inner={cfg.d_inner} layers={cfg.n_layers}\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_compare(args) -> int:
    d = compare(load_tensor(args.actual), load_tensor(args.expected), args.tol)
    _emit(json.dumps(d.to_dict(), indent=1, sort_keys=True) + "\n", args.out)
    return 0 if d.passed else 1


def cmd_golden(args) -> int:
    cfg = _config(args)
    if args.out is None:
        raise CliError("golden needs --out")
    x = _input(cfg, args)
    y = mamba_model_ref(x, make_weights(cfg), cfg,
                        nonlinearity=Nonlinearity(args.nonlinearity), reduction=Reduction(args.reduction))
    save_tensor(y, args.out)
    print(f"output {y.shape} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="marca", description="Mamba accelerator simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate-exp", help="sweep the fast-exp bias lattice")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_calibrate_exp)

    p = sub.add_parser("assemble", help="text assembly -> binary program")
    p.add_argument("source", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("disassemble", help="binary program -> text assembly")
    p.add_argument("program", type=Path)
    p.add_argument("--annotate", action="store_true")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_disassemble)

    p = sub.add_parser("lower", help="compile a model to program + buffer plan")
    _add_model_args(p)
    _add_flag_args(p)
    p.add_argument("--out", type=Path, help="output directory")
    p.set_defaults(func=cmd_lower)

    p = sub.add_parser("simulate", help="run a model and report stats")
    _add_model_args(p)
    _add_flag_args(p)
    p.add_argument("--baseline-tensor-core", action="store_true")
    p.add_argument("--exact-kernels", action="store_true")
    p.add_argument("--serial", action="store_true", help="disable compute/transfer overlap")
    p.add_argument("--timing-only", action="store_true", help="skip numerics (and the golden diff)")
    p.add_argument("--reference", choices=[r.value for r in Reduction], default="sequential")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--input", type=Path)
    p.add_argument("--save-output", type=Path)
    p.add_argument("--trace", type=Path, help="write a per-instruction CSV trace")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="timing sweep over sequence lengths (CSV)")
    _add_model_args(p)
    _add_flag_args(p)
    p.add_argument("--seq-lens", default=",".join(map(str, DEFAULT_SWEEP)))
    p.add_argument("--baseline-tensor-core", action="store_true")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="diff two tensors")
    p.add_argument("actual", type=Path)
    p.add_argument("expected", type=Path)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("golden", help="run the reference model")
    _add_model_args(p)
    p.add_argument("--input", type=Path)
    p.add_argument("--nonlinearity", choices=[n.value for n in Nonlinearity], default="approx")
    p.add_argument("--reduction", choices=[r.value for r in Reduction], default="sequential")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_golden)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, PlanningError, AssemblyError, EncodingError, NumericError, ValueError, OSError) as e:
        print(f"marca {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
