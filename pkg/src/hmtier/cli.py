"""Experiment driver: trace generation, profiling reports, MI sweeps, single runs, policy comparisons.

Every command reads an optional JSON config (``--config``); flags override it.
Outputs are CSV files written atomically into ``--out`` once all simulations
have finished. Exit codes: 0 success, 1 runtime error, 2 config or validation
error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
import tempfile
from pathlib import Path

from . import __version__
from .allocator import naive_allocate, reorganize
from .policy.ial import IALConfig
from .profiler import false_sharing_report, profile_step
from .simengine.machine import PRESETS, MachineConfig
from .simengine.training import (PolicyKind, bucket_workloads, compare_policies, comparison_csv, run_training,
                                 sweep_csv, sweep_mi)
from .trace import ParamError, SynthParams, Trace, TraceFormatError, generate_synthetic, load_trace, save_trace, \
    validate

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Bad flag or config entry; the message names it."""


CONFIG_KEYS = {"generate", "seed", "trace_steps", "trace", "machine", "policies", "fast_sizes", "steps", "ial",
               "samples_per_step", "candidate_cap"}
MACHINE_KEYS = {"preset", "fast_bandwidth_bytes_per_s", "fast_latency_ns", "slow_bandwidth_bytes_per_s",
                "slow_latency_ns", "migration_bandwidth_bytes_per_s", "migration_latency_ns",
                "access_granularity_bytes", "profiling_slowdown"}
PARAM_FLAGS = {"frac_short_lived": "--frac-short-lived", "frac_small_of_short": "--frac-small-of-short",
               "num_layers": "--num-layers", "num_tensors": "--num-tensors", "num_steps": "--trace-steps"}


# ---------------------------------------------------------------------------
# config


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("--config: top level must be an object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"--config: unknown key(s) {', '.join(sorted(unknown))}")
    return cfg


def synth_params(cfg: dict, args) -> SynthParams:
    kw = dict(cfg.get("generate", {}))
    names = {f.name for f in dataclasses.fields(SynthParams)}
    bad = set(kw) - names
    if bad:
        raise ConfigError(f"--config: unknown generate key(s) {', '.join(sorted(bad))}")
    for key in ("access_count_distribution", "large_access_range"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if isinstance(kw.get("base_compute_ns_per_layer"), list):
        kw["base_compute_ns_per_layer"] = tuple(kw["base_compute_ns_per_layer"])
    for key in ("frac_short_lived", "frac_small_of_short", "num_layers", "num_tensors"):
        value = getattr(args, key, None)
        if value is not None:
            kw[key] = value
    try:
        params = SynthParams(**kw)
        params.validate()
    except ParamError as exc:
        raise ConfigError(f"{PARAM_FLAGS.get(exc.field, exc.field)}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"--config: {exc}") from None
    return params


def machine_from(cfg: dict, args) -> MachineConfig:
    mcfg = dict(cfg.get("machine", {}))
    bad = set(mcfg) - MACHINE_KEYS
    if bad:
        raise ConfigError(f"--config: unknown machine key(s) {', '.join(sorted(bad))}")
    preset = args.preset or mcfg.pop("preset", "paper-hw")
    mcfg.pop("preset", None)
    if preset not in PRESETS:
        raise ConfigError(f"--preset: unknown preset {preset!r} (known: {', '.join(PRESETS)})")
    m = PRESETS[preset]()
    fast, slow = m.fast, m.slow
    try:
        fast = dataclasses.replace(fast, bandwidth_bytes_per_s=mcfg.pop("fast_bandwidth_bytes_per_s", fast.bandwidth_bytes_per_s),
                                   latency_ns=mcfg.pop("fast_latency_ns", fast.latency_ns))
        slow = dataclasses.replace(slow, bandwidth_bytes_per_s=mcfg.pop("slow_bandwidth_bytes_per_s", slow.bandwidth_bytes_per_s),
                                   latency_ns=mcfg.pop("slow_latency_ns", slow.latency_ns))
        return dataclasses.replace(m, fast=fast, slow=slow, **mcfg)
    except ValueError as exc:
        raise ConfigError(f"--config: machine: {exc}") from None


_SIZE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(%|[kmg]i?b?|b)?\s*$", re.IGNORECASE)
_UNITS = {"b": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str, peak: int) -> tuple[int, float | None]:
    """'20%' or '0.2' -> fraction of peak; '64MB' or '123456' -> bytes. Returns (bytes, fraction or None)."""
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ConfigError(f"--fast-size: cannot parse {text!r}")
    value, unit = float(m.group(1)), (m.group(2) or "").lower()
    if value <= 0:
        raise ConfigError(f"--fast-size: {text!r} must be positive")
    if unit == "%":
        frac = value / 100.0
    elif unit == "" and value <= 1.0 and "." in m.group(1):
        frac = value
    else:
        nbytes = int(value * _UNITS[unit[0]] if unit else value)
        if nbytes < 1:
            raise ConfigError(f"--fast-size: {text!r} must be at least one byte")
        return nbytes, None
    return max(1, int(round(frac * peak))), frac


def fast_sizes(cfg: dict, args, peak: int, default: list[str]) -> list[tuple[int, float | None]]:
    raw = args.fast_size.split(",") if args.fast_size else [str(s) for s in cfg.get("fast_sizes", default)]
    if not raw or not all(s.strip() for s in raw):
        raise ConfigError("--fast-size: empty size list")
    return [parse_size(s, peak) for s in raw]


def policies(cfg: dict, args, default: list[str]) -> list[str]:
    raw = args.policy.split(",") if args.policy else cfg.get("policies", default)
    out = []
    for p in raw:
        try:
            out.append(PolicyKind(p.strip()).value)
        except ValueError:
            raise ConfigError(f"--policy: unknown policy {p!r} (known: {', '.join(k.value for k in PolicyKind)})") \
                from None
    if not out:
        raise ConfigError("--policy: at least one policy is required")
    return out


def int_setting(cfg: dict, args, flag: str, key: str, default: int, minimum: int = 1) -> int:
    value = getattr(args, flag, None)
    value = cfg.get(key, default) if value is None else value
    if not isinstance(value, int) or value < minimum:
        raise ConfigError(f"--{flag.replace('_', '-')}: must be an integer >= {minimum}")
    return value


def ial_config(cfg: dict) -> IALConfig:
    try:
        return IALConfig(**cfg.get("ial", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"--config: ial: {exc}") from None


def get_trace(cfg: dict, args) -> Trace:
    path = args.trace or cfg.get("trace")
    if path:
        try:
            trace = load_trace(path)
        except OSError as exc:
            raise ConfigError(f"--trace: cannot read {path}: {exc.strerror}") from None
        except TraceFormatError as exc:
            raise ConfigError(f"--trace: {path}: {exc}") from None
    else:
        seed = int_setting(cfg, args, "seed", "seed", 0, minimum=0)
        steps = int_setting(cfg, args, "trace_steps", "trace_steps", 2)
        trace = generate_synthetic(synth_params(cfg, args), seed, steps)
    problems = validate(trace)
    if problems:
        first = problems[0]
        raise ConfigError(f"--trace: trace failed validation ({len(problems)} problem(s)); first: {first}")
    return trace


# ---------------------------------------------------------------------------
# output


def write_outputs(out_dir: str, files: dict[str, str]) -> None:
    """Write every file atomically (temp file + rename) after all work is done."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, out / name)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_trace(args, cfg) -> int:
    seed = int_setting(cfg, args, "seed", "seed", 0, minimum=0)
    steps = int_setting(cfg, args, "trace_steps", "trace_steps", 2)
    params = synth_params(cfg, args)
    trace = generate_synthetic(params, seed, steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_trace(trace, out / "trace.jsonl")
    report = profile_step(trace, 0)
    short = sum(1 for p in report.object_profiles if p.is_short) / max(1, len(report.object_profiles))
    print(f"wrote {out / 'trace.jsonl'}: {len(trace.steps)} step(s), {trace.num_layers} layers, "
          f"{len(report.object_profiles)} tensors, short-lived fraction {short:.3f}")
    return EXIT_OK


def cmd_profile(args, cfg) -> int:
    trace = get_trace(cfg, args)
    files = {}
    for bucket, wl in sorted(bucket_workloads(trace).items()):
        report = wl.report
        suffix = "" if bucket == 0 else f"_bucket{bucket}"
        files[f"profile{suffix}.csv"] = report.to_csv(include_objects=args.objects)
        naive, _ = naive_allocate(report.object_profiles)
        files[f"false_sharing_naive{suffix}.csv"] = false_sharing_report(report, naive).to_csv()
        files[f"false_sharing_packed{suffix}.csv"] = false_sharing_report(report, reorganize(report.object_profiles)).to_csv()
    write_outputs(args.out, files)
    print(f"wrote {len(files)} file(s) to {args.out}")
    return EXIT_OK


def _peak(trace: Trace) -> int:
    return max(wl.report.peak_memory_bytes for wl in bucket_workloads(trace).values())


def cmd_sweep_mi(args, cfg) -> int:
    trace = get_trace(cfg, args)
    machine = machine_from(cfg, args)
    sizes = fast_sizes(cfg, args, _peak(trace), ["20%"])
    if len(sizes) != 1:
        raise ConfigError("--fast-size: sweep-mi takes exactly one size")
    steps = int_setting(cfg, args, "steps", "steps", 24)
    rows, warnings = sweep_mi(trace, machine.with_fast_capacity(sizes[0][0]), steps)
    write_outputs(args.out, {"sweep_mi.csv": sweep_csv(rows, warnings)})
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    sp = [r.mi for r in rows if r.sweet_spot]
    print(f"{len(rows)} feasible MI(s); sweet spot {sp[0] if sp else 'none'}")
    return EXIT_OK


def cmd_run(args, cfg) -> int:
    trace = get_trace(cfg, args)
    machine = machine_from(cfg, args)
    sizes = fast_sizes(cfg, args, _peak(trace), ["20%"])
    pols = policies(cfg, args, ["sentinel"])
    if len(sizes) != 1 or len(pols) != 1:
        raise ConfigError("--fast-size/--policy: run takes exactly one size and one policy")
    steps = int_setting(cfg, args, "steps", "steps", 60)
    res = run_training(trace, pols[0], machine.with_fast_capacity(sizes[0][0]), steps, ial=ial_config(cfg),
                       samples_per_step=float(cfg.get("samples_per_step", 1.0)),
                       candidate_cap=int(cfg.get("candidate_cap", 7)))
    files = {"result.csv": res.to_csv(), "occupancy.csv": res.occupancy_csv()}
    if res.decision_log.rows:
        files["decisions.csv"] = res.decision_log.to_csv()
    write_outputs(args.out, files)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{res.policy}: {res.steady_throughput:.3f} steps/s steady over {res.num_steps} steps")
    return EXIT_OK


def cmd_compare(args, cfg) -> int:
    trace = get_trace(cfg, args)
    machine = machine_from(cfg, args)
    sizes = fast_sizes(cfg, args, _peak(trace), ["10%", "20%", "40%", "60%", "100%"])
    pols = policies(cfg, args, [k.value for k in PolicyKind])
    # long enough for a few IAL periods
    steps = int_setting(cfg, args, "steps", "steps", 1200)
    rows = compare_policies(trace, machine, [b for b, _ in sizes], pols, steps, fractions=[f for _, f in sizes],
                            ial=ial_config(cfg), samples_per_step=float(cfg.get("samples_per_step", 1.0)))
    lines = ["size           policy      normalized  note"]
    for r in rows:
        label = f"{r.fraction:.0%} of peak" if r.fraction is not None else f"{r.result.capacity_bytes} B"
        note = "BELOW_BOUND" if r.result.lower_bound and r.result.lower_bound.status.value == "BELOW_BOUND" else ""
        lines.append(f"{label:<14} {r.result.policy:<11} {r.normalized:>10.3f}  {note}".rstrip())
    summary = "\n".join(lines) + "\n"
    write_outputs(args.out, {"comparison.csv": comparison_csv(rows), "summary.txt": summary})
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _fraction(flag: str):
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} must be a number in [0, 1]") from None
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError(f"{flag} must lie in [0, 1], got {text}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its entries")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="generator seed")

    source = argparse.ArgumentParser(add_help=False)
    source.add_argument("--trace", help="trace file; generated from the config when omitted")
    source.add_argument("--trace-steps", dest="trace_steps", type=int, help="steps to generate")
    gen = source.add_argument_group("generator")
    gen.add_argument("--frac-short-lived", dest="frac_short_lived", type=_fraction("--frac-short-lived"))
    gen.add_argument("--frac-small-of-short", dest="frac_small_of_short", type=_fraction("--frac-small-of-short"))
    gen.add_argument("--num-layers", dest="num_layers", type=int)
    gen.add_argument("--num-tensors", dest="num_tensors", type=int)

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--preset", choices=sorted(PRESETS), help="machine preset (default: paper-hw)")
    sim.add_argument("--fast-size", dest="fast_size",
                     help="comma list of FAST sizes: '20%%', '0.2' (fraction of peak) or bytes ('64MB')")
    sim.add_argument("--steps", type=int, help="training steps to simulate")

    p = argparse.ArgumentParser(prog="hmtier", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("gen-trace", parents=[common, source], help="generate a synthetic trace")
    sp.set_defaults(func=cmd_gen_trace)
    sp = sub.add_parser("profile", parents=[common, source], help="profiling reports as CSV")
    sp.add_argument("--objects", action="store_true", help="append one row per object")
    sp.set_defaults(func=cmd_profile)
    sp = sub.add_parser("sweep-mi", parents=[common, source, sim], help="throughput and cases per feasible MI")
    sp.set_defaults(func=cmd_sweep_mi)
    sp = sub.add_parser("run", parents=[common, source, sim], help="one policy at one FAST size")
    sp.add_argument("--policy", help="sentinel, ial, fast-only or slow-only")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("compare", parents=[common, source, sim], help="all policies over a list of FAST sizes")
    sp.add_argument("--policy", help="comma list of policies (default: all)")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message; usage errors exit 2
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
