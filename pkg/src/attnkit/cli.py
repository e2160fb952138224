"""Command-line front door.

Subcommands: equiv, tables, variance, simulate-tp, roofline, selftest.
A JSON config file (--config) can pre-fill any long option; explicit flags
win. All outputs are deterministic for a given seed, so repeated runs are
byte-identical. ATTNKIT_THREADS caps worker threads for randomized suites.
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import costs
from .config import TABLE_ROW_ORDER, TP_DEGREES, table_context
from .decode import absorbed_decode_step, new_cache
from .errors import AttnKitError, ConfigError
from .selftest import (
    absorption_equivalence,
    run_selftest,
    tiny_config,
    max_rel_err,
)
from .tensors import Rng
from .tpsim import make_shards, sim_decode
from .variance import estimate_variances, verify_calibration
from .weights import build_weights

CLI_VARIANTS = ("mha", "mqa", "gqa", "mla", "mfa", "tpa", "gla2", "gla4", "gta", "mlra2", "mlra4")
EQUIV_CHOICES = ("mla", "gla2", "mlra2", "mlra4", "all")


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _json_text(payload) -> str:
    return json.dumps(payload, indent=2) + "\n"


def cmd_equiv(args) -> int:
    if args.variant == "all":
        worst, ran = absorption_equivalence(args.seed, args.trials)
        summary = {"all": {"trials": ran, "max_rel_err": worst}}
    else:
        worst, ran = _equiv_single(args.variant, args.seed, args.trials)
        summary = {args.variant: {"trials": ran, "max_rel_err": worst}}
    payload = {"seed": args.seed, "tolerance": 1e-10, "results": summary, "pass": worst <= 1e-10}
    if args.out:
        _write_text(args.out, _json_text(payload))
    if worst > 1e-10:
        print(f"FAIL max relative error {worst:.3e} > 1e-10 (seed {args.seed})")
        return 1
    print(f"PASS max relative error {worst:.3e} over {ran} trials")
    return 0


def _equiv_single(variant: str, seed: int, trials: int) -> tuple[float, int]:
    from .selftest import _equiv_trial

    errs = [_equiv_trial(variant, seed, t) for t in range(trials)]
    return max(errs), len(errs)


def cmd_tables(args) -> int:
    ctx = table_context(args.context)
    loading = costs.loading_table_rows(ctx, TABLE_ROW_ORDER)
    intensity = costs.intensity_table_rows(ctx, TABLE_ROW_ORDER)
    if args.format == "csv":
        out_dir = Path(args.out or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table_loading.csv").write_text(costs.rows_to_csv(loading))
        (out_dir / "table_intensity.csv").write_text(costs.rows_to_csv(intensity))
        print(f"wrote {out_dir / 'table_loading.csv'} and {out_dir / 'table_intensity.csv'}")
    else:
        payload = {
            "context": args.context,
            "loading": loading,
            "intensity": intensity,
            "reports": [costs.cost_report(ctx[label], label).as_row() for label in TABLE_ROW_ORDER],
        }
        _write_text(args.out, _json_text(payload))
    return 0


def cmd_variance(args) -> int:
    if args.variant not in ("mla", "gla2", "gla4", "mlra2", "mlra4"):
        print(f"variance lab covers latent variants, got {args.variant!r}", file=sys.stderr)
        return 2
    from .config import trained_config

    cfg = trained_config(args.variant).with_(d=args.d, d_c=args.d_c, d_cq=args.d_cq)
    rng = Rng(args.seed)
    if args.calibrated:
        report = verify_calibration(cfg.with_(scaling=True), args.sigma, args.trials, rng)
    else:
        report = estimate_variances(cfg, args.sigma, args.trials, rng)
    _write_text(args.out, _json_text(report.to_json_dict()))
    return 0


def cmd_simulate_tp(args) -> int:
    if args.tp not in TP_DEGREES:
        print(f"unsupported TP degree {args.tp}; supported: {list(TP_DEGREES)}", file=sys.stderr)
        return 2
    cfg = tiny_config(args.variant)
    rng = Rng(args.seed)
    w = build_weights(cfg, 0.25, rng.split("w"))
    hidden = rng.split("h").normal((args.steps, cfg.d))
    reference_cache = new_cache(cfg)
    shards = make_shards(cfg, w, args.tp)
    worst = 0.0
    ledger = None
    for t in range(args.steps):
        o_ref, _ = absorbed_decode_step(cfg, w, reference_cache, hidden[t])
        o_dist, ledger = sim_decode(shards, hidden[t])
        worst = max(worst, max_rel_err(o_ref, o_dist))
    expected = costs.per_device_load(cfg, args.tp) * cfg.d_h
    ledger_exact = all(
        Fraction(reads) == expected * tokens
        for tokens, step_reads in zip(ledger.tokens_per_step, ledger.reads_per_step)
        for reads in step_reads
    )
    payload = ledger.to_json_dict()
    payload["distributed_vs_single_max_rel_err"] = worst
    payload["matches_cost_model"] = ledger_exact
    payload["pass"] = bool(ledger_exact and worst <= 1e-10)
    _write_text(args.out, _json_text(payload))
    if not payload["pass"]:
        print(
            f"FAIL simulate-tp: err {worst:.3e}, ledger exact: {ledger_exact} "
            f"(replay with --seed {args.seed})"
        )
        return 1
    print(f"PASS simulate-tp {args.variant} tp={args.tp}: err {worst:.3e}, ledger exact")
    return 0


def cmd_roofline(args) -> int:
    if args.tp not in TP_DEGREES:
        print(f"unsupported TP degree {args.tp}; supported: {list(TP_DEGREES)}", file=sys.stderr)
        return 2
    ctx = table_context(args.context)
    cfg = ctx[args.variant]
    hw = costs.HardwareModel(args.bandwidth, args.peak_flops, args.bytes_per_element)
    seconds, regime = costs.decode_time(cfg, args.tp, args.n, hw)
    payload = {
        "variant": args.variant,
        "tp": args.tp,
        "context_tokens": args.n,
        "bytes_per_element": args.bytes_per_element,
        "per_device_load_dh_per_token": costs.fraction_str(costs.per_device_load(cfg, args.tp)),
        "step_time_seconds": seconds,
        "regime": regime,
        "note": "bandwidth-ideal roofline bound, not a measured kernel time",
    }
    _write_text(args.out, _json_text(payload))
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(args.seed, out_dir=args.out, quick=args.quick)
    for result in results:
        print(result.line)
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnkit",
        description="Verification kit for latent-attention decoding and TP cache traffic.",
    )
    parser.add_argument("--config", help="JSON file pre-filling any long option")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv", help="naive vs absorbed decode equivalence suite")
    p.add_argument("--variant", choices=EQUIV_CHOICES, default="all")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("tables", help="emit the loading and intensity tables")
    p.add_argument("--context", choices=("kimi", "qwen"), default="kimi")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="directory for csv, file for json (default stdout)")
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("variance", help="Monte Carlo variance report")
    p.add_argument("--variant", default="mla")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--d-c", dest="d_c", type=int, default=64)
    p.add_argument("--d-cq", dest="d_cq", type=int, default=128)
    p.add_argument("--calibrated", action="store_true", help="verify calibrated parity instead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("simulate-tp", help="sharded decoding with traffic ledger")
    p.add_argument("--variant", choices=CLI_VARIANTS, default="mlra4")
    p.add_argument("--tp", type=int, default=4)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate_tp)

    p = sub.add_parser("roofline", help="bandwidth-ideal decode-time projection")
    p.add_argument("--variant", choices=TABLE_ROW_ORDER, default="mla")
    p.add_argument("--context", choices=("kimi", "qwen"), default="kimi")
    p.add_argument("--tp", type=int, default=1)
    p.add_argument("--n", type=int, default=131072, help="context length in tokens")
    p.add_argument("--bandwidth", type=float, default=3.35e12, help="HBM bytes/s")
    p.add_argument("--peak-flops", dest="peak_flops", type=float, default=9.89e14)
    p.add_argument("--bytes-per-element", dest="bytes_per_element", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("selftest", help="run the full acceptance matrix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="reduced trial counts")
    p.add_argument("--out", help="directory for report artifacts")
    p.set_defaults(func=cmd_selftest)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Inject values from --config as defaults (explicit flags still win)."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    path = argv[idx + 1]
    values = json.loads(Path(path).read_text())
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    extra: list[str] = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        present = any(a == flag or a.startswith(flag + "=") for a in argv)
        if present:
            continue
        if isinstance(value, bool):
            if value:
                extra.append(flag)
        else:
            extra.extend([flag, str(value)])
    # config-provided options go after the subcommand, before explicit flags win by order
    return argv + extra


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except AttnKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
