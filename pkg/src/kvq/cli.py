"""``kvq`` command line: plan, calibrate, simulate, bench.

Structured output is JSON; ``plan`` also renders a table. Failures print
``{"error": <category>, "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from kvq.kvcache import (
    KeyQuantizer,
    QuantConfig,
    QuantizedKVCache,
    ValueQuantizer,
    calibrate_key_quantizer,
    calibrate_value_quantizer,
)
from kvq.packing import pack
from kvq.planner import model_config, plan_grid, render_table
from kvq.rope import RopeParams
from kvq.sparse import SparseCSR
from kvq.tensor_io import TensorFormatError, dump_calibration_dirs, load_calibration_dirs

BUNDLE_FORMAT = "kvq-quantizers"
BUNDLE_VERSION = 1
DEFAULT_SCHEMES = "fp16,nuq4,nuq4-1%,nuq3-1%,nuq2-1%"
DEFAULT_SEQ_LENS = "131072"
BENCH_SIZES = "2048,4096,16384"

EXIT_USAGE = 2
EXIT_INPUT = 3


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print usage and exit(2)
        raise CliError("invalid_flag", message)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _fraction(text: str) -> float:
    f = float(text)
    if not 0 <= f < 0.5:
        raise argparse.ArgumentTypeError(f"outlier fraction must be in [0, 0.5), got {f}")
    return f


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --- plan --------------------------------------------------------------------------


def cmd_plan(args) -> int:
    try:
        shape = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise CliError("missing_input", f"no such config file: {args.config}", EXIT_INPUT)
    except json.JSONDecodeError as e:
        raise CliError("invalid_config", f"{args.config}: {e}", EXIT_INPUT)
    base = model_config(shape, batch=args.batch)
    reports = plan_grid(base, [s.strip() for s in args.schemes.split(",") if s.strip()], args.seq_lens)
    if args.json:
        _write_json([r.to_dict() for r in reports], None)
    else:
        print(render_table(reports))
    return 0


# --- calibrate ---------------------------------------------------------------------


def quant_config_from_args(args) -> QuantConfig:
    return QuantConfig(bits=args.bits, outlier_fraction=args.outlier_frac, qnorm=args.qnorm,
                       fisher_weighted=not args.no_fisher)


def build_bundle(sets, cfg: QuantConfig, rope: RopeParams | None) -> dict:
    layers = {}
    for layer in sorted(sets):
        cs = sets[layer]
        fk = [g * g for g in cs.grads_keys] if cs.has_grads else None
        fv = [g * g for g in cs.grads_values] if cs.has_grads else None
        kq = calibrate_key_quantizer(cs.keys, fk, cfg, rope)
        vq = calibrate_value_quantizer(cs.values, fv, cfg)
        layers[str(layer)] = {"key_quantizer": kq.to_dict(), "value_quantizer": vq.to_dict()}
    return {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "config": asdict(cfg), "layers": layers}


def load_bundle(path: str | Path) -> dict[int, tuple[KeyQuantizer, ValueQuantizer]]:
    d = json.loads(Path(path).read_text())
    if d.get("format") != BUNDLE_FORMAT or d.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{path} is not a version-{BUNDLE_VERSION} quantizer bundle")
    return {int(k): (KeyQuantizer.from_dict(v["key_quantizer"]), ValueQuantizer.from_dict(v["value_quantizer"]))
            for k, v in d["layers"].items()}


def cmd_calibrate(args) -> int:
    cfg = quant_config_from_args(args)
    try:
        sets = load_calibration_dirs(args.keys, args.values, args.grads)
    except FileNotFoundError as e:
        raise CliError("missing_input", str(e), EXIT_INPUT)
    except TensorFormatError as e:
        raise CliError("bad_tensor", str(e), EXIT_INPUT)
    except ValueError as e:
        raise CliError("inconsistent_input", str(e), EXIT_INPUT)
    rope = None if args.head_dim is None else RopeParams(args.head_dim, args.rope_base)
    _write_json(build_bundle(sets, cfg, rope), args.out)
    return 0


# --- simulate ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from kvq.simulator import SimConfig, decode_compare, make_task, with_grads

    sim = SimConfig(n_layers=args.layers, n_heads=args.heads, head_dim=args.head_dim,
                    n_calib=args.n_calib, steps=args.steps)
    cfg = quant_config_from_args(args)
    model, data = make_task(args.seed, sim)
    if args.dump_calib or cfg.fisher_weighted:
        data = with_grads(model, data, seed=args.seed)
    report = decode_compare(model, data, cfg)
    out = {"seed": args.seed, "config": asdict(cfg), "sim": asdict(sim), "report": report.to_dict()}
    if args.dump_calib:
        dump_calibration_dirs(data.calib, args.dump_calib)
        out["calibration_dir"] = str(args.dump_calib)
    _write_json(out, args.report)
    return 0


# --- bench -------------------------------------------------------------------------


def _time_ns(fn, repeats: int) -> tuple[float, float]:
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(np.mean(samples)), float(np.median(samples))


def bench_rows(sizes: list[int], bits: int, outlier_frac: float, repeats: int, dim: int = 128, seed: int = 0) -> list[dict]:
    """Mean/median nanoseconds per decode-step kernel at each cache length."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    cfg = QuantConfig(bits=bits, outlier_fraction=outlier_frac, fisher_weighted=False)
    calib = [rng.standard_normal((256, dim)).astype(np.float32) for _ in range(4)]
    rope = RopeParams(dim)
    kq = calibrate_key_quantizer(calib, None, cfg, rope)
    vq = calibrate_value_quantizer(calib, None, cfg)
    rows = []
    for n in sizes:
        cache = QuantizedKVCache(kq, vq)
        keys = rng.standard_normal((n, dim)).astype(np.float32)
        cache.extend(keys, rng.standard_normal((n, dim)).astype(np.float32))
        q = rng.standard_normal(dim).astype(np.float32)
        w = rng.random(n)
        w /= w.sum()
        codes = rng.integers(0, 1 << bits, size=n * dim)
        token = rng.standard_normal((1, dim)).astype(np.float32)
        q_token = vq.quantize(token)
        idx = np.flatnonzero(q_token.outliers[0])
        entries = list(zip(idx.tolist(), q_token.residuals[0, idx].tolist()))

        def sparse_append():
            s = SparseCSR(dim)
            s.append_token(entries)

        timings = {
            "qk_scores": _time_ns(lambda: cache.qk_scores(q), repeats),
            "av_matvec": _time_ns(lambda: cache.av_matvec(w), repeats),
            "pack": _time_ns(lambda: pack(codes, bits), repeats),
            "sparse_append": _time_ns(sparse_append, repeats),
        }
        timings["Total"] = tuple(map(sum, zip(*timings.values())))
        for kernel, (mean, median) in timings.items():
            rows.append({"seq_len": n, "kernel": kernel, "mean_ns": mean, "median_ns": median})
    return rows


def cmd_bench(args) -> int:
    if args.repeats < 1:
        raise CliError("invalid_flag", "--repeats must be >= 1")
    rows = bench_rows(args.sizes, args.bits, args.outlier_frac, args.repeats, args.dim, args.seed)
    if args.json:
        _write_json(rows, None)
    else:
        print(f"{'seq_len':>8}  {'kernel':<14}{'mean_us':>12}{'median_us':>12}")
        for r in rows:
            print(f"{r['seq_len']:>8}  {r['kernel']:<14}{r['mean_ns'] / 1e3:>12.1f}{r['median_ns'] / 1e3:>12.1f}")
    return 0


# --- parser ------------------------------------------------------------------------


def _quant_flags(p: argparse.ArgumentParser, bits_default: int, bit_choices=(2, 3, 4)) -> None:
    p.add_argument("--bits", type=int, choices=bit_choices, default=bits_default)
    p.add_argument("--outlier-frac", type=_fraction, default=0.01)
    p.add_argument("--qnorm", action="store_true", help="fold Q-Norm into the codebook")
    p.add_argument("--no-fisher", action="store_true", help="unweighted k-means codebook")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvq", description="KV-cache quantization toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="KV-cache memory for quantization schemes")
    p.add_argument("--config", required=True, help="model shape JSON (see configs/)")
    p.add_argument("--schemes", default=DEFAULT_SCHEMES)
    p.add_argument("--seq-lens", type=_int_list, default=_int_list(DEFAULT_SEQ_LENS))
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("calibrate", help="derive per-layer quantizers from KVQT calibration files")
    p.add_argument("--keys", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--grads", default=None)
    p.add_argument("--head-dim", type=int, default=None, help="attach RoPE to the Key quantizers")
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--out", required=True)
    _quant_flags(p, 3)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="toy decode with full-precision vs quantized cache")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--n-calib", type=int, default=16)
    p.add_argument("--report", default=None)
    p.add_argument("--dump-calib", default=None)
    _quant_flags(p, 4, (2, 3, 4, 16))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="CPU kernel latency per cache length")
    p.add_argument("--sizes", type=_int_list, default=_int_list(BENCH_SIZES))
    p.add_argument("--bits", type=int, choices=(2, 3, 4), default=4)
    p.add_argument("--outlier-frac", type=_fraction, default=0.01)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as e:
        err = {"error": e.category, "message": str(e)}
        code = e.code
    except (ValueError, RuntimeError) as e:
        err = {"error": "invalid_input", "message": str(e)}
        code = EXIT_USAGE
    sys.stderr.write(json.dumps(err) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
