"""``forgetkit`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Human-readable summaries go to stdout; artifacts go to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import merge as merging
from .dataformat import FormatError, VocabLayout, format_record
from .lora import AdapterError, fold_lora, read_adapters
from .replay import ManifestError, build_augmented_manifest, plan_replay, read_manifest, write_manifest
from .simulator.pipeline import SimulationConfig, simulate, write_outputs
from .tensor_store import CheckpointError, read_checkpoint, write_checkpoint

OUTPUT_DIR_ENV = "FORGETKIT_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("forgetkit")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_checkpoint(path: Path):
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return read_checkpoint(path)


# -- merge ------------------------------------------------------------------------

def cmd_merge(args) -> int:
    spec_arg = args.spec
    if not Path(spec_arg).exists() and spec_arg in merging.PRESET_NAMES:
        spec = merging.load_preset(spec_arg)
        root = Path(".")
    else:
        if not Path(spec_arg).exists():
            raise DataError(f"merge spec not found: {spec_arg}")
        try:
            spec = merging.MergeSpec.load(spec_arg)
        except json.JSONDecodeError as exc:
            raise DataError(f"{spec_arg}: invalid JSON ({exc})") from None
        root = Path(spec_arg).parent
    if args.models_dir:
        root = Path(args.models_dir)
    if args.seed is not None:
        spec = merging.MergeSpec(spec.method, spec.entries, spec.base, args.seed, spec.exclude)

    refs = [e.ref for e in spec.entries] + ([spec.base] if spec.base else [])
    ckpts = {r: _load_checkpoint(root / r) for r in refs}
    merged = merging.apply_spec(spec, ckpts)
    write_checkpoint(merged, args.out)

    ref_ckpt = ckpts[spec.base] if spec.base else ckpts[spec.entries[0].ref]
    print(f"{spec.method} merge of {len(spec.entries)} model(s) -> {args.out}")
    print(f"{'tensor':40s} {'count':>10s} {'max|delta|':>14s}")
    for name, t in merged.tensors.items():
        d = float(np.max(np.abs(t.astype(np.float64) - ref_ckpt[name]))) if t.size else 0.0
        print(f"{name:40s} {t.size:10d} {d:14.6g}")
    return EXIT_OK


# -- fold-lora --------------------------------------------------------------------

def cmd_fold_lora(args) -> int:
    base = _load_checkpoint(Path(args.base))
    if not Path(args.adapter).exists():
        raise DataError(f"adapter file not found: {args.adapter}")
    adapters = read_adapters(args.adapter)
    if args.alpha is not None and args.alpha < 0:
        raise UsageError("--alpha must be non-negative")
    folded = fold_lora(base, adapters, alpha_override=args.alpha)
    write_checkpoint(folded, args.out)
    eff = args.alpha if args.alpha is not None else next(iter(adapters.values())).alpha
    print(f"folded {len(adapters)} adapter(s) at alpha={eff:g} -> {args.out}")
    for name, ad in adapters.items():
        print(f"  {name}: rank {ad.rank}, stored alpha {ad.alpha:g}, scale {eff / ad.rank:.6g}")
    return EXIT_OK


# -- replay-plan ------------------------------------------------------------------

def cmd_replay_plan(args) -> int:
    manifests = None
    if args.manifests:
        for p in args.manifests:
            if not Path(p).exists():
                raise DataError(f"manifest not found: {p}")
        manifests = [read_manifest(p, stage_label=f"D{j}") for j, p in enumerate(args.manifests)]
        sizes = [len(m) for m in manifests]
        if args.sizes and list(args.sizes) != sizes:
            raise UsageError(f"sizes {args.sizes} disagree with manifest sizes {sizes}")
        if not args.out:
            raise UsageError("--out is required with --manifests")
    else:
        sizes = list(args.sizes)
        if len(sizes) < 2:
            raise UsageError("give at least two dataset sizes (D_0 .. D_i)")
    if any(n <= 0 for n in sizes):
        raise UsageError("dataset sizes must be positive")
    i = args.i if args.i is not None else len(sizes) - 1
    try:
        plan = plan_replay(sizes, i, args.s, seed=args.seed or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = json.dumps(plan.to_json(), sort_keys=True)
    print(text)
    if args.plan_out:
        Path(args.plan_out).write_text(text + "\n", encoding="utf-8")
    if manifests is not None:
        aug = build_augmented_manifest(manifests[: i + 1], plan, order=args.order)
        write_manifest(aug, args.out)
        print(f"wrote {len(aug)} records to {args.out}", file=sys.stderr)
    return EXIT_OK


# -- format -----------------------------------------------------------------------

def cmd_format(args) -> int:
    layout = VocabLayout.load(args.layout) if args.layout else None
    if not Path(args.input).exists():
        raise DataError(f"input manifest not found: {args.input}")
    errors = 0
    written = 0
    with open(args.input, encoding="utf-8") as src, open(args.output, "w", encoding="utf-8") as dst:
        for lineno, line in enumerate(src, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                if not isinstance(raw, dict):
                    raise FormatError("line is not a JSON object")
                if raw.get("task", args.task) != args.task:
                    raise FormatError(f"record task {raw.get('task')!r} does not match --task {args.task}")
                ex = format_record(raw, args.task, layout=layout, separator=args.separator)
            except (json.JSONDecodeError, FormatError) as exc:
                errors += 1
                print(f"{args.input}:{lineno}: {exc}", file=sys.stderr)
                continue
            dst.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")
            written += 1
    print(f"formatted {written} {args.task} example(s) -> {args.output}; {errors} error(s)")
    return EXIT_DATA if errors else EXIT_OK


# -- simulate ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    raw: dict = {}
    if args.config:
        if not Path(args.config).exists():
            raise DataError(f"config not found: {args.config}")
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON ({exc})") from None
    try:
        cfg = SimulationConfig.from_dict(raw)
    except ValueError as exc:
        raise DataError(f"{args.config}: {exc}") from None
    if args.seeds is not None:
        cfg = SimulationConfig(**{**cfg.__dict__, "seeds": args.seeds})
    if args.seed is not None:
        cfg = SimulationConfig(**{**cfg.__dict__, "seed": args.seed})
    out_dir = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "simulation_out")
    log.info("simulating %d strategies x %d seed(s)", len(cfg.strategies), cfg.seeds)
    result = simulate(cfg)
    paths = write_outputs(result, out_dir)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    tasks = next(iter(result.per_seed.values()))[0].task_labels
    print(f"final accuracy (mean over {cfg.seeds} seed(s))")
    print(f"{'strategy':16s}" + "".join(f"{t:>10s}" for t in tasks))
    for name in result.strategies:
        print(f"{name:16s}" + "".join(f"{v:10.3f}" for v in result.mean(name)[-1]))
    for p in paths:
        log.info("wrote %s", p)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="forgetkit", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the seed of the command")
    p.add_argument("--output-dir", default=None, help=f"default output directory (env {OUTPUT_DIR_ENV})")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    # subcommands also take --seed; SUPPRESS keeps an absent flag from hiding the global one
    seed_opt = _Parser(add_help=False)
    seed_opt.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed of the command")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("merge", parents=[seed_opt], help="merge checkpoints from a JSON spec or preset name")
    m.add_argument("spec", help="merge spec JSON, or one of: " + ", ".join(merging.PRESET_NAMES))
    m.add_argument("out")
    m.add_argument("--models-dir", help="resolve model paths here instead of next to the merge spec file")
    m.set_defaults(func=cmd_merge)

    f = sub.add_parser("fold-lora", parents=[seed_opt], help="fold LoRA adapters into base weights")
    f.add_argument("base")
    f.add_argument("adapter")
    f.add_argument("out")
    f.add_argument("--alpha", type=float, default=None, help="fold with this alpha instead of the stored one")
    f.set_defaults(func=cmd_fold_lora)

    r = sub.add_parser("replay-plan", parents=[seed_opt], help="plan (and optionally build) an experience-replay manifest")
    r.add_argument("sizes", nargs="*", type=int, help="sizes of D_0 .. D_i")
    r.add_argument("--i", type=int, default=None, help="stage index (default: last)")
    r.add_argument("--s", type=float, default=0.005, help="sampling ratio")
    r.add_argument("--manifests", nargs="+", help="JSONL manifests for D_0 .. D_i")
    r.add_argument("--out", help="augmented manifest path (with --manifests)")
    r.add_argument("--plan-out", help="also write the plan JSON here")
    r.add_argument("--order", choices=["shuffle", "concat"], default="shuffle")
    r.set_defaults(func=cmd_replay_plan)

    fm = sub.add_parser("format", parents=[seed_opt], help="build stage-formatted prompt/response examples")
    fm.add_argument("--task", required=True, choices=["asr", "tts", "sqa", "text"])
    fm.add_argument("input")
    fm.add_argument("output")
    fm.add_argument("--layout", help="vocabulary layout JSON")
    fm.add_argument("--separator", type=int, default=None, help="separator token id for sqa responses")
    fm.set_defaults(func=cmd_format)

    s = sub.add_parser("simulate", parents=[seed_opt], help="run the toy continual-learning comparison")
    s.add_argument("config", nargs="?", help="simulation config JSON (defaults apply when omitted)")
    s.add_argument("--seeds", type=int, default=None, help="number of seeds to average over")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"forgetkit {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, AdapterError, ManifestError, FormatError, ValueError, KeyError, OSError) as exc:
        print(f"forgetkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"forgetkit {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
