"""Command-line entry point.

    passion train --config run.cfg [--seed N] [--out DIR]
    passion evaluate --checkpoint ck.npz --data test.pass [--out DIR] [--hd-variant max]
    passion gen-data --spec data.cfg [--out DIR]
    passion gen-presence --targets 0.2,0.5,0.8 --n 120 [--seed S] [--out FILE]

Every command exits 0 on success; any failure prints a single ``error:`` line
to stderr and exits 1 (2 for usage errors, as argparse does).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, format_profiles, load_config, parse_profiles
from .data import DatasetSpec, apply_presence, generate_dataset, save_container
from .presence import format_manifest, missing_rates, sample_presence, save_manifest

log = logging.getLogger("passion")

DATA_SPEC_KEYS = {f.name for f in fields(DatasetSpec)} | {"missing_rates", "presence_seed"}


def parse_data_spec(text: str) -> tuple[DatasetSpec, tuple | None, int | None]:
    """Key-value dataset description; ``missing_rates`` optionally masks the samples."""
    values, rates, pseed = {}, None, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in DATA_SPEC_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key == "missing_rates":
                rates = tuple(float(x) for x in value.split(","))
            elif key == "presence_seed":
                pseed = int(value)
            elif key == "profiles":
                values[key] = parse_profiles(value)
            elif key == "shape":
                values[key] = tuple(int(s) for s in value.lower().split("x"))
            elif key in ("outer_radius", "shrink"):
                values[key] = tuple(float(x) for x in value.split(","))
            elif key == "noise":
                values[key] = float(value)
            else:
                values[key] = int(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return DatasetSpec(**values), rates, pseed


def cmd_train(args) -> int:
    from .train import run_experiment

    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    result = run_experiment(cfg, progress=_progress if args.verbose else None)
    print(result.report.to_table(), end="")
    print(f"artifacts written to {Path(cfg.out_dir)}")
    return 0


def _progress(epoch, state):
    log.info("epoch %d  mean RP %s  beta %s", epoch, state.history[-1][1].round(4), state.beta.round(4))


def cmd_evaluate(args) -> int:
    from .backbone import load_checkpoint
    from .data import load_container
    from .metrics import evaluate_combinations, nested_grouping

    model, _ = load_checkpoint(args.checkpoint)
    data = load_container(args.data)
    if not data:
        raise ValueError("evaluation data is empty")
    if data[0].n_modalities != model.cfg.n_modalities:
        raise ValueError(
            f"data has {data[0].n_modalities} modalities, checkpoint expects {model.cfg.n_modalities}"
        )
    report = evaluate_combinations(model, data, nested_grouping(model.cfg.n_classes), args.hd_variant)
    print(report.to_table(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.csv").write_text(report.to_csv())
        (out / "eval_report.txt").write_text(report.to_table())
        if not args.no_plots:
            from .plots import emit_dice_plot

            emit_dice_plot(report, out / "dice_by_subset.png")
    return 0


def cmd_gen_data(args) -> int:
    spec, rates, pseed = parse_data_spec(Path(args.spec).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(spec)
    lines = [
        f"data = {out / 'data.pass'}",
        f"n_samples = {spec.n_samples}",
        f"n_modalities = {spec.n_modalities}",
        f"n_classes = {spec.n_classes}",
        f"shape = {'x'.join(str(s) for s in spec.shape)}",
        f"profiles = {format_profiles(spec.profiles)}",
        f"noise = {spec.noise!r}",
        f"seed = {spec.seed}",
    ]
    if rates is not None:
        C = sample_presence(rates, spec.n_samples, spec.seed if pseed is None else pseed)
        samples = [apply_presence(s, C.row(n)) for n, s in enumerate(samples)]
        path = save_manifest(C, out / "presence.txt")
        lines.append(f"presence = {path}")
        lines.append("realized_missing_rates = " + ",".join(repr(float(r)) for r in missing_rates(C)))
    else:
        lines.append("presence = none")
    save_container(samples, out / "data.pass", n_modalities=spec.n_modalities, n_classes=spec.n_classes)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(samples)} samples to {out / 'data.pass'}")
    return 0


def cmd_gen_presence(args) -> int:
    try:
        targets = tuple(float(x) for x in args.targets.split(","))
    except ValueError:
        raise ValueError(f"--targets must be comma-separated numbers, got {args.targets!r}") from None
    C = sample_presence(targets, args.n, args.seed)
    if args.out:
        save_manifest(C, args.out)
        print(f"wrote {args.out}")
    else:
        print(format_manifest(C), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="passion", description="Imbalanced missing-modality segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration and write its artifacts")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on every modality subset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--hd-variant", choices=("percentile95", "max"), default="percentile95")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset container")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("gen-presence", help="sample a presence matrix")
    q.add_argument("--targets", required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_gen_presence)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic instead of a traceback
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
