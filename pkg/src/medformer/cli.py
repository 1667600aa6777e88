"""``medformer`` command line: synth, train, eval, ablate, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one line ``error: <Kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench as bench_mod
from .config import RunConfig, field_names, format_value, read_config_file, resolve
from .data import Dataset, load_dataset, save_dataset, split, standard_scale, synth_generate
from .errors import ConfigError, FormatError
from .metrics import METRIC_NAMES, MetricsReport
from .model import build_variant, load_params, save_params, Medformer
from .training import RunLog, evaluate, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line errors instead of usage dumps
        raise UsageError(message)


# -- shared helpers -------------------------------------------------------------------


def _run_id(prefix: str, cfg: RunConfig) -> str:
    if cfg.run_id:
        return cfg.run_id
    digest = hashlib.sha256(cfg.replace(run_id="").dumps().encode()).hexdigest()
    return f"{prefix}-{digest[:10]}"


def _load_data(cfg: RunConfig) -> Dataset:
    if not cfg.dataset:
        raise ConfigError("no dataset given (set dataset=... or --dataset)")
    path = Path(cfg.dataset)
    if not path.is_file():
        raise ConfigError(f"dataset not found: {path}")
    ds = load_dataset(path)
    return standard_scale(ds) if cfg.scale else ds


@dataclass
class SeedResult:
    seed: int
    variant: str
    test: MetricsReport
    log: RunLog


def _fmt(x: float) -> str:
    return repr(float(x))


def _metrics_table(results: Sequence[SeedResult]) -> str:
    rows = ["seed\t" + "\t".join(METRIC_NAMES)]
    values = np.array([r.test.as_tuple() for r in results])
    for r in results:
        rows.append(f"{r.seed}\t" + "\t".join(_fmt(v) for v in r.test.as_tuple()))
    rows.append("mean\t" + "\t".join(_fmt(v) for v in values.mean(axis=0)))
    rows.append("std\t" + "\t".join(_fmt(v) for v in values.std(axis=0)))
    return "\n".join(rows) + "\n"


def summary_line(results: Sequence[SeedResult]) -> str:
    values = np.array([r.test.as_tuple() for r in results]) * 100.0
    parts = [f"{name} {m:.2f}±{s:.2f}"
             for name, m, s in zip(METRIC_NAMES, values.mean(axis=0), values.std(axis=0))]
    return f"summary ({len(results)} seed(s)): " + ", ".join(parts)


def _train_job(job) -> SeedResult:
    cfg, parts, seed, variant, run_dir = job
    train_set, val_set, test_set = parts
    model_cfg = cfg.model_config(train_set.seq_len, train_set.n_channels, train_set.n_classes,
                                 variant)
    model = build_variant(model_cfg, seed)
    _, log = train(model, train_set, val_set, cfg.train_config(seed))
    report = evaluate(model, test_set)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_params(model, run_dir / "checkpoint.bin")
    log.write_csv(run_dir / "runlog.csv")
    return SeedResult(seed, variant, report, log)


def _seed_dir(base: Path, seed: int, n_seeds: int) -> Path:
    return base if n_seeds == 1 else base / f"seed{seed}"


def _run_seeds(cfg: RunConfig, parts, variant: str, base: Path) -> list[SeedResult]:
    jobs = [(cfg, parts, seed, variant, _seed_dir(base, seed, len(cfg.seeds))) for seed in cfg.seeds]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(job) for job in jobs]


def _prepare(cfg: RunConfig, prefix: str):
    """Load, split and validate before anything is written."""
    dataset = _load_data(cfg)
    parts = split(dataset, cfg.split_plan())
    for variant in (cfg.variants if prefix == "ablate" else (cfg.variant,)):
        cfg.model_config(dataset.seq_len, dataset.n_channels, dataset.n_classes, variant)
    run_dir = Path(cfg.outdir) / _run_id(prefix, cfg)
    return parts, run_dir


# -- subcommands ----------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out=sys.stdout) -> int:
    parts, run_dir = _prepare(cfg, "train")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.config").write_text(cfg.dumps(), encoding="utf-8")
    results = _run_seeds(cfg, parts, cfg.variant, run_dir)
    (run_dir / "metrics.tsv").write_text(_metrics_table(results), encoding="utf-8")
    for r in results:
        print(f"seed {r.seed}: best epoch {r.log.best_epoch} of {len(r.log.epochs)}, "
              f"test " + " ".join(f"{k}={v:.4f}" for k, v in r.test.as_dict().items()), file=out)
    print(summary_line(results), file=out)
    print(f"artifacts: {run_dir}", file=out)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out=sys.stdout) -> int:
    parts, run_dir = _prepare(cfg, "ablate")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.config").write_text(cfg.dumps(), encoding="utf-8")
    header = ["variant"] + [f"{m}{suffix}" for m in METRIC_NAMES for suffix in ("", "_std")]
    rows = ["\t".join(header)]
    for variant in cfg.variants:
        results = _run_seeds(cfg, parts, variant, run_dir / variant)
        (run_dir / variant / "metrics.tsv").write_text(_metrics_table(results), encoding="utf-8")
        values = np.array([r.test.as_tuple() for r in results])
        cells = [variant]
        for mean, std in zip(values.mean(axis=0), values.std(axis=0)):
            cells += [_fmt(mean), _fmt(std)]
        rows.append("\t".join(cells))
        print(f"{variant}: " + summary_line(results), file=out)
    table = "\n".join(rows) + "\n"
    (run_dir / "ablation.tsv").write_text(table, encoding="utf-8")
    out.write(table)
    print(f"artifacts: {run_dir}", file=out)
    return EXIT_OK


def _find_config(checkpoint: Path) -> Path:
    for parent in list(checkpoint.parents)[:3]:
        candidate = parent / "resolved.config"
        if candidate.is_file():
            return candidate
    raise ConfigError(f"no resolved.config found near {checkpoint}; pass --config")


def cmd_eval(checkpoint: str, config: str | None, overrides: dict[str, str], part: str,
             out=sys.stdout) -> int:
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    cfg = resolve(read_config_file(config or _find_config(ckpt)), overrides)
    model_cfg, arrays = load_params(ckpt)
    dataset = _load_data(cfg)
    if part == "all":
        target = dataset
    else:
        target = dict(zip(("train", "val", "test"), split(dataset, cfg.split_plan())))[part]
    model = Medformer(model_cfg, seed=0)
    model.load_state_dict(arrays)
    report = evaluate(model, target)
    out.write("\t".join(METRIC_NAMES) + "\n")
    out.write("\t".join(_fmt(v) for v in report.as_tuple()) + "\n")
    return EXIT_OK


def cmd_synth(args, out=sys.stdout) -> int:
    path = Path(args.out)
    ds = synth_generate(args.n_subjects, args.samples_per_subject, args.seq_len, args.channels,
                        args.classes, args.difficulty, args.seed, args.sampling_rate)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    print(f"wrote {len(ds)} samples ({ds.seq_len}x{ds.n_channels}, K={ds.n_classes}) to {path}",
          file=out)
    return EXIT_OK


def cmd_bench(args, out=sys.stdout) -> int:
    seq_lens = sorted(args.seq_lens)
    for t in seq_lens:
        if t < 4:
            raise ConfigError(f"bench sequence lengths must be >= 4, got {t}")
    settings = dict(T=seq_lens, modes=args.modes, d_model=args.d_model, n_heads=args.heads,
                    batch=args.batch, repeats=args.repeats, warmup=args.warmup,
                    max_tokens=args.max_tokens, seed=args.seed)
    run_id = args.run_id or "bench-" + hashlib.sha256(repr(sorted(settings.items())).encode()).hexdigest()[:10]
    run_dir = Path(args.outdir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.config").write_text(
        "".join(f"{k}={format_value(v)}\n" for k, v in settings.items()), encoding="utf-8")
    points = bench_mod.run_complexity_sweep(
        seq_lens, bench_mod.power_series, args.modes, csv_path=run_dir / "bench.csv",
        d_model=args.d_model, n_heads=args.heads, batch=args.batch, repeats=args.repeats,
        warmup=args.warmup, max_tokens=args.max_tokens, seed=args.seed)
    out.write(bench_mod.points_to_csv(points))
    print(f"artifacts: {run_dir}", file=out)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override its keys")
    for name in field_names():
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medformer", description="Multi-granularity patching transformer "
                     "for medical time-series classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--n-subjects", type=int, default=10)
    p.add_argument("--samples-per-subject", type=int, default=100)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--difficulty", type=float, default=0.2)
    p.add_argument("--sampling-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)

    for name, text in (("train", "train over a seed list and evaluate on the test split"),
                       ("ablate", "train every ablation variant and tabulate test metrics")):
        _add_run_flags(sub.add_parser(name, help=text))

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--part", choices=("train", "val", "test", "all"), default="test")
    _add_run_flags(p)

    p = sub.add_parser("bench", help="attention cost sweep, two-stage vs naive")
    p.add_argument("--outdir", default="runs")
    p.add_argument("--run-id", default="")
    p.add_argument("--seq-lens", type=_int_list, default=list(bench_mod.DEFAULT_T))
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m],
                   default=list(bench_mod.MODES))
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--max-tokens", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _run_config(args) -> tuple[dict[str, str], dict[str, str]]:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {name: getattr(args, name) for name in field_names() if getattr(args, name) is not None}
    return file_values, overrides


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.command == "synth":
            return cmd_synth(args, out)
        if args.command == "bench":
            return cmd_bench(args, out)
        file_values, overrides = _run_config(args)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.config, overrides, args.part, out)
        cfg = resolve(file_values, overrides)
        return cmd_train(cfg, out) if args.command == "train" else cmd_ablate(cfg, out)
    except (UsageError, ConfigError, FormatError) as exc:
        kind = "UsageError" if isinstance(exc, UsageError) else type(exc).__name__
        print(f"error: {kind}: {_one_line(exc)}", file=err)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=err)
        return EXIT_RUNTIME


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
