"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .data import DataError
from .datasets import ingest, load_split
from .diffusion import NumericalError
from .evaluate import (
    ablate,
    bench_relative,
    evaluate,
    format_table,
    write_metrics_csv,
    write_timing_csv,
)
from .model import CheckpointError, EPDModel
from .pipeline import TrainingDiverged, predict, train
from .plotting import export_plots

log = logging.getLogger("epd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(path, pairs):
    try:
        cfg = config_mod.load(path)
        return cfg.updated(_overrides(pairs)) if pairs else cfg
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _write_table(text: str, csv_path: Path) -> None:
    print(text)
    print(f"\nCSV: {csv_path}")


def cmd_ingest(args) -> int:
    index = ingest(args.directory, args.out, args.format.split(","), args.t_past, args.t_future, args.stride)
    rows = [{"scene": s["name"], "group": s["group"], "windows": s["windows"], "malformed": len(s["malformed_lines"])}
            for s in index["scenes"]]
    csv_path = Path(args.out) / "scenes.csv"
    with open(csv_path, "w") as f:
        f.write("scene,group,windows,malformed\n")
        for r in rows:
            f.write(f"{r['scene']},{r['group']},{r['windows']},{r['malformed']}\n")
    _write_table(format_table(rows, ["scene", "group", "windows", "malformed"]), csv_path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config, args.set)
    split = load_split(cfg)
    out = Path(args.out)
    model = None
    if args.resume:
        stage_dirs = sorted(out.glob("stage*"), key=lambda p: int(p.name[5:]) if p.name[5:].isdigit() else -1)
        if stage_dirs:
            model = EPDModel.load(stage_dirs[-1])
            if model.config.hash() != cfg.hash():
                raise UsageError(f"{stage_dirs[-1]} was produced by a different config")
            log.info("resuming from %s (stages %s)", stage_dirs[-1], model.stages_completed)
    result = train(cfg, split.train, model, checkpoint_dir=out)
    result.model.save(out / "final", losses=result.losses)
    rows = [{"stage": s, "steps": int(len(result.stage_losses(s))),
             "first_loss": float(result.stage_losses(s)[0]), "last_loss": float(result.stage_losses(s)[-1])}
            for s in sorted(result.seconds) if len(result.stage_losses(s))]
    csv_path = out / "final" / "losses.csv"
    _write_table(format_table(rows, ["stage", "steps", "first_loss", "last_loss"]), csv_path)
    return EXIT_OK


def _model_and_split(path):
    model = EPDModel.load(path)
    return model, load_split(model.config)


def cmd_eval(args) -> int:
    model, split = _model_and_split(args.checkpoint)
    windows = split.part(args.split)
    rec = evaluate(model, windows, args.k, args.seed, f"{split.name}/{args.split}", args.mode,
                   joint=model.config.eval.joint_min)
    out = Path(args.out or Path(args.checkpoint) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv([rec], out / "metrics.csv")
    write_timing_csv([rec], out / "timing.csv")
    table = format_table([{"dataset": rec.dataset, "mode": rec.mode, "K": rec.k, "windows": rec.windows,
                           "minADE": rec.min_ade, "minFDE": rec.min_fde, "invocations": rec.invocations,
                           "seconds": rec.wall_time}],
                         ["dataset", "mode", "K", "windows", "minADE", "minFDE", "invocations", "seconds"])
    _write_table(table, out / "metrics.csv")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, split = _model_and_split(args.checkpoint)
    rows = bench_relative(model, split.part(args.split), args.k, args.seed, max_windows=args.windows,
                          repeats=args.repeats)
    out = Path(args.out or Path(args.checkpoint) / "bench")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bench.csv"
    with open(csv_path, "w") as f:
        f.write("name,mode,seconds_per_window,relative_time,invocations_per_window\n")
        for r in rows:
            f.write(f"{r.name},{r.mode},{r.seconds_per_window:.6f},{r.relative_time:.4f},{r.invocations_per_window:g}\n")
    table = format_table([{"model": r.name, "rel. time": r.relative_time, "s/window": r.seconds_per_window,
                           "denoiser calls/window": f"{r.invocations_per_window:g}"} for r in rows],
                         ["model", "rel. time", "s/window", "denoiser calls/window"])
    _write_table(table, csv_path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args.config, args.set)
    split = load_split(cfg)
    result = ablate(cfg, split.train, split.test, cfg.eval.k, cfg.eval.seed, split.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w") as f:
        f.write("use_sc,use_pd,min_ade,min_fde,invocations\n")
        for c, r in result.rows:
            f.write(f"{c.use_sc},{c.use_pd},{r.min_ade!r},{r.min_fde!r},{r.invocations}\n")
    _write_table(result.table(), csv_path)
    return EXIT_OK


def cmd_plot(args) -> int:
    model, split = _model_and_split(args.checkpoint)
    windows = split.part(args.split)
    if not 0 <= args.window_id < len(windows):
        raise UsageError(f"--window-id must lie in [0, {len(windows)}) for split {args.split!r}")
    w = windows[args.window_id]
    pred = predict(w, model, args.k, args.seed)
    dists = ([("plan", pred.plan)] if pred.plan is not None else []) + [("denoised", pred.distribution)]
    out = Path(args.out or Path(args.checkpoint) / f"window{args.window_id}.svg")
    svg, csv_path = export_plots(dists, pred.samples, w.ego_future, out, past=w.ego_past,
                                 title=f"{split.name} {args.split} window {args.window_id}")
    print(f"SVG: {svg}\nCSV: {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epd", description="Energy-plan denoising trajectory prediction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="parse raw trajectory files into a window cache")
    s.add_argument("directory")
    s.add_argument("--format", default="frame,id,x,y", help="column order of the raw files")
    s.add_argument("--out", required=True)
    s.add_argument("--t-past", type=int, default=8)
    s.add_argument("--t-future", type=int, default=12)
    s.add_argument("--stride", type=int, default=1)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="run the training stages")
    s.add_argument("config")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    s.add_argument("--resume", action="store_true", help="continue from the latest stage checkpoint in --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="best-of-K ADE/FDE on a split")
    s.add_argument("checkpoint")
    s.add_argument("--split", default="test", choices=["train", "validation", "test"])
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", default="full", choices=["full", "plan_only", "from_noise", "baseline"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="relative inference time of full, plan-only and from-noise paths")
    s.add_argument("checkpoint")
    s.add_argument("--split", default="test", choices=["train", "validation", "test"])
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--windows", type=int, default=20)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("ablate", help="train and compare SC-only, PD-only and full variants")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot", help="SVG of plan/denoised ellipses, samples and truth for one window")
    s.add_argument("checkpoint")
    s.add_argument("--window-id", type=int, required=True)
    s.add_argument("--split", default="test", choices=["train", "validation", "test"])
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"epd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NumericalError, FloatingPointError) as exc:
        print(f"epd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError, KeyError, ValueError) as exc:
        print(f"epd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
