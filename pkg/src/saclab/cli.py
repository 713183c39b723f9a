"""``saclab`` command line: train, eval-roa, surface, compare.

Exit codes: 0 success, 2 configuration or file-format problem, 3 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from .agent import ObjectiveMode
from .config import RunConfig, load_config, with_overrides
from .errors import ConfigError, FormatError, NumericError
from .stability import (atomic_write_text, export_plot_data, grid_from_name, roa_percent,
                        surface_build)
from .trainer import Trainer, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("saclab")


def _fmt_from_path(path: str) -> str:
    return "json" if path.lower().endswith(".json") else "csv"


def _err(msg: str) -> None:
    print(f"saclab: error: {msg}", file=sys.stderr)


def _load_run_config(path: str, seed: Optional[int], overrides: Sequence[str]) -> RunConfig:
    cfg = load_config(path)
    extra = list(overrides or [])
    if seed is not None:
        extra.append(f"trainer.seed={seed}")
    return with_overrides(cfg, extra) if extra else cfg


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.seed, args.override)
    trainer = train_run(cfg)
    rep = trainer.last_report
    if rep is not None:
        print(f"{rep.percent_negative:.2f}")
    return EXIT_OK


def cmd_eval_roa(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    cfg = trainer.config
    grid = grid_from_name(args.grid or cfg.eval.grid, trainer.env_id, cfg.eval.n,
                          cfg.eval.grid_seed)
    K = cfg.eval.K if args.K is None else args.K
    if K < 0:
        raise ConfigError("--K must be >= 0")
    rep = roa_percent(trainer.nlf, trainer.wm, trainer.policy, grid, trainer.eval_goal, K)
    if args.out:
        export_plot_data(rep, args.out, _fmt_from_path(args.out))
    print(f"{rep.percent_negative:.2f}")
    return EXIT_OK


def cmd_surface(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    seed = trainer.config.trainer.seed if args.seed is None else args.seed
    surf, traj = surface_build(trainer.env_id, trainer.env_params, trainer.policy, trainer.wm,
                               trainer.nlf, seed, args.N)
    export_plot_data(surf, args.out, _fmt_from_path(args.out))
    print(f"{traj.length} steps, {len(surf)} rows")
    return EXIT_OK


def parse_modes(text: str) -> List[ObjectiveMode]:
    modes = [ObjectiveMode.parse(m.strip()) for m in text.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes must name at least one objective")
    return modes


def _mode_overrides(mode: ObjectiveMode) -> List[str]:
    return [f"agent.mode={mode.kind}", f"agent.beta={mode.beta}", f"agent.kappa={mode.kappa}",
            f"agent.bonus_clip={mode.bonus_clip}"]


def cmd_compare(args) -> int:
    base = _load_run_config(args.config, None, args.override)
    modes = parse_modes(args.modes)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    run_dir = os.path.splitext(args.out)[0] + "_runs"
    os.makedirs(run_dir, exist_ok=True)
    seed0 = base.trainer.seed
    cells = []
    for mode in modes:
        for k in range(args.seeds):
            seed = seed0 + k
            stem = os.path.join(run_dir, f"{mode.label}_seed{seed}".replace(":", "-"))
            cfg = with_overrides(base, _mode_overrides(mode) + [
                f"trainer.seed={seed}", f"io.metrics={stem}.csv",
                f"io.checkpoint={stem}.sacl"])
            try:
                tr = train_run(cfg)
                cells.append((mode.label, seed, tr.last_report.percent_negative, "ok"))
            except NumericError as exc:
                log.warning("cell %s seed %d aborted: %s", mode.label, seed, exc)
                cells.append((mode.label, seed, None, f"numeric: {exc}"))
    _write_compare(args.out, modes, cells)
    print(open(args.out).read(), end="")
    return EXIT_OK if all(c[3] == "ok" for c in cells) else EXIT_NUMERIC


def _write_compare(path: str, modes, cells) -> None:
    """Summary (mode, mean, std over seeds) plus a per-cell file next to it.

    ``std`` is the population standard deviation across training seeds.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "mean", "std", "seeds", "failed"])
    for mode in modes:
        vals = [c[2] for c in cells if c[0] == mode.label and c[3] == "ok"]
        failed = sum(1 for c in cells if c[0] == mode.label and c[3] != "ok")
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            w.writerow([mode.label, repr(float(arr.mean())), repr(float(arr.std())),
                        len(vals), failed])
        else:
            w.writerow([mode.label, "", "", 0, failed])
    atomic_write_text(path, buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "seed", "roa_percent", "status"])
    for label, seed, pct, status in cells:
        w.writerow([label, seed, "" if pct is None else repr(float(pct)), status])
    atomic_write_text(os.path.splitext(path)[0] + "_cells.csv", buf.getvalue())


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saclab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-roa", help="share of grid states with negative Lie derivative")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--grid", help="reach-cube | pendulum-phase | random:N (default: config)")
    e.add_argument("--K", type=int, help="model samples per state; 0 uses the mean")
    e.add_argument("--out", help="export path (.csv or .json)")
    e.set_defaults(func=cmd_eval_roa)

    s = sub.add_parser("surface", help="export the V / density surface of one rollout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--N", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_surface)

    c = sub.add_parser("compare", help="train a mode by seed matrix and summarise")
    c.add_argument("--config", required=True)
    c.add_argument("--modes", default="sac,sacla:0.5,sacla:1.0,polyc")
    c.add_argument("--seeds", type=int, default=3)
    c.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    c.add_argument("--out", default="compare.csv")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except NumericError as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except OSError as exc:
        _err(f"{exc.filename or ''}: {exc.strerror}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
