"""``zol`` command line: collect, pretrain, adapt and verify, each driven by one config file.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric or training
failure, 5 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
import warnings
from pathlib import Path

import numpy as np

from .adapt import write_trace_csv, write_vector_csv
from .config import RunConfig
from .envs import (RAD_MAX, RAD_MIN, OfflineDataset, TaskReward, build_gridworld, collect_donut,
                   collect_gridworld, gridworld_tag, parse_env_tag, read_dataset, write_dataset)
from .errors import ConfigError, DegenerateError, FormatError, NumericError
from .evalkit import (compare_fb_vs_zol, write_heatmap_csv, write_heatmap_pgm,
                      write_report_csv)
from .fbmodel import load_checkpoint, save_checkpoint, train_fb
from .verify import run_suite

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5
DATASET_FILE = "dataset.zold"
CHECKPOINT_FILE = "model.zolm"
SMOOTH_WINDOW = 100


class VerificationFailed(Exception):
    pass


def run_dir(base: Path, command: str, seed: int) -> Path:
    if not base.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {base}")
    path = base / f"{command}-seed{seed}"
    path.mkdir(exist_ok=True)
    return path


def _dataset_path(cfg: RunConfig, base: Path) -> Path:
    return Path(cfg.dataset) if cfg.dataset else base / f"collect-seed{cfg.seed}" / DATASET_FILE


def _checkpoint_path(cfg: RunConfig, base: Path) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return base / f"pretrain-seed{cfg.seed}" / CHECKPOINT_FILE


def support_stats(dataset: OfflineDataset, resolution: int = 64) -> tuple[float, float]:
    """(mean state norm, fraction of annulus cells or grid states visited)."""
    kind, _ = parse_env_tag(dataset.env_tag)
    if kind == "gridworld":
        visited = np.unique(dataset.s.argmax(axis=1)).size
        return float(np.linalg.norm(dataset.s, axis=1).mean()), visited / dataset.state_dim
    edges = np.linspace(-RAD_MAX, RAD_MAX, resolution + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    xx, yy = np.meshgrid(centers, centers)
    radius = np.hypot(xx, yy)
    inside = (radius >= RAD_MIN) & (radius <= RAD_MAX)
    hist, _, _ = np.histogram2d(dataset.s[:, 1], dataset.s[:, 0], bins=[edges, edges])
    coverage = float(((hist > 0) & inside).sum() / inside.sum())
    return float(np.linalg.norm(dataset.s, axis=1).mean()), coverage


def cmd_collect(cfg: RunConfig, base: Path) -> Path:
    out = run_dir(base, "collect", cfg.seed)
    if cfg.env == "donut":
        dataset = collect_donut(cfg.n_records, cfg.sigma, cfg.seed)
    else:
        density = cfg.wall_density if cfg.wall_density > 0 else None
        mdp = build_gridworld(cfg.grid_width, cfg.grid_height, cfg.gamma, density, cfg.seed)
        dataset = collect_gridworld(mdp, cfg.n_records, cfg.seed,
                                    gridworld_tag(cfg.grid_width, cfg.grid_height))
    path = out / DATASET_FILE
    write_dataset(dataset, path)
    print(f"wrote {path}")
    print(f"records {dataset.count}")
    if dataset.count == 0:
        print("warning: empty dataset (n_records = 0)", file=sys.stderr)
        return path
    mean_norm, coverage = support_stats(dataset, cfg.resolution)
    print(f"mean_state_norm {mean_norm:.6f}")
    print(f"coverage {coverage:.6f}")
    return path


def _smoothed(losses: list[float]) -> tuple[float, float]:
    k = min(SMOOTH_WINDOW, len(losses))
    return float(np.mean(losses[:k])), float(np.mean(losses[-k:]))


def cmd_pretrain(cfg: RunConfig, base: Path) -> Path:
    dataset = read_dataset(_dataset_path(cfg, base))
    if not cfg.full_batch and dataset.count < cfg.fb_batch_size:
        raise ConfigError(f"dataset has {dataset.count} records, fewer than fb_batch_size "
                          f"{cfg.fb_batch_size}")
    out = run_dir(base, "pretrain", cfg.seed)
    model, losses = train_fb(dataset, cfg.fb_config())
    path = out / CHECKPOINT_FILE
    save_checkpoint(model, path)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows((i, repr(v)) for i, v in enumerate(losses, start=1))
    print(f"wrote {path}")
    if losses:
        first, last = _smoothed(losses)
        print(f"smoothed_loss initial {first:.6f} final {last:.6f}")
    else:
        print("no training steps; checkpoint holds the initialized model")
    return path


def cmd_adapt(cfg: RunConfig, base: Path) -> Path:
    cfg.check_task()
    task = TaskReward(cfg.task, tuple(cfg.task_params))
    dataset = read_dataset(_dataset_path(cfg, base))
    if parse_env_tag(dataset.env_tag)[0] != "donut":
        raise ConfigError("adapt renders annulus heatmaps and needs a donut dataset")
    if dataset.count:
        task(dataset.s[:1])  # surfaces bad task parameters before any work
    model = load_checkpoint(_checkpoint_path(cfg, base))
    out = run_dir(base, "adapt", cfg.seed)
    report = compare_fb_vs_zol(model, dataset, task, cfg.zol_params(), cfg.seeds, cfg.resolution)
    for seed in report.seeds:
        sub = out / f"seed{seed}"
        sub.mkdir(exist_ok=True)
        result = report.results[seed]
        grid_fb, grid_zol = report.heatmaps[seed]
        write_vector_csv(result.z_init, sub / "z_fb.csv")
        write_vector_csv(result.z_final, sub / "z_zol.csv")
        write_trace_csv(result, sub / "trace.csv")
        for name, grid in (("fb", grid_fb), ("zol", grid_zol)):
            write_heatmap_csv(grid, sub / f"heatmap_{name}.csv")
            write_heatmap_pgm(grid, sub / f"heatmap_{name}.pgm")
    write_report_csv(report, out / "report.csv")
    for row in report.rows:
        print(f"seed {row.seed} corr_fb {row.corr_fb:.6f} corr_zol {row.corr_zol:.6f} "
              f"delta {row.delta:+.6f}")
    print(f"mean corr_fb {report.corr_fb:.6f} corr_zol {report.corr_zol:.6f} "
          f"delta {report.delta:+.6f}")
    return out / "report.csv"


def cmd_verify(cfg: RunConfig, base: Path) -> Path:
    report = run_suite(cfg.seed, cfg.verify_instances, cfg.verify_max_states,
                       cfg.verify_max_actions)
    out = run_dir(base, "verify", cfg.seed)
    text = "\n".join(report.lines()) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    if not report.passed:
        name, check = report.failures()[0]
        raise VerificationFailed(f"check {name} failed on instance {check.worst_instance} "
                                 f"(seed {cfg.seed}): max error {check.max_error:.3e}")
    return out / "report.txt"


COMMANDS = {"collect": cmd_collect, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="config file (key = value lines); defaults apply when omitted")
        p.add_argument("--out", type=Path, default=Path("."),
                       help="existing directory that receives the per-run folder")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, DegenerateError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
