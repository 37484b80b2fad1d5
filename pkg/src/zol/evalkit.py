"""Reward-reconstruction heatmaps, correlation scoring and FB-vs-ZOL comparisons."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adapt import ZolParams, fb_latent, with_seed, zol_adapt
from .envs import RAD_MAX, RAD_MIN, OfflineDataset, TaskReward, task_reward
from .errors import DegenerateError
from .fbmodel import FBModel, project_z, reconstruct_reward
from .mdporacle import TabularMDP, TabularPolicy, TabularReward, occupancy_exact


@dataclass
class HeatmapGrid:
    resolution: int
    values: np.ndarray  # (resolution, resolution); NaN outside the annulus
    mask: np.ndarray
    bound: float = RAD_MAX

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.resolution, self.bound)

    def masked_values(self) -> np.ndarray:
        return self.values[self.mask]


def cell_centers(resolution: int, bound: float = RAD_MAX) -> np.ndarray:
    """(resolution, resolution, 2) cell centers over [-bound, bound]^2; row index is y."""
    edges = -bound + (np.arange(resolution) + 0.5) * (2 * bound / resolution)
    xx, yy = np.meshgrid(edges, edges)
    return np.stack([xx, yy], axis=-1)


def annulus_mask(centers: np.ndarray, rad_min=RAD_MIN, rad_max=RAD_MAX) -> np.ndarray:
    r = np.linalg.norm(centers, axis=-1)
    return (r >= rad_min) & (r <= rad_max)


def render_heatmap(model: FBModel, z, resolution: int = 64) -> HeatmapGrid:
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    centers = cell_centers(resolution)
    mask = annulus_mask(centers)
    values = np.full((resolution, resolution), np.nan)
    values[mask] = reconstruct_reward(model, centers[mask], z)
    return HeatmapGrid(resolution, values, mask)


def true_reward_grid(task: TaskReward, resolution: int = 64) -> HeatmapGrid:
    centers = cell_centers(resolution)
    mask = annulus_mask(centers)
    values = np.full((resolution, resolution), np.nan)
    values[mask] = task_reward(task, centers[mask])
    return HeatmapGrid(resolution, values, mask)


def reconstruction_correlation(grid: HeatmapGrid, task: TaskReward) -> float:
    """Pearson correlation of grid values with the true reward over annulus cells."""
    pred = grid.masked_values()
    if pred.size < 2:
        raise DegenerateError("need at least two masked cells")
    true = np.asarray(task_reward(task, grid.centers[grid.mask]), dtype=np.float64)
    if np.std(pred) == 0 or np.std(true) == 0:
        raise DegenerateError("zero variance on one side of the correlation")
    return float(np.clip(np.corrcoef(pred, true)[0, 1], -1.0, 1.0))


def tabular_return(mdp: TabularMDP, policy: TabularPolicy, reward: TabularReward) -> float:
    return float(occupancy_exact(mdp, policy) @ reward.values.ravel())


@dataclass
class ComparisonRow:
    seed: int
    corr_fb: float
    corr_zol: float

    @property
    def delta(self) -> float:
        return self.corr_zol - self.corr_fb


@dataclass
class ComparisonReport:
    task_name: str
    rows: list = field(default_factory=list)
    heatmaps: dict = field(default_factory=dict)  # seed -> (fb grid, zol grid)
    results: dict = field(default_factory=dict)  # seed -> AdaptResult

    @property
    def seeds(self) -> list:
        return [r.seed for r in self.rows]

    @property
    def corr_fb(self) -> float:
        return float(np.mean([r.corr_fb for r in self.rows]))

    @property
    def corr_zol(self) -> float:
        return float(np.mean([r.corr_zol for r in self.rows]))

    @property
    def delta(self) -> float:
        return float(np.mean([r.delta for r in self.rows]))


def compare_fb_vs_zol(model: FBModel, dataset: OfflineDataset, task: TaskReward,
                      params: ZolParams, seeds, resolution: int = 64) -> ComparisonReport:
    report = ComparisonReport(task.name)
    for seed in seeds:
        p = with_seed(params, int(seed))
        # same final projection as the adapted latent, so T = 0 scores identically
        z_fb = project_z(fb_latent(model, dataset, task, p).z)
        result = zol_adapt(model, dataset, task, p)
        grid_fb = render_heatmap(model, z_fb, resolution)
        grid_zol = render_heatmap(model, result.z_final, resolution)
        report.rows.append(ComparisonRow(int(seed), reconstruction_correlation(grid_fb, task),
                                         reconstruction_correlation(grid_zol, task)))
        report.heatmaps[int(seed)] = (grid_fb, grid_zol)
        report.results[int(seed)] = result
    return report


def write_heatmap_csv(grid: HeatmapGrid, path) -> None:
    np.savetxt(path, grid.values, delimiter=",", fmt="%.17g")


def write_heatmap_pgm(grid: HeatmapGrid, path) -> None:
    """Binary P5 graymap, 8-bit, min-max scaled over annulus cells; other cells are 0.

    Rows are written top (largest y) first.
    """
    vals = grid.masked_values()
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 0.0)
    img = np.zeros(grid.values.shape, dtype=np.uint8)
    if hi > lo:
        scaled = np.round(255.0 * (grid.values[grid.mask] - lo) / (hi - lo))
        img[grid.mask] = np.clip(scaled, 0, 255).astype(np.uint8)
    img = img[::-1]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_report_csv(report: ComparisonReport, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["task", "seed", "corr_fb", "corr_zol", "delta"])
        for r in report.rows:
            out.writerow([report.task_name, r.seed, repr(r.corr_fb), repr(r.corr_zol),
                          repr(r.delta)])
        out.writerow([report.task_name, "mean", repr(report.corr_fb), repr(report.corr_zol),
                      repr(report.delta)])
