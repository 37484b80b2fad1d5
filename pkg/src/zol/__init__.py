"""Zero-shot latent optimization on forward-backward successor representations."""
from .adapt import (AdaptResult, Diagnostics, ZolParams, infer_task_latent, ratio_weights,
                    zol_adapt, zol_objective)
from .config import RunConfig
from .envs import (OfflineDataset, TaskReward, build_gridworld, collect_donut, collect_gridworld,
                   read_dataset, write_dataset)
from .errors import (ConfigError, DegenerateError, DivergedTrainingError, FormatError,
                     NumericError, PreconditionError, ShapeError, ZolError)
from .estimators import FBRepresentation, ZOLAdapter
from .evalkit import compare_fb_vs_zol, reconstruction_correlation, render_heatmap
from .fbmodel import (FBModel, FBTrainConfig, act_greedy, load_checkpoint, project_z,
                      save_checkpoint, train_fb)
from .mdporacle import (TabularMDP, TabularPolicy, TabularReward, density_ratio_exact,
                        occupancy_exact, q_from_successor, successor_measure_exact)

__all__ = [
    "AdaptResult", "Diagnostics", "ZolParams", "infer_task_latent", "ratio_weights",
    "zol_adapt", "zol_objective", "RunConfig", "OfflineDataset", "TaskReward",
    "build_gridworld", "collect_donut", "collect_gridworld", "read_dataset", "write_dataset",
    "ConfigError", "DegenerateError", "DivergedTrainingError", "FormatError", "NumericError",
    "PreconditionError", "ShapeError", "ZolError", "FBRepresentation", "ZOLAdapter",
    "compare_fb_vs_zol", "reconstruction_correlation", "render_heatmap", "FBModel",
    "FBTrainConfig", "act_greedy", "load_checkpoint", "project_z", "save_checkpoint",
    "train_fb", "TabularMDP", "TabularPolicy", "TabularReward", "density_ratio_exact",
    "occupancy_exact", "q_from_successor", "successor_measure_exact",
]
