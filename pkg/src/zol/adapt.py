"""Test-time latent adaptation with the FB-induced stationary density ratio.

The ratio for a candidate latent ``z`` is linear in the backward embedding,
``w(s) ~ (1 - gamma) B(s)^T mu(z)``, where ``mu(z)`` averages the forward
embedding over cached start states. Weights are made positive with softplus,
self-normalized over the batch and clipped, then used to reweight centered
rewards. ``z`` follows Adam on the penalized objective.
"""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Graph, adam_step, clip_grad_norm
from .envs import DonutWorld, OfflineDataset, parse_env_tag
from .errors import NumericError
from .fbmodel import FBModel, act_greedy, project_z


class DegenerateTaskWarning(UserWarning):
    pass


@dataclass
class ZolParams:
    lr: float = 5e-4
    steps: int = 200
    lambda_chi: float = 0.001
    lambda_trust: float = 0.02
    weight_clip: float = 100.0
    reset_samples: int = 256
    batch_size: int = 1024
    norm_eps: float = 1e-6
    grad_clip: float = 10.0
    seed: int = 0
    n_labeled: int = 4096
    center: str = "batch"  # or "global"

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0:
            raise ValueError("lr must be positive and steps non-negative")
        if self.lambda_chi < 0 or self.lambda_trust < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.weight_clip <= 0 or self.norm_eps <= 0 or self.grad_clip <= 0:
            raise ValueError("weight_clip, norm_eps and grad_clip must be positive")
        if self.reset_samples < 1 or self.batch_size < 1 or self.n_labeled < 1:
            raise ValueError("sample counts must be at least 1")
        if self.center not in ("batch", "global"):
            raise ValueError("center must be 'batch' or 'global'")


class TaskLatent(NamedTuple):
    z: np.ndarray
    embedding: np.ndarray
    fallback: bool


@dataclass
class ForwardExpectation:
    mu: np.ndarray
    reset_states: np.ndarray


@dataclass
class Diagnostics:
    j_ret: float
    chi2: float
    trust: float
    total: float
    w_min: float
    w_mean: float
    w_max: float


@dataclass
class AdaptResult:
    z_init: np.ndarray
    z_final: np.ndarray
    trace: list = field(default_factory=list)
    fallback: bool = False
    wall_clock: float = 0.0

    @property
    def steps_run(self) -> int:
        return len(self.trace)


def infer_task_latent(model: FBModel, states, rewards, a_idx=None, seed: int = 0) -> TaskLatent:
    """Reward-weighted mean of B over labeled samples, projected to the latent sphere.

    An all-zero embedding falls back to a seeded random latent and warns.
    """
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if rewards.size == 0:
        raise ValueError("need at least one labeled sample")
    emb = model.backward_embed(states, a_idx).T @ rewards / rewards.size
    if not np.any(emb):
        warnings.warn("task embedding is zero; using a random latent", DegenerateTaskWarning)
        z = project_z(np.random.default_rng(seed).normal(size=model.d))
        return TaskLatent(z, emb, True)
    return TaskLatent(project_z(emb), emb, False)


def _mu_node(model: FBModel, reset_states: np.ndarray, z: dc.Var) -> dc.Var:
    # greedy start actions are held fixed while differentiating through F
    a0 = act_greedy(model, np.atleast_2d(reset_states), z.value)
    n = a0.shape[0]
    head = np.hstack([reset_states, model.one_hot(a0)])
    z_rows = np.ones((n, 1)) * z
    f = model.F.build(z.graph, dc.concat([head, z_rows], axis=1))
    return dc.mean(f, axis=0)


def estimate_forward_expectation(model: FBModel, reset_states, z) -> ForwardExpectation:
    reset_states = np.atleast_2d(np.asarray(reset_states, dtype=np.float64))
    a0 = act_greedy(model, reset_states, z)
    mu = model.forward_embed(reset_states, a0, z).mean(axis=0)
    return ForwardExpectation(mu, reset_states)


def _weights_nodes(mu, b_batch: np.ndarray, gamma: float, params: ZolParams):
    logits = (1.0 - gamma) * (b_batch @ mu)
    w_tilde = dc.softplus(logits)
    w_pre = w_tilde / (dc.mean(w_tilde) + params.norm_eps)
    return dc.minimum(w_pre, params.weight_clip), w_pre, logits


def ratio_weights(model: FBModel, mu, batch_states, params: ZolParams, a_idx=None):
    """Shaped weights and raw logits for a batch. Returns ``(weights, logits)`` arrays."""
    g = Graph()
    b_batch = model.backward_embed(batch_states, a_idx)
    w, _, logits = _weights_nodes(g.const(mu), b_batch, model.gamma, params)
    return w.value.copy(), logits.value.copy()


def ratio_weights_preclip(model: FBModel, mu, batch_states, params: ZolParams, a_idx=None):
    g = Graph()
    b_batch = model.backward_embed(batch_states, a_idx)
    _, w_pre, _ = _weights_nodes(g.const(mu), b_batch, model.gamma, params)
    return w_pre.value.copy()


def zol_objective(model: FBModel, z: dc.Var, states, rewards, reset_states, params: ZolParams,
                  z_init, r_center: float | None = None, a_idx=None, b_batch=None):
    """Loss node ``-J + lambda_chi chi2 + lambda_trust trust`` and its diagnostics.

    ``z`` must be a node of its own graph. Rewards are centered on the batch
    mean unless ``r_center`` is given.
    """
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if b_batch is None:
        b_batch = model.backward_embed(states, a_idx)
    centered = rewards - (rewards.mean() if r_center is None else r_center)
    mu = _mu_node(model, np.atleast_2d(reset_states), z)
    w, _, _ = _weights_nodes(mu, b_batch, model.gamma, params)
    j_ret = dc.mean(w * centered)
    chi2 = dc.mean(dc.square(w - 1.0))
    scale = np.sqrt(model.d)
    trust = dc.vsum(dc.square(z * (scale / dc.l2norm(z)) - project_z(z_init)))
    loss = -j_ret + params.lambda_chi * chi2 + params.lambda_trust * trust
    wv = w.value
    diag = Diagnostics(float(j_ret.value), float(chi2.value), float(trust.value),
                       float(loss.value), float(wv.min()), float(wv.mean()), float(wv.max()))
    if not np.isfinite(diag.total):
        raise NumericError("non-finite ZOL objective", diag)
    return loss, diag


def reset_sampler_for(dataset: OfflineDataset) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Start-state law for a dataset: the donut support sampler, rho0 for gridworlds."""
    kind, kw = parse_env_tag(dataset.env_tag)
    if kind == "donut":
        world = DonutWorld(support_sigma=float(kw.get("sigma", 0.6)))
        return lambda rng, n: world.sample_starts(n, rng)
    if kind == "gridworld":
        eye = np.eye(dataset.state_dim)
        return lambda rng, n: eye[rng.integers(0, dataset.state_dim, size=n)]
    return lambda rng, n: dataset.s[rng.integers(0, dataset.count, size=n)]


def labeled_sample(dataset: OfflineDataset, labeler, n: int, rng: np.random.Generator):
    """States drawn from the dataset (without replacement when possible) and their rewards."""
    if dataset.count == 0:
        raise ValueError("dataset is empty")
    replace_ = n > dataset.count
    idx = rng.choice(dataset.count, size=n, replace=replace_)
    states = dataset.s[idx]
    return states, np.asarray(labeler(states), dtype=np.float64).reshape(-1)


def run_adaptation(model: FBModel, z0: np.ndarray, draw_batch, reset_states: np.ndarray,
                   params: ZolParams, rng: np.random.Generator, r_center: float | None = None,
                   fallback: bool = False) -> AdaptResult:
    """Adam on the ZOL loss from ``z0``; ``draw_batch(rng)`` yields (states, rewards)."""
    start = time.perf_counter()
    z = np.array(z0, dtype=np.float64)
    opt = AdamState.zeros(model.d)
    trace = []
    for step in range(params.steps):
        states, rewards = draw_batch(rng)
        g = Graph()
        z_var = g.param(z)
        try:
            loss, diag = zol_objective(model, z_var, states, rewards, reset_states, params, z0,
                                       r_center)
            grad = clip_grad_norm(g.backward(loss)[0], params.grad_clip)
            z = adam_step(z, grad, opt, params.lr)
        except NumericError as exc:
            last = trace[-1] if trace else None
            raise NumericError(f"adaptation diverged at step {step}: {exc}", last) from exc
        if not np.all(np.isfinite(z)) or not np.any(z):
            raise NumericError(f"adaptation diverged at step {step}", diag)
        trace.append(diag)
    return AdaptResult(np.array(z0), project_z(z), trace, fallback,
                       time.perf_counter() - start)


def zol_adapt(model: FBModel, dataset: OfflineDataset, labeler, params: ZolParams,
              reset_sampler=None) -> AdaptResult:
    """Zero-shot inference followed by ZOL latent optimization; deterministic in ``params.seed``."""
    rng = np.random.default_rng(params.seed)
    states, rewards = labeled_sample(dataset, labeler, params.n_labeled, rng)
    task = infer_task_latent(model, states, rewards, seed=params.seed)
    sampler = reset_sampler or reset_sampler_for(dataset)
    reset_states = np.atleast_2d(sampler(rng, params.reset_samples))
    r_center = float(rewards.mean()) if params.center == "global" else None

    def draw_batch(r):
        idx = r.integers(0, dataset.count, size=params.batch_size)
        s = dataset.s[idx]
        return s, np.asarray(labeler(s), dtype=np.float64).reshape(-1)

    return run_adaptation(model, task.z, draw_batch, reset_states, params, rng, r_center,
                          task.fallback)


def fb_latent(model: FBModel, dataset: OfflineDataset, labeler, params: ZolParams) -> TaskLatent:
    """The vanilla zero-shot latent that :func:`zol_adapt` starts from."""
    rng = np.random.default_rng(params.seed)
    states, rewards = labeled_sample(dataset, labeler, params.n_labeled, rng)
    return infer_task_latent(model, states, rewards, seed=params.seed)


TRACE_COLUMNS = ("step", "J_ret", "chi2", "trust", "total", "w_min", "w_mean", "w_max")


def write_trace_csv(result: AdaptResult, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRACE_COLUMNS)
        for i, d in enumerate(result.trace, start=1):
            out.writerow([i] + [repr(v) for v in asdict(d).values()])


def write_vector_csv(z, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["index", "value"])
        for i, v in enumerate(np.asarray(z, dtype=np.float64)):
            out.writerow([i, repr(float(v))])


def with_seed(params: ZolParams, seed: int) -> ZolParams:
    return replace(params, seed=seed)
