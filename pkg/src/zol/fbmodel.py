"""Forward-backward successor representations: networks, TD training, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Graph, Mlp, adam_step
from .envs import OfflineDataset, compass_actions, parse_env_tag
from .errors import DivergedTrainingError, FormatError, NumericError, ShapeError

CHECKPOINT_MAGIC = b"ZOLM"
CHECKPOINT_VERSION = 1


@dataclass
class FBTrainConfig:
    batch_size: int = 256
    train_steps: int = 3000
    lr: float = 1e-3
    polyak_tau: float = 0.01
    ortho_coef: float = 1.0
    latent_mix: float = 0.5
    seed: int = 0
    d: int = 32
    gamma: float = 0.98
    f_hidden: tuple = (128, 128)
    b_hidden: tuple = (128,)
    hidden_activation: str = "relu"
    b_output: str = "identity"
    b_uses_action: bool = False
    full_batch: bool = False  # every step uses the whole dataset in order

    def __post_init__(self):
        if self.batch_size < 1 or self.train_steps < 0 or self.lr <= 0:
            raise ValueError("batch_size, lr must be positive and train_steps non-negative")
        if not 0.0 <= self.polyak_tau <= 1.0 or self.ortho_coef < 0:
            raise ValueError("polyak_tau must lie in [0, 1] and ortho_coef be non-negative")
        if not 0.0 <= self.latent_mix <= 1.0:
            raise ValueError("latent_mix must lie in [0, 1]")
        if self.d < 2 or not 0.0 <= self.gamma < 1.0:
            raise ValueError("need d >= 2 and gamma in [0, 1)")


@dataclass
class FBModel:
    F: Mlp
    B: Mlp
    F_target: Mlp
    B_target: Mlp
    gamma: float
    actions: np.ndarray  # (n_actions, action_dim)
    state_dim: int
    b_uses_action: bool = False

    @property
    def d(self) -> int:
        return self.B.out_dim

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def init(cls, state_dim: int, actions: np.ndarray, config: FBTrainConfig,
             rng: np.random.Generator) -> "FBModel":
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        n_act = actions.shape[0]
        d = config.d
        F = Mlp.init([state_dim + n_act + d, *config.f_hidden, d], rng, config.hidden_activation)
        b_in = state_dim + (n_act if config.b_uses_action else 0)
        B = Mlp.init([b_in, *config.b_hidden, d], rng, config.hidden_activation, config.b_output)
        return cls(F, B, F.copy(), B.copy(), config.gamma, actions, state_dim, config.b_uses_action)

    def copy(self) -> "FBModel":
        return FBModel(self.F.copy(), self.B.copy(), self.F_target.copy(), self.B_target.copy(),
                       self.gamma, self.actions.copy(), self.state_dim, self.b_uses_action)

    def action_index(self, a) -> np.ndarray:
        """Map raw dataset actions to the nearest action of the finite set."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        dist = ((a[:, None, :] - self.actions[None, :, :]) ** 2).sum(axis=2)
        return dist.argmin(axis=1)

    def one_hot(self, a_idx) -> np.ndarray:
        return np.eye(self.n_actions)[np.asarray(a_idx, dtype=int)]

    def f_input(self, s, a_idx, z) -> np.ndarray:
        s = np.atleast_2d(s)
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), (s.shape[0], self.d))
        return np.hstack([s, self.one_hot(a_idx).reshape(s.shape[0], -1), z])

    def b_input(self, s, a_idx=None) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if not self.b_uses_action:
            return s
        if a_idx is None:
            raise ShapeError("this model's backward net needs actions")
        return np.hstack([s, self.one_hot(a_idx).reshape(s.shape[0], -1)])

    def forward_embed(self, s, a_idx, z, target=False) -> np.ndarray:
        net = self.F_target if target else self.F
        return net(self.f_input(s, a_idx, z))

    def backward_embed(self, s, a_idx=None, target=False) -> np.ndarray:
        net = self.B_target if target else self.B
        return net(self.b_input(s, a_idx))

    def action_scores(self, s, z, target=False) -> np.ndarray:
        """F(s, a, z)^T z for every action; rows are states. ``z`` is one vector or one per row."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        n, A = s.shape[0], self.n_actions
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), (n, self.d))
        s_rep = np.repeat(s, A, axis=0)
        z_rep = np.repeat(z, A, axis=0)
        a_rep = np.tile(np.arange(A), n)
        f = self.forward_embed(s_rep, a_rep, z_rep, target)
        return np.einsum("ij,ij->i", f, z_rep).reshape(n, A)


def project_z(z) -> np.ndarray:
    """Rescale onto the sphere of radius sqrt(d); works row-wise on batches."""
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise NumericError("cannot project a zero latent")
    return z * np.sqrt(z.shape[-1]) / norm


def act_greedy(model: FBModel, s, z, target=False):
    """argmax_a F(s, a, z)^T z, lowest index on ties. Scalar for a single state."""
    s_arr = np.asarray(s, dtype=np.float64)
    idx = np.argmax(model.action_scores(s_arr, z, target), axis=1)
    return int(idx[0]) if s_arr.ndim == 1 else idx


def sample_latents(model: FBModel, dataset: OfflineDataset, rng: np.random.Generator, n: int,
                   latent_mix: float) -> np.ndarray:
    """``n`` latents: sphere-uniform with probability ``latent_mix``, else projected B of a data state."""
    if dataset.count == 0:
        raise ValueError("cannot sample latents from an empty dataset")
    sphere = rng.random(n) < latent_mix
    gauss = rng.normal(size=(n, model.d))
    j = rng.integers(0, dataset.count, size=n)
    a_idx = model.action_index(dataset.a[j]) if model.b_uses_action else None
    anchored = model.backward_embed(dataset.s[j], a_idx)
    return project_z(np.where(sphere[:, None], gauss, anchored))


def sample_latent(model: FBModel, dataset: OfflineDataset, rng: np.random.Generator,
                  latent_mix: float = 0.5) -> np.ndarray:
    return sample_latents(model, dataset, rng, 1, latent_mix)[0]


@dataclass
class TransitionBatch:
    s: np.ndarray
    a_idx: np.ndarray
    s_next: np.ndarray
    s_plus: np.ndarray
    iid: bool = True  # rows drawn independently, as opposed to a fixed enumeration

    def __len__(self):
        return self.s.shape[0]

    @classmethod
    def from_dataset(cls, model: FBModel, dataset: OfflineDataset, idx,
                     iid: bool = True) -> "TransitionBatch":
        idx = np.asarray(idx)
        return cls(dataset.s[idx], model.action_index(dataset.a[idx]), dataset.s_next[idx],
                   dataset.s_plus[idx], iid)


def fb_td_loss(model: FBModel, batch: TransitionBatch, z_batch: np.ndarray,
               ortho_coef: float = 1.0, graph: Graph | None = None) -> dc.Var:
    """FB temporal-difference loss recorded on ``graph``.

    Roots are the F parameters followed by the B parameters. The squared TD
    error is averaged over every (transition, future sample) pair in the batch,
    which estimates the same expectation as pairing each transition with its
    own future sample. With a state-action backward net the future samples
    are the batch's (s, a) pairs and visitation counts from t = 0; for iid
    rows a record's own pair is left out so the estimate stays unbiased.
    """
    graph = graph if graph is not None else Graph()
    n = len(batch)
    z_batch = np.asarray(z_batch, dtype=np.float64)
    if z_batch.shape != (n, model.d):
        raise ShapeError(f"z batch has shape {z_batch.shape}, expected {(n, model.d)}")
    f_params = [graph.param(p) for p in model.F.parameters()]
    b_params = [graph.param(p) for p in model.B.parameters()]

    if model.b_uses_action:
        future_in = model.b_input(batch.s, batch.a_idx)
        current_in = future_in
    else:
        future_in = model.b_input(batch.s_plus)
        current_in = model.b_input(batch.s_next)

    # bootstrap action from the online F, values from the targets (no gradient)
    a_next = np.argmax(model.action_scores(batch.s_next, z_batch), axis=1)
    f_next = model.forward_embed(batch.s_next, a_next, z_batch, target=True)
    b_future_t = model.B_target(future_in)
    bootstrap = model.gamma * (f_next @ b_future_t.T)

    f = model.F.build(graph, model.f_input(batch.s, batch.a_idx, z_batch), f_params)
    b_future = model.B.build(graph, future_in, b_params)
    delta = f @ b_future.T - bootstrap
    if model.b_uses_action and batch.iid and n > 1:
        # an iid record is never its own future sample, otherwise the diagonal is over-weighted
        off = (1.0 - np.eye(n)) / (n * (n - 1))
        td = dc.vsum(dc.square(delta) * off)
    else:
        td = dc.mean(dc.square(delta))

    b_current = b_future if model.b_uses_action else model.B.build(graph, current_in, b_params)
    diag = dc.mean(dc.vsum(f * b_current, axis=1))
    loss = td - 2.0 * diag

    if ortho_coef > 0:
        cov = (b_future.T @ b_future) * (1.0 / n)
        ortho = dc.vsum(dc.square(cov - np.eye(model.d)))
        loss = loss + ortho_coef * ortho
    return loss


def _actions_for(dataset: OfflineDataset) -> np.ndarray:
    kind, _ = parse_env_tag(dataset.env_tag)
    if kind == "donut":
        return compass_actions()
    if kind == "gridworld":
        return np.arange(4, dtype=np.float64)[:, None]
    uniq = np.unique(dataset.a, axis=0)
    return uniq


def _polyak(target: Mlp, online: Mlp, tau: float) -> None:
    if tau == 0.0:
        return
    target.set_flat((1.0 - tau) * target.get_flat() + tau * online.get_flat())


LatentSampler = Callable[[FBModel, OfflineDataset, np.random.Generator, int], np.ndarray]


def train_fb(dataset: OfflineDataset, config: FBTrainConfig, model: FBModel | None = None,
             latent_sampler: LatentSampler | None = None,
             actions: np.ndarray | None = None) -> tuple[FBModel, list[float]]:
    """Minibatch Adam on :func:`fb_td_loss` with Polyak-averaged targets."""
    if not config.full_batch and dataset.count < config.batch_size:
        raise ValueError(f"dataset has {dataset.count} records, fewer than batch size "
                         f"{config.batch_size}")
    rng = np.random.default_rng(config.seed)
    if model is None:
        acts = _actions_for(dataset) if actions is None else actions
        model = FBModel.init(dataset.state_dim, acts, config, rng)
    if latent_sampler is None:
        def latent_sampler(m, data, r, k):
            return sample_latents(m, data, r, k, config.latent_mix)

    all_idx = np.arange(dataset.count)
    n_f = model.F.n_params()
    theta = np.concatenate([model.F.get_flat(), model.B.get_flat()])
    opt = AdamState.zeros(theta.size)
    losses = []
    for step in range(config.train_steps):
        if config.full_batch:
            batch = TransitionBatch.from_dataset(model, dataset, all_idx, iid=False)
        else:
            idx = rng.integers(0, dataset.count, size=config.batch_size)
            batch = TransitionBatch.from_dataset(model, dataset, idx)
        z = latent_sampler(model, dataset, rng, len(batch))
        graph = Graph()
        try:
            loss = fb_td_loss(model, batch, z, config.ortho_coef, graph)
            grads = graph.backward(loss)
            grad = np.concatenate([g.ravel() for g in grads])
            theta = adam_step(theta, grad, opt, config.lr)
        except NumericError as exc:
            raise DivergedTrainingError(step, f"FB training diverged ({exc})") from exc
        model.F.set_flat(theta[:n_f])
        model.B.set_flat(theta[n_f:])
        _polyak(model.F_target, model.F, config.polyak_tau)
        _polyak(model.B_target, model.B, config.polyak_tau)
        losses.append(float(loss.value))
    return model, losses


def reconstruct_reward(model: FBModel, states, z, a_idx=None) -> np.ndarray:
    """r_z(s) = B(s)^T z for each state row."""
    return model.backward_embed(states, a_idx) @ np.asarray(z, dtype=np.float64)


_ACT_CODES = {"relu": 0, "tanh": 1}
_OUT_CODES = {"identity": 0, "l2-normalize": 1}


def _pack_mlp(net: Mlp) -> bytes:
    parts = [struct.pack("<BBI", _ACT_CODES[net.hidden_activation],
                         _OUT_CODES[net.output_activation], len(net.weights))]
    for w, b in zip(net.weights, net.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def _unpack_mlp(rd: _Reader) -> Mlp:
    act_pos = rd.pos
    act, out, n_layers = rd.unpack("<BBI", "network header")
    codes_act = {v: k for k, v in _ACT_CODES.items()}
    codes_out = {v: k for k, v in _OUT_CODES.items()}
    if act not in codes_act or out not in codes_out:
        raise FormatError("unknown activation code", act_pos)
    weights, biases, widths = [], [], []
    for _ in range(n_layers):
        rows, cols = rd.unpack("<II", "layer shape")
        if widths and widths[-1] != rows:
            raise FormatError("layer shapes do not chain", rd.pos - 8)
        widths = widths or [rows]
        widths.append(cols)
        weights.append(rd.floats(rows * cols, "weights").reshape(rows, cols))
        biases.append(rd.floats(cols, "biases"))
    return Mlp(widths, weights, biases, codes_act[act], codes_out[out])


def save_checkpoint(model: FBModel, path) -> None:
    """Binary checkpoint: "ZOLM", version, d, state-dim, action-count, then the networks.

    All integers are little-endian u32 and all reals little-endian float64.
    """
    head = CHECKPOINT_MAGIC + struct.pack(
        "<IIIIIdB", CHECKPOINT_VERSION, model.d, model.state_dim, model.n_actions,
        model.actions.shape[1], model.gamma, int(model.b_uses_action))
    body = [np.ascontiguousarray(model.actions, dtype="<f8").tobytes()]
    body += [_pack_mlp(n) for n in (model.F, model.B, model.F_target, model.B_target)]
    Path(path).write_bytes(head + b"".join(body))


def load_checkpoint(path) -> FBModel:
    rd = _Reader(Path(path).read_bytes())
    magic = rd.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version, = rd.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    d, state_dim, n_act, act_dim, gamma, b_sa = rd.unpack("<IIIIdB", "header")
    actions = rd.floats(n_act * act_dim, "actions").reshape(n_act, act_dim)
    nets = [_unpack_mlp(rd) for _ in range(4)]
    if rd.pos != len(rd.buf):
        raise FormatError("trailing bytes after the last network", rd.pos)
    model = FBModel(*nets, gamma=gamma, actions=actions, state_dim=state_dim,
                    b_uses_action=bool(b_sa))
    if model.d != d or model.F.in_dim != state_dim + n_act + d:
        raise FormatError("network shapes disagree with the header", 8)
    return model
