"""Offline data: the 2-D donut world, gridworlds, task rewards and the dataset file format."""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .mdporacle import TabularMDP

RAD_MIN = 0.25
RAD_MAX = 1.5
ACTION_CLIP = 0.1
SEGMENT_LENGTH = 10
MAX_PROPOSALS = 1_000_000

DATASET_MAGIC = b"ZOLD"
DATASET_VERSION = 1

# up, down, left, right as (dx, dy); y grows upward
GRID_MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0))


def compass_actions(step: float = ACTION_CLIP) -> np.ndarray:
    """Nine donut actions: stay plus eight compass moves of length ``step``."""
    angles = np.arange(8) * (np.pi / 4)
    moves = step * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.vstack([np.zeros((1, 2)), moves])


@dataclass
class DonutWorld:
    rad_min: float = RAD_MIN
    rad_max: float = RAD_MAX
    action_clip: float = ACTION_CLIP
    support_sigma: float = 0.6
    state: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.0]))

    def project(self, s: np.ndarray) -> np.ndarray:
        """Radially clamp states (rows) onto the annulus."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        r = np.linalg.norm(s, axis=1, keepdims=True)
        r_safe = np.where(r > 0, r, 1.0)
        unit = np.where(r > 0, s / r_safe, np.array([1.0, 0.0]))
        return unit * np.clip(r, self.rad_min, self.rad_max)

    def step(self, action) -> np.ndarray:
        a = np.clip(np.asarray(action, dtype=np.float64), -self.action_clip, self.action_clip)
        self.state = self.project(self.state + a)[0]
        return self.state

    def sample_starts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Rejection-sample ``n`` states from exp(-|s|^2 / 2 sigma^2) restricted to the annulus."""
        out = np.empty((0, 2))
        proposals = 0
        while out.shape[0] < n:
            k = max(64, 2 * (n - out.shape[0]))
            cand = rng.normal(0.0, self.support_sigma, size=(k, 2))
            proposals += k
            r = np.linalg.norm(cand, axis=1)
            ok = cand[(r >= self.rad_min) & (r <= self.rad_max)]
            out = np.vstack([out, ok])
            if out.shape[0] < n and proposals > MAX_PROPOSALS * max(1, n):
                raise ConfigError(f"rejection sampling exceeded {MAX_PROPOSALS} proposals per "
                                  f"sample; sigma={self.support_sigma} is too small")
        return out[:n]


@dataclass
class TransitionRecord:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    s_plus: np.ndarray
    r: float | None = None


@dataclass
class OfflineDataset:
    """Columnar transition store; ``records`` views it row by row."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    s_plus: np.ndarray
    r: np.ndarray | None = None
    env_tag: str = ""
    seed: int = 0

    def __post_init__(self):
        for name in ("s", "a", "s_next", "s_plus"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr[:, None] if arr.ndim == 1 else arr)
        n = self.s.shape[0]
        if not (self.a.shape[0] == self.s_next.shape[0] == self.s_plus.shape[0] == n):
            raise ValueError("dataset columns have different lengths")
        if self.r is not None:
            self.r = np.asarray(self.r, dtype=np.float64).reshape(n)

    @classmethod
    def empty(cls, state_dim: int, action_dim: int, env_tag="", seed=0, has_reward=False):
        z = lambda k: np.zeros((0, k))  # noqa: E731
        return cls(z(state_dim), z(action_dim), z(state_dim), z(state_dim),
                   np.zeros(0) if has_reward else None, env_tag, seed)

    @property
    def count(self) -> int:
        return self.s.shape[0]

    def __len__(self):
        return self.count

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    @property
    def records(self) -> list[TransitionRecord]:
        r = self.r
        return [TransitionRecord(self.s[i], self.a[i], self.s_next[i], self.s_plus[i],
                                 None if r is None else float(r[i]))
                for i in range(self.count)]

    def equals(self, other: "OfflineDataset") -> bool:
        """Bit-exact equality, including metadata."""
        if (self.env_tag, self.seed) != (other.env_tag, other.seed):
            return False
        if (self.r is None) != (other.r is None):
            return False
        cols = ["s", "a", "s_next", "s_plus"] + ([] if self.r is None else ["r"])
        return all(getattr(self, c).shape == getattr(other, c).shape
                   and getattr(self, c).tobytes() == getattr(other, c).tobytes() for c in cols)


def donut_tag(sigma: float) -> str:
    return f"donut(sigma={sigma!r})"


def gridworld_tag(width: int, height: int) -> str:
    return f"gridworld(width={width},height={height})"


def parse_env_tag(tag: str) -> tuple[str, dict]:
    """'donut(sigma=0.6)' -> ('donut', {'sigma': 0.6})."""
    m = re.fullmatch(r"([a-z_]+)(?:\((.*)\))?", tag)
    if not m:
        return tag, {}
    kwargs = {}
    for item in filter(None, (m.group(2) or "").split(",")):
        key, _, val = item.partition("=")
        kwargs[key.strip()] = float(val) if "." in val or "e" in val else int(val)
    return m.group(1), kwargs


def collect_donut(n_records: int, sigma: float = 0.6, seed: int = 0) -> OfflineDataset:
    """Random-walk transitions on the donut, started from the radially decaying support."""
    if n_records < 0:
        raise ConfigError("n_records must be non-negative")
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    world = DonutWorld(support_sigma=sigma)
    tag = donut_tag(sigma)
    if n_records == 0:
        return OfflineDataset.empty(2, 2, tag, seed)
    rng = np.random.default_rng(seed)
    n_seg = -(-n_records // SEGMENT_LENGTH)
    state = world.sample_starts(n_seg, rng)
    s, a, s_next = [], [], []
    for _ in range(SEGMENT_LENGTH):
        act = rng.uniform(-world.action_clip, world.action_clip, size=(n_seg, 2))
        nxt = world.project(state + act)
        s.append(state)
        a.append(act)
        s_next.append(nxt)
        state = nxt
    # segment-major order: record k of segment j sits at j * SEGMENT_LENGTH + k
    stack = lambda xs: np.stack(xs, axis=1).reshape(-1, 2)[:n_records]  # noqa: E731
    s, a, s_next = stack(s), stack(a), stack(s_next)
    s_plus = s[rng.permutation(n_records)]
    return OfflineDataset(s, a, s_next, s_plus, None, tag, seed)


@dataclass(frozen=True)
class TaskReward:
    name: str
    parameters: tuple = ()

    def __call__(self, states) -> np.ndarray:
        return task_reward(self, states)


TASK_NAMES = ("square", "twocircles", "cross", "goal", "tabular")


def task_reward(task: TaskReward, s) -> np.ndarray | float:
    """Evaluate a task reward at one state or at each row of a state batch."""
    s_arr = np.asarray(s, dtype=np.float64)
    single = s_arr.ndim == 1
    s2 = np.atleast_2d(s_arr)
    name = task.name
    if name == "square":
        inf = np.max(np.abs(s2), axis=1)
        r = ((inf >= 0.6) & (inf <= 0.9)).astype(float)
    elif name == "twocircles":
        c = np.array([0.9, 0.0])
        dist = np.minimum(np.linalg.norm(s2 - c, axis=1), np.linalg.norm(s2 + c, axis=1))
        r = (dist <= 0.3).astype(float)
    elif name == "cross":
        r = (np.minimum(np.abs(s2[:, 0]), np.abs(s2[:, 1])) <= 0.15).astype(float)
    elif name == "goal":
        if len(task.parameters) < 2:
            raise ConfigError("goal task needs parameters (x, y[, radius])")
        gx, gy, radius = (list(task.parameters) + [0.2])[:3]
        r = (np.linalg.norm(s2 - np.array([gx, gy]), axis=1) <= radius).astype(float)
    elif name == "tabular":
        table = np.asarray(task.parameters, dtype=np.float64)
        r = table[np.argmax(s2, axis=1)]
    else:
        raise ConfigError(f"unknown task {name!r}; valid tasks: {', '.join(TASK_NAMES)}")
    return float(r[0]) if single else r


def build_gridworld(width: int, height: int, gamma: float, wall_mask=None,
                    seed: int = 0) -> TabularMDP:
    """Deterministic 4-action grid; bumping into a wall or the boundary stays put.

    ``wall_mask`` is a (height, width) boolean array, ``None`` for an open grid,
    or a float in (0, 1) giving the wall density of a mask drawn with ``seed``.
    States index the open cells in row-major order; rho0 is uniform over them.
    """
    if width * height > 64 or width < 1 or height < 1:
        raise ConfigError("gridworld must have between 1 and 64 cells")
    if wall_mask is None:
        walls = np.zeros((height, width), dtype=bool)
    elif np.isscalar(wall_mask):
        walls = np.random.default_rng(seed).random((height, width)) < float(wall_mask)
    else:
        walls = np.asarray(wall_mask, dtype=bool)
        if walls.shape != (height, width):
            raise ConfigError(f"wall mask shape {walls.shape} != ({height}, {width})")
    if walls.all():
        raise ConfigError("gridworld has no open cell")
    cells = [(x, y) for y in range(height) for x in range(width) if not walls[y, x]]
    index = {c: i for i, c in enumerate(cells)}
    n = len(cells)
    P = np.zeros((n, len(GRID_MOVES), n))
    for i, (x, y) in enumerate(cells):
        for a, (dx, dy) in enumerate(GRID_MOVES):
            P[i, a, index.get((x + dx, y + dy), i)] = 1.0
    return TabularMDP(P, gamma, np.full(n, 1.0 / n))


def collect_gridworld(mdp: TabularMDP, n_records: int | None = None, seed: int = 0,
                      tag: str = "gridworld") -> OfflineDataset:
    """Tabular transitions with one-hot states and action indices.

    With ``n_records=None`` every state-action pair appears exactly once
    (uniform reference distribution); otherwise pairs are drawn uniformly.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    if n_records is None:
        pairs = np.arange(S * A)
    else:
        pairs = rng.integers(0, S * A, size=n_records)
    si, ai = np.divmod(pairs, A)
    cdf = np.cumsum(mdp.transitions[si, ai], axis=1)
    nxt = np.minimum((rng.random((len(pairs), 1)) < cdf).argmax(axis=1), S - 1)
    eye = np.eye(S)
    s = eye[si]
    return OfflineDataset(s, ai[:, None].astype(float), eye[nxt], s[rng.permutation(len(pairs))],
                          None, tag, seed)


_HEADER_FIXED = struct.Struct("<QQIIB")


def write_dataset(dataset: OfflineDataset, path) -> None:
    tag = dataset.env_tag.encode("utf-8")
    has_r = dataset.r is not None
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(tag)), tag,
             _HEADER_FIXED.pack(dataset.seed & 0xFFFFFFFFFFFFFFFF, dataset.count,
                                dataset.state_dim, dataset.action_dim, int(has_r))]
    cols = [dataset.s, dataset.a, dataset.s_next, dataset.s_plus]
    if has_r:
        cols.append(dataset.r[:, None])
    body = np.hstack(cols) if dataset.count else np.zeros((0, 0))
    parts.append(np.ascontiguousarray(body, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> OfflineDataset:
    buf = Path(path).read_bytes()

    def need(offset, n, what):
        if len(buf) < offset + n:
            raise FormatError(f"truncated file while reading {what}", offset)

    need(0, 4, "magic")
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {DATASET_MAGIC!r}", 0)
    need(4, 8, "version")
    version, tag_len = struct.unpack_from("<II", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    pos = 12
    need(pos, tag_len, "env tag")
    try:
        tag = buf[pos:pos + tag_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("env tag is not valid UTF-8", pos) from exc
    pos += tag_len
    need(pos, _HEADER_FIXED.size, "header")
    seed, count, sdim, adim, has_r = _HEADER_FIXED.unpack_from(buf, pos)
    if has_r not in (0, 1):
        raise FormatError(f"has-reward flag must be 0 or 1, got {has_r}", pos + _HEADER_FIXED.size - 1)
    pos += _HEADER_FIXED.size
    width = 3 * sdim + adim + has_r
    need(pos, count * width * 8, "records")
    if len(buf) != pos + count * width * 8:
        raise FormatError("trailing bytes after the last record", pos + count * width * 8)
    body = np.frombuffer(buf, dtype="<f8", count=count * width, offset=pos)
    body = body.astype(np.float64).reshape(count, width)
    cuts = np.cumsum([sdim, adim, sdim, sdim])
    s, a, s_next, s_plus, rest = np.split(body, cuts, axis=1)
    if seed >= 2 ** 63:
        seed -= 2 ** 64
    return OfflineDataset(s, a, s_next, s_plus, rest[:, 0].copy() if has_r else None, tag, seed)


def write_dataset_csv(dataset: OfflineDataset, path) -> None:
    sd, ad = dataset.state_dim, dataset.action_dim
    header = ([f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)]
              + [f"s_next{i}" for i in range(sd)] + [f"s_plus{i}" for i in range(sd)])
    cols = [dataset.s, dataset.a, dataset.s_next, dataset.s_plus]
    if dataset.r is not None:
        header.append("r")
        cols.append(dataset.r[:, None])
    body = np.hstack(cols) if dataset.count else np.zeros((0, len(header)))
    np.savetxt(path, body, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
