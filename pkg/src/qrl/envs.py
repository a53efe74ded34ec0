"""Deterministic benchmark MDPs and offline dataset generation.

Two environments share a 3-dimensional observation convention
(two coordinates + goal-indicator bit), so one critic architecture
serves both:

* MountainCar, discretized to bins-per-dimension grid centers, with the
  abstract top-of-hill goal token G = (0.5, 0, 1) reachable from every
  goal-set state.
* Gridworlds with blocking walls, observations (x/width, y/height, 0).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

POS_MIN, POS_MAX = -1.2, 0.6
VEL_MIN, VEL_MAX = -0.07, 0.07
GOAL_TOKEN = np.array([0.5, 0.0, 1.0])
GOAL_ACTION = -1  # synthetic goal-absorption records
MC_ACTIONS = 3
GRID_ACTIONS = 4  # up, down, left, right
DEFAULT_GOAL_EDGE_COST = 0.25  # cost on synthetic (goal-set state -> G) records


def mountain_car_step(position: float, velocity: float, action: int) -> tuple[float, float, float]:
    """Reference MountainCar update; returns (position', velocity', r=-1)."""
    if action not in (0, 1, 2):
        raise ValueError(f"invalid action {action}")
    v = velocity + 0.001 * (action - 1) - 0.0025 * np.cos(3.0 * position)
    v = min(max(v, VEL_MIN), VEL_MAX)
    p = min(max(position + v, POS_MIN), POS_MAX)
    if p == POS_MIN and v < 0:
        v = 0.0
    return p, v, -1.0


def mountain_car_step_batch(pos: np.ndarray, vel: np.ndarray, act: np.ndarray):
    """Vectorized mountain_car_step over aligned arrays."""
    v = vel + 0.001 * (act - 1) - 0.0025 * np.cos(3.0 * pos)
    v = np.clip(v, VEL_MIN, VEL_MAX)
    p = np.clip(pos + v, POS_MIN, POS_MAX)
    v = np.where((p == POS_MIN) & (v < 0), 0.0, v)
    return p, v


def in_goal_set(position: float, velocity: float) -> bool:
    return 0.5 <= position <= POS_MAX and 0.0 <= velocity <= VEL_MAX


def discretize_value(x, lo: float, hi: float, bins: int):
    """Snap to the nearest of `bins` evenly spaced centers; endpoints are
    exactly representable (centers lo + (hi-lo)/(bins-1)*k)."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    spacing = (hi - lo) / (bins - 1)
    k = np.clip(np.rint((np.asarray(x) - lo) / spacing), 0, bins - 1)
    # endpoints must be exactly representable, so pin them explicitly
    return np.where(k == bins - 1, hi, lo + spacing * k)


def discretize_state(position, velocity, bins: int):
    return (
        discretize_value(position, POS_MIN, POS_MAX, bins),
        discretize_value(velocity, VEL_MIN, VEL_MAX, bins),
    )


def augment(position, velocity) -> np.ndarray:
    """Concrete state -> augmented observation with indicator 0."""
    return np.array([position, velocity, 0.0])


@dataclass
class GridWorldSpec:
    width: int
    height: int
    walls: frozenset = field(default_factory=frozenset)  # set of (x, y)

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def cells(self) -> list[tuple[int, int]]:
        return [
            (x, y)
            for x in range(self.width)
            for y in range(self.height)
            if (x, y) not in self.walls
        ]

    def observe(self, x: int, y: int) -> np.ndarray:
        return np.array([x / self.width, y / self.height, 0.0])


GRID_MOVES = {0: (0, 1), 1: (0, -1), 2: (-1, 0), 3: (1, 0)}  # up, down, left, right


def gridworld_step(spec: GridWorldSpec, cell: tuple[int, int], action: int):
    """Move one cell; blocked moves (wall/off-grid) self-transition. r=-1."""
    x, y = cell
    if not spec.in_bounds(x, y) or (x, y) in spec.walls:
        raise ValueError(f"invalid cell {cell}")
    if action not in GRID_MOVES:
        raise ValueError(f"invalid action {action}")
    dx, dy = GRID_MOVES[action]
    nx, ny = x + dx, y + dy
    if not spec.in_bounds(nx, ny) or (nx, ny) in spec.walls:
        nx, ny = x, y
    return (nx, ny), -1.0


@dataclass
class TransitionDataset:
    s: np.ndarray  # (N, 3) float
    a: np.ndarray  # (N,) int, -1 for synthetic goal records
    s_next: np.ndarray  # (N, 3) float
    r: np.ndarray  # (N,) float, <= 0
    episode_id: np.ndarray  # (N,) uint32
    metadata: dict

    def __len__(self) -> int:
        return len(self.a)

    @property
    def real_mask(self) -> np.ndarray:
        return self.a >= 0

    def episode_bounds(self) -> list[tuple[int, int]]:
        """[start, end) index ranges of the real-transition episodes."""
        out = []
        ids = self.episode_id[self.real_mask]
        if len(ids) == 0:
            return out
        idx = np.flatnonzero(self.real_mask)
        start = 0
        for i in range(1, len(ids)):
            if ids[i] != ids[i - 1]:
                out.append((int(idx[start]), int(idx[i - 1]) + 1))
                start = i
        out.append((int(idx[start]), int(idx[-1]) + 1))
        return out


def generate_mountaincar_dataset(
    bins: int,
    episodes: int,
    seed: int,
    max_episode_len: int = 250,
    goal_edge_cost: float = DEFAULT_GOAL_EDGE_COST,
) -> TransitionDataset:
    """Uniform-random policy from uniformly random discretized starts.

    Episodes end on goal-set entry or at max_episode_len. Every distinct
    goal-set state visited contributes one synthetic record linking it to
    the goal token at cost goal_edge_cost.
    """
    rng = np.random.default_rng(seed)
    S, A, SN, R, E = [], [], [], [], []
    goal_states: dict[tuple[float, float], None] = {}
    for ep in range(episodes):
        p = discretize_value(rng.uniform(POS_MIN, POS_MAX), POS_MIN, POS_MAX, bins)
        v = discretize_value(rng.uniform(VEL_MIN, VEL_MAX), VEL_MIN, VEL_MAX, bins)
        if in_goal_set(p, v):
            goal_states.setdefault((float(p), float(v)))
        for _ in range(max_episode_len):
            if in_goal_set(p, v):
                break
            a = int(rng.integers(0, MC_ACTIONS))
            np_, nv, r = mountain_car_step(p, v, a)
            np_, nv = discretize_state(np_, nv, bins)
            S.append(augment(p, v))
            A.append(a)
            SN.append(augment(np_, nv))
            R.append(r)
            E.append(ep)
            p, v = float(np_), float(nv)
            if in_goal_set(p, v):
                goal_states.setdefault((p, v))
    for gp, gv in goal_states:
        S.append(augment(gp, gv))
        A.append(GOAL_ACTION)
        SN.append(GOAL_TOKEN.copy())
        R.append(-goal_edge_cost)
        E.append(0xFFFFFFFF)  # sentinel: not part of any rollout episode
    meta = {
        "env": "mountaincar",
        "bins": bins,
        "policy": "uniform_random",
        "episodes": episodes,
        "max_episode_len": max_episode_len,
        "seed": seed,
        "goal_edge_cost": goal_edge_cost,
        "n_goal_records": len(goal_states),
    }
    return TransitionDataset(
        np.array(S), np.array(A, dtype=np.int64), np.array(SN),
        np.array(R), np.array(E, dtype=np.uint32), meta,
    )


def generate_gridworld_dataset(
    spec: GridWorldSpec, episodes: int, seed: int, max_episode_len: int = 50
) -> TransitionDataset:
    """Uniform-random rollouts from uniformly random free cells."""
    rng = np.random.default_rng(seed)
    cells = spec.cells()
    S, A, SN, R, E = [], [], [], [], []
    for ep in range(episodes):
        cell = cells[int(rng.integers(0, len(cells)))]
        for _ in range(max_episode_len):
            a = int(rng.integers(0, GRID_ACTIONS))
            nxt, r = gridworld_step(spec, cell, a)
            S.append(spec.observe(*cell))
            A.append(a)
            SN.append(spec.observe(*nxt))
            R.append(r)
            E.append(ep)
            cell = nxt
    meta = {
        "env": "grid",
        "width": spec.width,
        "height": spec.height,
        "walls": sorted(spec.walls),
        "policy": "uniform_random",
        "episodes": episodes,
        "max_episode_len": max_episode_len,
        "seed": seed,
    }
    return TransitionDataset(
        np.array(S), np.array(A, dtype=np.int64), np.array(SN),
        np.array(R), np.array(E, dtype=np.uint32), meta,
    )


def gridworld_full_coverage_dataset(spec: GridWorldSpec) -> TransitionDataset:
    """One record per (cell, action) pair: the exhaustive dynamics table."""
    S, A, SN, R = [], [], [], []
    for cell in spec.cells():
        for a in range(GRID_ACTIONS):
            nxt, r = gridworld_step(spec, cell, a)
            S.append(spec.observe(*cell))
            A.append(a)
            SN.append(spec.observe(*nxt))
            R.append(r)
    meta = {
        "env": "grid",
        "width": spec.width,
        "height": spec.height,
        "walls": sorted(spec.walls),
        "policy": "full_coverage",
        "episodes": 0,
        "seed": 0,
    }
    n = len(A)
    return TransitionDataset(
        np.array(S), np.array(A, dtype=np.int64), np.array(SN),
        np.array(R), np.zeros(n, dtype=np.uint32), meta,
    )


# ---- QRLD binary dataset format ----

QRLD_MAGIC = b"QRLD"
QRLD_VERSION = 1
_REC = struct.Struct("<3fb3ffI")  # s, a, s_next, r, episode_id


def save_dataset(path: str, ds: TransitionDataset) -> None:
    import os

    meta = json.dumps(ds.metadata).encode()
    n = len(ds)
    rec = np.zeros(
        n,
        dtype=np.dtype(
            [("s", "<f4", 3), ("a", "i1"), ("sn", "<f4", 3), ("r", "<f4"), ("ep", "<u4")]
        ),
    )
    rec["s"] = ds.s
    rec["a"] = ds.a
    rec["sn"] = ds.s_next
    rec["r"] = ds.r
    rec["ep"] = ds.episode_id
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(QRLD_MAGIC)
        f.write(struct.pack("<H", QRLD_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<Q", n))
        f.write(rec.tobytes())
    os.replace(tmp, path)


def load_dataset(path: str) -> TransitionDataset:
    with open(path, "rb") as f:
        if f.read(4) != QRLD_MAGIC:
            raise ValueError("not a QRLD dataset file")
        (ver,) = struct.unpack("<H", f.read(2))
        if ver != QRLD_VERSION:
            raise ValueError(f"unsupported QRLD version {ver}")
        (mlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(mlen))
        (n,) = struct.unpack("<Q", f.read(8))
        rec = np.frombuffer(
            f.read(),
            dtype=np.dtype(
                [("s", "<f4", 3), ("a", "i1"), ("sn", "<f4", 3), ("r", "<f4"), ("ep", "<u4")]
            ),
            count=n,
        )
    return TransitionDataset(
        rec["s"].astype(np.float64),
        rec["a"].astype(np.int64),
        rec["sn"].astype(np.float64),
        rec["r"].astype(np.float64),
        rec["ep"].astype(np.uint32),
        meta,
    )
