"""Constrained quasimetric maximization with dual ascent.

The critic is trained to maximize a softplus-damped expectation of
pairwise distances, subject to the expected squared overshoot of local
distances beyond observed transition costs staying within a budget.
A Lagrange multiplier (kept positive through a softplus
reparametrization) is jointly updated by dual ascent. The latent
transition model is fit alongside with a two-sided quasimetric
regression loss.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import envs
from .autodiff import Tensor, concat, inverse_softplus, softplus, softplus_derivative
from .envs import GOAL_TOKEN, TransitionDataset
from .models import CriticGraph, QuasimetricCritic, build_critic
from .nn import AdamState, DivergenceError, adam_step, cosine_lr


@dataclass
class QrlConfig:
    epsilon: float = 0.25
    lambda_init: float = 0.01
    lr_model: float = 5e-4
    lr_lambda: float = 0.3
    batch_size: int = 4096
    total_steps: int = 500_000
    phi_offset: float = 500.0
    phi_beta: float = 0.01
    transition_loss_weight: float = 75.0
    goal_mix_prob: float = 0.05
    seed: int = 0
    symmetric_ablation: bool = False
    normalize_obs: bool = True  # map each obs dimension to [-1, 1] from dataset range
    step_cost: float = 1.0
    encoder_widths: list[int] = field(default_factory=lambda: [256, 256, 128])
    projector_widths: list[int] = field(default_factory=lambda: [256])
    transition_widths: list[int] = field(default_factory=lambda: [256, 256])
    components: int = 8
    component_size: int = 16
    log_interval: int = 500

    @classmethod
    def full_mountaincar(cls, **overrides) -> "QrlConfig":
        """Full-scale configuration (5e5 steps at batch 4096)."""
        cfg = cls(
            encoder_widths=[1024, 1024, 1024, 256],
            projector_widths=[1024, 1024, 1024],
            transition_widths=[1024, 1024, 1024],
            components=16,
            component_size=32,
        )
        return _replace(cfg, overrides)

    @classmethod
    def desk(cls, **overrides) -> "QrlConfig":
        """Laptop-scale preset used by the acceptance suite.

        Starts the multiplier high with a slow dual step so the
        constraint stays strictly inside its budget at small batch
        sizes; with the full-scale dual settings the constraint
        saturates and every distance inflates by roughly (1 + epsilon).
        """
        cfg = cls(batch_size=512, total_steps=30_000, lambda_init=100.0, lr_lambda=0.001)
        return _replace(cfg, overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QrlConfig":
        return cls(**d)


def _replace(cfg, overrides: dict):
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ValueError(f"unknown config key {k!r}")
        setattr(cfg, k, v)
    return cfg


@dataclass
class DualState:
    lambda_raw: float

    @classmethod
    def init(cls, lambda_init: float) -> "DualState":
        return cls(inverse_softplus(lambda_init, 1.0))

    @property
    def value(self) -> float:
        return softplus(self.lambda_raw, 1.0)


def phi(x, offset: float, beta: float):
    """-softplus(offset - x, beta): strictly increasing, convex, damps
    the pull on already-large distances."""
    if isinstance(x, Tensor):
        return -((offset - x).softplus(beta))
    return -softplus(offset - np.asarray(x, dtype=np.float64), beta)


def constraint_term(critic: QuasimetricCritic, s, s_next, r) -> float:
    """mean relu(d(s, s') + r)^2 over a batch (numpy convenience)."""
    if len(np.atleast_1d(r)) == 0:
        raise ValueError("empty batch")
    d = critic.state_distance(s, s_next)
    return float(np.mean(np.maximum(d + r, 0.0) ** 2))


def pull_term(critic: QuasimetricCritic, states, goals, offset: float, beta: float) -> float:
    d = critic.state_distance(states, goals)
    return float(np.mean(phi(d, offset, beta)))


def transition_loss(critic: QuasimetricCritic, s, a, s_next) -> float:
    """mean of (d^z(zhat', z')^2 + d^z(z', zhat')^2) / 2 over real records."""
    a = np.asarray(a)
    mask = a >= 0
    if not mask.any():
        return 0.0
    g = critic.graph()
    z = g.encode(Tensor(np.atleast_2d(s)[mask]))
    zn = g.encode(Tensor(np.atleast_2d(s_next)[mask]))
    zh = g.transition_predict(z, a[mask])
    fwd = g.latent_distance(zh, zn).square()
    bwd = g.latent_distance(zn, zh).square()
    return float(0.5 * (fwd + bwd).mean().data)


def sample_goals(
    dataset: TransitionDataset, batch_size: int, p_goal_token: float, rng: np.random.Generator
) -> np.ndarray:
    """Goal batch: next-state of a uniform random transition, or the
    abstract goal token with probability p_goal_token."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    idx = rng.integers(0, len(dataset), size=batch_size)
    goals = dataset.s_next[idx].copy()
    if p_goal_token > 0:
        tok = rng.random(batch_size) < p_goal_token
        goals[tok] = GOAL_TOKEN
    return goals


@dataclass
class TrainState:
    critic: QuasimetricCritic
    dual: DualState
    adam_model: AdamState
    adam_lambda: AdamState
    rng: np.random.Generator
    step: int = 0


def observation_affine(dataset: TransitionDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension (shift, scale) mapping observed values into [-1, 1].

    Without this, dimensions with small physical ranges (e.g. velocity)
    are nearly invisible to a freshly initialized encoder and the model
    settles into distances that ignore them.
    """
    obs = np.concatenate([dataset.s, dataset.s_next], axis=0)
    mn, mx = obs.min(axis=0), obs.max(axis=0)
    shift = (mn + mx) / 2.0
    half = (mx - mn) / 2.0
    scale = 1.0 / np.where(half > 1e-12, half, 1.0)
    return shift, scale


def init_train_state(dataset: TransitionDataset, config: QrlConfig) -> TrainState:
    obs_width = dataset.s.shape[1]
    n_actions = int(dataset.a[dataset.real_mask].max()) + 1
    obs_shift = obs_scale = None
    if config.normalize_obs:
        obs_shift, obs_scale = observation_affine(dataset)
    critic = build_critic(
        obs_width,
        n_actions,
        config.encoder_widths,
        config.projector_widths,
        config.transition_widths,
        config.components,
        config.component_size,
        seed=config.seed,
        symmetric=config.symmetric_ablation,
        obs_shift=obs_shift,
        obs_scale=obs_scale,
    )
    arrays, _ = critic.param_arrays()
    adam_model = AdamState.for_params(arrays + [np.array([critic.head.mix_raw])], config.lr_model)
    adam_lambda = AdamState.for_params([np.zeros(1)], config.lr_lambda)
    return TrainState(
        critic,
        DualState.init(config.lambda_init),
        adam_model,
        adam_lambda,
        np.random.default_rng(config.seed),
    )


def qrl_step(state: TrainState, dataset: TransitionDataset, config: QrlConfig) -> dict:
    """One joint primal/dual update on a fresh batch; returns trace row."""
    critic, cfg, rng = state.critic, config, state.rng
    B = cfg.batch_size
    tidx = rng.integers(0, len(dataset), size=B)
    goals = sample_goals(dataset, B, cfg.goal_mix_prob, rng)
    s = dataset.s[tidx]
    sn = dataset.s_next[tidx]
    r = dataset.r[tidx]
    a = dataset.a[tidx]
    lam = state.dual.value

    g = critic.graph()
    # single encoder / projector / head pass over all rows the step needs
    z_all = g.encode(Tensor(np.concatenate([s, sn, goals], axis=0)))
    z_s, z_sn, z_g = z_all[:B], z_all[B : 2 * B], z_all[2 * B :]

    mask = a >= 0
    if mask.any():
        zh = g.transition_predict(z_s[mask], a[mask])
        p_all = g.project(concat([z_all, zh], axis=0))
        p_s, p_sn, p_g = p_all[:B], p_all[B : 2 * B], p_all[2 * B : 3 * B]
        p_h = p_all[3 * B :]
        p_sn_m = p_sn[mask]
        M = int(mask.sum())
        d = g.projected_distance(
            concat([p_s, p_s, p_h, p_sn_m], axis=0),
            concat([p_sn, p_g, p_sn_m, p_h], axis=0),
        )
        d_local, d_pull = d[:B], d[B : 2 * B]
        tl = 0.5 * (d[2 * B : 2 * B + M].square() + d[2 * B + M :].square()).mean()
    else:
        p_all = g.project(z_all)
        p_s, p_sn, p_g = p_all[:B], p_all[B : 2 * B], p_all[2 * B :]
        d = g.projected_distance(concat([p_s, p_s], axis=0), concat([p_sn, p_g], axis=0))
        d_local, d_pull = d[:B], d[B:]
        tl = Tensor(0.0)

    cons = (d_local + Tensor(r)).relu().square().mean()
    pull = phi(d_pull, cfg.phi_offset, cfg.phi_beta).mean()

    # lambda enters as a constant here; its own update is dual ascent below
    loss = -pull + lam * cons + cfg.transition_loss_weight * tl
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    loss.backward()

    arrays, _ = critic.param_arrays()
    params = arrays + [np.array([critic.head.mix_raw])]
    grads = g.grads()
    lr_scale = cosine_lr(state.step, cfg.total_steps, 1.0)
    adam_step(state.adam_model, params, grads, lr_scale=lr_scale)
    critic.head.mix_raw = float(params[-1][0])

    # dual ascent on lambda_raw (no cosine decay): maximize lam*(cons - eps^2)
    cons_gap = float(cons.data) - cfg.epsilon**2
    dual_grad = cons_gap * softplus_derivative(state.dual.lambda_raw, 1.0)
    raw_box = np.array([state.dual.lambda_raw])
    adam_step(state.adam_lambda, [raw_box], [np.array([-dual_grad])])
    state.dual.lambda_raw = float(raw_box[0])

    state.step += 1
    return {
        "step": state.step,
        "lambda": lam,
        "pull": float(pull.data),
        "constraint": float(cons.data),
        "transition_loss": float(tl.data),
        "lr_model": cfg.lr_model * lr_scale,
    }


def train(
    dataset: TransitionDataset,
    config: QrlConfig,
    snapshot_steps: tuple[int, ...] = (),
    progress: bool = False,
) -> tuple[QuasimetricCritic, list[dict], dict[int, QuasimetricCritic]]:
    """Run the full optimization; returns (critic, trace, snapshots).

    Snapshots are critic copies taken after the listed step counts, used
    for learning-dynamics comparisons.
    """
    state = init_train_state(dataset, config)
    trace: list[dict] = []
    snapshots: dict[int, QuasimetricCritic] = {}
    t0 = time.time()
    for i in range(config.total_steps):
        row = qrl_step(state, dataset, config)
        if state.step % config.log_interval == 0 or state.step == config.total_steps:
            trace.append(row)
            if progress:
                print(
                    f"step {row['step']}/{config.total_steps} "
                    f"lambda={row['lambda']:.3f} cons={row['constraint']:.4f} "
                    f"pull={row['pull']:.2f} tl={row['transition_loss']:.4f} "
                    f"({time.time() - t0:.0f}s)",
                    flush=True,
                )
        if state.step in snapshot_steps:
            snapshots[state.step] = state.critic.copy()
    return state.critic, trace, snapshots


def save_trace(path: str, trace: list[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for row in trace:
            f.write(json.dumps(row) + "\n")
    os.replace(tmp, path)


# ---- greedy policy & evaluation ----


def greedy_actions(critic: QuasimetricCritic, states: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """argmin over actions of d^z(T(f(s), a), f(g)); ties -> smallest index."""
    states = np.atleast_2d(states)
    goal = np.atleast_2d(goal)
    g = critic.graph()
    n, n_a = states.shape[0], critic.n_actions
    z = g.encode(Tensor(states)).data
    if goal.shape[0] == 1:
        goal = np.broadcast_to(goal, (n, goal.shape[1]))
    zg = g.encode(Tensor(goal)).data
    # evaluate all actions in one batched pass
    zh = g.transition_predict(Tensor(np.tile(z, (n_a, 1))), np.repeat(np.arange(n_a), n))
    d = g.latent_distance(zh, Tensor(np.tile(zg, (n_a, 1)))).data.reshape(n_a, n)
    return np.argmin(d, axis=0)  # argmin takes the first index on ties


def greedy_action(critic: QuasimetricCritic, s: np.ndarray, goal: np.ndarray) -> int:
    return int(greedy_actions(critic, s, goal)[0])


@dataclass
class GoalEvalResult:
    goal: str
    mean_return: float
    oracle_mean_return: float
    normalized_score: float
    reach_fraction: float


@dataclass
class EvalReport:
    goals: list[GoalEvalResult]
    budget: int

    def to_dict(self) -> dict:
        return {"budget": self.budget, "goals": [asdict(g) for g in self.goals]}

    @property
    def mean_normalized_score(self) -> float:
        return float(np.mean([g.normalized_score for g in self.goals]))


def normalized_score(mean_return: float, oracle_mean_return: float, budget: int) -> float:
    """Affine rescale: timeout floor -> 0, oracle mean return -> 100."""
    floor = -float(budget)
    denom = oracle_mean_return - floor
    if denom <= 0:
        return 0.0
    return 100.0 * (mean_return - floor) / denom


def evaluate_mountaincar(
    critic: QuasimetricCritic | None,
    bins: int,
    goals: list,
    budget: int = 200,
    neighborhood: int = 13,
    oracle_policy_dstar: dict | None = None,
    policy_fn=None,
) -> EvalReport:
    """Greedy rollouts from every discretized start state.

    `goals` entries are "top" (the abstract goal token / goal set) or
    (pos_bin, vel_bin) point goals reached within a centered
    neighborhood x neighborhood bin window. With oracle_policy_dstar
    (goal name -> distance column), rolls out the oracle-descent policy;
    with policy_fn(obs_batch, goal_obs) -> actions, rolls out that
    policy; otherwise the critic's greedy policy.
    """
    from . import oracle as orc

    graph = orc.mountaincar_graph(bins, goal_edge_cost=0.0)
    pos = np.linspace(envs.POS_MIN, envs.POS_MAX, bins)
    vel = np.linspace(envs.VEL_MIN, envs.VEL_MAX, bins)
    P, V = np.meshgrid(pos, vel, indexing="ij")
    p0, v0 = P.ravel(), V.ravel()
    n = bins * bins
    half = neighborhood // 2
    results = []
    for goal in goals:
        if goal == "top":
            goal_nodes = [n]  # token
            goal_obs = GOAL_TOKEN
            reached_fn = lambda ip, iv: (pos[ip] >= 0.5) & (vel[iv] >= 0.0)
            name = "top"
        else:
            gp, gv = goal
            cells = [
                (ip, iv)
                for ip in range(max(0, gp - half), min(bins, gp + half + 1))
                for iv in range(max(0, gv - half), min(bins, gv + half + 1))
            ]
            goal_nodes = [ip * bins + iv for ip, iv in cells]
            goal_obs = envs.augment(pos[gp], vel[gv])
            reached_fn = lambda ip, iv, gp=gp, gv=gv: (np.abs(ip - gp) <= half) & (
                np.abs(iv - gv) <= half
            )
            name = f"point({gp},{gv})"
        dstar = orc.shortest_paths(graph, goal_nodes)[:n]
        oracle_returns = -np.minimum(dstar, budget)
        oracle_mean = float(oracle_returns.mean())

        cur_p, cur_v = p0.copy(), v0.copy()
        ip = np.rint((cur_p - envs.POS_MIN) / (envs.POS_MAX - envs.POS_MIN) * (bins - 1)).astype(int)
        iv = np.rint((cur_v - envs.VEL_MIN) / (envs.VEL_MAX - envs.VEL_MIN) * (bins - 1)).astype(int)
        returns = np.zeros(n)
        active = ~reached_fn(ip, iv)
        for t in range(budget):
            if not active.any():
                break
            obs = np.stack([cur_p[active], cur_v[active], np.zeros(active.sum())], axis=1)
            if oracle_policy_dstar is not None:
                acts = _oracle_descent_actions(
                    cur_p[active], cur_v[active], bins, oracle_policy_dstar[name]
                )
            elif policy_fn is not None:
                acts = policy_fn(obs, goal_obs)
            else:
                acts = greedy_actions(critic, obs, goal_obs)
            np_, nv = envs.mountain_car_step_batch(cur_p[active], cur_v[active], acts)
            np_, nv = envs.discretize_state(np_, nv, bins)
            returns[active] -= 1.0
            cur_p[active], cur_v[active] = np_, nv
            ip = np.rint((cur_p - envs.POS_MIN) / (envs.POS_MAX - envs.POS_MIN) * (bins - 1)).astype(int)
            iv = np.rint((cur_v - envs.VEL_MIN) / (envs.VEL_MAX - envs.VEL_MIN) * (bins - 1)).astype(int)
            active = active & ~reached_fn(ip, iv)
        results.append(
            GoalEvalResult(
                name,
                float(returns.mean()),
                oracle_mean,
                normalized_score(float(returns.mean()), oracle_mean, budget),
                float(1.0 - active.mean()),
            )
        )
    return EvalReport(results, budget)


def _oracle_descent_actions(p, v, bins: int, dstar: np.ndarray) -> np.ndarray:
    """Pick the action minimizing the oracle distance of the next state."""
    n = len(p)
    best = np.full(n, np.inf)
    acts = np.zeros(n, dtype=int)
    for a in range(envs.MC_ACTIONS):
        np_, nv = envs.mountain_car_step_batch(p, v, np.full(n, a))
        np_, nv = envs.discretize_state(np_, nv, bins)
        ip = np.rint((np_ - envs.POS_MIN) / (envs.POS_MAX - envs.POS_MIN) * (bins - 1)).astype(int)
        iv = np.rint((nv - envs.VEL_MIN) / (envs.VEL_MAX - envs.VEL_MIN) * (bins - 1)).astype(int)
        d = dstar[ip * bins + iv]
        better = d < best
        best[better] = d[better]
        acts[better] = a
    return acts
