"""Temporal-difference baselines: goal-conditioned Q-learning with a
monolithic MLP head or with the quasimetric critic architecture.

Goals are relabeled hindsight-style: a future state of the same episode
(geometric lookahead, truncated at the episode end) or the abstract goal
token. The quasimetric-head variant keeps the latent transition model
and its two-sided regression loss (weight 5) and swaps the value
objective for TD regression against an EMA target network.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor
from .envs import GOAL_TOKEN, TransitionDataset, in_goal_set
from .models import QuasimetricCritic, build_critic
from .trainer import observation_affine
from .nn import (
    AdamState,
    DivergenceError,
    MlpParams,
    MlpSpec,
    adam_step,
    cosine_lr,
    mlp_apply,
    mlp_init,
    mlp_tensors,
)


@dataclass
class QLearnConfig:
    gamma: float = 0.95
    target_update_interval: int = 2
    target_ema: float = 0.005
    lr: float = 1e-3
    batch_size: int = 4096
    total_steps: int = 500_000
    relabel_geometric_p: float = 0.3
    goal_mix_prob: float = 0.05
    seed: int = 0
    head: str = "monolithic_mlp"  # or "quasimetric"
    normalize_obs: bool = True  # map each obs dimension to [-1, 1] from dataset range
    hidden_widths: list[int] = field(default_factory=lambda: [1024] * 6)
    transition_loss_weight: float = 5.0  # quasimetric head only
    encoder_widths: list[int] = field(default_factory=lambda: [256, 256, 128])
    projector_widths: list[int] = field(default_factory=lambda: [256])
    transition_widths: list[int] = field(default_factory=lambda: [256, 256])
    components: int = 8
    component_size: int = 16
    log_interval: int = 500

    @classmethod
    def desk(cls, **overrides) -> "QLearnConfig":
        cfg = cls(batch_size=512, total_steps=30_000, hidden_widths=[256, 256, 256])
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def _episode_end_index(dataset: TransitionDataset) -> np.ndarray:
    """end[i] = one past the last record of record i's episode (real
    records only; synthetic records get end[i] = i + 1)."""
    end = np.arange(len(dataset)) + 1
    for lo, hi in dataset.episode_bounds():
        end[lo:hi] = hi
    return end


def relabel_goal(
    dataset: TransitionDataset,
    index: int,
    p: float,
    rng: np.random.Generator,
    episode_end: np.ndarray | None = None,
    goal_token_prob: float = 0.0,
) -> np.ndarray:
    """Hindsight goal for one record: the state dt >= 1 steps ahead in
    the same episode (dt ~ Geometric(p), truncated), or the goal token."""
    if goal_token_prob > 0 and rng.random() < goal_token_prob:
        return GOAL_TOKEN.copy()
    if episode_end is None:
        episode_end = _episode_end_index(dataset)
    dt = int(rng.geometric(p))
    j = min(index + dt - 1, int(episode_end[index]) - 1)
    return dataset.s_next[j].copy()


def _relabel_batch(
    dataset: TransitionDataset,
    idx: np.ndarray,
    p: float,
    rng: np.random.Generator,
    episode_end: np.ndarray,
    goal_token_prob: float,
) -> np.ndarray:
    dt = rng.geometric(p, size=len(idx))
    j = np.minimum(idx + dt - 1, episode_end[idx] - 1)
    goals = dataset.s_next[j].copy()
    if goal_token_prob > 0:
        tok = rng.random(len(idx)) < goal_token_prob
        goals[tok] = GOAL_TOKEN
    return goals


def _reached(s_next: np.ndarray, goals: np.ndarray) -> np.ndarray:
    """Terminal test: next state matches the goal (token goals match any
    goal-set state)."""
    is_token = goals[:, 2] >= 0.5
    same = np.all(s_next == goals, axis=1)
    in_set = (s_next[:, 0] >= 0.5) & (s_next[:, 1] >= 0.0) & (s_next[:, 2] < 0.5)
    return np.where(is_token, in_set, same)


def td_target(
    q_next_max: np.ndarray, r: np.ndarray, terminal: np.ndarray, gamma: float
) -> np.ndarray:
    """r + gamma * max_a Q_target(s', a; g), bootstrap dropped at goal."""
    return r + gamma * np.where(terminal, 0.0, q_next_max)


@dataclass
class VanillaQNet:
    params: MlpParams
    n_actions: int
    # fixed per-dimension affine input map, applied to state and goal
    # alike before the net: x -> (x - obs_shift) * obs_scale
    obs_shift: np.ndarray | None = None
    obs_scale: np.ndarray | None = None

    def _normalize(self, obs: np.ndarray) -> np.ndarray:
        if self.obs_shift is None:
            return obs
        return (obs - self.obs_shift) * self.obs_scale

    def q_values(self, s: np.ndarray, goals: np.ndarray) -> np.ndarray:
        x = np.concatenate(
            [self._normalize(np.atleast_2d(s)), self._normalize(np.atleast_2d(goals))], axis=1
        )
        return mlp_apply(mlp_tensors(self.params), Tensor(x)).data

    def copy(self) -> "VanillaQNet":
        return VanillaQNet(
            self.params.copy(),
            self.n_actions,
            None if self.obs_shift is None else self.obs_shift.copy(),
            None if self.obs_scale is None else self.obs_scale.copy(),
        )


def _ema_update(target_arrays: list[np.ndarray], learner_arrays: list[np.ndarray], tau: float):
    for t, l in zip(target_arrays, learner_arrays):
        t *= 1.0 - tau
        t += tau * l


def q_learning_train(
    dataset: TransitionDataset,
    config: QLearnConfig,
    snapshot_steps: tuple[int, ...] = (),
    progress: bool = False,
):
    """Offline TD regression with target network and hindsight goals.

    Returns (model, trace, snapshots); model is a VanillaQNet or a
    QuasimetricCritic depending on config.head.
    """
    if config.head == "monolithic_mlp":
        return _train_vanilla(dataset, config, snapshot_steps, progress)
    if config.head == "quasimetric":
        return _train_quasimetric(dataset, config, snapshot_steps, progress)
    raise ValueError(f"unknown head {config.head!r}")


def _batch(dataset, config, rng, episode_end, real_idx):
    idx = real_idx[rng.integers(0, len(real_idx), size=config.batch_size)]
    goals = _relabel_batch(
        dataset, idx, config.relabel_geometric_p, rng, episode_end, config.goal_mix_prob
    )
    return (
        dataset.s[idx],
        dataset.a[idx],
        dataset.s_next[idx],
        dataset.r[idx],
        goals,
    )


def _train_vanilla(dataset, config, snapshot_steps, progress):
    rng = np.random.default_rng(config.seed)
    obs_w = dataset.s.shape[1]
    n_actions = int(dataset.a[dataset.real_mask].max()) + 1
    spec = MlpSpec([2 * obs_w] + list(config.hidden_widths) + [n_actions])
    obs_shift = obs_scale = None
    if config.normalize_obs:
        obs_shift, obs_scale = observation_affine(dataset)
    net = VanillaQNet(mlp_init(spec, config.seed), n_actions, obs_shift, obs_scale)
    target = net.copy()
    adam = AdamState.for_params(net.params.arrays(), config.lr)
    episode_end = _episode_end_index(dataset)
    real_idx = np.flatnonzero(dataset.real_mask)
    trace, snapshots = [], {}
    import time

    t0 = time.time()
    for step in range(config.total_steps):
        s, a, sn, r, goals = _batch(dataset, config, rng, episode_end, real_idx)
        qn = target.q_values(sn, goals).max(axis=1)
        terminal = _reached(sn, goals)
        y = td_target(qn, r, terminal, config.gamma)

        pt = mlp_tensors(net.params)
        x = np.concatenate([net._normalize(s), net._normalize(goals)], axis=1)
        q_all = mlp_apply(pt, Tensor(x))
        q_sel = q_all[np.arange(len(a)), a]
        loss = (q_sel - Tensor(y)).square().mean()
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite TD loss at step {step}")
        loss.backward()
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in pt]
        lr_scale = cosine_lr(step, config.total_steps, 1.0)
        adam_step(adam, net.params.arrays(), grads, lr_scale=lr_scale)

        if (step + 1) % config.target_update_interval == 0:
            _ema_update(target.params.arrays(), net.params.arrays(), config.target_ema)
        if (step + 1) % config.log_interval == 0 or step + 1 == config.total_steps:
            trace.append({"step": step + 1, "td_loss": float(loss.data)})
            if progress:
                print(
                    f"qlearn step {step + 1}/{config.total_steps} "
                    f"td={loss.data:.4f} ({time.time() - t0:.0f}s)",
                    flush=True,
                )
        if step + 1 in snapshot_steps:
            snapshots[step + 1] = net.copy()
    return net, trace, snapshots


def _q_next_max_quasimetric(critic: QuasimetricCritic, sn, goals) -> np.ndarray:
    g = critic.graph()
    n, n_a = len(sn), critic.n_actions
    z = g.encode(Tensor(sn)).data
    zg = g.encode(Tensor(goals)).data
    zh = g.transition_predict(Tensor(np.tile(z, (n_a, 1))), np.repeat(np.arange(n_a), n))
    d = g.latent_distance(zh, Tensor(np.tile(zg, (n_a, 1)))).data.reshape(n_a, n)
    return (-d).max(axis=0)


def _train_quasimetric(dataset, config, snapshot_steps, progress):
    rng = np.random.default_rng(config.seed)
    obs_w = dataset.s.shape[1]
    n_actions = int(dataset.a[dataset.real_mask].max()) + 1
    obs_shift = obs_scale = None
    if config.normalize_obs:
        obs_shift, obs_scale = observation_affine(dataset)
    critic = build_critic(
        obs_w,
        n_actions,
        config.encoder_widths,
        config.projector_widths,
        config.transition_widths,
        config.components,
        config.component_size,
        seed=config.seed,
        obs_shift=obs_shift,
        obs_scale=obs_scale,
    )
    target = critic.copy()
    arrays, _ = critic.param_arrays()
    adam = AdamState.for_params(arrays + [np.array([critic.head.mix_raw])], config.lr)
    episode_end = _episode_end_index(dataset)
    real_idx = np.flatnonzero(dataset.real_mask)
    trace, snapshots = [], {}
    import time

    t0 = time.time()
    for step in range(config.total_steps):
        s, a, sn, r, goals = _batch(dataset, config, rng, episode_end, real_idx)
        qn = _q_next_max_quasimetric(target, sn, goals)
        terminal = _reached(sn, goals)
        y = td_target(qn, r, terminal, config.gamma)

        g = critic.graph()
        z = g.encode(Tensor(s))
        zn = g.encode(Tensor(sn))
        zg = g.encode(Tensor(goals))
        zh = g.transition_predict(z, a)
        q = -g.latent_distance(zh, zg)
        tl = 0.5 * (
            g.latent_distance(zh, zn).square() + g.latent_distance(zn, zh).square()
        ).mean()
        loss = (q - Tensor(y)).square().mean() + config.transition_loss_weight * tl
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite TD loss at step {step}")
        loss.backward()

        arrays, _ = critic.param_arrays()
        params = arrays + [np.array([critic.head.mix_raw])]
        lr_scale = cosine_lr(step, config.total_steps, 1.0)
        adam_step(adam, params, g.grads(), lr_scale=lr_scale)
        critic.head.mix_raw = float(params[-1][0])

        if (step + 1) % config.target_update_interval == 0:
            t_arrays, _ = target.param_arrays()
            l_arrays, _ = critic.param_arrays()
            _ema_update(t_arrays, l_arrays, config.target_ema)
            target.head.mix_raw += config.target_ema * (
                critic.head.mix_raw - target.head.mix_raw
            )
        if (step + 1) % config.log_interval == 0 or step + 1 == config.total_steps:
            trace.append(
                {"step": step + 1, "td_loss": float(loss.data), "transition_loss": float(tl.data)}
            )
            if progress:
                print(
                    f"qlearn-qm step {step + 1}/{config.total_steps} "
                    f"td={loss.data:.4f} ({time.time() - t0:.0f}s)",
                    flush=True,
                )
        if step + 1 in snapshot_steps:
            snapshots[step + 1] = critic.copy()
    return critic, trace, snapshots


def vanilla_value_estimates(net: VanillaQNet, states: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """V(s; g) = max_a Q(s, a; g) for a batch of states."""
    goals = np.broadcast_to(np.atleast_2d(goal), (len(states), len(goal)))
    return net.q_values(states, goals).max(axis=1)


def quasimetric_value_estimates(
    critic: QuasimetricCritic, states: np.ndarray, goal: np.ndarray
) -> np.ndarray:
    goals = np.broadcast_to(np.atleast_2d(goal), (len(states), len(goal)))
    return _q_next_max_quasimetric(critic, states, goals)