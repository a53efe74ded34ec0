"""Quasimetric critic: encoder, projector, IQE-maxmean head, and the
residual latent transition model.

The head measures, per component, the Lebesgue measure of the union of
one-sided intervals [u_j, max(u_j, v_j)], then pools components with a
learned max/mean mixture. Identity of indiscernibles, nonnegativity, and
the triangle inequality hold by construction for any parameter values.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, maximum
from .nn import MlpParams, MlpSpec, mlp_apply, mlp_init, mlp_tensors


@dataclass
class IqeHead:
    components: int  # k
    component_size: int  # m
    mix_raw: float = 0.0  # mixing weight mu = sigmoid(mix_raw)

    @property
    def width(self) -> int:
        return self.components * self.component_size


def iqe_component_distance(u: np.ndarray, v: np.ndarray) -> float:
    """|union_j [u_j, max(u_j, v_j)]| for two equal-length vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("u and v must be equal-length vectors")
    return float(_iqe_components_np(u[None, None, :], v[None, None, :])[0, 0])


def _iqe_components_np(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched interval-union measure, shapes (..., k, m) -> (..., k)."""
    end = np.maximum(u, v)
    order = np.argsort(u, axis=-1, kind="stable")
    us = np.take_along_axis(u, order, -1)
    es = np.take_along_axis(end, order, -1)
    run = np.concatenate(
        [us[..., :1], np.maximum.accumulate(es[..., :-1], axis=-1)], axis=-1
    )
    return np.maximum(es - np.maximum(us, run), 0.0).sum(-1)


def _iqe_components_t(u: Tensor, v: Tensor) -> Tensor:
    """Graph version of the sweep; gradients route to active endpoints
    (union boundaries), ties broken by stable sort on (value, index)."""
    end = maximum(u, v)
    order = np.argsort(u.data, axis=-1, kind="stable")
    us = u.gather(order, -1)
    es = end.gather(order, -1)
    run = concat([us[..., :1], es[..., :-1].cummax(-1)], axis=-1)
    return (es - maximum(us, run)).relu().sum(axis=-1)


def iqe_maxmean(component_distances: np.ndarray, mix_raw: float) -> float:
    """mu * max + (1 - mu) * mean, mu = sigmoid(mix_raw)."""
    d = np.asarray(component_distances, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("component distances must be >= 0")
    mu = 1.0 / (1.0 + np.exp(-mix_raw))
    return float(mu * d.max() + (1.0 - mu) * d.mean())


@dataclass
class QuasimetricCritic:
    encoder: MlpParams
    projector: MlpParams
    head: IqeHead
    transition: MlpParams  # residual net g(z, one_hot(a)); T(z,a) = z + g
    n_actions: int
    symmetric: bool = False  # ablation: ||proj(z_a) - proj(z_b)||_2 head
    # fixed per-dimension affine input map applied before the encoder:
    # x -> (x - obs_shift) * obs_scale; None means identity
    obs_shift: np.ndarray | None = None
    obs_scale: np.ndarray | None = None

    @property
    def latent_width(self) -> int:
        return self.encoder.spec.out_width

    # ---- parameter plumbing ----

    def param_arrays(self) -> tuple[list[np.ndarray], np.ndarray]:
        """(mlp arrays in encoder/projector/transition order, mix_raw box)."""
        arrays = self.encoder.arrays() + self.projector.arrays() + self.transition.arrays()
        return arrays, np.array([self.head.mix_raw])

    def graph(self) -> "CriticGraph":
        return CriticGraph(self)

    def copy(self) -> "QuasimetricCritic":
        return QuasimetricCritic(
            self.encoder.copy(),
            self.projector.copy(),
            IqeHead(self.head.components, self.head.component_size, self.head.mix_raw),
            self.transition.copy(),
            self.n_actions,
            self.symmetric,
            None if self.obs_shift is None else self.obs_shift.copy(),
            None if self.obs_scale is None else self.obs_scale.copy(),
        )

    # ---- inference (numpy in, float/array out) ----

    def encode(self, s: np.ndarray) -> np.ndarray:
        g = self.graph()
        return g.encode(Tensor(np.atleast_2d(s))).data

    def latent_distance(self, z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
        g = self.graph()
        return g.latent_distance(Tensor(np.atleast_2d(z_a)), Tensor(np.atleast_2d(z_b))).data

    def state_distance(self, s: np.ndarray, goal: np.ndarray) -> np.ndarray:
        g = self.graph()
        s = np.atleast_2d(s)
        goal = np.atleast_2d(goal)
        if goal.shape[0] == 1 and s.shape[0] > 1:
            goal = np.broadcast_to(goal, (s.shape[0], goal.shape[1]))
        return g.latent_distance(g.encode(Tensor(s)), g.encode(Tensor(goal))).data

    def transition_predict(self, z: np.ndarray, a) -> np.ndarray:
        g = self.graph()
        z = np.atleast_2d(z)
        a = np.broadcast_to(np.asarray(a, dtype=np.int64), (z.shape[0],))
        return g.transition_predict(Tensor(z), a).data

    def q_distance(self, s: np.ndarray, a, goal: np.ndarray, step_cost: float = 1.0) -> np.ndarray:
        """d^z(T(f(s), a), f(g)) + step_cost, an estimate of -Q*(s,a;g)."""
        g = self.graph()
        s = np.atleast_2d(s)
        goal = np.atleast_2d(goal)
        if goal.shape[0] == 1 and s.shape[0] > 1:
            goal = np.broadcast_to(goal, (s.shape[0], goal.shape[1]))
        a = np.broadcast_to(np.asarray(a, dtype=np.int64), (s.shape[0],))
        zhat = g.transition_predict(g.encode(Tensor(s)), a)
        return g.latent_distance(zhat, g.encode(Tensor(goal))).data + step_cost


class CriticGraph:
    """One autodiff graph instance over a critic's parameters.

    Wraps every parameter as a leaf tensor once; all forward calls through
    the same CriticGraph share those leaves, so a single backward() yields
    joint gradients for any composed loss.
    """

    def __init__(self, critic: QuasimetricCritic):
        self.critic = critic
        self.enc_t = mlp_tensors(critic.encoder)
        self.proj_t = mlp_tensors(critic.projector)
        self.trans_t = mlp_tensors(critic.transition)
        self.mix_t = Tensor(np.array([critic.head.mix_raw]))

    def leaves(self) -> list[Tensor]:
        return self.enc_t + self.proj_t + self.trans_t + [self.mix_t]

    def grads(self) -> list[np.ndarray]:
        return [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.leaves()
        ]

    def encode(self, s: Tensor) -> Tensor:
        if s.data.shape[-1] != self.critic.encoder.spec.in_width:
            raise ValueError("observation width mismatch")
        if self.critic.obs_shift is not None:
            s = (s - self.critic.obs_shift) * self.critic.obs_scale
        return mlp_apply(self.enc_t, s)

    def latent_distance(self, z_a: Tensor, z_b: Tensor) -> Tensor:
        if z_a.data.shape[-1] != self.critic.latent_width:
            raise ValueError("latent width mismatch")
        return self.projected_distance(self.project(z_a), self.project(z_b))

    def project(self, z: Tensor) -> Tensor:
        """Projector MLP; exposed so callers can project a batch of
        latents once and measure several distance pairs from slices."""
        return mlp_apply(self.proj_t, z)

    def projected_distance(self, pa: Tensor, pb: Tensor) -> Tensor:
        if self.critic.symmetric:
            return ((pa - pb).square().sum(axis=-1) + 1e-12).sqrt()
        head = self.critic.head
        k, m = head.components, head.component_size
        comps = _iqe_components_t(
            pa.reshape(-1, k, m), pb.reshape(-1, k, m)
        )  # (B, k)
        mu = self.mix_t.sigmoid()
        return mu * comps.max(axis=-1) + (1.0 - mu) * comps.mean(axis=-1)

    def transition_predict(self, z: Tensor, actions: np.ndarray) -> Tensor:
        n_a = self.critic.n_actions
        actions = np.asarray(actions, dtype=np.int64)
        if np.any((actions < 0) | (actions >= n_a)):
            raise ValueError("invalid action index")
        onehot = np.zeros((z.data.shape[0], n_a))
        onehot[np.arange(len(actions)), actions] = 1.0
        inp = concat([z, Tensor(onehot)], axis=-1)
        return z + mlp_apply(self.trans_t, inp)


def build_critic(
    obs_width: int,
    n_actions: int,
    encoder_widths: list[int],
    projector_widths: list[int],
    transition_widths: list[int],
    components: int,
    component_size: int,
    seed: int,
    symmetric: bool = False,
    obs_shift: np.ndarray | None = None,
    obs_scale: np.ndarray | None = None,
) -> QuasimetricCritic:
    """Construct a critic; transition net final layer zero-initialized so
    T is the identity at init."""
    latent = encoder_widths[-1]
    head = IqeHead(components, component_size)
    enc = mlp_init(MlpSpec([obs_width] + encoder_widths), seed)
    proj = mlp_init(MlpSpec([latent] + projector_widths + [head.width]), seed + 1)
    trans = mlp_init(
        MlpSpec([latent + n_actions] + transition_widths + [latent]),
        seed + 2,
        final_layer_zero=True,
    )
    if obs_shift is not None:
        obs_shift = np.asarray(obs_shift, dtype=np.float64)
    if obs_scale is not None:
        obs_scale = np.asarray(obs_scale, dtype=np.float64)
    return QuasimetricCritic(enc, proj, head, trans, n_actions, symmetric, obs_shift, obs_scale)


# ---- checkpoint format: JSON header + little-endian f32 streams ----

MAGIC = b"QRLC"


def _header(critic: QuasimetricCritic, extra: dict | None) -> dict:
    def mlp_desc(p: MlpParams):
        return {"widths": p.spec.layer_widths}

    return {
        "encoder": mlp_desc(critic.encoder),
        "projector": mlp_desc(critic.projector),
        "transition": mlp_desc(critic.transition),
        "components": critic.head.components,
        "component_size": critic.head.component_size,
        "mix_raw": critic.head.mix_raw,
        "n_actions": critic.n_actions,
        "symmetric": critic.symmetric,
        "obs_shift": None if critic.obs_shift is None else critic.obs_shift.tolist(),
        "obs_scale": None if critic.obs_scale is None else critic.obs_scale.tolist(),
        "extra": extra or {},
    }


def save_checkpoint(path: str, critic: QuasimetricCritic, extra: dict | None = None) -> None:
    header = json.dumps(_header(critic, extra)).encode()
    arrays, _ = critic.param_arrays()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for a in arrays:
            f.write(a.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[QuasimetricCritic, dict]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError("not a critic checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        blob = f.read()
    enc_w = header["encoder"]["widths"]
    proj_w = header["projector"]["widths"]
    trans_w = header["transition"]["widths"]
    critic = QuasimetricCritic(
        mlp_init(MlpSpec(enc_w), 0),
        mlp_init(MlpSpec(proj_w), 0),
        IqeHead(header["components"], header["component_size"], header["mix_raw"]),
        mlp_init(MlpSpec(trans_w), 0),
        header["n_actions"],
        header.get("symmetric", False),
        None if header.get("obs_shift") is None else np.array(header["obs_shift"]),
        None if header.get("obs_scale") is None else np.array(header["obs_scale"]),
    )
    arrays, _ = critic.param_arrays()
    off = 0
    for a in arrays:
        n = a.size
        vals = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
        a[...] = vals.reshape(a.shape)
        off += n * 4
    return critic, header.get("extra", {})
