"""Dense relu MLPs, Adam, and the cosine learning-rate schedule.

Parameters live as plain numpy arrays; each forward pass builds a fresh
autodiff graph over them. `mlp_forward`/`mlp_backward` provide the
tape-style interface used by the gradient-check suites, while
`mlp_apply` is the graph-building entry point the critic composes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class DivergenceError(RuntimeError):
    """Raised when a training step produces non-finite numbers."""


@dataclass
class MlpSpec:
    layer_widths: list[int]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("widths must be >= 1")
        if self.hidden_activation != "relu" or self.output_activation != "identity":
            raise ValueError("only relu hidden / identity output supported")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list, layer order, weight before bias."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_init(spec: MlpSpec, seed: int, final_layer_zero: bool = False) -> MlpParams:
    """Fan-in-scaled normal weights (std = sqrt(2/fan_in)), zero biases.

    With final_layer_zero the last layer's weights are zeroed too, so the
    net is the constant-zero map at init (used by the residual transition
    model to start as the identity).
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    widths = spec.layer_widths
    for i, (nin, nout) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / nin), size=(nin, nout))
        if final_layer_zero and i == len(widths) - 2:
            w = np.zeros((nin, nout))
        weights.append(w)
        biases.append(np.zeros(nout))
    return MlpParams(spec, weights, biases)


def mlp_tensors(params: MlpParams) -> list[Tensor]:
    """Wrap parameters as graph leaves (same order as .arrays())."""
    return [Tensor(a) for a in params.arrays()]


def mlp_apply(param_tensors: list[Tensor], x: Tensor) -> Tensor:
    """Affine/relu composition over leaf tensors from mlp_tensors."""
    n_layers = len(param_tensors) // 2
    h = x
    for i in range(n_layers):
        w, b = param_tensors[2 * i], param_tensors[2 * i + 1]
        h = h @ w + b
        if i < n_layers - 1:
            h = h.relu()
    return h


class GradTape:
    """Forward record for one mlp_forward call; consumable once."""

    def __init__(self, out: Tensor, inp: Tensor, param_tensors: list[Tensor]):
        self._out = out
        self._inp = inp
        self._param_tensors = param_tensors
        self._consumed = False


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.in_width:
        raise ValueError(f"input shape {x.shape} does not match spec width {params.spec.in_width}")
    pt = mlp_tensors(params)
    inp = Tensor(x)
    out = mlp_apply(pt, inp)
    return out.data.copy(), GradTape(out, inp, pt)


def mlp_backward(tape: GradTape, output_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients for the recorded forward pass.

    Returns (param_grads in .arrays() order, input_grads).
    """
    if tape._consumed:
        raise RuntimeError("GradTape already consumed")
    tape._consumed = True
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != tape._out.data.shape:
        raise ValueError("output_grad shape mismatch")
    tape._out.backward(output_grad)
    param_grads = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tape._param_tensors
    ]
    inp_grad = tape._inp.grad if tape._inp.grad is not None else np.zeros_like(tape._inp.data)
    return param_grads, inp_grad


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, arrays: list[np.ndarray], lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.m = [np.zeros_like(a) for a in arrays]
        st.v = [np.zeros_like(a) for a in arrays]
        return st


def adam_step(
    state: AdamState,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    lr_scale: float = 1.0,
) -> list[np.ndarray]:
    """One bias-corrected Adam update; mutates params/state in place."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    lr = state.lr * lr_scale
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr to 0 over total_steps, no restarts."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps}]")
    return base_lr * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0
