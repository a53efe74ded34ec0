"""Executable acceptance suite: property checks and scaled-down
quantitative benchmarks, each with a pass/fail verdict and details.

The criteria are ordered so heavy artifacts are shared: the gridworld
recovery run also backs the Q-error bound check, and the MountainCar
benchmark runs back both the learning-dynamics comparison and the
symmetric-head ablation.
"""

from __future__ import annotations

import time

import numpy as np

from . import envs, oracle
from .autodiff import Tensor
from .envs import GOAL_TOKEN, GridWorldSpec
from .models import build_critic
from .nn import MlpSpec, mlp_backward, mlp_forward, mlp_init
from .trainer import QrlConfig, constraint_term, evaluate_mountaincar, train

# benchmark constants shared by several criteria
GRID_SIDE = 8
GRID_STEPS = 8_000
MC_BINS = 64
MC_EPISODES = 230
MC_SEED = 1
EPSILON = 0.25


# ---- A1: quasimetric axioms ----


def check_quasimetric_axioms(
    n_samples: int = 10_000, slack: float = 1e-5, seed: int = 0
) -> tuple[bool, dict]:
    """d(x,x) = 0 exactly, d >= 0, triangle inequality within slack, on
    random latents through a randomly initialized distance head."""
    rng = np.random.default_rng(seed)
    critic = build_critic(3, 3, [64, 32], [64], [32], 8, 16, seed=seed)
    critic.head.mix_raw = float(rng.normal())
    z = rng.normal(scale=2.0, size=(3, n_samples, critic.latent_width))
    d_self = critic.latent_distance(z[0], z[0])
    dab = critic.latent_distance(z[0], z[1])
    dbc = critic.latent_distance(z[1], z[2])
    dac = critic.latent_distance(z[0], z[2])
    worst = float(np.max(dac - (dab + dbc)))
    details = {
        "n_samples": n_samples,
        "max_self_distance": float(np.max(np.abs(d_self))),
        "min_distance": float(min(dab.min(), dbc.min(), dac.min())),
        "worst_triangle_gap": worst,
        "slack": slack,
    }
    passed = (
        np.all(d_self == 0.0)
        and details["min_distance"] >= 0.0
        and worst <= slack
    )
    return bool(passed), details


def _a1(ctx, fast):
    return check_quasimetric_axioms(2_000 if fast else 10_000)


# ---- A2: gradient correctness ----


def _fd_check(f, arr, analytic, n_probe, rng, h=1e-6):
    """Max symmetric relative error of analytic vs central differences
    over n_probe sampled entries of arr."""
    worst = 0.0
    flat = arr.reshape(-1)
    an = analytic.reshape(-1)
    idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        denom = max(abs(fd) + abs(an[i]), 1e-3)
        worst = max(worst, abs(fd - an[i]) / denom)
    return worst


def _mlp_numpy(params, x):
    """(min |relu pre-activation|, output) of a plain forward pass."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    gap = np.inf
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w + b
        if i < last:
            gap = min(gap, float(np.min(np.abs(pre))))
            h = np.maximum(pre, 0.0)
        else:
            h = pre
    return gap, h


def _head_inputs_separated(u, v, k, m, tol):
    """True when every interval endpoint within each component and every
    component measure is pairwise separated by > tol, so the distance is
    differentiable in a tol-neighborhood (no sort/max/boundary ties)."""
    from .models import _iqe_components_np

    uu = u.reshape(-1, k, m)
    vv = v.reshape(-1, k, m)
    pts = np.concatenate([uu, vv], axis=-1)  # (B, k, 2m)
    sorted_pts = np.sort(pts, axis=-1)
    if np.min(np.diff(sorted_pts, axis=-1)) <= tol:
        return False
    if k > 1:
        comps = np.sort(_iqe_components_np(uu, vv), axis=-1)
        if np.min(np.diff(comps, axis=-1)) <= tol:
            return False
    return True


def _smooth_critic_inputs(critic, s, a, g_obs, tol=1e-4):
    """Reject (input, parameter) configurations near a subgradient tie:
    the gradient check must compare against finite differences only where
    the loss is differentiable."""
    gap_s, z = _mlp_numpy(critic.encoder, s)
    gap_g, zg = _mlp_numpy(critic.encoder, g_obs)
    onehot = np.zeros((len(z), critic.n_actions))
    onehot[np.arange(len(a)), a] = 1.0
    gap_t, res = _mlp_numpy(critic.transition, np.concatenate([z, onehot], axis=1))
    gap_pu, u = _mlp_numpy(critic.projector, z + res)
    gap_pv, v = _mlp_numpy(critic.projector, zg)
    if min(gap_s, gap_g, gap_t, gap_pu, gap_pv) <= tol:
        return False
    return _head_inputs_separated(u, v, critic.head.components, critic.head.component_size, tol)


def check_gradients(n_configs: int = 200, seed: int = 0) -> tuple[bool, dict]:
    rng = np.random.default_rng(seed)
    worst_mlp = 0.0
    worst_iqe = 0.0
    for cfg_i in range(n_configs):
        kind = cfg_i % 2
        if kind == 0:
            # plain MLP, inputs resampled away from relu kinks
            widths = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(2, 4)))]
            params = mlp_init(MlpSpec(widths), seed=cfg_i)
            for _ in range(50):
                x = rng.normal(size=(int(rng.integers(1, 4)), widths[0]))
                h = x
                ok = True
                for w, b in zip(params.weights[:-1], params.biases[:-1]):
                    h = h @ w + b
                    if np.any(np.abs(h) < 1e-3):
                        ok = False
                        break
                    h = np.maximum(h, 0.0)
                if ok:
                    break

            def loss():
                out, _ = mlp_forward(params, x)
                return float((out**2).sum())

            out, tape = mlp_forward(params, x)
            grads, _ = mlp_backward(tape, 2.0 * out)
            for arr, g in zip(params.arrays(), grads):
                worst_mlp = max(worst_mlp, _fd_check(loss, arr, g, 3, rng))
        else:
            # encoder -> projector -> interval head -> transition chain
            k = int(rng.integers(1, 4))
            m = int(rng.integers(2, 5))
            critic = build_critic(3, 2, [8, 4], [8], [8], k, m, seed=cfg_i)
            critic.transition.weights[-1] += 0.3 * rng.normal(
                size=critic.transition.weights[-1].shape
            )
            for _ in range(100):
                s = rng.normal(size=(2, 3))
                g_obs = rng.normal(size=(2, 3))
                a = rng.integers(0, 2, size=2)
                if _smooth_critic_inputs(critic, s, a, g_obs):
                    break
            else:
                continue  # critic too degenerate to probe smoothly

            def loss():
                return float(critic.q_distance(s, a, g_obs).sum())

            graph = critic.graph()
            zh = graph.transition_predict(graph.encode(Tensor(s)), a)
            d = graph.latent_distance(zh, graph.encode(Tensor(g_obs)))
            d.sum().backward()
            grads = graph.grads()
            arrays, _ = critic.param_arrays()
            for arr, g in zip(arrays, grads[:-1]):
                worst_iqe = max(worst_iqe, _fd_check(loss, arr, g, 2, rng))
    details = {
        "n_configs": n_configs,
        "worst_rel_err_mlp": float(worst_mlp),
        "worst_rel_err_through_head": float(worst_iqe),
    }
    return worst_mlp < 1e-4 and worst_iqe < 1e-3, details


def _a2(ctx, fast):
    return check_gradients(40 if fast else 200)


# ---- A3: search equivalence ----


def _random_graph(rng, n, density=0.25):
    m = max(n, int(density * n * n))
    # dyadic costs: path sums exact in float64, so the two algorithms
    # must agree bitwise
    return oracle.DiscreteMdpGraph(
        n,
        rng.integers(0, n, size=m),
        rng.integers(0, n, size=m),
        rng.integers(1, 65, size=m) / 8.0,
    )


def check_search_equivalence(n_graphs: int = 100, seed: int = 0) -> tuple[bool, dict]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    violations = 0
    for _ in range(n_graphs):
        g = _random_graph(rng, int(rng.integers(2, 51)))
        D = oracle.all_pairs_shortest_paths(g)
        F = oracle.floyd_warshall(oracle.graph_cost_matrix(g))
        if not np.array_equal(D, F):
            mismatches += 1
        if oracle.check_quasimetric(D, slack=0.0):
            violations += 1
    details = {"n_graphs": n_graphs, "mismatches": mismatches, "axiom_violations": violations}
    return mismatches == 0 and violations == 0, details


def _a3(ctx, fast):
    return check_search_equivalence(30 if fast else 100)


# ---- A4: quasimetric <-> MDP round trip ----


def check_roundtrip(n_trials: int = 100, seed: int = 0) -> tuple[bool, dict]:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_trials):
        n = int(rng.integers(2, 13))
        C = rng.integers(0, 33, size=(n, n)) / 8.0
        np.fill_diagonal(C, 0.0)
        D = oracle.minplus_closure(C)
        back = oracle.all_pairs_shortest_paths(oracle.mdp_from_quasimetric(D))
        if not np.array_equal(back, D):
            failures += 1
    # fixed-policy cycle values: reaching 2 from 0 requires going through
    # 1, but the direct entry is missing -> not a quasimetric
    on_policy = np.array(
        [[0.0, 1.0, np.inf], [np.inf, 0.0, 1.0], [np.inf, np.inf, 0.0]]
    )
    counterexample_rejected = ("tri", 0, 1, 2) in oracle.check_quasimetric(on_policy)
    details = {
        "n_trials": n_trials,
        "roundtrip_failures": failures,
        "counterexample_rejected": counterexample_rejected,
    }
    return failures == 0 and counterexample_rejected, details


def _a4(ctx, fast):
    return check_roundtrip(30 if fast else 100)


# ---- A5: maximality of the shortest-path solution ----


def check_maximality(n_samples: int = 1000, seed: int = 0) -> tuple[bool, dict]:
    rng = np.random.default_rng(seed)
    g = _random_graph(rng, 20, density=0.3)
    D = oracle.all_pairs_shortest_paths(g)
    finite = np.isfinite(D)
    dominated = 0
    for s in range(n_samples):
        d = oracle.feasible_quasimetric_sample(D, g, seed=s)
        if np.all(d[finite] <= D[finite] + 1e-9):
            dominated += 1
    # scaling every edge by gamma = 1 recovers the maximizer itself
    exact = np.array_equal(oracle.floyd_warshall(oracle.graph_cost_matrix(g)), D)
    details = {"n_samples": n_samples, "dominated": dominated, "gamma_one_exact": exact}
    return dominated == n_samples and exact, details


def _a5(ctx, fast):
    return check_maximality(200 if fast else 1000)


# ---- A6: constrained recovery of gridworld distances ----


def run_gridworld_recovery(
    total_steps: int = GRID_STEPS, seed: int = 0
) -> tuple[dict, object]:
    spec = GridWorldSpec(GRID_SIDE, GRID_SIDE)
    dataset = envs.gridworld_full_coverage_dataset(spec)
    cfg = QrlConfig.desk(total_steps=total_steps, seed=seed, goal_mix_prob=0.0)
    critic, trace, _ = train(dataset, cfg)

    graph = oracle.gridworld_graph(spec)
    d_star = oracle.all_pairs_shortest_paths(graph)
    obs = np.stack([spec.observe(x, y) for x, y in spec.cells()])
    n = len(obs)
    model = np.stack(
        [critic.state_distance(np.tile(o, (n, 1)), obs) for o in obs]
    )
    cons = constraint_term(critic, dataset.s, dataset.s_next, dataset.r)
    mask = np.ones_like(d_star, dtype=bool)
    report = oracle.value_error_report(model, d_star, mask)
    over = float(np.mean(model > (1 + EPSILON) * d_star + 1e-3))
    metrics = {
        "constraint_term": cons,
        "constraint_budget": EPSILON**2 * 1.1,
        "mean_relative_error": report.mean_relative_error,
        "spearman": report.spearman,
        "fraction_over_budget_pairs": over,
        "total_steps": total_steps,
    }
    return metrics, critic


def _a6(ctx, fast):
    if fast:
        return True, {"skipped": True}
    metrics, critic = run_gridworld_recovery()
    ctx["grid_critic"] = critic
    passed = (
        metrics["constraint_term"] <= metrics["constraint_budget"]
        and metrics["mean_relative_error"] < 0.10
        and metrics["fraction_over_budget_pairs"] < 0.05
        and metrics["spearman"] > 0.95
    )
    return passed, metrics


# ---- A7: MountainCar desk benchmark ----


def _mc_spearman(critic, d_star_top: np.ndarray, bins: int) -> float:
    pos = np.linspace(envs.POS_MIN, envs.POS_MAX, bins)
    vel = np.linspace(envs.VEL_MIN, envs.VEL_MAX, bins)
    P, V = np.meshgrid(pos, vel, indexing="ij")
    states = np.stack([P.ravel(), V.ravel(), np.zeros(bins * bins)], axis=1)
    model = critic.state_distance(states, GOAL_TOKEN)
    finite = np.isfinite(d_star_top)
    return oracle.value_error_report(model[finite], d_star_top[finite], np.ones(finite.sum(), bool)).spearman


def _vanilla_spearman(net, d_star_top: np.ndarray, bins: int) -> float:
    from .baselines import vanilla_value_estimates

    pos = np.linspace(envs.POS_MIN, envs.POS_MAX, bins)
    vel = np.linspace(envs.VEL_MIN, envs.VEL_MAX, bins)
    P, V = np.meshgrid(pos, vel, indexing="ij")
    states = np.stack([P.ravel(), V.ravel(), np.zeros(bins * bins)], axis=1)
    model = -vanilla_value_estimates(net, states, GOAL_TOKEN)
    finite = np.isfinite(d_star_top)
    return oracle.value_error_report(model[finite], d_star_top[finite], np.ones(finite.sum(), bool)).spearman


def run_mountaincar_benchmark(seed: int = 0, progress: bool = False) -> dict:
    """Shared runs behind the desk benchmark, the learning-dynamics
    comparison, and the symmetric-head ablation."""
    from .baselines import QLearnConfig, q_learning_train

    dataset = envs.generate_mountaincar_dataset(MC_BINS, MC_EPISODES, MC_SEED)
    graph = oracle.mountaincar_graph(MC_BINS, goal_edge_cost=0.0)
    d_star_top = oracle.shortest_paths(graph, [MC_BINS * MC_BINS])[: MC_BINS * MC_BINS]

    cfg = QrlConfig.desk(seed=seed)
    quarter = cfg.total_steps // 4
    critic, _, snaps = train(dataset, cfg, snapshot_steps=(quarter,), progress=progress)
    report = evaluate_mountaincar(critic, MC_BINS, ["top"], budget=200)

    qcfg = QLearnConfig.desk(seed=seed, total_steps=quarter)
    qnet, _, _ = q_learning_train(dataset, qcfg, progress=progress)

    sym_cfg = QrlConfig.desk(seed=seed, symmetric_ablation=True)
    sym_critic, _, _ = train(dataset, sym_cfg, progress=progress)

    return {
        "dataset": dataset,
        "d_star_top": d_star_top,
        "critic": critic,
        "score_top": report.goals[0].normalized_score,
        "spearman_qrl": _mc_spearman(critic, d_star_top, MC_BINS),
        "spearman_qrl_quarter": _mc_spearman(snaps[quarter], d_star_top, MC_BINS),
        "spearman_vanilla_quarter": _vanilla_spearman(qnet, d_star_top, MC_BINS),
        "spearman_symmetric": _mc_spearman(sym_critic, d_star_top, MC_BINS),
        "quarter_steps": quarter,
    }


def _a7(ctx, fast):
    if fast:
        return True, {"skipped": True}
    runs = run_mountaincar_benchmark()
    ctx["mc_runs"] = runs
    details = {
        k: runs[k]
        for k in (
            "score_top",
            "spearman_qrl",
            "spearman_qrl_quarter",
            "spearman_vanilla_quarter",
            "quarter_steps",
        )
    }
    passed = (
        runs["score_top"] >= 70.0
        and runs["spearman_qrl"] > 0.9
        and runs["spearman_qrl_quarter"] > runs["spearman_vanilla_quarter"]
    )
    return passed, details


# ---- A8: Q-error bound ----


def check_q_error_bound(critic, n_pairs: int = 10_000, seed: int = 0) -> tuple[bool, dict]:
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n_pairs, 3))
    sn = rng.uniform(-1, 1, size=(n_pairs, 3))
    goals = rng.uniform(-1, 1, size=(n_pairs, 3))
    a = rng.integers(0, critic.n_actions, size=n_pairs)
    z = critic.encode(s)
    zn = critic.encode(sn)
    zg = critic.encode(goals)
    zh = critic.transition_predict(z, a)
    lhs = np.abs(critic.latent_distance(zh, zg) - critic.latent_distance(zn, zg))
    rhs = np.maximum(critic.latent_distance(zh, zn), critic.latent_distance(zn, zh))
    worst = float(np.max(lhs - rhs))
    return worst <= 1e-5, {"n_pairs": n_pairs, "worst_gap": worst}


def _a8(ctx, fast):
    critic = ctx.get("grid_critic")
    if critic is None:
        # bound is architectural: any parameters qualify
        rng = np.random.default_rng(1)
        critic = build_critic(3, 4, [64, 32], [64], [32], 4, 8, seed=1)
        critic.transition.weights[-1] += rng.normal(
            size=critic.transition.weights[-1].shape
        )
    return check_q_error_bound(critic, 2_000 if fast else 10_000)


# ---- A9: symmetric-head ablation ordering ----


def _a9(ctx, fast):
    if fast:
        return True, {"skipped": True}
    runs = ctx.get("mc_runs")
    if runs is None:
        runs = run_mountaincar_benchmark()
        ctx["mc_runs"] = runs
    details = {
        "spearman_qrl": runs["spearman_qrl"],
        "spearman_symmetric": runs["spearman_symmetric"],
    }
    return runs["spearman_qrl"] > runs["spearman_symmetric"], details


# ---- A10: TD baseline sanity ----


def check_td_fixed_point(seed: int = 0) -> tuple[bool, dict]:
    from .baselines import QLearnConfig, q_learning_train, vanilla_value_estimates
    from .oracle import check_quasimetric

    spec = GridWorldSpec(4, 4)
    # random-walk episodes so hindsight relabeling covers distant goals
    dataset = envs.generate_gridworld_dataset(spec, episodes=60, seed=seed)
    gamma = 0.95
    cfg = QLearnConfig(
        batch_size=256,
        total_steps=12_000,
        hidden_widths=[128, 128],
        gamma=gamma,
        seed=seed,
        goal_mix_prob=0.0,
        log_interval=2_000,
    )
    net, _, _ = q_learning_train(dataset, cfg)

    graph = oracle.gridworld_graph(spec)
    d_star = oracle.all_pairs_shortest_paths(graph)
    obs = np.stack([spec.observe(x, y) for x, y in spec.cells()])
    worst_rel = 0.0
    for j, goal in enumerate(obs):
        v = vanilla_value_estimates(net, obs, goal)
        n_steps = d_star[:, j]
        expect = -(1 - gamma**n_steps) / (1 - gamma)
        pos = n_steps > 0
        worst_rel = max(
            worst_rel, float(np.max(np.abs(v[pos] - expect[pos]) / np.abs(expect[pos])))
        )

    # quasimetric-head variant: distances satisfy the axioms regardless
    # of training state
    qcfg = QLearnConfig(
        batch_size=128,
        total_steps=300,
        head="quasimetric",
        encoder_widths=[64, 32],
        projector_widths=[64],
        transition_widths=[64],
        components=4,
        component_size=8,
        seed=seed,
        log_interval=100,
    )
    critic, _, _ = q_learning_train(dataset, qcfg)
    D = np.stack([critic.state_distance(np.tile(o, (len(obs), 1)), obs) for o in obs])
    axiom_violations = len(check_quasimetric(D, slack=1e-5))
    details = {
        "worst_relative_value_error": worst_rel,
        "axiom_violations": axiom_violations,
    }
    return worst_rel < 0.05 and axiom_violations == 0, details


def _a10(ctx, fast):
    if fast:
        return True, {"skipped": True}
    return check_td_fixed_point()


CRITERIA = [
    ("A1 quasimetric axioms", _a1),
    ("A2 gradient correctness", _a2),
    ("A3 search equivalence", _a3),
    ("A4 quasimetric round trip", _a4),
    ("A5 shortest-path maximality", _a5),
    ("A6 gridworld recovery", _a6),
    ("A7 mountaincar desk benchmark", _a7),
    ("A8 q-error bound", _a8),
    ("A9 symmetric ablation ordering", _a9),
    ("A10 td baseline sanity", _a10),
]


def run_all(fast: bool = False, verbose: bool = False) -> list[dict]:
    ctx: dict = {}
    results = []
    for name, fn in CRITERIA:
        t0 = time.time()
        try:
            passed, details = fn(ctx, fast)
        except Exception as exc:  # a crash is a failure, not an abort
            passed, details = False, {"error": repr(exc)}
        rt = time.time() - t0
        results.append(
            {"name": name, "passed": bool(passed), "runtime_s": round(rt, 3), "details": details}
        )
        if verbose:
            status = "PASS" if passed else "FAIL"
            print(f"{name}: {status} ({rt:.1f}s) {details}", flush=True)
    return results
