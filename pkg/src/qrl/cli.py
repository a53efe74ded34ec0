"""Command-line entry point: dataset generation, oracle computation,
training, evaluation, heatmap export, and the acceptance-suite runner.

Grammar: qrl <command> [--config FILE] [--key value ...]. Every run
directory receives the fully resolved config echo before any
computation, so reruns are reproducible from the echo alone. All file
outputs are written atomically (temp + rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import envs, oracle
from .envs import GOAL_TOKEN, GridWorldSpec


def _atomic_json(path: str, obj: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, default=str)
        f.write("\n")
    os.replace(tmp, path)


def _load_config(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg.update(json.load(f))
    for key, val in getattr(args, "overrides", []):
        if key not in cfg:
            raise SystemExit(f"unknown config key {key!r}; known: {sorted(cfg)}")
        cur = cfg[key]
        if isinstance(cur, bool):
            cfg[key] = val.lower() in ("1", "true", "yes")
        elif isinstance(cur, int):
            cfg[key] = int(val)
        elif isinstance(cur, float):
            cfg[key] = float(val)
        elif isinstance(cur, list):
            cfg[key] = json.loads(val)
        else:
            cfg[key] = val
    return cfg


def _run_path(args, name: str) -> str:
    os.makedirs(args.run_dir, exist_ok=True)
    return os.path.join(args.run_dir, name)


def _parse_goals(spec_str: str, bins: int) -> list:
    """'top', '9grid', or 'pos_bin:vel_bin' items, comma-separated."""
    goals = []
    for item in spec_str.split(","):
        item = item.strip()
        if item == "top":
            goals.append("top")
        elif item == "9grid":
            qs = [round((bins - 1) * f) for f in (0.25, 0.5, 0.75)]
            goals.extend((ip, iv) for ip in qs for iv in qs)
        else:
            ip, iv = item.split(":")
            goals.append((int(ip), int(iv)))
    return goals


# ---- commands ----


def cmd_gen_data(args) -> int:
    cfg = _load_config(
        args,
        {
            "env": args.env,
            "bins": 64,
            "episodes": 200,
            "seed": 1,
            "max_episode_len": 250,
            "goal_edge_cost": envs.DEFAULT_GOAL_EDGE_COST,
            "width": 8,
            "height": 8,
        },
    )
    _atomic_json(_run_path(args, "gen_data_config.json"), cfg)
    if cfg["env"] == "mountaincar":
        ds = envs.generate_mountaincar_dataset(
            cfg["bins"], cfg["episodes"], cfg["seed"], cfg["max_episode_len"],
            cfg["goal_edge_cost"],
        )
        n_states = cfg["bins"] ** 2
        seen = {tuple(row) for row in np.round(ds.s[:, :2], 9)}
        coverage = len(seen) / n_states
    elif cfg["env"] == "grid":
        spec = GridWorldSpec(cfg["width"], cfg["height"])
        ds = envs.generate_gridworld_dataset(spec, cfg["episodes"], cfg["seed"])
        seen = {tuple(row) for row in np.round(ds.s[:, :2], 9)}
        coverage = len(seen) / len(spec.cells())
    else:
        raise SystemExit(f"unknown env {cfg['env']!r}")
    out = _run_path(args, args.out)
    envs.save_dataset(out, ds)
    summary = {
        "path": out,
        "n_records": len(ds),
        "n_real_records": int(ds.real_mask.sum()),
        "n_goal_records": int((~ds.real_mask).sum()),
        "coverage_fraction": coverage,
    }
    _atomic_json(_run_path(args, "dataset_summary.json"), summary)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_oracle(args) -> int:
    bins = args.bins
    graph = oracle.mountaincar_graph(bins, goal_edge_cost=0.0)
    n = bins * bins
    goals = _parse_goals(args.goals, bins)
    written = []
    ds = envs.load_dataset(args.dataset) if args.dataset else None
    for goal in goals:
        if goal == "top":
            nodes = [n]
            name = "top"
        else:
            ip, iv = goal
            nodes = [ip * bins + iv]
            name = f"{ip}_{iv}"
        col = oracle.shortest_paths(graph, nodes)[:n]
        path = _run_path(args, f"oracle_full_{name}.csv")
        oracle.save_distance_csv(path, col.reshape(bins, bins))
        written.append(path)
        if ds is not None:
            dg = oracle.dataset_graph(
                ds, lambda obs: oracle.mountaincar_node_index(obs, bins), n_nodes=n + 1
            )
            dcol = oracle.shortest_paths(dg, nodes)[:n]
            path = _run_path(args, f"oracle_dataset_{name}.csv")
            oracle.save_distance_csv(path, dcol.reshape(bins, bins))
            written.append(path)
    print("\n".join(written))
    return 0


def cmd_train(args) -> int:
    from . import baselines, models, trainer

    ds = envs.load_dataset(args.dataset)
    if args.algo == "qrl":
        if args.preset == "full-mountaincar":
            cfg_obj = trainer.QrlConfig.full_mountaincar()
        else:
            cfg_obj = trainer.QrlConfig.desk()
        cfg = _load_config(args, cfg_obj.to_dict())
        _atomic_json(_run_path(args, "train_config.json"), {"algo": "qrl", **cfg})
        critic, trace, _ = trainer.train(
            ds, trainer.QrlConfig.from_dict(cfg), progress=not args.quiet
        )
        models.save_checkpoint(_run_path(args, "critic.ckpt"), critic, {"algo": "qrl", "dataset": args.dataset})
        trainer.save_trace(_run_path(args, "trace.jsonl"), trace)
    elif args.algo in ("qlearn", "qlearn-qm"):
        head = "monolithic_mlp" if args.algo == "qlearn" else "quasimetric"
        cfg_obj = baselines.QLearnConfig.desk(head=head) if args.preset == "desk" else baselines.QLearnConfig(head=head)
        cfg = _load_config(args, cfg_obj.to_dict())
        _atomic_json(_run_path(args, "train_config.json"), {"algo": args.algo, **cfg})
        model, trace, _ = baselines.q_learning_train(
            ds, baselines.QLearnConfig(**cfg), progress=not args.quiet
        )
        if head == "quasimetric":
            models.save_checkpoint(_run_path(args, "critic.ckpt"), model, {"algo": args.algo})
        else:
            _save_vanilla(_run_path(args, "qnet.ckpt"), model)
        trainer.save_trace(_run_path(args, "trace.jsonl"), trace)
    else:
        raise SystemExit(f"unknown algo {args.algo!r}")
    print(f"artifacts written to {args.run_dir}")
    return 0


def _save_vanilla(path: str, net) -> None:
    import struct

    header = json.dumps(
        {"widths": net.params.spec.layer_widths, "n_actions": net.n_actions}
    ).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"QRLQ")
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for a in net.params.arrays():
            f.write(a.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_vanilla(path: str):
    import struct

    from .baselines import VanillaQNet
    from .nn import MlpSpec, mlp_init

    with open(path, "rb") as f:
        if f.read(4) != b"QRLQ":
            raise ValueError("not a Q-net checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        blob = f.read()
    net = VanillaQNet(mlp_init(MlpSpec(header["widths"]), 0), header["n_actions"])
    off = 0
    for a in net.params.arrays():
        a[...] = np.frombuffer(blob, dtype="<f4", count=a.size, offset=off).reshape(a.shape)
        off += a.size * 4
    return net


def cmd_eval(args) -> int:
    from . import baselines, models, trainer

    bins = args.bins
    goals = _parse_goals(args.goals, bins)
    if args.oracle_policy:
        graph = oracle.mountaincar_graph(bins, goal_edge_cost=0.0)
        n = bins * bins
        dstar = {}
        half = args.neighborhood // 2
        for goal in goals:
            if goal == "top":
                dstar["top"] = oracle.shortest_paths(graph, [n])[:n]
            else:
                gp, gv = goal
                cells = [
                    ip * bins + iv
                    for ip in range(max(0, gp - half), min(bins, gp + half + 1))
                    for iv in range(max(0, gv - half), min(bins, gv + half + 1))
                ]
                dstar[f"point({gp},{gv})"] = oracle.shortest_paths(graph, cells)[:n]
        report = trainer.evaluate_mountaincar(
            None, bins, goals, args.budget, args.neighborhood, oracle_policy_dstar=dstar
        )
    elif args.checkpoint.endswith("qnet.ckpt") or args.vanilla:
        net = load_vanilla(args.checkpoint)

        def policy(obs, goal_obs):
            g = np.broadcast_to(goal_obs, obs.shape)
            return net.q_values(obs, g).argmax(axis=1)

        report = trainer.evaluate_mountaincar(
            None, bins, goals, args.budget, args.neighborhood, policy_fn=policy
        )
    else:
        critic, _ = models.load_checkpoint(args.checkpoint)
        report = trainer.evaluate_mountaincar(critic, bins, goals, args.budget, args.neighborhood)
    out = _run_path(args, "eval_report.json")
    _atomic_json(out, report.to_dict())
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_heatmap(args) -> int:
    from . import models

    critic, _ = models.load_checkpoint(args.checkpoint)
    bins = args.bins
    pos = np.linspace(envs.POS_MIN, envs.POS_MAX, bins)
    vel = np.linspace(envs.VEL_MIN, envs.VEL_MAX, bins)
    P, V = np.meshgrid(pos, vel, indexing="ij")
    states = np.stack([P.ravel(), V.ravel(), np.zeros(bins * bins)], axis=1)
    written = []
    for goal in _parse_goals(args.goals, bins):
        if goal == "top":
            gobs, name = GOAL_TOKEN, "top"
        else:
            ip, iv = goal
            gobs, name = envs.augment(pos[ip], vel[iv]), f"{ip}_{iv}"
        d = critic.state_distance(states, gobs)
        path = _run_path(args, f"heatmap_{name}.csv")
        oracle.save_distance_csv(path, d.reshape(bins, bins))
        written.append(path)
    print("\n".join(written))
    return 0


def cmd_acceptance(args) -> int:
    from . import acceptance

    results = acceptance.run_all(fast=args.fast, verbose=True)
    _atomic_json(_run_path(args, "acceptance_report.json"), {"results": results})
    n_fail = sum(not r["passed"] for r in results)
    print(f"{len(results) - n_fail}/{len(results)} criteria passed")
    return 1 if n_fail else 0


def _kv(pair: str) -> tuple[str, str]:
    if "=" not in pair:
        raise argparse.ArgumentTypeError("overrides take the form key=value")
    k, v = pair.split("=", 1)
    return k, v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--run-dir", default=".", help="output directory")
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument(
            "--set", dest="overrides", type=_kv, action="append", default=[],
            metavar="KEY=VALUE", help="config override",
        )

    sp = sub.add_parser("gen-data", help="generate an offline dataset")
    common(sp)
    sp.add_argument("--env", default="mountaincar", choices=["mountaincar", "grid"])
    sp.add_argument("--out", default="dataset.qrld")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("oracle", help="export exact distance grids")
    common(sp)
    sp.add_argument("--bins", type=int, default=64)
    sp.add_argument("--goals", default="top")
    sp.add_argument("--dataset", default=None, help="also export dataset-restricted grids")
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("train", help="train a value model")
    common(sp)
    sp.add_argument("--algo", default="qrl", choices=["qrl", "qlearn", "qlearn-qm"])
    sp.add_argument("--preset", default="desk", choices=["desk", "full-mountaincar"])
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="greedy-policy evaluation")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--bins", type=int, default=64)
    sp.add_argument("--goals", default="top")
    sp.add_argument("--budget", type=int, default=200)
    sp.add_argument("--neighborhood", type=int, default=13)
    sp.add_argument("--oracle-policy", action="store_true", help="roll out the oracle-descent policy")
    sp.add_argument("--vanilla", action="store_true", help="checkpoint is a monolithic Q-net")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("heatmap", help="export learned distance grids")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bins", type=int, default=64)
    sp.add_argument("--goals", default="top")
    sp.set_defaults(fn=cmd_heatmap)

    sp = sub.add_parser("acceptance", help="run the acceptance suite")
    common(sp)
    sp.add_argument("--fast", action="store_true", help="skip the long training criteria")
    sp.set_defaults(fn=cmd_acceptance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("QRL_NUM_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
        os.environ.setdefault("OPENBLAS_NUM_THREADS", threads)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
