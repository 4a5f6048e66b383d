"""Command-line entry points.

Subcommands: gen-experts (roll the scripted controller into a demo file),
train (online imitation run), eval (score a snapshot), recover-rewards
(decode per-step rewards from a snapshot and correlate with ground truth),
export-plots (split a metrics CSV into per-metric series).

Every run echoes its resolved configuration; outputs are deterministic
functions of (inputs, seed), so repeated runs are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .envs import expert_action, make_env
from .planner import plan
from .replay import Trajectory, load_demos, save_demos
from .trainer import build_configs, evaluate, train
from .worldmodel import WorldModel

__all__ = ["main", "pearson", "generate_demos"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def pearson(x, y):
    """Product-moment correlation of two equal-length series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("pearson needs two 1-d series of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson undefined for a zero-variance series")
    return float(np.sum(xc * yc) / (sx * sy))


def generate_demos(env_id, n_trajectories, seed):
    """Roll the scripted expert; returns trajectories with rewards attached."""
    env = make_env(env_id)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_trajectories):
        s = env.reset(rng)
        states, actions, rewards = [np.asarray(s)], [], []
        for t in range(env.spec.episode_len):
            a = expert_action(env_id, s)
            res = env.step(s, a, step_index=t)
            states.append(np.asarray(res.next_state))
            actions.append(np.asarray(a))
            rewards.append(res.ground_truth_reward)
            s = res.next_state
        out.append(
            Trajectory(
                states=np.stack(states),
                actions=np.stack(actions),
                rewards=np.asarray(rewards),
                source="expert",
            )
        )
    return out


def _merge_config(args):
    """defaults <- config file <- explicit flags; returns the flat dict."""
    raw = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a flat JSON object")
        raw.update(loaded)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "env", None) is not None:
        raw["env_id"] = args.env
    if getattr(args, "p_tremble", None) is not None:
        raw["p_tremble"] = args.p_tremble
    if getattr(args, "grad_penalty", None) is not None:
        raw["use_grad_penalty"] = args.grad_penalty == "on"
    if getattr(args, "objective_form", None) is not None:
        raw["use_initial_state_form"] = args.objective_form == "initial-state"
    if getattr(args, "alpha", None) is not None:
        raw["alpha"] = args.alpha
    return raw


def _echo(command, raw, tcfg=None):
    resolved = dict(raw)
    if tcfg is not None:
        resolved["gamma"] = tcfg.gamma
        resolved["seed_steps"] = tcfg.seed_steps
    print(f"resolved config [{command}]: " + json.dumps(resolved, sort_keys=True))


def _cmd_gen_experts(args):
    raw = _merge_config(args)
    tcfg, _, _ = build_configs(raw)
    _echo("gen-experts", raw, tcfg)
    demos = generate_demos(tcfg.env_id, tcfg.n_demos, tcfg.seed)
    save_demos(args.out, demos, tcfg.env_id)
    mean_ret = float(np.mean([t.rewards.sum() for t in demos]))
    print(f"wrote {len(demos)} demos to {args.out} (mean return {mean_ret:.4f})")
    return 0


def _cmd_train(args):
    raw = _merge_config(args)
    tcfg, pcfg, ocfg = build_configs(raw)
    _echo("train", raw, tcfg)
    model, records = train(tcfg, pcfg, ocfg, args.demos, out_dir=args.out)
    last_eval = [r.eval_return for r in records if not np.isnan(r.eval_return)]
    tail = f", last eval return {last_eval[-1]:.4f}" if last_eval else ""
    print(f"trained {tcfg.total_env_steps} env steps, {len(records)} episodes{tail}")
    print(f"artifacts in {args.out}")
    return 0


def _cmd_eval(args):
    raw = _merge_config(args)
    tcfg, pcfg, _ = build_configs(raw)
    _echo("eval", raw, tcfg)
    model = WorldModel.load(args.snapshot)
    env = make_env(tcfg.env_id)
    rng = np.random.default_rng(tcfg.seed)
    mean_ret, returns = evaluate(model, env, tcfg.n_eval_episodes, rng, planner_cfg=pcfg)
    if not np.all(np.isfinite(returns)):
        raise FloatingPointError("non-finite evaluation return")
    report = {
        "env_id": tcfg.env_id,
        "snapshot": args.snapshot,
        "mean_return": mean_ret,
        "returns": [float(r) for r in returns],
    }
    print(json.dumps(report, sort_keys=True))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
    return 0


def _decode_trajectory(model, traj, rng, n_value_samples=8):
    zs = model.encode(traj.states)
    z, z_next = zs[:-1], zs[1:]
    return model.decode_reward(z, traj.actions, z_next, rng=rng, n_value_samples=n_value_samples)[
        :, 0
    ]


def _cmd_recover_rewards(args):
    raw = _merge_config(args)
    tcfg, pcfg, _ = build_configs(raw)
    _echo("recover-rewards", raw, tcfg)
    model = WorldModel.load(args.snapshot)
    if args.demos:
        trajs = load_demos(args.demos)
    else:
        trajs = _planner_rollouts(model, tcfg, pcfg)
    for traj in trajs:
        if traj.rewards is None:
            raise ValueError("recover-rewards needs trajectories with ground-truth rewards")

    rng = np.random.default_rng(tcfg.seed)
    per_traj = []
    decoded_all, true_all = [], []
    for traj in trajs:
        decoded = _decode_trajectory(model, traj, rng)
        per_traj.append({"decoded": [float(v) for v in decoded], "true": [float(v) for v in traj.rewards]})
        decoded_all.append(decoded)
        true_all.append(traj.rewards)
    decoded_all = np.concatenate(decoded_all)
    true_all = np.concatenate(true_all)
    if not np.all(np.isfinite(decoded_all)):
        raise FloatingPointError("non-finite decoded reward")
    r = pearson(decoded_all, true_all)
    report = {"pearson_r": r, "n_steps": int(decoded_all.size), "trajectories": per_traj}
    print(f"pearson r = {r:.4f} over {decoded_all.size} steps, {len(trajs)} trajectories")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
    return 0


def _planner_rollouts(model, tcfg, pcfg, n_episodes=5):
    """Fresh deterministic planner rollouts carrying ground-truth rewards."""
    env = make_env(tcfg.env_id)
    rng = np.random.default_rng(tcfg.seed)
    out = []
    for _ in range(n_episodes):
        s = env.reset(rng)
        states, actions, rewards = [np.asarray(s)], [], []
        prev = None
        for t in range(env.spec.episode_len):
            a, prev = plan(s, model, pcfg, prev_plan=prev, rng=rng, deterministic=True)
            res = env.step(s, a, step_index=t)
            states.append(np.asarray(res.next_state))
            actions.append(np.asarray(a))
            rewards.append(res.ground_truth_reward)
            s = res.next_state
        out.append(
            Trajectory(
                states=np.stack(states),
                actions=np.stack(actions),
                rewards=np.asarray(rewards),
                source="behavioral",
            )
        )
    return out


def _cmd_export_plots(args):
    _echo("export-plots", {"metrics": args.metrics, "out": args.out})
    with open(args.metrics) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise ValueError("metrics file is empty")
    header = lines[0].split(",")
    if header[0] != "step" or len(header) < 2:
        raise ValueError("metrics header must start with 'step'")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(header):
            raise ValueError(f"malformed metrics row: {ln!r}")
        rows.append(cells)
    os.makedirs(args.out, exist_ok=True)
    for i, name in enumerate(header[1:], start=1):
        path = os.path.join(args.out, f"{name}.csv")
        with open(path, "w") as f:
            f.write("step,value\n")
            for cells in rows:
                f.write(f"{cells[0]},{cells[i]}\n")
    print(f"wrote {len(header) - 1} series ({len(rows)} rows each) to {args.out}")
    return 0


def _add_common(p, config=True, seed=True, env=True):
    if config:
        p.add_argument("--config", help="flat JSON config file")
    if seed:
        p.add_argument("--seed", type=int, help="override the config seed")
    if env:
        p.add_argument("--env", choices=["pointmass", "pendulum"], help="override the config env")


def _build_parser():
    parser = _Parser(prog="mimicplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-experts", help="write scripted-expert demonstrations")
    _add_common(p)
    p.add_argument("--out", required=True, help="demo file to write (JSON lines)")
    p.set_defaults(func=_cmd_gen_experts)

    p = sub.add_parser("train", help="run online imitation training")
    _add_common(p)
    p.add_argument("--demos", required=True, help="expert demo file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--p-tremble", type=float, dest="p_tremble", help="actuation noise probability")
    p.add_argument("--grad-penalty", choices=["on", "off"], dest="grad_penalty")
    p.add_argument(
        "--objective-form", choices=["initial-state", "td"], dest="objective_form"
    )
    p.add_argument("--alpha", type=float, help="concave regularizer strength")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a model snapshot")
    p.add_argument("snapshot", help="model snapshot file")
    _add_common(p)
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("recover-rewards", help="correlate decoded and true rewards")
    p.add_argument("snapshot", help="model snapshot file")
    _add_common(p)
    p.add_argument("--demos", help="trajectories with rewards; fresh rollouts if omitted")
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=_cmd_recover_rewards)

    p = sub.add_parser("export-plots", help="split metrics CSV into per-metric series")
    p.add_argument("metrics", help="metrics CSV from training")
    p.add_argument("--out", required=True, help="output directory for series files")
    p.set_defaults(func=_cmd_export_plots)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
