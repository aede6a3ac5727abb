"""Command-line front end.

Every command writes its artifacts into an output directory together with
``resolved_config.json`` and ``manifest.json`` (input and artifact hashes).

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O or file
format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as dsmod
from . import envs, evaluate, iql, nn, ntk, plotting, policy
from .config import RunConfig, load_config, preset
from .errors import ConfigError, DivergenceError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

CRITIC_FILES = ("q1", "q2", "q1_target", "q2_target", "v")


# -- provenance helpers ------------------------------------------------------------


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, kind: str, config: RunConfig | None, inputs: dict, extra: dict | None = None) -> dict:
    """Hash every file already in ``out`` and record the inputs they came from."""
    if config is not None:
        _write_json(out / "resolved_config.json", config.to_dict())
    artifacts = {
        str(p.relative_to(out)): file_hash(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    doc = {"kind": kind, "inputs": inputs, "artifacts": artifacts, **(extra or {})}
    _write_json(out / "manifest.json", doc)
    return doc


class _Manifest(dict):
    """A manifest whose missing keys surface as file-format errors."""

    def __missing__(self, key):
        raise FormatError(f"manifest has no {key!r} entry")


def _read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return _Manifest(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON") from exc


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise ConfigError("give either --config or --preset, not both")
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- artifact loading -------------------------------------------------------------------


def save_critic(out: Path, result: iql.IqlResult) -> None:
    e = result.ensemble
    for name, params in zip(CRITIC_FILES, (e.q1, e.q2, e.q1_target, e.q2_target)):
        nn.save_params(out / f"{name}.vcsp", params, e.spec)
    nn.save_params(out / "v.vcsp", result.v_params, result.v_spec)


def load_critic(directory) -> iql.QEnsemble:
    d = Path(directory)
    man = _read_manifest(d)
    nets = {name: nn.load_params(d / f"{name}.vcsp") for name in CRITIC_FILES[:4]}
    spec = nets["q1"][1]
    if any(s != spec for _, s in nets.values()):
        raise FormatError("critic networks have mismatched shapes")
    return iql.QEnsemble(
        spec, nets["q1"][0], nets["q2"][0], nets["q1_target"][0], nets["q2_target"][0],
        man["state_dim"], man["action_dim"],
    )


def load_policy(directory) -> tuple[policy.PolicySpec, dict, np.ndarray, list]:
    d = Path(directory)
    man = _read_manifest(d)
    ps = _Manifest(man["policy"])
    spec = policy.PolicySpec(ps["state_dim"], ps["action_dim"], ps["K"], ps["mode"],
                             tuple(ps["hidden"]), ps["rtg_scale"], ps["head"])
    params, net = nn.load_params(d / "policy.vcsp")
    if net != spec.net:
        raise FormatError("policy file does not match its manifest")
    ckpts = [(step, nn.load_params(d / "checkpoints" / f"step_{step:07d}.vcsp")[0]) for step in man["checkpoints"]]
    return spec, man, params, ckpts


# -- commands ------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.env == envs.StitchGrid.env_id:
        data = envs.grid_dataset()
    elif args.env == envs.Reach2D.env_id:
        data = envs.reach_rollout(envs.BehaviorPolicy(args.quality), args.n_traj, args.seed)
    else:
        raise ConfigError(f"unknown environment {args.env!r}; known: {sorted(envs.ENV_REGISTRY)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsmod.save(data, out)
    man = {
        "kind": "dataset",
        "env": args.env,
        "quality": data.meta.get("quality"),
        "n_traj": len(data.trajectories),
        "n_transitions": data.n_transitions,
        "seed": args.seed,
        "r_star": data.r_star,
        "sha256": file_hash(out),
    }
    _write_json(out.with_suffix(out.suffix + ".json"), man)
    print(f"wrote {out} ({man['n_traj']} trajectories, sha256 {man['sha256'][:12]})")
    return EXIT_OK


def cmd_train_value(args) -> int:
    cfg = _resolve_config(args)
    data = dsmod.load(args.dataset)
    out = _out_dir(args.out)
    result = iql.train_iql(data, cfg.iql)
    save_critic(out, result)
    _write_rows(out / "loss.csv", ["step", "v_loss", "q_loss"], result.history)
    plotting.plot_losses(out / "loss.svg", result.history, ("v_loss", "q_loss"), "value pretraining loss")
    write_manifest(out, "critic", cfg, {"dataset": file_hash(args.dataset)},
                   {"state_dim": data.state_dim, "action_dim": data.action_dim, "expectile": cfg.iql.expectile})
    print(f"critic written to {out}")
    return EXIT_OK


def cmd_train_policy(args) -> int:
    cfg = _resolve_config(args)
    data = dsmod.load(args.dataset)
    critic = load_critic(args.critic) if args.critic else None
    res = policy.train_policy(data, critic, cfg.vcs, args.baseline, args.constant)
    out = _out_dir(args.out)
    nn.save_params(out / "policy.vcsp", res.params, res.spec.net)
    (out / "checkpoints").mkdir(exist_ok=True)
    for step, params in res.checkpoints:
        nn.save_params(out / "checkpoints" / f"step_{step:07d}.vcsp", params, res.spec.net)
    _write_rows(out / "loss.csv", ["step", "loss"], res.history)
    plotting.plot_losses(out / "loss.svg", res.history, ("loss",), f"{args.baseline} policy loss")
    r_star = data.r_star if cfg.vcs.r_star is None else cfg.vcs.r_star
    inputs = {"dataset": file_hash(args.dataset)}
    if args.critic:
        inputs["critic"] = file_hash(Path(args.critic) / "q1.vcsp")
    s = res.spec
    write_manifest(out, "policy", cfg, inputs, {
        "baseline": args.baseline,
        "constant": args.constant,
        "policy": {"state_dim": s.state_dim, "action_dim": s.action_dim, "K": s.K, "mode": s.mode,
                   "hidden": list(s.hidden), "rtg_scale": s.rtg_scale, "head": s.head},
        "lam": cfg.vcs.lam,
        "floor": cfg.vcs.floor,
        "r_star": r_star,
        "multipliers": list(cfg.vcs.multipliers),
        "q_norm": res.q_norm,
        "checkpoints": [step for step, _ in res.checkpoints],
        "env": data.meta.get("env"),
    })
    print(f"policy written to {out} ({len(res.checkpoints)} checkpoints)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    spec, man, _, ckpts = load_policy(args.policy)
    env = envs.make_env(man.get("env") or cfg.env)
    ecfg = dataclasses.replace(cfg.eval, multipliers=tuple(man["multipliers"]))
    report = evaluate.evaluate_run(ckpts, spec, env, ecfg, target_base=man["r_star"])
    out = _out_dir(args.out)
    _write_json(out / "report.json", report.to_json())
    rows = []
    for m in report.raw:
        for i, step in enumerate(report.steps):
            rows.append([m, step, report.raw[m][i], report.scores[m][i], report.running[m][i]])
    _write_rows(out / "curves.csv", ["multiplier", "step", "raw_return", "score", "running_score"], rows)
    for m, episodes in report.visited.items():
        evaluate.write_visited_csv(out / f"visited_x{m:g}.csv", episodes)
    plotting.plot_eval(out / "eval.svg", report)
    write_manifest(out, "eval", cfg, {"policy": file_hash(Path(args.policy) / "policy.vcsp")})
    print(f"final score {report.best:.2f} (multiplier {report.best_multiplier:g})")
    return EXIT_OK


def _probe_inputs(args):
    cfg = _resolve_config(args)
    data = dsmod.load(args.dataset)
    critic = load_critic(args.critic)
    env = envs.make_env(data.meta.get("env") or cfg.env)
    return cfg, data, critic, env


def cmd_omrr(args) -> int:
    cfg, data, critic, env = _probe_inputs(args)
    quant = ntk.quantizer_for(env, cfg.probe.bins)
    rep = ntk.omrr(critic.q1, critic.spec, data, quant, cfg.probe.n_pairs, cfg.probe.seed)
    out = _out_dir(args.out)
    _write_json(out / "omrr.json", rep.to_json())
    _write_rows(out / "omrr_rows.csv", ["row", "ratio"], zip(rep.sample_rows.tolist(), rep.per_pair_ratios.tolist()))
    write_manifest(out, "omrr", cfg, {"dataset": file_hash(args.dataset), "critic": file_hash(Path(args.critic) / "q1.vcsp")})
    print(f"OMRR {rep.estimate:.4f} over {rep.n_pairs} pairs")
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg, data, critic, env = _probe_inputs(args)
    quant = ntk.quantizer_for(env, cfg.probe.bins)
    lo, hi = env.state_range
    s, a_ref, count = ntk.densest_state(data, dsmod.StateQuantizer(cfg.probe.state_bins, lo, hi))
    prof = ntk.ntk_profile(critic.q1, critic.spec, s, a_ref, quant)
    out = _out_dir(args.out)
    prof.write_csv(out / "profile.csv")
    plotting.plot_profile(out / "profile.svg", prof)
    _write_json(out / "profile.json", {"state": s.tolist(), "a_ref": a_ref.tolist(), "cell_count": count,
                                       "flatness": prof.flatness, "q_range": prof.q_range})
    write_manifest(out, "profile", cfg, {"dataset": file_hash(args.dataset), "critic": file_hash(Path(args.critic) / "q1.vcsp")})
    print(f"profile flatness {prof.flatness:.4f} at state {np.round(s, 3).tolist()}")
    return EXIT_OK


def cmd_spread(args) -> int:
    cfg = _resolve_config(args)
    data = dsmod.load(args.dataset)
    env = envs.make_env(data.meta.get("env") or cfg.env)
    lo, hi = env.state_range
    value = dsmod.action_spread(data, dsmod.StateQuantizer(cfg.probe.state_bins, lo, hi))
    out = _out_dir(args.out)
    _write_json(out / "spread.json", {"spread": value, "state_bins": cfg.probe.state_bins})
    write_manifest(out, "spread", cfg, {"dataset": file_hash(args.dataset)})
    print(f"action spread {value:.4f}")
    return EXIT_OK


def stitch_demo(cfg: RunConfig, seed: int) -> dict:
    """IQL then rcsl_only / vcs / q_greedy on the two-trajectory grid, one seed."""
    cfg = cfg.with_seed(seed)
    data = envs.grid_dataset()
    env = envs.StitchGrid()
    res = iql.train_iql(data, cfg.iql)
    e = res.ensemble
    s1 = env.encode_state("s1")
    q = {a: float(e.min_q(s1, env.encode_action(a))[0]) for a in env.available("s1")}
    returns = {}
    for baseline, target in (("rcsl_only", 6.0), ("vcs", 7.0), ("q_greedy", 7.0)):
        pr = policy.train_policy(data, e, cfg.vcs, baseline)
        ret, visited, _ = evaluate.rollout_policy(policy.Policy(pr.params, pr.spec), env, "rtg", target, seed)
        returns[baseline] = {"target": target, "return": ret, "path": [env.decode_state(v) for v in visited]}
    ok = (abs(q["UP"] - 7.0) <= 0.15 and abs(q["RIGHT"] - 6.0) <= 0.15 and returns["rcsl_only"]["return"] == 6.0
          and returns["vcs"]["return"] == 7.0 and returns["q_greedy"]["return"] == 7.0)
    return {"seed": seed, "q_s1": q, "returns": returns, "ok": ok, "history": res.history}


def cmd_stitch_demo(args) -> int:
    cfg = load_config(args.config) if args.config else preset("stitch-grid")
    if cfg.env != envs.StitchGrid.env_id:
        raise ConfigError("stitch-demo runs on the stitch-grid environment only")
    if args.seeds is not None:
        seeds = tuple(range(args.seeds))
    elif args.seed is not None:
        seeds = (args.seed,)
    else:
        seeds = cfg.seeds
    out = _out_dir(args.out)
    runs = [stitch_demo(cfg, s) for s in seeds]
    for r in runs:
        path = " -> ".join(r["returns"]["vcs"]["path"])
        print(f"seed {r['seed']}: Q(s1,UP)={r['q_s1']['UP']:.3f} Q(s1,RIGHT)={r['q_s1']['RIGHT']:.3f} "
              + " ".join(f"{b}={v['return']:g}" for b, v in r["returns"].items()) + f"  vcs path {path}")
    _write_json(out / "demo.json", [{k: v for k, v in r.items() if k != "history"} for r in runs])
    _write_rows(out / "q_values.csv", ["seed", "state", "action", "q_value"],
                [[r["seed"], "s1", a, v] for r in runs for a, v in r["q_s1"].items()])
    plotting.plot_losses(out / "value_loss.svg", runs[0]["history"], ("v_loss", "q_loss"), "value pretraining loss")
    write_manifest(out, "stitch-demo", cfg, {}, {"failures": sum(not r["ok"] for r in runs)})
    failures = sum(not r["ok"] for r in runs)
    print(f"{len(runs) - failures}/{len(runs)} seeds reproduce the stitching result")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcslab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--preset", help="named preset (stitch-grid, reach2d)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        return sp

    g = sub.add_parser("gen-data", help="generate an offline dataset file")
    g.add_argument("--env", required=True)
    g.add_argument("--quality", default="expert", choices=["expert", "medium", "mixture"])
    g.add_argument("--n-traj", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = with_config(sub.add_parser("train-value", help="pretrain the critics"))
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_value)

    t = with_config(sub.add_parser("train-policy", help="train a conditioned policy"))
    t.add_argument("--dataset", required=True)
    t.add_argument("--critic", help="critic directory from train-value")
    t.add_argument("--baseline", default="vcs", choices=policy.BASELINES)
    t.add_argument("--constant", type=float, help="weight for constant_w")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_policy)

    e = with_config(sub.add_parser("eval", help="evaluate policy checkpoints"))
    e.add_argument("--policy", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("omrr", cmd_omrr, "offline mean row ratio of a critic"),
                                 ("profile", cmd_profile, "Q and NTK profile at the densest state")):
        sp = with_config(sub.add_parser(name, help=helptext))
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--critic", required=True)
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)

    s = with_config(sub.add_parser("spread", help="average in-cell action spread of a dataset"))
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spread)

    d = sub.add_parser("stitch-demo", help="end-to-end stitching demo on the tabular grid")
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_stitch_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
