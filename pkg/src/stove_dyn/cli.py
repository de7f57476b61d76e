"""Command-line entry point: ``stove-dyn <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

SUBCOMMANDS = ("generate", "train", "eval", "plan", "report-energy", "selftest")
SECTIONS = ("env", "training", "planner", "eval")
EVAL_KEYS = {"noise", "n_given", "seed"}
SEED_ENV = "STOVE_DYN_SEED"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    config: dict = field(default_factory=dict)
    seed: int = 0
    output: str = ""

    def resolved(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed, "output": self.output,
                "config": self.config, "version": f"stove-dyn {__version__}"}

    def dump(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, indent=1) + "\n"


def load_config_file(path: str | None) -> dict:
    """Read a JSON run config; unknown sections or keys are rejected."""
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(data) - set(SECTIONS) - {"seed"}
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    from .envs import EnvConfig
    from .planner import PlannerConfig
    from .training import TrainConfig
    try:
        if "env" in data:
            EnvConfig.from_dict(data["env"])
        if "training" in data:
            TrainConfig.from_dict(data["training"])
        if "planner" in data:
            bad = set(data["planner"]) - set(PlannerConfig.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown planner config keys: {sorted(bad)}")
        if "eval" in data:
            bad = set(data["eval"]) - EVAL_KEYS
            if bad:
                raise ValueError(f"unknown eval config keys: {sorted(bad)}")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return data


def resolve_seed(flag: int | None, config: dict) -> int:
    """Command-line flag, then the environment variable, then the config file, then 0."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return int(config.get("seed", 0))


def write_record(run: RunConfig, path: Path) -> None:
    path.write_text(run.dump())


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args, cfg: dict) -> int:
    from .envs import default_config, generate_dataset, save_dataset

    env_section = dict(cfg.get("env", {}))
    kind = args.env or env_section.pop("kind", "billiards")
    env_section.pop("kind", None)
    if args.diverse_energy:
        env_section["diverse_energy"] = True
    if args.objects is not None:
        env_section["n_objects"] = args.objects
    env = default_config(kind, **env_section)
    seed = resolve_seed(args.seed, cfg)
    ds = generate_dataset(env, args.n, args.t, seed, frames=args.frames)
    save_dataset(ds, args.out)
    run = RunConfig("generate", {"env": json.loads(env.to_json()), "n": args.n, "t": args.t,
                                 "frames": args.frames}, seed, str(args.out))
    write_record(run, Path(str(args.out) + ".run.json"))
    print(f"wrote {args.out}: {args.n} sequences x {args.t} frames ({kind})")
    return 0


def cmd_train(args, cfg: dict) -> int:
    from .dynamics import save_model
    from .envs import load_dataset
    from .training import TrainConfig, config_dict, train_dynamics_supervised, train_reward_model, write_history

    section = dict(cfg.get("training", {}))
    for key in ("steps", "batch", "window"):
        if getattr(args, key) is not None:
            section[key] = getattr(args, key)
    if args.loss is not None:
        section["loss"] = args.loss
    section["seed"] = resolve_seed(args.seed, cfg)
    try:
        tcfg = TrainConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    ds = load_dataset(args.data)
    reward = ds.actions is not None
    log = (lambda row: print(f"step {row['step']:>6}  nll {row['train_nll']:.5f}  "
                             f"holdout err {row['holdout_pos_err']:.5f}", flush=True))
    trainer = train_reward_model if reward else train_dynamics_supervised
    result = trainer(ds, tcfg, progress=None if args.quiet else log)
    save_model(args.out, result.params, result.model)
    write_history(result.history, str(args.out) + ".history.csv")
    run = RunConfig("train", {"training": config_dict(tcfg), "data": str(args.data),
                              "reward_model": reward}, tcfg.seed, str(args.out))
    write_record(run, Path(str(args.out) + ".run.json"))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    import numpy as np

    from . import evalkit as ek
    from .dynamics import load_model
    from .envs import energy_series, load_dataset

    section = dict(cfg.get("eval", {}))
    noise = args.noise if args.noise is not None else section.get("noise", 0.005)
    n_given = section.get("n_given", ek.N_GIVEN)
    seed = resolve_seed(args.seed, section)
    ds = load_dataset(args.data)
    params, mcfg = load_model(args.ckpt)
    steps = ds.length - n_given
    if steps < ek.WINDOW[1] - n_given:
        raise ValueError(f"sequences of length {ds.length} do not cover the evaluation window")
    if args.mode == "supervised":
        pred = ek.model_rollout_from_truth(ds, params, mcfg, steps, n_given)
    else:
        _, pred = ek.model_rollout_filtered(ds, params, mcfg, steps, noise, seed, n_given)
    lin = ek.linear_predictions(ds, steps, n_given)
    model_curve = ek.evaluate_positions(ds, pred, n_given, label=f"model-{args.mode}")
    lin_curve = ek.evaluate_positions(ds, lin, n_given, label="linear")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ek.write_curves(out / "position_error.csv", [model_curve, lin_curve])
    ek.write_svg(out / "position_error.svg", [model_curve, lin_curve], "position error")

    n_pix = min(ds.n_sequences, args.pixel_sequences)
    res = ds.config.image_size
    colors = True if ds.config.color else None
    pix = []
    for label, p in ((model_curve.label, pred), ("linear", lin)):
        vals = [ek.pixel_mse_curve(p[n], ds.positions[n, n_given:n_given + steps], ds.radii[n], res, colors).values
                for n in range(n_pix)]
        pix.append(ek.ErrorCurve(np.mean(vals, axis=0), n_given + 1, label))
    ek.write_curves(out / "pixel_mse.csv", pix)

    given = ds.positions[:, n_given - 1:n_given]
    series = {
        "truth": energy_series(ds.positions[:, n_given - 1:]).mean(axis=0),
        model_curve.label: energy_series(np.concatenate([given, pred], axis=1)).mean(axis=0),
        "linear": energy_series(np.concatenate([given, lin], axis=1)).mean(axis=0),
    }
    ek.write_energy(out / "energy.csv", series, start=n_given + 1)

    lines = []
    for label, p in ((model_curve.label, pred), ("linear", lin)):
        sums = [ek.window_sum(ek.position_error_curve(p[n], ds.positions[n, n_given:n_given + steps],
                                                      n_given + 1)) for n in range(ds.n_sequences)]
        se = float(np.std(sums, ddof=1) / np.sqrt(len(sums))) if len(sums) > 1 else 0.0
        lines.append(f"{label}\t{np.mean(sums):.4f}\t+- {se:.4f}")
    header = f"# window sum of position error over frames {ek.WINDOW[0]}-{ek.WINDOW[1]}, {ds.n_sequences} sequences"
    (out / "table1_window.txt").write_text(header + "\n" + "\n".join(lines) + "\n")
    run = RunConfig("eval", {"data": str(args.data), "ckpt": str(args.ckpt), "mode": args.mode,
                             "eval": {"noise": noise, "n_given": n_given, "seed": seed}}, seed, str(out))
    write_record(run, out / "run_config.json")
    print("\n".join(lines))
    return 0


def cmd_plan(args, cfg: dict) -> int:
    from .dynamics import load_model
    from .envs import default_config
    from .planner import LearnedModel, PlannerConfig, run_episodes, summarize, write_trace

    policy = {"true": "mcts-true", "model": "mcts-model", "random": "random"}[args.mode]
    section = dict(cfg.get("planner", {}))
    for key in ("budget", "depth", "c", "discount"):
        if getattr(args, key) is not None:
            section[key] = getattr(args, key)
    section["seed"] = resolve_seed(args.seed, cfg)
    base = PlannerConfig.for_model() if policy == "mcts-model" else PlannerConfig()
    try:
        pcfg = PlannerConfig(**{**base.__dict__, **section})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    model = None
    if policy == "mcts-model":
        if args.model_ckpt is None:
            raise UsageError("--mode model needs --model-ckpt")
        params, mcfg = load_model(args.model_ckpt)
        if not mcfg.conditioned:
            raise ValueError(f"{args.model_ckpt}: not an action-conditioned model")
        model = LearnedModel(params, mcfg)
    env = default_config("billiards-control", **{k: v for k, v in cfg.get("env", {}).items() if k != "kind"})
    results = run_episodes(policy, env, args.episodes, args.steps, pcfg.seed, pcfg, model,
                           detector_noise=args.noise, keep_trace=args.trace_out is not None)
    mean, se = summarize(results)
    if args.trace_out is not None:
        write_trace(args.trace_out, results)
        run = RunConfig("plan", {"policy": policy, "planner": pcfg.__dict__, "episodes": args.episodes,
                                 "steps": args.steps, "model_ckpt": args.model_ckpt}, pcfg.seed, str(args.trace_out))
        write_record(run, Path(str(args.trace_out) + ".run.json"))
    print(f"{policy}\tmean reward {mean:.3f}\tse {se:.3f}\tepisodes {args.episodes}")
    return 0


def cmd_report_energy(args, cfg: dict) -> int:
    import numpy as np

    from .dynamics import load_model, rollout_mean, state_from_truth
    from .envs import default_config, energy_series, generate_dataset
    from .evalkit import energy_report, rolling_mean, write_energy

    params, mcfg = load_model(args.ckpt)
    seed = resolve_seed(args.seed, cfg)
    env = default_config(args.env)
    ref = generate_dataset(env, args.reference, 100, seed + 1)
    reference = float(energy_series(ref.positions).mean())
    start = generate_dataset(env, 1, 2, seed)
    z0 = state_from_truth(start.positions[:, -1], start.velocities[:, -1], mcfg.latent_dim)
    pred = rollout_mean(z0, args.steps, params, mcfg)[0, :, :, 0:2]
    traj = np.concatenate([start.positions[0, -1:], pred], axis=0)
    rep = energy_report(traj, reference)
    smooth = rolling_mean(rep["series"], min(args.window, len(rep["series"])))
    rel = np.abs(smooth - reference) / reference
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_energy(out / "energy.csv", {"rollout": rep["series"], "rolling": smooth})
    summary = (f"reference {reference:.6g}\nmean {rep['mean']:.6g}\nslope {rep['drift']:.3e}\n"
               f"max rolling deviation {rel.max():.4f}\n")
    (out / "energy_report.txt").write_text(summary)
    run = RunConfig("report-energy", {"ckpt": str(args.ckpt), "steps": args.steps, "env": args.env,
                                      "window": args.window, "reference": args.reference}, seed, str(out))
    write_record(run, out / "run_config.json")
    print(summary, end="")
    return 0


def cmd_selftest(args, cfg: dict) -> int:
    from .selftest import run_all

    results = run_all()
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stove-dyn", description="Object-based dynamics models, filtering and planning.")
    p.add_argument("--version", action="version", version=f"stove-dyn {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    p.add_argument("--config", default=None, help="JSON run config (env/training/planner/eval sections)")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("--env", choices=("billiards", "gravity", "billiards-control"), default=None)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--t", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", action="store_true", help="also store rendered frames")
    g.add_argument("--diverse-energy", action="store_true")
    g.add_argument("--objects", type=int, default=None)

    t = sub.add_parser("train", help="train a dynamics (or, on control data, reward) model")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--window", type=int, default=None)
    t.add_argument("--loss", choices=("learned", "fixed"), default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="position error, pixel error and energy reports")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--mode", choices=("supervised", "filtered"), default="supervised")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--noise", type=float, default=None, help="detector noise for --mode filtered")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--pixel-sequences", type=int, default=50)

    pl = sub.add_parser("plan", help="run MCTS episodes on the control environment")
    pl.add_argument("--mode", choices=("true", "model", "random"), required=True)
    pl.add_argument("--model-ckpt", default=None)
    pl.add_argument("--episodes", type=int, default=100)
    pl.add_argument("--steps", type=int, default=100)
    pl.add_argument("--budget", type=int, default=None)
    pl.add_argument("--depth", type=int, default=None)
    pl.add_argument("--c", type=float, default=None)
    pl.add_argument("--discount", type=float, default=None)
    pl.add_argument("--noise", type=float, default=0.005, help="synthetic detector noise (model mode)")
    pl.add_argument("--seed", type=int, default=None)
    pl.add_argument("--trace-out", default=None)

    r = sub.add_parser("report-energy", help="kinetic energy of one long model rollout")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--steps", type=int, default=1000)
    r.add_argument("--env", choices=("billiards", "gravity"), default="billiards")
    r.add_argument("--window", type=int, default=100, help="rolling-average width")
    r.add_argument("--reference", type=int, default=300, help="sequences used for the reference energy")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out-dir", default="energy_report")

    sub.add_parser("selftest", help="run the property suite")
    return p


HANDLERS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "plan": cmd_plan,
    "report-energy": cmd_report_energy, "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        _limit_threads(args.threads)
        cfg = load_config_file(args.config)
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"stove-dyn: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"stove-dyn: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
