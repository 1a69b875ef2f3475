"""Command-line entry point: ``clrlab {synth,train,eval,explain}``.

Every flag can also be set through an environment variable named
``CLRLAB_<FLAG>`` (upper case, dashes as underscores), e.g. ``CLRLAB_SEED=3``.
Explicit flags win over the environment.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 evaluation incomplete.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .archive import file_sha256
from .curriculum import EPS_GRID, CurriculumConfig, make_env, run_curriculum, run_direct, scenarios_for
from .es import EsConfig
from .evaluate import (explain, mpc_controller, rl_controller, run_controller, summarize, write_records,
                       write_summary, write_trajectories)
from .fixtures import build_fixture_13bus, build_fixture_123bus
from .forecast import HistoricalProfileStore, ScenarioSet, synthetic_history
from .network import load_network
from .nn import BcConfig, DivergenceError, load_params
from .ppo import PgConfig

log = logging.getLogger("clrlab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPLETE = 0, 2, 3, 4
ENV_PREFIX = "CLRLAB_"
FIXTURES = {"ieee13": build_fixture_13bus, "13bus": build_fixture_13bus,
            "ieee123": build_fixture_123bus, "123bus": build_fixture_123bus}


class ConfigError(Exception):
    pass


# -- argument plumbing ------------------------------------------------------------------

def _float_list(s: str) -> list[float]:
    if s in ("all", "grid"):
        return list(EPS_GRID)
    try:
        return [float(x) for x in str(s).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in str(s).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _add(p: argparse.ArgumentParser, flag: str, **kw) -> None:
    env = ENV_PREFIX + flag.lstrip("-").replace("-", "_").upper()
    if env in os.environ:
        kw["default"] = os.environ[env]
    p.add_argument(flag, **kw)


def _common(p: argparse.ArgumentParser) -> None:
    _add(p, "--net", default="ieee13", help="fixture name (ieee13, ieee123) or network JSON path")
    _add(p, "--profiles", default=None, help="directory of renewable history CSVs (synthesized if omitted)")
    _add(p, "--eps", type=_float_list, default="0.1", help="error levels, comma-separated, or 'all'")
    _add(p, "--k", type=_float_list, default="1", help="lookahead hours, comma-separated")
    _add(p, "--seed", type=int, default=0)
    _add(p, "--out", default="runs", help="output directory")
    _add(p, "--data-seed", type=int, default=0, help="seed of the scenario synthesis")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clrlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="synthesize scenario archives")
    _common(p)
    _add(p, "--n-train", type=int, default=256)
    _add(p, "--n-test", type=int, default=504)

    p = sub.add_parser("train", help="train controllers")
    _common(p)
    _add(p, "--mode", default="curriculum", choices=("curriculum", "direct-es", "direct-ppo"))
    _add(p, "--budget", type=int, default=None, help="env-step budget for direct modes (default: curriculum budget)")
    _add(p, "--stage1-generations", type=int, default=EsConfig().generations)
    _add(p, "--stage1-seeds", type=_int_list, default=None, help="Stage-I seeds (default: --seed)")
    _add(p, "--bc-epochs", type=int, default=100)
    _add(p, "--stage2-iterations", type=int, default=PgConfig().iterations)
    _add(p, "--n-train", type=int, default=256)

    p = sub.add_parser("eval", help="evaluate controllers on test scenarios")
    _common(p)
    _add(p, "--ckpt", default=None, help="training output directory (default: --out)")
    _add(p, "--controllers", default="RL,NR-MPC,RC-MPC")
    _add(p, "--n-test", type=int, default=504)
    _add(p, "--scenarios", default=None, help="directory of synthesized archives (built on the fly if omitted)")
    p.add_argument("--trajectories", action="store_true", help="also write one per-step CSV log per record")

    p = sub.add_parser("explain", help="critic reward-to-go vs realized return")
    _common(p)
    _add(p, "--ckpt", required=False, default=None, help="Stage-II policy file with critic")
    _add(p, "--scenario", type=_int_list, default="0", help="test scenario ids")
    _add(p, "--gamma", type=float, default=0.99)
    _add(p, "--n-test", type=int, default=504)
    return ap


# -- shared helpers ---------------------------------------------------------------------

def load_net(spec: str):
    if spec in FIXTURES:
        return FIXTURES[spec]()
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"network {spec!r} is neither a fixture name nor an existing file")
    try:
        return load_network(path)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"invalid network file {spec}: {e}") from e


def load_store(net, args) -> HistoricalProfileStore:
    if args.profiles is None:
        return synthetic_history(net, seed=args.data_seed)
    d = Path(args.profiles)
    if not d.is_dir():
        raise ConfigError(f"profile directory {d} does not exist")
    try:
        return HistoricalProfileStore.from_csv(d, [r.name for r in net.renewables])
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read profiles from {d}: {e}") from e


def _check_eps(eps_list) -> None:
    for e in eps_list:
        if not 0.0 <= e <= 0.5:
            raise ConfigError(f"error level {e} outside [0, 0.5]")


def _git_hash() -> str | None:
    try:
        r = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                           cwd=Path(__file__).resolve().parent)
        return r.stdout.strip() or None if r.returncode == 0 else None
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(out: Path, args, extra: dict | None = None) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and not p.name.startswith("manifest"))
    doc = {
        "command": args.cmd,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "git": _git_hash(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": {str(p.relative_to(out)): file_sha256(p) for p in files},
    }
    doc.update(extra or {})
    path = out / ("manifest.json" if args.cmd in ("synth", "train") else f"manifest_{args.cmd}.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def _kdir(out: Path, k: float) -> Path:
    return out / f"k{k:g}"


# -- commands -----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    net = load_net(args.net)
    _check_eps(args.eps)
    store = load_store(net, args)
    out = Path(args.out)
    sc_dir = out / "scenarios"
    sc_dir.mkdir(parents=True, exist_ok=True)
    if args.profiles is None:
        store.to_csv(out / "profiles")
    for k in args.k:
        for e in args.eps:
            for split, n in (("train", args.n_train), ("test", args.n_test)):
                sc = scenarios_for(net, store, e, k, n, split, args.data_seed)
                sc.save(sc_dir / f"{split}_eps{e:.2f}_k{k:g}.npz")
                log.info("wrote %d %s scenarios at eps=%.2f k=%g", n, split, e, k)
    write_manifest(out, args)
    return EXIT_OK


def cmd_train(args) -> int:
    net = load_net(args.net)
    _check_eps(args.eps)
    store = load_store(net, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in args.k:
        cfg = CurriculumConfig(
            eps_grid=tuple(args.eps), k=k, seed=args.seed, data_seed=args.data_seed, n_train=args.n_train,
            stage1=EsConfig(generations=args.stage1_generations),
            stage1_seeds=tuple(args.stage1_seeds or (args.seed,)),
            bc=BcConfig(epochs=args.bc_epochs, batch=256, lr=1e-3),
            stage2=PgConfig(iterations=args.stage2_iterations),
        )
        kdir = _kdir(out, k)
        if args.mode == "curriculum":
            rep, _ = run_curriculum(net, store, cfg, out=kdir)
            for e in args.eps:
                rows.append(["curriculum", e, k, args.seed, rep.budget(e), rep.final_eval[e]])
        else:
            T = net.system.T
            default = (cfg.stage1.generations * cfg.stage1.population * cfg.stage1.episodes_per_member * T
                       + cfg.teacher_episodes * T + cfg.stage2.iterations * (cfg.stage2.steps_per_batch // T) * T)
            budget = args.budget or default
            for e in args.eps:
                dr = run_direct(net, store, args.mode, e, budget, cfg, out=kdir)
                rows.append([args.mode, e, k, args.seed, dr.steps, dr.final_eval])
    path = out / "comparison.csv"
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["mode", "epsilon_T", "k", "seed", "env_steps", "final_reward"])
        w.writerows(rows)
    write_manifest(out, args, {"config": asdict(cfg)})
    return EXIT_OK


def _test_scenarios(net, store, args, e: float, k: float) -> ScenarioSet:
    if args.scenarios is not None:
        path = Path(args.scenarios) / f"test_eps{e:.2f}_k{k:g}.npz"
        if not path.exists():
            raise ConfigError(f"missing scenario archive {path}")
        return ScenarioSet.load(path).subset(np.arange(min(args.n_test, len(ScenarioSet.load(path)))))
    return scenarios_for(net, store, e, k, args.n_test, "test", args.data_seed)


def cmd_eval(args) -> int:
    net = load_net(args.net)
    _check_eps(args.eps)
    store = load_store(net, args)
    ckpt = Path(args.ckpt or args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roster = [c.strip() for c in args.controllers.split(",") if c.strip()]
    unknown = set(roster) - {"RL", "NR-MPC", "RC-MPC"}
    if unknown:
        raise ConfigError(f"unknown controllers {sorted(unknown)}")
    records, incomplete = [], False
    for e in args.eps:
        base = None
        for k in args.k:
            sc = _test_scenarios(net, store, args, e, k)
            base = base or sc
            if "RL" in roster:
                pf = _kdir(ckpt, k) / f"policy_eps{e:.2f}.npz"
                if not pf.exists():
                    warnings.warn(f"missing checkpoint {pf}; skipping RL-{k:g} at eps={e:.2f}", stacklevel=1)
                    incomplete = True
                else:
                    params, _ = load_params(pf)
                    recs, trajs = run_controller(net, sc, f"RL-{k:g}", rl_controller(params), k=k, eps=e)
                    records += recs
                    if args.trajectories:
                        write_trajectories(out / "trajectories", recs, trajs)
        # the optimization baselines see the full horizon forecast, independent of k
        for kind in ("NR-MPC", "RC-MPC"):
            if kind in roster:
                name, pol = mpc_controller(net, kind, e)
                recs, trajs = run_controller(net, base, name, pol, eps=e)
                records += recs
                if args.trajectories:
                    write_trajectories(out / "trajectories", recs, trajs)
                if pol.fallbacks:
                    log.warning("%s used the safe fallback %d times at eps=%.2f", name, pol.fallbacks, e)
    write_records(out / "records.csv", records)
    text = write_summary(out / "summary", summarize(records))
    print(text, end="")
    write_manifest(out, args)
    return EXIT_INCOMPLETE if incomplete else EXIT_OK


def cmd_explain(args) -> int:
    net = load_net(args.net)
    _check_eps(args.eps)
    if args.ckpt is None or not Path(args.ckpt).exists():
        raise ConfigError("--ckpt must point to an existing Stage-II policy file")
    params, _ = load_params(args.ckpt)
    if params.spec.critic_hidden is None:
        raise ConfigError(f"{args.ckpt} has no critic head")
    store = load_store(net, args)
    e, k = args.eps[0], args.k[0]
    sc = scenarios_for(net, store, e, k, args.n_test, "test", args.data_seed)
    ids = np.asarray(args.scenario)
    if ids.min() < 0 or ids.max() >= len(sc):
        raise ConfigError(f"scenario ids must lie in [0, {len(sc)})")
    rows = explain(make_env(net, sc, "stage2", k), params, ids, gamma=args.gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "explain.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "t", "value", "reward_to_go"])
        for r in rows:
            w.writerow([int(r[0]), int(r[1]), repr(float(r[2])), repr(float(r[3]))])
    if rows.shape[0] > 1:
        print(f"correlation(v, G) = {np.corrcoef(rows[:, 2], rows[:, 3])[0, 1]:.4f} over {rows.shape[0]} steps")
    write_manifest(out, args)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except ConfigError as e:
        print(f"clrlab: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"clrlab: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
