"""Experiment harness: configuration, scenario runs, training, CSV emission.

Commands: ``rates``, ``simulate``, ``train``, ``eval``, ``show-config``.
Exit codes: 0 success, 1 usage error, 2 runtime or divergence error.
``OPTIQKD_THREADS`` caps worker parallelism for scenario fan-out.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as cfgmod
from . import loop as loopmod
from . import rates as ratesmod
from . import tcn as tcnmod
from .channel import Simulator, UnknownScenarioError, make_scenario
from .controller import load_policy, save_policy
from .loop import EpisodeLog, run_episode, train_policy
from .nn import NonFiniteGradientError
from .tcn import (load_tcn, make_dataset, save_tcn, telemetry_features,
                  train_forecaster)

RATES_CSV_HEADER = "distance_km,q_mu,e_mu,r_pp,r_finite,r_bps"
TRAIN_PROGRESS_HEADER = "update,mean_reward,policy_loss,value_loss,entropy"
PROTOCOLS = ("bb84", "e91", "cow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config overlay")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="optiqkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rates", parents=[], help="analytic rate curves over distance")
    _add_common(p)
    p.add_argument("--protocol", choices=PROTOCOLS, default="bb84")
    p.add_argument("--dmin", type=float, default=0.0)
    p.add_argument("--dmax", type=float, default=200.0)
    p.add_argument("--dstep", type=float, default=5.0)

    p = sub.add_parser("simulate", help="run one scenario and dump the episode CSV")
    _add_common(p)
    p.add_argument("--protocol", choices=PROTOCOLS, default="bb84")
    p.add_argument("--scenario", default="nominal")
    p.add_argument("--controller", choices=loopmod.CONTROLLER_KINDS, default="static")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--blocks", type=int, default=200)
    p.add_argument("--tcn", default=None, help="forecaster checkpoint (ml only)")
    p.add_argument("--policy", default=None, help="policy checkpoint (ml only)")

    p = sub.add_parser("train", help="train the forecaster or the controller")
    _add_common(p)
    p.add_argument("model", choices=("tcn", "ppo"))
    p.add_argument("--protocol", choices=PROTOCOLS, default="bb84")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tcn", default=None,
                   help="existing forecaster checkpoint to drive ppo training")

    p = sub.add_parser("eval", help="closed-loop comparison across controllers/seeds")
    _add_common(p)
    p.add_argument("--protocol", choices=PROTOCOLS, default="bb84")
    p.add_argument("--scenario", default="noise-sweep")
    p.add_argument("--controllers", default="ml,static",
                   help="comma list from {ml,static,recalib}")
    p.add_argument("--seeds", default="1..5", help="N..M range or comma list")
    p.add_argument("--blocks", type=int, default=600)
    p.add_argument("--tcn", default=None)
    p.add_argument("--policy", default=None)

    p = sub.add_parser("show-config", help="print the full effective configuration")
    _add_common(p)
    return parser


def parse_seeds(text: str) -> List[int]:
    text = text.strip()
    if not text:
        raise UsageError("empty seeds list")
    if ".." in text:
        lo, _, hi = text.partition("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    cfgmod.apply_overrides(cfg, args.overrides)
    return cfg


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("OPTIQKD_THREADS", "1")))
    except ValueError:
        return 1


def cmd_rates(args) -> int:
    cfg = _load_cfg(args)
    link0 = cfgmod.make_link(cfg)
    proto = cfgmod.make_protocol(cfg, args.protocol)
    out = _outdir(args)
    lines = [RATES_CSV_HEADER]
    n_steps = int(round((args.dmax - args.dmin) / args.dstep)) if args.dstep > 0 else 0
    grid = [args.dmin + i * args.dstep for i in range(n_steps + 1)]
    for d in grid:
        link = ratesmod.LinkParams(
            alpha_db_per_km=link0.alpha_db_per_km, distance_km=d,
            eta_det=link0.eta_det, y0=link0.y0, e_d=link0.e_d, e0=link0.e0,
            f_rep=link0.f_rep, theta=link0.theta)
        q_mu, e_mu, rep = rate_point(link, proto)
        lines.append(f"{d:.10g},{q_mu:.10g},{e_mu:.10g},{rep.r_per_pulse:.10g},"
                     f"{rep.r_finite:.10g},{rep.r_bps:.10g}")
    path = out / f"rates_{args.protocol}.csv"
    path.write_text("\n".join(lines) + "\n")
    print(path)
    return 0


def rate_point(link: ratesmod.LinkParams, proto: ratesmod.ProtocolConfig):
    """Model-predicted operating point (gain, QBER, rate report) at one distance."""
    if proto.kind == "bb84":
        gs = ratesmod.bb84_model_gains(link, proto.bb84.mu_s)
        gw = ratesmod.bb84_model_gains(link, proto.bb84.mu_w)
        try:
            bounds = ratesmod.decoy_bounds((gs.q_mu, gs.e_mu), (gw.q_mu, gw.e_mu),
                                           proto, link.y0, link.e0)
            rep = ratesmod.bb84_key_rate(bounds, gs.q_mu, gs.e_mu, proto,
                                         f_rep=link.f_rep)
        except ratesmod.BoundInfeasibleError:
            rep = ratesmod.bb84_key_rate(
                ratesmod.DecoyBounds(0.0, 0.0, 0.5), gs.q_mu, gs.e_mu, proto,
                f_rep=link.f_rep)
        return gs.q_mu, gs.e_mu, rep
    if proto.kind == "e91":
        s, q_err = ratesmod.e91_quantities(proto.e91.v_source)
        rep = ratesmod.e91_key_rate(s, q_err, proto, f_rep=link.f_rep)
        eta_pair = ratesmod.transmittance(link) * link.eta_det
        return min(link.y0 + eta_pair, 1.0), q_err, rep
    eta = ratesmod.transmittance(link)
    gs = ratesmod.bb84_gains(proto.cow.alpha_sq, eta, link.y0, link.e_d, link.e0)
    rep = ratesmod.cow_key_rate(gs.q_mu, gs.e_mu, 0.0, proto, f_rep=link.f_rep)
    return gs.q_mu, gs.e_mu, rep


def _load_models(args, cfg) -> tuple:
    tcn_model = None
    nets = None
    if args.tcn is not None:
        if not Path(args.tcn).exists():
            raise FileNotFoundError(f"missing forecaster checkpoint {args.tcn}")
        tcn_model = load_tcn(args.tcn)
    if getattr(args, "policy", None) is not None:
        if not Path(args.policy).exists():
            raise FileNotFoundError(f"missing policy checkpoint {args.policy}")
        nets = load_policy(args.policy, cfgmod.make_ppo_config(cfg))
    return tcn_model, nets


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    link = cfgmod.make_link(cfg)
    proto = cfgmod.make_protocol(cfg, args.protocol)
    tcn_model, nets = _load_models(args, cfg)
    if args.controller == "ml" and nets is None:
        raise FileNotFoundError("ml controller requires --policy checkpoint")
    log = run_episode(
        link, proto, args.scenario, args.controller, seed=args.seed,
        blocks=args.blocks, n_pulses=int(cfg["channel"]["n_pulses"]),
        abort_threshold=float(cfg["channel"]["abort_qber"]),
        tcn_model=tcn_model, nets=nets,
        reward_cfg=cfgmod.make_reward_config(cfg, loopmod.nominal_skr_ref(link, proto)),
    )
    out = _outdir(args)
    path = out / f"episode_{args.scenario}_{args.controller}_seed{args.seed}.csv"
    path.write_text(log.csv())
    print(path)
    return 0


def _tcn_training_features(cfg, link, proto, seed: int) -> np.ndarray:
    """Static-control telemetry across the configured scenario suite."""
    rows = []
    blocks = int(cfg["train"]["tcn_blocks"])
    ctrl = loopmod.nominal_control(proto)
    for i, scen in enumerate(cfg["train"]["tcn_scenarios"]):
        sim = Simulator(link, proto, make_scenario(scen, blocks),
                        seed=(seed * 977 + i) * 4 + 1,
                        n_pulses=int(cfg["channel"]["n_pulses"]),
                        abort_threshold=float(cfg["channel"]["abort_qber"]))
        for _ in range(blocks):
            rows.append(telemetry_features(sim.step(ctrl)))
    return np.asarray(rows)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    link = cfgmod.make_link(cfg)
    proto = cfgmod.make_protocol(cfg, args.protocol)
    out = _outdir(args)
    if args.model == "tcn":
        tcn_cfg = cfgmod.make_tcn_config(cfg)
        feats = _tcn_training_features(cfg, link, proto, args.seed)
        dataset = make_dataset(feats, tcn_cfg.window)
        rng = np.random.Generator(np.random.Philox(key=args.seed * 4 + 3))
        model, curve = train_forecaster(dataset, tcn_cfg, rng)
        ckpt = out / f"tcn_seed{args.seed}.ckpt"
        save_tcn(str(ckpt), model)
        loss_csv = out / f"tcn_loss_seed{args.seed}.csv"
        final_mse = tcnmod.dataset_mse(dataset, model)
        loss_csv.write_text("epoch,train_mse\n" + "\n".join(
            f"{i},{mse:.10g}" for i, mse in enumerate(curve))
            + f"\nfinal,{final_mse:.10g}\n")
        print(ckpt)
        print(loss_csv)
        return 0
    # ppo
    if args.tcn is not None:
        if not Path(args.tcn).exists():
            raise FileNotFoundError(f"missing forecaster checkpoint {args.tcn}")
        tcn_model = load_tcn(args.tcn)
    else:
        tcn_cfg = cfgmod.make_tcn_config(cfg)
        feats = _tcn_training_features(cfg, link, proto, args.seed)
        rng = np.random.Generator(np.random.Philox(key=args.seed * 4 + 3))
        tcn_model, _ = train_forecaster(make_dataset(feats, tcn_cfg.window), tcn_cfg, rng)
    nets, progress = train_policy(
        link, proto, tcn_model, seed=args.seed,
        updates=int(cfg["train"]["ppo_updates"]),
        scenarios=tuple(cfg["train"]["ppo_scenarios"]),
        blocks_per_episode=int(cfg["train"]["ppo_blocks"]),
        ppo_cfg=cfgmod.make_ppo_config(cfg),
        reward_cfg=cfgmod.make_reward_config(cfg, loopmod.nominal_skr_ref(link, proto)),
        n_pulses=int(cfg["channel"]["n_pulses"]),
    )
    ckpt = out / f"policy_seed{args.seed}.ckpt"
    save_policy(str(ckpt), nets)
    prog_csv = out / f"ppo_progress_seed{args.seed}.csv"
    prog_csv.write_text(TRAIN_PROGRESS_HEADER + "\n" + "\n".join(
        f"{i},{p['mean_reward']:.10g},{p['policy_loss']:.10g},"
        f"{p['value_loss']:.10g},{p['entropy']:.10g}"
        for i, p in enumerate(progress)) + "\n")
    print(ckpt)
    print(prog_csv)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    link = cfgmod.make_link(cfg)
    proto = cfgmod.make_protocol(cfg, args.protocol)
    controllers = [c.strip() for c in args.controllers.split(",") if c.strip()]
    if not controllers:
        raise UsageError("no controllers given")
    for c in controllers:
        if c not in loopmod.CONTROLLER_KINDS:
            raise UsageError(f"unknown controller {c!r}")
    seeds = parse_seeds(args.seeds)
    if not seeds:
        raise UsageError("empty seeds list")
    tcn_model, nets = _load_models(args, cfg)
    if "ml" in controllers and nets is None:
        raise FileNotFoundError("eval with the ml controller requires --policy")
    reward_cfg = cfgmod.make_reward_config(cfg, loopmod.nominal_skr_ref(link, proto))
    sched_probe = make_scenario(args.scenario, args.blocks)
    event_block = sched_probe.events[0].block_index if sched_probe.events else None

    def job(ctrl_kind: str, seed: int) -> EpisodeLog:
        # ml runs share one policy object; clone per job for isolation
        job_nets = None
        if ctrl_kind == "ml":
            job_nets = load_policy(args.policy, cfgmod.make_ppo_config(cfg))
        return run_episode(
            link, proto, args.scenario, ctrl_kind, seed=seed, blocks=args.blocks,
            n_pulses=int(cfg["channel"]["n_pulses"]),
            abort_threshold=float(cfg["channel"]["abort_qber"]),
            tcn_model=tcn_model, nets=job_nets, reward_cfg=reward_cfg,
            ppo_cfg=cfgmod.make_ppo_config(cfg),
        )

    jobs = [(c, s) for c in controllers for s in seeds]
    n_threads = _thread_count()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(lambda cs: job(*cs), jobs))
    else:
        results = [job(*cs) for cs in jobs]
    runs: Dict[str, List[EpisodeLog]] = {c: [] for c in controllers}
    for (c, _), log in zip(jobs, results):
        runs[c].append(log)

    out = _outdir(args)
    for c, logs in runs.items():
        for log in logs:
            path = out / f"episode_{args.scenario}_{c}_seed{log.seed}.csv"
            path.write_text(log.csv())
    if len(controllers) >= 2:
        result = loopmod.compare(runs, warmup=int(cfg["loop"]["warmup"]),
                                 event_block=event_block,
                                 block_seconds=float(cfg["channel"]["block_seconds"]))
        metrics_path = out / f"metrics_{args.scenario}.csv"
        metrics_path.write_text(result.csv())
        print(metrics_path)
    return 0


def cmd_show_config(args) -> int:
    cfg = _load_cfg(args)
    sys.stdout.write(cfgmod.config_json(cfg))
    return 0


_COMMANDS = {
    "rates": cmd_rates,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "show-config": cmd_show_config,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (UnknownScenarioError, cfgmod.OverrideError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (tcnmod.DivergenceError, NonFiniteGradientError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
