"""Closed-loop integration: telemetry -> forecast -> action -> measurement.

Couples the channel simulator, the rate engine, the forecaster, and the
PPO controller into per-block episodes; also provides the static and
periodic-recalibration baselines, the QBER abort rule, adaptation-time
extraction, and bootstrap comparison tables. Each (scenario, seed,
controller) run is an independent single-threaded job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import rates
from .channel import (ControlState, DEFAULT_ABORT_QBER, DEFAULT_N_PULSES,
                      NoiseSchedule, Simulator, Telemetry, make_scenario,
                      sifting_factor)
from .controller import (ActorCritic, PpoConfig, RewardConfig, RolloutBuffer,
                         act, apply_action, observe, ppo_update,
                         reward as reward_fn)
from .rates import LinkParams, ProtocolConfig
from .tcn import Forecaster, Normalizer, TcnModel, telemetry_features
from . import nn

BLOCK_SECONDS = 1.0
WARMUP_BLOCKS = 100
PRE_EVENT_WINDOW = 50
RECALIB_PERIOD = 15
RECALIB_GRID = (0.3, 0.4, 0.5, 0.6, 0.7)
CONTROLLER_KINDS = ("ml", "static", "recalib")

EPISODE_CSV_HEADER = (
    "block,n_pulses,n_sifted,n_errors,q_mu_hat,e_mu_hat,e_lo,e_hi,v_hat,eta_hat,"
    "aborted,mu_s,mu_w,p_z,theta_c,phi_c,skr_bps,skr_finite,reward,controller"
)
METRICS_CSV_HEADER = "controller,scenario,metric,value,ci_lo,ci_hi"


class ConfigMismatchError(ValueError):
    """Requested controller/protocol combination is not runnable."""


@dataclass
class BlockRecord:
    block: int
    ctrl: ControlState
    telem: Telemetry
    skr_bps: float
    skr_finite: float
    reward: float
    aborted: bool


@dataclass
class EpisodeLog:
    scenario: str
    seed: int
    controller: str
    records: List[BlockRecord] = field(default_factory=list)
    tcn_calls: int = 0
    policy_calls: int = 0

    def skr_series(self) -> np.ndarray:
        return np.array([r.skr_bps for r in self.records])

    def qber_series(self) -> np.ndarray:
        return np.array([min(r.telem.e_mu_hat, 0.5) for r in self.records])

    def abort_count(self) -> int:
        return sum(1 for r in self.records if r.aborted)

    def total_secret_bits(self, block_seconds: float = BLOCK_SECONDS) -> float:
        return float(sum(r.skr_bps * block_seconds for r in self.records))

    def csv(self) -> str:
        lines = [EPISODE_CSV_HEADER]
        for r in self.records:
            ctrl = (f"{r.ctrl.mu_s:.10g},{r.ctrl.mu_w:.10g},{r.ctrl.p_z:.10g},"
                    f"{r.ctrl.theta_c:.10g},{r.ctrl.phi_c:.10g}")
            lines.append(
                f"{r.telem.csv_row()},{ctrl},{r.skr_bps:.10g},{r.skr_finite:.10g},"
                f"{r.reward:.10g},{self.controller}")
        return "\n".join(lines) + "\n"


@dataclass
class RunMetrics:
    controller: str
    scenario: str
    median_skr_bps: float
    median_qber: float
    abort_count: float
    adaptation_blocks: Optional[float]
    adaptation_seconds: Optional[float]
    per_seed: Dict[int, Dict[str, Optional[float]]]
    skr_ci: Tuple[float, float]
    qber_ci: Tuple[float, float]
    abort_ci: Tuple[float, float]


def nominal_control(proto: ProtocolConfig) -> ControlState:
    if proto.kind == "cow":
        return ControlState(mu_s=proto.cow.alpha_sq, mu_w=0.1, p_z=0.5)
    return ControlState(mu_s=proto.bb84.mu_s, mu_w=proto.bb84.mu_w, p_z=0.5)


def nominal_skr_ref(link: LinkParams, proto: ProtocolConfig) -> float:
    """Asymptotic throughput at nominal parameters and zero added noise."""
    ctrl = nominal_control(proto)
    q_eff = sifting_factor(proto.kind, proto, ctrl)
    if proto.kind == "bb84":
        gs = rates.bb84_model_gains(link, proto.bb84.mu_s)
        gw = rates.bb84_model_gains(link, proto.bb84.mu_w)
        bounds = rates.decoy_bounds((gs.q_mu, gs.e_mu), (gw.q_mu, gw.e_mu),
                                    proto, link.y0, link.e0)
        rep = rates.bb84_key_rate(bounds, gs.q_mu, gs.e_mu, proto,
                                  f_rep=link.f_rep, q=q_eff)
    elif proto.kind == "e91":
        s, q_err = rates.e91_quantities(proto.e91.v_source)
        rep = rates.e91_key_rate(s, q_err, proto, f_rep=link.f_rep, q=proto.q)
    else:
        eta = rates.transmittance(link)
        gs = rates.bb84_gains(proto.cow.alpha_sq, eta, link.y0, link.e_d, link.e0)
        rep = rates.cow_key_rate(gs.q_mu, gs.e_mu, 0.0, proto,
                                 f_rep=link.f_rep, q=q_eff)
    return max(rep.r_bps, 1e-9)


def block_key_rate(link: LinkParams, proto: ProtocolConfig, ctrl: ControlState,
                   telem: Telemetry) -> Tuple[float, float]:
    """Finite and asymptotic throughput estimated from one block's telemetry.

    BB84 runs the two-intensity decoy bounds on the sampled statistics; an
    infeasible bound (inconsistent observations) yields a zero-rate block.
    """
    q_eff = sifting_factor(proto.kind, proto, ctrl)
    if proto.kind == "bb84":
        cfg = replace(proto, bb84=replace(proto.bb84, mu_s=ctrl.mu_s, mu_w=ctrl.mu_w))
        try:
            bounds = rates.decoy_bounds((telem.q_mu_hat, telem.e_mu_hat),
                                        (telem.q_w_hat, telem.e_w_hat),
                                        cfg, telem.y0_hat, link.e0)
        except rates.BoundInfeasibleError:
            return 0.0, 0.0
        rep = rates.bb84_key_rate(bounds, min(telem.q_mu_hat, 1.0),
                                  min(telem.e_mu_hat, 1.0), cfg,
                                  f_rep=link.f_rep, q=q_eff)
    elif proto.kind == "e91":
        s_hat = min(rates.CHSH_MAX * telem.v_hat, rates.CHSH_MAX)
        rep = rates.e91_key_rate(s_hat, min(telem.e_mu_hat, 0.5), proto,
                                 f_rep=link.f_rep, q=q_eff)
    elif proto.kind == "cow":
        e_ph_hat = min(max((1.0 - telem.v_hat) / 2.0, 0.0), 1.0)
        rep = rates.cow_key_rate(min(telem.q_mu_hat, 1.0), min(telem.e_mu_hat, 1.0),
                                 e_ph_hat, proto, f_rep=link.f_rep, q=q_eff)
    else:
        raise ConfigMismatchError(f"unknown protocol {proto.kind!r}")
    return rep.r_bps, rep.r_finite * link.f_rep


class _RecalibState:
    """Grid scan of the signal intensity every RECALIB_PERIOD blocks."""

    def __init__(self, base: ControlState, period: int = RECALIB_PERIOD,
                 grid: Sequence[float] = RECALIB_GRID):
        self.base = base
        self.period = period
        self.grid = tuple(grid)
        self.best_mu = base.mu_s
        self._scan_skr: List[float] = []

    def control_for(self, t: int) -> ControlState:
        pos = t % self.period
        if pos < len(self.grid):
            if pos == 0:
                self._scan_skr = []
            return replace(self.base, mu_s=self.grid[pos])
        return replace(self.base, mu_s=self.best_mu)

    def record(self, t: int, skr: float) -> None:
        pos = t % self.period
        if pos < len(self.grid):
            self._scan_skr.append(skr)
            if pos == len(self.grid) - 1:
                self.best_mu = self.grid[int(np.argmax(self._scan_skr))]


def run_episode(
    link: LinkParams,
    proto: ProtocolConfig,
    scenario: Union[str, dict, NoiseSchedule],
    kind: str,
    seed: int,
    blocks: int,
    n_pulses: int = DEFAULT_N_PULSES,
    abort_threshold: float = DEFAULT_ABORT_QBER,
    tcn_model: Optional[TcnModel] = None,
    nets: Optional[ActorCritic] = None,
    ppo_cfg: Optional[PpoConfig] = None,
    reward_cfg: Optional[RewardConfig] = None,
    buffer: Optional[RolloutBuffer] = None,
    opt_actor: Optional[nn.Adam] = None,
    opt_critic: Optional[nn.Adam] = None,
    update_log: Optional[List[Dict[str, float]]] = None,
    online_updates: bool = True,
) -> EpisodeLog:
    """One (scenario, seed, controller) run; deterministic under fixed inputs.

    The ML controller consumes the previous block's telemetry and forecast,
    then acts; the transition is stored and a PPO update fires whenever the
    rollout buffer reaches its configured length. An abort resets the
    control state to nominal before the next block.
    """
    if kind not in CONTROLLER_KINDS:
        raise ConfigMismatchError(f"unknown controller kind {kind!r}")
    sched = scenario if isinstance(scenario, NoiseSchedule) else make_scenario(scenario, blocks)
    sim = Simulator(link, proto, sched, seed=seed * 4 + 1, n_pulses=n_pulses,
                    abort_threshold=abort_threshold)
    reward_cfg = reward_cfg or RewardConfig(skr_ref=nominal_skr_ref(link, proto))
    nominal = nominal_control(proto)
    ctrl = nominal
    log = EpisodeLog(scenario=sched.name, seed=seed, controller=kind)

    forecaster: Optional[Forecaster] = None
    policy_rng: Optional[np.random.Generator] = None
    recalib: Optional[_RecalibState] = None
    if kind == "ml":
        if nets is None:
            raise ConfigMismatchError("ml controller requires trained networks")
        if proto.kind not in ("bb84", "e91", "cow"):
            raise ConfigMismatchError(f"no action mask for protocol {proto.kind!r}")
        forecaster = Forecaster(tcn_model)
        policy_rng = np.random.Generator(np.random.Philox(key=seed * 4 + 2))
        ppo_cfg = ppo_cfg or nets.cfg
        buffer = buffer if buffer is not None else RolloutBuffer()
        if online_updates:
            opt_actor = opt_actor or nn.Adam(nets.actor_params(), lr=ppo_cfg.lr)
            opt_critic = opt_critic or nn.Adam(nets.critic_params(), lr=ppo_cfg.lr)
    elif kind == "recalib":
        recalib = _RecalibState(nominal)

    history: List[np.ndarray] = []
    prev_telem: Optional[Telemetry] = None
    pending: Optional[Tuple[np.ndarray, object]] = None

    for t in range(blocks):
        if kind == "ml" and prev_telem is not None:
            fc = forecaster.forecast(np.asarray(history))
            normalizer = (tcn_model.normalizer if tcn_model is not None
                          else Normalizer.identity(len(history[0])))
            obs = observe(fc, prev_telem, ctrl, normalizer)
            sample = act(nets, obs, policy_rng, protocol=proto.kind)
            ctrl = apply_action(ctrl, sample.action)
            pending = (obs, sample)
        elif kind == "recalib":
            ctrl = recalib.control_for(t)

        telem = sim.step(ctrl)
        skr_bps, skr_finite = block_key_rate(link, proto, ctrl, telem)
        if telem.aborted:
            skr_bps, skr_finite = 0.0, 0.0
        r = reward_fn(skr_bps, min(telem.e_mu_hat, 0.5), telem.aborted, reward_cfg)

        if kind == "ml" and pending is not None:
            obs, sample = pending
            buffer.add(obs, sample.pre_squash, sample.log_prob, sample.value,
                       r, sample.action.mask)
            pending = None
            if online_updates and len(buffer) >= ppo_cfg.rollout:
                report = ppo_update(buffer, ppo_cfg, nets, opt_actor, opt_critic)
                if update_log is not None:
                    update_log.append(report)
        if kind == "recalib":
            recalib.record(t, skr_bps)

        log.records.append(BlockRecord(block=t, ctrl=ctrl, telem=telem,
                                       skr_bps=skr_bps, skr_finite=skr_finite,
                                       reward=r, aborted=telem.aborted))
        history.append(telemetry_features(telem))
        prev_telem = telem
        if telem.aborted:
            ctrl = nominal

    if forecaster is not None:
        log.tcn_calls = forecaster.calls
    if nets is not None and kind == "ml":
        log.policy_calls = nets.act_calls
    return log


def run_closed_loop(
    link: LinkParams,
    proto: ProtocolConfig,
    scenario: Union[str, dict],
    kind: str,
    seeds: Sequence[int],
    blocks: int,
    **kwargs,
) -> List[EpisodeLog]:
    """Run one controller over several seeds; blocks must be >= 200."""
    if blocks < 200:
        raise ValueError("closed-loop runs need blocks >= 200")
    return [run_episode(link, proto, scenario, kind, seed, blocks, **kwargs)
            for seed in seeds]


def run_baseline(kind: str, link: LinkParams, proto: ProtocolConfig,
                 scenario: Union[str, dict], seeds: Sequence[int], blocks: int,
                 **kwargs) -> List[EpisodeLog]:
    if kind not in ("static", "recalib"):
        raise ConfigMismatchError(f"baseline kind must be static or recalib, got {kind!r}")
    return run_closed_loop(link, proto, scenario, kind, seeds, blocks, **kwargs)


def train_policy(
    link: LinkParams,
    proto: ProtocolConfig,
    tcn_model: Optional[TcnModel],
    seed: int,
    updates: int = 300,
    scenarios: Sequence[str] = ("noise-sweep", "splice-3db"),
    blocks_per_episode: int = 600,
    ppo_cfg: Optional[PpoConfig] = None,
    reward_cfg: Optional[RewardConfig] = None,
    n_pulses: int = DEFAULT_N_PULSES,
) -> Tuple[ActorCritic, List[Dict[str, float]]]:
    """Train the PPO controller on a scenario mixture until ``updates``
    policy updates have run, streaming rollouts across episode resets."""
    ppo_cfg = ppo_cfg or PpoConfig()
    reward_cfg = reward_cfg or RewardConfig(skr_ref=nominal_skr_ref(link, proto))
    nets = ActorCritic(ppo_cfg, rng=np.random.Generator(np.random.Philox(key=seed * 4 + 3)))
    buffer = RolloutBuffer()
    opt_actor = nn.Adam(nets.actor_params(), lr=ppo_cfg.lr)
    opt_critic = nn.Adam(nets.critic_params(), lr=ppo_cfg.lr)
    progress: List[Dict[str, float]] = []
    episode = 0
    while len(progress) < updates:
        scen = scenarios[episode % len(scenarios)]
        run_episode(
            link, proto, scen, "ml", seed=100_000 + seed * 1_000 + episode,
            blocks=blocks_per_episode, n_pulses=n_pulses, tcn_model=tcn_model,
            nets=nets, ppo_cfg=ppo_cfg, reward_cfg=reward_cfg, buffer=buffer,
            opt_actor=opt_actor, opt_critic=opt_critic, update_log=progress,
        )
        episode += 1
    return nets, progress[:updates]


def adaptation_time(log: EpisodeLog, event_block: int,
                    pre_window: int = PRE_EVENT_WINDOW,
                    recovery_fraction: float = 0.95,
                    sustain: int = 3) -> Optional[int]:
    """Blocks until the rate stays above the pre-event reference.

    Returns the smallest tau such that skr_bps >= recovery_fraction times
    the median over the ``pre_window`` blocks before the event, sustained
    for ``sustain`` consecutive blocks; None if never recovered.
    """
    series = log.skr_series()
    if event_block < pre_window or event_block >= len(series):
        raise ValueError("insufficient pre-event history")
    pre_median = float(np.median(series[event_block - pre_window:event_block]))
    threshold = recovery_fraction * pre_median
    for tau in range(0, len(series) - event_block - sustain + 1):
        window = series[event_block + tau:event_block + tau + sustain]
        if np.all(window >= threshold):
            return tau
    return None


def bootstrap_ci(values: Sequence[float], n_boot: int = 10_000,
                 conf: float = 0.95, seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap CI of the median of ``values``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    if np.all(values == values[0]):
        return float(values[0]), float(values[0])
    rng = np.random.Generator(np.random.Philox(key=seed))
    stats = np.median(
        values[rng.integers(0, values.size, size=(n_boot, values.size))], axis=1)
    lo = float(np.percentile(stats, 100 * (1 - conf) / 2))
    hi = float(np.percentile(stats, 100 * (1 + conf) / 2))
    return lo, hi


@dataclass
class ComparisonResult:
    scenario: str
    metrics: Dict[str, RunMetrics]
    improvements: List[Tuple[str, str, float, float, float]]

    def csv(self) -> str:
        lines = [METRICS_CSV_HEADER]

        def fmt(x) -> str:
            if x is None or (isinstance(x, float) and math.isnan(x)):
                return "nan"
            return f"{x:.10g}"

        for name, m in self.metrics.items():
            rows = [
                ("median_skr_bps", m.median_skr_bps, *m.skr_ci),
                ("median_qber", m.median_qber, *m.qber_ci),
                ("abort_count", m.abort_count, *m.abort_ci),
            ]
            if m.adaptation_blocks is not None or self._has_event():
                rows.append(("adaptation_blocks", m.adaptation_blocks, math.nan, math.nan))
                rows.append(("adaptation_seconds", m.adaptation_seconds, math.nan, math.nan))
            for metric, val, lo, hi in rows:
                lines.append(f"{name},{self.scenario},{metric},{fmt(val)},{fmt(lo)},{fmt(hi)}")
        for ctrl, metric, val, lo, hi in self.improvements:
            lines.append(f"{ctrl},{self.scenario},{metric},{fmt(val)},{fmt(lo)},{fmt(hi)}")
        return "\n".join(lines) + "\n"

    def _has_event(self) -> bool:
        return any(m.adaptation_blocks is not None for m in self.metrics.values())


def compare(runs: Dict[str, List[EpisodeLog]], warmup: int = WARMUP_BLOCKS,
            event_block: Optional[int] = None, n_boot: int = 10_000,
            block_seconds: float = BLOCK_SECONDS) -> ComparisonResult:
    """Aggregate per-controller metrics and ML-vs-baseline improvements.

    Medians are taken over post-warm-up blocks pooled across seeds;
    bootstrap CIs resample the seed-level aggregates.
    """
    if len(runs) < 2:
        raise ValueError("compare needs at least two controllers")
    scen_sets = {name: tuple(sorted((l.scenario, l.seed) for l in logs))
                 for name, logs in runs.items()}
    if len(set(scen_sets.values())) != 1:
        raise ValueError("controllers must cover identical scenario/seed sets")
    scenario = next(iter(runs.values()))[0].scenario

    metrics: Dict[str, RunMetrics] = {}
    seed_meds: Dict[str, Dict[str, List[float]]] = {}
    for name, logs in runs.items():
        pooled_skr, pooled_qber = [], []
        per_seed: Dict[int, Dict[str, Optional[float]]] = {}
        skr_meds, qber_meds, aborts, adapts = [], [], [], []
        for log in logs:
            skr = log.skr_series()[warmup:]
            qber = log.qber_series()[warmup:]
            pooled_skr.append(skr)
            pooled_qber.append(qber)
            med_s, med_q = float(np.median(skr)), float(np.median(qber))
            n_ab = log.abort_count()
            adapt = (adaptation_time(log, event_block)
                     if event_block is not None else None)
            per_seed[log.seed] = {"median_skr_bps": med_s, "median_qber": med_q,
                                  "aborts": float(n_ab),
                                  "adaptation_blocks": None if adapt is None else float(adapt)}
            skr_meds.append(med_s)
            qber_meds.append(med_q)
            aborts.append(float(n_ab))
            if adapt is not None:
                adapts.append(float(adapt))
        adapt_agg = float(np.median(adapts)) if adapts else (
            math.nan if event_block is not None else None)
        metrics[name] = RunMetrics(
            controller=name,
            scenario=scenario,
            median_skr_bps=float(np.median(np.concatenate(pooled_skr))),
            median_qber=float(np.median(np.concatenate(pooled_qber))),
            abort_count=float(np.sum(aborts)),
            adaptation_blocks=adapt_agg,
            adaptation_seconds=(None if adapt_agg is None
                                else adapt_agg * block_seconds),
            per_seed=per_seed,
            skr_ci=bootstrap_ci(skr_meds, n_boot, seed=1),
            qber_ci=bootstrap_ci(qber_meds, n_boot, seed=2),
            abort_ci=bootstrap_ci(aborts, n_boot, seed=3),
        )
        seed_meds[name] = {"skr": skr_meds, "qber": qber_meds}

    improvements: List[Tuple[str, str, float, float, float]] = []
    if "ml" in runs and "static" in runs:
        ml, st = seed_meds["ml"], seed_meds["static"]
        st_med = float(np.median(st["skr"]))
        ml_med = float(np.median(ml["skr"]))
        val = math.nan if st_med == 0 else 100.0 * (ml_med - st_med) / st_med
        lo, hi = _paired_improvement_ci(ml["skr"], st["skr"], n_boot)
        improvements.append(("ml", "skr_improvement_vs_static_pct", val, lo, hi))
        stq, mlq = float(np.median(st["qber"])), float(np.median(ml["qber"]))
        ratio = math.nan if stq == 0 else mlq / stq
        rlo, rhi = _paired_ratio_ci(ml["qber"], st["qber"], n_boot)
        improvements.append(("ml", "qber_ratio_vs_static", ratio, rlo, rhi))
    return ComparisonResult(scenario=scenario, metrics=metrics,
                            improvements=improvements)


def _paired_ratio_ci(ml: Sequence[float], static: Sequence[float],
                     n_boot: int, seed: int = 5) -> Tuple[float, float]:
    ml = np.asarray(ml, dtype=float)
    static = np.asarray(static, dtype=float)
    if np.all(ml == ml[0]) and np.all(static == static[0]):
        val = math.nan if static[0] == 0 else ml[0] / static[0]
        return val, val
    rng = np.random.Generator(np.random.Philox(key=seed))
    idx = rng.integers(0, ml.size, size=(n_boot, ml.size))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.median(ml[idx], axis=1) / np.median(static[idx], axis=1)
    ratios = ratios[np.isfinite(ratios)]
    if ratios.size == 0:
        return math.nan, math.nan
    return float(np.percentile(ratios, 2.5)), float(np.percentile(ratios, 97.5))


def _paired_improvement_ci(ml: Sequence[float], static: Sequence[float],
                           n_boot: int, seed: int = 4) -> Tuple[float, float]:
    ml = np.asarray(ml, dtype=float)
    static = np.asarray(static, dtype=float)
    if np.all(ml == ml[0]) and np.all(static == static[0]):
        val = (math.nan if static[0] == 0
               else 100.0 * (ml[0] - static[0]) / static[0])
        return val, val
    rng = np.random.Generator(np.random.Philox(key=seed))
    idx = rng.integers(0, ml.size, size=(n_boot, ml.size))
    ml_m = np.median(ml[idx], axis=1)
    st_m = np.median(static[idx], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        imp = 100.0 * (ml_m - st_m) / st_m
    imp = imp[np.isfinite(imp)]
    if imp.size == 0:
        return math.nan, math.nan
    return float(np.percentile(imp, 2.5)), float(np.percentile(imp, 97.5))
