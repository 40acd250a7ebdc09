"""Analytical secure-key-rate engine for BB84-decoy, E91, and COW links.

Everything in this module is a pure function of its inputs: no shared
state, safe to call from any number of threads. Rates are reported per
emitted pulse, in bits per second via the source clock, and with a
finite-size deduction applied on top of the asymptotic value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

DEFAULT_F_REP = 2.5e8
CHSH_MAX = 2.0 * math.sqrt(2.0)

# Photon-number cutoff for the exact Poisson expansion. For mu <= 1 the
# neglected tail is far below double precision.
POISSON_NMAX = 50


class BoundInfeasibleError(ValueError):
    """Observed decoy statistics admit no positive single-photon yield."""


def _check_prob(name: str, x: float, hi: float = 1.0) -> None:
    if not 0.0 <= x <= hi:
        raise ValueError(f"{name} must be in [0, {hi}], got {x!r}")


@dataclass(frozen=True)
class LinkParams:
    """Fiber and device constants for one point-to-point link."""

    alpha_db_per_km: float = 0.2
    distance_km: float = 50.0
    eta_det: float = 0.2
    y0: float = 5e-6
    e_d: float = 0.015
    e0: float = 0.5
    f_rep: float = DEFAULT_F_REP
    theta: Optional[float] = None

    def __post_init__(self) -> None:
        if self.alpha_db_per_km < 0:
            raise ValueError("alpha_db_per_km must be >= 0")
        if self.distance_km < 0:
            raise ValueError("distance_km must be >= 0")
        if not 0.0 < self.eta_det <= 1.0:
            raise ValueError("eta_det must be in (0, 1]")
        if not 0.0 <= self.y0 < 1.0:
            raise ValueError("y0 must be in [0, 1)")
        if not 0.0 <= self.e_d <= 0.5:
            raise ValueError("e_d must be in [0, 0.5]")
        if not 0.0 <= self.e0 <= 0.5:
            raise ValueError("e0 must be in [0, 0.5]")
        if self.f_rep <= 0:
            raise ValueError("f_rep must be positive")


@dataclass(frozen=True)
class Bb84Config:
    mu_s: float = 0.5
    mu_w: float = 0.1
    p_s: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 < self.mu_w < self.mu_s:
            raise ValueError("need 0 < mu_w < mu_s")
        if not 0.0 < self.p_s < 1.0:
            raise ValueError("p_s must be in (0, 1)")


@dataclass(frozen=True)
class E91Config:
    v_source: float = 0.98

    def __post_init__(self) -> None:
        if not 0.0 < self.v_source <= 1.0:
            raise ValueError("v_source must be in (0, 1]")


@dataclass(frozen=True)
class CowConfig:
    alpha_sq: float = 0.5
    monitor_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.alpha_sq <= 0:
            raise ValueError("alpha_sq must be positive")
        if not 0.0 <= self.monitor_fraction < 1.0:
            raise ValueError("monitor_fraction must be in [0, 1)")


@dataclass(frozen=True)
class FiniteKeyConfig:
    n_block: float = 1e6
    epsilon: float = 1e-10

    def __post_init__(self) -> None:
        if self.n_block < 1:
            raise ValueError("n_block must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")


@dataclass(frozen=True)
class ProtocolConfig:
    """Tagged union of per-protocol parameter sets plus shared settings.

    ``kind`` selects which of the protocol sub-configs is active; the
    others keep their defaults and are ignored by the rate functions.
    """

    kind: str = "bb84"
    q: float = 0.5
    f_ec: float = 1.16
    bb84: Bb84Config = field(default_factory=Bb84Config)
    e91: E91Config = field(default_factory=E91Config)
    cow: CowConfig = field(default_factory=CowConfig)
    finite_key: FiniteKeyConfig = field(default_factory=FiniteKeyConfig)

    def __post_init__(self) -> None:
        if self.kind not in ("bb84", "e91", "cow"):
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError("q must be in (0, 1]")
        if self.f_ec < 1.0:
            raise ValueError("f_ec must be >= 1")


@dataclass(frozen=True)
class GainStats:
    """Overall and single-photon gain/error statistics at one intensity."""

    q_mu: float
    e_mu: float
    q1: float
    e1: float
    y1: float


@dataclass(frozen=True)
class DecoyBounds:
    """Two-intensity decoy bounds on the single-photon contribution."""

    y1_lower: float
    q1_lower: float
    e1_upper: float


@dataclass(frozen=True)
class RateComponents:
    """Diagnostic terms of a key-rate evaluation, clamp-free."""

    ec_leak: float
    pa_term: float
    raw: float


@dataclass(frozen=True)
class KeyRateReport:
    r_per_pulse: float
    r_bps: float
    r_finite: float
    components: RateComponents


def binary_entropy(x: float) -> float:
    """Binary entropy H2(x) in bits, with the convention 0*log2(0) = 0."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary_entropy argument must be in [0, 1], got {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def transmittance(link: LinkParams) -> float:
    """Overall transmittance: fiber attenuation folded with detector efficiency."""
    return 10.0 ** (-link.alpha_db_per_km * link.distance_km / 10.0) * link.eta_det


def bb84_gains(mu: float, eta: float, y0: float, e_d: float, e0: float = 0.5) -> GainStats:
    """Weak-coherent-pulse gain and error model at intensity ``mu``.

    Single-photon terms follow the Poissonian-source yield expansion
    Y1 = Y0 + eta and e1*Q1 = e0*Y0 + e_d*eta*mu*exp(-mu); the overall
    gain sums the photon-number ladder Yn = Y0 + 1 - (1-eta)^n, which
    collapses to the closed form Y0 + 1 - exp(-eta*mu).

    A dark channel (eta = 0, y0 = 0) yields zero gains and error rates
    reported at the random baseline e0.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    _check_prob("eta", eta)
    y1 = min(y0 + eta, 1.0)
    q1 = y1 * mu * math.exp(-mu)
    q_mu = min(y0 + (1.0 - math.exp(-eta * mu)), 1.0)
    if q_mu <= 0.0:
        return GainStats(q_mu=0.0, e_mu=e0, q1=q1, e1=e0 if q1 <= 0 else e0, y1=y1)
    e_mu = (e0 * y0 + e_d * (1.0 - math.exp(-eta * mu))) / q_mu
    e1 = e0 if q1 <= 0 else (e0 * y0 + e_d * eta * mu * math.exp(-mu)) / q1
    return GainStats(
        q_mu=q_mu,
        e_mu=min(max(e_mu, 0.0), 1.0),
        q1=min(q1, 1.0),
        e1=min(max(e1, 0.0), 1.0),
        y1=y1,
    )


def bb84_model_gains(link: LinkParams, mu: float) -> GainStats:
    """Gain model evaluated at a link's nominal transmittance."""
    return bb84_gains(mu, transmittance(link), link.y0, link.e_d, link.e0)


def bb84_poisson_gains(
    mu: float, eta: float, y0: float, e_d: float, e0: float = 0.5, nmax: int = POISSON_NMAX
) -> GainStats:
    """Gain model via the explicit photon-number sum, truncated at ``nmax``.

    Numerically identical to :func:`bb84_gains` for mu <= 1; kept as the
    slow exact path backing the fast closed forms.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    q_mu = 0.0
    eq_mu = 0.0
    pn = math.exp(-mu)
    for n in range(nmax + 1):
        yn = y0 + 1.0 - (1.0 - eta) ** n
        en_yn = e0 * y0 + e_d * (1.0 - (1.0 - eta) ** n)
        q_mu += pn * yn
        eq_mu += pn * en_yn
        pn = pn * mu / (n + 1)
    y1 = min(y0 + eta, 1.0)
    q1 = y1 * mu * math.exp(-mu)
    e1 = e0 if y1 <= 0 else min((e0 * y0 + e_d * eta) / y1, 1.0)
    e_mu = e0 if q_mu <= 0 else eq_mu / q_mu
    return GainStats(q_mu=min(q_mu, 1.0), e_mu=e_mu, q1=min(q1, 1.0), e1=e1, y1=y1)


def decoy_bounds(
    obs_s: Tuple[float, float],
    obs_w: Tuple[float, float],
    cfg: ProtocolConfig,
    y0: float,
    e0: float = 0.5,
) -> DecoyBounds:
    """Two-intensity (signal + weak decoy) analytic bounds.

    ``obs_s`` and ``obs_w`` are observed (gain, QBER) pairs at the signal
    and weak intensities. The vacuum yield ``y0`` is assumed known from
    calibration. Raises :class:`BoundInfeasibleError` when the observations
    are mutually inconsistent (no non-negative Y1 exists).
    """
    mu_s, mu_w = cfg.bb84.mu_s, cfg.bb84.mu_w
    q_s, _ = obs_s
    q_w, e_w = obs_w
    if not (0.0 < mu_w < mu_s):
        raise ValueError("need 0 < mu_w < mu_s")
    y1_raw = (mu_s / (mu_s * mu_w - mu_w**2)) * (
        q_w * math.exp(mu_w)
        - q_s * math.exp(mu_s) * (mu_w**2 / mu_s**2)
        - ((mu_s**2 - mu_w**2) / mu_s**2) * y0
    )
    y1_lower = min(max(y1_raw, 0.0), 1.0)
    if y1_lower <= 0.0:
        raise BoundInfeasibleError(
            f"single-photon yield bound is non-positive ({y1_raw:.3e}); "
            "observations inconsistent with the decoy model"
        )
    e1_raw = (e_w * q_w * math.exp(mu_w) - e0 * y0) / (y1_lower * mu_w)
    e1_upper = min(max(e1_raw, 0.0), 0.5)
    q1_lower = y1_lower * mu_s * math.exp(-mu_s)
    return DecoyBounds(y1_lower=y1_lower, q1_lower=q1_lower, e1_upper=e1_upper)


def _report(r_raw: float, ec_leak: float, pa_term: float, cfg: ProtocolConfig, f_rep: float) -> KeyRateReport:
    r_pp = max(r_raw, 0.0)
    r_fin = finite_key_rate(r_pp, cfg.finite_key.n_block, cfg.finite_key.epsilon)
    return KeyRateReport(
        r_per_pulse=r_pp,
        r_bps=r_pp * f_rep,
        r_finite=r_fin,
        components=RateComponents(ec_leak=ec_leak, pa_term=pa_term, raw=r_raw),
    )


def bb84_key_rate(
    bounds_or_gains: Union[DecoyBounds, GainStats],
    q_mu: float,
    e_mu: float,
    cfg: ProtocolConfig,
    f_rep: float = DEFAULT_F_REP,
    q: Optional[float] = None,
) -> KeyRateReport:
    """Decoy-state BB84 secure fraction per emitted pulse.

    R = q * { -Q_mu f(E) H2(E) + Q1 [1 - H2(e1)] } with (Q1, e1) taken
    from decoy bounds or from model gain statistics. Negative raw values
    are preserved in the components and clamped in the headline fields.
    """
    _check_prob("q_mu", q_mu)
    _check_prob("e_mu", e_mu)
    q_sift = cfg.q if q is None else q
    if isinstance(bounds_or_gains, DecoyBounds):
        q1, e1 = bounds_or_gains.q1_lower, bounds_or_gains.e1_upper
    else:
        q1, e1 = bounds_or_gains.q1, bounds_or_gains.e1
    ec_leak = q_mu * cfg.f_ec * binary_entropy(min(e_mu, 0.5))
    pa_term = q1 * (1.0 - binary_entropy(min(e1, 0.5)))
    raw = q_sift * (pa_term - ec_leak)
    return _report(raw, ec_leak, pa_term, cfg, f_rep)


def bb84_sifted_key_rate(
    q_mu: float,
    e_mu: float,
    cfg: ProtocolConfig,
    f_rep: float = DEFAULT_F_REP,
    q: Optional[float] = None,
) -> KeyRateReport:
    """Sifted-key approximation R ~ q * Q_mu * [1 - 2 H2(E_mu)]."""
    _check_prob("q_mu", q_mu)
    _check_prob("e_mu", e_mu)
    q_sift = cfg.q if q is None else q
    h = binary_entropy(min(e_mu, 0.5))
    raw = q_sift * q_mu * (1.0 - 2.0 * h)
    return _report(raw, q_mu * h, q_mu * (1.0 - h), cfg, f_rep)


def e91_quantities(v: float) -> Tuple[float, float]:
    """CHSH value and QBER implied by a two-photon interference visibility."""
    _check_prob("visibility", v)
    return CHSH_MAX * v, (1.0 - v) / 2.0


def e91_key_rate(
    s: float,
    q_err: float,
    cfg: ProtocolConfig,
    f_rep: float = DEFAULT_F_REP,
    q: Optional[float] = None,
) -> KeyRateReport:
    """Entanglement-based rate with a CHSH-dependent privacy term.

    R = q_sift * [1 - f(Q) H2(Q) - H2((1 + sqrt(max(0, (S/2)^2 - 1))) / 2)].
    """
    _check_prob("q_err", q_err, 0.5)
    if not 0.0 <= s <= CHSH_MAX + 1e-12:
        raise ValueError(f"CHSH value must be in [0, 2*sqrt(2)], got {s!r}")
    q_sift = cfg.q if q is None else q
    ec_leak = cfg.f_ec * binary_entropy(q_err)
    holevo_arg = (1.0 + math.sqrt(max(0.0, (s / 2.0) ** 2 - 1.0))) / 2.0
    pa_term = 1.0 - binary_entropy(min(holevo_arg, 1.0))
    raw = q_sift * (pa_term - ec_leak)
    return _report(raw, ec_leak, pa_term, cfg, f_rep)


def cow_visibility(alpha_sq: float, dphi: float) -> float:
    """Monitor-line visibility under inter-pulse phase drift ``dphi``."""
    if alpha_sq < 0:
        raise ValueError("alpha_sq must be >= 0")
    return math.exp(-2.0 * alpha_sq * (1.0 - math.cos(dphi)))


def cow_phase_error(alpha_sq: float, dphi: float) -> float:
    """Phase (coherence) error (1 - V) / 2 implied by the drift."""
    return (1.0 - cow_visibility(alpha_sq, dphi)) / 2.0


def cow_key_rate(
    q_mu: float,
    e_mu: float,
    e_ph: float,
    cfg: ProtocolConfig,
    f_rep: float = DEFAULT_F_REP,
    q: Optional[float] = None,
) -> KeyRateReport:
    """Coherent one-way rate per emitted signal bin.

    R = q * { -Q_mu f(E) H2(E) + Q_mu [1 - H2(e_ph)] } with the phase
    error taken from the monitor-line visibility.
    """
    _check_prob("q_mu", q_mu)
    _check_prob("e_mu", e_mu)
    _check_prob("e_ph", e_ph)
    q_sift = cfg.q if q is None else q
    ec_leak = q_mu * cfg.f_ec * binary_entropy(min(e_mu, 0.5))
    pa_term = q_mu * (1.0 - binary_entropy(min(e_ph, 0.5)))
    raw = q_sift * (pa_term - ec_leak)
    return _report(raw, ec_leak, pa_term, cfg, f_rep)


def finite_key_penalty(n: float, eps: float) -> float:
    """Finite-size rate deduction Delta_FK(N, eps)."""
    if n < 1:
        raise ValueError("block size must be >= 1")
    if not 0.0 < eps < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    return 7.0 * math.sqrt(math.log2(2.0 / eps) / n) + (2.0 / n) * math.log2(1.0 / eps)


def finite_key_rate(r_asym: float, n: float, eps: float) -> float:
    """Asymptotic rate minus the finite-size penalty, clamped at zero."""
    return max(0.0, r_asym - finite_key_penalty(n, eps))
