"""Independent reference implementations used to pin expected test values.

These deliberately re-derive every quantity from first principles with
their own code paths (explicit photon-number sums, direct formula
transliterations, central finite differences) so that a defect in the
package cannot hide in its own oracle.
"""

import math

import numpy as np

Z_95 = 1.959963984540054


def h2_oracle(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return -(x * math.log(x) + (1.0 - x) * math.log(1.0 - x)) / math.log(2.0)


def poisson_gains_oracle(mu, eta, y0, e_d, e0=0.5, nmax=50):
    """Exact photon-number expansion of the WCP gain model.

    Yields per photon number: Yn = y0 + 1 - (1-eta)^n, with error weight
    en*Yn = e0*y0 + e_d*(1 - (1-eta)^n), summed under Poisson statistics.
    Returns a dict with overall and single-photon quantities; e1 follows
    the n=1 term of the expansion, e1_src the source-conditioned form
    e1*Q1 = e0*y0 + e_d*eta*mu*e^-mu.
    """
    q_mu = 0.0
    eq = 0.0
    for n in range(nmax + 1):
        pn = math.exp(-mu) * mu**n / math.factorial(n)
        yn = y0 + 1.0 - (1.0 - eta) ** n
        q_mu += pn * yn
        eq += pn * (e0 * y0 + e_d * (1.0 - (1.0 - eta) ** n))
    y1 = y0 + eta
    q1 = y1 * mu * math.exp(-mu)
    return {
        "q_mu": q_mu,
        "e_mu": eq / q_mu if q_mu > 0 else e0,
        "y1": y1,
        "q1": q1,
        "e1": (e0 * y0 + e_d * eta) / y1 if y1 > 0 else e0,
        "e1_src": (e0 * y0 + e_d * eta * mu * math.exp(-mu)) / q1 if q1 > 0 else e0,
    }


def bb84_rate_oracle(q_mu, e_mu, q1, e1, f_ec, q_sift):
    return q_sift * (-q_mu * f_ec * h2_oracle(e_mu) + q1 * (1.0 - h2_oracle(e1)))


def decoy_bounds_oracle(q_s, q_w, e_w, mu_s, mu_w, y0, e0=0.5):
    y1 = (mu_s / (mu_s * mu_w - mu_w**2)) * (
        q_w * math.exp(mu_w)
        - q_s * math.exp(mu_s) * mu_w**2 / mu_s**2
        - (mu_s**2 - mu_w**2) / mu_s**2 * y0
    )
    e1 = (e_w * q_w * math.exp(mu_w) - e0 * y0) / (y1 * mu_w)
    return y1, e1


def e91_rate_oracle(v, f_ec, q_sift):
    s = 2.0 * math.sqrt(2.0) * v
    q_err = (1.0 - v) / 2.0
    holevo = h2_oracle((1.0 + math.sqrt(max(0.0, (s / 2.0) ** 2 - 1.0))) / 2.0)
    return q_sift * (1.0 - f_ec * h2_oracle(q_err) - holevo)


def cow_rate_oracle(q_mu, e_mu, e_ph, f_ec, q_sift):
    return q_sift * (-q_mu * f_ec * h2_oracle(e_mu)
                     + q_mu * (1.0 - h2_oracle(e_ph)))


def cow_visibility_oracle(alpha_sq, dphi):
    return math.exp(-2.0 * alpha_sq * (1.0 - math.cos(dphi)))


def finite_penalty_oracle(n, eps):
    return 7.0 * math.sqrt(math.log(2.0 / eps, 2) / n) + 2.0 / n * math.log(1.0 / eps, 2)


def transmittance_oracle(alpha_db, d_km, eta_det):
    return math.pow(10.0, -alpha_db * d_km / 10.0) * eta_det


def wilson_oracle(k, n, z=Z_95):
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    margin = z * math.sqrt((p * (1 - p) + z * z / (4 * n)) / n) / denom
    return max(0.0, center - margin), min(1.0, center + margin)


def fd_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def max_rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))
