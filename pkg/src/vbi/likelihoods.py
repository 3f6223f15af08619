"""Outcome models: multi-frequency Ramsey toy model and the nano-NMR
dynamical-decoupling model with nuisance parameters.

Units: inter-pulse delays tau are microseconds; couplings (A_z, A_perp) and
the Larmor frequency omega_L are angular, rad/us, loosely labeled "MHz"
throughout (omega_L = 2.7 "MHz" corresponds to a 0.43 MHz precession).

All evaluators are immutable; the batched entry points return analytic
gradients alongside values so the trainer never needs finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModelError
from .probcore import LOG_TWO_PI, log_gaussian_density

VARIANCE_FLOOR = 1e-12

_variance_floor_count = 0


def variance_floor_count() -> int:
    """How many Gaussian-outcome evaluations hit the variance floor."""
    return _variance_floor_count


def reset_variance_floor_count() -> None:
    global _variance_floor_count
    _variance_floor_count = 0


@dataclass(frozen=True)
class MeasurementRecord:
    """One experiment: controls (tau, n_pi), aggregated outcome y, repetitions."""

    tau_us: float
    n_pi: int
    repetitions: int
    y: float

    def __post_init__(self):
        if not self.tau_us > 0:
            raise ValueError(f"tau must be positive, got {self.tau_us}")
        if self.n_pi < 1:
            raise ValueError(f"n_pi must be >= 1, got {self.n_pi}")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")


@dataclass(frozen=True)
class NuisanceParams:
    """Decoherence / noise nuisances, all nonnegative by construction."""

    t2_inv: float = 0.0   # 1/us
    chi: float = 0.0      # shot-noise variance scale
    eta: float = 0.0      # extra Gaussian noise std

    def as_array(self) -> np.ndarray:
        return np.array([self.t2_inv, self.chi, self.eta])


def gaussian_outcome_loglik(record: MeasurementRecord, p, chi, eta):
    """log N(y; p, chi*p*(1-p) + eta^2), variance floored at 1e-12.

    Floored evaluations are tallied in :func:`variance_floor_count`.
    """
    global _variance_floor_count
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ModelError(f"probability {p} outside [0, 1]")
    var = chi * p * (1.0 - p) + eta * eta
    if var < VARIANCE_FLOOR:
        var = VARIANCE_FLOOR
        _variance_floor_count += 1
    return log_gaussian_density(record.y, p, var)


# ---------------------------------------------------------------------------
# toy multi-frequency Ramsey model
# ---------------------------------------------------------------------------


def toy_outcome_prob(tau, omega):
    """p(+1 | tau, omega) = 1/2 + (1/2n) sum_i cos(omega_i tau)."""
    omega = np.asarray(omega, dtype=float)
    if omega.size == 0:
        raise ModelError("toy model needs at least one frequency")
    n = omega.shape[-1]
    tau = np.asarray(tau, dtype=float)
    p = 0.5 + np.cos(omega * tau[..., None]).sum(axis=-1) / (2.0 * n)
    return float(p) if p.ndim == 0 else p


@dataclass(frozen=True)
class _ToyData:
    tau: np.ndarray        # (M,)
    counts: np.ndarray     # (M,) number of +1 outcomes
    reps: np.ndarray       # (M,)
    log_binom: np.ndarray  # (M,) log C(R, c), constant in omega


class ToyModel:
    """Ramsey probe dephasing under n unknown frequencies, binomial outcomes."""

    n_nuisance = 0

    def __init__(self, n: int):
        if n < 1:
            raise ModelError("toy model needs at least one frequency")
        self.n = n

    def outcome_prob(self, tau, omega):
        return toy_outcome_prob(tau, omega)

    def prepare(self, records) -> _ToyData:
        tau = np.array([r.tau_us for r in records])
        reps = np.array([r.repetitions for r in records], dtype=float)
        counts = np.array([round(r.y * r.repetitions) for r in records], dtype=float)
        if np.any(counts < 0) or np.any(counts > reps):
            raise ModelError("record outcomes must be fractions of repetitions")
        log_binom = np.array([
            math.lgamma(r + 1) - math.lgamma(c + 1) - math.lgamma(r - c + 1)
            for r, c in zip(reps, counts)
        ])
        return _ToyData(tau=tau, counts=counts, reps=reps, log_binom=log_binom)

    def batch_loglik(self, data: _ToyData, omega: np.ndarray, phi=None):
        """Binomial log-likelihood and its omega-gradient for a (B, n) batch."""
        omega = np.atleast_2d(omega)
        arg = omega[:, None, :] * data.tau[None, :, None]        # (B, M, n)
        p = 0.5 + np.cos(arg).sum(axis=2) / (2.0 * self.n)       # (B, M)
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        ll = (data.log_binom + data.counts * np.log(p)
              + (data.reps - data.counts) * np.log1p(-p)).sum(axis=1)
        dll_dp = data.counts / p - (data.reps - data.counts) / (1.0 - p)   # (B, M)
        dp_dw = -np.sin(arg) * data.tau[None, :, None] / (2.0 * self.n)    # (B, M, n)
        grad = np.einsum("bm,bmn->bn", dll_dp, dp_dw)
        return ll, grad, np.zeros((omega.shape[0], 0))

    def record_loglik(self, record: MeasurementRecord, omega: np.ndarray) -> np.ndarray:
        """Per-hypothesis log-likelihood of one record; used by the particle filter."""
        omega = np.atleast_2d(omega)
        c = round(record.y * record.repetitions)
        p = 0.5 + np.cos(omega * record.tau_us).sum(axis=1) / (2.0 * self.n)
        p = np.clip(p, 1e-300, 1.0 - 1e-16)
        return c * np.log(p) + (record.repetitions - c) * np.log1p(-p)

    def loglik_terms(self, records, omega, phi=None) -> np.ndarray:
        data = self.prepare(records)
        p = np.clip(toy_outcome_prob(data.tau, np.asarray(omega)), 1e-12, 1 - 1e-12)
        return (data.log_binom + data.counts * np.log(p)
                + (data.reps - data.counts) * np.log1p(-p))

    def sample_record(self, rng, tau: float, omega, repetitions: int) -> MeasurementRecord:
        p = toy_outcome_prob(tau, np.asarray(omega, dtype=float))
        c = int(rng.binomial(repetitions, p))
        return MeasurementRecord(tau_us=tau, n_pi=1, repetitions=repetitions, y=c / repetitions)


# ---------------------------------------------------------------------------
# dynamical-decoupling nano-NMR model
# ---------------------------------------------------------------------------


def _spin_term_core(a_z, a_perp, tau, n_pi, omega_l, with_grad: bool, rec_trig=None):
    """Eq.-level evaluation of the single-spin modulation M and its partials.

    The denominator 1 + cos(phi) falls back to the algebraically identical
    half-angle form 2cos^2((alpha+beta)/2) + (1-m_z) sin(alpha) sin(beta)
    wherever the direct form cancels below 1e-12.
    ``rec_trig`` optionally carries precomputed (beta, cos b, sin b, 1-cos b).
    """
    r = a_z + omega_l
    wsq = r * r + a_perp * a_perp
    w = np.sqrt(wsq)
    alpha = w * tau
    if rec_trig is None:
        beta = omega_l * tau
        cb, sb = np.cos(beta), np.sin(beta)
        one_m_cb = 1.0 - cb
    else:
        beta, cb, sb, one_m_cb = rec_trig
    m_z = r / w
    u = (a_perp * a_perp) / wsq                      # m_x^2
    ca, sa = np.cos(alpha), np.sin(alpha)
    sasb = sa * sb
    cos_phi = np.clip(ca * cb - m_z * sasb, -1.0, 1.0)
    denom = 1.0 + cos_phi
    unstable = denom < 1e-12
    if np.any(unstable):
        if np.ndim(denom) == 0:
            half = np.cos(0.5 * (alpha + beta))
            denom = 2.0 * half * half + (1.0 - m_z) * sasb
        else:
            shape = denom.shape
            al = np.broadcast_to(alpha, shape)[unstable]
            be = np.broadcast_to(beta, shape)[unstable]
            mz = np.broadcast_to(m_z, shape)[unstable]
            ss = np.broadcast_to(sasb, shape)[unstable]
            half = np.cos(0.5 * (al + be))
            denom = denom.copy()
            denom[unstable] = 2.0 * half * half + (1.0 - mz) * ss
    inv_den = 1.0 / np.maximum(denom, 1e-300)
    numer = (1.0 - ca) * one_m_cb
    phi = np.arccos(cos_phi)
    nphi = n_pi * phi
    cos_nphi = np.cos(nphi)
    s_term = 0.5 * (1.0 - cos_nphi)                  # sin^2(n_pi phi / 2)
    g = numer * s_term * inv_den
    m_val = np.clip(1.0 - u * g, -1.0, 1.0)
    if not with_grad:
        return m_val

    # sin(n phi)/sin(phi); l'Hopital where sin(phi) ~ 0 (there |cos_phi| = 1)
    s_phi = np.sqrt(np.maximum(1.0 - cos_phi * cos_phi, 0.0))
    ratio = np.sin(nphi) / np.maximum(s_phi, 1e-9)
    small = s_phi < 1e-9
    if np.any(small):
        ratio = np.where(small, n_pi * cos_nphi / np.where(cos_phi < 0, -1.0, 1.0), ratio)
    ds_dc = -0.5 * n_pi * ratio                      # d sin^2(n phi / 2) / d cos(phi)
    dc_da = -sa * cb - m_z * ca * sb
    q = (numer * ds_dc - g) * inv_den                # common factor of dG/dcos(phi)
    dg_da = dc_da * q + sa * one_m_cb * (s_term * inv_den)
    dg_dmz = -sasb * q

    da_daz = tau * m_z
    da_dap = tau * (a_perp / w)
    dmz_daz = u / w
    dmz_dap = -m_z * a_perp / wsq
    du_daz = -2.0 * u * m_z / w
    du_dap = 2.0 * a_perp * m_z * m_z / wsq

    dm_daz = -(du_daz * g + u * (dg_da * da_daz + dg_dmz * dmz_daz))
    dm_dap = -(du_dap * g + u * (dg_da * da_dap + dg_dmz * dmz_dap))
    return m_val, dm_daz, dm_dap


def dd_single_spin_term(a_z, a_perp, tau, n_pi, omega_l):
    """Coherence modulation M(A_k, tau, N_pi) of one nuclear spin, in [-1, 1]."""
    if not np.all(np.asarray(omega_l) > 0):
        raise ModelError("omega_l must be positive")
    a_z = np.asarray(a_z, dtype=float)
    a_perp = np.asarray(a_perp, dtype=float)
    tau = np.asarray(tau, dtype=float)
    out = _spin_term_core(a_z, a_perp, tau, np.asarray(n_pi), np.asarray(omega_l), False)
    if np.any(np.isnan(out)):
        raise ModelError(f"spin term is NaN for a_z={a_z}, a_perp={a_perp}, tau={tau}, "
                         f"n_pi={n_pi}, omega_l={omega_l}")
    return float(out) if out.ndim == 0 else out


def dd_outcome_prob(tau, n_pi, couplings, phi: NuisanceParams, omega_l, eta_stretch: float = 1.0):
    """p(y=0) = (1 + exp(-(N_pi tau / T2)^eta_stretch) * prod_k M_k) / 2."""
    a = np.asarray(couplings, dtype=float)
    if a.ndim != 1 or a.size % 2:
        raise ModelError("couplings must be a flat (A_z, A_perp) interleaved vector")
    tau = np.asarray(tau, dtype=float)
    prod = np.ones_like(tau, dtype=float)
    for k in range(a.size // 2):
        prod = prod * dd_single_spin_term(a[2 * k], a[2 * k + 1], tau, n_pi, omega_l)
    envelope = np.exp(-np.power(n_pi * tau * phi.t2_inv, eta_stretch))
    p0 = 0.5 * (1.0 + envelope * prod)
    p0 = np.clip(p0, 0.0, 1.0)
    return float(p0) if p0.ndim == 0 else p0


@dataclass(frozen=True)
class _DDData:
    tau: np.ndarray      # (1, M, 1) for broadcasting against (B, M, K)
    n_pi: np.ndarray
    y: np.ndarray        # (M,)
    reps: np.ndarray
    seq_time: np.ndarray  # (M,) N_pi * tau
    rec_trig: tuple = None  # (beta, cos beta, sin beta), each (1, M, 1)


class DDModel:
    """Gaussian outcome model for DD spin identification.

    Evaluates batches of candidate coupling vectors A (interleaved
    A_z,1, A_perp,1, ...) against a dataset, with analytic gradients w.r.t.
    A and the nuisances (T2^-1, chi, eta).  The model is exactly symmetric
    under A_perp -> -A_perp and under permutations of the spin blocks.
    """

    n_nuisance = 3

    def __init__(self, k_spins: int, omega_l: float, eta_stretch: float = 1.0):
        if k_spins < 0:
            raise ModelError("spin count must be nonnegative")
        if omega_l <= 0:
            raise ModelError("omega_l must be positive")
        self.k_spins = k_spins
        self.omega_l = float(omega_l)
        self.eta_stretch = float(eta_stretch)

    @property
    def dim(self) -> int:
        return 2 * self.k_spins

    def outcome_prob_zero(self, tau, n_pi, couplings, phi: NuisanceParams):
        return dd_outcome_prob(tau, n_pi, couplings, phi, self.omega_l, self.eta_stretch)

    def prepare(self, records) -> _DDData:
        tau = np.array([r.tau_us for r in records])
        n_pi = np.array([r.n_pi for r in records], dtype=float)
        beta = (self.omega_l * tau)[None, :, None]
        cb = np.cos(beta)
        return _DDData(
            tau=tau[None, :, None],
            n_pi=n_pi[None, :, None],
            y=np.array([r.y for r in records]),
            reps=np.array([r.repetitions for r in records], dtype=float),
            seq_time=n_pi * tau,
            rec_trig=(beta, cb, np.sin(beta), 1.0 - cb),
        )

    def _signal_batch(self, data: _DDData, a: np.ndarray, phi: NuisanceParams, with_grad: bool):
        """Mean outcome p1 = 1 - p0 per (sample, record), plus partials."""
        b = a.shape[0]
        az = a[:, 0::2][:, None, :]      # (B, 1, K)
        ap = a[:, 1::2][:, None, :]
        if with_grad:
            m, dm_daz, dm_dap = _spin_term_core(az, ap, data.tau, data.n_pi, self.omega_l,
                                                True, data.rec_trig)
        else:
            m = _spin_term_core(az, ap, data.tau, data.n_pi, self.omega_l, False, data.rec_trig)
        # leave-one-out products keep gradients finite when some M_k ~ 0
        pad = np.ones((b, m.shape[1], 1))
        left = np.cumprod(np.concatenate([pad, m[:, :, :-1]], axis=2), axis=2)
        right = np.cumprod(np.concatenate([pad, m[:, :, ::-1][:, :, :-1]], axis=2), axis=2)[:, :, ::-1]
        prod = left[:, :, -1] * m[:, :, -1] if m.shape[2] else np.ones((b, data.y.size))
        damp_arg = data.seq_time * phi.t2_inv
        envelope = np.exp(-np.power(damp_arg, self.eta_stretch))           # (M,)
        p1 = 0.5 * (1.0 - envelope[None, :] * prod)
        if not with_grad:
            return np.clip(p1, 0.0, 1.0), None
        loo = left * right                                                 # (B, M, K)
        dp1_daz = -0.5 * envelope[None, :, None] * loo * dm_daz
        dp1_dap = -0.5 * envelope[None, :, None] * loo * dm_dap
        if phi.t2_inv > 0:
            denv = -envelope * self.eta_stretch * np.power(damp_arg, self.eta_stretch) / phi.t2_inv
        else:
            denv = -envelope * data.seq_time if self.eta_stretch == 1.0 else np.zeros_like(envelope)
        dp1_dt2inv = -0.5 * denv[None, :] * prod
        return np.clip(p1, 0.0, 1.0), (dp1_daz, dp1_dap, dp1_dt2inv)

    def batch_loglik(self, data: _DDData, a: np.ndarray, phi: NuisanceParams):
        """Summed Gaussian log-likelihood, dA (B, 2K) and dphi (B, 3)."""
        global _variance_floor_count
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if a.shape[1] != self.dim:
            raise ModelError(f"expected {self.dim} couplings, got {a.shape[1]}")
        p1, partials = self._signal_batch(data, a, phi, True)
        dp1_daz, dp1_dap, dp1_dt2inv = partials
        pq = p1 * (1.0 - p1)
        var = phi.chi * pq + phi.eta ** 2
        floored = var < VARIANCE_FLOOR
        if np.any(floored):
            _variance_floor_count += int(np.count_nonzero(floored))
            var = np.maximum(var, VARIANCE_FLOOR)
        resid = data.y[None, :] - p1
        ll = (-0.5 * (LOG_TWO_PI + np.log(var)) - resid * resid / (2.0 * var)).sum(axis=1)

        dll_dvar = -0.5 / var + resid * resid / (2.0 * var * var)
        dll_dvar = np.where(floored, 0.0, dll_dvar)
        dll_dp1 = resid / var + dll_dvar * phi.chi * (1.0 - 2.0 * p1)      # (B, M)
        grad_a = np.empty_like(a)
        grad_a[:, 0::2] = np.einsum("bm,bmk->bk", dll_dp1, dp1_daz)
        grad_a[:, 1::2] = np.einsum("bm,bmk->bk", dll_dp1, dp1_dap)
        grad_phi = np.stack([
            (dll_dp1 * dp1_dt2inv).sum(axis=1),
            (dll_dvar * pq).sum(axis=1),
            (dll_dvar * 2.0 * phi.eta).sum(axis=1),
        ], axis=1)
        return ll, grad_a, grad_phi

    def loglik_terms(self, records, couplings, phi: NuisanceParams) -> np.ndarray:
        """Per-record log-likelihood values for one coupling vector."""
        terms = np.empty(len(records))
        for t, rec in enumerate(records):
            p0 = self.outcome_prob_zero(rec.tau_us, rec.n_pi, couplings, phi)
            terms[t] = gaussian_outcome_loglik(rec, 1.0 - p0, phi.chi, phi.eta)
        return terms

    def sample_record(self, rng, tau: float, n_pi: int, repetitions: int, couplings,
                      phi: NuisanceParams, eta0: float = 0.0) -> MeasurementRecord:
        """Bernoulli draws plus extra Gaussian readout noise; y counts b = 1."""
        p0 = self.outcome_prob_zero(tau, n_pi, couplings, phi)
        c = int(rng.binomial(repetitions, 1.0 - p0))
        y = c / repetitions + (float(rng.normal(0.0, eta0)) if eta0 > 0 else 0.0)
        return MeasurementRecord(tau_us=tau, n_pi=n_pi, repetitions=repetitions, y=y)


class GaussianLocationModel:
    """y ~ N(theta, noise_std^2) for scalar theta; conjugate test instrument.

    With a Gaussian prior the exact posterior and evidence are closed-form,
    which makes this the oracle model for ELBO and particle-filter checks.
    """

    n_nuisance = 0

    def __init__(self, noise_std: float = 1.0):
        if noise_std <= 0:
            raise ModelError("noise_std must be positive")
        self.noise_std = float(noise_std)

    def prepare(self, records) -> np.ndarray:
        return np.array([r.y for r in records])

    def batch_loglik(self, data: np.ndarray, theta: np.ndarray, phi=None):
        theta = np.atleast_2d(theta)
        var = self.noise_std ** 2
        resid = data[None, :] - theta  # (B, M) via broadcasting, d = 1
        ll = (-0.5 * (LOG_TWO_PI + math.log(var)) - resid * resid / (2.0 * var)).sum(axis=1)
        grad = (resid / var).sum(axis=1, keepdims=True)
        return ll, grad, np.zeros((theta.shape[0], 0))

    def record_loglik(self, record: MeasurementRecord, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)[:, 0]
        return log_gaussian_density(record.y, theta, self.noise_std ** 2)

    def loglik_terms(self, records, theta, phi=None) -> np.ndarray:
        th = float(np.asarray(theta).reshape(-1)[0])
        return np.array([log_gaussian_density(r.y, th, self.noise_std ** 2) for r in records])

    def sample_record(self, rng, tau: float, theta, repetitions: int = 1) -> MeasurementRecord:
        y = float(np.asarray(theta).reshape(-1)[0] + rng.normal(0.0, self.noise_std))
        return MeasurementRecord(tau_us=tau, n_pi=1, repetitions=repetitions, y=y)


def log_joint(records, theta, phi, model) -> float:
    """Compensated sum of per-record log-likelihoods (order-independent)."""
    if not records:
        raise ValueError("dataset must be non-empty")
    terms = model.loglik_terms(records, np.asarray(theta, dtype=float), phi)
    return math.fsum(terms.tolist())
