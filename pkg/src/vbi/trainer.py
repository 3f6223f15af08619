"""Monte-Carlo ELBO estimation and stochastic training of the posterior ansatz.

One training step draws a batch of reparameterized samples from the flow,
scores prior + regularizer + likelihood - entropy on that same batch, and
follows the pathwise gradient with ADAM under an exponentially decaying
learning-rate schedule.  Nuisance parameters ride along in the same update
(maximum expected likelihood); the regularizer scale sigma may too.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import flows
from .errors import DegenerateAnsatzWarning, TrainingDiverged
from .likelihoods import NuisanceParams
from .probcore import LOG_TWO_PI, RngStream, softplus, softplus_inv

REG_NONE = "none"
REG_L1 = "l1"
REG_L2 = "l2"
_REG_KINDS = (REG_NONE, REG_L1, REG_L2)


@dataclass(frozen=True)
class RegularizerSpec:
    """Sparsifying prior factor: Laplace (l1), Gaussian (l2), or none."""

    kind: str = REG_NONE
    sigma: float = 1.0
    trainable: bool = False

    def __post_init__(self):
        if self.kind not in _REG_KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.kind != REG_NONE and not self.sigma > 0:
            raise ValueError("regularizer scale must be positive")


def log_regularizer(theta, spec: RegularizerSpec) -> float:
    """Log of the regularizing prior factor at theta.

    l1: -d ln(2 sigma) - |theta|_1 / sigma
    l2: -(d/2) ln(2 pi sigma^2) - |theta|_2^2 / (2 sigma^2)
    """
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[-1]
    if spec.kind == REG_NONE:
        return 0.0 if theta.ndim == 1 else np.zeros(theta.shape[0])
    if spec.sigma <= 0:
        raise ValueError("regularizer scale must be positive")
    if spec.kind == REG_L1:
        out = -d * math.log(2.0 * spec.sigma) - np.abs(theta).sum(axis=-1) / spec.sigma
    else:
        out = (-0.5 * d * math.log(2.0 * math.pi * spec.sigma ** 2)
               - (theta * theta).sum(axis=-1) / (2.0 * spec.sigma ** 2))
    return float(out) if np.ndim(out) == 0 else out


def _regularizer_terms(theta2d: np.ndarray, kind: str, sigma: float):
    """Batched value, d/dtheta, and d/dsigma of the log regularizer."""
    b, d = theta2d.shape
    if kind == REG_NONE:
        return np.zeros(b), np.zeros_like(theta2d), np.zeros(b)
    if kind == REG_L1:
        l1 = np.abs(theta2d).sum(axis=1)
        val = -d * math.log(2.0 * sigma) - l1 / sigma
        dtheta = -np.sign(theta2d) / sigma
        dsigma = -d / sigma + l1 / sigma ** 2
    else:
        l2 = (theta2d * theta2d).sum(axis=1)
        val = -0.5 * d * math.log(2.0 * math.pi * sigma ** 2) - l2 / (2.0 * sigma ** 2)
        dtheta = -theta2d / sigma ** 2
        dsigma = -d / sigma + l2 / sigma ** 3
    return val, dtheta, dsigma


# ---------------------------------------------------------------------------
# priors over the physical parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorSpec:
    """Prior over theta plus the (optional) map from flow space to model space.

    kinds:
      * ``improper``  -- log pi = 0 everywhere, identity map.
      * ``box``       -- flat inside [low, high]; flow samples are squashed into
                         the box by a smooth softplus clamp before the model
                         sees them, so the log-prior contribution stays 0.
      * ``gaussian``  -- independent N(mean, var) factors, identity map.
    """

    kind: str = "improper"
    low: np.ndarray | None = None
    high: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    sharpness: float = 60.0

    def transform(self, theta: np.ndarray) -> np.ndarray:
        if self.kind != "box":
            return theta
        k = self.sharpness
        lo, hi = np.asarray(self.low, dtype=float), np.asarray(self.high, dtype=float)
        return lo + (softplus(k * (theta - lo)) - softplus(k * (theta - hi))) / k

    def transform_grad(self, theta: np.ndarray) -> np.ndarray:
        if self.kind != "box":
            return np.ones_like(theta)
        k = self.sharpness
        lo, hi = np.asarray(self.low, dtype=float), np.asarray(self.high, dtype=float)
        sig = lambda x: 1.0 / (1.0 + np.exp(-x))
        return sig(k * (theta - lo)) - sig(k * (theta - hi))

    def log_density_terms(self, theta2d: np.ndarray):
        """(value, d/dtheta) of log pi on the (already transformed) samples."""
        if self.kind == "gaussian":
            mean = np.asarray(self.mean, dtype=float)
            var = np.asarray(self.var, dtype=float)
            resid = theta2d - mean
            val = (-0.5 * (LOG_TWO_PI + np.log(var)) - resid * resid / (2.0 * var)).sum(axis=1)
            return val, -resid / var
        return np.zeros(theta2d.shape[0]), np.zeros_like(theta2d)

    def init_box(self, d: int):
        """Default initialization box for the flow location parameters."""
        if self.kind == "box":
            return np.broadcast_to(self.low, (d,)), np.broadcast_to(self.high, (d,))
        if self.kind == "gaussian":
            m = np.broadcast_to(self.mean, (d,)).astype(float)
            s = np.sqrt(np.broadcast_to(self.var, (d,)).astype(float))
            return m - 2 * s, m + 2 * s
        return None


# ---------------------------------------------------------------------------
# ELBO estimator
# ---------------------------------------------------------------------------


@dataclass
class ElboEstimate:
    value: float
    grad_flow: np.ndarray
    grad_phi: np.ndarray        # w.r.t. the positive nuisance values
    grad_sigma: float           # w.r.t. the regularizer scale
    per_sample: np.ndarray = field(repr=False, default=None)


def estimate_elbo(params: flows.FlowParameters, data, model, prior: PriorSpec,
                  reg: RegularizerSpec, batch: int, rng: RngStream, *,
                  phi: NuisanceParams | None = None,
                  reg_sigma: float | None = None) -> ElboEstimate:
    """Single-batch pathwise estimate of the regularized ELBO and its gradients.

    The same theta-batch feeds likelihood, prior, regularizer and entropy
    terms.  ``data`` is the model's prepared dataset.  ``reg_sigma`` overrides
    the spec's scale (used while sigma is being trained).
    """
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    sigma = reg.sigma if reg_sigma is None else reg_sigma
    theta_raw, log_q, cache = flows.sample_batch(params, batch, rng)
    theta = prior.transform(theta_raw)
    squash_grad = prior.transform_grad(theta_raw)

    loglik, dll_dtheta, dll_dphi = model.batch_loglik(
        data, theta, phi) if model.n_nuisance else model.batch_loglik(data, theta)
    logpi, dpi_dtheta = prior.log_density_terms(theta)
    logr, dr_dtheta, dr_dsigma = _regularizer_terms(theta, reg.kind, sigma)

    per_sample = logpi + logr + loglik - log_q
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.argmax(~np.isfinite(per_sample)))
        parts = {"log_pi": logpi[bad], "log_r": logr[bad],
                 "log_lik": loglik[bad], "log_q": log_q[bad]}
        term = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite ELBO for sample {bad} ({term})")
    value = float(per_sample.mean())

    dtheta_raw = (dll_dtheta + dpi_dtheta + dr_dtheta) * squash_grad / batch
    dlogq = -np.ones(batch) / batch
    grad_flow = flows.backward_batch(cache, dtheta_raw, dlogq, params)
    grad_phi = dll_dphi.mean(axis=0) if model.n_nuisance else np.zeros(0)
    grad_sigma = float(dr_dsigma.mean())
    return ElboEstimate(value=value, grad_flow=grad_flow, grad_phi=grad_phi,
                        grad_sigma=grad_sigma, per_sample=per_sample)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 128
    steps: int = 8192
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    prior: PriorSpec = field(default_factory=PriorSpec)
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    init_low: np.ndarray | None = None    # init box for mu; defaults from prior
    init_high: np.ndarray | None = None
    phi0: NuisanceParams = field(default_factory=NuisanceParams)
    reg_sigma0: float = 1e-2              # sigma init when trainable
    phi_lr_scale: float = 1.0             # nuisance/sigma step multiplier
    snapshot_every: int = 0
    divergence_drop: float = 1e6

    def __post_init__(self):
        if self.batch < 1 or self.steps < 1:
            raise ValueError("batch and steps must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")

    def learning_rate(self, step: int) -> float:
        """lr(i) = lr_start * (lr_end / lr_start)^((i-1)/(I-1)), 1-based step."""
        if self.steps == 1:
            return self.lr_start
        frac = (step - 1) / (self.steps - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


@dataclass
class TrainTrace:
    elbo: np.ndarray
    lr: np.ndarray
    phi: np.ndarray              # (I, 3) transformed nuisance values
    reg_sigma: np.ndarray        # (I,)
    wall_time: float = 0.0
    snapshots: list = field(default_factory=list)

    def smoothed_elbo(self, window: int | None = None) -> float:
        n = self.elbo.size
        w = window or max(1, n // 10)
        return float(np.mean(self.elbo[n - min(w, n):]))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,elbo,lr,t2_inv,chi,eta,reg_sigma\n")
            for i in range(self.elbo.size):
                fh.write(f"{i + 1},{float(self.elbo[i])!r},{float(self.lr[i])!r},"
                         f"{float(self.phi[i, 0])!r},{float(self.phi[i, 1])!r},"
                         f"{float(self.phi[i, 2])!r},{float(self.reg_sigma[i])!r}\n")


_PHI_RAW_FLOOR = -40.0  # softplus^-1 of ~4e-18; keeps raw values finite


def _phi_to_raw(phi: NuisanceParams) -> np.ndarray:
    vals = np.maximum(phi.as_array(), 1e-12)
    return np.asarray(softplus_inv(vals), dtype=float)


def _raw_to_phi(raw: np.ndarray) -> NuisanceParams:
    vals = softplus(raw)
    return NuisanceParams(t2_inv=float(vals[0]), chi=float(vals[1]), eta=float(vals[2]))


def default_init(spec: flows.AnsatzSpec, low, high, rng: RngStream) -> flows.FlowParameters:
    """Spread-location, narrow-scale start inside the given box.

    Locations are drawn uniformly over the central 80% of the box (a shared
    center would be a stationary point of permutation-invariant likelihoods);
    scales start at a tenth of the box width.
    """
    low = np.broadcast_to(np.asarray(low, dtype=float), (spec.d,))
    high = np.broadcast_to(np.asarray(high, dtype=float), (spec.d,))
    width = high - low
    mu0 = rng.uniform(low + 0.1 * width, high - 0.1 * width)
    return flows.init_flow_parameters(spec, mu0, width / 10.0, rng)


def train(config: TrainConfig, dataset, model, ansatz_spec: flows.AnsatzSpec):
    """Run ADAM on (lambda, phi, optionally sigma); deterministic given seed.

    Returns (FlowParameters, NuisanceParams, TrainTrace).  Raises
    :class:`TrainingDiverged` if the ELBO falls more than
    ``config.divergence_drop`` below its initial value.
    """
    rng = RngStream(config.seed)
    init_rng, _ = rng.split(2)
    box = (config.init_low, config.init_high)
    if box[0] is None or box[1] is None:
        box = config.prior.init_box(ansatz_spec.d)
        if box is None:
            box = (-np.ones(ansatz_spec.d), np.ones(ansatz_spec.d))
    params = default_init(ansatz_spec, box[0], box[1], init_rng)
    return train_from(config, dataset, model, params)


def train_from(config: TrainConfig, dataset, model, init_params: flows.FlowParameters):
    """Training loop starting from explicit initial flow parameters."""
    t_start = time.perf_counter()
    rng = RngStream(config.seed)
    _, step_rng = rng.split(2)
    params = init_params

    data = model.prepare(dataset)
    n_flow = params.n_parameters
    train_phi = model.n_nuisance > 0
    train_sigma = config.regularizer.trainable and config.regularizer.kind != REG_NONE

    vec = params.to_vector()
    phi_raw = _phi_to_raw(config.phi0) if train_phi else np.zeros(0)
    sigma_raw = np.array([softplus_inv(config.reg_sigma0)]) if train_sigma else np.zeros(0)
    x = np.concatenate([vec, phi_raw, sigma_raw])

    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = TrainTrace(elbo=np.zeros(config.steps), lr=np.zeros(config.steps),
                       phi=np.zeros((config.steps, 3)), reg_sigma=np.zeros(config.steps))
    elbo0 = None

    for i in range(1, config.steps + 1):
        params = params.from_vector(x[:n_flow])
        phi = _raw_to_phi(x[n_flow:n_flow + 3]) if train_phi else None
        sigma = float(softplus(x[-1])) if train_sigma else config.regularizer.sigma
        est = estimate_elbo(params, data, model, config.prior, config.regularizer,
                            config.batch, step_rng, phi=phi, reg_sigma=sigma)

        grad = np.empty_like(x)
        grad[:n_flow] = est.grad_flow
        if train_phi:
            # chain through softplus to the unconstrained nuisance storage
            raw = x[n_flow:n_flow + 3]
            grad[n_flow:n_flow + 3] = est.grad_phi / (1.0 + np.exp(-raw))
        if train_sigma:
            grad[-1] = est.grad_sigma / (1.0 + math.exp(-x[-1]))

        lr = config.learning_rate(i)
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
        mhat = m / (1.0 - config.beta1 ** i)
        vhat = v / (1.0 - config.beta2 ** i)
        step = lr * mhat / (np.sqrt(vhat) + config.eps)
        if config.phi_lr_scale != 1.0 and x.size > n_flow:
            # softplus-raw nuisances travel far from their near-zero inits;
            # give them larger steps than the already-localized flow parameters
            step[n_flow:] *= config.phi_lr_scale
        x = x + step  # ascent on the ELBO

        trace.elbo[i - 1] = est.value
        trace.lr[i - 1] = lr
        trace.phi[i - 1] = phi.as_array() if train_phi else 0.0
        trace.reg_sigma[i - 1] = sigma
        if config.snapshot_every and i % config.snapshot_every == 0:
            trace.snapshots.append((i, x[:n_flow].copy()))
        if elbo0 is None:
            elbo0 = est.value
        elif est.value < elbo0 - config.divergence_drop:
            trace.elbo = trace.elbo[:i]
            trace.lr = trace.lr[:i]
            trace.phi = trace.phi[:i]
            trace.reg_sigma = trace.reg_sigma[:i]
            trace.wall_time = time.perf_counter() - t_start
            raise TrainingDiverged(i, est.value, trace)

    params = params.from_vector(x[:n_flow])
    phi = _raw_to_phi(x[n_flow:n_flow + 3]) if train_phi else NuisanceParams()
    trace.wall_time = time.perf_counter() - t_start
    if train_sigma:
        trace.reg_sigma[-1] = float(softplus(x[-1]))
    return params, phi, trace


# ---------------------------------------------------------------------------
# surrogate information gain
# ---------------------------------------------------------------------------


def surrogate_information_gain(x_control, params: flows.FlowParameters, model,
                               n_y: int, n_theta: int, rng: RngStream, *,
                               prior: PriorSpec | None = None,
                               phi: NuisanceParams | None = None,
                               repetitions: int = 1) -> float:
    """Monte-Carlo E_y{ Var_theta[ log p(y | x, theta) ] } under the ansatz.

    Outcomes y are drawn from the posterior predictive: theta' ~ q, then one
    simulated record at the candidate control.  Returns 0 (with a
    DegenerateAnsatzWarning) when the ansatz has collapsed to a point.
    """
    if n_theta < 2:
        raise ValueError("variance needs n_theta >= 2")
    if n_y < 2:
        raise ValueError("need n_y >= 2 predictive draws")
    prior = prior or PriorSpec()
    theta_rng, y_rng = rng.split(2)
    thetas, _, _ = flows.sample_batch(params, n_theta, theta_rng)
    thetas = prior.transform(thetas)
    if float(np.max(thetas.std(axis=0))) < 1e-12:
        warnings.warn("ansatz spread is numerically zero; SIG = 0", DegenerateAnsatzWarning)
        return 0.0
    pred_thetas, _, _ = flows.sample_batch(params, n_y, y_rng)
    pred_thetas = prior.transform(pred_thetas)

    variances = np.empty(n_y)
    for j in range(n_y):
        record = _simulate_at(model, x_control, pred_thetas[j], phi, repetitions, y_rng)
        if hasattr(model, "record_loglik"):
            ll = model.record_loglik(record, thetas)
        else:
            eval_phi = phi or NuisanceParams()
            ll = np.array([model.loglik_terms([record], th, eval_phi).sum() for th in thetas])
        variances[j] = float(np.var(ll, ddof=1))
    return float(variances.mean())


def _simulate_at(model, x_control, theta, phi, repetitions, rng):
    if hasattr(model, "outcome_prob_zero"):
        tau, n_pi = x_control if isinstance(x_control, tuple) else (x_control, 32)
        return model.sample_record(rng, tau, n_pi, repetitions, theta,
                                   phi or NuisanceParams())
    return model.sample_record(rng, float(x_control), theta, repetitions)
