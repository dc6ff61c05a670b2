"""Mean-field Gaussian variational inference over the flat parameter vector.

The variational family stores a mean and an unconstrained log standard
deviation per parameter. The divergence to the unit Gaussian prior is closed
form; the expected log-likelihood is estimated pathwise (theta = mu + sigma * eps)
with gradients accumulated by the hand-written reverse pass in
:mod:`widebnn.net`.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import net
from .errors import ShapeMismatchError, TrainingDivergedError


@dataclass(frozen=True)
class MeanFieldGaussian:
    """Per-parameter mean and log standard deviation, same layout as the flat theta."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "log_sigma", np.asarray(self.log_sigma, dtype=float))
        if self.mu.shape != self.log_sigma.shape or self.mu.ndim != 1:
            raise ShapeMismatchError("mu and log_sigma must be flat vectors of equal length")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def n_params(self) -> int:
        return self.mu.size


def prior_family(n_params: int) -> MeanFieldGaussian:
    """The variational member that equals the prior exactly."""
    return MeanFieldGaussian(np.zeros(n_params), np.zeros(n_params))


def kl_to_standard_normal(q: MeanFieldGaussian) -> float:
    """Closed-form KL(q, N(0, I)): 0.5 * (|mu|^2 + sum(sig2 - 1 - log sig2))."""
    sig2 = np.exp(2.0 * q.log_sigma)
    return 0.5 * (q.mu @ q.mu + np.sum(sig2 - 1.0 - 2.0 * q.log_sigma))


def sample_reparam(q: MeanFieldGaussian, noise: np.ndarray) -> np.ndarray:
    """theta = mu + sigma * eps, elementwise. noise may be (P,) or (S, P)."""
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1] != q.n_params:
        raise ShapeMismatchError(
            f"noise has trailing dim {noise.shape[-1]}, q has {q.n_params} parameters"
        )
    return q.mu + q.sigma * noise


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str  # "gaussian" | "student_t" | "logistic"
    sigma2: float | None = None
    nu: float | None = None

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.sigma2 is None or self.sigma2 <= 0:
                raise ValueError("gaussian likelihood needs sigma2 > 0")
        elif self.kind == "student_t":
            if self.nu is None or self.nu <= 0:
                raise ValueError("student_t likelihood needs nu > 0")
        elif self.kind != "logistic":
            raise ValueError(f"unknown likelihood kind {self.kind!r}")


def gaussian_likelihood(sigma2: float) -> LikelihoodSpec:
    return LikelihoodSpec("gaussian", sigma2=sigma2)


def student_t_likelihood(nu: float) -> LikelihoodSpec:
    return LikelihoodSpec("student_t", nu=nu)


def logistic_likelihood() -> LikelihoodSpec:
    return LikelihoodSpec("logistic")


def student_t_log_norm(nu: float) -> float:
    """log normalizer of the unit-scale Student-t density."""
    return float(gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * np.log(nu * np.pi))


def _check_binary(y: np.ndarray):
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic likelihood requires binary targets in {0, 1}")


def _loglik_terms(lik: LikelihoodSpec, y: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Pointwise log-density terms, broadcasting f against y."""
    if lik.kind == "gaussian":
        return -0.5 * np.log(2 * np.pi * lik.sigma2) - (y - f) ** 2 / (2 * lik.sigma2)
    if lik.kind == "student_t":
        c = student_t_log_norm(lik.nu)
        return c - (lik.nu + 1) / 2 * np.log1p((f - y) ** 2 / lik.nu)
    _check_binary(y)
    # log p(y=1) = -log(1 + e^-f), log p(y=0) = -log(1 + e^f)
    return -np.logaddexp(0.0, (1.0 - 2.0 * y) * f)


def _loglik_df(lik: LikelihoodSpec, y: np.ndarray, f: np.ndarray) -> np.ndarray:
    """d log p(y|f) / d f, elementwise."""
    if lik.kind == "gaussian":
        return (y - f) / lik.sigma2
    if lik.kind == "student_t":
        r = f - y
        return -(lik.nu + 1) * r / (lik.nu + r * r)
    _check_binary(y)
    return y - 0.5 * (1.0 + np.tanh(0.5 * f))


def log_likelihood(lik: LikelihoodSpec, y: np.ndarray, f: np.ndarray) -> float:
    """Sum of log p(y_n | f_n) over points."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if y.shape != f.shape:
        raise ShapeMismatchError(f"y has shape {y.shape}, f has shape {f.shape}")
    return float(np.sum(_loglik_terms(lik, y, f)))


# ---------------------------------------------------------------------------
# ELBO and its pathwise gradient
# ---------------------------------------------------------------------------

def _sample_logliks(q, arch, X, y, lik, eps) -> np.ndarray:
    """Per-sample data log-likelihood, one value per reparameterized draw."""
    thetas = sample_reparam(q, eps)
    f = net.forward_many(arch, thetas, X)[:, :, 0]
    return _loglik_terms(lik, y[None, :], f).sum(axis=1)


def elbo_value_given_noise(q, arch, X, y, lik, eps, total_n: int | None = None) -> float:
    """Deterministic ELBO estimate for fixed reparameterization noise.

    The likelihood term is scaled by total_n / batch size so mini-batch
    estimates stay unbiased for the full objective.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    kl = kl_to_standard_normal(q)
    if y.size == 0:
        return -kl
    scale = 1.0 if total_n is None else total_n / y.size
    return scale * float(np.mean(_sample_logliks(q, arch, X, y, lik, eps))) - kl


def elbo_and_grad_given_noise(q, arch, X, y, lik, eps, total_n: int | None = None):
    """ELBO estimate plus its exact gradient for the given noise draws.

    Returns (elbo, ell_scaled, kl, grad_mu, grad_log_sigma) where
    elbo = ell_scaled - kl. The KL part of the gradient is closed form; the
    likelihood part flows through the reverse pass of the network.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    kl = kl_to_standard_normal(q)
    sig2 = np.exp(2.0 * q.log_sigma)
    g_mu_kl = q.mu
    g_ls_kl = sig2 - 1.0

    if y.size == 0:
        return -kl, 0.0, kl, -g_mu_kl, -g_ls_kl

    scale = 1.0 if total_n is None else total_n / y.size
    S = eps.shape[0]
    thetas = sample_reparam(q, eps)
    f, cache = net.forward_with_cache(arch, thetas, X)
    terms = _loglik_terms(lik, y[None, :], f[:, :, 0])
    ell = scale * float(terms.sum()) / S

    df = _loglik_df(lik, y[None, :], f[:, :, 0])[:, :, None] * (scale / S)
    per_sample = net.backward_from_cache(arch, cache, df)
    g_theta = per_sample.sum(axis=0)
    # pathwise chain rule: d theta / d mu = 1, d theta / d log_sigma = sigma * eps
    g_theta_ls = (per_sample * eps).sum(axis=0) * q.sigma
    return ell - kl, ell, kl, g_theta - g_mu_kl, g_theta_ls - g_ls_kl


def elbo_estimate(q, arch, dataset, lik, n_samples: int, rng: np.random.Generator):
    """Monte-Carlo ELBO over the full dataset: (estimate, standard error).

    The standard error covers the likelihood draws only; the KL term is exact.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    kl = kl_to_standard_normal(q)
    y = np.asarray(dataset.y, dtype=float)
    if y.size == 0:
        return -kl, 0.0
    eps = rng.standard_normal((n_samples, q.n_params))
    logliks = _sample_logliks(q, arch, np.asarray(dataset.X, dtype=float), y, lik, eps)
    se = float(np.std(logliks, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(np.mean(logliks)) - kl, se


def elbo_gradient(q, arch, X, y, lik, n_samples: int, rng: np.random.Generator,
                  total_n: int | None = None):
    """Unbiased pathwise gradient of the (batch-scaled) ELBO.

    Returns (grad_mu, grad_log_sigma).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    eps = rng.standard_normal((n_samples, q.n_params))
    _, _, _, g_mu, g_ls = elbo_and_grad_given_noise(q, arch, X, y, lik, eps, total_n)
    return g_mu, g_ls


# ---------------------------------------------------------------------------
# Initialization and the closed-form output bias
# ---------------------------------------------------------------------------

def init_variational(arch, nu: float, rng: np.random.Generator) -> MeanFieldGaussian:
    """Random start: mu ~ N(0,1) and sigma^2 ~ InvGamma(nu+1, nu), so E[sigma^2] = 1.

    Under this start each parameter has marginal mean 0 and variance 2.
    """
    if nu <= 1:
        raise ValueError("nu must be > 1")
    n = net.param_count(arch)
    mu = rng.standard_normal(n)
    # reciprocal of a Gamma(shape nu+1, rate nu) draw
    sigma2 = 1.0 / rng.gamma(shape=nu + 1.0, scale=1.0 / nu, size=n)
    return MeanFieldGaussian(mu, 0.5 * np.log(sigma2))


def optimal_output_bias(y: np.ndarray, sigma2: float) -> tuple[float, float]:
    """Closed-form ELBO-optimal Gaussian over the output bias, all else at the prior.

    mu_b = sum(y) / (N + sigma2), sigma2_b = sigma2 / (N + sigma2).
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("optimal_output_bias needs at least one observation")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    n = y.size
    return float(y.sum() / (n + sigma2)), float(sigma2 / (n + sigma2))


def bias_only_elbo(y: np.ndarray, sigma2: float, mu_b: float, sigma2_b: float) -> float:
    """Exact ELBO terms that depend on the output-bias distribution alone.

    Terms independent of (mu_b, sigma2_b) are dropped, so only differences
    of this function are meaningful.
    """
    y = np.asarray(y, dtype=float)
    fit = -np.sum((y - mu_b) ** 2 + sigma2_b) / (2 * sigma2)
    kl_b = 0.5 * (mu_b**2 + sigma2_b - 1.0 - np.log(sigma2_b))
    return float(fit - kl_b)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 100
    learning_rate: float = 0.001
    momentum: float = 0.9
    mc_samples: int = 16
    grad_clip_norm: float = 10.0
    cosine_restart_period: int = 500
    init_nu: float = 100.0
    seed: int = 0

    def __post_init__(self):
        for name in ("steps", "batch_size", "mc_samples", "cosine_restart_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("learning_rate", "momentum", "grad_clip_norm", "init_nu"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def desk_train_config(**overrides) -> TrainConfig:
    """Short preset (5000 steps) that keeps a single fit to minutes at desk widths."""
    overrides.setdefault("steps", 5000)
    return TrainConfig(**overrides)


HISTORY_CSV_HEADER = "step,elbo,kl,ell,grad_norm,lr"


@dataclass
class TrainHistory:
    step: np.ndarray
    elbo: np.ndarray
    kl: np.ndarray
    ell: np.ndarray
    grad_norm: np.ndarray
    lr: np.ndarray
    config: TrainConfig = field(default=None)

    def to_csv(self, path_or_buf) -> None:
        buf = io.StringIO()
        buf.write(HISTORY_CSV_HEADER + "\n")
        for i in range(self.step.size):
            buf.write(
                f"{int(self.step[i])},{self.elbo[i]!r},{self.kl[i]!r},"
                f"{self.ell[i]!r},{self.grad_norm[i]!r},{self.lr[i]!r}\n"
            )
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(buf.getvalue())
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(buf.getvalue())


def cosine_restart_lr(base_lr: float, step: int, period: int) -> float:
    """Cosine decay from base_lr to 0 over each period, restarting at full value."""
    phase = (step % period) / period
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * phase))


def train(arch, dataset, lik, cfg: TrainConfig):
    """SGD with momentum on (mu, log_sigma), maximizing the ELBO.

    Mini-batches are drawn uniformly without replacement each step (full
    batch when the dataset is small), the likelihood term is rescaled by
    N / batch_size, gradients are clipped in global norm, and the learning
    rate follows cosine annealing with warm restarts. Deterministic given
    cfg.seed; raises TrainingDivergedError (with the step index) if the
    objective goes non-finite.
    """
    if arch.d_out != 1:
        raise ShapeMismatchError("training expects scalar outputs (d_out == 1)")
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    n = y.size
    if n == 0:
        raise ValueError("dataset is empty")
    batch = min(cfg.batch_size, n)

    rng = np.random.default_rng(cfg.seed)
    q = init_variational(arch, cfg.init_nu, rng)
    mu = q.mu.copy()
    log_sigma = q.log_sigma.copy()
    v_mu = np.zeros_like(mu)
    v_ls = np.zeros_like(log_sigma)

    hist = TrainHistory(
        step=np.arange(cfg.steps),
        elbo=np.empty(cfg.steps),
        kl=np.empty(cfg.steps),
        ell=np.empty(cfg.steps),
        grad_norm=np.empty(cfg.steps),
        lr=np.empty(cfg.steps),
        config=cfg,
    )

    for step in range(cfg.steps):
        lr = cosine_restart_lr(cfg.learning_rate, step, cfg.cosine_restart_period)
        if batch < n:
            idx = rng.choice(n, size=batch, replace=False)
            Xb, yb = X[idx], y[idx]
        else:
            Xb, yb = X, y
        eps = rng.standard_normal((cfg.mc_samples, mu.size))
        qs = MeanFieldGaussian(mu, log_sigma)
        elbo, ell, kl, g_mu, g_ls = elbo_and_grad_given_noise(
            qs, arch, Xb, yb, lik, eps, total_n=n
        )
        if not np.isfinite(elbo):
            raise TrainingDivergedError(step)

        gnorm = float(np.sqrt(g_mu @ g_mu + g_ls @ g_ls))
        if gnorm > cfg.grad_clip_norm:
            fac = cfg.grad_clip_norm / gnorm
            g_mu = g_mu * fac
            g_ls = g_ls * fac
        v_mu = cfg.momentum * v_mu + g_mu
        v_ls = cfg.momentum * v_ls + g_ls
        mu = mu + lr * v_mu
        log_sigma = log_sigma + lr * v_ls

        hist.elbo[step] = elbo
        hist.kl[step] = kl
        hist.ell[step] = ell
        hist.grad_norm[step] = gnorm
        hist.lr[step] = lr

    return MeanFieldGaussian(mu, log_sigma), hist


# ---------------------------------------------------------------------------
# Predictive moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictiveMoments:
    """Per-point Monte-Carlo moments of the predictive, with standard errors."""

    mean: np.ndarray
    second_moment: np.ndarray
    variance: np.ndarray
    mean_se: np.ndarray
    second_moment_se: np.ndarray
    variance_se: np.ndarray
    n_samples: int


def _sample_chunks(n_samples: int, n_params: int, max_elems: int = 8_000_000):
    """Chunk sizes so the (chunk, P) noise blocks stay within a memory budget.

    Chunked draws from one generator concatenate to the same stream as a
    single big draw, so results are independent of the chunking.
    """
    chunk = max(1, min(n_samples, max_elems // max(n_params, 1)))
    done = 0
    while done < n_samples:
        step = min(chunk, n_samples - done)
        yield step
        done += step


def predictive_moments(q, arch, X, n_samples: int, rng: np.random.Generator,
                       noise: np.ndarray | None = None) -> PredictiveMoments:
    """Monte-Carlo mean/second moment/variance of f(x) under q at each row of X.

    Arrays have shape (N, d_out). Mean and second-moment errors are the
    analytic standard errors of the sample averages; the variance error is a
    jackknife over the draws. Pass explicit noise to reuse draws across
    calls (common random numbers).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    X = np.asarray(X, dtype=float)
    if noise is None:
        parts = []
        for step in _sample_chunks(n_samples, q.n_params):
            eps = rng.standard_normal((step, q.n_params))
            parts.append(net.forward_many(arch, sample_reparam(q, eps), X))
        f = np.concatenate(parts, axis=0)
    else:
        f = net.forward_many(arch, sample_reparam(q, noise), X)
    s = f.shape[0]
    mean = f.mean(axis=0)
    f2 = f * f
    second = f2.mean(axis=0)
    variance = second - mean**2
    mean_se = f.std(axis=0, ddof=1) / np.sqrt(s)
    second_se = f2.std(axis=0, ddof=1) / np.sqrt(s)

    # jackknife the plug-in variance estimator
    sum_f = f.sum(axis=0)
    sum_f2 = f2.sum(axis=0)
    mean_loo = (sum_f - f) / (s - 1)
    second_loo = (sum_f2 - f2) / (s - 1)
    var_loo = second_loo - mean_loo**2
    var_se = np.sqrt((s - 1) / s * np.sum((var_loo - var_loo.mean(axis=0)) ** 2, axis=0))

    return PredictiveMoments(mean, second, variance, mean_se, second_se, var_se, s)


def predictive_mean_gap_to_prior(q, arch, X, n_samples: int, rng: np.random.Generator):
    """Common-random-numbers estimate of E_q[f(x)] - E_prior[f(x)] per point.

    The same noise draws drive q and the prior, which collapses the
    Monte-Carlo variance when q is close to the prior (and makes the
    estimate exactly zero when q equals it). Returns (diff, se), each of
    shape (N, d_out).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    X = np.asarray(X, dtype=float)
    total = None
    total_sq = None
    for step in _sample_chunks(n_samples, q.n_params):
        eps = rng.standard_normal((step, q.n_params))
        d = net.forward_many(arch, sample_reparam(q, eps), X) - net.forward_many(arch, eps, X)
        s1 = d.sum(axis=0)
        s2 = (d * d).sum(axis=0)
        total = s1 if total is None else total + s1
        total_sq = s2 if total_sq is None else total_sq + s2
    mean = total / n_samples
    var = (total_sq - n_samples * mean**2) / (n_samples - 1)
    return mean, np.sqrt(np.maximum(var, 0.0) / n_samples)


def constrain_kl(q: MeanFieldGaussian, kl_target: float, tol: float = 1e-10) -> MeanFieldGaussian:
    """Shrink (mu, log_sigma) toward the prior until KL(q, P) <= kl_target.

    Used to generate random variational members with a controlled divergence.
    Scaling both vectors by t in [0, 1] moves KL continuously and
    monotonically from 0 to its original value, so bisection suffices.
    """
    if kl_to_standard_normal(q) <= kl_target:
        return q
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        qq = MeanFieldGaussian(mid * q.mu, mid * q.log_sigma)
        if kl_to_standard_normal(qq) > kl_target:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol:
            break
    return MeanFieldGaussian(lo * q.mu, lo * q.log_sigma)
