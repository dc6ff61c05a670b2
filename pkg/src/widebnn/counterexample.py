"""The non-odd-activation construction where the posterior keeps the data.

For activations whose even part is not constant (relu above all), the mean
post-activation of the final hidden layer varies with the input. Shifting
every output weight mean by sqrt(scale / M) turns that variation into a
predictive mean of sqrt(scale) * m(x) at divergence cost scale / 2, and a
two-point dataset placed on that curve (with noise 1 / scale) makes the
shifted family beat every near-constant predictor. Odd activations admit no
such dataset, and this module also builds the matching family showing their
O(M^{-1/2}) mean rate is not improvable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import data, mfvi, net, nngp
from .errors import ActivationError, ShapeMismatchError
from .net import Architecture

SEPARATION_TOL = 1e-9

# the two-point construction of record: relu, one hidden layer, noise 2.34e-3
DEFAULT_NOISE_VAR = 2.34e-3


@dataclass(frozen=True)
class CounterexampleSpec:
    """Inputs of the constructed dataset.

    scale sets the divergence budget (the shifted family is scale/2 from the
    prior) and the noise variance of the induced likelihood is 1/scale. The
    two inputs must separate the mean post-activation; odd activations never
    do, which is exactly the point.
    """

    arch: Architecture
    scale: float
    x: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "x2", np.atleast_1d(np.asarray(self.x2, dtype=float)))
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        for v in (self.x, self.x2):
            if v.shape != (self.arch.d_in,):
                raise ShapeMismatchError(f"inputs must have shape ({self.arch.d_in},)")
        if self.separation <= SEPARATION_TOL:
            raise ActivationError(
                "activation/inputs give no even-part separation "
                f"(|m(x) - m(x')| = {self.separation:.3e})"
            )

    @property
    def mean_postactivations(self) -> tuple[float, float]:
        return (
            nngp.mean_postactivation(self.arch, self.x),
            nngp.mean_postactivation(self.arch, self.x2),
        )

    @property
    def separation(self) -> float:
        a, b = self.mean_postactivations
        return abs(a - b)


def default_spec(width: int = 1024, noise_var: float = DEFAULT_NOISE_VAR) -> CounterexampleSpec:
    """relu, L=1, inputs 0 and 1, scale = 1/noise_var: the dataset of record."""
    arch = Architecture(depth_L=1, width_M=width, d_in=1, d_out=1,
                        activation=net.activation("relu"))
    return CounterexampleSpec(arch=arch, scale=1.0 / noise_var,
                              x=np.array([0.0]), x2=np.array([1.0]))


def spiked_output_distribution(arch: Architecture, scale: float) -> mfvi.MeanFieldGaussian:
    """Prior everywhere except the output weights, whose means are sqrt(scale/M).

    Its divergence to the prior is exactly scale / 2.
    """
    if scale <= 0:
        raise ValueError("scale must be > 0")
    if arch.d_out != 1:
        raise ShapeMismatchError("the spiked family is defined for a single output unit")
    mu = np.zeros(net.param_count(arch))
    segs = net.unpack(arch, mu)
    segs[f"W{arch.depth_L + 1}"][...] = math.sqrt(scale / arch.width_M)
    return mfvi.MeanFieldGaussian(mu, np.zeros_like(mu))


def build_counterexample_dataset(spec: CounterexampleSpec) -> data.Dataset:
    """Two points on the spiked family's limiting mean curve, noise 1/scale."""
    m1, m2 = spec.mean_postactivations
    root = math.sqrt(spec.scale)
    return data.Dataset(
        X=np.stack([spec.x, spec.x2]),
        y=np.array([root * m1, root * m2]),
        name="counterexample",
        noise_sigma2=1.0 / spec.scale,
    )


def mean_gap_lower_bound(scale: float, sigma2: float, beta: float,
                         kappa_x: float, kappa_x2: float) -> float:
    """Asymptotic floor on the trained mean gap between the two inputs.

    sqrt(scale) * beta / sqrt(2) - sqrt(2) * sqrt(sigma2 * scale + kappa_x +
    kappa_x2 + beta^2); may be negative (vacuous) for small scale. beta is
    any value with |m(x) - m(x')| >= beta / sqrt(2) and kappa the limiting
    predictive variances.
    """
    if min(scale, sigma2, beta, kappa_x, kappa_x2) < 0:
        raise ValueError("all inputs must be >= 0")
    return math.sqrt(scale) * beta / math.sqrt(2.0) - math.sqrt(2.0) * math.sqrt(
        sigma2 * scale + kappa_x + kappa_x2 + beta * beta
    )


@dataclass(frozen=True)
class CounterexampleRow:
    width: int
    gap: float
    gap_se: float
    elbo_trained: float
    elbo_spiked: float
    elbo_prior_optbias: float


@dataclass(frozen=True)
class CounterexampleReport:
    rows: tuple[CounterexampleRow, ...]
    threshold: float
    ideal_gap: float
    passed: bool

    def to_csv(self, path_or_buf) -> None:
        lines = ["width,gap,elbo_trained,elbo_qc,elbo_prior_optbias"]
        for r in self.rows:
            lines.append(
                f"{r.width},{r.gap!r},{r.elbo_trained!r},{r.elbo_spiked!r},"
                f"{r.elbo_prior_optbias!r}"
            )
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


def _prior_with_optimal_bias(arch: Architecture, dataset) -> mfvi.MeanFieldGaussian:
    mu_b, s2_b = mfvi.optimal_output_bias(dataset.y, dataset.noise_sigma2)
    mu = np.zeros(net.param_count(arch))
    ls = np.zeros_like(mu)
    if arch.include_final_bias:
        segs_mu = net.unpack(arch, mu)
        segs_ls = net.unpack(arch, ls)
        segs_mu[f"b{arch.depth_L + 1}"][...] = mu_b
        segs_ls[f"b{arch.depth_L + 1}"][...] = 0.5 * math.log(s2_b)
    return mfvi.MeanFieldGaussian(mu, ls)


def run_counterexample_check(spec: CounterexampleSpec, train_cfg: mfvi.TrainConfig,
                             widths=(256, 1024, 4096), n_pred_samples: int = 2000,
                             n_elbo_samples: int = 512,
                             threshold_frac: float = 0.5) -> CounterexampleReport:
    """Train on the constructed dataset at each width and check the mean gap.

    Reports |E_q f(x) - E_q f(x')| per width plus the ELBOs of the trained
    fit, the spiked family, and the prior with its output bias optimized.
    Passes when the trained gap at the largest width stays above
    threshold_frac of the ideal gap sqrt(scale) * |m(x) - m(x')| (a policy
    choice: the theory promises only a positive data-dependent floor).
    """
    dataset = build_counterexample_dataset(spec)
    lik = mfvi.gaussian_likelihood(dataset.noise_sigma2)
    ideal_gap = math.sqrt(spec.scale) * spec.separation
    threshold = threshold_frac * ideal_gap
    X_eval = np.stack([spec.x, spec.x2])

    rows = []
    for i, width in enumerate(sorted(widths)):
        arch = replace(spec.arch, width_M=width)
        cfg = replace(train_cfg, seed=train_cfg.seed + i)
        q, _ = mfvi.train(arch, dataset, lik, cfg)
        eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, width, 7]))
        pm = mfvi.predictive_moments(q, arch, X_eval, n_pred_samples, eval_rng)
        gap = float(abs(pm.mean[0, 0] - pm.mean[1, 0]))
        gap_se = float(math.hypot(pm.mean_se[0, 0], pm.mean_se[1, 0]))
        e_tr, _ = mfvi.elbo_estimate(q, arch, dataset, lik, n_elbo_samples, eval_rng)
        q_spiked = spiked_output_distribution(arch, spec.scale)
        e_sp, _ = mfvi.elbo_estimate(q_spiked, arch, dataset, lik, n_elbo_samples, eval_rng)
        q_bias = _prior_with_optimal_bias(arch, dataset)
        e_pb, _ = mfvi.elbo_estimate(q_bias, arch, dataset, lik, n_elbo_samples, eval_rng)
        rows.append(CounterexampleRow(width, gap, gap_se, e_tr, e_sp, e_pb))

    passed = rows[-1].gap >= threshold
    return CounterexampleReport(tuple(rows), threshold, ideal_gap, passed)


# ---------------------------------------------------------------------------
# Odd activations: the matching sqrt(M) gap family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GapScalingRow:
    width: int
    scaled_gap: float
    scaled_gap_se: float


@dataclass(frozen=True)
class GapScalingReport:
    rows: tuple[GapScalingRow, ...]
    limit: float
    kl_budget: float


def shifted_last_layer_family(arch: Architecture, kl_budget: float) -> mfvi.MeanFieldGaussian:
    """Prior except the final hidden biases and output weights get mean sqrt(K/M).

    The divergence to the prior is exactly kl_budget at every width.
    """
    if kl_budget <= 0:
        raise ValueError("kl_budget must be > 0")
    if arch.d_out != 1:
        raise ShapeMismatchError("family is defined for a single output unit")
    mu = np.zeros(net.param_count(arch))
    shift = math.sqrt(kl_budget / arch.width_M)
    segs = net.unpack(arch, mu)
    segs[f"b{arch.depth_L}"][...] = shift
    segs[f"W{arch.depth_L + 1}"][...] = shift
    return mfvi.MeanFieldGaussian(mu, np.zeros_like(mu))


def odd_gap_scaling_check(arch: Architecture, kl_budget: float, x, x2, widths,
                          n_samples: int, rng: np.random.Generator) -> GapScalingReport:
    """Estimate sqrt(M) * |E f(x) - E f(x')| for the shifted family per width.

    The quadrature limit is kl_budget * |E[phi'(z_x)] - E[phi'(z_x')]| with
    z_x normal at the final-hidden-layer variance. Differentiable
    activations only: relu is rejected.
    """
    act = arch.activation
    if act.kind == "relu":
        raise ActivationError("gap-scaling family needs a differentiable activation")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    X_eval = np.stack([x, x2])

    c = abs(
        nngp.mean_activation_derivative(act, nngp.hidden_variance(arch, x))
        - nngp.mean_activation_derivative(act, nngp.hidden_variance(arch, x2))
    )
    rows = []
    for width in widths:
        arch_w = replace(arch, width_M=width)
        q = shifted_last_layer_family(arch_w, kl_budget)
        # common random numbers against the prior: the prior mean gap is
        # exactly zero, and sharing noise shrinks the estimator's variance
        # from O(1) to O(kl_budget / M)
        total = 0.0
        total_sq = 0.0
        for step in mfvi._sample_chunks(n_samples, q.n_params):
            eps = rng.standard_normal((step, q.n_params))
            fq = net.forward_many(arch_w, mfvi.sample_reparam(q, eps), X_eval)[:, :, 0]
            fp = net.forward_many(arch_w, eps, X_eval)[:, :, 0]
            t = (fq[:, 0] - fp[:, 0]) - (fq[:, 1] - fp[:, 1])
            total += float(t.sum())
            total_sq += float(t @ t)
        gap_mean = total / n_samples
        var = max(total_sq - n_samples * gap_mean**2, 0.0) / (n_samples - 1)
        se = math.sqrt(var / n_samples)
        rows.append(
            GapScalingRow(width, math.sqrt(width) * abs(gap_mean), math.sqrt(width) * se)
        )
    return GapScalingReport(tuple(rows), limit=c * kl_budget, kl_budget=kl_budget)
