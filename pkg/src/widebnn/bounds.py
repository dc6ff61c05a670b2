"""Closed-form convergence bounds and their Monte-Carlo verifiers.

Every bound returns a BoundReport carrying the final value together with
each intermediate constant, so reports can be audited; the constants are
loose by construction and transparency is the point. Monte-Carlo checks
(operator norms, moment dominance, divergence certificates) report standard
errors so callers can apply an explicit slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mfvi, net
from .errors import ShapeMismatchError
from .net import Architecture

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BoundInputs:
    """Inputs shared by the moment bounds. x_norm is the euclidean norm of x."""

    M: int
    L: int
    d_in: int
    x_norm: float = 0.0
    kl: float = 0.0
    even_part: float = 0.0

    def __post_init__(self):
        if min(self.M, self.L, self.d_in) < 1:
            raise ValueError("M, L, d_in must be >= 1")
        if self.x_norm < 0 or self.kl < 0:
            raise ValueError("x_norm and kl must be >= 0")


@dataclass(frozen=True)
class BoundReport:
    value: float
    constants: dict[str, float]
    formula_id: str
    inputs: BoundInputs | None = None
    notes: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"bound value must be finite and >= 0, got {self.value}")
        for k, v in self.constants.items():
            if not math.isfinite(v):
                raise ValueError(f"constant {k} is not finite")


# ---------------------------------------------------------------------------
# Constants for the second-moment bound
# ---------------------------------------------------------------------------

def eta_constant(m: int) -> float:
    """Spectral-norm second-moment constant: E|A|_2^2 <= eta * max dim."""
    if m >= 36:
        return (37.0 + 6.0 * SQRT_2PI) / 9.0
    return 4.0 * (2.0 + SQRT_2PI)


def gamma_constant(even_part: float, m: int) -> float:
    """Growth rate of the preactivation second moments through depth."""
    if even_part == 0.0:
        return (2.0 / 3.0) * (13.0 + 2.0 * math.sqrt(43.0)) if m >= 36 else 2.0 * (6.0 + math.sqrt(38.0))
    return 28.0 + math.sqrt(793.0) if m >= 36 else 48.0 + math.sqrt(2353.0)


def rho_constant(even_part: float, m: int) -> float:
    """Per-layer rate of the second-moment bound: max(c_even * eta, gamma).

    Computed from its defining expression rather than a case table; the two
    disagree for nonzero even part, and the defining expression is the one
    the recursion actually uses.
    """
    c_even = 3.0 if even_part == 0.0 else 4.0
    return max(c_even * eta_constant(m), gamma_constant(even_part, m))


# ---------------------------------------------------------------------------
# Moment bounds
# ---------------------------------------------------------------------------

def mean_bound_1hl(inp: BoundInputs) -> BoundReport:
    """Sharpened single-hidden-layer bound on |E_q f - E_prior f|."""
    if inp.L != 1:
        raise ValueError("mean_bound_1hl requires L == 1")
    value = (2.0 / 3.0) * math.sqrt((1.0 + inp.x_norm**2 / inp.d_in) / inp.M) * inp.kl
    return BoundReport(value, {"c": 2.0 / 3.0}, "mean_single_hidden", inp)


def mean_bound_deep(inp: BoundInputs) -> BoundReport:
    """Depth-general bound on the predictive mean gap (bias and even part removed)."""
    c1, c2 = 4.0, 6.0
    a = abs(inp.even_part)
    value = (
        c1 * c2 ** (inp.L - 1) * inp.L
        * (a + 1.0 + inp.x_norm / math.sqrt(inp.d_in)) / math.sqrt(inp.M)
        * inp.kl * max((2.0 * inp.kl) ** ((inp.L - 1) / 2.0), 1.0)
    )
    return BoundReport(value, {"c1": c1, "c2": c2}, "mean_deep", inp)


def mean_diff_bound(inp: BoundInputs, x2_norm: float) -> BoundReport:
    """Bound on |E_q f(x) - E_q f(x')| via the two single-point bounds."""
    if x2_norm < 0:
        raise ValueError("x2_norm must be >= 0")
    c1, c2 = 4.0, 6.0
    a = abs(inp.even_part)
    value = (
        c1 * c2 ** (inp.L - 1) * inp.L
        * (2.0 * a + 2.0 + (inp.x_norm + x2_norm) / math.sqrt(inp.d_in)) / math.sqrt(inp.M)
        * inp.kl * max((2.0 * inp.kl) ** ((inp.L - 1) / 2.0), 1.0)
    )
    return BoundReport(value, {"c1": c1, "c2": c2, "x2_norm": x2_norm}, "mean_diff", inp)


def second_moment_bound(inp: BoundInputs) -> BoundReport:
    """Bound on |E_q f~^2 - E_prior f~^2| with all constants exposed."""
    c1 = 16.0 + 25.0 * math.sqrt(2.0)
    a = inp.even_part
    c_even = 3.0 if a == 0.0 else 4.0
    eta = eta_constant(inp.M)
    gamma = gamma_constant(a, inp.M)
    rho = max(c_even * eta, gamma)
    value = (
        c1 * math.sqrt(inp.L) * rho**inp.L
        * (a * a + 1.0 + inp.x_norm**2 / inp.d_in) / math.sqrt(inp.M)
        * math.sqrt(inp.kl) * max(2.0 * inp.kl, 1.0) ** (inp.L + 0.5)
    )
    constants = {"c1": c1, "c_even": c_even, "eta": eta, "gamma": gamma, "rho": rho}
    return BoundReport(value, constants, "second_moment", inp)


# ---------------------------------------------------------------------------
# Dataset-level divergence bounds
# ---------------------------------------------------------------------------

def kl_bound_gaussian(dataset, L: int, sigma2: float) -> float:
    """Width-free cap on KL(optimal q, prior) for a Gaussian likelihood.

    ((L+1) N + sum_n y_n^2 + |x_n|^2) / (2 sigma2). Zero for an empty set.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    y = np.asarray(dataset.y, dtype=float)
    if y.size == 0:
        return 0.0
    X = np.asarray(dataset.X, dtype=float)
    num = (L + 1) * y.size + float(y @ y) + float(np.sum(X * X))
    return num / (2.0 * sigma2)


def quadratic_lower_bound(lik: mfvi.LikelihoodSpec, y: float) -> tuple[float, float, float]:
    """Coefficients (a, b, c) with log p(y|f) >= a f^2 + b f + c for all f.

    Exact (not just a bound) for the Gaussian case.
    """
    if lik.kind == "gaussian":
        s2 = lik.sigma2
        return (-1.0 / (2 * s2), y / s2, -y * y / (2 * s2) - 0.5 * math.log(2 * math.pi * s2))
    if lik.kind == "student_t":
        nu = lik.nu
        c_nu = mfvi.student_t_log_norm(nu)
        return (-(nu + 1) / (2 * nu), (nu + 1) * y / nu, c_nu - (nu + 1) * y * y / (2 * nu))
    if y not in (0.0, 1.0, 0, 1):
        raise ValueError("logistic likelihood requires y in {0, 1}")
    return (-0.125, 0.5 if y == 1 else -0.5, -math.log(2.0))


def _per_point_ceiling(lik: mfvi.LikelihoodSpec) -> float:
    if lik.kind == "gaussian":
        return -0.5 * math.log(2 * math.pi * lik.sigma2)
    if lik.kind == "student_t":
        return mfvi.student_t_log_norm(lik.nu)
    return 0.0


def kl_bound_general(dataset, L: int, d_in: int, lik: mfvi.LikelihoodSpec) -> float:
    """Width-free divergence cap for any likelihood with a quadratic floor.

    Uses E_prior[f] = 0 and the prior-variance cap L + 1 + |x|^2 / d_in, so
    the bound is C N - sum_n (a_n * vcap(x_n) + c_n).
    """
    y = np.asarray(dataset.y, dtype=float)
    if y.size == 0:
        return 0.0
    X = np.asarray(dataset.X, dtype=float)
    if X.shape[1] != d_in:
        raise ShapeMismatchError(f"dataset has d_in={X.shape[1]}, argument says {d_in}")
    ceiling = _per_point_ceiling(lik)
    total = ceiling * y.size
    vcap = L + 1.0 + np.einsum("nd,nd->n", X, X) / d_in
    for yn, vn in zip(y, vcap):
        a, _, c = quadratic_lower_bound(lik, float(yn))
        total -= a * vn + c
    return float(total)


def kl_bound_empirical(dataset, arch: Architecture, sigma2: float, n_samples: int,
                       rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo divergence cap using the closed-form optimal output bias.

    bound = (1/2 sigma2) sum_n [(y_n - mu_b)^2 + sigma2_b + E_prior[f~(x_n)^2]]
            + 0.5 (mu_b^2 + sigma2_b - log sigma2_b)
    with the second moments of the bias-free output estimated from n_samples
    prior draws. Returns (bound, standard error of the MC part).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    y = np.asarray(dataset.y, dtype=float)
    X = np.asarray(dataset.X, dtype=float)
    mu_b, s2_b = mfvi.optimal_output_bias(y, sigma2)

    arch_nb = net.Architecture(
        depth_L=arch.depth_L, width_M=arch.width_M, d_in=arch.d_in, d_out=arch.d_out,
        activation=arch.activation, include_final_bias=False,
    )
    # E_prior[f~] = 0, so the mean of f~^2 estimates the predictive variance
    totals = np.zeros(n_samples)
    done = 0
    for step in mfvi._sample_chunks(n_samples, net.param_count(arch_nb)):
        thetas = rng.standard_normal((step, net.param_count(arch_nb)))
        f = net.forward_many(arch_nb, thetas, X)[:, :, 0]
        totals[done : done + step] = np.sum(f * f, axis=1) / (2.0 * sigma2)
        done += step

    fixed = float(np.sum((y - mu_b) ** 2 + s2_b)) / (2.0 * sigma2)
    kl_b = 0.5 * (mu_b**2 + s2_b - math.log(s2_b))
    bound = fixed + kl_b + float(totals.mean())
    se = float(totals.std(ddof=1) / math.sqrt(n_samples))
    return bound, se


def kl_gap_certificate(q, arch: Architecture, dataset, sigma2: float, n_samples: int,
                       rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo certificate bounding KL(optimal q, prior) from moment gaps.

    (1 / 2 sigma2) sum_n [ 2 |y_n| |dmean_n| + |dm2_n| ] where dmean/dm2 are
    the first/second predictive moment gaps between q and the prior at the
    data inputs, estimated with common random numbers (exactly zero when q
    is the prior). Returns (value, standard error).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    y = np.asarray(dataset.y, dtype=float)
    X = np.asarray(dataset.X, dtype=float)
    sums = None
    sumsq = None
    for step in mfvi._sample_chunks(n_samples, q.n_params):
        eps = rng.standard_normal((step, q.n_params))
        fq = net.forward_many(arch, mfvi.sample_reparam(q, eps), X)[:, :, 0]
        fp = net.forward_many(arch, eps, X)[:, :, 0]
        block = np.stack([fq - fp, fq * fq - fp * fp], axis=0)  # (2, step, N)
        s1 = block.sum(axis=1)
        s2 = (block * block).sum(axis=1)
        sums = s1 if sums is None else sums + s1
        sumsq = s2 if sumsq is None else sumsq + s2
    means = sums / n_samples  # (2, N): mean gap, second-moment gap
    var = (sumsq - n_samples * means**2) / (n_samples - 1)
    ses = np.sqrt(np.maximum(var, 0.0) / n_samples)

    weights = np.stack([2.0 * np.abs(y), np.ones_like(y)], axis=0) / (2.0 * sigma2)
    value = float(np.sum(weights * np.abs(means)))
    # conservative error propagation: |.| is 1-Lipschitz
    se = float(np.sqrt(np.sum((weights * ses) ** 2)))
    return value, se


# ---------------------------------------------------------------------------
# Affine-network bounds
# ---------------------------------------------------------------------------

def linear_mean_gap_bound(M: int, L: int, d_in: int, kl: float,
                          x: np.ndarray, x2: np.ndarray) -> float:
    """Mean-gap bound for identity activations, with the faster M^{-L/2} rate."""
    if kl < 0:
        raise ValueError("kl must be >= 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    diff = float(np.linalg.norm(x - x2))
    return d_in ** (-0.5) * M ** (-L / 2.0) * (2.0 * kl / (L + 1)) ** ((L + 1) / 2.0) * diff


def linear_lower_bound_construction(arch: Architecture, kl: float):
    """Explicit family achieving the affine-network rate.

    Puts mass c = sqrt(2 kl / (L+1)) in the (0, 0) entry of every weight
    mean (c is pinned by the divergence budget: (L+1) c^2 / 2 = kl), leaves
    all variances at 1, and returns (q, achieved_gap) where the gap is the
    exact difference of predictive means between e_1 and 0. For affine
    networks the predictive mean is the forward pass at the mean parameters.
    """
    if arch.activation.kind != "identity":
        raise ValueError("construction requires the identity activation")
    if kl <= 0:
        raise ValueError("kl must be > 0")
    c = math.sqrt(2.0 * kl / (arch.depth_L + 1))
    mu = np.zeros(net.param_count(arch))
    segs = net.unpack(arch, mu)
    for ell in range(1, arch.depth_L + 2):
        W = segs[f"W{ell}"]
        W[0, 0] = c
    q = mfvi.MeanFieldGaussian(mu, np.zeros_like(mu))

    e1 = np.zeros((1, arch.d_in))
    e1[0, 0] = 1.0
    zero = np.zeros((1, arch.d_in))
    gap = float(np.linalg.norm(net.forward(arch, mu, e1) - net.forward(arch, mu, zero)))
    return q, gap


# ---------------------------------------------------------------------------
# Parameter-level checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckItem:
    name: str
    lhs: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.bound + 1e-12 * max(1.0, abs(self.bound))

    @property
    def slack(self) -> float:
        return self.bound - self.lhs


@dataclass(frozen=True)
class CheckReport:
    items: tuple[CheckItem, ...]
    context: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.items)


def verify_param_bounds(q, arch: Architecture | None = None) -> CheckReport:
    """Check the parameter-norm consequences of a given divergence budget.

    Items: |mu|^2 <= 2 KL; |sigma - 1|^2 <= 2 KL; sigma_max <= 1 + sqrt(2 KL);
    |sigma^2 - 1|^2 <= (2 + sqrt(2 KL))^2 2 KL; and, when the architecture is
    supplied, the per-layer cap  max var(W) + max var(b) + max E[b^2]
    <= (sqrt(2) + sqrt(2 KL))^2.
    """
    kl = mfvi.kl_to_standard_normal(q)
    two_kl = 2.0 * kl
    sig = q.sigma
    sig2 = sig * sig
    items = [
        CheckItem("mu_norm_sq", float(q.mu @ q.mu), two_kl),
        CheckItem("sigma_minus_one_sq", float(np.sum((sig - 1.0) ** 2)), two_kl),
        CheckItem("sigma_max", float(sig.max()), 1.0 + math.sqrt(two_kl)),
        CheckItem(
            "sigma_sq_minus_one_sq",
            float(np.sum((sig2 - 1.0) ** 2)),
            (2.0 + math.sqrt(two_kl)) ** 2 * two_kl,
        ),
    ]
    if arch is not None:
        cap = (math.sqrt(2.0) + math.sqrt(two_kl)) ** 2
        mu = net.unpack(arch, q.mu)
        var = net.unpack(arch, sig2)
        for ell in range(1, arch.depth_L + 2):
            w_var = float(var[f"W{ell}"].max())
            bname = f"b{ell}"
            if bname in var:
                b_var = float(var[bname].max())
                b_m2 = float((mu[bname] ** 2 + var[bname]).max())
            else:
                b_var = 0.0
                b_m2 = 0.0
            items.append(CheckItem(f"layer{ell}_weight_bias_cap", w_var + b_var + b_m2, cap))
    return CheckReport(tuple(items), context={"kl": kl})


def mc_opnorm_checks(I: int, J: int, sigma: float, trials: int,
                     rng: np.random.Generator) -> CheckReport:
    """Monte-Carlo means of the spectral norm of an I x J Gaussian matrix.

    Asserts mean |A|_2 <= 2 sigma sqrt(max(I, J)) + 4 SE and
    mean |A|_2^2 <= sigma^2 eta max(I, J) + 4 SE.
    """
    if trials < 30:
        raise ValueError("trials must be >= 30")
    norms = np.empty(trials)
    for t in range(trials):
        A = sigma * rng.standard_normal((I, J))
        norms[t] = np.linalg.norm(A, ord=2)
    sq = norms * norms
    dim = max(I, J)
    mean_n, se_n = norms.mean(), norms.std(ddof=1) / math.sqrt(trials)
    mean_s, se_s = sq.mean(), sq.std(ddof=1) / math.sqrt(trials)
    items = (
        CheckItem("mean_opnorm", float(mean_n), 2.0 * sigma * math.sqrt(dim) + 4.0 * se_n),
        CheckItem("mean_opnorm_sq", float(mean_s), sigma**2 * eta_constant(dim) * dim + 4.0 * se_s),
    )
    ctx = {"I": I, "J": J, "sigma": sigma, "trials": trials,
           "se_norm": float(se_n), "se_sq": float(se_s)}
    return CheckReport(items, context=ctx)


# ---------------------------------------------------------------------------
# Tabulation helpers
# ---------------------------------------------------------------------------

BOUND_CSV_HEADER = "formula_id,value,c,c1,c2,c_even,eta,gamma,rho,x2_norm"
_CONSTANT_COLUMNS = ("c", "c1", "c2", "c_even", "eta", "gamma", "rho", "x2_norm")


def reports_to_csv(reports, path_or_buf) -> None:
    """Fixed-schema CSV for a list of BoundReports; absent constants stay blank."""
    lines = [BOUND_CSV_HEADER]
    for r in reports:
        cells = [r.formula_id, repr(r.value)]
        for name in _CONSTANT_COLUMNS:
            cells.append(repr(r.constants[name]) if name in r.constants else "")
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def format_report_table(reports) -> str:
    """Aligned text table of bound values and their constants."""
    rows = []
    for r in reports:
        consts = " ".join(f"{k}={v:.6g}" for k, v in r.constants.items())
        rows.append((r.formula_id, f"{r.value:.6g}", consts))
    wid0 = max(len(r[0]) for r in rows)
    wid1 = max(len(r[1]) for r in rows)
    lines = [f"{'formula':<{wid0}}  {'value':>{wid1}}  constants"]
    for r in rows:
        lines.append(f"{r[0]:<{wid0}}  {r[1]:>{wid1}}  {r[2]}")
    return "\n".join(lines)
