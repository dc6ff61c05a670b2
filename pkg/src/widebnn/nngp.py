"""Infinite-width kernel recursion, activation moments, and the GP reference.

The kernel of the wide-network prior is built layer by layer from two scalar
moment functions of the activation: the diagonal second moment
h(k) = E[phi(sqrt(k) z)^2] and its bivariate extension
E[phi(u) phi(v)] under a 2x2 normal covariance. Both have closed forms for
relu, erf and identity; tanh and sigmoid fall back to Gauss-Hermite
quadrature (64 nodes by default, which is far past convergence for these
bounded activations).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import FactorizationError, ShapeMismatchError
from .net import ActivationSpec, Architecture

DEFAULT_QUAD_NODES = 64
INPUT_KERNEL_MODES = ("scaled", "unscaled")


@lru_cache(maxsize=8)
def _gh_nodes(n: int):
    """Probabilists' Gauss-Hermite nodes/weights; weights sum to sqrt(2*pi)."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w


def _check_mode(input_kernel: str):
    if input_kernel not in INPUT_KERNEL_MODES:
        raise ValueError(f"input_kernel must be one of {INPUT_KERNEL_MODES}")


def base_kernel(X: np.ndarray, X2: np.ndarray, d_in: int, input_kernel: str = "scaled"):
    """First-layer preactivation covariance: 1 + <x, x'> / d_in.

    The "unscaled" mode drops the 1/d_in factor (a convention that only
    matters for d_in > 1).
    """
    _check_mode(input_kernel)
    scale = d_in if input_kernel == "scaled" else 1.0
    return 1.0 + (X @ X2.T) / scale


# ---------------------------------------------------------------------------
# Scalar activation moments
# ---------------------------------------------------------------------------

def act_second_moment(act: ActivationSpec, k: float, nodes: int = DEFAULT_QUAD_NODES) -> float:
    """h(k) = E[phi(sqrt(k) z)^2] for z ~ N(0, 1); requires k > 0."""
    if k <= 0:
        raise ValueError("k must be > 0")
    return float(_second_moment_vec(act, np.asarray([k], dtype=float), nodes)[0])


def _second_moment_vec(act, k, nodes=DEFAULT_QUAD_NODES):
    k = np.asarray(k, dtype=float)
    if act.kind == "identity":
        return k.copy()
    if act.kind == "relu":
        return 0.5 * k
    if act.kind == "erf":
        return (2.0 / np.pi) * np.arcsin(2.0 * k / (1.0 + 2.0 * k))
    x, w = _gh_nodes(nodes)
    vals = act.phi(np.sqrt(k)[..., None] * x) ** 2
    return (vals @ w) / np.sqrt(2.0 * np.pi)


def act_cross_moment(act: ActivationSpec, k11: float, k12: float, k22: float,
                     nodes: int = DEFAULT_QUAD_NODES) -> float:
    """E[phi(u) phi(v)] for (u, v) jointly normal with the given covariance."""
    _check_psd2(k11, k12, k22)
    return float(
        _cross_moment_vec(
            act,
            np.asarray([k11], dtype=float),
            np.asarray([k12], dtype=float),
            np.asarray([k22], dtype=float),
            nodes,
        )[0]
    )


def _check_psd2(k11, k12, k22):
    scale = max(abs(k11), abs(k22), 1.0)
    if k11 < -1e-12 * scale or k22 < -1e-12 * scale:
        raise ValueError("input covariance has a negative diagonal")
    if k12 * k12 > k11 * k22 + 1e-9 * scale * scale:
        raise ValueError("input covariance is not positive semidefinite")


def _cross_moment_vec(act, k11, k12, k22, nodes=DEFAULT_QUAD_NODES):
    """Vectorized bivariate moment over flat arrays of covariance triples."""
    k11 = np.asarray(k11, dtype=float)
    k12 = np.asarray(k12, dtype=float)
    k22 = np.asarray(k22, dtype=float)
    if act.kind == "identity":
        return k12.copy()
    if act.kind == "relu":
        s = np.sqrt(np.maximum(k11 * k22, 0.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            rho = np.where(s > 0, k12 / np.where(s > 0, s, 1.0), 0.0)
        rho = np.clip(rho, -1.0, 1.0)
        theta = np.arccos(rho)
        return s / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * np.cos(theta))
    if act.kind == "erf":
        denom = np.sqrt((1.0 + 2.0 * k11) * (1.0 + 2.0 * k22))
        return (2.0 / np.pi) * np.arcsin(np.clip(2.0 * k12 / denom, -1.0, 1.0))

    x, w = _gh_nodes(nodes)
    k11, k12, k22 = np.broadcast_arrays(k11, k12, k22)
    out = np.empty(k12.shape)
    flat11 = k11.reshape(-1)
    flat12 = k12.reshape(-1)
    flat22 = k22.reshape(-1)
    res = out.reshape(-1)
    chunk = max(1, 4_000_000 // (nodes * nodes))
    for lo in range(0, flat11.size, chunk):
        hi = min(lo + chunk, flat11.size)
        a = np.sqrt(np.maximum(flat11[lo:hi], 0.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            b = np.where(a > 0, flat12[lo:hi] / np.where(a > 0, a, 1.0), 0.0)
        c = np.sqrt(np.maximum(flat22[lo:hi] - b * b, 0.0))
        # u = a z1, v = b z1 + c z2 reproduces the covariance triple
        phi_u = act.phi(a[:, None] * x[None, :])
        v = b[:, None, None] * x[None, :, None] + c[:, None, None] * x[None, None, :]
        inner = act.phi(v) @ w
        res[lo:hi] = ((phi_u * inner) @ w) / (2.0 * np.pi)
    return out


def mean_activation(act: ActivationSpec, var: float, nodes: int = DEFAULT_QUAD_NODES) -> float:
    """E[phi(z)] for z ~ N(0, var); closed form for relu, quadrature otherwise."""
    if var < 0:
        raise ValueError("var must be >= 0")
    a = np.sqrt(var)
    if act.kind == "relu":
        return float(a / np.sqrt(2.0 * np.pi))
    x, w = _gh_nodes(nodes)
    return float((act.phi(a * x) @ w) / np.sqrt(2.0 * np.pi))


def mean_activation_derivative(act: ActivationSpec, var: float,
                               nodes: int = DEFAULT_QUAD_NODES) -> float:
    """E[phi'(z)] for z ~ N(0, var), by quadrature on the pointwise derivative."""
    if var < 0:
        raise ValueError("var must be >= 0")
    x, w = _gh_nodes(nodes)
    return float((act.dphi(np.sqrt(var) * x) @ w) / np.sqrt(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Kernel recursion
# ---------------------------------------------------------------------------

def hidden_variance(arch: Architecture, x: np.ndarray, layer: int | None = None,
                    input_kernel: str = "scaled") -> float:
    """Limiting variance of a single preactivation in hidden layer `layer`.

    layer counts hidden layers from 1; defaults to the final hidden layer
    (arch.depth_L). Equals the scalar recursion k^(layer-1) started from
    k^0 = 1 + |x|^2 / d_in.
    """
    _check_mode(input_kernel)
    if layer is None:
        layer = arch.depth_L
    if not 1 <= layer <= arch.depth_L:
        raise ValueError("layer must be in [1, depth_L]")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (arch.d_in,):
        raise ShapeMismatchError(f"x must have shape ({arch.d_in},), got {x.shape}")
    scale = arch.d_in if input_kernel == "scaled" else 1.0
    k = 1.0 + float(x @ x) / scale
    for _ in range(layer - 1):
        k = 1.0 + float(_second_moment_vec(arch.activation, np.asarray([k]))[0])
    return k


def output_variance(arch: Architecture, X: np.ndarray, input_kernel: str = "scaled") -> np.ndarray:
    """Limiting predictive variance of f at each row of X (per output unit).

    Runs the diagonal recursion through the hidden stack and the output
    moment, adding one unit of bias variance iff the final bias is present.
    With the identity activation this equals depth_L + 1 + |x|^2/d_in
    exactly (with final bias).
    """
    _check_mode(input_kernel)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != arch.d_in:
        raise ShapeMismatchError(f"X must be (N, {arch.d_in}), got {X.shape}")
    scale = arch.d_in if input_kernel == "scaled" else 1.0
    k = 1.0 + np.einsum("nd,nd->n", X, X) / scale
    for _ in range(arch.depth_L - 1):
        k = 1.0 + _second_moment_vec(arch.activation, k)
    out = _second_moment_vec(arch.activation, k)
    if arch.include_final_bias:
        out = out + 1.0
    return out


@dataclass(frozen=True)
class KernelMatrix:
    """A Gram matrix with provenance: which recursion level produced it.

    layer == depth_L means the output covariance of the network (what
    gp_posterior consumes); smaller values are hidden-layer preactivation
    covariances.
    """

    entries: np.ndarray
    layer: int
    arch: Architecture

    def to_csv(self, path_or_buf) -> None:
        lines = ["layer,i,j,value"]
        k = np.asarray(self.entries)
        for i in range(k.shape[0]):
            for j in range(k.shape[1]):
                lines.append(f"{self.layer},{i},{j},{k[i, j]!r}")
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


def nngp_kernel(arch: Architecture, X: np.ndarray, X2: np.ndarray | None = None,
                input_kernel: str = "scaled") -> KernelMatrix:
    """Output covariance of the infinite-width prior between rows of X and X2.

    Applies the bivariate moment recursion through the depth_L hidden
    layers, then the output-layer moment; one unit of variance is added iff
    the architecture keeps its final bias. Deterministic, symmetric when
    X2 is omitted.
    """
    _check_mode(input_kernel)
    X = np.asarray(X, dtype=float)
    symmetric = X2 is None
    X2a = X if symmetric else np.asarray(X2, dtype=float)
    if X.ndim != 2 or X2a.ndim != 2 or X.shape[1] != arch.d_in or X2a.shape[1] != arch.d_in:
        raise ShapeMismatchError("inputs must be 2-D with d_in columns")
    act = arch.activation
    scale = arch.d_in if input_kernel == "scaled" else 1.0

    cross = 1.0 + (X @ X2a.T) / scale
    d1 = 1.0 + np.einsum("nd,nd->n", X, X) / scale
    d2 = d1 if symmetric else 1.0 + np.einsum("nd,nd->n", X2a, X2a) / scale
    for _ in range(arch.depth_L - 1):
        cross = 1.0 + _cross_moment_vec(act, d1[:, None], cross, d2[None, :])
        d1 = 1.0 + _second_moment_vec(act, d1)
        d2 = d1 if symmetric else 1.0 + _second_moment_vec(act, d2)
    out = _cross_moment_vec(act, d1[:, None], cross, d2[None, :])
    if arch.include_final_bias:
        out = out + 1.0
    if symmetric:
        out = 0.5 * (out + out.T)
    return KernelMatrix(entries=out, layer=arch.depth_L, arch=arch)


# ---------------------------------------------------------------------------
# GP regression reference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GPPredictive:
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None


def _entries(K) -> np.ndarray:
    return np.asarray(getattr(K, "entries", K), dtype=float)


def gp_posterior(K_train, K_cross, K_test_diag, y, sigma2: float,
                 jitter: float = 1e-8, want_covariance: bool = False,
                 K_test=None) -> GPPredictive:
    """Gaussian-process regression predictive from precomputed kernel blocks.

    K_train: (n, n) Gram of the training inputs; K_cross: (n, m) train/test
    block; K_test_diag: (m,) test variances. Solves with a Cholesky
    factorization of K_train + sigma2 I, escalating jitter x10 up to 3
    retries before failing. Predictive variances are clamped at zero.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    A = _entries(K_train)
    B = _entries(K_cross)
    y = np.asarray(y, dtype=float)
    d = np.asarray(K_test_diag, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or y.shape != (n,) or d.shape != (B.shape[1],):
        raise ShapeMismatchError("kernel block shapes are inconsistent")

    base = A + sigma2 * np.eye(n)
    j = jitter
    last_err = None
    for _ in range(4):
        try:
            cf = cho_factor(base + j * np.eye(n), lower=True)
            break
        except np.linalg.LinAlgError as err:  # pragma: no cover - rare path
            last_err = err
            j *= 10.0
    else:
        raise FactorizationError(f"Cholesky failed up to jitter {j / 10}: {last_err}")

    alpha = cho_solve(cf, y)
    mean = B.T @ alpha
    v = solve_triangular(cf[0], B, lower=True)
    var = d - np.einsum("ij,ij->j", v, v)
    if np.any(var < -1e-6):
        raise FactorizationError("predictive variance went significantly negative")
    var = np.maximum(var, 0.0)
    cov = None
    if want_covariance:
        if K_test is None:
            raise ValueError("want_covariance requires the full K_test block")
        cov = _entries(K_test) - v.T @ v
    return GPPredictive(mean=mean, variance=var, covariance=cov)


def nngp_posterior(arch: Architecture, X_train, y_train, X_test, sigma2: float,
                   input_kernel: str = "scaled") -> GPPredictive:
    """Convenience wrapper: build the kernel blocks for arch and regress."""
    X_train = np.asarray(X_train, dtype=float)
    X_test = np.asarray(X_test, dtype=float)
    K = nngp_kernel(arch, X_train, input_kernel=input_kernel)
    Kc = nngp_kernel(arch, X_train, X_test, input_kernel=input_kernel)
    kd = output_variance(arch, X_test, input_kernel=input_kernel)
    return gp_posterior(K, Kc, kd, y_train, sigma2)


# ---------------------------------------------------------------------------
# Mean post-activation of the final hidden layer
# ---------------------------------------------------------------------------

def mean_postactivation(arch: Architecture, x, input_kernel: str = "scaled",
                        nodes: int = DEFAULT_QUAD_NODES) -> float:
    """Infinite-width E[phi(z)] for one unit of the final hidden layer at x.

    Zero for activations that are odd (the engine of the prior-reversion
    results); varies with x for relu, which is what the constructed
    counterexample dataset exploits.
    """
    var = hidden_variance(arch, x, input_kernel=input_kernel)
    if arch.activation.kind == "relu":
        return float(np.sqrt(var) / np.sqrt(2.0 * np.pi))
    return mean_activation(arch.activation, var, nodes=nodes)


def mean_postactivation_finite(arch: Architecture, x, n_samples: int,
                               rng: np.random.Generator,
                               input_kernel: str = "scaled") -> tuple[float, float]:
    """Monte-Carlo E[phi(z_{L,1}(x))] under the prior at finite width.

    Samples the layers of the actual width-M network; only the first unit of
    the final hidden layer is read out. Returns (estimate, standard error).
    The input-layer convention must match the limit it is compared with:
    "scaled" divides the input product by d_in.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    _check_mode(input_kernel)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (arch.d_in,):
        raise ShapeMismatchError(f"x must have shape ({arch.d_in},), got {x.shape}")
    M, L = arch.width_M, arch.depth_L
    act = arch.activation
    scale = np.sqrt(arch.d_in) if input_kernel == "scaled" else 1.0

    vals = np.empty(n_samples)
    done = 0
    # keep the per-chunk (c, M, M) propagation blocks bounded
    chunk = max(1, min(n_samples, 4_000_000 // max(M * M, M * arch.d_in, 1)))
    while done < n_samples:
        c = min(chunk, n_samples - done)
        if L == 1:
            w = rng.standard_normal((c, arch.d_in))
            b = rng.standard_normal(c)
            z_last = (w @ x) / scale + b
        else:
            W1 = rng.standard_normal((c, M, arch.d_in))
            b1 = rng.standard_normal((c, M))
            z = np.einsum("cmd,d->cm", W1, x) / scale + b1
            for _ in range(L - 2):
                E = rng.standard_normal((c, M, M))
                b_l = rng.standard_normal((c, M))
                z = np.einsum("cij,cj->ci", E, act.phi(z)) / np.sqrt(M) + b_l
            w = rng.standard_normal((c, M))
            b = rng.standard_normal(c)
            z_last = np.einsum("cm,cm->c", w, act.phi(z)) / np.sqrt(M) + b
        vals[done : done + c] = act.phi(z_last)
        done += c
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))
