"""Fully-connected networks with width-scaled layers and a flat parameter vector.

Hidden post-activations are divided by sqrt(width) and the input layer by
sqrt(d_in), so the prior predictive stays non-degenerate as width grows.
All parameters live in one flat float64 vector whose layout is a pure
function of the architecture; the same vector is shared with the
variational machinery in :mod:`widebnn.mfvi`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf as _erf

from .errors import ActivationError, ShapeMismatchError

ACTIVATION_KINDS = ("tanh", "erf", "relu", "identity", "sigmoid")


@dataclass(frozen=True)
class ActivationSpec:
    """A scalar activation plus the metadata the bound formulas need.

    ``even_part`` is the constant value of (phi(a) + phi(-a)) / 2 when that
    function is constant; it is None for activations (relu) whose even part
    actually varies.
    """

    kind: str
    even_part: float | None
    lipschitz: float
    is_odd_plus_constant: bool

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ActivationError(f"unknown activation kind {self.kind!r}")
        if self.lipschitz <= 0:
            raise ActivationError("lipschitz constant must be > 0")

    def phi(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "erf":
            return _erf(z)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "identity":
            return np.asarray(z, dtype=float)
        # sigmoid written via tanh so its even part is exactly 0.5
        return 0.5 + 0.5 * np.tanh(0.5 * z)

    def dphi(self, z: np.ndarray) -> np.ndarray:
        """Pointwise derivative; relu uses the value 0 at the kink."""
        if self.kind == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        if self.kind == "erf":
            return (2.0 / np.sqrt(np.pi)) * np.exp(-z * z)
        if self.kind == "relu":
            return (z > 0).astype(float)
        if self.kind == "identity":
            return np.ones_like(z, dtype=float)
        t = np.tanh(0.5 * z)
        return 0.25 * (1.0 - t * t)


_CANONICAL = {
    "tanh": dict(even_part=0.0, lipschitz=1.0, is_odd_plus_constant=True),
    "erf": dict(even_part=0.0, lipschitz=1.0, is_odd_plus_constant=True),
    "identity": dict(even_part=0.0, lipschitz=1.0, is_odd_plus_constant=True),
    "sigmoid": dict(even_part=0.5, lipschitz=0.25, is_odd_plus_constant=True),
    "relu": dict(even_part=None, lipschitz=1.0, is_odd_plus_constant=False),
}


def activation(kind: str) -> ActivationSpec:
    """Canonical ActivationSpec for a kind name."""
    if kind not in _CANONICAL:
        raise ActivationError(f"unknown activation kind {kind!r}")
    return ActivationSpec(kind=kind, **_CANONICAL[kind])


@dataclass(frozen=True)
class Architecture:
    """Shape of the network: L hidden layers of width M, plus the output map."""

    depth_L: int
    width_M: int
    d_in: int
    d_out: int = 1
    activation: ActivationSpec = activation("tanh")
    include_final_bias: bool = True

    def __post_init__(self):
        for name in ("depth_L", "width_M", "d_in", "d_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    start: int
    stop: int


def _layout_key(arch: Architecture) -> tuple:
    return (arch.depth_L, arch.width_M, arch.d_in, arch.d_out, arch.include_final_bias)


@lru_cache(maxsize=None)
def _layout_from_key(key: tuple) -> tuple[Segment, ...]:
    L, M, d_in, d_out, final_bias = key
    segs: list[Segment] = []
    pos = 0

    def add(name, shape):
        nonlocal pos
        n = int(np.prod(shape))
        segs.append(Segment(name, shape, pos, pos + n))
        pos += n

    add("W1", (M, d_in))
    add("b1", (M,))
    for ell in range(2, L + 1):
        add(f"W{ell}", (M, M))
        add(f"b{ell}", (M,))
    add(f"W{L + 1}", (d_out, M))
    if final_bias:
        add(f"b{L + 1}", (d_out,))
    return tuple(segs)


def layout(arch: Architecture) -> tuple[Segment, ...]:
    """Ordered parameter segments: (W1, b1), ..., (W_{L+1}[, b_{L+1}])."""
    return _layout_from_key(_layout_key(arch))


def param_count(arch: Architecture) -> int:
    return layout(arch)[-1].stop


def unpack(arch: Architecture, theta: np.ndarray) -> dict[str, np.ndarray]:
    """Views into the flat vector, keyed by segment name.

    Works on a single vector (P,) or a batch (S, P); batched views get a
    leading sample axis.
    """
    theta = np.asarray(theta)
    if theta.shape[-1] != param_count(arch):
        raise ShapeMismatchError(
            f"theta has {theta.shape[-1]} entries, architecture needs {param_count(arch)}"
        )
    out = {}
    for seg in layout(arch):
        view = theta[..., seg.start : seg.stop]
        out[seg.name] = view.reshape(theta.shape[:-1] + seg.shape)
    return out


def pack(arch: Architecture, segments: dict[str, np.ndarray]) -> np.ndarray:
    """Inverse of :func:`unpack` for a single parameter set."""
    theta = np.empty(param_count(arch))
    for seg in layout(arch):
        arr = np.asarray(segments[seg.name], dtype=float)
        if arr.shape != seg.shape:
            raise ShapeMismatchError(f"segment {seg.name} has shape {arr.shape}, expected {seg.shape}")
        theta[seg.start : seg.stop] = arr.reshape(-1)
    return theta


def sample_prior(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    """One draw of the unit-Gaussian prior over the flat parameter vector."""
    return rng.standard_normal(param_count(arch))


def _check_inputs(arch: Architecture, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != arch.d_in:
        raise ShapeMismatchError(f"X must be (N, {arch.d_in}), got {X.shape}")
    return X


def forward_with_cache(arch: Architecture, thetas: np.ndarray, X: np.ndarray):
    """Batched forward pass keeping the intermediates the reverse pass needs.

    thetas: (S, P); X: (N, d_in). Returns (f, cache) with f of shape
    (S, N, d_out).
    """
    X = _check_inputs(arch, X)
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim != 2:
        raise ShapeMismatchError("thetas must be 2-D (S, P)")
    p = unpack(arch, thetas)
    L, M = arch.depth_L, arch.width_M
    act = arch.activation

    zs, hs = [], []
    z = np.einsum("smd,nd->snm", p["W1"], X) / np.sqrt(arch.d_in) + p["b1"][:, None, :]
    zs.append(z)
    hs.append(act.phi(z))
    for ell in range(2, L + 1):
        z = np.einsum("sij,snj->sni", p[f"W{ell}"], hs[-1]) / np.sqrt(M) + p[f"b{ell}"][:, None, :]
        zs.append(z)
        hs.append(act.phi(z))
    f = np.einsum("soj,snj->sno", p[f"W{L + 1}"], hs[-1]) / np.sqrt(M)
    if arch.include_final_bias:
        f = f + p[f"b{L + 1}"][:, None, :]
    return f, (p, zs, hs, X)


def forward_many(arch: Architecture, thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Forward pass for a batch of parameter vectors: (S, P) x (N, d_in) -> (S, N, d_out)."""
    return forward_with_cache(arch, thetas, X)[0]


def backward_from_cache(arch: Architecture, cache, df: np.ndarray) -> np.ndarray:
    """Reverse-mode pass: gradient of sum(df * f) w.r.t. each flat theta.

    df: (S, N, d_out) upstream sensitivities. Returns (S, P).
    """
    p, zs, hs, X = cache
    S = zs[0].shape[0]
    L, M = arch.depth_L, arch.width_M
    act = arch.activation
    grads = np.zeros((S, param_count(arch)))
    g = unpack(arch, grads)

    if arch.include_final_bias:
        g[f"b{L + 1}"][...] = df.sum(axis=1)
    g[f"W{L + 1}"][...] = np.einsum("sno,snj->soj", df, hs[-1]) / np.sqrt(M)
    dh = np.einsum("sno,soj->snj", df, p[f"W{L + 1}"]) / np.sqrt(M)
    for ell in range(L, 1, -1):
        dz = dh * act.dphi(zs[ell - 1])
        g[f"b{ell}"][...] = dz.sum(axis=1)
        g[f"W{ell}"][...] = np.einsum("sni,snj->sij", dz, hs[ell - 2]) / np.sqrt(M)
        dh = np.einsum("sni,sij->snj", dz, p[f"W{ell}"]) / np.sqrt(M)
    dz = dh * act.dphi(zs[0])
    g["b1"][...] = dz.sum(axis=1)
    g["W1"][...] = np.einsum("snm,nd->smd", dz, X) / np.sqrt(arch.d_in)
    return grads


def backward_many(
    arch: Architecture, thetas: np.ndarray, X: np.ndarray, df: np.ndarray
) -> np.ndarray:
    """Convenience wrapper: forward to build the cache, then reverse."""
    _, cache = forward_with_cache(arch, thetas, X)
    return backward_from_cache(arch, cache, df)


def forward(arch: Architecture, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Deterministic forward pass: (N, d_in) -> (N, d_out)."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ShapeMismatchError("theta must be a flat vector; see forward_many for batches")
    return forward_many(arch, theta[None, :], X)[0]


def forward_tilde(arch: Architecture, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Network output with the final bias and constant even part removed.

    Subtracts b_{L+1} and (even_part / sqrt(M)) * W_{L+1} @ 1 from the
    forward pass, which is the quantity the convergence bounds control.
    Only defined when the activation's even part is a constant.
    """
    act = arch.activation
    if not act.is_odd_plus_constant:
        raise ActivationError(
            f"{act.kind} has no odd decomposition with constant even part"
        )
    f = forward(arch, theta, X)
    p = unpack(arch, np.asarray(theta, dtype=float))
    L, M = arch.depth_L, arch.width_M
    offset = act.even_part / np.sqrt(M) * p[f"W{L + 1}"].sum(axis=1)
    if arch.include_final_bias:
        offset = offset + p[f"b{L + 1}"]
    return f - offset[None, :]
