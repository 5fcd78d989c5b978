"""Convolution quadrature for causal operator convolutions.

A multistep method with characteristic quotient delta turns a Laplace
transfer function F into discrete convolution weights: the coefficients
of F(delta(zeta) / dt) as a power series in zeta.  Weights come from
transfer samples on a scaled circle via one inverse FFT; the scaling
radius pushes the aliasing error of the truncated series down to a
chosen epsilon.  Since every transfer here is real in the time domain,
samples on the upper half contour determine everything and the inverse
transform is a real one.

The same samples drive forward convolutions (right-hand sides, field
observations) without forming weights, and marching solves the causal
system step by step, inverting only the zeroth weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
from numpy.polynomial import polynomial as npoly
from scipy.integrate import trapezoid
from scipy.linalg import lu_factor, lu_solve
from scipy.signal import lfilter


@dataclass(frozen=True)
class Multistep:
    """A-stable multistep method given by delta(zeta) = num / den."""

    name: str
    order: int
    num: tuple
    den: tuple

    def delta(self, zeta):
        zeta = np.asarray(zeta)
        return npoly.polyval(zeta, self.num) / npoly.polyval(zeta, self.den)


BDF1 = Multistep("bdf1", 1, (1.0, -1.0), (1.0,))
BDF2 = Multistep("bdf2", 2, (1.5, -2.0, 0.5), (1.0,))
TRAPEZOIDAL = Multistep("trapezoidal", 2, (2.0, -2.0), (1.0, 1.0))

METHODS = {m.name: m for m in (BDF1, BDF2, TRAPEZOIDAL)}


def method_by_name(name):
    if isinstance(name, Multistep):
        return name
    try:
        return METHODS[name]
    except KeyError:
        raise ValueError(f"unknown multistep method {name!r}") from None


@dataclass(frozen=True)
class ContourNodes:
    """Sampling contour of one convolution quadrature discretization.

    s holds the size // 2 + 1 Laplace points of the upper half circle;
    the lower half is their conjugate and is never evaluated.
    """

    method: Multistep
    dt: float
    size: int
    eps: float
    rho: float
    s: np.ndarray

    @property
    def half(self):
        return self.size // 2 + 1


# Aliasing targets.  The radius rho = eps**(1/(2*size)) amplifies FFT
# round-off by up to 1/sqrt(eps), so eps must not sit far below the
# working precision: the best achievable accuracy is about sqrt(eps) in
# either case, reached when eps matches the machine epsilon.
EPS_DOUBLE = 1e-14
EPS_SINGLE = float(np.finfo(np.float32).eps)


def contour_nodes(method, dt, size, eps=EPS_DOUBLE):
    """Laplace points for weights of length size at step dt."""
    method = method_by_name(method)
    if size < 1:
        raise ValueError("need at least one step")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rho = eps ** (1.0 / (2 * size))
    zeta = rho * np.exp(2j * np.pi * np.arange(size // 2 + 1) / size)
    s = method.delta(zeta) / dt
    return ContourNodes(method, float(dt), int(size), float(eps), float(rho), s)


def weights_from_samples(samples, nodes, n_steps=None, dtype=None):
    """Convolution weights from transfer samples on the half contour.

    samples has shape (nodes.half, ...); the result stacks weights
    w_0 .. w_{n-1} along axis 0.  complex64 samples give a float32
    stack, which is what large marching runs want.
    """
    samples = np.asarray(samples)
    if samples.shape[0] != nodes.half:
        raise ValueError("sample count does not match the contour")
    w = scipy.fft.irfft(np.conjugate(samples), n=nodes.size, axis=0)
    scale = (nodes.rho ** -np.arange(nodes.size)).astype(w.dtype)
    w *= scale.reshape((-1,) + (1,) * (w.ndim - 1))
    w = w[: n_steps if n_steps is not None else nodes.size]
    return w.astype(dtype) if dtype is not None else w


def operator_weights(transfer, method, dt, n_steps, eps=None, dtype=None):
    """Weight stack of a scalar or matrix transfer function.

    transfer maps one Laplace point to a scalar or a matrix; it is
    evaluated on the half contour only.  eps defaults to the aliasing
    target matching dtype (single precision stacks need the looser one,
    see EPS_SINGLE above).
    """
    if eps is None:
        eps = EPS_SINGLE if dtype == np.float32 else EPS_DOUBLE
    nodes = contour_nodes(method, dt, n_steps, eps)
    first = np.asarray(transfer(nodes.s[0]), dtype=np.complex128)
    sample_dtype = np.complex64 if dtype == np.float32 else np.complex128
    stack = np.empty((nodes.half,) + first.shape, dtype=sample_dtype)
    stack[0] = first
    for i in range(1, nodes.half):
        stack[i] = transfer(nodes.s[i])
    return weights_from_samples(stack, nodes, n_steps, dtype)


def damped_spectrum(g, nodes):
    """Half-contour spectrum of real causal samples g along axis 0.

    Sampling a transfer on nodes.s and multiplying by this spectrum
    node by node realizes the convolution; undamped_signal transforms
    the products back.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] > nodes.size:
        raise ValueError("signal longer than the contour resolves")
    damp = nodes.rho ** np.arange(g.shape[0])
    gr = g * damp.reshape((-1,) + (1,) * (g.ndim - 1))
    return np.conjugate(scipy.fft.rfft(gr, n=nodes.size, axis=0))


def undamped_signal(spectrum, nodes, n_out=None):
    """Inverse of damped_spectrum: back to time samples along axis 0."""
    out = scipy.fft.irfft(np.conjugate(spectrum), n=nodes.size, axis=0)
    k = n_out if n_out is not None else nodes.size
    scale = (nodes.rho ** -np.arange(k)).astype(out.dtype)
    return out[:k] * scale.reshape((-1,) + (1,) * (out.ndim - 1))


def convolve_samples(values, g, nodes, n_out=None):
    """Causal convolution (F * g) from transfer samples on the half
    contour, without forming weights.

    values: (half,) scalars or (half, m, n) matrices; g: real samples
    (N,) or (N, n) with N <= nodes.size.  Returns (n_out, ...) where
    n_out defaults to N.
    """
    values = np.asarray(values)
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[0]
    ghat = damped_spectrum(g, nodes)
    if values.ndim == 1:
        prod = values.reshape((-1,) + (1,) * (ghat.ndim - 1)) * ghat
    elif values.ndim == 3 and ghat.ndim == 2:
        prod = np.einsum("hmn,hn->hm", values, ghat)
    else:
        raise ValueError("values must be scalars or matrices matching g")
    return undamped_signal(prod, nodes, n_out if n_out is not None else n)


def apply_transfer(transfer, g, method, dt, eps=EPS_DOUBLE):
    """Convenience forward convolution: evaluate the transfer on the
    contour matching len(g) and convolve."""
    g = np.asarray(g, dtype=np.float64)
    nodes = contour_nodes(method, dt, g.shape[0], eps)
    values = np.stack([np.asarray(transfer(s)) for s in nodes.s])
    return convolve_samples(values, g, nodes)


def march(weights, rhs, solve=None):
    """Solve the causal system sum_m W_m x_{n-m} = rhs_n step by step.

    weights: (N, d, d) stack (float32 is fine) or (N,) scalars; rhs
    (N, d) or (N,).  Only W_0 is inverted, once, in float64; history
    products run in the stack's own precision.  solve overrides the
    default LU of W_0 with a callable b -> x.
    """
    weights = np.asarray(weights)
    rhs = np.asarray(rhs, dtype=np.float64)
    scalar = weights.ndim == 1
    if scalar:
        weights = weights.reshape(-1, 1, 1)
        rhs = rhs.reshape(-1, 1)
    n, d = rhs.shape
    if weights.shape[0] < n:
        raise ValueError("fewer weights than steps")
    if solve is None:
        lu = lu_factor(weights[0].astype(np.float64))
        solve = lambda b: lu_solve(lu, b)
    x = np.zeros((n, d))
    past = np.zeros((n, d, 1), dtype=weights.dtype)
    scratch = np.empty((n, d, 1), dtype=weights.dtype)
    for step in range(n):
        b = rhs[step].copy()
        if step:
            np.matmul(weights[1 : step + 1], past[step - 1 :: -1], out=scratch[:step])
            b -= scratch[:step, :, 0].sum(axis=0, dtype=np.float64)
        x[step] = solve(b)
        past[step, :, 0] = x[step]
    return x[:, 0] if scalar else x


def derivative_filter(method, dt):
    """Exact rational realization (b, a) of the method's derivative."""
    method = method_by_name(method)
    return np.asarray(method.num) / dt, np.asarray(method.den, dtype=float)


def antiderivative_filter(method, dt):
    method = method_by_name(method)
    return np.asarray(method.den) * dt, np.asarray(method.num, dtype=float)


def differentiate(g, method, dt, order=1):
    """Apply the method's discrete derivative along axis 0."""
    b, a = derivative_filter(method, dt)
    out = np.asarray(g, dtype=np.float64)
    for _ in range(order):
        out = lfilter(b, a, out, axis=0)
    return out


def integrate(g, method, dt):
    """Apply the method's discrete antiderivative along axis 0."""
    b, a = antiderivative_filter(method, dt)
    return lfilter(b, a, np.asarray(g, dtype=np.float64), axis=0)


def h2_seminorm(samples, dt, norm=None):
    """Cumulative second order data functional of a sampled signal:
    the sum over derivatives 0..2 of the time integral of the norm.

    norm maps the (N, ...) sample array to (N,) values; the default is
    the Euclidean norm over the trailing axes.
    """
    g = np.asarray(samples, dtype=np.float64)
    if norm is None:
        norm = lambda arr: np.linalg.norm(arr.reshape(arr.shape[0], -1), axis=1)
    total = 0.0
    for _ in range(3):
        total += float(trapezoid(norm(g), dx=dt))
        g = np.gradient(g, dt, axis=0, edge_order=2)
    return total
