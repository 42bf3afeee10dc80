"""Scalar Gaussians, invertible transform chains, and moment propagation.

Three propagation engines are provided: a structural closed form for
affine/exp-affine chains (log-normal identities), Gauss-Hermite quadrature
for everything defined on the real line (notably sigmoid chains), and
seeded Monte Carlo. All bijector maths is written with numpy ufuncs so the
same code accepts scalars or arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DomainError, NoClosedFormError

__all__ = [
    "Gaussian1",
    "Moments1",
    "Bijector",
    "Affine",
    "Exp",
    "Sigmoid",
    "TransformChain",
    "chain_forward",
    "chain_inverse",
    "chain_log_density",
    "has_closed_form",
    "propagate_closed_form",
    "propagate_quadrature",
    "propagate_mc",
    "propagate",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Gaussian1:
    """One-dimensional Gaussian with mean ``mu`` and variance ``var`` (>= 0).

    ``var == 0`` is allowed and treated as a point mass throughout.
    """

    mu: float
    var: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.var)):
            raise DomainError(f"Gaussian1 parameters must be finite, got ({self.mu}, {self.var})")
        if self.var < 0:
            raise DomainError(f"Gaussian1 variance must be >= 0, got {self.var}")

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def log_pdf(self, z):
        if self.var <= 0:
            raise DomainError("log_pdf undefined for a point mass (var == 0)")
        z = np.asarray(z, dtype=float)
        return -0.5 * ((z - self.mu) ** 2 / self.var) - 0.5 * (_LOG_2PI + np.log(self.var))


@dataclass(frozen=True)
class Moments1:
    """Mean and standard deviation of a transformed variable."""

    mean: float
    sd: float

    def __post_init__(self):
        if self.sd < 0:
            raise DomainError(f"Moments1 sd must be >= 0, got {self.sd}")


class Bijector:
    """Invertible scalar map; subclasses define the three core methods.

    ``log_abs_deriv(y)`` is log|df/dy| of the *inverse* f, i.e. the scalar
    log-Jacobian term of the change of variables evaluated at y.
    """

    def forward(self, z):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def log_abs_deriv(self, y):
        raise NotImplementedError


@dataclass(frozen=True)
class Affine(Bijector):
    """y = scale * z + shift, scale != 0."""

    scale: float
    shift: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.scale) == 0):
            raise DomainError("Affine scale must be nonzero")

    def forward(self, z):
        return self.scale * np.asarray(z, dtype=float) + self.shift

    def inverse(self, y):
        return (np.asarray(y, dtype=float) - self.shift) / self.scale

    def log_abs_deriv(self, y):
        return -np.log(np.abs(self.scale)) + np.zeros_like(np.asarray(y, dtype=float))


@dataclass(frozen=True)
class Exp(Bijector):
    """y = exp(z); inverse defined on (0, inf)."""

    def forward(self, z):
        return np.exp(np.asarray(z, dtype=float))

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise DomainError("Exp inverse requires y > 0")
        return np.log(y)

    def log_abs_deriv(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise DomainError("Exp log-derivative requires y > 0")
        return -np.log(y)


@dataclass(frozen=True)
class Sigmoid(Bijector):
    """y = 1 / (1 + exp(-z)); inverse defined on (0, 1)."""

    def forward(self, z):
        return expit(np.asarray(z, dtype=float))

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any((y <= 0) | (y >= 1)):
            raise DomainError("Sigmoid inverse requires 0 < y < 1")
        return np.log(y) - np.log1p(-y)

    def log_abs_deriv(self, y):
        y = np.asarray(y, dtype=float)
        if np.any((y <= 0) | (y >= 1)):
            raise DomainError("Sigmoid log-derivative requires 0 < y < 1")
        return -(np.log(y) + np.log1p(-y))


@dataclass(frozen=True, init=False)
class TransformChain:
    """Ordered bijector sequence; forward applies steps left to right."""

    steps: tuple[Bijector, ...]

    def __init__(self, steps):
        object.__setattr__(self, "steps", tuple(steps))

    def forward(self, z):
        for step in self.steps:
            z = step.forward(z)
        return z

    def inverse(self, y):
        for step in reversed(self.steps):
            y = step.inverse(y)
        return y


def chain_forward(chain: TransformChain, z):
    """Apply every step of the chain left to right."""
    return chain.forward(z)


def chain_inverse(chain: TransformChain, y):
    """Apply the step inverses in reverse order."""
    return chain.inverse(y)


def chain_log_density(chain: TransformChain, base: Gaussian1, y):
    """Log density of the pushforward of ``base`` through ``chain`` at y.

    Change of variables: log p_Y(y) = log p_Z(f(y)) + log|det Df(y)| with f
    the full chain inverse; the Jacobian term accumulates per step at the
    partially inverted value.
    """
    if base.var <= 0:
        raise DomainError("chain_log_density requires base.var > 0")
    cur = np.asarray(y, dtype=float)
    log_det = np.zeros_like(cur)
    for step in reversed(chain.steps):
        log_det = log_det + step.log_abs_deriv(cur)
        cur = step.inverse(cur)
    out = base.log_pdf(cur) + log_det
    return out if np.ndim(y) else float(out)


def _lognormal_mean_sd(mu, var):
    """Mean and sd of exp(Z), Z ~ N(mu, var); exact log-normal identities."""
    mean = np.exp(mu + 0.5 * var)
    sd = np.exp(mu) * np.sqrt(np.expm1(var) * np.exp(var))
    return mean, sd


def _closed_form_mean_sd(steps, mu, var):
    """Vector-friendly closed-form kernel; raises NoClosedFormError if the
    chain is not affine-only or affine/Exp/affine."""
    n_exp = sum(isinstance(s, Exp) for s in steps)
    if n_exp > 1 or any(isinstance(s, Sigmoid) for s in steps):
        raise NoClosedFormError(
            "no closed form: chain must be pure affine or affine∘Exp∘affine"
        )
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    i = 0
    while i < len(steps) and isinstance(steps[i], Affine):
        a = steps[i]
        mu = a.scale * mu + a.shift
        var = a.scale**2 * var
        i += 1
    if i < len(steps):  # steps[i] is the Exp
        mean, sd = _lognormal_mean_sd(mu, var)
        i += 1
    else:
        mean, sd = mu, np.sqrt(var)
    for step in steps[i:]:
        mean = step.scale * mean + step.shift
        sd = np.abs(step.scale) * sd
    return mean, sd


def has_closed_form(chain: TransformChain) -> bool:
    """True if the chain is pure affine or affine∘Exp∘affine."""
    n_exp = sum(isinstance(s, Exp) for s in chain.steps)
    return n_exp <= 1 and not any(isinstance(s, Sigmoid) for s in chain.steps)


def propagate_closed_form(chain: TransformChain, base: Gaussian1) -> Moments1:
    """Exact pushforward moments for the closed-form chain families.

    Affine steps act linearly on moments; a single Exp step maps the
    Gaussian to a log-normal whose mean/sd follow the standard identities.
    Raises NoClosedFormError for any other structure.
    """
    mean, sd = _closed_form_mean_sd(chain.steps, base.mu, base.var)
    return Moments1(float(mean), float(sd))


def propagate_quadrature(chain: TransformChain, base: Gaussian1, nodes: int = 64) -> Moments1:
    """Gauss-Hermite estimate of the pushforward mean/sd.

    The second moment is computed centered (two passes over the nodes) to
    avoid cancellation, which also makes affine chains exact for nodes >= 2.
    """
    if nodes < 2:
        raise DomainError(f"propagate_quadrature requires nodes >= 2, got {nodes}")
    x, w = np.polynomial.hermite.hermgauss(nodes)
    t = base.mu + math.sqrt(2.0) * base.sd * x
    y = chain.forward(t)
    w = w / math.sqrt(math.pi)
    mean = float(np.dot(w, y))
    second = float(np.dot(w, (y - mean) ** 2))
    return Moments1(mean, math.sqrt(max(second, 0.0)))


def propagate_mc(chain: TransformChain, base: Gaussian1, samples: int, seed: int) -> Moments1:
    """Monte-Carlo estimate of the pushforward mean/sd, deterministic per seed.

    Draws are standardized to the exact base mean/sd (moment matching), so
    linear chains propagate exactly; nonlinear chains keep the usual
    sampling error driven by higher moments.
    """
    if samples < 2:
        raise DomainError(f"propagate_mc requires samples >= 2, got {samples}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(samples)
    s = z.std()
    if base.var > 0 and s > 0:
        z = base.mu + base.sd * ((z - z.mean()) / s)
    else:
        z = np.full(samples, base.mu)
    y = np.asarray(chain.forward(z), dtype=float)
    return Moments1(float(y.mean()), float(y.std()))


def propagate(chain: TransformChain, base: Gaussian1, nodes: int = 64) -> Moments1:
    """Closed form when the chain structure allows it, else quadrature."""
    try:
        return propagate_closed_form(chain, base)
    except NoClosedFormError:
        return propagate_quadrature(chain, base, nodes=nodes)
