"""Distance-generating functions, Bregman divergences, regularizers and the simplex prox-mapping.

All routines act along the last axis, so a whole policy (one simplex point per
state) can be passed at once.

Divergences follow the ``divergence(geom, from_, to)`` convention
``D = omega(to) - omega(from_) - <grad omega(from_), to - from_>``, so for KL it is
``sum(to * log(to / from_))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

KL_FLOOR = 1e-300
BISECTION_MAX_ITER = 200
BISECTION_GAP = 1e-12


# --------------------------------------------------------------------------- geometry


@dataclass(frozen=True)
class ProxGeometry:
    kind: str  # "euclidean" | "kl" | "tsallis"
    p: float | None = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "kl", "tsallis"):
            raise ValueError(f"unknown geometry {self.kind!r}")
        if self.kind == "tsallis":
            if self.p is None or not 0.0 < self.p < 1.0:
                raise ValueError(f"Tsallis parameter p must lie in (0, 1), got {self.p!r}")
        elif self.p is not None:
            raise ValueError(f"geometry {self.kind!r} takes no parameter")

    @property
    def norm(self) -> str:
        return "l2" if self.kind == "euclidean" else "l1"

    @property
    def tag(self) -> str:
        return f"tsallis:p={self.p:g}" if self.kind == "tsallis" else self.kind

    def omega(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return 0.5 * np.sum(x * x, axis=-1)
        if self.kind == "kl":
            return np.sum(xlogy(x, x), axis=-1)
        p = self.p
        return -np.sum(x**p, axis=-1) / (p * (1.0 - p))

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return x
        with np.errstate(divide="ignore"):
            if self.kind == "kl":
                return np.log(x) + 1.0
            return -(x ** (self.p - 1.0)) / (1.0 - self.p)

    def distance(self, x, y) -> np.ndarray:
        """Half the squared norm the geometry is 1-strongly convex with respect to."""
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        if self.norm == "l2":
            return 0.5 * np.sum(d * d, axis=-1)
        return 0.5 * np.sum(np.abs(d), axis=-1) ** 2


EUCLIDEAN = ProxGeometry("euclidean")
KL = ProxGeometry("kl")


def tsallis(p: float) -> ProxGeometry:
    return ProxGeometry("tsallis", float(p))


def divergence(geom: ProxGeometry, from_, to) -> np.ndarray | float:
    """Bregman divergence D(from_, to); +inf where ``to`` has mass that ``from_`` lacks (KL, Tsallis)."""
    x = np.asarray(from_, dtype=float)
    y = np.asarray(to, dtype=float)
    if geom.kind == "euclidean":
        d = y - x
        out = 0.5 * np.sum(d * d, axis=-1)
    elif geom.kind == "kl":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(y > 0, xlogy(y, y) - xlogy(y, x), 0.0)
            terms = np.where((y > 0) & (x <= 0), np.inf, terms)
        out = np.sum(terms, axis=-1)
    else:
        p = geom.p
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = np.where(y > 0, p * x ** (p - 1.0) * y, 0.0)
            cross = np.where((y > 0) & (x <= 0), np.inf, cross)
        terms = -(y**p) + (1.0 - p) * x**p + cross
        out = np.sum(terms, axis=-1) / (p * (1.0 - p))
    # round-off can leave tiny negatives
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def d0_bound(geom: ProxGeometry, n_actions: int) -> float:
    """Bound on D(uniform, pi) over all pi in the simplex."""
    if n_actions < 2:
        raise ValueError("d0_bound needs at least two actions")
    if geom.kind == "euclidean":
        return 1.0
    if geom.kind == "kl":
        return math.log(n_actions)
    p = geom.p
    return (n_actions ** (1.0 - p) - 1.0) / (p * (1.0 - p))


# --------------------------------------------------------------------------- regularizers


@dataclass(frozen=True)
class Regularizer:
    """Convex h on the simplex with range [0, hbar].

    ``negentropy`` is h(p) = mu * (sum p log p + log |A|), which is mu-strongly
    convex with respect to the l1 norm and vanishes at the uniform distribution.
    """

    kind: str  # "zero" | "negentropy"
    mu: float = 0.0

    def __post_init__(self):
        if self.kind == "zero":
            if self.mu != 0.0:
                raise ValueError("the zero regularizer has mu = 0")
        elif self.kind == "negentropy":
            if not self.mu > 0.0:
                raise ValueError(f"negentropy needs mu > 0, got {self.mu!r}")
        else:
            raise ValueError(f"unknown regularizer {self.kind!r}")
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def tag(self) -> str:
        return "zero" if self.kind == "zero" else f"negentropy:mu={self.mu:g}"

    def hbar(self, n_actions: int) -> float:
        return 0.0 if self.kind == "zero" else self.mu * math.log(n_actions)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros(x.shape[:-1])
        n = x.shape[-1]
        return self.mu * (np.sum(xlogy(x, x), axis=-1) + math.log(n))

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        with np.errstate(divide="ignore"):
            return self.mu * (np.log(x) + 1.0)

    def simplex_min(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """min over the simplex of <q, p> + h(p), row-wise; returns (values, minimizers).

        Zero: greedy vertex, ties to the lowest index. Negentropy: Gibbs
        distribution over -q / mu and the matching soft-min value.
        """
        q = np.asarray(q, dtype=float)
        if self.kind == "zero":
            idx = np.argmin(q, axis=-1)
            pi = np.zeros_like(q)
            np.put_along_axis(pi, idx[..., None], 1.0, axis=-1)
            return np.take_along_axis(q, idx[..., None], axis=-1)[..., 0], pi
        n = q.shape[-1]
        z = -q / self.mu
        value = -self.mu * logsumexp(z, axis=-1) + self.mu * math.log(n)
        return value, softmax(z, axis=-1)


ZERO = Regularizer("zero")


def negentropy(mu: float) -> Regularizer:
    return Regularizer("negentropy", float(mu))


def parse_geometry(tag: str) -> ProxGeometry:
    name, _, params = tag.strip().lower().partition(":")
    if name == "tsallis":
        kv = _parse_params(params, tag)
        if set(kv) != {"p"}:
            raise ValueError(f"geometry tag {tag!r}: expected 'tsallis:p=<value>'")
        return tsallis(kv["p"])
    if params:
        raise ValueError(f"geometry tag {tag!r} takes no parameters")
    return ProxGeometry(name)


def parse_regularizer(tag: str) -> Regularizer:
    name, _, params = tag.strip().lower().partition(":")
    if name == "negentropy":
        kv = _parse_params(params, tag)
        if set(kv) != {"mu"}:
            raise ValueError(f"regularizer tag {tag!r}: expected 'negentropy:mu=<value>'")
        return negentropy(kv["mu"])
    if params:
        raise ValueError(f"regularizer tag {tag!r} takes no parameters")
    return Regularizer(name)


def _parse_params(params: str, tag: str) -> dict[str, float]:
    out = {}
    for item in filter(None, params.split(",")):
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"malformed parameter {item!r} in tag {tag!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ValueError(f"non-numeric parameter {item!r} in tag {tag!r}") from None
    return out


def check_pairing(geom: ProxGeometry, reg: Regularizer) -> None:
    """Only KL carries a strongly convex regularizer; Euclidean and Tsallis run with h = 0."""
    if reg.kind != "zero" and geom.kind != "kl":
        raise ValueError(f"regularizer {reg.tag} is only supported with the KL geometry, not {geom.tag}")


# --------------------------------------------------------------------------- prox mapping


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex (sort and threshold)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    u = -np.sort(-y, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.count_nonzero(u - css / ind > 0, axis=-1)
    theta = np.take_along_axis(css, rho[..., None] - 1, axis=-1) / rho[..., None]
    return np.maximum(y - theta, 0.0)


def _kl_prox(current, q, eta, mu):
    logits = np.log(np.maximum(current, KL_FLOOR)) - eta * q
    if mu > 0:
        logits = logits / (1.0 + eta * mu)
    p = softmax(logits, axis=-1)
    p = np.maximum(p, KL_FLOOR)
    return p / np.sum(p, axis=-1, keepdims=True)


def _tsallis_prox(current, q, eta, p):
    # Stationarity: x_a^(p-1) / (1-p) = z_a - lam with z = eta q - grad omega(current).
    n = q.shape[-1]
    a = 1.0 - p
    z = eta * q + np.maximum(current, KL_FLOOR) ** (p - 1.0) / a

    def point(lam):
        return (a * (z - lam[..., None])) ** (-1.0 / a)

    lo = np.min(z, axis=-1) - n**a / a  # every coordinate <= 1/n
    hi = np.min(z, axis=-1) - 1.0 / a  # the smallest-z coordinate equals 1
    assert np.all(point(lo).sum(axis=-1) <= 1.0 + 1e-12), "Tsallis dual bracket (lower) failed"
    assert np.all(point(hi).sum(axis=-1) >= 1.0 - 1e-12), "Tsallis dual bracket (upper) failed"
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        above = point(mid).sum(axis=-1) > 1.0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= BISECTION_GAP * np.maximum(1.0, np.abs(mid))):
            break
    lam = 0.5 * (lo + hi)
    # Newton polish on sum(x(lam)) = 1; the map is smooth and increasing
    for _ in range(3):
        x = point(lam)
        slope = np.sum(x / (a * (z - lam[..., None])), axis=-1)
        step = (np.sum(x, axis=-1) - 1.0) / slope
        lam = np.clip(lam - step, lo - BISECTION_GAP, np.nextafter(np.min(z, axis=-1), -np.inf))
    x = point(lam)
    return x / np.sum(x, axis=-1, keepdims=True)


def prox_step(geom: ProxGeometry, reg: Regularizer, current, q, eta: float) -> np.ndarray:
    """argmin over the simplex of eta * (<q, x> + h(x)) + D(current, x), row-wise."""
    current = np.asarray(current, dtype=float)
    q = np.asarray(q, dtype=float)
    if current.shape != q.shape:
        raise ValueError(f"shape mismatch: current {current.shape} vs q {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("prox_step requires a finite q")
    if not eta > 0:
        raise ValueError(f"stepsize must be positive, got {eta!r}")
    check_pairing(geom, reg)
    if geom.kind == "euclidean":
        return project_simplex(current - eta * q)
    if geom.kind == "kl":
        return _kl_prox(current, q, eta, reg.mu)
    return _tsallis_prox(current, q, eta, geom.p)


def prox_objective(geom: ProxGeometry, reg: Regularizer, current, q, eta: float, x) -> np.ndarray:
    """The function prox_step minimizes, evaluated at ``x`` (broadcast along leading axes)."""
    x = np.asarray(x, dtype=float)
    return eta * (np.sum(np.asarray(q) * x, axis=-1) + reg.value(x)) + divergence(geom, current, x)


def kkt_residual(geom: ProxGeometry, reg: Regularizer, current, q, eta: float, x,
                 support_tol: float = 1e-12, relative: bool = False) -> np.ndarray:
    """Largest violation of the optimality conditions of the prox problem at ``x``.

    On the support, eta * (q + h'(x)) + grad omega(x) - grad omega(current) must be
    a constant; off the support (only reachable for Euclidean) the same expression
    may not fall below that constant. With ``relative`` the residual is divided
    by max(1, largest magnitude among those terms), which is the precision float
    arithmetic can deliver when a gradient is huge.
    """
    x = np.asarray(x, dtype=float)
    current = np.asarray(current, dtype=float)
    support = x > support_tol
    lhs = eta * (np.asarray(q) + reg.grad(np.where(support, x, 1.0))) + \
        geom.grad(np.where(support, x, 1.0)) - geom.grad(np.maximum(current, KL_FLOOR))
    if geom.kind == "euclidean":
        lhs = np.where(support, lhs, eta * np.asarray(q) - current + x)
    on = np.where(support, lhs, np.nan)
    hi = np.nanmax(on, axis=-1)
    lo = np.nanmin(on, axis=-1)
    lam = 0.5 * (hi + lo)
    res = 0.5 * (hi - lo)
    off = np.where(support, np.inf, lhs)
    slack = np.maximum(lam - np.min(off, axis=-1), 0.0)
    out = np.maximum(res, slack)
    if relative:
        terms = [np.abs(eta * np.asarray(q)), np.abs(geom.grad(np.maximum(current, KL_FLOOR)))]
        scale = np.max(np.where(support, np.maximum(*terms), 0.0), axis=-1)
        out = out / np.maximum(1.0, scale)
    return out
