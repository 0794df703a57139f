"""Privacy-loss distributions for univariate mixture-Gaussian vs Gaussian pairs.

The privacy loss of (sum_i w_i N(m_i, s^2), N(0, s^2)) is monotone in the
outcome when all means are non-negative, so hockey-stick divergences reduce to
one-dimensional Gaussian tail sums around a bisected threshold.  Losses are
quantized pessimistically (connect-the-dots: exact delta at the grid
epsilons, dominating chords between them; truncated tails folded into the
bottom point or the +infinity atom) so that the discretized delta dominates
the exact one at every epsilon, and composition is plain convolution on the
shared grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import log_ndtr, ndtr, ndtri

LOSS_FLOOR = -50.0
TAIL_MASS = 1e-15
GRID_POINTS = 1000
_DIRECT_CONV_LIMIT = 4096

REMOVE = "remove"
ADD = "add"


@dataclass(frozen=True)
class MixGaussPair:
    """Dominating pair (mixture vs N(0, sigma)); `direction` fixes the order.

    remove: first = mixture, second = N(0, sigma).
    add:    first = N(0, sigma), second = mixture.
    Construction sorts the means, merges duplicates and drops zero-weight
    components; neither changes the distribution.
    """

    means: np.ndarray
    weights: np.ndarray
    sigma: float
    direction: str

    def __init__(self, means, weights, sigma, direction):
        means = np.atleast_1d(np.asarray(means, dtype=float))
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if means.shape != weights.shape or means.ndim != 1:
            raise ValueError("means and weights must be 1-d vectors of equal length")
        if np.any(means < 0):
            raise ValueError("mixture means must be non-negative")
        if np.any(weights < -1e-12) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        if direction not in (REMOVE, ADD):
            raise ValueError(f"direction must be 'remove' or 'add', got {direction!r}")
        keep = weights > 0.0
        means, weights = means[keep], weights[keep]
        order = np.argsort(means)
        means, weights = means[order], weights[order]
        uniq, inverse = np.unique(means, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inverse, weights)
        for name, value in (
            ("means", _ro(uniq)),
            ("weights", _ro(merged)),
            ("sigma", float(sigma)),
            ("direction", direction),
        ):
            object.__setattr__(self, name, value)

    def key(self) -> tuple:
        return (self.direction, self.sigma, tuple(self.means), tuple(self.weights))

    @property
    def degenerate(self) -> bool:
        """True when the mixture collapses to N(0, sigma), i.e. the pair is (Q, Q)."""
        return bool(np.all(self.means == 0.0))


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def _mix_loss(pair: MixGaussPair, y: np.ndarray) -> np.ndarray:
    """log(mixture / N(0, sigma)) at y; strictly increasing when some mean > 0."""
    m = pair.means[None, :]
    w = np.log(pair.weights)[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=float))[:, None]
    vals = (2.0 * m * y - m * m) / (2.0 * pair.sigma**2) + w
    top = vals.max(axis=1)
    return top + np.log(np.exp(vals - top[:, None]).sum(axis=1))


def _mix_loss_inverse(pair: MixGaussPair, ell: np.ndarray) -> np.ndarray:
    """Solve _mix_loss(y) = ell for y by vectorized bisection.

    Values of ell at or below the loss infimum map to an effectively -inf
    threshold (every Gaussian tail evaluates to 0 there).
    """
    ell = np.atleast_1d(np.asarray(ell, dtype=float))
    sigma = pair.sigma
    m_max = pair.means[-1]
    w_max = pair.weights[-1]
    lo = np.full(ell.shape, -64.0 * sigma - m_max)
    # L(y) >= log(w_max) + (2 m_max y - m_max^2)/(2 s^2): solve for a sure upper end.
    hi = (sigma**2 * (ell - math.log(w_max)) + m_max**2 / 2.0) / m_max
    hi = np.maximum(hi, lo + sigma)
    tol = 1e-13 * sigma
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        high = _mix_loss(pair, mid) >= ell
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
        if np.max(hi - lo) < tol:
            break
    return 0.5 * (lo + hi)


def _delta_grid(pair: MixGaussPair, epsilons: np.ndarray) -> np.ndarray:
    """Exact hockey-stick divergence at each epsilon (vectorized)."""
    sigma = pair.sigma
    eps = np.asarray(epsilons, dtype=float)
    if pair.direction == REMOVE:
        y = _mix_loss_inverse(pair, eps)
        first = ndtr((pair.means[None, :] - y[:, None]) / sigma) @ pair.weights
        second = np.exp(eps + log_ndtr(-y / sigma))
    else:
        y = _mix_loss_inverse(pair, -eps)
        first = ndtr(y / sigma)
        second = np.exp(
            eps[:, None] + log_ndtr((y[:, None] - pair.means[None, :]) / sigma)
        ) @ pair.weights
    return np.clip(first - second, 0.0, 1.0)


def hockey_stick(pair: MixGaussPair, epsilon: float) -> float:
    """Exact hockey-stick divergence of the pair at e^epsilon."""
    if pair.degenerate:
        return max(0.0, -math.expm1(epsilon))
    return float(_delta_grid(pair, np.array([epsilon]))[0])


def _loss_quantile(pair: MixGaussPair, q: float) -> float:
    """Loss value at the q-quantile of the loss under the pair's first element.

    The loss is monotone in the outcome y, so this is the loss evaluated at a
    y-space quantile: the mixture's for remove (bisected between exact
    brackets), the single Gaussian's for add (closed form).
    """
    sigma = pair.sigma
    if pair.direction == ADD:
        y = sigma * float(ndtri(1.0 - q))
        return -float(_mix_loss(pair, np.array([y]))[0])
    z = float(ndtri(q))
    lo = pair.means[0] + sigma * z
    hi = pair.means[-1] + sigma * z
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(pair.weights @ ndtr((mid - pair.means) / sigma)) >= q:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12 * sigma:
            break
    return float(_mix_loss(pair, np.array([hi]))[0])


@dataclass(frozen=True)
class DiscretePLD:
    """Quantized privacy-loss distribution on the grid {j*h}.

    pmf[i] is the mass at loss (lo_index + i)*h; infinity_mass collects the
    truncated upper tail (and anything rounded to +inf), so total mass is 1.
    """

    h: float
    lo_index: int
    pmf: np.ndarray
    infinity_mass: float

    @property
    def origin(self) -> int:
        """Index of loss 0 in pmf coordinates (may fall outside the support)."""
        return -self.lo_index

    def losses(self) -> np.ndarray:
        return (self.lo_index + np.arange(self.pmf.size)) * self.h

    def total_mass(self) -> float:
        return float(self.pmf.sum() + self.infinity_mass)


def point_mass_pld(h: float) -> DiscretePLD:
    return DiscretePLD(h=h, lo_index=0, pmf=_ro(np.array([1.0])), infinity_mass=0.0)


def discretize(
    pair: MixGaussPair,
    h: float,
    loss_floor: float = LOSS_FLOOR,
    tail_mass: float = TAIL_MASS,
) -> DiscretePLD:
    """Pessimistic quantization of the pair's privacy-loss distribution.

    Connect-the-dots construction: the discrete distribution on the grid
    reproduces the exact delta(epsilon) at every grid point, and between grid
    points its delta is the chord in e^epsilon, which lies above the exact
    (convex) curve.  Mass below the first grid point (at most tail_mass plus
    whatever lies under loss_floor) is folded up into it and the upper tail
    beyond the (1 - tail_mass) quantile becomes infinity_mass, both of which
    only raise delta.  The induced delta therefore upper-bounds
    hockey_stick(pair, epsilon) everywhere.
    """
    if h <= 0:
        raise ValueError(f"grid spacing must be positive, got {h}")
    if pair.degenerate:
        return point_mass_pld(h)
    x_hi = _loss_quantile(pair, 1.0 - tail_mass)
    x_lo = max(loss_floor, _loss_quantile(pair, tail_mass))
    j_lo = math.ceil(x_lo / h - 1e-9)
    j_hi = max(math.ceil(x_hi / h), j_lo + 1)
    grid = np.arange(j_lo, j_hi + 1) * h
    deltas = _delta_grid(pair, grid)
    # p_j = e^h A_{j-1} - A_j with A_j = (delta_j - delta_{j+1})/(e^h - 1) and
    # A at the top edge 0; the bottom point absorbs the remaining mass.
    a = np.concatenate([np.diff(deltas) / -math.expm1(h), [0.0]])  # A_j, j = lo..hi
    raw = math.exp(h) * np.concatenate([[0.0], a[:-1]]) - a
    raw[0] = 0.0
    # Float dust makes some entries dip a hair below zero where the curve is
    # nearly affine in e^eps; cancel dips against neighbouring mass instead of
    # clipping them (one-sided clipping inflates the total).
    head = np.maximum.accumulate(np.cumsum(raw))
    pmf = np.diff(head, prepend=0.0)
    infinity_mass = float(deltas[-1])
    pmf[0] = max(0.0, 1.0 - infinity_mass - float(pmf[1:].sum()))
    return DiscretePLD(h=h, lo_index=j_lo, pmf=_ro(pmf), infinity_mass=infinity_mass)


def auto_spacing(
    pairs,
    loss_floor: float = LOSS_FLOOR,
    tail_mass: float = TAIL_MASS,
    grid_points: int = GRID_POINTS,
) -> float:
    """Grid spacing so the widest pair needs about `grid_points` points."""
    span = 0.0
    for pair in pairs:
        if pair.degenerate:
            continue
        hi = _loss_quantile(pair, 1.0 - tail_mass)
        lo = max(loss_floor, _loss_quantile(pair, tail_mass))
        span = max(span, hi - lo)
    if span <= 0.0:
        return 1e-4
    return span / (grid_points - 1)


def _convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size + b.size <= _DIRECT_CONV_LIMIT:
        out = np.convolve(a, b)
    else:
        out = fftconvolve(a, b)
    return np.maximum(out, 0.0)


def compose(plds) -> DiscretePLD:
    """Convolution of independent discretized losses (grids must match)."""
    plds = list(plds)
    if not plds:
        raise ValueError("compose needs at least one distribution")
    h = plds[0].h
    if any(p.h != h for p in plds):
        raise ValueError("cannot compose distributions with different grid spacings")
    pmf = plds[0].pmf
    lo = plds[0].lo_index
    keep = 1.0 - plds[0].infinity_mass
    for p in plds[1:]:
        pmf = _convolve(pmf, p.pmf)
        lo += p.lo_index
        keep *= 1.0 - p.infinity_mass
    return DiscretePLD(h=h, lo_index=lo, pmf=_ro(pmf), infinity_mass=1.0 - keep)


def compose_power(pld: DiscretePLD, n: int) -> DiscretePLD:
    """n-fold self-composition by binary exponentiation."""
    if n < 1:
        raise ValueError(f"composition count must be >= 1, got {n}")
    result = None
    base = pld
    while n:
        if n & 1:
            result = base if result is None else compose([result, base])
        n >>= 1
        if n:
            base = compose([base, base])
    return result


def delta_at(pld: DiscretePLD, epsilon: float) -> float:
    """Hockey-stick divergence of the discrete loss at e^epsilon."""
    losses = pld.losses()
    mask = losses > epsilon
    delta = float(pld.pmf[mask] @ -np.expm1(epsilon - losses[mask])) + pld.infinity_mass
    return min(1.0, max(0.0, delta))


def dump_csv(pld: DiscretePLD, path) -> None:
    """Debug dump: one row per grid point, header comment with the metadata."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"# h={pld.h:.17g} origin={pld.origin} infinity_mass={pld.infinity_mass:.17g}\n"
        )
        fh.write("grid_index,loss,mass\n")
        for j, (loss, mass) in enumerate(zip(pld.losses(), pld.pmf)):
            fh.write(f"{pld.lo_index + j},{loss:.17g},{mass:.17g}\n")
