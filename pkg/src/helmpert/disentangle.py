"""Algebraic recovery of interior energies from four-amplitude data.

A probe datum at amplitude lam follows the model

    D(lam) = F * f(a*lam) + G * (b*lam - 1)

with F the gradient energy, G the (negated, frequency-scaled) mass energy,
and (a, b) the material contrast ratios inside the probe. The affine G-term
is annihilated by the second-order divided-difference d, which factors as
F times a rational function Q of the amplitudes and a alone. The ratio of
two such d values therefore depends only on a; it is solved by bracketed
bisection on its monotone branch, after which F, G, b follow by exact
elimination. Four distinct amplitudes are exactly enough.
"""

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .forward import InternalData
from .mesh import TriangleMesh

DEFAULT_BRACKET = (1e-3, 1e3)
# |d| below this times max|D| means the gradient channel is invisible
DEGENERACY_RTOL = 1e-12
BISECTION_RTOL = 1e-12


class DegenerateData(Exception):
    """The divided differences vanish: no gradient-channel signal."""


class NoRoot(Exception):
    """The contrast-ratio equation has no sign change in the bracket."""


@dataclass(frozen=True)
class AmplitudeQuad:
    """Four distinct positive probe amplitudes."""

    lam1: float = 0.5
    lam2: float = 1.5
    lam3: float = 2.0
    lam4: float = 3.0

    def __post_init__(self):
        lams = self.as_tuple()
        if any(l <= 0 for l in lams):
            raise ValueError("amplitudes must be positive")
        if len(set(lams)) != 4:
            raise ValueError("amplitudes must be pairwise distinct")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.lam1, self.lam2, self.lam3, self.lam4)


@dataclass
class RecoveredPoint:
    """Model parameters fitted to one probe location."""

    F: float
    G: float
    a: float
    b: float
    residual: float

    def __post_init__(self):
        if self.F < 0:
            raise ValueError("gradient energy F cannot be negative")
        if not math.isnan(self.a) and self.a <= 0:
            raise ValueError("contrast ratio a must be positive (or nan when F = 0)")


def f_contrast(x: float) -> float:
    """Rational contrast factor (x-1)^2 / (x+1) of the gradient channel."""
    if x == -1.0:
        raise ValueError("contrast factor has a pole at -1")
    return (x - 1.0) ** 2 / (x + 1.0)


def model_datum(F: float, G: float, a: float, b: float, lam: float) -> float:
    """Forward evaluation of the four-parameter datum model."""
    return F * f_contrast(a * lam) + G * (b * lam - 1.0)


def d_triple(pairs: Sequence[Tuple[float, float]]) -> float:
    """Residual of D at lam3 against the affine interpolant through lam1, lam2.

    Annihilates anything affine in lam, so only the gradient channel
    survives.
    """
    (x1, d1), (x2, d2), (x3, d3) = pairs
    if x1 == x2:
        raise ValueError("first two amplitudes must differ")
    return d3 - (d1 * (x2 - x3) + d2 * (x3 - x1)) / (x2 - x1)


def q_rational(x1: float, x2: float, x3: float, a: float) -> float:
    """The amplitude-only factor Q with d = F * Q; symmetric in x1, x2."""
    num = 4.0 * a * a * (x3 * (x3 - x1 - x2) + x1 * x2)
    den = (a ** 3 * x3 * x1 * x2 + a * a * (x3 * (x1 + x2) + x1 * x2)
           + a * (x1 + x2 + x3) + 1.0)
    return num / den


def _affine_fit(pairs) -> Tuple[float, float]:
    """(G, b) from D(lam) = G*(b*lam - 1) through the first two points."""
    (x1, d1), (x2, d2) = pairs[0], pairs[1]
    slope = (d2 - d1) / (x2 - x1)
    intercept = d1 - slope * x1
    G = -intercept
    b = slope / G if G != 0.0 else math.nan
    return G, b


def _residual(pairs, F: float, G: float, a: float, b: float) -> float:
    worst = 0.0
    for lam, d in pairs:
        if F == 0.0:
            model = G * (b * lam - 1.0) if not math.isnan(b) else 0.0
        else:
            model = model_datum(F, G, a, b, lam)
        worst = max(worst, abs(model - d))
    return worst


def recover(measurements: Sequence[Tuple[float, float]],
            a_bracket: Tuple[float, float] = DEFAULT_BRACKET) -> RecoveredPoint:
    """Invert four (amplitude, datum) pairs into (F, G, a, b).

    The ratio d3/d4 of the two canonical divided differences depends on a
    alone; a comes from bisection in log-amplitude, F from the factorization
    of d, and (G, b) from the exact affine remainder. When the divided
    differences vanish (no gradient-channel signal) the affine-only fallback
    returns F = 0 with a undefined instead of raising; NoRoot is raised when
    the bracket shows no sign change.
    """
    pairs = sorted((float(l), float(d)) for l, d in measurements)
    if len(pairs) != 4:
        raise ValueError("exactly four measurements are required")
    lams = [l for l, _ in pairs]
    if len(set(lams)) != 4:
        raise ValueError("amplitudes must be pairwise distinct")
    if lams[0] <= 0:
        raise ValueError("amplitudes must be positive")

    d3 = d_triple(pairs[:3])
    d4 = d_triple([pairs[0], pairs[1], pairs[3]])
    scale = max(abs(d) for _, d in pairs)
    if abs(d3) < DEGENERACY_RTOL * scale or abs(d4) < DEGENERACY_RTOL * scale:
        # pure-q point: the model degenerates to the affine term
        G, b = _affine_fit(pairs)
        return RecoveredPoint(F=0.0, G=G, a=math.nan, b=b,
                              residual=_residual(pairs, 0.0, G, math.nan, b))

    target = d3 / d4
    x1, x2, x3, x4 = lams

    def ratio_gap(a: float) -> float:
        return q_rational(x1, x2, x3, a) / q_rational(x1, x2, x4, a) - target

    lo, hi = a_bracket
    if not (0 < lo < hi):
        raise ValueError("bracket must satisfy 0 < lo < hi")
    glo, ghi = ratio_gap(lo), ratio_gap(hi)
    if glo == 0.0:
        a = lo
    elif ghi == 0.0:
        a = hi
    elif glo * ghi > 0:
        raise NoRoot(f"no sign change of the ratio equation on {a_bracket}")
    else:
        llo, lhi = math.log(lo), math.log(hi)
        for _ in range(200):
            lmid = 0.5 * (llo + lhi)
            if ratio_gap(math.exp(lmid)) * glo <= 0:
                lhi = lmid
            else:
                llo = lmid
            if lhi - llo <= BISECTION_RTOL:
                break
        a = math.exp(0.5 * (llo + lhi))
        # secant polish: the bracket is already tight, this just drives the
        # root to machine precision so downstream F, G, b stay conditioned
        a_prev = math.exp(llo)
        g_cur, g_prev = ratio_gap(a), ratio_gap(a_prev)
        for _ in range(4):
            if g_cur == g_prev or g_cur == 0.0:
                break
            a_next = a - g_cur * (a - a_prev) / (g_cur - g_prev)
            if not (lo <= a_next <= hi):
                break
            a_prev, g_prev = a, g_cur
            a, g_cur = a_next, ratio_gap(a_next)

    F = d3 / q_rational(x1, x2, x3, a)
    affine = [(lam, F * f_contrast(a * lam) - d) for lam, d in pairs]
    # widest amplitude pair for the least error amplification in the slope
    (x1n, n1), (x2n, n2) = affine[0], affine[3]
    slope = (n2 - n1) / (x2n - x1n)
    G = n1 - slope * x1n
    b = -slope / G if G != 0.0 else math.nan
    return RecoveredPoint(F=F, G=G, a=a, b=b,
                          residual=_residual(pairs, F, G, a, b))


def recover_internal_data(mesh: TriangleMesh,
                          point_recoveries: Dict[int, RecoveredPoint],
                          k: float) -> InternalData:
    """Nodal internal-data maps from per-node recoveries: J = F, j = -G/k^2."""
    if k <= 0:
        raise ValueError("a positive frequency is needed to unscale the mass energy")
    J = np.zeros(mesh.n_nodes)
    j = np.zeros(mesh.n_nodes)
    for node, rec in point_recoveries.items():
        J[node] = rec.F
        j[node] = -rec.G / k ** 2
    return InternalData(mesh=mesh, J=J, j=j, k=k)


def save_amplitude_csv(path, pairs: Sequence[Tuple[float, float]]) -> None:
    """One probe point's (lambda, D) table."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "D"])
        for lam, d in pairs:
            writer.writerow([repr(float(lam)), repr(float(d))])


def load_amplitude_csv(path) -> List[Tuple[float, float]]:
    with open(path, newline="") as fh:
        return [(float(row["lambda"]), float(row["D"]))
                for row in csv.DictReader(fh)]


def save_recovered_csv(path, rows: Sequence[Tuple[float, float, RecoveredPoint]]) -> None:
    """Recovered-point table over probe locations (x, y)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "F", "G", "a", "b", "residual"])
        for x, y, rec in rows:
            writer.writerow([repr(float(x)), repr(float(y)),
                             repr(float(rec.F)), repr(float(rec.G)),
                             repr(float(rec.a)), repr(float(rec.b)),
                             repr(float(rec.residual))])


def load_recovered_csv(path) -> List[Tuple[float, float, RecoveredPoint]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = RecoveredPoint(F=float(row["F"]), G=float(row["G"]),
                                 a=float(row["a"]), b=float(row["b"]),
                                 residual=float(row["residual"]))
            out.append((float(row["x"]), float(row["y"]), rec))
    return out
