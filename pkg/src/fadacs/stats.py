"""Feature screening: Pearson correlation and the regression F-test against occupancy."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConstantInput, DegenerateSampleSize, ShapeMismatch

F_MAX = 1e300
BETACF_TOL = 1e-12
BETACF_MAX_ITER = 10_000


def pearson(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch(f"pearson needs equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise DegenerateSampleSize("pearson needs at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ConstantInput("constant input has no correlation")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETACF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f, d1, d2):
    """Survival function ``P(F > f)`` of the F distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f) or f >= F_MAX:
        return 0.0
    return min(1.0, max(0.0, betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))))


def regression_f_test(x, y):
    """F statistic and p-value of the simple linear regression of ``y`` on ``x``.

    ``F = r^2 (n - 2) / (1 - r^2)`` with ``(1, n - 2)`` degrees of freedom.
    A perfect fit returns ``F = F_MAX`` and ``p = 0``.
    """
    r = pearson(x, y)
    n = len(x)
    if n < 3:
        raise DegenerateSampleSize("the F-test needs at least 3 samples")
    r2 = r * r
    if r2 >= 1.0:
        return F_MAX, 0.0
    f = r2 * (n - 2) / (1.0 - r2)
    f = min(f, F_MAX)
    return f, f_sf(f, 1, n - 2)


@dataclass
class FeatureScreenRow:
    feature: str
    pcc: float | None
    f_value: float | None
    p_value: float | None
    n: int
    note: str = ""


def feature_screen(features, occupancy, order=None):
    """One row per feature column.

    ``features`` maps name -> values aligned with ``occupancy``. Rows follow
    ``order`` when given (unknown names last, alphabetically). A failing
    feature yields a row with null statistics and the error name in ``note``.
    """
    occ = np.asarray(occupancy, dtype=float).ravel()
    names = list(features)
    if order is not None:
        rank = {name: n for n, name in enumerate(order)}
        names.sort(key=lambda c: (rank.get(c, len(rank)), c))
    rows = []
    for name in names:
        x = np.asarray(features[name], dtype=float).ravel()
        try:
            r = pearson(x, occ)
            f, p = regression_f_test(x, occ)
            rows.append(FeatureScreenRow(name, r, f, p, len(x)))
        except (ConstantInput, DegenerateSampleSize, ShapeMismatch) as exc:
            rows.append(FeatureScreenRow(name, None, None, None, len(x), exc.code))
    return rows


SCREEN_COLUMNS = ["feature", "pcc", "f_value", "p_value", "n", "note"]


def write_screen_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCREEN_COLUMNS)
        for r in rows:
            w.writerow(["" if v is None else v for v in (r.feature, r.pcc, r.f_value, r.p_value, r.n, r.note)])


def write_screen_json(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([asdict(r) for r in rows], fh, indent=2)
        fh.write("\n")
