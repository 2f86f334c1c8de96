"""Slow, independent reference implementations used by the statistics tests."""
import math
from fractions import Fraction

import mpmath


def pearson_loop(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def midranks(values):
    out = []
    for v in values:
        below = sum(1 for w in values if w < v)
        ties = sum(1 for w in values if w == v)
        out.append(below + (ties + 1) / 2)
    return out


def t_tail_two_sided(t, df):
    """2 * P(T > |t|) by direct numerical integration of the Student-t density."""
    mpmath.mp.dps = 40
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    tail = mpmath.quad(lambda s: c * (1 + s * s / nu) ** (-(nu + 1) / 2), [abs(t), mpmath.inf])
    return float(2 * tail)


def binom_minlike(k, n, p):
    p = Fraction(p).limit_denominator(10**6)
    pmf = [math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(n + 1)]
    obs = pmf[k]
    return float(min(Fraction(1), sum(q for q in pmf if q <= obs)))


def binom_double(k, n, p):
    p = Fraction(p).limit_denominator(10**6)
    pmf = [math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(n + 1)]
    return float(min(Fraction(1), 2 * min(sum(pmf[: k + 1]), sum(pmf[k:]))))


def icc21_loop(matrix):
    n = len(matrix)
    k = len(matrix[0])
    grand = math.fsum(v for row in matrix for v in row) / (n * k)
    row_means = [math.fsum(row) / k for row in matrix]
    col_means = [math.fsum(matrix[i][j] for i in range(n)) / n for j in range(k)]
    ssr = k * math.fsum((m - grand) ** 2 for m in row_means)
    ssc = n * math.fsum((m - grand) ** 2 for m in col_means)
    sse = math.fsum(
        (matrix[i][j] - row_means[i] - col_means[j] + grand) ** 2 for i in range(n) for j in range(k)
    )
    msr = ssr / (n - 1)
    msc = ssc / (k - 1)
    mse = sse / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def fisher_closed_form(r, n, z_crit=1.959963984540054):
    z = 0.5 * math.log((1 + r) / (1 - r))
    h = z_crit / math.sqrt(n - 3)
    return math.tanh(z - h), math.tanh(z + h)
