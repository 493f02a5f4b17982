"""Bivariate copula families used as the edges of a pair-copula construction.

Conventions
-----------
``C(u, v)`` is the copula CDF. ``h1(u, v) = dC/du`` is the distribution of
the second argument conditional on the first, ``h2(u, v) = dC/dv`` the
distribution of the first conditional on the second. The public
``hfunc(c, v, u)`` is ``h1`` written as ``h(v | u)``.

Rotations follow the usual counter-clockwise convention on the density:
90 -> ``c(1-u, v)``, 180 -> ``c(1-u, 1-v)``, 270 -> ``c(u, 1-v)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from . import _bivariate
from .numerics import DomainError, NumericError, brent_minimize, make_rng, t_ppf

EPS = 1e-10
ROTATIONS = (0, 90, 180, 270)
T_DF_GRID = (2, 3, 4, 6, 10, 20, 30)

# parameter search ranges used by the MLE
RHO_MAX = 0.9999
CLAYTON_RANGE = (1e-4, 100.0)
GUMBEL_RANGE = (1.0, 100.0)


class Family(str, enum.Enum):
    INDEPENDENCE = "Independence"
    GAUSSIAN = "Gaussian"
    STUDENT_T = "StudentT"
    CLAYTON = "Clayton"
    GUMBEL = "Gumbel"

    @property
    def n_params(self):
        return {"Independence": 0, "StudentT": 2}.get(self.value, 1)


# tie-break order for AIC selection
PRECEDENCE = (Family.INDEPENDENCE, Family.GAUSSIAN, Family.CLAYTON,
              Family.GUMBEL, Family.STUDENT_T)


def _clip(x):
    return np.clip(np.asarray(x, dtype=np.float64), EPS, 1.0 - EPS)


def _scalar(out):
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------------------
# unrotated families. h0(a, b) = dC0/da, hinv0 solves h0(a, b) = p for b.
# All families here are exchangeable so dC0/db (a, b) = h0(b, a).


def _gauss_logpdf(rho, u, v):
    x, y = special.ndtri(u), special.ndtri(v)
    s = 1.0 - rho * rho
    return -0.5 * math.log(s) - (rho * rho * (x * x + y * y) - 2 * rho * x * y) / (2 * s)


def _gauss_h(rho, a, b):
    x, y = special.ndtri(a), special.ndtri(b)
    return special.ndtr((y - rho * x) / math.sqrt(1 - rho * rho))


def _gauss_hinv(rho, a, p):
    x, z = special.ndtri(a), special.ndtri(p)
    return special.ndtr(z * math.sqrt(1 - rho * rho) + rho * x)


def _gauss_cdf(rho, u, v):
    x, y = special.ndtri(u), special.ndtri(v)
    return np.vectorize(_bivariate.bvn_lower, otypes=[float])(x, y, rho)


def _t_logpdf(rho, nu, u, v):
    return _t_logpdf_xy(rho, nu, t_ppf(u, nu), t_ppf(v, nu))


def _t_logpdf_xy(rho, nu, x, y):
    s = 1.0 - rho * rho
    q = (x * x + y * y - 2 * rho * x * y) / (nu * s)
    log_joint = (special.gammaln((nu + 2) / 2) - special.gammaln(nu / 2)
                 - math.log(nu * math.pi) - 0.5 * math.log(s) - (nu + 2) / 2 * np.log1p(q))
    const1 = special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2) - 0.5 * math.log(nu * math.pi)
    log_marg = 2 * const1 - (nu + 1) / 2 * (np.log1p(x * x / nu) + np.log1p(y * y / nu))
    return log_joint - log_marg


def _t_h(rho, nu, a, b):
    x, y = t_ppf(a, nu), t_ppf(b, nu)
    scale = np.sqrt((nu + x * x) * (1 - rho * rho) / (nu + 1))
    return special.stdtr(nu + 1, (y - rho * x) / scale)


def _t_hinv(rho, nu, a, p):
    x = t_ppf(a, nu)
    scale = np.sqrt((nu + x * x) * (1 - rho * rho) / (nu + 1))
    return special.stdtr(nu, t_ppf(p, nu + 1) * scale + rho * x)


def _t_cdf(rho, nu, u, v):
    x, y = t_ppf(u, nu), t_ppf(v, nu)
    if float(nu).is_integer():
        return np.vectorize(lambda a, b: _bivariate.bvt_lower(int(nu), a, b, rho),
                            otypes=[float])(x, y)

    def one(uu, vv):
        # C(u, v) = integral over s in (0, u) of h(v | s)
        val, _ = integrate.quad(lambda s: float(_t_h(rho, nu, s, vv)), 0.0, uu,
                                epsabs=1e-14, epsrel=1e-12, limit=200)
        return val

    return np.vectorize(one, otypes=[float])(u, v)


def _clayton_logsum(theta, u, v):
    # log(u^-theta + v^-theta - 1), stable for large theta
    a = -theta * np.log(u)
    b = -theta * np.log(v)
    m = np.maximum(a, b)
    return m + np.log(np.exp(a - m) + np.exp(b - m) - np.exp(-m))


def _clayton_logpdf(theta, u, v):
    return (math.log1p(theta) - (1 + theta) * (np.log(u) + np.log(v))
            - (2 + 1 / theta) * _clayton_logsum(theta, u, v))


def _clayton_cdf(theta, u, v):
    return np.exp(-_clayton_logsum(theta, u, v) / theta)


def _clayton_h(theta, a, b):
    return np.exp(-(theta + 1) * np.log(a) - (1 + 1 / theta) * _clayton_logsum(theta, a, b))


def _clayton_hinv(theta, a, p):
    # b^-theta = 1 + a^-theta * (p^(-theta/(1+theta)) - 1)
    la = -theta * np.log(a) + np.log(np.expm1(-theta / (1 + theta) * np.log(p)))
    return np.exp(-np.logaddexp(0.0, la) / theta)


def _gumbel_parts(theta, u, v):
    x, y = -np.log(u), -np.log(v)
    lx, ly = np.log(x), np.log(y)
    ls = np.logaddexp(theta * lx, theta * ly)
    return x, y, lx, ly, ls


def _gumbel_logpdf(theta, u, v):
    x, y, lx, ly, ls = _gumbel_parts(theta, u, v)
    big_a = np.exp(ls / theta)
    return (-big_a + x + y + (theta - 1) * (lx + ly) + (1 / theta - 2) * ls
            + np.log(big_a + theta - 1))


def _gumbel_cdf(theta, u, v):
    _, _, _, _, ls = _gumbel_parts(theta, u, v)
    return np.exp(-np.exp(ls / theta))


def _gumbel_h(theta, a, b):
    x, _, lx, _, ls = _gumbel_parts(theta, a, b)
    return np.exp(-np.exp(ls / theta) + x + (theta - 1) * lx + (1 / theta - 1) * ls)


def _bisect_hinv(h, a, p, max_iter=200):
    a, p = np.broadcast_arrays(np.asarray(a, float), np.asarray(p, float))
    lo = np.zeros(a.shape)
    hi = np.ones(a.shape)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = h(a, np.clip(mid, EPS, 1 - EPS)) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-15):
            break
    else:
        raise NumericError("inverse h-function bisection did not converge")
    out = 0.5 * (lo + hi)
    if not np.all(np.isfinite(out)):
        raise NumericError("inverse h-function produced non-finite values")
    return out


def _gumbel_hinv(theta, a, p):
    return _bisect_hinv(lambda aa, bb: _gumbel_h(theta, aa, bb), a, p)


# ----------------------------------------------------------------------


@dataclass(frozen=True)
class BivariateCopula:
    """A parametric pair copula. ``params`` is ``()``, ``(theta,)`` or ``(rho, nu)``."""

    family: Family
    params: tuple = ()
    rotation: int = 0

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.rotation not in ROTATIONS:
            raise DomainError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")
        if self.rotation and fam not in (Family.CLAYTON, Family.GUMBEL):
            raise DomainError(f"{fam.value} copula does not take a rotation")
        if len(self.params) != fam.n_params:
            raise DomainError(f"{fam.value} expects {fam.n_params} parameter(s), got {self.params}")
        p = self.params
        if fam in (Family.GAUSSIAN, Family.STUDENT_T) and not -1 < p[0] < 1:
            raise DomainError(f"correlation must lie in (-1, 1), got {p[0]}")
        if fam is Family.STUDENT_T and not p[1] > 0:
            raise DomainError(f"degrees of freedom must be positive, got {p[1]}")
        if fam is Family.CLAYTON and not p[0] > 0:
            raise DomainError(f"Clayton theta must be positive, got {p[0]}")
        if fam is Family.GUMBEL and not p[0] >= 1:
            raise DomainError(f"Gumbel theta must be >= 1, got {p[0]}")

    @property
    def n_params(self):
        return self.family.n_params

    def __str__(self):
        rot = f", rot={self.rotation}" if self.rotation else ""
        return f"{self.family.value}({', '.join(f'{p:.4g}' for p in self.params)}{rot})"

    # unrotated primitives --------------------------------------------
    def _logpdf0(self, u, v):
        f, p = self.family, self.params
        if f is Family.INDEPENDENCE:
            return np.zeros(np.broadcast(u, v).shape)
        if f is Family.GAUSSIAN:
            return _gauss_logpdf(p[0], u, v)
        if f is Family.STUDENT_T:
            return _t_logpdf(p[0], p[1], u, v)
        if f is Family.CLAYTON:
            return _clayton_logpdf(p[0], u, v)
        return _gumbel_logpdf(p[0], u, v)

    def _cdf0(self, u, v):
        f, p = self.family, self.params
        if f is Family.INDEPENDENCE:
            return u * v
        if f is Family.GAUSSIAN:
            return _gauss_cdf(p[0], u, v)
        if f is Family.STUDENT_T:
            return _t_cdf(p[0], p[1], u, v)
        if f is Family.CLAYTON:
            return _clayton_cdf(p[0], u, v)
        return _gumbel_cdf(p[0], u, v)

    def _h0(self, a, b):
        f, p = self.family, self.params
        if f is Family.INDEPENDENCE:
            return np.broadcast_arrays(a, b)[1].copy()
        if f is Family.GAUSSIAN:
            return _gauss_h(p[0], a, b)
        if f is Family.STUDENT_T:
            return _t_h(p[0], p[1], a, b)
        if f is Family.CLAYTON:
            return _clayton_h(p[0], a, b)
        return _gumbel_h(p[0], a, b)

    def _hinv0(self, a, q):
        f, p = self.family, self.params
        if f is Family.INDEPENDENCE:
            return np.broadcast_arrays(a, q)[1].copy()
        if f is Family.GAUSSIAN:
            return _gauss_hinv(p[0], a, q)
        if f is Family.STUDENT_T:
            return _t_hinv(p[0], p[1], a, q)
        if f is Family.CLAYTON:
            return _clayton_hinv(p[0], a, q)
        return _gumbel_hinv(p[0], a, q)

    # rotated public surface ------------------------------------------
    def logpdf(self, u, v):
        u, v = _clip(u), _clip(v)
        r = self.rotation
        if r == 90:
            u = 1 - u
        elif r == 180:
            u, v = 1 - u, 1 - v
        elif r == 270:
            v = 1 - v
        return _scalar(self._logpdf0(u, v))

    def pdf(self, u, v):
        return _scalar(np.exp(self.logpdf(u, v)))

    def cdf(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        uc, vc = _clip(u), _clip(v)
        r = self.rotation
        if r == 0:
            out = self._cdf0(uc, vc)
        elif r == 90:
            out = v - self._cdf0(_clip(1 - u), vc)
        elif r == 180:
            out = u + v - 1 + self._cdf0(_clip(1 - u), _clip(1 - v))
        else:
            out = u - self._cdf0(uc, _clip(1 - v))
        # groundedness: C(u, 0) = C(0, v) = 0, C(u, 1) = u, C(1, v) = v
        out = np.where((u <= 0) | (v <= 0), 0.0, out)
        out = np.where(u >= 1, v, np.where(v >= 1, u, out))
        return _scalar(np.clip(out, 0.0, 1.0))

    def h1(self, u, v):
        """dC/du: conditional distribution of the second argument given the first."""
        u, v = _clip(u), _clip(v)
        r = self.rotation
        if r == 0:
            out = self._h0(u, v)
        elif r == 90:
            out = self._h0(1 - u, v)
        elif r == 180:
            out = 1 - self._h0(1 - u, 1 - v)
        else:
            out = 1 - self._h0(u, 1 - v)
        return _scalar(np.clip(out, 0.0, 1.0))

    def h2(self, u, v):
        """dC/dv: conditional distribution of the first argument given the second."""
        u, v = _clip(u), _clip(v)
        r = self.rotation
        if r == 0:
            out = self._h0(v, u)
        elif r == 90:
            out = 1 - self._h0(v, 1 - u)
        elif r == 180:
            out = 1 - self._h0(1 - v, 1 - u)
        else:
            out = self._h0(1 - v, u)
        return _scalar(np.clip(out, 0.0, 1.0))

    def hinv1(self, u, p):
        """Solve ``h1(u, v) = p`` for ``v``."""
        u, p = _clip(u), _clip(p)
        r = self.rotation
        if r == 0:
            out = self._hinv0(u, p)
        elif r == 90:
            out = self._hinv0(1 - u, p)
        elif r == 180:
            out = 1 - self._hinv0(1 - u, 1 - p)
        else:
            out = 1 - self._hinv0(u, 1 - p)
        return _scalar(np.clip(out, EPS, 1 - EPS))

    def hinv2(self, v, p):
        """Solve ``h2(u, v) = p`` for ``u``."""
        v, p = _clip(v), _clip(p)
        r = self.rotation
        if r == 0:
            out = self._hinv0(v, p)
        elif r == 90:
            out = 1 - self._hinv0(v, 1 - p)
        elif r == 180:
            out = 1 - self._hinv0(1 - v, 1 - p)
        else:
            out = self._hinv0(1 - v, p)
        return _scalar(np.clip(out, EPS, 1 - EPS))

    def tau(self):
        return kendall_tau(self)

    def loglik(self, u, v):
        return float(np.sum(self.logpdf(u, v)))

    # serialisation -------------------------------------------------------
    def to_record(self):
        fields = [self.family.value, str(self.rotation)]
        fields += [format(p, ".17g") for p in self.params]
        return " ".join(fields)

    @classmethod
    def from_record(cls, text):
        fields = text.split()
        if len(fields) < 2:
            raise ValueError(f"malformed copula record: {text!r}")
        try:
            return cls(Family(fields[0]), tuple(float(x) for x in fields[2:]), int(fields[1]))
        except (ValueError, DomainError) as exc:
            raise ValueError(f"malformed copula record {text!r}: {exc}") from exc


INDEPENDENCE = BivariateCopula(Family.INDEPENDENCE)


def pdf(c, u, v):
    return c.pdf(u, v)


def cdf(c, u, v):
    return c.cdf(u, v)


def hfunc(c, v, u):
    """``h(v | u) = dC(u, v)/du``."""
    return c.h1(u, v)


def hinv(c, p, u):
    """Inverse of :func:`hfunc` in ``v``."""
    return c.hinv1(u, p)


# ----------------------------------------------------------------------
# Kendall's tau


def kendall_tau(c):
    f = c.family
    if f is Family.INDEPENDENCE:
        return 0.0
    if f in (Family.GAUSSIAN, Family.STUDENT_T):
        tau = 2.0 / math.pi * math.asin(c.params[0])
    elif f is Family.CLAYTON:
        theta = c.params[0]
        tau = theta / (theta + 2.0)
    else:
        tau = 1.0 - 1.0 / c.params[0]
    return -tau if c.rotation in (90, 270) else tau


def tau_inverse(family, tau):
    """Parameter of the unrotated ``family`` with Kendall's tau ``tau``."""
    family = Family(family)
    if not -1 < tau < 1:
        raise DomainError(f"tau must lie in (-1, 1), got {tau}")
    if family is Family.INDEPENDENCE:
        return ()
    if family in (Family.GAUSSIAN, Family.STUDENT_T):
        return math.sin(math.pi * tau / 2.0)
    if tau <= 0:
        raise DomainError(f"{family.value} cannot reach tau={tau}; rotate the copula")
    if family is Family.CLAYTON:
        return 2.0 * tau / (1.0 - tau)
    return 1.0 / (1.0 - tau)


_BRUTE_TAU_MAX = 4000


def empirical_tau(u, v):
    """Sample Kendall tau ``(concordant - discordant) / (n choose 2)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = len(u)
    if n < 10:
        raise ValueError(f"Kendall tau needs at least 10 pairs, got {n}")
    if n > _BRUTE_TAU_MAX:
        from scipy.stats import kendalltau

        tau_b = kendalltau(u, v).statistic
        n0 = n * (n - 1) / 2.0
        _, cu = np.unique(u, return_counts=True)
        _, cv = np.unique(v, return_counts=True)
        n1 = float(np.sum(cu * (cu - 1) / 2.0))
        n2 = float(np.sum(cv * (cv - 1) / 2.0))
        return float(tau_b * math.sqrt((n0 - n1) * (n0 - n2)) / n0)
    total = 0
    block = 512
    for start in range(0, n - 1, block):
        stop = min(start + block, n - 1)
        i = np.arange(start, stop)[:, None]
        j = np.arange(n)[None, :]
        s = np.sign(u[i] - u[None, :]) * np.sign(v[i] - v[None, :])
        total += int(np.sum(np.where(j > i, s, 0.0)))
    return total / (n * (n - 1) / 2.0)


# ----------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitResult:
    copula: BivariateCopula
    loglik: float
    aic: float
    n_obs: int


def _rotate_data(rotation, u, v):
    if rotation == 90:
        return 1 - u, v
    if rotation == 180:
        return 1 - u, 1 - v
    if rotation == 270:
        return u, 1 - v
    return u, v


def _result(cop, u, v):
    ll = cop.loglik(u, v)
    return FitResult(cop, ll, 2 * cop.n_params - 2 * ll, len(u))


def fit_mle(family, rotation, u, v, tol=1e-6, tau=None):
    """Maximum-likelihood fit of one family and rotation to pseudo-observations.

    The search starts from the Kendall-tau inversion and is never allowed to
    end at a point worse than that start.
    """
    family = Family(family)
    u = _clip(u)
    v = _clip(v)
    if family is Family.INDEPENDENCE:
        return _result(INDEPENDENCE, u, v)
    if tau is None:
        tau = empirical_tau(*_rotate_data(rotation, u, v))
    elif rotation in (90, 270):
        tau = -tau

    def neg(make):
        def f(x):
            val = -make(x).loglik(u, v)
            return val if math.isfinite(val) else 1e300
        return f

    if family is Family.GAUSSIAN:
        make = lambda r: BivariateCopula(family, (r,))  # noqa: E731
        start = float(np.clip(tau_inverse(family, tau), -RHO_MAX, RHO_MAX))
        cands = [start, brent_minimize(neg(make), -RHO_MAX, RHO_MAX, tol)]
        return _best([make(x) for x in cands], u, v)

    if family is Family.STUDENT_T:
        start = float(np.clip(tau_inverse(family, tau), -RHO_MAX, RHO_MAX))
        fits = []
        for nu in T_DF_GRID:
            # quantiles do not depend on rho; transform once per nu
            x, y = t_ppf(u, nu), t_ppf(v, nu)

            def f(r, nu=nu, x=x, y=y):
                val = -float(np.sum(_t_logpdf_xy(r, nu, x, y)))
                return val if math.isfinite(val) else 1e300

            cands = [start, brent_minimize(f, -RHO_MAX, RHO_MAX, tol)]
            fits.append(_best([BivariateCopula(family, (r, nu)) for r in cands], u, v))
        return max(fits, key=lambda r: r.loglik)

    lo, hi = CLAYTON_RANGE if family is Family.CLAYTON else GUMBEL_RANGE
    if tau > 0:
        start = float(np.clip(tau_inverse(family, tau), lo, hi))
    else:
        start = lo
    make = lambda t: BivariateCopula(family, (t,), rotation)  # noqa: E731
    # search on log(theta - lo + 1) keeps the bracket well scaled
    shift = lo - 1.0
    fwd = lambda t: math.log(t - shift)  # noqa: E731
    back = lambda z: min(max(math.exp(z) + shift, lo), hi)  # noqa: E731
    z = brent_minimize(neg(lambda z: make(back(z))), fwd(lo), fwd(hi), tol * 1e-2)
    return _best([make(start), make(back(z))], u, v)


def _best(cops, u, v):
    results = [_result(c, u, v) for c in cops]
    best = max(results, key=lambda r: r.loglik)
    if not math.isfinite(best.loglik):
        raise NumericError("all candidate parameters give a non-finite log-likelihood")
    return best


def independence_threshold(n):
    """Two-sided 5% critical value of |tau| under independence."""
    return 1.96 * math.sqrt(2.0 * (2 * n + 5) / (9.0 * n * (n - 1)))


def candidate_fits(u, v, tau=None):
    """Fit every family (and admissible rotation) to the pairs."""
    u = _clip(u)
    v = _clip(v)
    if tau is None:
        tau = empirical_tau(u, v)
    rots = (0, 180) if tau >= 0 else (90, 270)
    fits = [fit_mle(Family.INDEPENDENCE, 0, u, v), fit_mle(Family.GAUSSIAN, 0, u, v, tau=tau)]
    for fam in (Family.CLAYTON, Family.GUMBEL):
        fits += [fit_mle(fam, r, u, v, tau=tau) for r in rots]
    fits.append(fit_mle(Family.STUDENT_T, 0, u, v, tau=tau))
    return fits


def _rank(fit):
    return (PRECEDENCE.index(fit.copula.family), fit.copula.rotation)


def select_family(u, v):
    """Pick the pair copula with minimum AIC.

    Pairs that pass the Kendall-tau independence test are assigned the
    independence copula without fitting. AIC ties resolve by
    :data:`PRECEDENCE`, then by rotation.
    """
    u = _clip(u)
    v = _clip(v)
    n = len(u)
    tau = empirical_tau(u, v)
    if abs(tau) < independence_threshold(n):
        return fit_mle(Family.INDEPENDENCE, 0, u, v)
    fits = candidate_fits(u, v, tau)
    return min(fits, key=lambda r: (r.aic, _rank(r)))


def sample_pair(c, n, seed):
    """Draw ``n`` pairs from ``c`` by conditional inversion; returns an ``(n, 2)`` array."""
    rng = make_rng(seed)
    w = rng.random((n, 2))
    u = _clip(w[:, 0])
    v = np.atleast_1d(c.hinv1(u, _clip(w[:, 1])))
    return np.column_stack([u, v])
