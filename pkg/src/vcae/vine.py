"""D-vine pair-copula construction over a latent sample matrix.

Tree ``j`` (1-based) of an ``n``-dimensional D-vine holds ``n - j`` edges.
Edge ``i`` of tree ``j`` couples the variables at positions ``i`` and
``i + j`` of the order, conditional on the positions strictly between
them. With ``L[j][i]`` and ``R[j][i]`` the conditional pseudo-observations
entering that edge, the recursion is::

    L[1][i] = u[i]                      R[1][i] = u[i + 1]
    L[j+1][i] = h2_{j,i}(L[j][i], R[j][i])
    R[j+1][i] = h1_{j,i+1}(L[j][i+1], R[j][i+1])
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .copula import EPS, BivariateCopula, Family, empirical_tau, select_family
from .numerics import ShapeError, make_rng

log = logging.getLogger(__name__)

N_BINS = 64
MIN_MARGINAL_SIZE = 20
# log-density assigned outside the support of an empirical marginal
LOG_ZERO = -1000.0
FORMAT_VERSION = 1
_MAGIC = "VCAE-DVINE"


class FitError(ValueError):
    pass


class VineFormatError(ValueError):
    pass


class UnsupportedVersionError(VineFormatError):
    pass


class EmpiricalMarginal:
    """Empirical distribution of one latent coordinate.

    ``cdf`` and ``quantile`` use the ``rank / (n + 1)`` plotting position.
    ``logpdf`` uses a histogram over the sample range with add-one
    smoothing, since the empirical CDF itself has no density.
    """

    def __init__(self, values, bins=N_BINS):
        values = np.sort(np.asarray(values, dtype=np.float64))
        if values.ndim != 1 or len(values) < MIN_MARGINAL_SIZE:
            raise FitError(f"empirical marginal needs at least {MIN_MARGINAL_SIZE} values")
        if not np.all(np.isfinite(values)):
            raise FitError("empirical marginal received non-finite values")
        self.values = values
        self.bins = int(bins)
        lo, hi = values[0], values[-1]
        if not hi > lo:
            raise FitError("empirical marginal has zero variance")
        self.edges = np.linspace(lo, hi, self.bins + 1)
        counts, _ = np.histogram(values, bins=self.edges)
        width = np.diff(self.edges)
        self._log_dens = np.log((counts + 1.0) / ((len(values) + self.bins) * width))

    @property
    def n(self):
        return len(self.values)

    @property
    def support(self):
        return float(self.values[0]), float(self.values[-1])

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        rank = np.searchsorted(self.values, x, side="right")
        out = np.maximum(rank, 1) / (self.n + 1.0)
        return out if out.ndim else float(out)

    def quantile(self, u):
        u = np.asarray(u, dtype=np.float64)
        pos = np.clip(u * (self.n + 1.0), 1.0, float(self.n))
        # k / (n + 1) * (n + 1) can land one ulp below k
        near = np.rint(pos)
        pos = np.where(np.abs(pos - near) <= 1e-9 * near, near, pos)
        k = np.minimum(np.floor(pos).astype(np.int64), self.n - 1)
        frac = pos - k
        lo = self.values[k - 1]
        hi = self.values[k]
        out = np.where(frac > 0, lo + frac * (hi - lo), lo)
        return out if out.ndim else float(out)

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        idx = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, self.bins - 1)
        inside = (x >= self.edges[0]) & (x <= self.edges[-1])
        out = np.where(inside, self._log_dens[idx], LOG_ZERO)
        return out if out.ndim else float(out)

    def histogram(self):
        """Bin centres and smoothed densities."""
        centres = 0.5 * (self.edges[:-1] + self.edges[1:])
        return centres, np.exp(self._log_dens)


def ecdf(marginal, x):
    return marginal.cdf(x)


def quantile(marginal, u):
    return marginal.quantile(u)


def _is_indep(cop):
    return cop.family is Family.INDEPENDENCE


def _next_level(tree, left, right):
    m = len(tree) - 1
    new_left = [left[i] if _is_indep(tree[i]) else tree[i].h2(left[i], right[i])
                for i in range(m)]
    new_right = [right[i + 1] if _is_indep(tree[i + 1]) else tree[i + 1].h1(left[i + 1], right[i + 1])
                 for i in range(m)]
    return new_left, new_right


def dvine_copula_logpdf(pairs, u):
    """D-vine copula log-density for a triangular ``pairs`` array.

    ``u`` has one column per vine position; ``pairs`` may be any contiguous
    sub-triangle of a fitted vine, which is how sub-vine marginals are
    evaluated.
    """
    u = np.clip(np.atleast_2d(np.asarray(u, dtype=np.float64)), EPS, 1 - EPS)
    n = u.shape[1]
    if [len(t) for t in pairs] != list(range(n - 1, 0, -1)):
        raise ShapeError(f"pair array does not match {n} columns")
    out = np.zeros(u.shape[0])
    left = [u[:, i] for i in range(n - 1)]
    right = [u[:, i + 1] for i in range(n - 1)]
    for j, tree in enumerate(pairs, start=1):
        for i, cop in enumerate(tree):
            if not _is_indep(cop):
                out += cop.logpdf(left[i], right[i])
        if j < n - 1:
            left, right = _next_level(tree, left, right)
    return out


def sub_pairs(pairs, start, size):
    """Pair triangle of the sub-vine on positions ``start .. start + size - 1``."""
    return [[pairs[t][start + e] for e in range(size - 1 - t)] for t in range(size - 1)]


@dataclass
class DVineModel:
    """Fitted D-vine: variable order, triangular pair-copula array, marginals.

    ``pairs[j - 1][i]`` is the copula of edge ``i`` in tree ``j``;
    ``marginals[k]`` belongs to original column ``k``.
    """

    order: list
    pairs: list
    marginals: list
    n_obs: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.order)
        self.order = [int(k) for k in self.order]
        if sorted(self.order) != list(range(n)):
            raise ValueError(f"order {self.order} is not a permutation of 0..{n - 1}")
        if len(self.marginals) != n:
            raise ValueError("one marginal per dimension is required")
        if [len(t) for t in self.pairs] != list(range(n - 1, 0, -1)):
            raise ValueError("pair array does not have D-vine tree sizes")

    @property
    def dim(self):
        return len(self.order)

    @property
    def bins(self):
        return self.marginals[0].bins

    def edges(self):
        """Yield ``(tree, index, copula)`` with 1-based tree numbers."""
        for j, tree in enumerate(self.pairs, start=1):
            for i, cop in enumerate(tree):
                yield j, i, cop

    def n_edges(self):
        return sum(len(t) for t in self.pairs)

    def describe(self):
        lines = [f"D-vine n={self.dim} order={self.order}"]
        for j, i, cop in self.edges():
            a, b = self.order[i], self.order[i + j]
            cond = self.order[i + 1:i + j]
            given = "|" + ",".join(map(str, cond)) if cond else ""
            lines.append(f"  T{j} C[{a},{b}{given}] = {cop}")
        return "\n".join(lines)

    # density -----------------------------------------------------------
    def to_uniform(self, h):
        """Empirical-CDF transform of latent rows; columns come back in model order."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        if h.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim} columns, got {h.shape[1]}")
        return np.column_stack([self.marginals[k].cdf(h[:, k]) for k in self.order])

    def copula_logpdf(self, u):
        """Log-density of the vine copula at rows of ``u`` (columns in model order)."""
        return dvine_copula_logpdf(self.pairs, u)

    def marginal_logpdf(self, h):
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        return sum(self.marginals[k].logpdf(h[:, k]) for k in range(self.dim))

    def log_density(self, h):
        """Joint log-density on the latent scale: marginals times vine copula."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        return self.marginal_logpdf(h) + self.copula_logpdf(self.to_uniform(h))

    # sampling ----------------------------------------------------------
    def sample_uniform(self, g, rng):
        """Inverse-Rosenblatt draw of ``g`` rows of the vine copula (model order)."""
        n = self.dim
        w = np.clip(rng.random((g, n)), EPS, 1 - EPS)
        u = np.empty((g, n))
        u[:, 0] = w[:, 0]
        # left[j][i], right[j][i]: inputs of tree j+1, edge i
        left = [[None] * (n - 1 - j) for j in range(n - 1)]
        right = [[None] * (n - 1 - j) for j in range(n - 1)]
        if n > 1:
            left[0][0] = u[:, 0]
        for k in range(1, n):
            p = w[:, k]
            for j in range(k, 0, -1):
                i = k - j
                cop = self.pairs[j - 1][i]
                if not _is_indep(cop):
                    p = np.atleast_1d(cop.hinv1(left[j - 1][i], p))
                right[j - 1][i] = p
            u[:, k] = p
            if k < n - 1:
                left[0][k] = p
            for j in range(1, min(k, n - 2) + 1):
                i = k - j
                if i >= n - 1 - j:
                    continue
                cop = self.pairs[j - 1][i]
                left[j][i] = (left[j - 1][i] if _is_indep(cop)
                              else np.atleast_1d(cop.h2(left[j - 1][i], right[j - 1][i])))
        return u

    def sample(self, g, seed):
        """Draw ``g`` latent vectors as a ``(g, n)`` array in original column order."""
        out = np.empty((g, self.dim))
        if g == 0:
            return out
        u = self.sample_uniform(g, make_rng(seed))
        for pos, k in enumerate(self.order):
            out[:, k] = self.marginals[k].quantile(u[:, pos])
        return out


class LatentDensity:
    """Evaluable joint density of the latent space backed by a fitted D-vine."""

    def __init__(self, vine):
        self.vine = vine

    @property
    def dim(self):
        return self.vine.dim

    def log_density(self, h):
        return self.vine.log_density(h)

    def copula_logpdf_original(self, u):
        """Vine copula log-density with ``u`` columns in original dimension order."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        return self.vine.copula_logpdf(u[:, self.vine.order])

    def sample(self, g, seed):
        return self.vine.sample(g, seed)

    def support(self):
        return [m.support for m in self.vine.marginals]


def log_density(model, h):
    return model.log_density(h)


def sample(model, g, seed):
    return model.sample(g, seed)


# ----------------------------------------------------------------------
# fitting


def pseudo_observations(h):
    """Column-wise ``rank / (N + 1)`` transform."""
    h = np.asarray(h, dtype=np.float64)
    n_rows = h.shape[0]
    out = np.empty_like(h)
    for k in range(h.shape[1]):
        col = np.sort(h[:, k])
        out[:, k] = np.searchsorted(col, h[:, k], side="right") / (n_rows + 1.0)
    return out


def greedy_tau_order(u):
    """Hamiltonian path over dimensions that greedily maximises adjacent |tau|."""
    n = u.shape[1]
    if n <= 2:
        return list(range(n))
    tau = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            tau[a, b] = tau[b, a] = abs(empirical_tau(u[:, a], u[:, b]))
    a, b = np.unravel_index(np.argmax(np.triu(tau, 1)), tau.shape)
    path = [int(a), int(b)]
    rest = set(range(n)) - set(path)
    while rest:
        head = max(rest, key=lambda k: (tau[path[0], k], -k))
        tail = max(rest, key=lambda k: (tau[path[-1], k], -k))
        if tau[path[0], head] > tau[path[-1], tail]:
            path.insert(0, head)
            rest.remove(head)
        else:
            path.append(tail)
            rest.remove(tail)
    return path


def fit_dvine(h, order_strategy="identity", order=None, bins=N_BINS):
    """Fit a D-vine to the rows of ``h`` tree by tree.

    ``order_strategy`` is ``"identity"``, ``"given"`` (uses ``order``) or
    ``"greedy_tau"``. Every one of the ``n(n-1)/2`` edges is fitted with
    :func:`vcae.copula.select_family`.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 2:
        raise ShapeError(f"need an N x n matrix with n >= 2, got shape {h.shape}")
    n_rows, n = h.shape
    if not np.all(np.isfinite(h)):
        raise FitError("latent matrix contains non-finite values")
    for k in range(n):
        if np.ptp(h[:, k]) == 0:
            raise FitError(f"latent dimension {k} has zero variance")
    if n_rows < 100:
        log.warning("fitting a vine on only %d rows", n_rows)
    marginals = [EmpiricalMarginal(h[:, k], bins) for k in range(n)]
    u_all = pseudo_observations(h)
    if order_strategy == "identity":
        order = list(range(n))
    elif order_strategy == "given":
        if order is None:
            raise ValueError("order_strategy='given' requires an order")
        order = [int(k) for k in order]
    elif order_strategy in ("greedy_tau", "greedy"):
        order = greedy_tau_order(u_all)
    else:
        raise ValueError(f"unknown order strategy {order_strategy!r}")
    if sorted(order) != list(range(n)):
        raise ValueError(f"order {order} is not a permutation of 0..{n - 1}")
    u = u_all[:, order]
    left = [u[:, i] for i in range(n - 1)]
    right = [u[:, i + 1] for i in range(n - 1)]
    pairs = []
    for j in range(1, n):
        tree = []
        for i in range(n - j):
            fit = select_family(left[i], right[i])
            log.debug("tree %d edge %d: %s (aic %.2f)", j, i, fit.copula, fit.aic)
            tree.append(fit.copula)
        pairs.append(tree)
        if j < n - 1:
            left, right = _next_level(tree, left, right)
    return DVineModel(order, pairs, marginals, n_obs=n_rows)


# ----------------------------------------------------------------------
# persistence


def save_vine(model, path):
    lines = [
        f"{_MAGIC} {FORMAT_VERSION}",
        f"n {model.dim}",
        f"N {model.n_obs}",
        "order " + " ".join(map(str, model.order)),
        f"bins {model.bins}",
    ]
    for k, m in enumerate(model.marginals):
        lines.append(f"marginal {k} {m.n} " + " ".join(format(x, ".17g") for x in m.values))
    for j, i, cop in model.edges():
        lines.append(f"copula {j} {i} {cop.to_record()}")
    lines.append("end")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vine(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    try:
        head = lines[0].split()
        if len(head) != 2 or head[0] != _MAGIC:
            raise VineFormatError(f"{path}: not a vine file")
        if int(head[1]) != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"{path}: vine format version {head[1]} is not supported (expected {FORMAT_VERSION})")
        fields = {}
        for line in lines[1:5]:
            key, _, rest = line.partition(" ")
            fields[key] = rest
        n = int(fields["n"])
        n_obs = int(fields["N"])
        order = [int(x) for x in fields["order"].split()]
        bins = int(fields["bins"])
        marginals = []
        pos = 5
        for k in range(n):
            parts = lines[pos].split()
            if parts[0] != "marginal" or int(parts[1]) != k:
                raise VineFormatError(f"{path}: expected marginal {k} on line {pos + 1}")
            count = int(parts[2])
            values = np.array([float(x) for x in parts[3:]])
            if len(values) != count:
                raise VineFormatError(f"{path}: marginal {k} is truncated")
            marginals.append(EmpiricalMarginal(values, bins))
            pos += 1
        pairs = [[None] * (n - j) for j in range(1, n)]
        for _ in range(n * (n - 1) // 2):
            kind, j, i, record = lines[pos].split(" ", 3)
            if kind != "copula":
                raise VineFormatError(f"{path}: expected copula record on line {pos + 1}")
            pairs[int(j) - 1][int(i)] = BivariateCopula.from_record(record)
            pos += 1
        if lines[pos] != "end":
            raise VineFormatError(f"{path}: missing end marker")
    except UnsupportedVersionError:
        raise
    except VineFormatError:
        raise
    except (IndexError, KeyError, ValueError) as exc:
        raise VineFormatError(f"{path}: corrupt vine file ({exc})") from exc
    return DVineModel(order, pairs, marginals, n_obs=n_obs)
