"""Entropy, KL divergence, pairwise density export and trigger fingerprint score.

Grid estimators never build the grid. Cells are visited in fixed-size
chunks of flat indices, so memory is bounded by the chunk size and
independent of ``K**n``. Every chunk reduces to a small accumulator and
the accumulators are merged in chunk order, which keeps results
identical for any thread count.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .numerics import DomainError, NumericError, ShapeError, make_rng
from .vine import DVineModel, LatentDensity, dvine_copula_logpdf, sub_pairs

COPULA = "copula"
LATENT = "latent"
Q_FLOOR = 1e-12
CHUNK = 1 << 15
MC_BLOCK = 4096
PAIR_MC_SAMPLES = 10_000


def thread_count():
    """Worker threads for streamed evaluation, capped by ``VCAE_THREADS``."""
    try:
        return max(1, int(os.environ.get("VCAE_THREADS", "1")))
    except ValueError:
        return 1


def _as_density(d):
    return LatentDensity(d) if isinstance(d, DVineModel) else d


@dataclass(frozen=True)
class GridSpec:
    """``k`` cell centres per dimension on the unit cube or on a latent box.

    For ``scale="latent"`` the ``domain`` holds one ``(lo, hi)`` pair per
    dimension.
    """

    k: int
    dims: int
    scale: str = COPULA
    domain: tuple | None = None

    def __post_init__(self):
        if self.k < 2 or self.dims < 1:
            raise DomainError(f"grid needs k >= 2 and dims >= 1, got k={self.k} dims={self.dims}")
        if self.scale not in (COPULA, LATENT):
            raise DomainError(f"unknown grid scale {self.scale!r}")
        if self.scale == LATENT:
            if self.domain is None or len(self.domain) != self.dims:
                raise DomainError("a latent-scale grid needs one (lo, hi) pair per dimension")
            dom = tuple((float(lo), float(hi)) for lo, hi in self.domain)
            if any(not hi > lo for lo, hi in dom):
                raise DomainError(f"empty grid domain {dom}")
            object.__setattr__(self, "domain", dom)

    @property
    def n_cells(self):
        return self.k ** self.dims

    @property
    def log_n_cells(self):
        return self.dims * math.log(self.k)

    def centres(self):
        """Per-dimension cell centres (``k`` values each)."""
        base = (np.arange(self.k) + 0.5) / self.k
        if self.scale == COPULA:
            return [base] * self.dims
        return [lo + base * (hi - lo) for lo, hi in self.domain]

    def points(self, start, stop):
        """Coordinates of the cells with flat indices ``start .. stop - 1``."""
        idx = np.unravel_index(np.arange(start, stop, dtype=np.int64), (self.k,) * self.dims)
        axes = self.centres()
        return np.column_stack([axes[d][i] for d, i in enumerate(idx)])


def latent_grid(densities, k):
    """Latent-scale grid spanning the union of the marginal supports."""
    supports = [_as_density(d).support() for d in densities]
    dims = len(supports[0])
    if any(len(s) != dims for s in supports):
        raise ShapeError("densities have different latent dimensions")
    domain = tuple((min(s[d][0] for s in supports), max(s[d][1] for s in supports))
                   for d in range(dims))
    return GridSpec(k=k, dims=dims, scale=LATENT, domain=domain)


@dataclass(frozen=True)
class MonteCarloSpec:
    samples: int = 20_000
    block: int = MC_BLOCK
    scale: str = LATENT

    def __post_init__(self):
        if self.samples < 1 or self.block < 1:
            raise DomainError("Monte Carlo sample count and block size must be positive")
        if self.scale not in (COPULA, LATENT):
            raise DomainError(f"unknown scale {self.scale!r}")


@dataclass
class DistributionSummary:
    normalized: float | None
    raw: float
    estimator: str
    size: int
    seed: int | None
    scale: str

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------
# streamed grid evaluation


def _grid_logw(density, grid, start, stop):
    pts = grid.points(start, stop)
    if grid.scale == COPULA and hasattr(density, "copula_logpdf_original"):
        lw = density.copula_logpdf_original(pts)
    else:
        lw = density.log_density(pts)
    lw = np.asarray(lw, dtype=np.float64)
    if np.isnan(lw).any():
        raise NumericError(f"density returned NaN on grid cells {start}..{stop - 1}")
    return lw


def _chunks(grid, chunk):
    total = grid.n_cells
    return ((lo, min(lo + chunk, total)) for lo in range(0, total, chunk))


def _map_ordered(fn, items):
    threads = thread_count()
    if threads == 1:
        return map(fn, items)
    pool = ThreadPoolExecutor(max_workers=threads)
    # bounded look-ahead keeps the number of live results small
    return _windowed(pool, fn, items, 4 * threads)


def _windowed(pool, fn, items, width):
    try:
        pending = []
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= width:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()
    finally:
        pool.shutdown(wait=True)


def _lse_stats(lw):
    """(max, sum exp(l - max), sum exp(l - max) * (l - max)) of one chunk."""
    m = float(np.max(lw))
    if m == -math.inf:
        return (-math.inf, 0.0, 0.0)
    d = lw - m
    w = np.exp(d)
    return (m, float(w.sum()), float(np.dot(w, np.where(w > 0, d, 0.0))))


def _merge(acc, part):
    m1, z1, s1 = acc
    m2, z2, s2 = part
    if m2 == -math.inf:
        return acc
    if m1 == -math.inf:
        return part
    m = max(m1, m2)
    a, b = math.exp(m1 - m), math.exp(m2 - m)
    return (m, z1 * a + z2 * b, a * (s1 + z1 * (m1 - m)) + b * (s2 + z2 * (m2 - m)))


def _normalizer(density, grid, chunk):
    acc = (-math.inf, 0.0, 0.0)
    for part in _map_ordered(lambda c: _lse_stats(_grid_logw(density, grid, *c)),
                             _chunks(grid, chunk)):
        acc = _merge(acc, part)
    if acc[0] == -math.inf or acc[1] <= 0.0:
        raise NumericError("density is zero on every grid cell")
    return acc


def grid_masses(density, grid, chunk=CHUNK):
    """Stream ``(flat cell indices, probability masses)`` chunk by chunk.

    Masses are density at the cell centre times the (constant) cell
    volume, normalised to sum to one. The first pass finds the normaliser
    and the second yields the masses, so no per-cell state is retained.
    """
    density = _as_density(density)
    m, z, _ = _normalizer(density, grid, chunk)
    log_z = m + math.log(z)
    for lo, hi in _chunks(grid, chunk):
        yield np.arange(lo, hi, dtype=np.int64), np.exp(_grid_logw(density, grid, lo, hi) - log_z)


def _mc_blocks(spec):
    return [(b, min(spec.block, spec.samples - b * spec.block))
            for b in range(-(-spec.samples // spec.block))]


def _vine(density):
    vine = getattr(density, "vine", density)
    if not isinstance(vine, DVineModel):
        raise DomainError("copula-scale Monte Carlo needs a vine-backed density")
    return vine


def _copula_draw(vine, size, seed):
    """Vine-copula sample with columns in original dimension order."""
    u = vine.sample_uniform(size, make_rng(seed))
    out = np.empty_like(u)
    out[:, vine.order] = u
    return out


def entropy(density, spec, seed=0, chunk=CHUNK):
    """Shannon entropy of a latent density.

    With a :class:`GridSpec` this is the discrete entropy of the streamed
    grid masses, also reported divided by ``log(K**n)``. With a
    :class:`MonteCarloSpec` it is the differential entropy estimate
    ``-mean(log f)`` over samples drawn from the density; it has no
    normalised form.
    """
    density = _as_density(density)
    if isinstance(spec, GridSpec):
        m, z, s = _normalizer(density, spec, chunk)
        raw = max(0.0, math.log(z) - s / z)
        return DistributionSummary(normalized=min(1.0, raw / spec.log_n_cells), raw=raw,
                                   estimator="grid", size=spec.k, seed=None, scale=spec.scale)
    if isinstance(spec, MonteCarloSpec):
        def block(item):
            b, size = item
            if spec.scale == COPULA:
                u = _copula_draw(_vine(density), size, [seed, b])
                return float(np.sum(density.copula_logpdf_original(u)))
            return float(np.sum(density.log_density(density.sample(size, [seed, b]))))

        total = math.fsum(_map_ordered(block, _mc_blocks(spec)))
        return DistributionSummary(normalized=None, raw=-total / spec.samples,
                                   estimator="monte_carlo", size=spec.samples, seed=seed,
                                   scale=spec.scale)
    raise TypeError(f"unsupported estimator spec {spec!r}")


def _grid_kl(p, q, grid, chunk):
    mp, zp, _ = _normalizer(p, grid, chunk)
    mq, zq, _ = _normalizer(q, grid, chunk)
    log_zp = mp + math.log(zp)
    log_zq = mq + math.log(zq)
    log_floor = math.log(Q_FLOOR)

    def part(c):
        lp = _grid_logw(p, grid, *c) - log_zp
        lq = np.maximum(_grid_logw(q, grid, *c) - log_zq, log_floor)
        w = np.exp(lp)
        return float(np.dot(w, np.where(w > 0, lp - lq, 0.0)))

    return math.fsum(_map_ordered(part, _chunks(grid, chunk)))


def kl_divergence(p, q, spec, seed=0, chunk=CHUNK):
    """KL(P || Q) on a shared grid or by Monte Carlo under P.

    Q masses (or densities) are floored at ``Q_FLOOR`` so that disjoint
    supports give a large finite value. Tiny negative round-off is
    clamped to zero.
    """
    p, q = _as_density(p), _as_density(q)
    if p.dim != q.dim:
        raise ShapeError(f"densities have dimensions {p.dim} and {q.dim}")
    if isinstance(spec, GridSpec):
        kl = _grid_kl(p, q, spec, chunk)
    elif isinstance(spec, MonteCarloSpec):
        log_floor = math.log(Q_FLOOR)

        def block(item):
            b, size = item
            if spec.scale == COPULA:
                u = _copula_draw(_vine(p), size, [seed, b])
                lp, lq = p.copula_logpdf_original(u), q.copula_logpdf_original(u)
            else:
                h = p.sample(size, [seed, b])
                lp, lq = p.log_density(h), q.log_density(h)
            return float(np.sum(lp - np.maximum(lq, log_floor)))

        kl = math.fsum(_map_ordered(block, _mc_blocks(spec))) / spec.samples
    else:
        raise TypeError(f"unsupported estimator spec {spec!r}")
    if kl < -1e-9:
        raise NumericError(f"KL estimate {kl} is negative beyond round-off")
    return max(0.0, kl)


# ----------------------------------------------------------------------
# pairwise export


def pair_copula_density(vine, a, b, ua, ub, samples=PAIR_MC_SAMPLES, seed=0, chunk=64):
    """Bivariate copula density of original dimensions ``a`` and ``b``.

    Pairs that are adjacent in the vine order use their tree-1 copula
    directly. Other pairs integrate out the variables between them: with
    ``W`` drawn from the middle sub-vine, the density is the mean of
    ``c_block(ua, W, ub) / c_middle(W)``. The same ``W`` is used for every
    grid point.
    """
    pa, pb = vine.order.index(a), vine.order.index(b)
    ua, ub = np.asarray(ua, dtype=np.float64), np.asarray(ub, dtype=np.float64)
    if pa > pb:
        pa, pb, ua, ub = pb, pa, ub, ua
    span = pb - pa
    if span == 1:
        return np.exp(dvine_copula_logpdf(sub_pairs(vine.pairs, pa, 2),
                                          np.column_stack([ua, ub])))
    block = sub_pairs(vine.pairs, pa, span + 1)
    w = vine.sample_uniform(samples, make_rng(seed))[:, pa + 1:pb]
    l_mid = (dvine_copula_logpdf(sub_pairs(vine.pairs, pa + 1, span - 1), w)
             if span > 2 else np.zeros(samples))
    out = np.empty(len(ua))
    for lo in range(0, len(ua), chunk):
        hi = min(lo + chunk, len(ua))
        c = hi - lo
        rows = np.empty((c * samples, span + 1))
        rows[:, 0] = np.repeat(ua[lo:hi], samples)
        rows[:, -1] = np.repeat(ub[lo:hi], samples)
        rows[:, 1:-1] = np.tile(w, (c, 1))
        lb = dvine_copula_logpdf(block, rows).reshape(c, samples) - l_mid
        out[lo:hi] = np.exp(logsumexp(lb, axis=1) - math.log(samples))
    return out


def _write_csv(path, header, columns):
    data = np.column_stack(columns)
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header, comments="", newline="\n")


def pairwise_density_export(density, k, path, scale=LATENT, samples=PAIR_MC_SAMPLES, seed=0):
    """Write one ``k x k`` CSV per dimension pair plus 1-D marginal histograms.

    On the latent scale the grid spans each marginal's support and the
    value is ``f_a(x) f_b(y) c_ab(F_a(x), F_b(y))``; on the copula scale
    it is ``c_ab`` on cell centres of the unit square. Returns the list
    of written paths.
    """
    density = _as_density(density)
    vine = _vine(density)
    if not 2 <= k <= 200:
        raise DomainError(f"pairwise grid size must be in [2, 200], got {k}")
    if scale not in (COPULA, LATENT):
        raise DomainError(f"unknown scale {scale!r}")
    os.makedirs(path, exist_ok=True)
    written = []
    n = vine.dim
    centres = (np.arange(k) + 0.5) / k
    for a in range(n):
        for b in range(a + 1, n):
            if scale == COPULA:
                xa, xb = np.repeat(centres, k), np.tile(centres, k)
                ua, ub = xa, xb
                header = "u1,u2,density"
            else:
                (la, ha), (lb, hb) = vine.marginals[a].support, vine.marginals[b].support
                xa = np.repeat(la + centres * (ha - la), k)
                xb = np.tile(lb + centres * (hb - lb), k)
                ua, ub = vine.marginals[a].cdf(xa), vine.marginals[b].cdf(xb)
                header = f"h_{a},h_{b},density"
            dens = pair_copula_density(vine, a, b, ua, ub, samples=samples, seed=seed)
            if scale == LATENT:
                dens = dens * np.exp(vine.marginals[a].logpdf(xa) + vine.marginals[b].logpdf(xb))
            fname = os.path.join(path, f"pair_{a}_{b}.csv")
            _write_csv(fname, header, [xa, xb, dens])
            written.append(fname)
    for d in range(n):
        centres_d, dens_d = vine.marginals[d].histogram()
        fname = os.path.join(path, f"marginal_{d}.csv")
        _write_csv(fname, f"h_{d},density", [centres_d, dens_d])
        written.append(fname)
    return written


# ----------------------------------------------------------------------
# fingerprint


def fingerprint_score(decoded, mask, reference):
    """Mean decoded intensity inside the trigger mask minus the reference mean there."""
    decoded = np.atleast_2d(np.asarray(decoded, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    mask = np.asarray(mask, dtype=bool).ravel()
    if not mask.any():
        raise DomainError("trigger mask is empty")
    if decoded.shape[1] != mask.size or reference.shape[1] != mask.size:
        raise ShapeError(f"mask has {mask.size} pixels but samples have "
                         f"{decoded.shape[1]} and reference {reference.shape[1]}")
    if len(decoded) == 0 or len(reference) == 0:
        raise DomainError("fingerprint needs at least one decoded and one reference row")
    return float(decoded[:, mask].mean() - reference[:, mask].mean())
