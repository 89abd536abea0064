"""Spectral engine for periodic operators with nested lower-dimensional defects.

Everything revolves around a ladder of matrices built at a fixed omega.
Level 0 is the bulk symbol itself, a function of all N wavevector
components.  Whenever level j-1 is invertible everywhere, level j is

    B_j = I + < B_{j-1}^{-1} ... B_1^{-1} B_0^{-1} A_j >_{1..j}

with the codimension-j defect symbol A_j and the scaled sub-torus average
over the first j axes; B_j depends only on the trailing N-j components.
A singular level-j matrix certifies omega in the spectrum and yields a
dispersion branch of dimension N-j: bulk bands at level 0, guided branches
in between, isolated points at level N.  Membership testing, branch root
finding, exclusion-interval bookkeeping, the assembled spectrum, and the
constructive inverse of the operator all live here.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import GridConfig, validate
from .quadrature import NonConvergence, _product_nodes, grid_nodes
from .symbol import (
    TWO_PI,
    InputError,
    SingularMatrix,
    det,
    inverse,
    smallest_singular_value,
)

logger = logging.getLogger("defect_bands.spectrum")

#: relative imaginary-part threshold below which a determinant field is
#: treated as a real function of k or omega (sign tests enabled)
IMAG_DOMINANCE = 1e-6

#: points per axis of the one local refinement pass around a sigma_min argmin
REFINE_POINTS = 33


class UncertifiedLevel(RuntimeError):
    """A level matrix was requested before the ones below it were certified."""


def full_mesh(lattice_dim, n):
    """All grid points of [-pi,pi)^lattice_dim, lexicographic rows."""
    return _product_nodes(grid_nodes(n), lattice_dim)


def remaining_mesh(lattice_dim, level, n):
    """Grid rows for the coordinates a level-`level` matrix depends on."""
    return _product_nodes(grid_nodes(n), lattice_dim - level)


# ---------------------------------------------------------------------------
# the chain of level matrices at fixed omega


class Chain:
    """Lazy evaluator for the level matrices at one omega.

    Level j values are produced by adaptive quadrature over the first j axes;
    the points-per-axis that first converges is pinned per level and reused,
    and converged values are memoized per coordinate tuple, so repeated
    queries (step checks, local refinement, root polishing) stay cheap.
    """

    def __init__(self, spec, omega, quad_rel_tol=None, n_quad_start=16,
                 n_quad_max=4096):
        self.spec = spec
        self.omega = float(omega)
        self.quad_rel_tol = (spec.tolerances.quad_rel_tol
                             if quad_rel_tol is None else float(quad_rel_tol))
        self.n_quad_start = int(n_quad_start)
        self.n_quad_max = int(n_quad_max)
        self._layers = {layer.codim: layer for layer in spec.defects}
        self._memo = {}
        self._nquad = {}

    def level0(self, k_rows):
        return self.spec.bulk.eval(self.omega, np.asarray(k_rows, dtype=float))

    def level_values(self, level, t_rows):
        """Level matrices at rows of remaining coordinates.

        Parameters
        ----------
        level : int, 0..N
        t_rows : array, shape (m, N - level)

        Returns
        -------
        ndarray, shape (m, M, M)
        """
        n_dim = self.spec.lattice_dim
        m_sz = self.spec.cell_size
        t_rows = np.asarray(t_rows, dtype=float)
        if n_dim - level == 0:
            t_rows = t_rows.reshape(max(1, t_rows.shape[0] if t_rows.ndim else 1), 0)
        else:
            t_rows = t_rows.reshape(-1, n_dim - level)
        if level == 0:
            return self.level0(t_rows)
        if level not in self._layers:
            eye = np.eye(m_sz, dtype=complex)
            return np.broadcast_to(eye, (t_rows.shape[0], m_sz, m_sz)).copy()
        memo = self._memo.setdefault(level, {})
        keys = [tuple(row) for row in t_rows]
        missing = [i for i, key in enumerate(keys) if key not in memo]
        if missing:
            vals = self._converged_values(level, t_rows[missing])
            for slot, val in zip(missing, vals):
                memo[keys[slot]] = val
        return np.stack([memo[key] for key in keys], axis=0)

    # -- internals ----------------------------------------------------------

    def _converged_values(self, level, t_rows):
        fixed = self._nquad.get(level)
        if fixed is not None:
            return self._bracket_values(level, t_rows, fixed)
        n = self.n_quad_start
        prev = self._bracket_values(level, t_rows, n)
        while True:
            if 2 * n > self.n_quad_max:
                raise NonConvergence(
                    f"level {level} quadrature stalled at n={n} per axis "
                    f"(omega={self.omega!r} is too close to a lower-level "
                    "spectrum projection)",
                    n_reached=n, last_change=np.inf,
                    witness_sigma_min=self._witness_sigma(level, t_rows))
            n *= 2
            try:
                curr = self._bracket_values(level, t_rows, n)
            except SingularMatrix as exc:
                raise NonConvergence(
                    f"level {level} integrand singular on the refinement grid",
                    n_reached=n, last_change=np.inf,
                    witness_sigma_min=exc.min_sigma) from exc
            scale = max(1.0, float(np.max(np.abs(curr))))
            change = float(np.max(np.abs(curr - prev))) / scale
            if change < self.quad_rel_tol:
                self._nquad[level] = n
                logger.debug("level %d converged at n=%d (change %.2e)",
                             level, n, change)
                return curr
            prev = curr

    def _bracket_values(self, level, t_rows, n):
        """I + scaled integral of the inverse-product integrand, fixed n."""
        n_dim = self.spec.lattice_dim
        m_sz = self.spec.cell_size
        j = level
        m = t_rows.shape[0]
        nodes = grid_nodes(n)
        kint = _product_nodes(nodes, j)
        k_full = np.empty((kint.shape[0], m, n_dim), dtype=float)
        k_full[:, :, :j] = kint[:, None, :]
        if n_dim > j:
            k_full[:, :, j:] = t_rows[None, :, :]
        prod = inverse(self.level0(k_full.reshape(-1, n_dim)))
        prod = prod.reshape((n,) * j + (m, m_sz, m_sz))
        for i in range(1, j):
            if i not in self._layers:
                continue  # pass-through level, factor is the identity
            sub = _product_nodes(nodes, j - i)
            t_i = np.empty((sub.shape[0], m, n_dim - i), dtype=float)
            t_i[:, :, :j - i] = sub[:, None, :]
            if n_dim > j:
                t_i[:, :, j - i:] = t_rows[None, :, :]
            vals_i = self.level_values(i, t_i.reshape(-1, n_dim - i))
            inv_i = inverse(vals_i).reshape((n,) * (j - i) + (m, m_sz, m_sz))
            inv_i = inv_i.reshape((1,) * i + inv_i.shape)
            prod = np.matmul(inv_i, prod)
        k_t = np.zeros((m, n_dim), dtype=float)
        if n_dim > j:
            k_t[:, j:] = t_rows
        a_vals = self._layers[j].symbol.eval(self.omega, k_t)
        prod = np.matmul(prod, a_vals.reshape((1,) * j + (m, m_sz, m_sz)))
        weight = TWO_PI ** (-j / 2.0) * (TWO_PI / n) ** j
        total = weight * prod.reshape(-1, m, m_sz, m_sz).sum(axis=0)
        return np.eye(m_sz, dtype=complex) + total

    def _witness_sigma(self, level, t_rows):
        """Min sigma_min of the bulk level over the base integration mesh."""
        n_dim = self.spec.lattice_dim
        nodes = grid_nodes(min(self.n_quad_start * 4, 256))
        kint = _product_nodes(nodes, level)
        k_full = np.empty((kint.shape[0], t_rows.shape[0], n_dim), dtype=float)
        k_full[:, :, :level] = kint[:, None, :]
        if n_dim > level:
            k_full[:, :, level:] = t_rows[None, :, :]
        vals = self.level0(k_full.reshape(-1, n_dim))
        return float(np.min(smallest_singular_value(vals)))


def build_b0(spec, omega):
    """The level-0 matrix as a callable of the full wavevector.

    For a family linear in omega whose power-1 term is -I this is literally
    the bulk symbol shifted by -omega on the diagonal.
    """
    def fn(k_rows):
        return spec.bulk.eval(float(omega), np.asarray(k_rows, dtype=float))
    return fn


# ---------------------------------------------------------------------------
# step checks: does det vanish somewhere on the level's torus?


@dataclass
class StepCheckResult:
    detected: bool
    min_sigma: float
    argmin_k: tuple
    method: str

    @property
    def certified_invertible(self):
        return not self.detected


def _crossing_detect(values_grid):
    """Any strict sign change between periodically adjacent grid nodes.

    `values_grid` is real, shape (n,)*d + (channels,).  Returns the flat
    grid index of the smaller-|value| endpoint of a crossing pair, or None.
    """
    d = values_grid.ndim - 1
    best = None
    for axis in range(d):
        rolled = np.roll(values_grid, -1, axis=axis)
        cross = (values_grid * rolled) < 0
        if np.any(cross):
            idx = np.argwhere(cross)[0]
            here = tuple(idx[:-1])
            there = list(here)
            there[axis] = (there[axis] + 1) % values_grid.shape[axis]
            chan = idx[-1]
            pick = here if abs(values_grid[here + (chan,)]) <= \
                abs(values_grid[tuple(there) + (chan,)]) else tuple(there)
            if best is None:
                best = pick
    return best


def _patch_rows(center, n_axes, cell_width):
    """Local refinement rows around a node: +-1 coarse cell, fine spacing."""
    if n_axes == 0:
        return np.zeros((1, 0))
    axis_offsets = np.linspace(-cell_width, cell_width, REFINE_POINTS)
    mesh = np.meshgrid(*[c + axis_offsets for c in center], indexing="ij")
    return np.stack([m.ravel(order="C") for m in mesh], axis=-1)


def step_check(fn, n_axes, k_points, tolerances, mode="sigma", refine=True):
    """Decide whether det of a level matrix vanishes somewhere on its torus.

    Parameters
    ----------
    fn : callable
        Maps (m, n_axes) wavevector rows to (m, M, M) matrices.
    n_axes : int
        Number of free wavevector components (0 for the final level, where
        the check degenerates to |det| <= det_zero_tol on a single matrix).
    mode : {"sigma", "hermitian", "real-det"}
        "hermitian" adds per-band eigenvalue sign crossings between adjacent
        nodes (catches zeros the grid does not land on); "real-det" adds the
        analogous sign test on Re(det) when the imaginary part is dominated;
        "sigma" thresholds sigma_min only.

    A detection ends the search immediately; otherwise one local refinement
    pass around the sigma_min argmin is made before certifying.
    """
    tol = tolerances.det_zero_tol
    if n_axes == 0:
        val = fn(np.zeros((1, 0)))
        d = complex(det(val)[0])
        sig = float(smallest_singular_value(val)[0])
        return StepCheckResult(detected=bool(abs(d) <= tol), min_sigma=sig,
                               argmin_k=(), method="final-det")

    rows = _product_nodes(grid_nodes(k_points), n_axes)
    vals = fn(rows)
    shape = (k_points,) * n_axes

    def examine(rows_, vals_, periodic):
        sig = smallest_singular_value(vals_)
        i_min = int(np.argmin(sig))
        found, method, where = False, "sigma", i_min
        if sig[i_min] <= tol:
            found, method = True, "sigma"
        if not found and mode == "hermitian":
            eigs = np.linalg.eigvalsh(vals_)
            grid = eigs.reshape(shape + (eigs.shape[-1],)) if periodic else None
            if periodic:
                hit = _crossing_detect(grid)
                if hit is not None:
                    found, method = True, "crossing"
                    where = int(np.ravel_multi_index(hit, shape))
            else:  # refinement patch: open line of nodes per axis
                patch_shape = (REFINE_POINTS,) * n_axes
                grid = eigs.reshape(patch_shape + (eigs.shape[-1],))
                for axis in range(n_axes):
                    sl_a = [slice(None)] * (n_axes + 1)
                    sl_b = [slice(None)] * (n_axes + 1)
                    sl_a[axis] = slice(0, -1)
                    sl_b[axis] = slice(1, None)
                    if np.any(grid[tuple(sl_a)] * grid[tuple(sl_b)] < 0):
                        found, method = True, "crossing"
                        break
        if not found and mode == "real-det":
            dets = det(vals_)
            scale = float(np.max(np.abs(dets))) + 1e-300
            if float(np.max(np.abs(dets.imag))) <= IMAG_DOMINANCE * scale:
                if periodic:
                    grid = dets.real.reshape(shape + (1,))
                    hit = _crossing_detect(grid)
                    if hit is not None:
                        found, method = True, "det-sign"
                        where = int(np.ravel_multi_index(hit, shape))
                else:
                    patch_shape = (REFINE_POINTS,) * n_axes
                    grid = dets.real.reshape(patch_shape)
                    for axis in range(n_axes):
                        sl_a = [slice(None)] * n_axes
                        sl_b = [slice(None)] * n_axes
                        sl_a[axis] = slice(0, -1)
                        sl_b[axis] = slice(1, None)
                        if np.any(grid[tuple(sl_a)] * grid[tuple(sl_b)] < 0):
                            found, method = True, "det-sign"
                            break
        return found, method, float(sig[i_min]), where

    found, method, min_sig, where = examine(rows, vals, periodic=True)
    argmin = tuple(rows[where])
    if found:
        return StepCheckResult(True, min_sig, argmin, method)

    if refine:
        cell = TWO_PI / k_points
        patch = _patch_rows(argmin, n_axes, cell)
        pvals = fn(patch)
        pfound, pmethod, pmin, pwhere = examine(patch, pvals, periodic=False)
        if pmin < min_sig:
            min_sig, argmin = pmin, tuple(patch[pwhere])
        if pfound:
            return StepCheckResult(True, min_sig, argmin, pmethod + "-refined")

    return StepCheckResult(False, min_sig, argmin, method)


# ---------------------------------------------------------------------------
# the certified ladder


class BChain:
    """Level matrices at one omega together with their step-check records.

    Levels must be certified bottom-up; `extend` refuses to compute a level
    before every lower present level (and level 0) has been checked and
    certified invertible.
    """

    def __init__(self, spec, omega, grids=None):
        self.spec = spec
        self.omega = float(omega)
        self.grids = grids or GridConfig(k_points=spec.tolerances.k_grid_base)
        self.chain = Chain(spec, omega)
        self.checks = {}

    def _mode_for(self, level):
        if level == 0:
            return "hermitian" if self.spec.is_self_adjoint() else "sigma"
        return "real-det"

    def check_level(self, level):
        n_dim = self.spec.lattice_dim
        fn = lambda rows: self.chain.level_values(level, rows)
        res = step_check(fn, n_dim - level, self.grids.k_points,
                         self.spec.tolerances, mode=self._mode_for(level))
        self.checks[level] = res
        return res

    def extend(self, level):
        """Check-and-record level `level`; lower levels must be certified."""
        required = [0] + [c for c in self.spec.present_codims if c < level]
        for lower in required:
            prev = self.checks.get(lower)
            if prev is None:
                raise UncertifiedLevel(
                    f"level {level} requested before level {lower} was checked")
            if prev.detected:
                raise UncertifiedLevel(
                    f"level {level} requested but level {lower} is singular")
        return self.check_level(level)


def extend_chain(bchain, spec, level):
    """Grow a BChain by one level (spec kept for surface symmetry)."""
    if spec is not bchain.spec:
        raise InputError("extend_chain called with a different spec")
    bchain.extend(level)
    return bchain


# ---------------------------------------------------------------------------
# membership


@dataclass
class MembershipCertificate:
    status: str                      # "in" | "out" | "inconclusive"
    detected_at_step: int = None
    witness_k: tuple = None
    min_sigma_per_level: list = field(default_factory=list)
    reason: str = ""

    @property
    def in_spectrum(self):
        return self.status == "in"

    def to_dict(self):
        return {
            "status": self.status,
            "in_spectrum": self.in_spectrum,
            "detected_at_step": self.detected_at_step,
            "witness_k": (None if self.witness_k is None
                          else [float(x) for x in self.witness_k]),
            "min_sigma_per_level": [
                {"level": int(lv), "min_sigma": float(sg)}
                for lv, sg in self.min_sigma_per_level],
            "reason": self.reason,
        }


def membership(spec, lam, grids=None):
    """Test whether `lam` belongs to the spectrum of the perturbed operator.

    Runs the step procedure: check level 0 on the full grid, then extend the
    ladder through each present defect level in codimension order, checking
    each.  The first singular level decides membership and is reported with
    its witness wavevector.  When `lam` sits within band_guard of a lower
    level's spectrum the higher brackets cannot be trusted and the verdict is
    "inconclusive" (membership there is already decided by the lower level in
    exact arithmetic, just not resolvable at this tolerance).
    """
    grids = grids or GridConfig(k_points=spec.tolerances.k_grid_base)
    guard = spec.tolerances.band_guard
    bchain = BChain(spec, lam, grids)
    trace = []

    res = bchain.check_level(0)
    trace.append((0, res.min_sigma))
    if res.detected:
        return MembershipCertificate("in", detected_at_step=0,
                                     witness_k=res.argmin_k,
                                     min_sigma_per_level=trace)
    sigma_floor = res.min_sigma
    for codim in spec.present_codims:
        if sigma_floor < guard:
            return MembershipCertificate(
                "inconclusive", min_sigma_per_level=trace,
                reason=(f"lambda is within band_guard={guard} of a lower-level "
                        f"spectrum projection (min sigma {sigma_floor:.3e})"))
        try:
            res = bchain.extend(codim)
        except NonConvergence as exc:
            return MembershipCertificate(
                "inconclusive", min_sigma_per_level=trace,
                reason=(f"quadrature did not converge at level {codim}: {exc} "
                        f"(witness sigma_min "
                        f"{exc.witness_sigma_min if exc.witness_sigma_min is not None else float('nan'):.3e})"))
        trace.append((codim, res.min_sigma))
        if res.detected:
            return MembershipCertificate("in", detected_at_step=codim,
                                         witness_k=res.argmin_k,
                                         min_sigma_per_level=trace)
        sigma_floor = min(sigma_floor, res.min_sigma)
    return MembershipCertificate("out", min_sigma_per_level=trace)


# ---------------------------------------------------------------------------
# bulk dispersion


def _is_minus_identity(poly, m_sz):
    if poly is None or poly.offsets != ((0,) * poly.torus_dim,):
        return False
    return bool(np.allclose(poly.coeff((0,) * poly.torus_dim),
                            -np.eye(m_sz), rtol=0.0, atol=1e-12))


def bands(spec, k):
    """Dispersion frequencies at one wavevector, ascending.

    Linear omega dependence with power-1 term -I reduces to the Hermitian
    eigenvalues of the power-0 term; other linear and quadratic dependences
    go through a companion-form generalized eigenvalue problem and keep the
    real roots.  Non-self-adjoint bulks are unsupported.
    """
    if not spec.bulk.is_hermitian_family():
        raise InputError("bands requires a Hermitian-family bulk symbol")
    k = np.asarray(k, dtype=float).reshape(spec.lattice_dim)
    terms = spec.bulk.terms
    m_sz = spec.cell_size
    if spec.bulk.max_power == 0:
        raise InputError("bulk family does not depend on omega; no dispersion")
    if spec.bulk.max_power == 1 and _is_minus_identity(terms.get(1), m_sz):
        return np.linalg.eigvalsh(terms[0].eval(k))
    t0 = terms[0].eval(k) if 0 in terms else np.zeros((m_sz, m_sz), complex)
    t1 = terms[1].eval(k) if 1 in terms else np.zeros((m_sz, m_sz), complex)
    if spec.bulk.max_power == 1:
        vals = scipy.linalg.eig(t0, -t1, right=False)
    else:
        t2 = terms[2].eval(k)
        zero = np.zeros((m_sz, m_sz), complex)
        eye = np.eye(m_sz, dtype=complex)
        comp = np.block([[zero, eye], [-t0, -t1]])
        mass = np.block([[eye, zero], [zero, t2]])
        vals = scipy.linalg.eig(comp, mass, right=False)
    vals = vals[np.isfinite(vals)]
    scale = np.maximum(1.0, np.abs(vals))
    real = vals[np.abs(vals.imag) <= 1e-9 * scale].real
    return np.sort(real)


def _hermitian_linear_fast(spec):
    return (spec.bulk.max_power == 1
            and spec.bulk.is_hermitian_family()
            and _is_minus_identity(spec.bulk.terms.get(1), spec.cell_size))


def bands_grid(spec, k_rows):
    """Bands at many wavevectors; (m, n_bands) when the count is uniform."""
    k_rows = np.asarray(k_rows, dtype=float).reshape(-1, spec.lattice_dim)
    if _hermitian_linear_fast(spec):
        return np.linalg.eigvalsh(spec.bulk.terms[0].eval(k_rows))
    per_node = [bands(spec, row) for row in k_rows]
    counts = {len(b) for b in per_node}
    if len(counts) == 1:
        return np.stack(per_node, axis=0)
    return per_node


# ---------------------------------------------------------------------------
# interval bookkeeping


def merge_intervals(intervals, eps=0.0):
    """Union of closed intervals; pieces touching within eps are joined."""
    ivs = sorted((float(lo), float(hi)) for lo, hi in intervals if hi >= lo)
    out = []
    for lo, hi in ivs:
        if out and lo <= out[-1][1] + eps:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return out


def dist_to_intervals(x, intervals):
    """Distance from x to a union of intervals (0 inside; inf if empty)."""
    best = np.inf
    for lo, hi in intervals:
        if lo <= x <= hi:
            return 0.0
        best = min(best, abs(x - lo), abs(x - hi))
    return best


def point_in_intervals(x, intervals, dilate=0.0):
    return any(lo - dilate <= x <= hi + dilate for lo, hi in intervals)


def _cluster_sorted(values, gap):
    """Split a sorted 1-d sample set into clusters at gaps larger than `gap`."""
    clusters = []
    for v in values:
        if clusters and v - clusters[-1][-1] <= gap:
            clusters[-1].append(v)
        else:
            clusters.append([v])
    return clusters


def branch_link_gap(tolerances, omega_window, k_points):
    """Largest omega jump between adjacent k nodes still read as one branch.

    Scales with the k-grid spacing and the window size; the root tolerance
    alone would split every smooth branch sampled on a finite grid.
    """
    span = float(omega_window[1] - omega_window[0])
    return max(10.0 * tolerances.root_tol_omega,
               4.0 * (TWO_PI / k_points) * max(1.0, span / np.pi))


# ---------------------------------------------------------------------------
# exclusion sets


@dataclass
class ExclusionSet:
    codim: int
    k_points: int
    nodes: np.ndarray                 # (m, N - codim) remaining coordinates
    intervals: list                   # per node: list of (lo, hi)

    def intervals_at(self, idx):
        return self.intervals[idx]

    def index_of(self, t):
        t = tuple(np.asarray(t, dtype=float).ravel())
        for i, row in enumerate(self.nodes):
            if np.allclose(row, t, rtol=0.0, atol=1e-12):
                return i
        raise InputError(f"node {t} not on the exclusion grid")


def exclusion_set(spec, codim, grids=None, omega_window=None, branches=None):
    """Omega intervals where the level-`codim` dispersion is not evaluated.

    Per remaining-coordinate node: the per-band [min, max] of the bulk
    dispersion over the integrated axes, unioned with the projections of
    every lower-codimension defect branch, overlapping pieces merged.
    """
    grids = grids or GridConfig(k_points=spec.tolerances.k_grid_base)
    window = omega_window or spec.omega_window
    branches = branches or {}
    n_dim = spec.lattice_dim
    n = grids.k_points
    j = codim
    refine = 4 if n_dim <= 2 else 2

    t_mesh = remaining_mesh(n_dim, j, n)
    fine_nodes = grid_nodes(refine * n)
    kint = _product_nodes(fine_nodes, j)
    k_full = np.empty((kint.shape[0], t_mesh.shape[0], n_dim), dtype=float)
    k_full[:, :, :j] = kint[:, None, :]
    if n_dim > j:
        k_full[:, :, j:] = t_mesh[None, :, :]
    band_vals = bands_grid(spec, k_full.reshape(-1, n_dim))
    gap = branch_link_gap(spec.tolerances, window, n)

    per_node = []
    if isinstance(band_vals, np.ndarray):
        nb = band_vals.shape[-1]
        grid_e = band_vals.reshape(kint.shape[0], t_mesh.shape[0], nb)
        lo = grid_e.min(axis=0)
        hi = grid_e.max(axis=0)
        for t_idx in range(t_mesh.shape[0]):
            per_node.append([(float(lo[t_idx, b]), float(hi[t_idx, b]))
                             for b in range(nb)])
    else:  # ragged real-root counts: cluster the pooled samples per node
        pooled = [[] for _ in range(t_mesh.shape[0])]
        for flat_idx, roots in enumerate(band_vals):
            pooled[flat_idx % t_mesh.shape[0]].extend(roots)
        for samples in pooled:
            clusters = _cluster_sorted(sorted(samples), gap)
            per_node.append([(c[0], c[-1]) for c in clusters])

    trailing = n_dim - j
    for codim_lower, branch in branches.items():
        if codim_lower >= j:
            continue
        for t_idx, t in enumerate(t_mesh):
            collected = sorted(
                omega for k_tail, omega, _ in branch.samples
                if trailing == 0
                or np.allclose(k_tail[len(k_tail) - trailing:], t,
                               rtol=0.0, atol=1e-12))
            for cluster in _cluster_sorted(collected, gap):
                per_node[t_idx].append((cluster[0], cluster[-1]))

    intervals = [merge_intervals(ivs) for ivs in per_node]
    return ExclusionSet(codim=j, k_points=n, nodes=t_mesh, intervals=intervals)


# ---------------------------------------------------------------------------
# dispersion branches of defect levels


@dataclass
class Branch:
    codim: int
    samples: list      # (k_tail tuple, omega, annotation) triples
    k_points: int

    def omegas_at(self, t):
        t = tuple(np.asarray(t, dtype=float).ravel())
        return sorted(om for k_tail, om, _ in self.samples
                      if len(k_tail) == len(t)
                      and np.allclose(k_tail, t, rtol=0.0, atol=1e-12))


def _level_det(spec, level, t_row, omega):
    ch = Chain(spec, omega)
    vals = ch.level_values(level, np.asarray(t_row, dtype=float).reshape(1, -1))
    return complex(det(vals)[0])


def _bisect_root(f, a, b, fa, fb, tol_omega):
    while b - a > tol_omega:
        mid = 0.5 * (a + b)
        fm = f(mid)
        if np.sign(fm) == np.sign(fa):
            a, fa = mid, fm
        else:
            b, fb = mid, fm
    return 0.5 * (a + b)


def _golden_min(f, a, b, tol_omega):
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol_omega:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def dispersion_branch(spec, codim, grids=None, omega_window=None,
                      exclusion=None, branches=None):
    """Roots of det B_codim over the admissible omega window, per k node.

    Scans a uniform omega grid outside the exclusion intervals dilated by
    band_guard, detects roots by sign change of Re(det) (imaginary part must
    be quadrature-noise small) or by |det| dropping below det_zero_tol, and
    refines each by bisection (golden-section on |det| as the fallback) to
    root_tol_omega.  Roots hugging the guard boundary are annotated
    "near-band" rather than dropped.
    """
    grids = grids or GridConfig(k_points=spec.tolerances.k_grid_base)
    window = omega_window or spec.omega_window
    tol = spec.tolerances
    if exclusion is None:
        exclusion = exclusion_set(spec, codim, grids, window, branches)
    if spec.defect_by_codim(codim) is None:
        return Branch(codim=codim, samples=[], k_points=grids.k_points)

    n_dim = spec.lattice_dim
    t_mesh = remaining_mesh(n_dim, codim, grids.k_points)
    n_t = t_mesh.shape[0]
    scan = np.linspace(window[0], window[1], grids.omega_points)
    step = scan[1] - scan[0] if len(scan) > 1 else 0.0

    admissible = np.zeros((n_t, len(scan)), dtype=bool)
    for t_idx in range(n_t):
        ivs = exclusion.intervals[t_idx]
        admissible[t_idx] = [dist_to_intervals(w, ivs) >= tol.band_guard
                             for w in scan]

    det_tab = np.full((n_t, len(scan)), np.nan, dtype=complex)
    for w_idx, omega in enumerate(scan):
        mask = admissible[:, w_idx]
        if not np.any(mask):
            continue
        ch = Chain(spec, omega)
        try:
            vals = ch.level_values(codim, t_mesh[mask])
        except NonConvergence:
            continue  # annotated by the nan gap
        det_tab[mask, w_idx] = det(vals)

    samples = []
    for t_idx in range(n_t):
        col = det_tab[t_idx]
        ok = admissible[t_idx] & np.isfinite(col.real)
        finite = np.abs(col[ok])
        if finite.size == 0:
            continue
        scale = float(np.max(finite)) + 1e-300
        real_ok = float(np.nanmax(np.abs(col[ok].imag))) <= IMAG_DOMINANCE * scale
        t_row = t_mesh[t_idx]
        f_real = lambda w: _level_det(spec, codim, t_row, w).real
        f_abs = lambda w: abs(_level_det(spec, codim, t_row, w))
        roots = []
        for w in range(len(scan) - 1):
            if not (ok[w] and ok[w + 1]):
                continue
            fa, fb = col[w].real, col[w + 1].real
            if real_ok and fa * fb < 0:
                roots.append(_bisect_root(f_real, scan[w], scan[w + 1],
                                          fa, fb, tol.root_tol_omega))
        absd = np.abs(col)
        for w in range(len(scan)):
            if not ok[w] or absd[w] > tol.det_zero_tol:
                continue
            left = scan[w] - step if w > 0 and ok[w - 1] else scan[w]
            right = scan[w] + step if w + 1 < len(scan) and ok[w + 1] else scan[w]
            if right > left:
                cand = _golden_min(f_abs, left, right, tol.root_tol_omega)
            else:
                cand = scan[w]
            if f_abs(cand) <= tol.det_zero_tol:
                roots.append(cand)
        roots = sorted(roots)
        kept = []
        for r in roots:
            if not kept or r - kept[-1] > 10 * tol.root_tol_omega:
                kept.append(r)
        for r in kept:
            dist = dist_to_intervals(r, exclusion.intervals[t_idx])
            annot = "ok" if dist >= tol.band_guard + step else "near-band"
            samples.append((tuple(t_row), float(r), annot))
    return Branch(codim=codim, samples=samples, k_points=grids.k_points)


# ---------------------------------------------------------------------------
# the assembled spectrum


@dataclass
class OmegaComponent:
    kind: str        # "band_interval" | "branch_interval" | "isolated_point"
    codim: int
    lo: float
    hi: float


@dataclass
class SpectralResult:
    components: list
    branches: dict
    exclusions: dict
    omega_window: tuple
    probe_report: dict

    @property
    def omega_intervals(self):
        """The spectrum as a merged union of closed intervals."""
        return merge_intervals([(c.lo, c.hi) for c in self.components])

    def contains(self, omega, dilate=0.0):
        return point_in_intervals(omega, self.omega_intervals, dilate)


def _branch_components(spec, branch, window, k_points):
    """Branch samples -> interval components (or points at the final level)."""
    out = []
    if branch.codim == spec.lattice_dim:
        for _, omega, _ in branch.samples:
            out.append(OmegaComponent("isolated_point", branch.codim,
                                      omega, omega))
        return out
    gap = branch_link_gap(spec.tolerances, window, k_points)
    omegas = sorted(om for _, om, _ in branch.samples)
    for cluster in _cluster_sorted(omegas, gap):
        out.append(OmegaComponent("branch_interval", branch.codim,
                                  cluster[0], cluster[-1]))
    return out


def full_spectrum(spec, omega_window=None, grids=None, n_probes=32,
                  probe_seed=20260808):
    """Bands, every present defect branch, and the assembled spectrum.

    Besides the components, runs `n_probes` membership tests at seeded
    uniform probe frequencies and records agreement with the assembled set
    (inconclusive verdicts are listed, not counted as disagreements).
    """
    report = validate(spec)
    if not report.ok:
        raise InputError(f"invalid spec: {report.first}")
    grids = grids or GridConfig(k_points=spec.tolerances.k_grid_base)
    window = omega_window or spec.omega_window

    n_dim = spec.lattice_dim
    refine = 4 if n_dim <= 2 else 1
    mesh = full_mesh(n_dim, refine * grids.k_points)
    band_vals = bands_grid(spec, mesh)
    components = []
    if isinstance(band_vals, np.ndarray):
        for b in range(band_vals.shape[-1]):
            components.append(OmegaComponent(
                "band_interval", 0,
                float(band_vals[:, b].min()), float(band_vals[:, b].max())))
    else:
        gap = branch_link_gap(spec.tolerances, window, grids.k_points)
        pooled = sorted(v for roots in band_vals for v in roots)
        for cluster in _cluster_sorted(pooled, gap):
            components.append(OmegaComponent("band_interval", 0,
                                             cluster[0], cluster[-1]))

    exclusions, branches = {}, {}
    for codim in spec.present_codims:
        excl = exclusion_set(spec, codim, grids, window, branches)
        br = dispersion_branch(spec, codim, grids, window, exclusion=excl)
        exclusions[codim] = excl
        branches[codim] = br
        components.extend(_branch_components(spec, br, window, grids.k_points))

    clipped = []
    for c in components:
        lo, hi = max(c.lo, window[0]), min(c.hi, window[1])
        if hi >= lo:
            clipped.append(OmegaComponent(c.kind, c.codim, lo, hi))

    result = SpectralResult(components=clipped, branches=branches,
                            exclusions=exclusions, omega_window=window,
                            probe_report={})
    rng = np.random.default_rng(probe_seed)
    disagreements, inconclusive = [], []
    for lam in rng.uniform(window[0], window[1], size=int(n_probes)):
        cert = membership(spec, float(lam), grids)
        if cert.status == "inconclusive":
            inconclusive.append(float(lam))
            continue
        in_set = result.contains(float(lam),
                                 dilate=spec.tolerances.root_tol_omega)
        if cert.in_spectrum != in_set:
            disagreements.append(
                {"lambda": float(lam), "membership": cert.status,
                 "in_assembled_set": bool(in_set)})
    result.probe_report = {"n_probes": int(n_probes),
                           "disagreements": disagreements,
                           "inconclusive": inconclusive}
    if disagreements:
        logger.warning("membership/assembly probe disagreements: %r",
                       disagreements)
    return result


# ---------------------------------------------------------------------------
# constructive inverse


def trig_vector(torus_dim, coeffs):
    """Vector-valued trig polynomial sum_n exp(i n.k) v_n as a callable."""
    items = sorted((tuple(int(c) for c in off), np.asarray(v, dtype=complex))
                   for off, v in coeffs.items())

    def fn(k_rows):
        k_rows = np.asarray(k_rows, dtype=float).reshape(-1, torus_dim)
        out = np.zeros((k_rows.shape[0], items[0][1].shape[0]), dtype=complex)
        for off, v in items:
            phase = np.exp(1j * (k_rows @ np.asarray(off, dtype=float)))
            out += phase[:, None] * v
        return out

    return fn


def _axis_reduce(arr, n):
    """One scaled-average reduction over the current leading grid axis."""
    w = TWO_PI ** (-0.5) * (TWO_PI / n)
    return w * arr.sum(axis=0)


def _grid_tabs(spec, omega, n):
    """Level matrices and reduced defect symbols tabulated on one fixed grid.

    Every bracket uses the same n-point trapezoid rule, so the reduction and
    back-substitution below solve the discretized operator exactly.
    """
    n_dim = spec.lattice_dim
    m_sz = spec.cell_size
    tol = spec.tolerances.det_zero_tol
    mesh = full_mesh(n_dim, n)
    grid_shape = (n,) * n_dim

    b_tabs = {0: spec.bulk.eval(omega, mesh).reshape(grid_shape + (m_sz, m_sz))}
    a_tabs = {}
    for layer in spec.defects:
        vals = layer.symbol.eval(omega, mesh).reshape(grid_shape + (m_sz, m_sz))
        a_tabs[(0, layer.codim)] = vals

    eye = np.eye(m_sz, dtype=complex)
    inv_tabs = {}
    for level in range(1, n_dim + 1):
        prev = b_tabs[level - 1]
        sig = smallest_singular_value(prev.reshape(-1, m_sz, m_sz))
        if float(sig.min()) <= tol:
            raise UncertifiedLevel(
                f"level {level - 1} is singular on the grid "
                f"(min sigma {float(sig.min()):.3e}); omega is in or too "
                "close to the spectrum")
        inv_prev = inverse(prev.reshape(-1, m_sz, m_sz)).reshape(prev.shape)
        inv_tabs[level - 1] = inv_prev
        for codim in spec.present_codims:
            if codim >= level:
                a_tabs[(level, codim)] = _axis_reduce(
                    np.matmul(inv_prev, a_tabs[(level - 1, codim)]), n)
        if level in spec.present_codims:
            b_tabs[level] = (eye + a_tabs[(level, level)])
        else:
            shape = grid_shape[level:] + (m_sz, m_sz)
            b_tabs[level] = np.broadcast_to(eye, shape).copy()
    sig_last = smallest_singular_value(b_tabs[n_dim].reshape(-1, m_sz, m_sz))
    if float(sig_last.min()) <= tol:
        raise UncertifiedLevel(
            f"final level is singular (min sigma {float(sig_last.min()):.3e})")
    inv_tabs[n_dim] = inverse(b_tabs[n_dim])
    return mesh, b_tabs, a_tabs, inv_tabs


def forward_apply(spec, omega, f_tab, n):
    """Apply the perturbed operator to a grid-sampled function.

    f_tab has shape (n,)*N + (M,); brackets use the same n-point rule as the
    solver, so forward_apply is the exact discrete adjoint check.
    """
    n_dim = spec.lattice_dim
    m_sz = spec.cell_size
    mesh = full_mesh(n_dim, n)
    grid_shape = (n,) * n_dim
    b0 = spec.bulk.eval(omega, mesh).reshape(grid_shape + (m_sz, m_sz))
    out = np.matmul(b0, f_tab[..., None])[..., 0]
    for layer in spec.defects:
        avg = f_tab
        for _ in range(layer.codim):
            avg = _axis_reduce(avg, n)
        a_vals = layer.symbol.eval(omega, mesh).reshape(grid_shape + (m_sz, m_sz))
        out = out + np.matmul(a_vals, np.broadcast_to(
            avg, grid_shape[:layer.codim] + avg.shape)[..., None])[..., 0]
    return out


@dataclass
class ResolventSolution:
    f_tab: np.ndarray
    residual: float
    n: int
    averages: dict


def resolvent_apply(spec, omega, g, grids=None, n=None):
    """Solve (perturbed operator) f = g at an omega outside the spectrum.

    `g` is a callable mapping (m, N) wavevector rows to (m, M) vectors (see
    `trig_vector`).  The solve reduces the right-hand side level by level
    with the inverse level matrices, solves the final small system, and
    back-substitutes.  Returns the grid-sampled solution and the relative
    residual of the forward operator applied to it.
    """
    grids = grids or GridConfig(k_points=spec.tolerances.k_grid_base)
    n = int(n or grids.k_points)
    n_dim = spec.lattice_dim
    m_sz = spec.cell_size
    omega = float(omega)

    cert = membership(spec, omega, grids)
    if cert.status != "out":
        raise UncertifiedLevel(
            f"omega={omega!r} is in or unresolvably close to the spectrum "
            f"(membership: {cert.status}"
            + (f", step {cert.detected_at_step}" if cert.in_spectrum else "")
            + ")")
    mesh, b_tabs, a_tabs, inv_tabs = _grid_tabs(spec, omega, n)
    grid_shape = (n,) * n_dim
    g_tab = np.asarray(g(mesh), dtype=complex).reshape(grid_shape + (m_sz,))

    g_levels = {0: g_tab}
    for level in range(1, n_dim + 1):
        g_levels[level] = _axis_reduce(
            np.matmul(inv_tabs[level - 1], g_levels[level - 1][..., None])[..., 0], n)

    u = {n_dim: np.matmul(inv_tabs[n_dim], g_levels[n_dim][..., None])[..., 0]}
    for level in range(n_dim - 1, -1, -1):
        rhs = g_levels[level].copy()
        for codim in spec.present_codims:
            if codim <= level:
                continue
            u_b = u[codim].reshape((1,) * (codim - level) + u[codim].shape)
            rhs = rhs - np.matmul(
                a_tabs[(level, codim)],
                np.broadcast_to(u_b, grid_shape[level:codim] + u[codim].shape)[..., None])[..., 0]
        u[level] = np.matmul(inv_tabs[level], rhs[..., None])[..., 0]

    f_tab = u[0]
    applied = forward_apply(spec, omega, f_tab, n)
    cell = (TWO_PI / n) ** n_dim
    num = np.sqrt(cell * np.sum(np.abs(applied - g_tab) ** 2))
    den = np.sqrt(cell * np.sum(np.abs(g_tab) ** 2))
    residual = float(num / den) if den > 0 else float(num)
    return ResolventSolution(f_tab=f_tab, residual=residual, n=n,
                             averages={lv: u[lv] for lv in u if lv > 0})
