"""Brute-force validation: truncate to a finite box, diagonalize, compare.

The truncated operator places the raw real-space hoppings (bulk everywhere,
defect stack on the coordinate sublattices through the origin) on a finite
box, with open or periodic boundaries per axis.  Two comparisons matter:

* periodic boundaries, no defect: eigenvalues equal the bulk dispersion at
  the discrete wavevectors exactly, so the deviation is pure eigensolver
  noise — the strongest available cross-check;
* open boundaries with defects: localized and guided modes appear with
  exponentially small truncation error, while genuine edge artifacts are
  recognized by eigenvector mass near the boundary and flagged, not failed.

Defect hoppings enter with their raw physical values; the sublattice
normalization factor lives on the Fourier side only.
"""

import numpy as np

from .spectrum import bands, point_in_intervals
from .symbol import InputError, TWO_PI, is_hermitian

#: dense eigensolver size cap
MAX_DIMENSION = 20000


class TruncatedOperator:
    """Dense real-space truncation of the perturbed operator."""

    def __init__(self, spec, half_widths, bcs, matrix, site_cells):
        self.spec = spec
        self.half_widths = tuple(half_widths)
        self.bcs = tuple(bcs)
        self.matrix = matrix
        self.site_cells = site_cells    # (n_cells, N) integer cell coordinates
        self.dimension = matrix.shape[0]

    def __repr__(self):
        return (f"TruncatedOperator(L={self.half_widths}, bc={self.bcs}, "
                f"dim={self.dimension})")


def _axis_sites(half_width, bc):
    if bc == "open":
        return np.arange(-half_width, half_width + 1)
    if bc == "periodic":
        return np.arange(half_width)
    raise InputError(f"boundary condition must be open|periodic, got {bc!r}")


def _check_eigenproblem_form(spec):
    bulk = spec.bulk
    shift = bulk.terms.get(1)
    ok = (bulk.max_power == 1 and shift is not None
          and shift.offsets == ((0,) * spec.lattice_dim,)
          and np.allclose(shift.coeff((0,) * spec.lattice_dim),
                          -np.eye(spec.cell_size), atol=1e-12))
    if not ok:
        raise InputError(
            "truncated assembly needs an eigenvalue-form family (linear in "
            "omega with power-1 term -I); linearize quadratic families to "
            "companion form first")
    for layer in spec.defects:
        if set(layer.symbol.terms) != {0}:
            raise InputError(
                "truncated assembly supports omega-independent defects only")
        if not layer.raw_stencils:
            raise InputError(
                f"defect codim {layer.codim} carries no raw stencil; build "
                "layers with DefectLayer.from_stencils for oracle comparisons")


def assemble_truncated(spec, half_width, bc="open"):
    """Dense truncation on a finite box.

    Parameters
    ----------
    half_width : int or sequence of int
        Box half-width per axis: open axes hold sites -L..L, periodic axes
        L sites with wraparound.
    bc : str or sequence of str
        "open" or "periodic", per axis or one value for all axes.
    """
    _check_eigenproblem_form(spec)
    n_dim = spec.lattice_dim
    m_sz = spec.cell_size
    if np.isscalar(half_width):
        half_widths = (int(half_width),) * n_dim
    else:
        half_widths = tuple(int(x) for x in half_width)
    if isinstance(bc, str):
        bcs = (bc,) * n_dim
    else:
        bcs = tuple(bc)
    if len(half_widths) != n_dim or len(bcs) != n_dim:
        raise InputError("half_width and bc must cover every axis")

    axes_sites = [_axis_sites(l, b) for l, b in zip(half_widths, bcs)]
    mesh = np.meshgrid(*axes_sites, indexing="ij")
    cells = np.stack([m.ravel(order="C") for m in mesh], axis=-1)
    n_cells = cells.shape[0]
    dim = n_cells * m_sz
    if dim > MAX_DIMENSION:
        raise InputError(
            f"truncated dimension {dim} exceeds {MAX_DIMENSION}; reduce L")
    index = {tuple(c): i for i, c in enumerate(cells)}

    def locate(cell):
        """Cell index after wrap/drop per axis; None when outside the box."""
        out = []
        for x, l, b in zip(cell, half_widths, bcs):
            if b == "periodic":
                out.append(int(x) % l)
            else:
                if not -l <= x <= l:
                    return None
                out.append(int(x))
        return index[tuple(out)]

    h = np.zeros((dim, dim), dtype=complex)

    bulk_stencil = spec.bulk.terms.get(0)
    bulk_items = bulk_stencil.items() if bulk_stencil is not None else ()
    for offset, block in bulk_items:
        off = np.asarray(offset, dtype=int)
        for c_idx, cell in enumerate(cells):
            t_idx = locate(cell + off)
            if t_idx is None:
                continue
            h[t_idx * m_sz:(t_idx + 1) * m_sz,
              c_idx * m_sz:(c_idx + 1) * m_sz] += block

    for layer in spec.defects:
        j = layer.codim
        on_sub = np.all(cells[:, :j] == 0, axis=1)
        sub_cells = cells[on_sub]
        stencil = layer.raw_stencils[0]
        for offset, block in stencil.items():
            off = np.zeros(n_dim, dtype=int)
            off[j:] = offset
            for cell in sub_cells:
                c_idx = index[tuple(cell)]
                t_idx = locate(cell + off)
                if t_idx is None:
                    continue
                h[t_idx * m_sz:(t_idx + 1) * m_sz,
                  c_idx * m_sz:(c_idx + 1) * m_sz] += block

    if spec.is_self_adjoint():
        asym = float(np.max(np.abs(h - h.conj().T)))
        scale = max(1.0, float(np.max(np.abs(h))))
        if asym > 1e-14 * scale:
            raise AssertionError(
                f"assembly broke Hermiticity (asymmetry {asym:.3e})")
    return TruncatedOperator(spec, half_widths, bcs, h, cells)


def oracle_eigenvalues(truncated):
    """Ascending eigenvalues of the dense truncation (Hermitian path)."""
    if truncated.dimension > MAX_DIMENSION:
        raise InputError(
            f"dimension {truncated.dimension} exceeds {MAX_DIMENSION}; reduce L")
    if not is_hermitian(truncated.matrix, tol=1e-12):
        raise InputError("truncated operator is not Hermitian")
    return np.linalg.eigvalsh(truncated.matrix)


def oracle_eigenpairs(truncated):
    """Eigenvalues and eigenvectors of the dense truncation, ascending."""
    if not is_hermitian(truncated.matrix, tol=1e-12):
        raise InputError("truncated operator is not Hermitian")
    return np.linalg.eigh(truncated.matrix)


def boundary_mass(truncated, vectors, margin=2):
    """Fraction of each eigenvector's weight within `margin` cells of an
    open boundary (0 for fully periodic boxes)."""
    cells = truncated.site_cells
    near = np.zeros(cells.shape[0], dtype=bool)
    for axis, (l, b) in enumerate(zip(truncated.half_widths, truncated.bcs)):
        if b != "open":
            continue
        near |= np.abs(cells[:, axis]) > l - margin
    m_sz = truncated.spec.cell_size
    near_sites = np.repeat(near, m_sz)
    weight = np.abs(vectors) ** 2
    return weight[near_sites].sum(axis=0) / weight.sum(axis=0)


def periodic_box_check(spec, half_width):
    """Exact identity: periodic-box eigenvalues vs bands at discrete k.

    Requires a defect-free spec.  Returns the max absolute deviation between
    the sorted eigenvalues of the periodic truncation and the sorted multiset
    of bands at k* = 2*pi*m/L - pi per axis; any deviation is eigensolver
    noise.
    """
    if spec.defects:
        raise InputError("periodic_box_check requires a defect-free spec")
    l = int(half_width)
    trunc = assemble_truncated(spec, l, bc="periodic")
    eigs = oracle_eigenvalues(trunc)
    axis_k = TWO_PI * np.arange(l) / l - np.pi
    mesh = np.meshgrid(*([axis_k] * spec.lattice_dim), indexing="ij")
    k_rows = np.stack([m.ravel(order="C") for m in mesh], axis=-1)
    model = np.sort(np.concatenate([bands(spec, row) for row in k_rows]))
    return float(np.max(np.abs(np.sort(eigs) - model)))


def compare_spectra(result, eigenvalues, tol, boundary_fraction=None,
                    edge_threshold=0.5):
    """Check truncated eigenvalues against an assembled spectrum.

    Every eigenvalue must lie within `tol` of the assembled set, except
    those whose `boundary_fraction` exceeds `edge_threshold` (open-boundary
    artifacts, flagged).  Every isolated point of the set must be matched by
    some eigenvalue within `tol`; an unmatched point is a failure carrying
    the nearest eigenvalue.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    intervals = result.omega_intervals
    unmatched_eigs, flagged = [], []
    for idx, val in enumerate(eigenvalues):
        if point_in_intervals(val, intervals, dilate=tol):
            continue
        if boundary_fraction is not None and boundary_fraction[idx] > edge_threshold:
            flagged.append((float(val), float(boundary_fraction[idx])))
        else:
            unmatched_eigs.append(float(val))
    point_matches, failures = [], []
    for comp in result.components:
        if comp.kind != "isolated_point":
            continue
        gap = float(np.min(np.abs(eigenvalues - comp.lo)))
        if gap <= tol:
            point_matches.append({"point": comp.lo, "gap": gap})
        else:
            nearest = float(eigenvalues[np.argmin(np.abs(eigenvalues - comp.lo))])
            failures.append({"point": comp.lo, "nearest_eigenvalue": nearest,
                             "gap": gap})
    return {
        "ok": not unmatched_eigs and not failures,
        "unmatched_eigenvalues": unmatched_eigs,
        "edge_flagged": flagged,
        "isolated_point_matches": point_matches,
        "isolated_point_failures": failures,
    }
