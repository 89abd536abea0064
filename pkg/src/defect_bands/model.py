"""Problem description: bulk operator plus nested lower-dimensional defects.

A model is entered as real-space hopping stencils.  The bulk stencil lives on
Z^N; a defect of codimension j lives on the sublattice obtained by freezing
the first j lattice coordinates to zero, so its own offsets have length N - j.
``defect_stencil_to_symbol`` converts a defect stencil to its Floquet symbol,
which acquires the factor (2*pi)^(-j/2) from the sublattice averaging
convention; users always write physical hopping strengths and never see that
constant.
"""

from dataclasses import dataclass, field

import numpy as np

from .symbol import (
    InputError,
    OmegaSymbol,
    TrigMatrixPolynomial,
    TWO_PI,
    as_complex_matrix,
)


class Stencil:
    """Real-space hoppings: offset n -> block coupling cell 0 to cell n.

    The operator's matrix element between cells m and m + n is hopping(n), so
    self-adjointness reads hopping(-n) = hopping(n)^H.
    """

    def __init__(self, dim, hoppings):
        self.dim = int(dim)
        items = []
        seen = set()
        size = None
        for offset, block in hoppings.items():
            off = tuple(int(c) for c in (offset if isinstance(offset, tuple)
                                         else np.atleast_1d(offset)))
            if len(off) != self.dim:
                raise InputError(f"offset {off} has length {len(off)}, dim is {self.dim}")
            if off in seen:
                raise InputError(f"duplicate offset {off}")
            seen.add(off)
            m = as_complex_matrix(block)
            if size is None:
                size = m.shape[0]
            elif m.shape[0] != size:
                raise InputError("all hopping blocks must share one size")
            items.append((off, m))
        if size is None:
            raise InputError("a stencil needs at least one hopping")
        items.sort(key=lambda it: it[0])
        self.cell_size = size
        self._items = tuple(items)
        self._lookup = dict(items)

    def items(self):
        return self._items

    def hopping(self, offset):
        off = tuple(int(c) for c in offset)
        m = self._lookup.get(off)
        if m is None:
            return np.zeros((self.cell_size, self.cell_size), dtype=complex)
        return m

    def is_self_adjoint(self, tol=1e-12):
        for off, m in self._items:
            neg = tuple(-c for c in off)
            partner = self._lookup.get(neg, np.zeros_like(m))
            if not np.allclose(partner, m.conj().T, rtol=0.0,
                               atol=tol * max(1.0, float(np.max(np.abs(m))))):
                return False
        return True

    def __repr__(self):
        return f"Stencil(dim={self.dim}, cell_size={self.cell_size}, n_hoppings={len(self._items)})"


def stencil_to_symbol(stencil):
    """Floquet symbol of a periodic hopping operator.

    The coefficient at offset n is hopping(n); evaluation gives
    sum_n exp(i n.k) hopping(n).
    """
    return TrigMatrixPolynomial(stencil.dim,
                                {off: m for off, m in stencil.items()})


def defect_stencil_to_symbol(stencil, codim, lattice_dim):
    """Floquet symbol of a codimension-`codim` defect operator.

    The defect stencil lives on the last ``lattice_dim - codim`` coordinates;
    the returned polynomial has torus_dim = lattice_dim, offsets zero-padded
    in front, and every block scaled by (2*pi)^(-codim/2).  With that factor
    the Floquet action "multiply by symbol, then apply the sublattice average
    over the first `codim` axes" reproduces the real-space defect exactly.
    """
    codim = int(codim)
    n = int(lattice_dim)
    if not 1 <= codim <= n:
        raise InputError(f"codim must lie in 1..{n}, got {codim}")
    if stencil.dim != n - codim:
        raise InputError(
            f"defect stencil dim {stencil.dim} != lattice_dim - codim = {n - codim}")
    scale = TWO_PI ** (-codim / 2.0)
    pad = (0,) * codim
    coeffs = {pad + off: scale * m for off, m in stencil.items()}
    return TrigMatrixPolynomial(n, coeffs)


class DefectLayer:
    """A codimension-j defect: normalized Floquet symbol plus raw stencils.

    `symbol` is the OmegaSymbol on the full N-torus (constant in the first j
    wavevector components).  `raw_stencils` keeps the physical hoppings per
    omega power for real-space assembly, where the Fourier-side normalization
    must not appear.
    """

    def __init__(self, codim, symbol, raw_stencils=None, normalization_applied=True):
        self.codim = int(codim)
        self.symbol = symbol
        self.raw_stencils = dict(raw_stencils) if raw_stencils else {}
        self.normalization_applied = bool(normalization_applied)

    @classmethod
    def from_stencils(cls, codim, lattice_dim, stencils):
        """Build from {omega_power: Stencil over Z^(lattice_dim - codim)}."""
        terms = {p: defect_stencil_to_symbol(st, codim, lattice_dim)
                 for p, st in stencils.items()}
        return cls(codim, OmegaSymbol(terms), raw_stencils=stencils)

    def __repr__(self):
        return f"DefectLayer(codim={self.codim}, powers={tuple(self.symbol.terms)})"


@dataclass
class ToleranceSet:
    """Numeric knobs; all strictly positive, det_zero_tol < band_guard.

    det_zero_tol : sigma_min threshold below which a determinant counts as 0.
    quad_rel_tol : relative convergence target of adaptive quadrature.
    band_guard : keep-out distance from exclusion intervals inside which the
        chain quadrature is not trusted.
    root_tol_omega : bisection width for dispersion roots.
    k_grid_base : initial points per wavevector axis (power of two).
    """

    det_zero_tol: float = 1e-8
    quad_rel_tol: float = 1e-10
    band_guard: float = 0.02
    root_tol_omega: float = 1e-10
    k_grid_base: int = 64

    def violations(self):
        out = []
        for name in ("det_zero_tol", "quad_rel_tol", "band_guard", "root_tol_omega"):
            if not getattr(self, name) > 0:
                out.append(f"tolerance {name} must be positive")
        if self.k_grid_base < 4 or (self.k_grid_base & (self.k_grid_base - 1)):
            out.append("k_grid_base must be a power of two >= 4")
        if self.det_zero_tol >= self.band_guard:
            out.append("det_zero_tol must be smaller than band_guard")
        return out


@dataclass
class GridConfig:
    """Evaluation grids: wavevector points per axis, omega scan points."""

    k_points: int = 64
    omega_points: int = 513


@dataclass
class ProblemSpec:
    """Bulk symbol plus the ordered stack of defect layers.

    lattice_dim is N, cell_size is M.  Defects are sorted by codimension,
    at most one per codimension, each supported on the coordinate sublattice
    chain through the origin cell.
    """

    lattice_dim: int
    cell_size: int
    bulk: OmegaSymbol
    defects: tuple = ()
    tolerances: ToleranceSet = field(default_factory=ToleranceSet)
    omega_window: tuple = (-10.0, 10.0)

    def __post_init__(self):
        self.defects = tuple(sorted(self.defects, key=lambda d: d.codim))
        self.omega_window = (float(self.omega_window[0]), float(self.omega_window[1]))

    def defect_by_codim(self, codim):
        for layer in self.defects:
            if layer.codim == codim:
                return layer
        return None

    @property
    def present_codims(self):
        return tuple(layer.codim for layer in self.defects)

    def is_self_adjoint(self):
        return self.bulk.is_hermitian_family() and all(
            layer.symbol.is_hermitian_family() for layer in self.defects)


@dataclass
class ValidationReport:
    violations: list
    info: dict

    @property
    def ok(self):
        return not self.violations

    @property
    def first(self):
        return self.violations[0] if self.violations else None


def validate(spec):
    """Check every structural invariant of a ProblemSpec.

    Returns a ValidationReport with the full ordered violation list (empty
    means valid) and an info dict recording Hermitian-family status and the
    highest omega power per symbol.
    """
    violations = []
    info = {}
    n = spec.lattice_dim
    m = spec.cell_size
    if n < 1:
        violations.append("lattice_dim must be >= 1")
    if m < 1:
        violations.append("cell_size must be >= 1")
    if spec.bulk.torus_dim != n:
        violations.append(
            f"bulk symbol torus_dim {spec.bulk.torus_dim} != lattice_dim {n}")
    if spec.bulk.dim != m:
        violations.append(f"bulk symbol size {spec.bulk.dim} != cell_size {m}")
    info["bulk"] = {"hermitian_family": spec.bulk.is_hermitian_family(),
                    "max_omega_power": spec.bulk.max_power}

    seen_codims = set()
    for layer in spec.defects:
        tag = f"defect codim {layer.codim}"
        if not 1 <= layer.codim <= n:
            violations.append(f"{tag}: codim outside 1..{n}")
            continue
        if layer.codim in seen_codims:
            violations.append(f"{tag}: duplicate codim {layer.codim}")
        seen_codims.add(layer.codim)
        sym = layer.symbol
        if sym.dim != m:
            violations.append(f"{tag}: symbol size {sym.dim} != cell_size {m}")
        if sym.torus_dim != n:
            violations.append(
                f"{tag}: symbol torus_dim {sym.torus_dim} != lattice_dim {n}")
        else:
            for p, poly in sym.terms.items():
                for off in poly.offsets:
                    if any(off[i] != 0 for i in range(layer.codim)):
                        violations.append(
                            f"{tag}: defect depends on averaged direction "
                            f"(offset {off} nonzero in first {layer.codim} components)")
                        break
                else:
                    continue
                break
        if not layer.normalization_applied:
            violations.append(f"{tag}: symbol normalization not applied")
        info[tag] = {"hermitian_family": sym.is_hermitian_family(),
                     "max_omega_power": sym.max_power}

    violations.extend(spec.tolerances.violations())
    lo, hi = spec.omega_window
    if not lo < hi:
        violations.append("omega_window must satisfy min < max")
    info["self_adjoint"] = spec.is_self_adjoint()
    return ValidationReport(violations=violations, info=info)
