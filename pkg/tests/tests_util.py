"""Programmatic model builders for parameter sweeps in tests."""

from defect_bands.model import (
    DefectLayer,
    GridConfig,
    ProblemSpec,
    Stencil,
    stencil_to_symbol,
)
from defect_bands.symbol import OmegaSymbol, TrigMatrixPolynomial


def chain_with_defect(eps, k_points=64, omega_points=513):
    """1D nearest-neighbor chain with an on-site point defect of strength eps."""
    bulk = OmegaSymbol({
        0: stencil_to_symbol(Stencil(1, {(1,): [[1.0]], (-1,): [[1.0]]})),
        1: TrigMatrixPolynomial(1, {(0,): [[-1.0]]}),
    })
    layer = DefectLayer.from_stencils(1, 1, {0: Stencil(0, {(): [[eps]]})})
    spec = ProblemSpec(lattice_dim=1, cell_size=1, bulk=bulk,
                       defects=(layer,), omega_window=(-4.0, 4.0))
    return spec, GridConfig(k_points=k_points, omega_points=omega_points)


def square_with_line_defect(eps, k_points=64, omega_points=513):
    """2D square lattice with an on-site line defect along the second axis."""
    bulk = OmegaSymbol({
        0: stencil_to_symbol(Stencil(2, {(1, 0): [[1.0]], (-1, 0): [[1.0]],
                                         (0, 1): [[1.0]], (0, -1): [[1.0]]})),
        1: TrigMatrixPolynomial(2, {(0, 0): [[-1.0]]}),
    })
    layer = DefectLayer.from_stencils(1, 2, {0: Stencil(1, {(0,): [[eps]]})})
    spec = ProblemSpec(lattice_dim=2, cell_size=1, bulk=bulk,
                       defects=(layer,), omega_window=(-6.0, 6.0))
    return spec, GridConfig(k_points=k_points, omega_points=omega_points)
