"""Matrix-valued trigonometric polynomials on the torus.

A periodic hopping operator on a lattice with an M-site unit cell becomes,
after the Floquet transform, multiplication by an M x M matrix function

    A(k) = sum_n  exp(i n.k) A^(n),      k in [-pi, pi]^d,

with finitely many integer offsets n.  This module holds that representation
(`TrigMatrixPolynomial`), polynomial-in-omega families of it (`OmegaSymbol`),
and the small dense complex linear algebra the rest of the package needs.

Matrices are plain complex ndarrays; everything here is pure and safe to call
from any number of threads.
"""

import numpy as np

TWO_PI = 2.0 * np.pi

#: relative tolerance for "is Hermitian" checks
HERMITIAN_TOL = 1e-12

#: highest omega power accepted in an OmegaSymbol (covers the eigenvalue
#: shift, power 1, and squared-frequency mass terms, power 2)
MAX_OMEGA_POWER = 2


class InputError(ValueError):
    """Malformed argument: dimension mismatch, bad offset, unsupported power."""


class SingularMatrix(Exception):
    """Inversion of a numerically rank-deficient matrix was requested.

    Attributes
    ----------
    min_sigma : float
        Smallest singular value of the offending matrix.
    """

    def __init__(self, message, min_sigma):
        super().__init__(message)
        self.min_sigma = float(min_sigma)


def as_complex_matrix(entries):
    """Coerce to a square complex matrix, validating shape."""
    a = np.asarray(entries, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InputError(f"expected a square matrix, got shape {a.shape}")
    return a


def is_hermitian(a, tol=HERMITIAN_TOL):
    """True when max |a - a^H| <= tol * max(1, |a|)."""
    a = np.asarray(a)
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 0.0)
    return float(np.max(np.abs(a - a.conj().swapaxes(-1, -2)))) <= tol * scale


class TrigMatrixPolynomial:
    """Finite Fourier series of square complex matrices over a d-torus.

    Parameters
    ----------
    torus_dim : int
        Number of wavevector components d.
    coeffs : mapping
        Integer offset tuple of length d -> (M, M) array-like.  All matrices
        must share M.  Treat instances as immutable after construction.
    """

    def __init__(self, torus_dim, coeffs):
        torus_dim = int(torus_dim)
        if torus_dim < 0:
            raise InputError("torus_dim must be >= 0")
        items = []
        dim = None
        seen = set()
        for offset, mat in coeffs.items():
            off = tuple(int(c) for c in np.atleast_1d(np.asarray(offset, dtype=int)).ravel()) \
                if not isinstance(offset, tuple) else tuple(int(c) for c in offset)
            if len(off) != torus_dim:
                raise InputError(
                    f"offset {off} has length {len(off)}, torus_dim is {torus_dim}")
            if off in seen:
                raise InputError(f"duplicate offset {off}")
            seen.add(off)
            m = as_complex_matrix(mat)
            if dim is None:
                dim = m.shape[0]
            elif m.shape[0] != dim:
                raise InputError("all coefficient matrices must share one size")
            m = m.copy()
            m.flags.writeable = False
            items.append((off, m))
        if dim is None:
            raise InputError("a trig polynomial needs at least one coefficient")
        items.sort(key=lambda it: it[0])  # canonical lexicographic order
        self.torus_dim = torus_dim
        self.dim = dim
        self._items = tuple(items)
        self._lookup = {off: m for off, m in items}

    @property
    def offsets(self):
        return tuple(off for off, _ in self._items)

    def coeff(self, offset):
        """Coefficient matrix at `offset`, zero matrix if absent."""
        off = tuple(int(c) for c in offset)
        m = self._lookup.get(off)
        if m is None:
            return np.zeros((self.dim, self.dim), dtype=complex)
        return m

    def items(self):
        return self._items

    def pruned(self, tol=0.0):
        """Copy with coefficients of max-norm <= tol dropped (keeps >= 1)."""
        kept = {off: m for off, m in self._items if np.max(np.abs(m)) > tol}
        if not kept:
            off0 = (0,) * self.torus_dim
            kept = {off0: np.zeros((self.dim, self.dim), dtype=complex)}
        return TrigMatrixPolynomial(self.torus_dim, kept)

    def is_hermitian_family(self, tol=HERMITIAN_TOL):
        """True when the coefficient at -n is the conjugate transpose at n.

        This makes eval(k) Hermitian for every real k.
        """
        for off, m in self._items:
            neg = tuple(-c for c in off)
            if not np.allclose(self._lookup.get(neg, np.zeros_like(m)),
                               m.conj().T, rtol=0.0,
                               atol=tol * max(1.0, float(np.max(np.abs(m))))):
                return False
        return True

    def scaled(self, factor):
        return TrigMatrixPolynomial(
            self.torus_dim, {off: factor * m for off, m in self._items})

    def __add__(self, other):
        if not isinstance(other, TrigMatrixPolynomial):
            return NotImplemented
        if other.torus_dim != self.torus_dim or other.dim != self.dim:
            raise InputError("can only add polynomials of equal torus_dim and size")
        coeffs = {off: m.copy() for off, m in self._items}
        for off, m in other._items:
            coeffs[off] = coeffs.get(off, 0) + m
        return TrigMatrixPolynomial(self.torus_dim, coeffs)

    def eval(self, k):
        """Evaluate sum_n exp(i n.k) A^(n).

        Parameters
        ----------
        k : array_like
            Shape (torus_dim,) for a single point or (..., torus_dim) for a
            batch.

        Returns
        -------
        ndarray, shape (M, M) or (..., M, M)
        """
        k = np.asarray(k, dtype=float)
        single = (k.ndim == 1)
        if k.shape[-1] != self.torus_dim and not (self.torus_dim == 0 and k.size == 0):
            raise InputError(
                f"k has {k.shape[-1] if k.ndim else 0} components, expected {self.torus_dim}")
        if self.torus_dim == 0:
            base = self._lookup[()]
            if single or k.ndim == 0:
                return base.copy()
            out = np.broadcast_to(base, k.shape[:-1] + base.shape).copy()
            return out
        if single:
            k = k[None, :]
        out = np.zeros(k.shape[:-1] + (self.dim, self.dim), dtype=complex)
        for off, m in self._items:  # fixed canonical order
            phase = np.exp(1j * (k @ np.asarray(off, dtype=float)))
            out += phase[..., None, None] * m
        return out[0] if single else out

    def __repr__(self):
        return (f"TrigMatrixPolynomial(torus_dim={self.torus_dim}, "
                f"dim={self.dim}, n_coeffs={len(self._items)})")


class OmegaSymbol:
    """Polynomial-in-omega family of trig matrix polynomials.

    eval(omega, k) = sum_p omega^p * term_p(k).  Powers above
    ``MAX_OMEGA_POWER`` are rejected.
    """

    def __init__(self, terms):
        cleaned = {}
        for p, poly in terms.items():
            p = int(p)
            if p < 0:
                raise InputError("omega powers must be nonnegative")
            if p > MAX_OMEGA_POWER:
                raise InputError(
                    f"omega power {p} unsupported (max {MAX_OMEGA_POWER}); "
                    "rewrite the model in shift or squared-frequency form")
            if not isinstance(poly, TrigMatrixPolynomial):
                raise InputError("terms must be TrigMatrixPolynomial instances")
            cleaned[p] = poly
        if not cleaned:
            raise InputError("an OmegaSymbol needs at least one term")
        dims = {poly.dim for poly in cleaned.values()}
        tds = {poly.torus_dim for poly in cleaned.values()}
        if len(dims) != 1 or len(tds) != 1:
            raise InputError("all terms must share matrix size and torus_dim")
        self.terms = dict(sorted(cleaned.items()))
        self.dim = dims.pop()
        self.torus_dim = tds.pop()
        self.max_power = max(self.terms)

    def term(self, p):
        return self.terms.get(int(p))

    def is_hermitian_family(self, tol=HERMITIAN_TOL):
        return all(poly.is_hermitian_family(tol) for poly in self.terms.values())

    def eval(self, omega, k):
        """sum_p omega^p term_p(k); same shape conventions as poly.eval."""
        out = None
        for p, poly in self.terms.items():
            piece = (complex(omega) ** p) * poly.eval(k) if p else poly.eval(k)
            out = piece if out is None else out + piece
        return out

    def __repr__(self):
        return (f"OmegaSymbol(powers={tuple(self.terms)}, dim={self.dim}, "
                f"torus_dim={self.torus_dim})")


# ----------------------------------------------------------------------------
# operation surface


def eval_k(poly, k):
    """Evaluate a TrigMatrixPolynomial at wavevector k."""
    return poly.eval(k)


def eval_omega_k(symbol, omega, k):
    """Evaluate an OmegaSymbol at (omega, k)."""
    return symbol.eval(omega, k)


def det(a):
    """Determinant (LU with partial pivoting; the bare entry for M = 1).

    Accepts a single matrix or a batch (..., M, M).
    """
    a = np.asarray(a, dtype=complex)
    if a.shape[-1] == 1:
        return a[..., 0, 0].copy()
    return np.linalg.det(a)


def smallest_singular_value(a):
    """sigma_min, batched over leading axes."""
    a = np.asarray(a, dtype=complex)
    s = np.linalg.svd(a, compute_uv=False)
    return s[..., -1]


def inverse(a):
    """Matrix inverse with a rank-deficiency guard.

    Raises
    ------
    SingularMatrix
        When sigma_min < 64 * eps * sigma_max for some matrix in the batch,
        carrying the offending smallest singular value.
    """
    a = np.asarray(a, dtype=complex)
    s = np.linalg.svd(a, compute_uv=False)
    floor = 64.0 * np.finfo(float).eps * np.maximum(s[..., 0], 1e-300)
    bad = s[..., -1] < floor
    if np.any(bad):
        worst = float(np.min(s[..., -1][bad] if s.ndim > 1 else s[-1]))
        raise SingularMatrix(
            f"matrix singular to working precision (sigma_min={worst:.3e})", worst)
    return np.linalg.inv(a)


def hermitian_eigenvalues(a, tol=HERMITIAN_TOL):
    """Ascending real eigenvalues of a Hermitian matrix (or batch).

    Raises InputError when the input fails the Hermitian check.
    """
    a = np.asarray(a, dtype=complex)
    if not is_hermitian(a, tol):
        raise InputError("matrix is not Hermitian to tolerance")
    return np.linalg.eigvalsh(a)
