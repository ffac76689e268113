"""Periodic forward differences on d-dimensional grids and their Fourier diagonalization.

Conventions used throughout the package:

* An image is a real array of shape ``dims = (n_1, ..., n_d)``.
* A vector field is a real array of shape ``(d, *dims)``; component ``i`` lives on
  the same grid as the image and, for a gradient, holds the forward difference
  along array axis ``i``.
* When a flat vector is needed, arrays are flattened in Fortran order (axis 0
  fastest).  With that order, the difference along axis ``i`` is the Kronecker
  product ``I_{n_d} x ... x K_{n_i} x ... x I_{n_1}``; fields are flattened
  component by component.
* The DFT is unitary (``1/sqrt(N)`` in both directions) with a negative exponent on
  the forward transform.  Frequency index 0 along every axis is the zero
  frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

__all__ = [
    "GridShape",
    "SpectralOperator",
    "ConjugateSymmetryError",
    "real_dtype",
    "complex_dtype",
    "dft",
    "idft",
    "dft_field",
    "idft_field",
    "difference_matrix",
    "difference_eigenvalues",
    "gradient",
    "divergence",
    "spectral_operator",
    "negate_frequencies",
    "block_norm",
    "to_vector",
    "from_vector",
]


class ConjugateSymmetryError(ValueError):
    """An inverse DFT that should be real carries a significant imaginary part."""


_REAL = {"f32": np.float32, "f64": np.float64}
_COMPLEX = {np.dtype(np.float32): np.complex64, np.dtype(np.float64): np.complex128}


def real_dtype(precision):
    """Map ``'f32'``/``'f64'`` (or a numpy dtype) to the real floating dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(_REAL[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; use 'f32' or 'f64'") from None
    dt = np.dtype(precision)
    if dt.kind == "c":
        dt = np.finfo(dt).dtype
    if dt not in _COMPLEX:
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def complex_dtype(precision):
    return np.dtype(_COMPLEX[real_dtype(precision)])


@dataclass(frozen=True)
class GridShape:
    """Shape ``(n_1, ..., n_d)`` of a d-dimensional grid, ``1 <= d <= 3``."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if not 1 <= len(dims) <= 3:
            raise ValueError(f"only 1, 2 or 3 dimensions are supported, got {len(dims)}")
        if any(n < 1 for n in dims):
            raise ValueError(f"grid sizes must be positive, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def d(self):
        return len(self.dims)

    @property
    def N(self):
        return int(np.prod(self.dims))

    @property
    def field_shape(self):
        return (self.d,) + self.dims

    @classmethod
    def of(cls, shape):
        return shape if isinstance(shape, cls) else cls(tuple(shape))


def _image_axes(ndim):
    return tuple(range(ndim))


def dft(u):
    """Unitary d-dimensional DFT of an image (all axes)."""
    u = np.asarray(u)
    return sfft.fftn(u, axes=_image_axes(u.ndim), norm="ortho")


def _imag_guard(out, ref_norm, strict):
    if not strict:
        return out.real.copy()
    tol = 1e-8 if out.real.dtype == np.float64 else 1e-4
    resid = np.linalg.norm(out.imag)
    if resid > tol * max(ref_norm, np.finfo(out.real.dtype).tiny):
        raise ConjugateSymmetryError(
            f"inverse DFT has imaginary residual {resid:.3e} (input norm {ref_norm:.3e}); "
            "the spectrum is not conjugate symmetric"
        )
    return out.real.copy()


def idft(uh, *, real=True, strict=True):
    """Inverse of :func:`dft`.

    With ``real=True`` the real part is returned.  When ``strict`` is also set the
    discarded imaginary part must be below ``1e-8 * ||uh||`` (``1e-4`` in single
    precision), otherwise :class:`ConjugateSymmetryError` is raised.
    """
    uh = np.asarray(uh)
    out = sfft.ifftn(uh, axes=_image_axes(uh.ndim), norm="ortho")
    if not real:
        return out
    return _imag_guard(out, float(np.linalg.norm(uh)), strict)


def dft_field(p):
    """Per-component DFT of a vector field of shape ``(d, *dims)``."""
    p = np.asarray(p)
    return sfft.fftn(p, axes=tuple(range(1, p.ndim)), norm="ortho")


def idft_field(ph, *, real=True, strict=True):
    ph = np.asarray(ph)
    out = sfft.ifftn(ph, axes=tuple(range(1, ph.ndim)), norm="ortho")
    if not real:
        return out
    return _imag_guard(out, float(np.linalg.norm(ph)), strict)


def difference_matrix(n):
    """Dense periodic forward-difference matrix: ``(K u)_j = u_{j+1} - u_j``."""
    K = -np.eye(n) + np.roll(np.eye(n), 1, axis=1)
    return K


def difference_eigenvalues(n, dtype=np.complex128):
    """Eigenvalues of the ``n x n`` periodic forward-difference matrix.

    They are read off the DFT of the matrix's first column, so the ordering and
    conjugation follow the DFT convention of :func:`dft`:
    ``K = F^* diag(lam) F``.  In closed form ``lam_k = exp(2 pi i k / n) - 1``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    col = np.zeros(n)
    col[0] -= 1.0
    col[(n - 1) % n] += 1.0  # K[n-1, 0] = 1; for n == 1 both land on the diagonal
    lam = np.sqrt(n) * dft(col)
    lam[0] = 0.0
    return lam.astype(dtype)


def gradient(u):
    """Periodic forward differences ``K u`` along every axis; returns ``(d, *dims)``."""
    u = np.asarray(u)
    return np.stack([np.roll(u, -1, axis=i) - u for i in range(u.ndim)])


def divergence(p):
    """Adjoint of :func:`gradient` (the negative discrete divergence), ``K^* p``."""
    p = np.asarray(p)
    out = np.zeros_like(p[0])
    for i in range(p.shape[0]):
        out += np.roll(p[i], 1, axis=i) - p[i]
    return out


def block_norm(p):
    """Per-index Euclidean norm ``|p|`` of a vector field, shape ``dims``."""
    p = np.asarray(p)
    return np.sqrt(np.sum(p * p, axis=0))


def negate_frequencies(x):
    """Return ``y`` with ``y[k] = x[-k mod n]`` along every axis."""
    x = np.asarray(x)
    axes = _image_axes(x.ndim)
    return np.roll(np.flip(x, axis=axes), 1, axis=axes)


def to_vector(x, field=False):
    """Flatten an image, or a field component by component, in Fortran order."""
    x = np.asarray(x)
    if field:
        return np.concatenate([c.ravel(order="F") for c in x])
    return x.ravel(order="F")


def from_vector(vec, shape, field=False):
    """Inverse of :func:`to_vector` for a grid ``shape``."""
    dims = GridShape.of(shape).dims
    vec = np.asarray(vec)
    if not field:
        return vec.reshape(dims, order="F")
    d = len(dims)
    N = int(np.prod(dims))
    return np.stack([vec[i * N:(i + 1) * N].reshape(dims, order="F") for i in range(d)])


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """Fourier eigentables of the per-axis difference operators on one grid.

    ``eig[i]`` holds ``lambda^i_l`` on the frequency grid, ``denom`` is
    ``sum_i |lambda^i_l|^2`` and ``inv_denom`` its pseudo-inverse (zero at the zero
    frequency, the only zero of ``denom``).
    """

    shape: GridShape
    eig: np.ndarray
    denom: np.ndarray
    inv_denom: np.ndarray

    @property
    def dtype(self):
        return self.denom.dtype

    def apply(self, uh):
        """Spectrum of the gradient from the spectrum of an image."""
        return self.eig * uh[None]

    def apply_adjoint(self, ph):
        """Spectrum of ``K^* p`` from the per-component spectra of a field (f64 accumulation)."""
        acc = np.zeros(ph.shape[1:], dtype=np.complex128)
        for i in range(ph.shape[0]):
            acc += np.conj(self.eig[i]).astype(np.complex128) * ph[i]
        return acc

    def lift(self, ph):
        """Least-squares image spectrum ``(Lam^* Lam)^+ Lam^* ph`` (zero at the zero frequency)."""
        return self.apply_adjoint(ph) * self.inv_denom


@lru_cache(maxsize=32)
def _spectral_operator(dims, dtype_name):
    rdt = np.dtype(dtype_name)
    cdt = complex_dtype(rdt)
    d = len(dims)
    eig = np.empty((d,) + dims, dtype=np.complex128)
    for i, n in enumerate(dims):
        lam = difference_eigenvalues(n)
        bshape = [1] * d
        bshape[i] = n
        eig[i] = np.broadcast_to(lam.reshape(bshape), dims)
    denom = np.sum(np.abs(eig) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        inv = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    eig = eig.astype(cdt)
    eig.setflags(write=False)
    denom = denom.astype(rdt)
    denom.setflags(write=False)
    inv.setflags(write=False)  # kept in f64: the frequency update accumulates in f64
    return SpectralOperator(GridShape(dims), eig, denom, inv)


def spectral_operator(shape, precision="f64"):
    """Cached :class:`SpectralOperator` for a grid shape and precision."""
    dims = GridShape.of(shape).dims
    return _spectral_operator(dims, real_dtype(precision).name)
