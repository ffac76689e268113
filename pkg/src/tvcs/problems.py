"""Synthetic TV compressed-sensing problems: phantoms, random Fourier masks, measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .spectral import GridShape, dft, idft, negate_frequencies, gradient, block_norm

__all__ = [
    "MaskError",
    "SamplingMask",
    "Phantom",
    "Problem",
    "shepp_logan",
    "piecewise_constant",
    "sample_mask",
    "measure",
    "zero_filled",
    "make_problem",
    "support_fraction",
    "SHEPP_LOGAN_2D",
    "SHEPP_LOGAN_3D",
]


class MaskError(ValueError):
    """A sampling mask or its data violates the measurement contract."""


@dataclass(eq=False)
class SamplingMask:
    """Observed frequency set and the data measured on it.

    ``observed`` is a boolean array on the frequency grid; ``data`` is a complex
    array of the same shape holding ``b`` on the observed set and zero elsewhere
    (``None`` until :func:`measure` fills it).
    """

    observed: np.ndarray
    data: np.ndarray | None = None
    fraction: float | None = None
    seed: int | None = None
    symmetric: bool = True
    _checked: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.data is not None:
            self.data = np.asarray(self.data)
            if self.data.shape != self.observed.shape:
                raise MaskError(f"data shape {self.data.shape} != mask shape {self.observed.shape}")

    @property
    def shape(self):
        return GridShape(self.observed.shape)

    @property
    def m(self):
        return int(self.observed.sum())

    @property
    def indices(self):
        """Sorted flat indices of the observed set (Fortran order, 0-based)."""
        return np.flatnonzero(self.observed.ravel(order="F"))

    @property
    def labels(self):
        """1-based labels; label 1 is the zero frequency."""
        return self.indices + 1

    @property
    def values(self):
        """The measured vector ``b`` ordered like :attr:`indices`."""
        if self.data is None:
            raise MaskError("mask carries no data; call measure() first")
        return self.data.ravel(order="F")[self.indices]

    def check(self, tol=1e-10):
        """Validate zero-frequency presence and Hermitian consistency (cached)."""
        if self._checked:
            return self
        zero = (0,) * self.observed.ndim
        if not self.observed[zero]:
            raise MaskError("the zero frequency must be observed")
        if self.symmetric and not np.array_equal(self.observed, negate_frequencies(self.observed)):
            raise MaskError("mask flagged symmetric but is not closed under frequency negation")
        if self.data is not None and self.symmetric:
            b = self.data
            pair = self.observed & negate_frequencies(self.observed)
            gap = np.abs(b - np.conj(negate_frequencies(b)))[pair]
            scale = max(float(np.abs(b).max(initial=0.0)), 1.0)
            if gap.size and gap.max() > tol * scale:
                raise MaskError(
                    f"data is not Hermitian consistent (max |b_-l - conj(b_l)| = {gap.max():.3e})"
                )
        self._checked = True
        return self

    def with_data(self, data):
        return replace(self, data=np.asarray(data), _checked=False)


@dataclass
class Phantom:
    image: np.ndarray
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class Problem:
    """A measured problem, optionally with its ground truth."""

    mask: SamplingMask
    truth: np.ndarray | None = None

    @property
    def shape(self):
        return self.mask.shape


# Modified (Toft) Shepp-Logan: intensity, semi-axes a, b, centre x0, y0, rotation (deg).
SHEPP_LOGAN_2D = np.array([
    [1.00, 0.6900, 0.920, 0.00, 0.0000, 0.0],
    [-0.80, 0.6624, 0.874, 0.00, -0.0184, 0.0],
    [-0.20, 0.1100, 0.310, 0.22, 0.0000, -18.0],
    [-0.20, 0.1600, 0.410, -0.22, 0.0000, 18.0],
    [0.10, 0.2100, 0.250, 0.00, 0.3500, 0.0],
    [0.10, 0.0460, 0.046, 0.00, 0.1000, 0.0],
    [0.10, 0.0460, 0.046, 0.00, -0.1000, 0.0],
    [0.10, 0.0460, 0.023, -0.08, -0.6050, 0.0],
    [0.10, 0.0230, 0.023, 0.00, -0.6060, 0.0],
    [0.10, 0.0230, 0.046, 0.06, -0.6050, 0.0],
])

# 3D extension with all ellipsoid centres in z = 0 and rotations about z only, so the
# central slice reproduces the 2D table: intensity, a, b, c, x0, y0, z0, rotation (deg).
SHEPP_LOGAN_3D = np.array([
    [1.00, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.0, 0.0],
    [-0.80, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.0, 0.0],
    [-0.20, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.0, -18.0],
    [-0.20, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.0, 18.0],
    [0.10, 0.2100, 0.250, 0.410, 0.00, 0.3500, 0.0, 0.0],
    [0.10, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.0, 0.0],
    [0.10, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.0, 0.0],
    [0.10, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.0, 0.0],
    [0.10, 0.0230, 0.023, 0.200, 0.00, -0.6060, 0.0, 0.0],
    [0.10, 0.0230, 0.046, 0.200, 0.06, -0.6050, 0.0, 0.0],
])


def _centres(n):
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def shepp_logan(shape, table=None):
    """Modified Shepp-Logan phantom on a 2D or 3D grid, rescaled to ``[0, 1]``.

    Array axes are ``(y, x)`` in 2D and ``(z, y, x)`` in 3D, with ``y`` decreasing
    down the rows so that row 0 is the top of the head.  A pixel takes the summed
    intensity of every ellipse containing its centre.
    """
    dims = GridShape.of(shape).dims
    d = len(dims)
    if d not in (2, 3):
        raise ValueError(f"Shepp-Logan phantoms are 2D or 3D, got d={d}")
    if d == 2:
        table = SHEPP_LOGAN_2D if table is None else np.asarray(table)
        y = -_centres(dims[0])[:, None]
        x = _centres(dims[1])[None, :]
        z = None
    else:
        table = SHEPP_LOGAN_3D if table is None else np.asarray(table)
        z = _centres(dims[0])[:, None, None]
        y = -_centres(dims[1])[None, :, None]
        x = _centres(dims[2])[None, None, :]
    img = np.zeros(dims)
    for row in table:
        if d == 2:
            A, a, b, x0, y0, phi = row
        else:
            A, a, b, c, x0, y0, z0, phi = row
        t = np.deg2rad(phi)
        xr = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
        yr = -(x - x0) * np.sin(t) + (y - y0) * np.cos(t)
        r = (xr / a) ** 2 + (yr / b) ** 2
        if d == 3:
            r = r + ((z - z0) / c) ** 2
        img += A * (r <= 1.0)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return Phantom(
        img,
        "shepp-logan",
        {"variant": "modified-toft" + ("-3d-z0" if d == 3 else ""), "shape": list(dims),
         "normalization": "min-max to [0, 1]", "raster": "pixel-centre inclusion"},
    )


def piecewise_constant(n, jumps, seed=0, min_step=0.2):
    """Periodic 1D piecewise-constant signal with exactly ``jumps`` discontinuities.

    Levels lie in ``[0, 1)``; steps between consecutive levels (including the
    wrap-around) are at least ``min_step`` in magnitude.
    """
    if jumps < 2 or jumps > n:
        raise ValueError("need 2 <= jumps <= n for a periodic signal")
    if not 0 < min_step <= 0.3:
        raise ValueError("min_step must lie in (0, 0.3]")
    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.choice(n, size=jumps, replace=False))
    while True:  # redraw until every step, the wrap-around one included, is large enough
        levels = rng.uniform(0.0, 1.0, size=jumps)
        if np.abs(np.diff(levels, append=levels[0])).min() >= min_step:
            break
    u = np.empty(n)
    for k in range(jumps):
        start = cuts[k] + 1
        stop = cuts[(k + 1) % jumps] + 1
        idx = np.arange(start, stop if stop > start else stop + n) % n
        u[idx] = levels[k]
    return Phantom(u, "piecewise-constant", {"n": n, "jumps": int(jumps), "seed": seed})


def sample_mask(shape, fraction, seed=0, symmetric=True):
    """Uniformly random observed set of ``ceil(fraction * N)`` frequencies.

    The zero frequency is always included.  With ``symmetric=True`` frequencies
    are drawn in conjugate pairs ``{l, -l}``, so the count may exceed the target
    by one.
    """
    dims = GridShape.of(shape).dims
    N = int(np.prod(dims))
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    target = math.ceil(fraction * N)
    if fraction * N < 1.0:
        raise ValueError(f"fraction {fraction} too small to include the zero frequency on {N} points")
    rng = np.random.default_rng(seed)
    observed = np.zeros(N, dtype=bool)
    observed[0] = True
    if target >= N:
        observed[:] = True
    elif symmetric:
        neg = negate_frequencies(np.arange(N).reshape(dims)).ravel()
        reps = np.flatnonzero(neg >= np.arange(N))
        reps = reps[reps != 0]
        count = 1
        for i in rng.permutation(reps):
            if count >= target:
                break
            observed[i] = observed[neg[i]] = True
            count += 1 if neg[i] == i else 2
    else:
        rest = rng.choice(np.arange(1, N), size=target - 1, replace=False)
        observed[rest] = True
    return SamplingMask(observed.reshape(dims), fraction=float(fraction), seed=seed,
                        symmetric=bool(symmetric))


def measure(u, mask):
    """Fill ``mask`` with ``b = M F u`` for a real image ``u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != mask.observed.shape:
        raise MaskError(f"image shape {u.shape} != mask shape {mask.observed.shape}")
    uh = dft(u)
    uh = 0.5 * (uh + np.conj(negate_frequencies(uh)))  # exact Hermitian symmetry
    b = np.where(mask.observed, uh, 0.0)
    return mask.with_data(b).check()


def zero_filled(mask):
    """``F^* M^T b``: the inverse DFT of the data with unobserved frequencies zeroed."""
    if mask.data is None:
        raise MaskError("mask carries no data")
    return idft(mask.data, strict=mask.symmetric)


def make_problem(image, fraction=0.3, seed=0, symmetric=True):
    image = np.asarray(image, dtype=float)
    mask = measure(image, sample_mask(image.shape, fraction, seed, symmetric))
    return Problem(mask, image)


def support_fraction(u):
    """Fraction of grid points where the gradient of ``u`` is nonzero."""
    return float(np.count_nonzero(block_norm(gradient(u)))) / np.asarray(u).size
