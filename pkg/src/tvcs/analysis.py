"""Local linear-rate diagnostics for Douglas-Rachford on the TV double dual.

The local rate near an interior fixed point ``q* = v* + tau eta`` is governed by
the angles between two subspaces of the field space ``R^{N d}``:

* ``K Kernel(A)``: gradients of real images with no energy on the observed
  frequencies (basis ``C0``), and
* ``Kernel(B~)``: fields vanishing wherever ``v*`` vanishes (the coordinate
  basis of the support of ``v*``).

Field vectors are flattened with :func:`tvcs.spectral.to_vector`, so row
``i * N + j`` holds component ``i`` at the Fortran-order grid index ``j``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, eigsh

from .problems import SamplingMask
from .prox import normal_field, shrink
from .solvers import drs_operator
from .spectral import (
    GridShape,
    block_norm,
    dft,
    dft_field,
    difference_matrix,
    gradient,
    idft,
    negate_frequencies,
    spectral_operator,
)

__all__ = [
    "DegenerateSupportError",
    "IntersectionError",
    "RateBoundWarning",
    "SupportSet",
    "AngleSpectrum",
    "CertificateReport",
    "RateFit",
    "RateReport",
    "detect_support",
    "kernel_basis",
    "dense_kernel_basis",
    "gradient_matrix",
    "principal_angles",
    "support_angles",
    "largest_cosine",
    "intersection_check",
    "spectral_norm_H_lambda",
    "assemble_H_lambda",
    "synthetic_subspaces",
    "rate_bound",
    "verify_fixed_point",
    "observed_rate",
    "normal_deviation",
    "fixed_direction_basis",
    "rate_report",
]

DENSE_LIMIT = 4096  # largest N*d handled with dense bases
INTERSECTION_EPS = 1e-6


class DegenerateSupportError(ValueError):
    """The field is identically zero, so no support can be defined."""


class IntersectionError(ValueError):
    """The two subspaces share every direction the analysis needs."""


class RateBoundWarning(UserWarning):
    """The local rate bound is not below one, so it certifies no contraction."""


# -- supports -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SupportSet:
    """Partition of the grid into zero blocks of ``v`` and its support.

    ``zero`` is a boolean grid array; its ``True`` entries are the rows of the
    selector ``B``.  ``B~`` repeats ``B`` once per field component.
    """

    zero: np.ndarray

    @property
    def support(self):
        return ~self.zero

    @property
    def r(self):
        return int(self.zero.sum())

    @property
    def size(self):
        return int(self.support.sum())

    @property
    def zero_indices(self):
        return np.flatnonzero(self.zero.ravel(order="F"))

    @property
    def support_indices(self):
        return np.flatnonzero(self.support.ravel(order="F"))

    def field_rows(self, on_support=True):
        """Rows of the flattened field space belonging to the support (or the zero set)."""
        idx = self.support_indices if on_support else self.zero_indices
        N = self.zero.size
        d = self.zero.ndim
        return np.concatenate([idx + i * N for i in range(d)])


def detect_support(v, eps=1e-8):
    """Blocks with ``||v_j|| <= eps * max_j ||v_j||`` are zero blocks."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    mags = block_norm(v)
    top = float(mags.max(initial=0.0))
    if top == 0.0:
        raise DegenerateSupportError("field is identically zero; the support is undefined")
    return SupportSet(mags <= eps * top)


# -- kernel bases -------------------------------------------------------------


def _grid_coords(dims):
    """Integer coordinates of every grid point in Fortran order, shape ``(N, d)``."""
    mesh = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    return np.stack([m.ravel(order="F") for m in mesh], axis=1)


def _off_orbits(mask):
    """Representatives of the conjugate orbits of unobserved frequencies."""
    dims = mask.observed.shape
    N = int(np.prod(dims))
    flat = np.arange(N).reshape(dims, order="F")
    neg = negate_frequencies(flat).ravel(order="F")
    off = ~mask.observed.ravel(order="F")
    reps = np.flatnonzero(off & (neg >= np.arange(N)))
    return reps, neg[reps] == reps


def kernel_basis(mask: SamplingMask, rows=None, method="auto"):
    """Orthonormal basis ``C0`` of ``K Kernel(A)`` as columns.

    For a conjugate-symmetric mask each unobserved orbit ``{l, -l}`` contributes
    the gradients of ``sqrt(2) Re e_l`` and ``sqrt(2) Im e_l`` (one real mode when
    ``l = -l``), scaled by ``1 / sqrt(sum_i |lam^i_l|^2)``.  These columns are
    orthonormal because ``K^T K`` is the Fourier multiplier ``sum_i |lam^i|^2``.
    ``rows`` restricts the output to a subset of the flattened field rows.
    Non-symmetric masks fall back to :func:`dense_kernel_basis`.
    """
    if mask.m >= mask.observed.size:
        raise ValueError("every frequency is observed; the kernel is trivial")
    if method == "dense" or (method == "auto" and not mask.symmetric):
        C0 = dense_kernel_basis(mask)
        return C0 if rows is None else C0[rows]
    if not mask.symmetric:
        raise ValueError("the analytic basis needs a conjugate-symmetric mask")
    dims = mask.observed.shape
    N = int(np.prod(dims))
    d = len(dims)
    reps, selfconj = _off_orbits(mask)
    freqs = _grid_coords(dims)[reps]  # (R, d)
    op = spectral_operator(dims)
    lam = np.stack([op.eig[i].ravel(order="F")[reps] for i in range(d)])  # (d, R)
    scale = 1.0 / np.sqrt(op.denom.ravel(order="F")[reps])
    all_rows = np.arange(N * d) if rows is None else np.asarray(rows)
    comp, pos = np.divmod(all_rows, N)
    coords = _grid_coords(dims)[pos]  # (P, d)
    phase = 2 * np.pi * (coords / np.array(dims)) @ freqs.T  # (P, R)
    vals = np.exp(1j * phase) / np.sqrt(N) * lam[comp] * scale  # (P, R)
    w = np.where(selfconj, 1.0, np.sqrt(2.0))
    cols_re = vals.real * w
    cols_im = (vals.imag * w)[:, ~selfconj]
    return np.concatenate([cols_re, cols_im], axis=1)


def gradient_matrix(shape):
    """Dense ``K`` acting on Fortran-flattened images, rows in field order."""
    dims = GridShape.of(shape).dims
    blocks = []
    for a in range(len(dims)):
        M = np.ones((1, 1))
        for b in reversed(range(len(dims))):
            M = np.kron(M, difference_matrix(dims[b]) if b == a else np.eye(dims[b]))
        blocks.append(M)
    return np.vstack(blocks)


def dense_kernel_basis(mask: SamplingMask):
    """``C0`` from an explicit real nullspace of the measurement rows (small grids)."""
    dims = mask.observed.shape
    N = int(np.prod(dims))
    if N > 2048:
        raise ValueError("dense kernel basis is limited to N <= 2048")
    F = np.stack([dft(e.reshape(dims, order="F")).ravel(order="F") for e in np.eye(N)], axis=1)
    A = F[mask.indices]
    Z = sla.null_space(np.vstack([A.real, A.imag]))
    if Z.shape[1] == 0:
        raise ValueError("the measurement kernel is trivial")
    return sla.orth(gradient_matrix(dims) @ Z)


# -- principal angles ---------------------------------------------------------


@dataclass
class AngleSpectrum:
    """Principal angles between two subspaces, descending cosines.

    ``intersection`` flags cosines within ``eps`` of one.  ``cos_theta1`` is the
    largest remaining cosine, ``theta1`` its angle; ``theta_min`` is the smallest
    angle of all (zero up to rounding when the subspaces intersect).
    """

    cosines: np.ndarray
    sines: np.ndarray
    eps: float = INTERSECTION_EPS

    @property
    def angles(self):
        return np.arctan2(self.sines, self.cosines)

    @property
    def intersection(self):
        return self.cosines >= 1.0 - self.eps

    @property
    def intersection_dim(self):
        return int(self.intersection.sum())

    @property
    def cos_theta1(self):
        rest = self.cosines[~self.intersection]
        if rest.size == 0:
            raise IntersectionError("every principal angle is zero: the subspaces intersect fully")
        return float(rest[0])

    @property
    def theta1(self):
        ang = self.angles[~self.intersection]
        if ang.size == 0:
            raise IntersectionError("every principal angle is zero: the subspaces intersect fully")
        return float(ang[0])

    @property
    def theta_min(self):
        return float(self.angles[0]) if self.angles.size else float(np.pi / 2)


def _residual_sines(cosines, resid):
    # sin from the component outside the second subspace; exact near zero angles
    s = np.linalg.norm(resid, axis=0)
    return np.clip(s, 0.0, 1.0) if s.size else np.sqrt(np.clip(1 - cosines**2, 0, 1))


def principal_angles(C0, B0, eps=INTERSECTION_EPS):
    """Principal angles between ``Range(C0)`` and ``Range(B0)`` (orthonormal columns)."""
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    B0 = np.atleast_2d(np.asarray(B0, dtype=float))
    if C0.shape[1] == 0 or B0.shape[1] == 0:
        raise ValueError("principal angles need nonempty bases")
    U, s, _ = np.linalg.svd(C0.T @ B0, full_matrices=False)
    P = C0 @ U
    sines = _residual_sines(s, P - B0 @ (B0.T @ P))
    return AngleSpectrum(np.clip(s, 0.0, 1.0), sines, eps)


def support_angles(mask, support: SupportSet, C0=None, eps=INTERSECTION_EPS):
    """Angles between ``K Kernel(A)`` and the coordinate subspace of the support."""
    if support.size == 0:
        raise ValueError("empty support")
    if C0 is None:
        C0 = kernel_basis(mask)
    on = support.field_rows(True)
    off = support.field_rows(False)
    E = C0[on]
    _, s, Vt = np.linalg.svd(E, full_matrices=False)
    sines = _residual_sines(s, C0[off] @ Vt.T)
    return AngleSpectrum(np.clip(s, 0.0, 1.0), sines, eps)


def _kernel_projector(mask):
    op = spectral_operator(mask.observed.shape)
    keep = ~mask.observed

    def apply(p):
        uh = np.where(keep, op.lift(dft_field(p)), 0)
        return gradient(idft(uh, strict=False))

    return apply


def largest_cosine(mask, support: SupportSet, k=1, tol=1e-10, maxiter=10000):
    """Largest cosines between ``K Kernel(A)`` and the support subspace, matrix free.

    Lanczos on ``P_S P_C P_S`` restricted to the support coordinates, with the
    kernel projector ``P_C`` applied through FFTs.  Its eigenvalues are the
    squared cosines.
    """
    dims = mask.observed.shape
    d = len(dims)
    rows = support.field_rows(True)
    n = rows.size
    Nd = int(np.prod(dims)) * d
    proj = _kernel_projector(mask)

    def mv(x):
        full = np.zeros(Nd)
        full[rows] = np.ravel(x)
        f = np.stack([c.reshape(dims, order="F") for c in full.reshape(d, -1)])
        g = proj(f)
        return np.concatenate([c.ravel(order="F") for c in g])[rows]

    T = LinearOperator((n, n), matvec=mv, dtype=float)
    vals = eigsh(T, k=k, which="LA", tol=tol, maxiter=maxiter, return_eigenvectors=False)
    return np.sqrt(np.clip(np.sort(vals)[::-1], 0.0, 1.0))


def intersection_check(mask, support: SupportSet, eps=INTERSECTION_EPS):
    """Smallest principal angle between ``K Kernel(A)`` and ``Kernel(B~)``.

    A clearly positive value certifies that the two subspaces meet only at zero.
    """
    d = mask.observed.ndim
    if mask.observed.size * d <= DENSE_LIMIT:
        return support_angles(mask, support, eps=eps).theta_min
    c = float(largest_cosine(mask, support)[0])
    return float(np.arccos(min(c, 1.0)))


# -- the linear part of the DRS operator -------------------------------------


def spectral_norm_H_lambda(cos_theta1, lam):
    """``sqrt(lam (2 - lam) cos^2 theta1 + (1 - lam)^2)``."""
    if not 0.0 < lam < 2.0:
        raise ValueError(f"relaxation must lie in (0, 2), got {lam}")
    if not 0.0 <= cos_theta1 <= 1.0:
        raise ValueError(f"cos(theta1) must lie in [0, 1], got {cos_theta1}")
    if lam == 1.0:
        return float(cos_theta1)
    return float(np.sqrt(lam * (2.0 - lam) * cos_theta1**2 + (1.0 - lam) ** 2))


def assemble_H_lambda(C0, B0, lam):
    """Dense ``(1 - lam) I + lam (P_C P_B + (I - P_C)(I - P_B))``."""
    n = C0.shape[0]
    I = np.eye(n)
    Pc = C0 @ C0.T
    Pb = B0 @ B0.T
    return (1.0 - lam) * I + lam * (Pc @ Pb + (I - Pc) @ (I - Pb))


def synthetic_subspaces(cosines, rng=None):
    """Two ``p``-dimensional subspaces of ``R^{2p}`` with the given principal cosines."""
    rng = np.random.default_rng(rng)
    c = np.asarray(cosines, dtype=float)
    p = c.size
    Q, _ = np.linalg.qr(rng.standard_normal((2 * p, 2 * p)))
    U = Q[:, :p]
    V = Q[:, :p] * c + Q[:, p:] * np.sqrt(1.0 - c**2)
    return U, V


def rate_bound(cos_theta1, v_star, tau, lam=1.0, support=None, eps=1e-8):
    """``||H~^lam|| + 2 tau lam / min_{j in supp} ||v*_j||``.

    Returns ``(bound, norm_H, min_mag)`` and warns with :class:`RateBoundWarning`
    when the bound is not below one.
    """
    if support is None:
        support = detect_support(v_star, eps)
    if support.size == 0:
        raise ValueError("empty support")
    min_mag = float(block_norm(v_star)[support.support].min())
    if not min_mag > 0:
        raise ValueError("support contains a zero block")
    norm_H = spectral_norm_H_lambda(cos_theta1, lam)
    bound = norm_H + 2.0 * tau * lam / min_mag
    if bound >= 1.0:
        warnings.warn(
            f"rate bound {bound:.4f} >= 1: no local contraction is certified at tau={tau}",
            RateBoundWarning,
            stacklevel=2,
        )
    return bound, norm_H, min_mag


# -- fixed points -------------------------------------------------------------


@dataclass
class CertificateReport:
    """Checks that ``eta = (q* - v*) / tau`` is a dual certificate for ``v*``."""

    tau: float
    tol: float
    support_size: int
    subgradient_on: float
    subgradient_off: float
    range_residual: float
    stationarity: float
    prox_consistency: float
    margin_off: float
    margin_on: float

    @property
    def subgradient_ok(self):
        return self.subgradient_on <= self.tol and self.subgradient_off <= self.tol

    @property
    def range_ok(self):
        return self.range_residual <= self.tol

    @property
    def stationary_ok(self):
        return self.stationarity <= self.tol

    @property
    def interior(self):
        # margins are judged at the report tolerance; rounding-level margins are boundary
        gap = self.tol * self.tau
        return self.margin_off > gap and self.margin_on > gap

    @property
    def classification(self):
        return "interior" if self.interior else "boundary"

    @property
    def passed(self):
        return self.subgradient_ok and self.range_ok and self.stationary_ok

    def to_dict(self):
        out = asdict(self)
        out.update(subgradient_ok=self.subgradient_ok, range_ok=self.range_ok,
                   stationary_ok=self.stationary_ok, passed=self.passed,
                   classification=self.classification)
        return out


def verify_fixed_point(q_star, v_star, tau, mask, tol=1e-6, eps=1e-8, support=None):
    """Dual-certificate and fixed-point checks for a DRS limit ``(q*, v*)``.

    * subgradient: ``eta_j = v*_j / ||v*_j||`` on the support and ``||eta_j|| <= 1`` off it;
    * range: ``K^T eta`` has no energy off the observed frequencies (relative to ``1 + ||eta||``);
    * stationarity: ``||H(q*) - q*|| / (1 + ||q*||)``;
    * margins: ``tau - max_off ||q*_j||`` and ``min_on ||q*_j|| - tau``; the fixed
      point is interior when both exceed ``tol * tau``.
    """
    q = np.asarray(q_star, dtype=float)
    v = np.asarray(v_star, dtype=float)
    if support is None:
        support = detect_support(v, eps)
    on = support.support
    eta = (q - v) / tau
    eta_mag = block_norm(eta)
    dev = block_norm(eta - normal_field(v))
    sub_on = float(dev[on].max(initial=0.0))
    sub_off = float(max(eta_mag[~on].max(initial=0.0) - 1.0, 0.0))
    op = spectral_operator(mask.observed.shape)
    r = np.where(mask.observed, 0, op.apply_adjoint(dft_field(eta)))
    range_res = float(np.linalg.norm(r) / (1.0 + np.linalg.norm(eta)))
    stat = float(np.linalg.norm(drs_operator(q, mask, tau) - q) / (1.0 + np.linalg.norm(q)))
    consist = float(np.linalg.norm(shrink(q, tau) - v) / (1.0 + np.linalg.norm(v)))
    qm = block_norm(q)
    margin_off = float(tau - qm[~on].max()) if (~on).any() else float("inf")
    margin_on = float(qm[on].min() - tau) if on.any() else float("inf")
    return CertificateReport(float(tau), float(tol), support.size, sub_on, sub_off, range_res,
                             stat, consist, margin_off, margin_on)


def normal_deviation(q, q_star, support: SupportSet):
    """``||(I - B~+B~) N(q) - N(q*)||`` summed over the support blocks."""
    on = support.support
    diff = normal_field(q) - normal_field(q_star)
    return float(np.sqrt(np.sum(diff[:, on] ** 2)))


def fixed_direction_basis(C0, support: SupportSet):
    """Orthonormal basis of ``Range(B~^T)`` intersected with ``Range(C0)``'s complement.

    These are fields living on the zero set of ``v*`` and orthogonal to
    ``K Kernel(A)``: the directions along which DRS fixed points can move.
    Returns ``(rows, basis)`` with ``basis`` expressed on the given rows.
    """
    rows = support.field_rows(False)
    G = C0[rows]
    return rows, sla.null_space(G.T) if G.size else np.eye(rows.size)


# -- rates --------------------------------------------------------------------


@dataclass
class RateFit:
    """Log-linear fit of an error sequence over its longest straight tail."""

    found: bool
    rate: float = float("nan")
    onset: int = -1
    r2: float = float("nan")
    length: int = 0
    reason: str = ""


def observed_rate(errors, iters=None, floor=None, min_len=50, r2_min=0.999):
    """Asymptotic contraction factor of a positive error sequence.

    The sequence is cut where it first reaches the noise floor (default
    ``1e-11 * max``) after its peak.  Among windows ending at the cut, the longest one whose
    log-linear least-squares fit has ``R^2 >= r2_min`` and a negative slope is
    kept.  Leading points more than four residual deviations off the line fitted
    to the window's second half are then trimmed, and the refit over what remains
    gives the rate ``exp(slope)``; ``onset`` is its first iteration.
    """
    e = np.asarray(errors, dtype=float)
    k = np.arange(e.size) if iters is None else np.asarray(iters, dtype=float)
    ok = np.isfinite(e) & (e > 0)
    if not ok.any():
        return RateFit(False, reason="no positive finite errors")
    top = e[ok].max()
    floor = 1e-11 * top if floor is None else floor
    peak = int(np.argmax(np.where(ok, e, -np.inf)))
    below = peak + np.flatnonzero(~ok[peak:] | (e[peak:] <= floor))
    end = below[0] if below.size else e.size
    if end < min_len:
        return RateFit(False, reason=f"only {end} iterations above the noise floor")
    x = k[:end].astype(float)
    y = np.log(e[:end])
    # suffix sums so every tail window is fitted in O(1)
    S1 = np.cumsum(np.ones_like(x)[::-1])[::-1]
    Sx = np.cumsum(x[::-1])[::-1]
    Sy = np.cumsum(y[::-1])[::-1]
    Sxx = np.cumsum((x * x)[::-1])[::-1]
    Syy = np.cumsum((y * y)[::-1])[::-1]
    Sxy = np.cumsum((x * y)[::-1])[::-1]
    cxx = Sxx - Sx**2 / S1
    cyy = Syy - Sy**2 / S1
    cxy = Sxy - Sx * Sy / S1
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = cxy / cxx
        r2 = np.where(cyy > 0, cxy**2 / (cxx * cyy), 0.0)
    good = (S1 >= min_len) & (r2 >= r2_min) & (slope < 0)
    if not good.any():
        return RateFit(False, reason="no linear regime found")
    s = int(np.flatnonzero(good)[0])
    # a transient can still pass the R^2 test; drop leading points that sit off the
    # line fitted to the second half of the window
    mid = s + (end - s) // 2
    p = np.polyfit(x[mid:] - x[mid], y[mid:], 1)
    res = y[s:end] - np.polyval(p, x[s:end] - x[mid])
    tol = max(4.0 * float(np.std(res[mid - s:])), 1e-9)
    off = np.flatnonzero(np.abs(res[:mid - s]) > tol)
    if off.size:
        s += int(off[-1]) + 1
    if end - s < min_len:
        return RateFit(False, reason="linear tail shorter than min_len after trimming the transient")
    p = np.polyfit(x[s:] - x[s], y[s:], 1)
    yhat = np.polyval(p, x[s:] - x[s])
    r2s = 1.0 - np.sum((y[s:] - yhat) ** 2) / max(np.sum((y[s:] - y[s:].mean()) ** 2), 1e-300)
    return RateFit(True, float(np.exp(p[0])), int(k[s]), float(r2s), int(end - s))


@dataclass
class RateReport:
    cos_theta1: float
    theta1: float
    min_mag: float
    tau: float
    relax: float
    norm_H: float
    bound: float
    observed_rate: float
    onset_K: int
    intersection_dim: int
    support_size: int
    kernel_dim_real: int
    kernel_count_complex: int
    interior: bool
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def rate_report(mask, q_star, v_star, tau, relax=1.0, errors=None, iters=None, eps=1e-8):
    """Assemble the angle, bound, certificate margins and (optionally) the observed rate."""
    support = detect_support(v_star, eps)
    N = mask.observed.size
    d = mask.observed.ndim
    notes = []
    if N * d <= DENSE_LIMIT:
        spec = support_angles(mask, support)
        cos1, th1, inter = spec.cos_theta1, spec.theta1, spec.intersection_dim
    else:
        cs = largest_cosine(mask, support, k=2)
        hit = cs >= 1 - INTERSECTION_EPS
        inter = int(hit.sum())
        rest = cs[~hit]
        if rest.size == 0:
            raise IntersectionError("leading principal angles are zero")
        cos1, th1 = float(rest[0]), float(np.arccos(rest[0]))
    if inter:
        notes.append(f"{inter} zero principal angle(s): kernels intersect")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RateBoundWarning)
        bound, norm_H, min_mag = rate_bound(cos1, v_star, tau, relax, support)
    notes += [str(w.message) for w in caught]
    cert = verify_fixed_point(q_star, v_star, tau, mask, support=support)
    fit = observed_rate(errors, iters) if errors is not None else RateFit(False, reason="no log")
    if errors is not None and not fit.found:
        notes.append(f"observed rate: {fit.reason}")
    return RateReport(cos1, th1, min_mag, float(tau), float(relax), norm_H, bound, fit.rate,
                      fit.onset, inter, support.size, N - mask.m, N - mask.m, cert.interior, notes)
