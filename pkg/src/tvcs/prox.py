"""Proximal maps for isotropic TV compressed sensing.

``f(v) = ||v||_{1,2}`` acts on vector fields; ``h`` is the indicator of the affine
set ``{K u : A u = b}``.  All maps take and return fields of shape ``(d, *dims)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import SamplingMask
from .spectral import block_norm, dft_field, gradient, idft, spectral_operator

__all__ = [
    "ProxParams",
    "OutsideQError",
    "tv_norm",
    "normal_field",
    "shrink",
    "shrink_factored",
    "project_ball",
    "prox_f",
    "prox_f_regularized",
    "project_image",
    "prox_h",
    "reflect",
]


class OutsideQError(ValueError):
    """A field's shrinkage pattern does not match the prescribed support."""


@dataclass(frozen=True)
class ProxParams:
    """Step size ``tau``, optional l2 weight ``alpha`` and relaxation ``relax``."""

    tau: float
    alpha: float | None = None
    relax: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.relax < 2.0:
            raise ValueError(f"relaxation must lie in (0, 2), got {self.relax}")


def tv_norm(u):
    """Isotropic total variation ``sum_j ||(K u)_j||``."""
    return float(np.sum(block_norm(gradient(u))))


def normal_field(q):
    """Blockwise unit direction ``q_j / ||q_j||`` (zero blocks stay zero)."""
    q = np.asarray(q)
    n = block_norm(q)
    safe = np.where(n > 0, n, 1)
    return np.where(n > 0, q / safe, 0).astype(q.dtype, copy=False)


def shrink(q, tau):
    """Blockwise soft thresholding, the prox of ``tau * ||.||_{1,2}``."""
    q = np.asarray(q)
    keep = block_norm(q) > tau
    return np.where(keep, q - q.dtype.type(tau) * normal_field(q), 0).astype(q.dtype, copy=False)


def shrink_factored(q, tau, support):
    """Shrinkage written as ``(I - B+B)(q - tau N(q))`` for a fixed support.

    ``support`` is a boolean array on the grid (``True`` where the block is kept).
    Raises :class:`OutsideQError` unless ``||q_j|| > tau`` exactly on the support
    and ``||q_j|| <= tau`` off it; in that case the result equals :func:`shrink`.
    """
    q = np.asarray(q)
    support = np.asarray(support, dtype=bool)
    n = block_norm(q)
    bad_on = support & ~(n > tau)
    bad_off = ~support & (n > tau)
    if bad_on.any() or bad_off.any():
        raise OutsideQError(
            f"field leaves the shrinkage region: {int(bad_on.sum())} support blocks with "
            f"||q_j|| <= tau, {int(bad_off.sum())} off-support blocks with ||q_j|| > tau"
        )
    return np.where(support, q - q.dtype.type(tau) * normal_field(q), 0).astype(q.dtype, copy=False)


def project_ball(v):
    """Blockwise projection onto ``{||v_j|| <= 1}``, the prox of the conjugate of ``f``."""
    v = np.asarray(v)
    return (v / np.maximum(1, block_norm(v))).astype(v.dtype, copy=False)


def prox_f_regularized(q, tau, alpha):
    """Prox with step ``tau`` of ``||v||_{1,2} + ||v||^2 / (2 alpha)``."""
    q = np.asarray(q)
    s = alpha / (alpha + tau)
    return shrink(q * q.dtype.type(s), tau * s)


def prox_f(q, tau, alpha=None):
    return shrink(q, tau) if alpha is None else prox_f_regularized(q, tau, alpha)


def project_image(q, mask: SamplingMask):
    """Image ``u`` with ``A u = b`` whose gradient is closest to the field ``q``.

    Observed frequencies are copied from the data; every other frequency takes
    the least-squares value ``sum_i conj(lam^i) q^i / sum_i |lam^i|^2``.  The
    spectral arithmetic runs in double precision whatever the dtype of ``q``.
    """
    mask.check()
    if mask.data is None:
        raise ValueError("mask carries no data; call measure() first")
    q = np.asarray(q)
    op = spectral_operator(mask.observed.shape, q.dtype if q.dtype.kind == "f" else "f64")
    uh = op.lift(dft_field(q))
    uh = np.where(mask.observed, mask.data, uh)
    return idft(uh, strict=mask.symmetric).astype(q.dtype, copy=False)


def prox_h(q, mask: SamplingMask):
    """Projection of ``q`` onto the affine set ``{K u : A u = b}``."""
    return gradient(project_image(q, mask))


def reflect(prox, q, *args, **kwargs):
    """Reflection ``2 prox(q) - q``."""
    return 2 * prox(q, *args, **kwargs) - q
