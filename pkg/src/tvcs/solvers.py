"""ADMM, Douglas-Rachford and G-prox PDHG for TV compressed sensing.

The three iterations are the same method in different coordinates.  With step
``tau`` (ADMM penalty and PDHG dual step ``gamma = sigma = 1 / tau``), a DRS
trajectory ``(q_k, v_k)`` maps onto the other two by

* primal:         ``K x_k = q_k - q_{k-1} + v_{k-1}``, ``u_k = x_k``
* dual:           ``z_k = (q_k - v_k) / tau = v_k^{PDHG}``, ``y_k = v_k``
* extragradient:  ``w_k = K x_k / tau + z_k - y_k / tau``

Each state keeps the one step of history these relations need.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .problems import Problem, SamplingMask, zero_filled
from .prox import ProxParams, project_ball, project_image, prox_f, prox_h, shrink, tv_norm
from .spectral import dft, dft_field, gradient, idft, real_dtype, spectral_operator

__all__ = [
    "METHODS",
    "NumericalError",
    "DivergenceError",
    "MissingHistoryError",
    "DrsState",
    "AdmmState",
    "PdhgState",
    "SolverConfig",
    "LogRecord",
    "ConvergenceLog",
    "CsvLogWriter",
    "RunResult",
    "drs_operator",
    "drs_step",
    "admm_step",
    "pdhg_step",
    "step",
    "initial_state",
    "dual_field",
    "primal_image",
    "translate_state",
    "run",
    "reference_solution",
    "distance_trace",
]

METHODS = ("admm", "drs", "pdhg")


class NumericalError(RuntimeError):
    """Non-finite values or runaway growth during an iteration."""


class DivergenceError(NumericalError):
    pass


class MissingHistoryError(ValueError):
    """A state lacks the previous-iterate entries a translation needs."""


@dataclass
class DrsState:
    """Douglas-Rachford state: ``q`` and the stored ``v`` (``prox_f(q)`` once ``k > 0``)."""

    q: np.ndarray
    v: np.ndarray
    q_prev: np.ndarray | None = None
    v_prev: np.ndarray | None = None
    k: int = 0

    method = "drs"


@dataclass
class AdmmState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    y_prev: np.ndarray | None = None
    z_prev: np.ndarray | None = None
    k: int = 0

    method = "admm"


@dataclass
class PdhgState:
    """G-prox PDHG state; ``y_prev`` is the shrinkage output of the previous step."""

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    y_prev: np.ndarray | None = None
    k: int = 0

    method = "pdhg"


@dataclass
class SolverConfig:
    """Run configuration.

    ``tau`` is the DRS step; ADMM and PDHG use ``gamma = sigma = 1 / tau``.
    Relaxation ``relax != 1`` and the l2 weight ``alpha`` are only defined for DRS.
    ``tol`` applies to ``||q_k - q_{k-1}|| / ||q_k||``.
    """

    method: str = "drs"
    tau: float = 0.01
    relax: float = 1.0
    alpha: float | None = None
    max_iters: int = 1000
    tol: float = 1e-12
    precision: str = "f64"
    log_every: int = 1
    divergence_factor: float = 1e6

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        ProxParams(self.tau, self.alpha, self.relax)
        if self.method != "drs" and (self.relax != 1.0 or self.alpha is not None):
            raise ValueError("relaxation and alpha regularization are only available for DRS")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")
        if not self.tol >= 0:
            raise ValueError("tol must be nonnegative")
        real_dtype(self.precision)

    @property
    def gamma(self):
        return 1.0 / self.tau

    @property
    def params(self):
        return ProxParams(self.tau, self.alpha, self.relax)

    @property
    def dtype(self):
        return real_dtype(self.precision)

    def to_dict(self):
        return asdict(self)


# -- iterations ---------------------------------------------------------------


def drs_operator(q, mask, tau, relax=1.0, alpha=None):
    """``H(q) = q + relax * (prox_h(2 prox_f(q) - q) - prox_f(q))``; ``relax = 1`` is plain DRS."""
    v = prox_f(q, tau, alpha)
    p = prox_h(2 * v - q, mask)
    if relax == 1.0:
        return p + q - v
    return q + q.dtype.type(relax) * (p - v)


def drs_step(state: DrsState, mask, config: SolverConfig) -> DrsState:
    q, v = state.q, state.v
    p = prox_h(2 * v - q, mask)
    if config.relax == 1.0:
        q1 = p + q - v
    else:
        q1 = q + q.dtype.type(config.relax) * (p - v)
    v1 = prox_f(q1, config.tau, config.alpha)
    return DrsState(q1, v1, q, v, state.k + 1)


def admm_step(state: AdmmState, mask, config: SolverConfig) -> AdmmState:
    tau = state.y.dtype.type(config.tau)
    x1 = project_image(state.y - tau * state.z, mask)
    g = gradient(x1)
    y1 = shrink(g + tau * state.z, tau)
    z1 = state.z + (g - y1) / tau
    return AdmmState(x1, y1, z1, state.y, state.z, state.k + 1)


def pdhg_step(state: PdhgState, mask, config: SolverConfig) -> PdhgState:
    mask.check()
    u, v, w = state.u, state.v, state.w
    dt = u.dtype
    tau = dt.type(config.tau)
    op = spectral_operator(mask.observed.shape, dt)
    uh = dft(u) - config.tau * op.lift(dft_field(w))
    uh = np.where(mask.observed, mask.data, uh)
    u1 = idft(uh, strict=mask.symmetric).astype(dt, copy=False)
    Ku = gradient(u)
    v1 = project_ball(v + gradient(u1) / tau)
    w1 = 2 * v1 - v
    y = Ku + tau * (v - w)
    return PdhgState(u1, v1, w1, y, state.k + 1)


_STEPS = {"drs": drs_step, "admm": admm_step, "pdhg": pdhg_step}


def step(state, mask, config):
    return _STEPS[state.method](state, mask, config)


# -- coordinates and translation ----------------------------------------------


def initial_state(method, mask, tau, u0=None, precision="f64"):
    """Mutually consistent starting states; all three methods then share one trajectory.

    ``u0`` defaults to the zero-filled reconstruction ``F^* M^T b``.  The duals
    start at zero, so ``y_0 = K u0`` and DRS starts from ``q_0 = v_0 = K u0``.
    """
    dt = real_dtype(precision)
    u0 = zero_filled(mask) if u0 is None else np.asarray(u0, dtype=float)
    u0 = u0.astype(dt)
    g = gradient(u0)
    zero = np.zeros_like(g)
    method = method.lower()
    if method == "drs":
        return DrsState(g, g.copy(), g.copy(), g.copy(), 0)
    if method == "admm":
        return AdmmState(u0, g, zero, g.copy(), zero.copy(), 0)
    if method == "pdhg":
        return PdhgState(u0, zero, zero.copy(), g.copy(), 0)
    raise ValueError(f"unknown method {method!r}")


def dual_field(state, tau):
    """The DRS variable ``q_k`` expressed from any state."""
    if state.method == "drs":
        return state.q
    if state.method == "admm":
        return state.y + state.y.dtype.type(tau) * state.z
    tau = state.v.dtype.type(tau)
    return gradient(state.u) + tau * (2 * state.v - state.w)


def primal_image(state, mask):
    """The primal image ``u_k`` (``x_k`` for ADMM) of any state."""
    if state.method == "admm":
        return state.x
    if state.method == "pdhg":
        return state.u
    if state.q_prev is None or state.v_prev is None:
        raise MissingHistoryError("DRS state needs (q_prev, v_prev) to recover the primal image")
    return project_image(state.q - state.q_prev + state.v_prev, mask)


def _to_drs(state, tau):
    if state.method == "drs":
        return state
    if state.method == "admm":
        if state.y_prev is None or state.z_prev is None:
            raise MissingHistoryError("ADMM state needs (y_prev, z_prev)")
        t = state.y.dtype.type(tau)
        return DrsState(state.y + t * state.z, state.y.copy(),
                        state.y_prev + t * state.z_prev, state.y_prev.copy(), state.k)
    if state.y_prev is None:
        raise MissingHistoryError("PDHG state needs y_prev")
    t = state.v.dtype.type(tau)
    Ku = gradient(state.u)
    z_prev = 2 * state.v - state.w
    return DrsState(Ku + t * (2 * state.v - state.w), Ku + t * (state.v - state.w),
                    state.y_prev + t * z_prev, state.y_prev.copy(), state.k)


def _from_drs(drs: DrsState, method, tau, mask):
    if method == "drs":
        return drs
    if drs.q_prev is None or drs.v_prev is None:
        raise MissingHistoryError("DRS state needs (q_prev, v_prev)")
    t = drs.q.dtype.type(tau)
    x = primal_image(drs, mask)
    z = (drs.q - drs.v) / t
    z_prev = (drs.q_prev - drs.v_prev) / t
    if method == "admm":
        return AdmmState(x, drs.v.copy(), z, drs.v_prev.copy(), z_prev, drs.k)
    if method == "pdhg":
        w = 2 * z - z_prev
        return PdhgState(x, z, w, drs.v_prev.copy(), drs.k)
    raise ValueError(f"unknown method {method!r}")


def translate_state(state, to, tau, mask):
    """Translate a state between methods with the variable relations above."""
    return _from_drs(_to_drs(state, tau), to.lower(), tau, mask)


# -- logging ------------------------------------------------------------------

LOG_COLUMNS = ("iter", "rel_err", "q_dist", "tv", "residual", "seconds")


@dataclass
class LogRecord:
    iter: int
    rel_err: float
    q_dist: float
    tv: float
    residual: float
    seconds: float

    def row(self):
        return [self.iter] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]]


@dataclass
class ConvergenceLog:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, rec: LogRecord):
        self.records.append(rec)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self):
        return len(self.records)

    def to_csv(self, path):
        with CsvLogWriter(path) as w:
            for r in self.records:
                w.write(r)

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(LogRecord(int(row["iter"]), *(float(row[c]) for c in LOG_COLUMNS[1:])))
        return log


class CsvLogWriter:
    """Append-only CSV writer; every row is flushed so a crash leaves a valid prefix."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(LOG_COLUMNS)
        self._fh.flush()
        return self

    def write(self, rec: LogRecord):
        self._w.writerow(rec.row())
        self._fh.flush()

    def __exit__(self, *exc):
        self._fh.close()
        return False


@dataclass
class RunResult:
    state: object
    log: ConvergenceLog
    status: str  # "converged", "max_iters"
    iterations: int


def _nan(x):
    return float("nan") if x is None else x


def _record(state, mask, config, u_ref, q_ref, t0):
    u = primal_image(state, mask).astype(float)
    rel = None
    if u_ref is not None:
        rel = float(np.linalg.norm(u - u_ref) / np.linalg.norm(u_ref))
    qd = None
    if q_ref is not None:
        qd = float(np.linalg.norm(dual_field(state, config.tau).astype(float) - q_ref))
    res = float(np.linalg.norm(dft(u)[mask.observed] - mask.data[mask.observed]))
    return LogRecord(state.k, _nan(rel), _nan(qd), tv_norm(u), res, time.perf_counter() - t0)


def _check_finite(x, k):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in the iterate at iteration {k}")


def run(problem, config: SolverConfig, state=None, u0=None, u_ref=None, q_ref=None,
        log_path=None, meta_path=None, meta=None):
    """Iterate until ``max_iters`` or the relative ``q`` change drops below ``tol``.

    ``problem`` is a :class:`Problem` or a measured :class:`SamplingMask`; a
    problem's ground truth is used as ``u_ref`` unless one is given.  ``q_ref``
    (a converged DRS ``q``) enables the ``q_dist`` column.  With ``log_path`` the
    CSV log is streamed to disk as it is produced.
    """
    if isinstance(problem, Problem):
        mask = problem.mask
        if u_ref is None:
            u_ref = problem.truth
    else:
        mask = problem
    mask.check()
    if state is None:
        state = initial_state(config.method, mask, config.tau, u0, config.precision)
    elif state.method != config.method:
        raise ValueError(f"state is for {state.method}, config asks for {config.method}")
    if u_ref is not None:
        u_ref = np.asarray(u_ref, dtype=float)
    if q_ref is not None:
        q_ref = np.asarray(q_ref, dtype=float)

    info = {"config": config.to_dict(), "shape": list(mask.observed.shape),
            "mask_seed": mask.seed, "mask_fraction": mask.fraction, "m": mask.m}
    info.update(meta or {})
    log = ConvergenceLog(meta=info)
    writer = CsvLogWriter(log_path).__enter__() if log_path else None
    t0 = time.perf_counter()

    def emit(s):
        rec = _record(s, mask, config, u_ref, q_ref, t0)
        log.append(rec)
        if writer:
            writer.write(rec)

    status = "max_iters"
    try:
        emit(state)
        q = dual_field(state, config.tau)
        base = 0.0
        for _ in range(config.max_iters):
            state = step(state, mask, config)
            q1 = dual_field(state, config.tau)
            _check_finite(q1, state.k)
            dq = float(np.linalg.norm(q1 - q))
            qn = float(np.linalg.norm(q1))
            if state.k <= 5:  # baseline step length from the first few iterations
                base = max(base, dq)
            elif dq > config.divergence_factor * base:
                raise DivergenceError(
                    f"iteration {state.k}: ||q_k - q_(k-1)|| = {dq:.3e} grew by more than "
                    f"{config.divergence_factor:g} over its early size {base:.3e}"
                )
            q = q1
            # the first step may leave q unchanged while v catches up with prox_f(q)
            done = state.k >= 2 and (dq == 0.0 or dq <= config.tol * qn)
            if done or state.k % config.log_every == 0 or state.k == config.max_iters:
                emit(state)
            if done:
                status = "converged"
                break
        if log.records[-1].iter != state.k:
            emit(state)
    finally:
        if writer:
            writer.__exit__(None, None, None)
    log.meta.update(status=status, iterations=state.k,
                    seconds=time.perf_counter() - t0)
    if meta_path:
        Path(meta_path).parent.mkdir(parents=True, exist_ok=True)
        Path(meta_path).write_text(json.dumps(log.meta, indent=2, default=_json_default))
    return RunResult(state, log, status, state.k)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def reference_solution(problem, tau, max_iters=10000, tol=1e-15, u0=None, relax=1.0, alpha=None):
    """Long f64 DRS run used as the limit ``(q*, v*)`` for rate measurements.

    Returns the final :class:`DrsState`; ``state.q`` is ``q*`` and ``state.v`` is ``v*``.
    """
    cfg = SolverConfig("drs", tau=tau, relax=relax, alpha=alpha, max_iters=max_iters, tol=tol,
                       log_every=max(max_iters, 1))
    return run(problem, cfg, u0=u0).state


def distance_trace(problem, config: SolverConfig, q_ref=None, state=None):
    """``||q_k - q_ref||`` for ``k = 0..max_iters``, skipping the full per-iteration log.

    Without ``q_ref`` the step lengths ``||q_k - q_(k-1)||`` (``k >= 1``) are
    returned instead; they contract at the same asymptotic rate.
    """
    mask = problem.mask if isinstance(problem, Problem) else problem
    mask.check()
    if state is None:
        state = initial_state(config.method, mask, config.tau, precision=config.precision)
    q = dual_field(state, config.tau).astype(float)
    out = [] if q_ref is None else [float(np.linalg.norm(q - q_ref))]
    for _ in range(config.max_iters):
        state = step(state, mask, config)
        q1 = dual_field(state, config.tau).astype(float)
        _check_finite(q1, state.k)
        out.append(float(np.linalg.norm(q1 - (q if q_ref is None else q_ref))))
        q = q1
    return np.asarray(out)


def with_iterations(config: SolverConfig, max_iters):
    return replace(config, max_iters=max_iters)
