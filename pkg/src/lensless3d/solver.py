"""ADMM for nonnegative, l1-regularized reconstruction.

Solves ``argmin_{x >= 0} 1/2 ||b - A x||^2 + lam ||Psi x||_1`` with
``A = D M`` using the splitting ``v = M x``, ``u = Psi x``, ``w = x``.
Every sub-problem has a closed form: a soft threshold for ``u``, a pointwise
division for ``v`` (``D`` is a 0/1 mask), a clamp for ``w`` and a pointwise
division in 3D frequency space for ``x``.

Multipliers ``xi, eta, rho`` are kept unscaled, so the updates read
``u <- T(Psi x + eta/mu2)`` and ``xi <- xi + mu1 (M x - v)``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .forward import ConvOperator, psi_adjoint, psi_apply, psi_gram_eigs, PSI_MODES

log = logging.getLogger(__name__)

__all__ = [
    "SolverError",
    "SolverInputError",
    "DivergenceError",
    "SolverConfig",
    "AdmmState",
    "Workspace",
    "Residuals",
    "ConvergenceTrace",
    "soft_threshold",
    "init_state",
    "admm_step",
    "compute_residuals",
    "tune_penalties",
    "objective",
    "default_lambda",
    "solve",
]

CONSTRAINTS = ("v", "u", "w")  # v = Mx, u = Psi x, w = x


class SolverError(RuntimeError):
    pass


class SolverInputError(SolverError, ValueError):
    """Invalid settings or measurement, as opposed to a numerical failure."""


class DivergenceError(SolverError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def _norm(a) -> float:
    a = np.asarray(a)
    return math.sqrt(float(np.vdot(a.ravel().astype(np.float64), a.ravel().astype(np.float64))))


def soft_threshold(g, nu: float, mode: str = "identity") -> np.ndarray:
    """Proximal map of ``nu * ||.||_1``.

    ``identity`` and ``tv3d_aniso`` shrink each entry. ``tv3d`` shrinks the
    length of the per-voxel gradient vector stored along axis 0, leaving its
    direction unchanged.
    """
    if nu < 0:
        raise SolverInputError(f"threshold must be nonnegative, got {nu}")
    g = np.asarray(g)
    if mode == "tv3d":
        mag = np.sqrt(np.sum(g * g, axis=0))
        scale = np.maximum(mag - nu, 0.0)
        safe = np.where(mag > 0, mag, 1.0)
        # multiply before dividing: one rounding fewer, so 3-4-5 cases come out exact
        return (g * scale[None]) / safe[None]
    if mode not in PSI_MODES:
        raise SolverInputError(f"unknown mode {mode!r}")
    return np.sign(g) * np.maximum(np.abs(g) - nu, 0.0)


@dataclass(frozen=True)
class SolverConfig:
    """Reconstruction settings.

    ``lam=None`` picks ``1e-3 * max(A^T b)``, a data-scaled heuristic.
    Penalties left as ``None`` are set from the operator spectrum.
    """

    lam: float | None = None
    psi_mode: str = "tv3d"
    max_iters: int = 200
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    nonneg: bool = True
    mu1: float | None = None
    mu2: float | None = None
    mu3: float | None = None
    auto_tune: bool = False
    tune_factor: float = 2.0
    tune_ratio: float = 10.0
    tune_until: int | None = None
    tune_normalized: bool = False
    divergence_factor: float = 1e6
    divergence_patience: int = 10

    def __post_init__(self):
        if self.lam is not None and not self.lam >= 0:
            raise SolverInputError(f"lam must be >= 0, got {self.lam}")
        if self.psi_mode not in PSI_MODES:
            raise SolverInputError(f"unknown regularizer {self.psi_mode!r}")
        if self.max_iters < 1:
            raise SolverInputError("max_iters must be at least 1")
        for name in ("mu1", "mu2", "mu3"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise SolverInputError(f"{name} must be positive, got {value}")
        if self.tune_factor <= 1 or self.tune_ratio <= 1:
            raise SolverInputError("tune_factor and tune_ratio must exceed 1")


@dataclass
class Residuals:
    primal: tuple[float, float, float]  # ||Mx - v||, ||Psi x - u||, ||x - w||
    dual: tuple[float, float, float]  # mu1 ||M dx||, mu2 ||Psi dx||, mu3 ||dx||
    eps_primal: tuple[float, float, float]
    eps_dual: tuple[float, float, float]
    # magnitudes used to normalize the residuals: max(||Kx||, ||aux||) and ||multiplier||
    primal_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dual_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def converged(self) -> bool:
        return all(r <= e for r, e in zip(self.primal, self.eps_primal)) and all(
            s <= e for s, e in zip(self.dual, self.eps_dual)
        )

    @property
    def dual_total(self) -> float:
        return math.sqrt(sum(s * s for s in self.dual))


@dataclass
class AdmmState:
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    rho: np.ndarray
    mu1: float
    mu2: float
    mu3: float
    iteration: int = 0
    # M x and Psi x for the current x, kept to avoid recomputation
    Mx: np.ndarray | None = None
    Psix: np.ndarray | None = None
    residuals: Residuals | None = None

    def copy(self) -> "AdmmState":
        arrays = {
            name: None if getattr(self, name) is None else getattr(self, name).copy()
            for name in ("x", "u", "v", "w", "xi", "eta", "rho", "Mx", "Psix")
        }
        return replace(self, **arrays)

    def check_finite(self) -> None:
        # update order, so the first field named is where the problem entered
        for name in ("u", "v", "w", "x", "xi", "eta", "rho"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SolverError(
                    f"non-finite values in '{name}' at iteration {self.iteration}"
                )
        for name in ("mu1", "mu2", "mu3"):
            if not (math.isfinite(getattr(self, name)) and getattr(self, name) > 0):
                raise SolverError(f"penalty {name} became invalid at iteration {self.iteration}")


def default_penalties(op: ConvOperator) -> tuple[float, float, float]:
    """Penalties balanced against the mean eigenvalue of M^T M.

    The data block sees eigenvalues of D^T D in {0, 1}, so mu1 = 1 puts the
    v-update halfway between data and model; mu2 and mu3 are matched to the
    average gain mu1 * |M|^2 that the x-update receives from the v-block.
    """
    mean_gain = float(np.mean(op.gram_eigs, dtype=np.float64))
    return 1.0, mean_gain, mean_gain


def init_state(op: ConvOperator, config: SolverConfig) -> AdmmState:
    shape = op.volume_shape
    dt = op.dtype
    zeros = lambda s: np.zeros(s, dtype=dt)  # noqa: E731
    psi_shape = shape if config.psi_mode == "identity" else (3,) + shape
    d1, d2, d3 = default_penalties(op)
    return AdmmState(
        x=zeros(shape), u=zeros(psi_shape), v=zeros(shape), w=zeros(shape),
        xi=zeros(shape), eta=zeros(psi_shape), rho=zeros(shape),
        mu1=config.mu1 or d1, mu2=config.mu2 or d2, mu3=config.mu3 or d3,
        Mx=zeros(shape), Psix=zeros(psi_shape),
    )


def default_lambda(op: ConvOperator, b) -> float:
    return 1e-3 * float(np.max(op.adjoint(b)))


def objective(op: ConvOperator, b, x, lam: float, mode: str, Mx=None) -> float:
    """``1/2 ||b - A x||^2 + lam ||Psi x||_1`` with the true crop operator."""
    Ax = op.apply(x) if Mx is None else op.D(Mx)
    data = 0.5 * _norm(np.asarray(b, dtype=np.float64) - Ax) ** 2
    if lam == 0:
        return data
    g = psi_apply(x, mode).astype(np.float64)
    if mode == "tv3d":
        reg = float(np.sum(np.sqrt(np.sum(g * g, axis=0))))
    else:
        reg = float(np.sum(np.abs(g)))
    return data + lam * reg


class Workspace:
    """Per-solve constants: D^T b, the v-update divisor and Psi^T Psi spectrum."""

    def __init__(self, op: ConvOperator, b, mode: str):
        self.Dtb = op.Dt(b)
        self.psi_eigs = psi_gram_eigs(op.volume_shape, mode, dtype=op.dtype)
        self.n = int(np.prod(op.volume_shape))
        self.n_psi = self.n * (1 if mode == "identity" else 3)


def admm_step(state: AdmmState, op: ConvOperator, b, config: SolverConfig,
              lam: float | None = None, workspace: Workspace | None = None) -> AdmmState:
    """One pass of the seven ADMM updates, returning a new state."""
    for name in ("mu1", "mu2", "mu3"):
        if not getattr(state, name) > 0:
            raise SolverError(f"penalty {name} must be positive, got {getattr(state, name)}")
    mode = config.psi_mode
    if lam is None:
        lam = config.lam if config.lam is not None else default_lambda(op, b)
    ws = workspace or Workspace(op, b, mode)
    mu1, mu2, mu3 = state.mu1, state.mu2, state.mu3
    x, Mx = state.x, state.Mx
    Psix = state.Psix if state.Psix is not None else psi_apply(x, mode)
    if Mx is None:
        Mx = op.M(x)

    u = soft_threshold(Psix + state.eta / mu2, lam / mu2, mode).astype(op.dtype, copy=False)
    v = (state.xi + mu1 * Mx + ws.Dtb) / (op.mask + mu1)
    w = state.rho / mu3 + x
    if config.nonneg:
        w = np.maximum(w, 0)

    rhs_direct = (mu3 * w - state.rho) + psi_adjoint(mu2 * u - state.eta, mode)
    spec = op.rfft3(rhs_direct) + np.conj(op.otf3) * op.rfft3(mu1 * v - state.xi)
    spec /= mu1 * op.gram_eigs + mu2 * ws.psi_eigs + mu3
    x_new = op.irfft3(spec)
    Mx_new = op.irfft3(spec * op.otf3)
    Psix_new = psi_apply(x_new, mode)

    xi = state.xi + mu1 * (Mx_new - v)
    eta = state.eta + mu2 * (Psix_new - u)
    rho = state.rho + mu3 * (x_new - w)

    new = AdmmState(
        x=x_new, u=u, v=v, w=w, xi=xi, eta=eta, rho=rho,
        mu1=mu1, mu2=mu2, mu3=mu3, iteration=state.iteration + 1,
        Mx=Mx_new, Psix=Psix_new,
    )
    new.residuals = compute_residuals(state, new, config, ws)
    new.check_finite()
    return new


def compute_residuals(prev: AdmmState, new: AdmmState, config: SolverConfig,
                      ws: Workspace) -> Residuals:
    primal = (
        _norm(new.Mx - new.v),
        _norm(new.Psix - new.u),
        _norm(new.x - new.w),
    )
    dual = (
        new.mu1 * _norm(new.Mx - prev.Mx),
        new.mu2 * _norm(new.Psix - prev.Psix),
        new.mu3 * _norm(new.x - prev.x),
    )
    ea, er = config.eps_abs, config.eps_rel
    sizes = (ws.n, ws.n_psi, ws.n)
    pscale = (
        max(_norm(new.Mx), _norm(new.v)),
        max(_norm(new.Psix), _norm(new.u)),
        max(_norm(new.x), _norm(new.w)),
    )
    dscale = tuple(_norm(y) for y in (new.xi, new.eta, new.rho))
    eps_primal = tuple(math.sqrt(n) * ea + er * p for n, p in zip(sizes, pscale))
    eps_dual = tuple(math.sqrt(ws.n) * ea + er * d for d in dscale)
    return Residuals(primal, dual, eps_primal, eps_dual, pscale, dscale)


def tune_penalties(state: AdmmState, residuals: Residuals, config: SolverConfig) -> AdmmState:
    """Residual balancing, one penalty per constraint.

    A penalty is multiplied by ``tune_factor`` when its primal residual
    exceeds ``tune_ratio`` times its dual residual, and divided by it in the
    opposite case. The multipliers are stored unscaled, so they carry over
    unchanged; the scaled multiplier ``y / mu`` changes by the inverse factor.
    """
    if not all(math.isfinite(r) for r in residuals.primal + residuals.dual):
        raise SolverError("residuals must be finite to tune penalties")
    tau, ratio = config.tune_factor, config.tune_ratio
    mus = [state.mu1, state.mu2, state.mu3]
    changed = False
    for j, (r, s) in enumerate(zip(residuals.primal, residuals.dual)):
        if config.tune_normalized:
            ps, ds = residuals.primal_scale[j], residuals.dual_scale[j]
            if ps <= 0 or ds <= 0:
                continue
            r, s = r / ps, s / ds
        if r > ratio * s:
            mus[j] *= tau
            changed = True
        elif s > ratio * r:
            mus[j] /= tau
            changed = True
    if not changed:
        return state
    return replace(state, mu1=mus[0], mu2=mus[1], mu3=mus[2])


@dataclass
class ConvergenceTrace:
    objective: list[float] = field(default_factory=list)
    primal: list[tuple[float, float, float]] = field(default_factory=list)
    dual: list[float] = field(default_factory=list)
    # sum_i mu_i r_i^2 + s_i^2 / mu_i: non-increasing for fixed penalties
    merit: list[float] = field(default_factory=list)
    penalties: list[tuple[float, float, float]] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    converged: bool = False
    lam: float = 0.0
    # data normalization used internally; recorded values are in data units
    scale: float = 1.0

    def __len__(self) -> int:
        return len(self.objective)

    def record(self, obj, res: Residuals, state: AdmmState, seconds: float) -> None:
        s = self.scale
        self.objective.append(float(obj) * s * s)
        self.primal.append(tuple(float(r) * s for r in res.primal))
        self.dual.append(res.dual_total * s)
        mus = (state.mu1, state.mu2, state.mu3)
        self.merit.append(s * s * sum(m * r * r + d * d / m
                                      for m, r, d in zip(mus, res.primal, res.dual)))
        self.penalties.append((state.mu1, state.mu2, state.mu3))
        self.seconds.append(float(seconds))

    def max_primal(self) -> np.ndarray:
        return np.max(np.asarray(self.primal), axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "iteration", "objective", "primal_v", "primal_u", "primal_w",
                "dual", "mu1", "mu2", "mu3", "seconds",
            ])
            for i in range(len(self)):
                writer.writerow([
                    i + 1, repr(self.objective[i]), *map(repr, self.primal[i]),
                    repr(self.dual[i]), *map(repr, self.penalties[i]), repr(self.seconds[i]),
                ])


def solve(b, op: ConvOperator, config: SolverConfig | None = None,
          callback: Callable[[AdmmState], None] | None = None,
          state: AdmmState | None = None) -> tuple[np.ndarray, ConvergenceTrace]:
    """Run ADMM until the residual tests pass or ``max_iters`` is reached.

    Returns the clamped auxiliary ``w`` (exactly feasible when ``nonneg``)
    and the per-iteration trace.
    """
    config = config or SolverConfig()
    b = np.asarray(b)
    if b.shape != op.sensor_shape:
        raise SolverInputError(f"measurement shape {b.shape} does not match sensor {op.sensor_shape}")
    if not np.all(np.isfinite(b)):
        raise SolverInputError("measurement contains non-finite values")
    if np.any(b < 0):
        raise SolverInputError("measurement must be nonnegative")
    lam = config.lam if config.lam is not None else default_lambda(op, b)
    # The problem is homogeneous in (b, x, lam); solving at unit data peak
    # makes the absolute tolerances independent of the exposure level.
    scale = float(np.max(b)) or 1.0
    b = (b / scale).astype(op.dtype, copy=False)
    lam_n = lam / scale
    ws = Workspace(op, b, config.psi_mode)
    state = state or init_state(op, config)
    trace = ConvergenceTrace(lam=lam, scale=scale)
    initial = max(objective(op, b, state.x, lam_n, config.psi_mode, Mx=state.Mx), 1e-300)
    strikes = 0
    start = time.perf_counter()
    for it in range(config.max_iters):
        state = admm_step(state, op, b, config, lam=lam_n, workspace=ws)
        res = state.residuals
        obj = objective(op, b, state.x, lam_n, config.psi_mode, Mx=state.Mx)
        trace.record(obj, res, state, time.perf_counter() - start)
        if callback is not None:
            callback(state)
        if not math.isfinite(obj):
            raise DivergenceError(f"objective became {obj} at iteration {it + 1}", trace)
        strikes = strikes + 1 if obj > config.divergence_factor * initial else 0
        if strikes >= config.divergence_patience:
            raise DivergenceError(
                f"objective exceeded {config.divergence_factor:g} x its initial value "
                f"for {strikes} consecutive iterations", trace)
        if res.converged:
            trace.converged = True
            break
        if config.auto_tune and (config.tune_until is None or it + 1 < config.tune_until):
            state = tune_penalties(state, res, config)
    log.info("ADMM stopped after %d iterations (converged=%s)", len(trace), trace.converged)
    return state.w * scale, trace
