"""Mobility estimation from trajectories and model fitting.

* :func:`estimate_active` - mean velocity response to applied forces, ``V = M F``.
* :func:`estimate_passive` - second moment of thermal displacements,
  ``M = <dX dX^T> / (2 kBT tau)``.
* :func:`negative_log_likelihood` / :func:`fit_mle` - Gaussian Euler-Maruyama
  transition likelihood and its Nelder-Mead minimization over a parametric family.
* :func:`fit_kernel_model` - compress sampled 3x3 blocks into a Gaussian-RBF
  model of their Cholesky factors.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize

from .dynamics import ForceField, SimulationParams, Trajectory, divergence_batch, run_ensemble
from .errors import (
    ConfigurationError,
    DegenerateLag,
    DidNotConverge,
    InsufficientForceBasis,
    NonFinite,
    NumericalError,
    SingularKernel,
)
from .mobility import (
    ConstantBlock,
    KernelMobilityModel,
    MobilityMatrix,
    OseenPair,
    OseenParams,
    OseenSelf,
    PairwiseMobilityModel,
    TabulatedPairModel,
    _psd_lower_factor,
    factor_spd,
)

FAMILIES = ("scalar_iso", "oseen", "tabulated_alpha_beta")
_TRIL = np.tril_indices(3)
_DIAG6 = [0, 2, 5]


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EstimatorReport:
    M_hat: np.ndarray
    standard_error: np.ndarray
    n_samples: int
    tau: float

    def block(self, i: int, j: int):
        """3x3 block (i, j) of the estimate and of its standard errors."""
        s = np.s_[3 * i:3 * i + 3, 3 * j:3 * j + 3]
        return self.M_hat[s], self.standard_error[s]

    def to_dict(self) -> dict:
        return {
            "dim": int(self.M_hat.shape[0]),
            "M_hat": self.M_hat.ravel().tolist(),
            "standard_error": self.standard_error.ravel().tolist(),
            "n_samples": int(self.n_samples),
            "tau": float(self.tau),
        }


def estimate_active(trajectories, tau: float, dims: int | None = None) -> EstimatorReport:
    """Least-squares mobility from mean displacements under constant forces.

    Trajectories are grouped by their (constant) applied force vector. Each
    group gives a velocity ``V_g = <dX> / tau``; ``M`` solves ``V = M F`` over
    the groups in the least-squares sense and is then symmetrized.
    """
    groups: dict[tuple, list] = {}
    forces: dict[tuple, np.ndarray] = {}
    for k, tr in enumerate(trajectories):
        if tr.forces is None:
            raise ConfigurationError("trajectory has no applied-force record", f"trajectories[{k}].forces")
        f0 = tr.forces[0]
        if not np.all(tr.forces == f0):
            raise ConfigurationError("applied force must be constant", f"trajectories[{k}].forces")
        key = tuple(f0.tolist())
        forces[key] = f0
        groups.setdefault(key, []).append(tr.increments(tau))
    if not groups:
        raise InsufficientForceBasis("no trajectories")
    D = next(iter(forces.values())).size
    dims = D if dims is None else dims
    F = np.column_stack([forces[k] for k in groups])
    rank = np.linalg.matrix_rank(F) if F.any() else 0
    if rank < dims:
        raise InsufficientForceBasis(f"applied forces span {rank} of the {dims} required dimensions")
    V = np.empty((D, len(groups)))
    SE = np.empty((D, len(groups)))
    n_total = 0
    for g, key in enumerate(groups):
        inc = np.vstack(groups[key])
        if inc.shape[0] < 2:
            raise ConfigurationError("need at least two increments per force", "trajectories")
        n_total += inc.shape[0]
        V[:, g] = inc.mean(axis=0) / tau
        SE[:, g] = inc.std(axis=0, ddof=1) / math.sqrt(inc.shape[0]) / tau
    P = np.linalg.pinv(F)
    M = V @ P
    var = (SE ** 2) @ (P ** 2)
    M_sym = 0.5 * (M + M.T)
    se = 0.5 * np.sqrt(var + var.T)
    return EstimatorReport(M_sym, se, n_total, tau)


def estimate_passive(trajectories, tau: float, kBT: float) -> EstimatorReport:
    """Moment estimator ``<dX dX^T> / (2 kBT tau)`` from force-free trajectories.

    Standard errors use the Gaussian fourth-moment approximation
    ``var(dX_a dX_b) = S_aa S_bb + S_ab^2``.
    """
    if not kBT > 0:
        raise ConfigurationError("passive estimation needs kBT > 0", "kBT")
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    incs = []
    for k, tr in enumerate(trajectories):
        if tau > 0.5 * tr.duration * (1 + 1e-12):
            raise DegenerateLag(f"lag {tau} exceeds half the trajectory duration {tr.duration}",
                                f"trajectories[{k}]")
        incs.append(tr.increments(tau))
    dX = np.vstack(incs)
    N = dX.shape[0]
    if N < 2:
        raise ConfigurationError("need at least two increments", "trajectories")
    S = dX.T @ dX / N
    S = 0.5 * (S + S.T)
    d = np.diag(S)
    scale = 1.0 / (2.0 * kBT * tau)
    se = np.sqrt((np.outer(d, d) + S ** 2) / N) * scale
    return EstimatorReport(S * scale, se, N, tau)


def frozen_ensemble(model, x, params: SimulationParams, n_members: int, *,
                    field: ForceField | None = None, n_steps: int = 2,
                    member_offset: int = 0, workers: int = 1):
    """Short trajectories all restarted at ``x`` (keeps the estimate local in X)."""
    p = replace(params, n_steps=n_steps)
    return run_ensemble(model, x, field or ForceField(), p, n_members,
                        member_offset=member_offset, workers=workers)


# Active members start here so an active run never reuses the noise streams of a
# passive run with the same seed (the two estimates are compared as independent).
ACTIVE_MEMBER_OFFSET = 1 << 32


def axis_force_ensembles(model, x, params: SimulationParams, magnitude: float, n_members: int, *,
                         n_steps: int = 2, member_offset: int = ACTIVE_MEMBER_OFFSET, workers: int = 1):
    """One frozen ensemble per coordinate axis with force ``magnitude * e_k``.

    Axis ``k`` uses members ``member_offset + k * n_members + i``.
    """
    D = np.asarray(x).size
    out = []
    for k in range(D):
        f = np.zeros(D)
        f[k] = magnitude
        out += frozen_ensemble(model, x, params, n_members, field=ForceField("constant", forces=f),
                               n_steps=n_steps, member_offset=member_offset + k * n_members,
                               workers=workers)
    return out


# ---------------------------------------------------------------------------
# parametric families and likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParametricMobilityFamily:
    """A mobility model class indexed by ``theta`` within box ``bounds``.

    ``scalar_iso``: ``M = theta0 I``. ``oseen``: ``theta = (eta, a)`` with the
    clamp at ``2a``. ``tabulated_alpha_beta``: ``theta`` holds the alpha values
    then the beta values on ``radii``; the self block comes from ``self_model``.
    """

    family: str
    theta: np.ndarray
    bounds: tuple
    radii: np.ndarray | None = None
    self_model: object | None = None
    nll: float | None = None
    converged: bool | None = None
    iterations: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"must be one of {FAMILIES}", "family")
        theta = np.array(self.theta, dtype=float).ravel()
        bounds = np.array(self.bounds, dtype=float).reshape(-1, 2)
        expected = {"scalar_iso": 1, "oseen": 2}.get(self.family)
        if self.family == "tabulated_alpha_beta":
            if self.radii is None or self.self_model is None:
                raise ConfigurationError("tabulated family needs radii and a self model", "family")
            expected = 2 * np.asarray(self.radii).size
        if theta.size != expected:
            raise ConfigurationError(f"expected {expected} parameters, got {theta.size}", "theta")
        if bounds.shape[0] != theta.size:
            raise ConfigurationError("one (lo, hi) pair per parameter", "bounds")
        if np.any(bounds[:, 0] >= bounds[:, 1]):
            raise ConfigurationError("need lo < hi", "bounds")
        if np.any(theta < bounds[:, 0]) or np.any(theta > bounds[:, 1]):
            raise ConfigurationError("theta outside bounds", "theta")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "bounds", bounds)

    def model(self, theta=None):
        t = self.theta if theta is None else np.asarray(theta, dtype=float)
        if self.family == "scalar_iso":
            return PairwiseMobilityModel(ConstantBlock.isotropic(t[0]), ConstantBlock.zero())
        if self.family == "oseen":
            p = OseenParams(t[0], t[1])
            return PairwiseMobilityModel(OseenSelf(p), OseenPair(p))
        m = np.asarray(self.radii).size
        return PairwiseMobilityModel(self.self_model, TabulatedPairModel(self.radii, t[:m], t[m:]))

    def with_theta(self, theta, **kw):
        return replace(self, theta=np.asarray(theta, dtype=float), **kw)

    def to_dict(self) -> dict:
        d = {"family": self.family, "theta": self.theta.tolist(), "bounds": self.bounds.tolist()}
        if self.nll is not None:
            d.update(nll=self.nll, converged=self.converged, iterations=self.iterations)
        return d


def _batched_factor(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return np.stack([factor_spd(MobilityMatrix(m)).factor for m in M])


def negative_log_likelihood(family, traj: Trajectory, params: SimulationParams,
                            field: ForceField | None = None, *, chunk: int = 4096) -> float:
    """Negative log density of the saved transitions under Euler-Maruyama.

    Each transition ``X_k -> X_{k+1}`` over spacing ``dt`` is Gaussian with mean
    ``X_k + (M F + kBT div M) dt`` and covariance ``2 kBT M(X_k) dt``. Forces
    come from the trajectory's record, else ``field``, else zero. The
    divergence term is included when ``params.divergence_mode`` is
    ``finite_difference``. ``family`` may also be a bare mobility model.
    """
    model = family.model() if isinstance(family, ParametricMobilityFamily) else family
    if not params.kBT > 0:
        raise ConfigurationError("likelihood needs kBT > 0", "sim.kBT")
    X = traj.states
    if X.shape[0] < 2:
        raise ConfigurationError("need at least two states", "trajectory")
    dt = traj.spacing
    D = X.shape[1]
    if traj.forces is not None:
        F = traj.forces[:-1]
    elif field is not None:
        F = field.evaluate(X[:-1])
    else:
        F = np.zeros_like(X[:-1])
    dX = X[1:] - X[:-1]
    noise_scale = math.sqrt(2.0 * params.kBT * dt)
    quad = 0.0
    logdet = 0.0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if model.is_constant:
            Mf = factor_spd(MobilityMatrix(model.assemble(X[0])[0]))
            d = dX - (F @ Mf.entries.T) * dt
            y = scipy.linalg.solve_triangular(noise_scale * Mf.factor, d.T, lower=True)
            quad = float(np.sum(y * y))
            logdet = dX.shape[0] * 2.0 * float(np.sum(np.log(noise_scale * np.diag(Mf.factor))))
        else:
            h = params.fd_step_for(model)
            for s in range(0, dX.shape[0], chunk):
                xs = X[s:min(s + chunk, dX.shape[0])]
                M = model.assemble(xs)
                drift = np.einsum("kab,kb->ka", M, F[s:s + chunk])
                if params.divergence_mode == "finite_difference":
                    drift = drift + params.kBT * divergence_batch(model, xs, h)
                d = dX[s:s + chunk] - drift * dt
                L = noise_scale * _batched_factor(M)
                y = np.linalg.solve(L, d[..., None])[..., 0]
                quad += float(np.sum(y * y))
                logdet += 2.0 * float(np.sum(np.log(np.diagonal(L, axis1=1, axis2=2))))
    nll = 0.5 * (quad + logdet + dX.shape[0] * D * math.log(2.0 * math.pi))
    if not math.isfinite(nll):
        raise NonFinite("negative log-likelihood is not finite")
    return nll


@dataclass
class OptimizerSettings:
    max_iter: int = 500
    rel_tol: float = 1e-8
    initial_step: float = 0.25


def _to_box(u, lo, hi):
    return lo + (hi - lo) / (1.0 + np.exp(-u))


def _from_box(theta, lo, hi):
    p = np.clip((theta - lo) / (hi - lo), 1e-12, 1.0 - 1e-12)
    return np.log(p) - np.log1p(-p)


def fit_mle(family: ParametricMobilityFamily, traj: Trajectory, params: SimulationParams,
            opt: OptimizerSettings | None = None, field: ForceField | None = None
            ) -> ParametricMobilityFamily:
    """Maximum-likelihood ``theta`` by Nelder-Mead in logit coordinates of the box.

    Stops when the simplex NLL spread falls below ``rel_tol * (1 + |NLL|)`` or
    after ``max_iter`` iterations; in the latter case a :class:`DidNotConverge`
    warning is issued and the best point found is returned with
    ``converged=False``.
    """
    opt = opt or OptimizerSettings()
    lo, hi = family.bounds[:, 0], family.bounds[:, 1]

    def objective(u):
        try:
            return negative_log_likelihood(family.model(_to_box(u, lo, hi)), traj, params, field)
        except (NumericalError, ConfigurationError):
            return np.inf

    u0 = _from_box(family.theta, lo, hi)
    f0 = objective(u0)
    if not math.isfinite(f0):
        raise NonFinite("negative log-likelihood is not finite at the initial theta")
    simplex = np.vstack([u0, u0 + opt.initial_step * np.eye(u0.size)])
    res = scipy.optimize.minimize(
        objective, u0, method="Nelder-Mead",
        options={
            "maxiter": opt.max_iter,
            "maxfev": 10 * opt.max_iter * (u0.size + 1),
            "xatol": np.inf,
            "fatol": opt.rel_tol * (1.0 + abs(f0)),
            "initial_simplex": simplex,
        },
    )
    converged = res.status == 0
    if not converged:
        warnings.warn(f"Nelder-Mead stopped after {res.nit} iterations: {res.message}", DidNotConverge)
    return family.with_theta(_to_box(res.x, lo, hi), nll=float(res.fun), converged=converged,
                             iterations=int(res.nit))


# ---------------------------------------------------------------------------
# kernel compression
# ---------------------------------------------------------------------------

def _inv_softplus(y):
    y = np.maximum(y, 1e-300)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def cholesky_entries(block) -> np.ndarray:
    """Six lower-triangular entries of the Cholesky factor of a 3x3 block.

    Non-SPD blocks are symmetrized and eigenvalue-clipped first; diagonals are
    nonnegative.
    """
    B = np.asarray(block, dtype=float)
    B = 0.5 * (B + B.T)
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(B)
        L = _psd_lower_factor(np.clip(w, 0.0, None), V)
    return L[_TRIL]


def gaussian_kernel_matrix(A, B, bandwidth: float) -> np.ndarray:
    d = np.asarray(A, dtype=float)[:, None, :] - np.asarray(B, dtype=float)[None, :, :]
    return np.exp(-np.einsum("ijk,ijk->ij", d, d) / (2.0 * bandwidth * bandwidth))


def fit_kernel_model(samples, bandwidth: float, ridge: float = 0.0, *, role: str = "pair",
                     positive_diagonal: bool = False) -> KernelMobilityModel:
    """Kernel ridge regression of block Cholesky factors.

    ``samples`` is a sequence of ``(input 3-vector, 3x3 block)``. Solves
    ``(K + ridge I) W = Y`` with the Gaussian kernel matrix ``K`` of the inputs
    and ``Y`` the per-sample Cholesky entries (diagonals mapped through the
    inverse softplus when ``positive_diagonal``).
    """
    samples = list(samples)
    if not samples:
        raise ConfigurationError("need at least one sample", "samples")
    if not ridge >= 0:
        raise ConfigurationError("must be >= 0", "ridge")
    X = np.array([np.asarray(s[0], dtype=float).ravel() for s in samples])
    Y = np.array([cholesky_entries(s[1]) for s in samples])
    if positive_diagonal:
        Y[:, _DIAG6] = _inv_softplus(Y[:, _DIAG6])
    K = gaussian_kernel_matrix(X, X, bandwidth) + ridge * np.eye(len(X))
    try:
        cf = scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularKernel(f"kernel system not factorizable ({exc}); increase ridge") from exc
    W = scipy.linalg.cho_solve(cf, Y)
    if not np.all(np.isfinite(W)):
        raise SingularKernel("kernel weights are not finite; increase ridge")
    return KernelMobilityModel(role, X, W, bandwidth, positive_diagonal)


def random_directions(n: int, seed: int = 0) -> np.ndarray:
    """``n`` unit vectors uniform on the sphere."""
    u = np.random.default_rng(seed).normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1)[:, None]


def ray_samples(source, directions, radii):
    """``(r_vec, block)`` pairs of a pair source at every radius along every direction."""
    return [(d * r, source.block(d * r))
            for d in np.atleast_2d(directions) for r in np.asarray(radii, dtype=float)]
