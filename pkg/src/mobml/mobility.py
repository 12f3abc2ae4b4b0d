"""Mobility models and the assembled 3n x 3n mobility matrix.

A pairwise model combines a per-particle self block source with a pair block
source that depends only on the separation ``X_i - X_j``. Block sources:

========================  ===========  ===========
source                    self role    pair role
========================  ===========  ===========
:class:`ConstantBlock`    yes          yes
:class:`OseenSelf`        yes          no
:class:`OseenPair`        no           yes
:class:`TabulatedPairModel`  no        yes
:class:`KernelMobilityModel` ``role="self"``  ``role="pair"``
========================  ===========  ===========

Pair blocks are computed for i > j only and mirrored, so every assembled
matrix is symmetric bit for bit. The batched pair kernels live in the compiled
``_core`` extension with a NumPy fallback (see :mod:`mobml._backend`).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import _backend
from ._pycore import lower_factor_blocks
from .errors import ConfigurationError, NotFactorizable, ZeroSeparation

_num_threads = int(os.environ.get("MOBML_NUM_THREADS", "1"))


def set_num_threads(n: int) -> None:
    """Thread count used by the compiled pair kernels (results do not depend on it)."""
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


# ---------------------------------------------------------------------------
# configuration and matrix containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParticleConfiguration:
    """Collective coordinate of n particles, stored flat as (x0, y0, z0, x1, ...)."""

    positions: np.ndarray

    def __post_init__(self):
        x = np.array(self.positions, dtype=float).ravel()
        if x.size == 0 or x.size % 3:
            raise ConfigurationError(f"need 3n coordinates with n >= 1, got {x.size}", "positions")
        if not np.all(np.isfinite(x)):
            raise ConfigurationError("coordinates must be finite", "positions")
        x.setflags(write=False)
        object.__setattr__(self, "positions", x)

    @property
    def n(self) -> int:
        return self.positions.size // 3

    def as_points(self) -> np.ndarray:
        return self.positions.reshape(self.n, 3)


def as_positions(config) -> np.ndarray:
    if isinstance(config, ParticleConfiguration):
        return config.positions
    return ParticleConfiguration(config).positions


@dataclass(eq=False)
class MobilityMatrix:
    """Dense symmetric mobility ``M(X)`` and, once factored, ``L`` with
    ``L L^T = repaired`` (``repaired`` is ``entries`` unless a repair was needed).
    """

    entries: np.ndarray
    factor: np.ndarray | None = None
    repaired: np.ndarray | None = None
    repair_log: int = 0

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


# ---------------------------------------------------------------------------
# analytic Oseen blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OseenParams:
    eta: float
    a: float
    r_min: float | None = None

    def __post_init__(self):
        if not (self.eta > 0):
            raise ConfigurationError("viscosity must be > 0", "eta")
        if not (self.a > 0):
            raise ConfigurationError("radius must be > 0", "a")
        if self.r_min is None:
            object.__setattr__(self, "r_min", 2.0 * self.a)
        if not (self.r_min >= 0):
            raise ConfigurationError("clamp distance must be >= 0", "r_min")


def oseen_self(params: OseenParams) -> np.ndarray:
    """Stokes drag self mobility ``(6 pi eta a)^-1 I``."""
    return (1.0 / (6.0 * np.pi * params.eta * params.a)) * np.eye(3)


def oseen_pair(params: OseenParams, r_vec) -> np.ndarray:
    """Oseen pair block ``(8 pi eta r)^-1 (I + r_hat r_hat^T)``.

    Separations shorter than ``params.r_min`` are evaluated at ``r_min`` along
    the same direction.
    """
    r_vec = np.asarray(r_vec, dtype=float)
    r = float(np.sqrt((r_vec[0] * r_vec[0] + r_vec[1] * r_vec[1]) + r_vec[2] * r_vec[2]))
    if r == 0.0:
        raise ZeroSeparation("coincident particles: pair direction undefined")
    u = r_vec / r
    c = (1.0 / (8.0 * np.pi * params.eta)) / max(r, params.r_min)
    return c * (np.eye(3) + np.outer(u, u))


# ---------------------------------------------------------------------------
# block sources
# ---------------------------------------------------------------------------

def _check(bad):
    if bad:
        raise ZeroSeparation(f"{bad} coincident particle pair(s): pair direction undefined")


def _kernels():
    return _backend.kernels


class _BlockSource:
    kind = ""
    is_constant = False
    characteristic_length = 1.0

    def block(self, r_vec=None) -> np.ndarray:
        raise NotImplementedError

    def fill_pairs(self, pos, out, num_threads=1):
        raise NotImplementedError(f"{type(self).__name__} cannot act as a pair source")


@dataclass(frozen=True, eq=False)
class ConstantBlock(_BlockSource):
    """Configuration-independent symmetric 3x3 block (a zero block switches coupling off)."""

    matrix: np.ndarray
    kind = "constant"
    is_constant = True

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.size != 9:
            raise ConfigurationError("constant block needs 9 entries", "block")
        m = m.reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ConfigurationError("entries must be finite", "block")
        if not np.array_equal(m, m.T):
            raise ConfigurationError("block must be symmetric", "block")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def zero(cls):
        return cls(np.zeros((3, 3)))

    @classmethod
    def isotropic(cls, value):
        return cls(value * np.eye(3))

    def block(self, r_vec=None):
        return self.matrix.copy()

    def fill_pairs(self, pos, out, num_threads=1):
        n = pos.shape[1]
        if not self.matrix.any():
            return
        for i in range(n):
            for j in range(i):
                out[:, 3 * i:3 * i + 3, 3 * j:3 * j + 3] = self.matrix
                out[:, 3 * j:3 * j + 3, 3 * i:3 * i + 3] = self.matrix.T


@dataclass(frozen=True)
class OseenSelf(_BlockSource):
    params: OseenParams
    kind = "oseen_self"
    is_constant = True

    @property
    def characteristic_length(self):
        return self.params.a

    def block(self, r_vec=None):
        return oseen_self(self.params)


@dataclass(frozen=True)
class OseenPair(_BlockSource):
    params: OseenParams
    kind = "oseen_pair"

    @property
    def characteristic_length(self):
        return self.params.a

    def block(self, r_vec=None):
        return oseen_pair(self.params, r_vec)

    def fill_pairs(self, pos, out, num_threads=1):
        p = self.params
        _check(_kernels().oseen_pairs(pos, out, 1.0 / (8.0 * np.pi * p.eta), float(p.r_min), num_threads))


@dataclass(frozen=True, eq=False)
class TabulatedPairModel(_BlockSource):
    """Isotropic pair block ``alpha(r) I + beta(r) r_hat r_hat^T`` on a radial grid.

    Linear interpolation; separations outside the grid take the end values.
    """

    radii: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    kind = "tabulated_pair"

    def __post_init__(self):
        arrs = {}
        for name in ("radii", "alpha", "beta"):
            a = np.array(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(a)):
                raise ConfigurationError("values must be finite", name)
            a.setflags(write=False)
            arrs[name] = a
            object.__setattr__(self, name, a)
        if arrs["radii"].size < 1:
            raise ConfigurationError("grid must be nonempty", "radii")
        if np.any(np.diff(arrs["radii"]) <= 0):
            raise ConfigurationError("grid must be strictly increasing", "radii")
        for name in ("alpha", "beta"):
            if arrs[name].size != arrs["radii"].size:
                raise ConfigurationError(f"expected {arrs['radii'].size} values", name)

    @property
    def characteristic_length(self):
        if self.radii.size > 1:
            return float(np.min(np.diff(self.radii)))
        return float(self.radii[0]) or 1.0

    def coefficients(self, r):
        """Interpolated (alpha, beta) at scalar separation ``r``."""
        return (float(np.interp(r, self.radii, self.alpha)),
                float(np.interp(r, self.radii, self.beta)))

    def block(self, r_vec=None):
        out = np.zeros((1, 6, 6))
        pos = np.zeros((1, 2, 3))
        pos[0, 1] = r_vec
        self.fill_pairs(pos, out)
        return out[0, 3:, :3].copy()

    def fill_pairs(self, pos, out, num_threads=1):
        _check(_kernels().table_pairs(pos, out, self.radii, self.alpha, self.beta, num_threads))


@dataclass(frozen=True, eq=False)
class KernelMobilityModel(_BlockSource):
    """Gaussian-RBF regression for the Cholesky factor of a 3x3 block.

    The six lower-triangular entries of ``L`` are
    ``sum_k weights[k] * exp(-|x - centers[k]|^2 / (2 bandwidth^2))`` and the
    block is ``L L^T``, hence symmetric positive semidefinite for any input.
    With ``positive_diagonal`` the diagonal entries of ``L`` pass through a
    softplus first.

    A ``"self"`` model is evaluated at the origin (self mobility is taken as
    configuration independent); a ``"pair"`` model at the separation vector.
    """

    role: str
    centers: np.ndarray
    weights: np.ndarray
    bandwidth: float
    positive_diagonal: bool = False

    def __post_init__(self):
        if self.role not in ("self", "pair"):
            raise ConfigurationError("must be 'self' or 'pair'", "role")
        c = np.array(self.centers, dtype=float)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] != 3:
            raise ConfigurationError("need a nonempty list of 3-vectors", "centers")
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[1] != 6:
            raise ConfigurationError("each weight vector must have 6 entries", "weights")
        if w.shape[0] != c.shape[0]:
            raise ConfigurationError("one weight vector per center", "weights")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(w))):
            raise ConfigurationError("values must be finite", "weights")
        if not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
            raise ConfigurationError("must be > 0", "bandwidth")
        c = np.ascontiguousarray(c)
        w = np.ascontiguousarray(w)
        c.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def kind(self):
        return "kernel_" + self.role

    @property
    def is_constant(self):
        return self.role == "self"

    @property
    def characteristic_length(self):
        return self.bandwidth

    def block(self, r_vec=None):
        x = np.zeros(3) if r_vec is None else np.asarray(r_vec, dtype=float)
        return eval_kernel_block(self, x)

    def fill_pairs(self, pos, out, num_threads=1):
        if self.role != "pair":
            raise NotImplementedError("a self kernel model cannot act as a pair source")
        _kernels().kernel_pairs(pos, out, self.centers, self.weights, self.bandwidth,
                                self.positive_diagonal, num_threads)


def eval_kernel_block(model: KernelMobilityModel, x) -> np.ndarray:
    """Evaluate ``L(x) L(x)^T`` for one 3-vector input."""
    from ._pycore import llt_blocks

    L = lower_factor_blocks(np.asarray(x, dtype=float), model.centers, model.weights,
                            model.bandwidth, model.positive_diagonal)
    return llt_blocks(L)


# ---------------------------------------------------------------------------
# full models and assembly
# ---------------------------------------------------------------------------

_SELF_KINDS = ("constant", "oseen_self", "kernel_self")
_PAIR_KINDS = ("constant", "oseen_pair", "tabulated_pair", "kernel_pair")


@dataclass(frozen=True, eq=False)
class PairwiseMobilityModel:
    """Self blocks on the diagonal, pair blocks from the separation vector."""

    self_model: _BlockSource
    pair_model: _BlockSource = field(default_factory=ConstantBlock.zero)

    def __post_init__(self):
        if self.self_model.kind not in _SELF_KINDS:
            raise ConfigurationError(f"{self.self_model.kind!r} cannot be a self source", "M_ii")
        if self.pair_model.kind not in _PAIR_KINDS:
            raise ConfigurationError(f"{self.pair_model.kind!r} cannot be a pair source", "M_ij")

    @property
    def is_constant(self):
        return self.self_model.is_constant and self.pair_model.is_constant

    @property
    def characteristic_length(self):
        if not self.pair_model.is_constant:
            return self.pair_model.characteristic_length
        return self.self_model.characteristic_length

    def assemble(self, positions, num_threads=None) -> np.ndarray:
        """Batch assembly: (K, 3n) or (3n,) positions -> (K, 3n, 3n)."""
        x = np.asarray(positions, dtype=float)
        x = x.reshape(-1, x.shape[-1])
        K, dim = x.shape
        n = dim // 3
        pos = np.ascontiguousarray(x.reshape(K, n, 3))
        out = np.zeros((K, dim, dim))
        s = self.self_model.block()
        for i in range(n):
            out[:, 3 * i:3 * i + 3, 3 * i:3 * i + 3] = s
        if n > 1:
            self.pair_model.fill_pairs(pos, out, num_threads or _num_threads)
        return out


@dataclass(frozen=True, eq=False)
class ConstantMobility:
    """A fixed dense symmetric 3n x 3n mobility."""

    matrix: np.ndarray
    characteristic_length: float = 1.0
    is_constant = True

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 3:
            raise ConfigurationError("need a square 3n x 3n matrix", "matrix")
        if not np.array_equal(m, m.T):
            raise ConfigurationError("matrix must be symmetric", "matrix")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def assemble(self, positions, num_threads=None):
        x = np.asarray(positions, dtype=float)
        x = x.reshape(-1, x.shape[-1])
        if x.shape[1] != self.matrix.shape[0]:
            raise ConfigurationError(f"expected {self.matrix.shape[0]} coordinates", "positions")
        return np.broadcast_to(self.matrix, (x.shape[0],) + self.matrix.shape).copy()


def assemble_mobility(model, config) -> MobilityMatrix:
    """Mobility matrix of ``model`` at a single configuration."""
    x = as_positions(config)
    return MobilityMatrix(model.assemble(x)[0])


# ---------------------------------------------------------------------------
# factorization
# ---------------------------------------------------------------------------

def _psd_lower_factor(w, V):
    """Lower-triangular L with L L^T = V diag(w) V^T for w >= 0 (rank-deficient ok)."""
    B = np.sqrt(w)[:, None] * V.T
    _, R = np.linalg.qr(B)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return (R * s[:, None]).T


def factor_spd(M: MobilityMatrix, max_retries: int = 3) -> MobilityMatrix:
    """Cholesky factor, repairing matrices that are not numerically SPD.

    Tries a plain Cholesky first. On failure adds ``1e-12 * trace/dim`` times
    the identity and retries (jitter x100 per retry, ``max_retries`` times);
    after that clips negative eigenvalues to zero. Each repaired factorization
    increments ``repair_log`` by one.
    """
    A = np.asarray(M.entries, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NotFactorizable("mobility has non-finite entries")
    try:
        return replace(M, factor=np.linalg.cholesky(A), repaired=A)
    except np.linalg.LinAlgError:
        pass
    dim = A.shape[0]
    jitter = 1e-12 * np.trace(A) / dim
    if jitter > 0:
        for attempt in range(max_retries):
            Aj = A + (jitter * 100.0 ** attempt) * np.eye(dim)
            try:
                L = np.linalg.cholesky(Aj)
            except np.linalg.LinAlgError:
                continue
            return replace(M, factor=L, repaired=Aj, repair_log=M.repair_log + 1)
    w, V = np.linalg.eigh(A)
    w = np.clip(w, 0.0, None)
    R = (V * w) @ V.T
    R = 0.5 * (R + R.T)
    L = _psd_lower_factor(w, V)
    if not (np.all(np.isfinite(L)) and np.all(np.isfinite(R))):
        raise NotFactorizable("eigenvalue clipping produced non-finite values")
    return replace(M, factor=L, repaired=R, repair_log=M.repair_log + 1)
