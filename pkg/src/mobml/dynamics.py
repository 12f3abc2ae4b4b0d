"""Overdamped Langevin integration with configuration-dependent mobility.

The update is Euler-Maruyama in the Ito convention::

    X+ = X + (M(X) F(X) + kBT div M(X)) dt + sqrt(2 kBT dt) L xi,   M = L L^T

with ``xi`` drawn from :class:`NoiseStream`.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError, MobmlError, NonFiniteState, NumericalError
from .mobility import MobilityMatrix, as_positions, factor_spd

DIVERGENCE_MODES = ("finite_difference", "analytic_zero")
FORCE_KINDS = ("zero", "constant", "harmonic_trap", "pair_spring")


@dataclass(frozen=True)
class SimulationParams:
    kBT: float
    dt: float
    n_steps: int = 1
    seed: int = 0
    fd_step: float | None = None
    divergence_mode: str = "finite_difference"

    def __post_init__(self):
        if not (self.kBT >= 0 and math.isfinite(self.kBT)):
            raise ConfigurationError("must be >= 0", "sim.kBT")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigurationError("must be > 0", "sim.dt")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError("must be a positive integer", "sim.n_steps")
        if int(self.seed) != self.seed or not (0 <= self.seed < 2**64):
            raise ConfigurationError("must be an unsigned 64-bit integer", "sim.seed")
        if self.fd_step is not None and not (self.fd_step > 0):
            raise ConfigurationError("must be > 0", "sim.fd_step")
        if self.divergence_mode not in DIVERGENCE_MODES:
            raise ConfigurationError(f"must be one of {DIVERGENCE_MODES}", "sim.divergence_mode")

    def fd_step_for(self, model) -> float:
        """Explicit ``fd_step`` or 1e-4 times the model's characteristic length."""
        if self.fd_step is not None:
            return self.fd_step
        return 1e-4 * model.characteristic_length


@dataclass(frozen=True, eq=False)
class ForceField:
    """Applied forces. ``forces`` is the flat per-particle vector for ``constant``;
    ``centers`` the flat trap centers for ``harmonic_trap``; ``pairs`` the bonded
    index pairs for ``pair_spring``."""

    kind: str = "zero"
    forces: np.ndarray | None = None
    stiffness: float = 0.0
    centers: np.ndarray | None = None
    rest_length: float = 0.0
    pairs: tuple = ()

    def __post_init__(self):
        if self.kind not in FORCE_KINDS:
            raise ConfigurationError(f"must be one of {FORCE_KINDS}", "force.type")
        if self.kind == "constant":
            if self.forces is None:
                raise ConfigurationError("constant force needs a force vector", "force.forces")
            object.__setattr__(self, "forces", _flat(self.forces, "force.forces"))
        if self.kind == "harmonic_trap":
            if self.centers is None:
                raise ConfigurationError("trap needs centers", "force.centers")
            object.__setattr__(self, "centers", _flat(self.centers, "force.centers"))
        if self.kind in ("harmonic_trap", "pair_spring") and not (self.stiffness >= 0):
            raise ConfigurationError("must be >= 0", "force.stiffness")
        if self.kind == "pair_spring":
            pairs = tuple((int(i), int(j)) for i, j in self.pairs)
            if any(i == j or i < 0 or j < 0 for i, j in pairs):
                raise ConfigurationError("pairs must join two distinct particles", "force.pairs")
            object.__setattr__(self, "pairs", pairs)

    @property
    def active(self) -> bool:
        return self.kind != "zero"

    def evaluate(self, x) -> np.ndarray:
        """Force on a flat (3n,) configuration or a (K, 3n) batch."""
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "constant":
            _match(self.forces, x, "force.forces")
            return np.broadcast_to(self.forces, x.shape).copy()
        if self.kind == "harmonic_trap":
            _match(self.centers, x, "force.centers")
            return -self.stiffness * (x - self.centers)
        f = np.zeros_like(x)
        n = x.shape[-1] // 3
        for i, j in self.pairs:
            if max(i, j) >= n:
                raise ConfigurationError(f"pair ({i}, {j}) out of range for {n} particles", "force.pairs")
            d = x[..., 3 * i:3 * i + 3] - x[..., 3 * j:3 * j + 3]
            r = np.linalg.norm(d, axis=-1, keepdims=True)
            g = -self.stiffness * (r - self.rest_length) * d / np.where(r == 0, 1.0, r)
            f[..., 3 * i:3 * i + 3] += g
            f[..., 3 * j:3 * j + 3] -= g
        return f


def _flat(v, name):
    a = np.array(v, dtype=float).ravel()
    if not np.all(np.isfinite(a)):
        raise ConfigurationError("values must be finite", name)
    a.setflags(write=False)
    return a


def _match(v, x, name):
    if v.size != x.shape[-1]:
        raise ConfigurationError(f"has {v.size} entries, configuration has {x.shape[-1]}", name)


@dataclass(eq=False)
class Trajectory:
    """Saved states ``states[k]`` at ``times[k]``; optional applied forces per state."""

    times: np.ndarray
    states: np.ndarray
    forces: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] != self.times.size:
            raise ConfigurationError("one state per time", "states")
        if self.states.shape[1] % 3 or self.states.shape[1] == 0:
            raise ConfigurationError("states must have 3n columns", "states")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("times must be strictly increasing", "times")
        if self.forces is not None:
            self.forces = np.atleast_2d(np.asarray(self.forces, dtype=float))
            if self.forces.shape != self.states.shape:
                raise ConfigurationError("forces must match states in shape", "forces")

    @property
    def n(self) -> int:
        return self.states.shape[1] // 3

    @property
    def spacing(self) -> float:
        if self.times.size < 2:
            return float("nan")
        return float(self.times[1] - self.times[0])

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def lag_steps(self, tau: float) -> int:
        """Number of saved intervals making up lag ``tau``."""
        s = self.spacing
        if not math.isfinite(s):
            raise ConfigurationError("trajectory has a single state", "tau")
        k = round(tau / s)
        if k < 1 or abs(k * s - tau) > 1e-9 * max(abs(tau), s):
            raise ConfigurationError(f"lag {tau} is not a multiple of the save interval {s}", "tau")
        return k

    def increments(self, tau: float) -> np.ndarray:
        """Non-overlapping displacements ``X(t + tau) - X(t)`` starting at ``t0``."""
        k = self.lag_steps(tau)
        idx = np.arange(0, self.times.size - k, k)
        return self.states[idx + k] - self.states[idx]


class NoiseStream:
    """Standard normals from a Philox counter generator via the inverse normal CDF.

    Every normal consumes exactly one 64-bit word: the top 53 bits give
    ``u = (m + 0.5) / 2**53`` in (0, 1) and the draw is ``ndtri(u)``. Draws for a
    step are taken in coordinate order x0, y0, z0, x1, ...
    """

    def __init__(self, seed: int, member: int | None = None):
        spawn = () if member is None else (int(member),)
        self.bit_generator = np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=spawn))

    def normals(self, k: int) -> np.ndarray:
        raw = self.bit_generator.random_raw(k)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
        return ndtri(u)

    def skip(self, k: int) -> None:
        self.bit_generator.random_raw(k)

    @property
    def state(self):
        return self.bit_generator.state


@dataclass
class RunStats:
    repairs: int = 0
    steps: int = 0


# ---------------------------------------------------------------------------
# divergence of the mobility
# ---------------------------------------------------------------------------

def divergence_batch(model, x, h: float, chunk: int | None = None) -> np.ndarray:
    """Central-difference ``(div M)_i = sum_j dM_ij/dx_j`` for a (K, 3n) batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K, D = x.shape
    if getattr(model, "is_constant", False):
        return np.zeros((K, D))
    if chunk is None:
        chunk = max(1, 2_000_000 // (2 * D * D * D))
    shifts = h * np.eye(D)
    out = np.empty((K, D))
    cols = np.arange(D)
    for s in range(0, K, chunk):
        xs = x[s:s + chunk]
        k = xs.shape[0]
        pert = np.empty((k, D, 2, D))
        pert[:, :, 0, :] = xs[:, None, :] + shifts
        pert[:, :, 1, :] = xs[:, None, :] - shifts
        M = model.assemble(pert.reshape(-1, D)).reshape(k, D, 2, D, D)
        # column j of M at +-h along x_j: M[:, j, s, :, j]
        colp = M[:, cols, 0, :, cols]
        colm = M[:, cols, 1, :, cols]
        out[s:s + k] = ((colp - colm) / (2.0 * h)).sum(axis=0)
    return out


def divergence_mobility(model, config, h: float) -> np.ndarray:
    """Divergence of the mobility at one configuration."""
    if not h > 0:
        raise ConfigurationError("finite-difference step must be > 0", "sim.fd_step")
    return divergence_batch(model, as_positions(config)[None, :], h)[0]


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def step(config, model, field: ForceField, params: SimulationParams, rng: NoiseStream | None,
         *, mobility: MobilityMatrix | None = None, stats: RunStats | None = None) -> np.ndarray:
    """One Euler-Maruyama step; returns the new flat configuration.

    ``mobility`` may carry a precomputed (and factored) matrix for models whose
    mobility does not depend on the configuration. No random numbers are drawn
    when ``kBT == 0``.
    """
    x = as_positions(config)
    if mobility is None:
        mobility = MobilityMatrix(model.assemble(x)[0])
    drift = mobility.entries @ field.evaluate(x)
    noisy = params.kBT > 0
    if noisy and params.divergence_mode == "finite_difference" and not model.is_constant:
        drift = drift + params.kBT * divergence_mobility(model, x, params.fd_step_for(model))
    x_new = x + drift * params.dt
    if noisy:
        if mobility.factor is None:
            mobility = factor_spd(mobility)
            if stats is not None:
                stats.repairs += mobility.repair_log
        xi = rng.normals(x.size)
        x_new = x_new + math.sqrt(2.0 * params.kBT * params.dt) * (mobility.factor @ xi)
    if not np.all(np.isfinite(x_new)):
        raise NonFiniteState("configuration became non-finite (time step too large?)")
    if stats is not None:
        stats.steps += 1
    return x_new


def integrate(model, x0, field: ForceField, params: SimulationParams, *, save_stride: int = 1,
              rng: NoiseStream | None = None, meta: dict | None = None,
              record_forces: bool | None = None) -> Trajectory:
    """Run ``params.n_steps`` steps from ``x0`` and keep every ``save_stride``-th state."""
    if save_stride < 1:
        raise ConfigurationError("must be >= 1", "output.save_stride")
    x = np.array(as_positions(x0))
    if rng is None:
        rng = NoiseStream(params.seed)
    if record_forces is None:
        record_forces = field.active
    stats = RunStats()
    cached = None
    if model.is_constant:
        cached = MobilityMatrix(model.assemble(x)[0])
        if params.kBT > 0:
            cached = factor_spd(cached)
            stats.repairs += cached.repair_log
    if cached is not None and field.kind in ("zero", "constant"):
        with np.errstate(over="ignore", invalid="ignore"):
            states = _integrate_constant(x, cached, field, params, save_stride, rng, stats)
        return _finish(states, field, params, save_stride, record_forces, meta, stats)
    states = [x]
    for k in range(1, params.n_steps + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                x = step(x, model, field, params, rng, mobility=cached, stats=stats)
        except NonFiniteState as exc:
            raise NonFiniteState(str(exc), step=k) from exc
        except NumericalError as exc:
            raise type(exc)(f"step {k}: {exc}") from exc
        if k % save_stride == 0:
            states.append(x)
    return _finish(np.array(states), field, params, save_stride, record_forces, meta, stats)


def _integrate_constant(x, mobility, field, params, save_stride, rng, stats, chunk=8192):
    """Position-independent drift and noise: draw noise in blocks, accumulate in order.

    Consumes the noise stream exactly like the step loop (3n words per step).
    """
    D = x.size
    drift = (mobility.entries @ field.evaluate(x)) * params.dt
    scale = math.sqrt(2.0 * params.kBT * params.dt)
    kept = [x[None, :]]
    done = 0
    while done < params.n_steps:
        m = min(chunk, params.n_steps - done)
        inc = np.broadcast_to(drift, (m, D)).copy()
        if params.kBT > 0:
            xi = rng.normals(m * D).reshape(m, D)
            inc += scale * np.einsum("ij,kj->ki", mobility.factor, xi)
        inc[0] += x
        path = np.cumsum(inc, axis=0)
        bad = ~np.all(np.isfinite(path), axis=1)
        if bad.any():
            raise NonFiniteState("configuration became non-finite (time step too large?)",
                                 step=done + int(np.argmax(bad)) + 1)
        k = np.arange(done + 1, done + m + 1)
        kept.append(path[k % save_stride == 0])
        x = path[-1]
        done += m
    stats.steps += done
    return np.concatenate(kept)


def _finish(states, field, params, save_stride, record_forces, meta, stats):
    times = np.arange(states.shape[0]) * (params.dt * save_stride)
    forces = field.evaluate(states) if record_forces else None
    meta = dict(meta or {})
    meta["repairs"] = stats.repairs
    return Trajectory(times, states, forces, meta)


def simulate(run) -> Trajectory:
    """Simulate a validated run configuration (see :mod:`mobml.io_config`)."""
    model = run.build_model()
    return integrate(model, run.initial_positions(), run.force, run.sim,
                     save_stride=run.save_stride, meta={"run_config": run.to_dict()})


def run_ensemble(model, x0, field: ForceField, params: SimulationParams, n_members: int, *,
                 save_stride: int = 1, member_offset: int = 0,
                 workers: int = 1) -> list[Trajectory]:
    """Independent trajectories from ``x0``; member ``i`` uses noise key
    ``(seed, member_offset + i)``. Results do not depend on ``workers``.
    """
    def member(i):
        return integrate(model, x0, field, params, save_stride=save_stride,
                         rng=NoiseStream(params.seed, i), meta={"member": i})

    ids = range(member_offset, member_offset + n_members)
    if workers <= 1:
        return [member(i) for i in ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(member, ids))


def mean_squared_displacement(trajectories, max_lag: int):
    """Time- and ensemble-averaged MSD summed over all coordinates.

    Returns ``(lag_times, msd)`` for lags 1..max_lag saved intervals.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    sums = np.zeros(max_lag)
    counts = np.zeros(max_lag)
    for tr in trajectories:
        X = tr.states
        for lag in range(1, min(max_lag, X.shape[0] - 1) + 1):
            d = X[lag:] - X[:-lag]
            sums[lag - 1] += np.einsum("ij,ij->", d, d)
            counts[lag - 1] += d.shape[0]
    if np.any(counts == 0):
        raise MobmlError("trajectories shorter than the requested lag")
    spacing = trajectories[0].spacing
    return np.arange(1, max_lag + 1) * spacing, sums / counts
