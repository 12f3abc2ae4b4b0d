"""Acceptance suite: one test (or parametrized group) per criterion.

The terminal summary (see ``conftest.py``) prints one PASS/FAIL line per
criterion together with the measured quantity.
"""
import os
import subprocess
import sys
import time

import numpy as np
import pytest

import test_inference
import test_io_config
import test_mobility
from mobml.dynamics import ForceField, SimulationParams, divergence_mobility, integrate, mean_squared_displacement
from mobml.dynamics import run_ensemble
from mobml.inference import (
    ParametricMobilityFamily,
    axis_force_ensembles,
    estimate_active,
    estimate_passive,
    fit_kernel_model,
    fit_mle,
    frozen_ensemble,
    random_directions,
    ray_samples,
)
from mobml.io_config import parse_params_xml, save_model_file
from mobml.mobility import (
    ConstantBlock,
    ConstantMobility,
    OseenPair,
    OseenParams,
    OseenSelf,
    PairwiseMobilityModel,
    assemble_mobility,
    eval_kernel_block,
    oseen_pair,
    oseen_self,
)

pytestmark = pytest.mark.acceptance

TITLES = {
    1: "Oseen analytic blocks to 1e-14 relative",
    2: "fluctuation-dissipation of increments",
    3: "finite-difference divergence of Oseen vanishes at second order",
    4: "Einstein relation from MSD slope",
    5: "active and passive estimators agree with Oseen and each other",
    6: "maximum-likelihood recovery (scalar_iso and oseen)",
    7: "kernel compression of Oseen pair blocks",
    8: "reference XML parameter file",
    9: "byte-identical output across runs and thread counts",
    10: "invariant suites",
}

UNIT = OseenParams(1.0, 1.0)
OSEEN = PairwiseMobilityModel(OseenSelf(UNIT), OseenPair(UNIT))

# mpmath, 30 digits
INV_6PI = 0.0530516476972984452562945877908
INV_16PI = 0.0198943678864869169711104704216


@pytest.fixture
def note(request, criterion):
    def tag(n, text=""):
        criterion(n, TITLES[n])
        if text:
            request.node.user_properties.append(("detail", text))
    return tag


def test_c01_oseen_analytic(note):
    t0 = time.perf_counter()
    s = oseen_self(UNIT)
    p = oseen_pair(UNIT, np.array([2.0, 0, 0]))
    es = np.abs(s - INV_6PI * np.eye(3)).max() / INV_6PI
    ep = np.abs(p - np.diag([2.0, 1, 1]) * INV_16PI).max() / (2 * INV_16PI)
    note(1, f"rel err self {es:.1e}, pair {ep:.1e}")
    assert es <= 1e-14 and ep <= 1e-14
    assert time.perf_counter() - t0 < 1.0


def test_c02_fluctuation_dissipation(note):
    rng = np.random.default_rng(20240601)
    G = rng.normal(size=(6, 6))
    M = G @ G.T / 6 + 0.1 * np.eye(6)
    M = 0.5 * (M + M.T)
    p = SimulationParams(1.0, 1e-3, n_steps=100_000, seed=7)
    t0 = time.perf_counter()
    tr = integrate(ConstantMobility(M), np.zeros(6), ForceField(), p)
    d = np.diff(tr.states, axis=0)
    N = d.shape[0]
    C = np.cov(d.T, bias=True)
    target = 2 * p.kBT * M * p.dt
    bound = 4 * np.abs(target).max() * np.sqrt(2 / N)
    worst = np.abs(C - target).max()
    note(2, f"max |C - 2kBT M dt| = {worst / bound:.2f} of bound")
    assert worst <= bound
    assert time.perf_counter() - t0 < 60


@pytest.mark.parametrize("direction", [(1.0, 0, 0), (0.3, -0.5, 0.81)])
def test_c03_oseen_divergence_free(note, direction):
    u = np.array(direction) / np.linalg.norm(direction)
    x = np.concatenate([np.zeros(3), 4 * UNIT.a * u])
    m = np.abs(assemble_mobility(OSEEN, x).entries).max()
    h = SimulationParams(1.0, 1e-3).fd_step_for(OSEEN)
    d1 = np.abs(divergence_mobility(OSEEN, x, h)).max()
    d2 = np.abs(divergence_mobility(OSEEN, x, h / 2)).max()
    note(3, f"|div| = {d1 / (m / UNIT.a):.1e} ||M||/a, halving ratio {d1 / d2:.2f}")
    assert d1 <= 1e-6 * m / UNIT.a
    assert 3.0 <= d1 / d2 <= 5.0


def test_c04_einstein_relation(note):
    m, kBT = 0.5, 1.0
    p = SimulationParams(kBT, 1e-3, n_steps=1000, seed=11)
    t0 = time.perf_counter()
    ens = run_ensemble(PairwiseMobilityModel(ConstantBlock.isotropic(m)), np.zeros(3), ForceField(), p, 1000)
    lags, msd = mean_squared_displacement(ens, 100)
    slope = np.polyfit(lags, msd, 1)[0]
    ratio = slope / (6 * kBT * m)
    note(4, f"slope / 6 kBT m = {ratio:.4f}")
    assert abs(ratio - 1) <= 0.05
    assert time.perf_counter() - t0 < 60


def test_c05_estimator_agreement(note):
    x = np.array([0.0, 0, 0, 4 * UNIT.a, 0, 0])
    p = SimulationParams(1.0, 1e-3, seed=2024)
    truth = oseen_pair(UNIT, x[:3] - x[3:])
    t0 = time.perf_counter()
    passive = estimate_passive(frozen_ensemble(OSEEN, x, p, 20_000), p.dt, p.kBT)
    active = estimate_active(axis_force_ensembles(OSEEN, x, p, 50.0, 5_000), p.dt)
    (pa, pse), (aa, ase) = passive.block(0, 1), active.block(0, 1)
    zp = np.abs(pa - truth).max() / pse.min()
    za = np.abs(aa - truth).max() / ase.min()
    combined = np.sqrt(pse**2 + ase**2)
    zc = (np.abs(pa - aa) / combined).max()
    note(5, f"max z: passive {zp:.2f}, active {za:.2f}, between {zc:.2f}")
    assert np.all(np.abs(pa - truth) <= 3 * pse)
    assert np.all(np.abs(aa - truth) <= 3 * ase)
    assert np.all(np.abs(pa - aa) <= 3 * combined)
    assert time.perf_counter() - t0 < 300


def test_c06_mle_recovery(note):
    t0 = time.perf_counter()
    p = SimulationParams(1.0, 0.01, n_steps=100_000, seed=31)
    traj = integrate(PairwiseMobilityModel(ConstantBlock.isotropic(0.5)), np.zeros(3), ForceField(), p)
    fam = ParametricMobilityFamily("scalar_iso", [1.0], [(1e-3, 10.0)])
    theta0 = fit_mle(fam, traj, p).theta[0]

    traps = ForceField("harmonic_trap", stiffness=20.0, centers=[0, 0, 0, 3, 0, 0])
    q = SimulationParams(1.0, 0.01, n_steps=20_000, seed=32)
    pair_traj = integrate(OSEEN, [0, 0, 0, 3, 0, 0], traps, q)
    fam2 = ParametricMobilityFamily("oseen", [2.0, 0.5], [(0.1, 10.0), (0.1, 10.0)])
    eta, a = fit_mle(fam2, pair_traj, q, field=traps).theta
    note(6, f"theta0 = {theta0:.4f}; eta = {eta:.4f}, a = {a:.4f}")
    assert 0.475 <= theta0 <= 0.525
    assert abs(eta - 1) <= 0.05 and abs(a - 1) <= 0.05
    assert time.perf_counter() - t0 < 300


def test_c07_kernel_compression(note):
    a = UNIT.a
    src = OseenPair(UNIT)
    t0 = time.perf_counter()
    dirs = random_directions(4, seed=7)
    samples = ray_samples(src, dirs, np.linspace(2.5 * a, 10 * a, 8))
    assert len(samples) == 32
    model = fit_kernel_model(samples, bandwidth=3 * a, ridge=1e-10)
    held = ray_samples(src, dirs, np.linspace(3 * a, 9 * a, 61))
    errs = [np.linalg.norm(eval_kernel_block(model, r) - b) / np.linalg.norm(b) for r, b in held]
    probes = [r for r, _ in held] + list(np.random.default_rng(1).uniform(-12, 12, size=(500, 3)))
    ratio = min(np.linalg.eigvalsh(B)[0] / np.linalg.eigvalsh(B)[-1]
                for B in (eval_kernel_block(model, r) for r in probes))
    note(7, f"held-out max rel Frobenius {max(errs):.2%}, min eig/max eig {ratio:.1e}")
    assert max(errs) <= 0.02
    assert ratio >= -1e-12
    assert time.perf_counter() - t0 < 10


def test_c08_reference_xml(note):
    run = parse_params_xml(test_io_config.REFERENCE_XML)
    note(8, f"mode {run.mode}, refs {run.model_refs}")
    assert run.mode == "dX_MF_ML1"
    assert run.model_refs == {"M_ii": "M_ii_torch.pt", "M_ij": "M_ij_torch.pt"}


def test_c09_determinism(note, tmp_path):
    save_model_file(OseenSelf(UNIT), tmp_path / "M_ii.json")
    save_model_file(OseenPair(UNIT), tmp_path / "M_ij.json")
    (tmp_path / "run.xml").write_text("""<MLMOD>
<model_data type="dX_MF_ML1"><M_ii_filename value="M_ii.json"/><M_ij_filename value="M_ij.json"/></model_data>
<sim_params><kBT value="1"/><dt value="0.001"/><n_steps value="400"/><seed value="0"/></sim_params>
<force type="pair_spring"><stiffness value="2"/><rest_length value="3"/><pairs value="0 1 1 2"/></force>
<initial><positions value="0 0 0 3 0 0 1.5 2.5 0"/></initial>
<output><trajectory value="traj.csv"/></output>
</MLMOD>""")
    t0 = time.perf_counter()
    outputs = []
    for k, threads in enumerate(["1", "1", "4"]):
        env = dict(os.environ, MOBML_NUM_THREADS=threads, OMP_NUM_THREADS=threads)
        out = tmp_path / f"run{k}"
        subprocess.run([sys.executable, "-m", "mobml.cli", "-o", str(out), "--threads", threads, "simulate",
                        str(tmp_path / "run.xml"), "--seed", "42"], check=True, env=env, capture_output=True)
        outputs.append(((out / "traj.csv").read_bytes(), (out / "traj.json").read_bytes()))
    same = all(o == outputs[0] for o in outputs[1:])
    note(9, f"{len(outputs)} runs, threads 1/1/4, identical: {same}")
    assert same
    assert time.perf_counter() - t0 < 10


INVARIANT_SUITES = {
    "symmetry": [test_mobility.test_assembled_symmetry, test_mobility.test_oseen_pair_eigenstructure,
                 test_mobility.test_kernel_blocks_are_psd],
    "rotational equivariance": [test_mobility.test_rotational_equivariance],
    "translation invariance": [test_mobility.test_translation_invariance],
    "factor correctness": [test_mobility.test_factor_correctness],
    "NLL smoothness": [test_inference.test_nll_smooth_scalar, test_inference.test_nll_smooth_oseen],
    "serialization round trips": [test_io_config.test_xml_round_trip, test_io_config.test_unknown_elements_only_warn,
                                  test_io_config.test_kernel_round_trip_is_exact,
                                  test_io_config.test_trajectory_round_trip],
}


@pytest.mark.parametrize("suite", sorted(INVARIANT_SUITES))
def test_c10_invariant_suites(note, suite, tmp_path):
    t0 = time.perf_counter()
    for check in INVARIANT_SUITES[suite]:
        check()
    if suite == "serialization round trips":
        for model in test_io_config.MODELS:
            test_io_config.test_model_file_round_trip(tmp_path, model)
    note(10, f"{suite}: {time.perf_counter() - t0:.1f}s")
