import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mobml.dynamics import ForceField, SimulationParams, Trajectory
from mobml.errors import (
    ConfigurationError,
    InvalidModelPayload,
    MalformedRow,
    MalformedXML,
    MissingModelData,
    NonUniformSpacing,
    SchemaVersionUnsupported,
)
from mobml.io_config import (
    RunConfig,
    load_model_file,
    load_run_config,
    load_trajectory,
    model_from_dict,
    model_to_dict,
    parse_params_xml,
    run_config_to_xml,
    save_model_file,
    save_trajectory,
)
from mobml.mobility import (
    ConstantBlock,
    KernelMobilityModel,
    OseenPair,
    OseenParams,
    OseenSelf,
    TabulatedPairModel,
)

# reference parameter file, reproduced verbatim (including the trailing blank after the declaration)
REFERENCE_XML = """<?xml version="1.0" encoding="UTF-8"?>
<MLMOD>
<model_data type="dX_MF_ML1">
<M_ii_filename value="M_ii_torch.pt"/>
<M_ij_filename value="M_ij_torch.pt"/>
</model_data>
</MLMOD>
"""


def write_models(tmp_path, names=("M_ii.json", "M_ij.json")):
    save_model_file(OseenSelf(OseenParams(1.0, 1.0)), tmp_path / names[0])
    save_model_file(OseenPair(OseenParams(1.0, 1.0)), tmp_path / names[1])


def full_xml(extra="", sim=None, initial='<positions value="0 0 0 4 0 0"/>'):
    sim = sim or '<kBT value="1"/><dt value="0.001"/><n_steps value="10"/><seed value="3"/>'
    return f"""<MLMOD>
<model_data type="dX_MF_ML1"><M_ii_filename value="M_ii.json"/><M_ij_filename value="M_ij.json"/></model_data>
<sim_params>{sim}</sim_params>
<force type="harmonic_trap"><stiffness value="2"/><centers value="0 0 0 4 0 0"/></force>
<initial>{initial}</initial>
<output><trajectory value="out.csv"/><save_stride value="2"/></output>
{extra}</MLMOD>"""


# -- XML ---------------------------------------------------------------------------

def test_reference_parameter_file():
    run = parse_params_xml(REFERENCE_XML)
    assert run.mode == "dX_MF_ML1"
    assert run.model_refs == {"M_ii": "M_ii_torch.pt", "M_ij": "M_ij_torch.pt"}
    assert run.warnings == []


def test_reference_file_resolves_pt_names(tmp_path):
    write_models(tmp_path, ("M_ii_torch.pt", "M_ij_torch.pt"))
    run = parse_params_xml(REFERENCE_XML, base_dir=tmp_path)
    model = run.build_model()
    assert model.self_model.kind == "oseen_self" and model.pair_model.kind == "oseen_pair"


def test_empty_model_data_fails_on_missing_role():
    run = parse_params_xml('<MLMOD><model_data type="dX_MF_ML1"/></MLMOD>')
    assert run.model_refs == {}
    with pytest.raises(ConfigurationError) as err:
        run.build_model()
    assert err.value.field == "model_refs.M_ii"


@pytest.mark.parametrize("text, exc", [
    ("<model_data type='dX_MF_ML1'/>", MalformedXML),
    ("<MLMOD><model_data type='x'>", MalformedXML),
    ("", MalformedXML),
    ("<MLMOD/>", MissingModelData),
    ("<MLMOD><model_data/></MLMOD>", MissingModelData),
    ("<MLMOD><model_data type='dX_MF_ML1'/><model_data type='dX_MF_ML1'/></MLMOD>", MalformedXML),
])
def test_xml_errors(text, exc):
    with pytest.raises(exc):
        parse_params_xml(text)


def test_full_document(tmp_path):
    write_models(tmp_path)
    (tmp_path / "run.xml").write_text(full_xml())
    run = load_run_config(tmp_path / "run.xml")
    assert run.sim == SimulationParams(1.0, 0.001, 10, 3)
    assert run.force.kind == "harmonic_trap" and run.force.stiffness == 2.0
    assert run.save_stride == 2 and run.trajectory == "out.csv"
    np.testing.assert_array_equal(run.initial_positions(), [0, 0, 0, 4, 0, 0])


def test_overrides(tmp_path):
    write_models(tmp_path)
    (tmp_path / "run.xml").write_text(full_xml())
    run = load_run_config(tmp_path / "run.xml", ["sim.dt=0.5", "sim.seed=9", "force.stiffness=4"])
    assert run.sim.dt == 0.5 and run.sim.seed == 9 and run.force.stiffness == 4.0
    with pytest.raises(ConfigurationError) as err:
        load_run_config(tmp_path / "run.xml", ["sim.dt"])
    assert err.value.field == "--set"


def test_seed_is_required(tmp_path):
    write_models(tmp_path)
    (tmp_path / "run.xml").write_text(full_xml(sim='<kBT value="1"/><dt value="0.1"/><n_steps value="3"/>'))
    with pytest.raises(ConfigurationError) as err:
        load_run_config(tmp_path / "run.xml")
    assert err.value.field == "sim.seed"
    assert load_run_config(tmp_path / "run.xml", ["sim.seed=4"]).sim.seed == 4


def test_initial_from_trajectory_file(tmp_path):
    write_models(tmp_path)
    save_trajectory(Trajectory([0, 1], [[0, 0, 0, 3, 0, 0], [1, 0, 0, 5, 0, 0]]), tmp_path / "start.csv")
    (tmp_path / "run.xml").write_text(full_xml(initial='<file value="start.csv"/>'))
    np.testing.assert_array_equal(load_run_config(tmp_path / "run.xml").initial_positions(), [1, 0, 0, 5, 0, 0])


@pytest.mark.parametrize("override, field", [
    ("sim.dt=-1", "sim.dt"),
    ("sim.n_steps=1.5", "sim.n_steps"),
    ("sim.kBT=hot", "sim.kBT"),
    ("sim.divergence_mode=exact", "sim.divergence_mode"),
    ("sim.gamma=1", "sim"),
    ("force.type=gravity", "force.type"),
    ("force.centers=0 0 0", "force.centers"),
    ("output.save_stride=0", "output.save_stride"),
    ("initial.positions=0 0", "initial.positions"),
    ("initial.file=missing.csv", "initial.file"),
    ("model_refs.M_ij=nope.json", "model_refs.M_ij"),
    ("mode=dX_MF_ML2", "mode"),
])
def test_validation_names_field(tmp_path, override, field):
    write_models(tmp_path)
    (tmp_path / "run.xml").write_text(full_xml())
    with pytest.raises(ConfigurationError) as err:
        load_run_config(tmp_path / "run.xml", [override])
    assert err.value.field is not None and field in err.value.field


def test_wrong_model_role(tmp_path):
    write_models(tmp_path, ("M_ij.json", "M_ii.json"))
    (tmp_path / "run.xml").write_text(full_xml())
    with pytest.raises(ConfigurationError) as err:
        load_run_config(tmp_path / "run.xml")
    assert err.value.field == "model_refs.M_ii"


def test_unreadable_parameter_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "absent.xml")


# -- property: round trip and unknown-element tolerance ----------------------------

reals = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
positive = st.floats(1e-6, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def run_configs(draw):
    n = draw(st.integers(1, 3))
    sim = SimulationParams(
        kBT=draw(st.floats(0, 10)), dt=draw(positive), n_steps=draw(st.integers(1, 10**6)),
        seed=draw(st.integers(0, 2**64 - 1)), fd_step=draw(st.none() | positive),
        divergence_mode=draw(st.sampled_from(["finite_difference", "analytic_zero"])),
    )
    kind = draw(st.sampled_from(["zero", "constant", "harmonic_trap", "pair_spring"]))
    vec = st.lists(reals, min_size=3 * n, max_size=3 * n)
    force = {
        "zero": lambda: ForceField(),
        "constant": lambda: ForceField("constant", forces=draw(vec)),
        "harmonic_trap": lambda: ForceField("harmonic_trap", stiffness=draw(positive), centers=draw(vec)),
        "pair_spring": lambda: ForceField("pair_spring", stiffness=draw(positive), rest_length=draw(positive),
                                          pairs=[(0, 1)]),
    }[kind]()
    initial = draw(st.sampled_from(["positions", "file"]))
    initial = {"positions": draw(vec)} if initial == "positions" else {"file": "start.csv"}
    return RunConfig("dX_MF_ML1", {"M_ii": "a.json", "M_ij": "sub/b.pt"}, sim, force, initial,
                     draw(st.sampled_from(["t.csv", "out/traj.csv"])), draw(st.integers(1, 100)))


@given(run_configs())
def test_xml_round_trip(run):
    again = parse_params_xml(run_config_to_xml(run))
    assert again.to_dict() == run.to_dict()
    assert again.warnings == []


@given(run_configs(), st.sampled_from(["<extra value='1'/>", "<notes>hello</notes>", "<sim_params2/>"]))
def test_unknown_elements_only_warn(run, junk):
    text = run_config_to_xml(run).replace("</MLMOD>", junk + "<force_scale value='2'/></MLMOD>")
    text = text.replace("<sim_params>", "<sim_params><gamma value='3'/>")
    again = parse_params_xml(text)
    assert again.to_dict() == run.to_dict()
    assert len(again.warnings) >= 3


# -- model files ----------------------------------------------------------------------

MODELS = [
    ConstantBlock(np.array([[1.0, 0.1, 0], [0.1, 2, 0], [0, 0, 3]])),
    OseenSelf(OseenParams(0.7, 1.3)),
    OseenPair(OseenParams(0.7, 1.3, r_min=0.1)),
    TabulatedPairModel([1.0, 2.5, 4.0], [0.1, 0.05, 1 / 3], [0.2, np.pi, 0.0]),
    KernelMobilityModel("pair", [[0.1, 0.2, 0.3], [1, 2, 3]], np.arange(12.0).reshape(2, 6) / 7, 0.9),
    KernelMobilityModel("self", [[0, 0, 0]], [[1, 0, 1, 0, 0, 1]], 1.0, True),
]


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.kind)
def test_model_file_round_trip(tmp_path, model):
    save_model_file(model, tmp_path / "m.json")
    again = load_model_file(tmp_path / "m.json")
    assert type(again) is type(model)
    assert model_to_dict(again) == model_to_dict(model)
    for r in ([0.3, 2.0, -1.0], [4.0, 0, 0]):
        np.testing.assert_array_equal(again.block(np.array(r)), model.block(np.array(r)))


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False), min_size=6, max_size=6),
       st.floats(1e-3, 1e3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_kernel_round_trip_is_exact(weights, bandwidth, center):
    model = KernelMobilityModel("pair", [center], [weights], bandwidth)
    again = model_from_dict(json.loads(json.dumps(model_to_dict(model))))
    assert np.array_equal(again.weights, model.weights) and again.bandwidth == model.bandwidth
    assert np.array_equal(again.centers, model.centers)


def test_minimal_oseen_document():
    m = model_from_dict({"schema_version": 1, "kind": "oseen_self", "eta": 1.0, "a": 1.0, "r_min": 2.0})
    assert isinstance(m, OseenSelf) and m.params.r_min == 2.0


@pytest.mark.parametrize("doc, exc, field", [
    ({"schema_version": 2, "kind": "oseen_self", "eta": 1, "a": 1}, SchemaVersionUnsupported, "schema_version"),
    ({"kind": "oseen_self", "eta": 1, "a": 1}, SchemaVersionUnsupported, "schema_version"),
    ({"schema_version": 1, "kind": "torch", "eta": 1}, InvalidModelPayload, "kind"),
    ({"schema_version": 1, "kind": "oseen_pair", "eta": "1", "a": 1}, InvalidModelPayload, "eta"),
    ({"schema_version": 1, "kind": "oseen_pair", "eta": -1, "a": 1}, InvalidModelPayload, "eta"),
    ({"schema_version": 1, "kind": "constant", "block": [1, 2, 3]}, InvalidModelPayload, "block"),
    ({"schema_version": 1, "kind": "tabulated_pair", "radii": [1, 2], "alpha": [1, None], "beta": [0, 0]},
     InvalidModelPayload, "alpha[1]"),
    ({"schema_version": 1, "kind": "kernel_pair", "bandwidth": 1, "centers": [[0, 0, 0], [1, 1, 1]],
      "weights": [[0] * 6, [0] * 5]}, InvalidModelPayload, "weights[1]"),
    ({"schema_version": 1, "kind": "kernel_pair", "bandwidth": 1, "centers": [[0, 0, 0]],
      "weights": [[0] * 6], "positive_diagonal": "yes"}, InvalidModelPayload, "positive_diagonal"),
    ([1, 2], InvalidModelPayload, "$"),
])
def test_bad_model_payloads(tmp_path, doc, exc, field):
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(exc) as err:
        load_model_file(tmp_path / "m.json")
    assert err.value.field == field


def test_model_file_not_json(tmp_path):
    (tmp_path / "m.pt").write_bytes(b"PK\x03\x04 torch archive")
    with pytest.raises(InvalidModelPayload):
        load_model_file(tmp_path / "m.pt")


# -- trajectories ------------------------------------------------------------------

def test_empty_trajectory_file(tmp_path):
    (tmp_path / "t.csv").write_text("")
    with pytest.raises(MalformedRow) as err:
        load_trajectory(tmp_path / "t.csv")
    assert err.value.line == 1


def test_hand_built_trajectory(tmp_path):
    (tmp_path / "t.csv").write_text("t,x_0,y_0,z_0\n0,0,0,0\n0.5,1,0,0\n1.0,1,1,0\n")
    tr = load_trajectory(tmp_path / "t.csv")
    np.testing.assert_array_equal(tr.times, [0, 0.5, 1.0])
    assert tr.states.shape == (3, 3) and tr.forces is None and tr.meta == {}


def test_single_state_round_trip(tmp_path):
    tr = Trajectory([0.0], [[0.1, 1 / 3, -2e-300]])
    save_trajectory(tr, tmp_path / "t.csv")
    again = load_trajectory(tmp_path / "t.csv")
    assert np.array_equal(again.times, tr.times) and np.array_equal(again.states, tr.states)


@given(st.integers(1, 3), st.integers(1, 6), st.booleans(), st.integers(0, 2**32 - 1))
def test_trajectory_round_trip(n, k, forces, seed):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(seed)
    dt = rng.uniform(1e-4, 1)
    tr = Trajectory(np.arange(k) * dt, rng.normal(size=(k, 3 * n)) * 10.0 ** rng.integers(-5, 5),
                    rng.normal(size=(k, 3 * n)) if forces else None, {"repairs": 2})
    with tempfile.TemporaryDirectory() as d:
        save_trajectory(tr, Path(d) / "t.csv")
        again = load_trajectory(Path(d) / "t.csv")
    assert np.array_equal(again.times, tr.times) and np.array_equal(again.states, tr.states)
    assert (again.forces is None) == (not forces)
    if forces:
        assert np.array_equal(again.forces, tr.forces)
    assert again.meta["repairs"] == 2


@pytest.mark.parametrize("text, line", [
    ("x,y,z\n", 1),
    ("t,x_0,y_0\n", 1),
    ("t,x_0,y_0,z_0\n", 2),
    ("t,x_0,y_0,z_0\n0,0,0,0\n1,0,0\n", 3),
    ("t,x_0,y_0,z_0\n0,0,0,0\n1,0,zero,0\n", 3),
    ("t,x_0,y_0,z_0\n0,0,0,0\n1,0,nan,0\n", 3),
    ("t,x_0,y_0,z_0\n0,0,0,0\n0,1,0,0\n", 2),
])
def test_malformed_rows(tmp_path, text, line):
    (tmp_path / "t.csv").write_text(text)
    with pytest.raises(MalformedRow) as err:
        load_trajectory(tmp_path / "t.csv")
    assert err.value.line == line


def test_non_uniform_spacing(tmp_path):
    (tmp_path / "t.csv").write_text("t,x_0,y_0,z_0\n0,0,0,0\n1,0,0,0\n3,0,0,0\n")
    with pytest.raises(NonUniformSpacing):
        load_trajectory(tmp_path / "t.csv")
