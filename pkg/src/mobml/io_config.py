"""Parameter files, model files and trajectory files.

Parameter file (XML)::

    <MLMOD>
      <model_data type="dX_MF_ML1">
        <M_ii_filename value="M_ii.json"/>
        <M_ij_filename value="M_ij.json"/>
      </model_data>
      <sim_params>
        <kBT value="1.0"/> <dt value="0.001"/> <n_steps value="1000"/> <seed value="42"/>
        <fd_step value="auto"/> <divergence_mode value="finite_difference"/>
      </sim_params>
      <force type="harmonic_trap">
        <stiffness value="10"/> <centers value="0 0 0 4 0 0"/>
      </force>
      <initial> <positions value="0 0 0 4 0 0"/> </initial>
      <output> <trajectory value="traj.csv"/> <save_stride value="1"/> </output>
    </MLMOD>

Only ``model_data`` is required at parse time; the other sections are checked
by :meth:`RunConfig.validate`. ``sim_params`` must name a ``seed`` (there is
no clock-derived default). Relative paths resolve against the directory of
the parameter file.

Model files are JSON with ``schema_version`` 1 and a ``kind`` tag; trajectories
are CSV with a ``t, x_0, y_0, z_0, ...`` header (optional ``fx_0, ...`` force
columns) written at 17 significant digits, plus a JSON sidecar.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DIVERGENCE_MODES, ForceField, SimulationParams, Trajectory
from .errors import (
    ConfigurationError,
    InvalidModelPayload,
    MalformedRow,
    MalformedXML,
    MissingModelData,
    NonUniformSpacing,
    SchemaVersionUnsupported,
)
from .mobility import (
    ConstantBlock,
    KernelMobilityModel,
    OseenPair,
    OseenParams,
    OseenSelf,
    PairwiseMobilityModel,
    ParticleConfiguration,
    TabulatedPairModel,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = {"dX_MF_ML1": ("M_ii", "M_ij")}
ROLE_KINDS = {
    "M_ii": ("constant", "oseen_self", "kernel_self"),
    "M_ij": ("constant", "oseen_pair", "tabulated_pair", "kernel_pair"),
}
SIM_KEYS = ("kBT", "dt", "n_steps", "seed", "fd_step", "divergence_mode")
FORCE_KEYS = ("forces", "stiffness", "centers", "rest_length", "pairs")


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def _real(d, key, where=""):
    if key not in d:
        raise InvalidModelPayload("missing field", where + key)
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise InvalidModelPayload("expected a finite number", where + key)
    return float(v)


def _reals(d, key, length=None):
    if key not in d or not isinstance(d[key], list):
        raise InvalidModelPayload("expected a list", key)
    out = []
    for k, v in enumerate(d[key]):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise InvalidModelPayload("expected a finite number", f"{key}[{k}]")
        out.append(float(v))
    if length is not None and len(out) != length:
        raise InvalidModelPayload(f"expected {length} values, got {len(out)}", key)
    return out


def _rows(d, key, width):
    if key not in d or not isinstance(d[key], list) or not d[key]:
        raise InvalidModelPayload("expected a nonempty list of rows", key)
    rows = []
    for k, row in enumerate(d[key]):
        name = f"{key}[{k}]"
        if not isinstance(row, list) or len(row) != width:
            raise InvalidModelPayload(f"expected {width} values", name)
        rows.append(_reals({name: row}, name))
    return rows


def model_from_dict(d: dict):
    """Build a block source from a decoded model document."""
    if not isinstance(d, dict):
        raise InvalidModelPayload("model document must be a JSON object", "$")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionUnsupported(f"unsupported schema_version {d.get('schema_version')!r}",
                                       "schema_version")
    kind = d.get("kind")
    try:
        if kind == "constant":
            return ConstantBlock(np.array(_reals(d, "block", 9)))
        if kind in ("oseen_self", "oseen_pair"):
            r_min = _real(d, "r_min") if "r_min" in d else None
            p = OseenParams(_real(d, "eta"), _real(d, "a"), r_min)
            return OseenSelf(p) if kind == "oseen_self" else OseenPair(p)
        if kind == "tabulated_pair":
            return TabulatedPairModel(_reals(d, "radii"), _reals(d, "alpha"), _reals(d, "beta"))
        if kind in ("kernel_self", "kernel_pair"):
            centers = _rows(d, "centers", 3)
            weights = _rows(d, "weights", 6)
            pd = d.get("positive_diagonal", False)
            if not isinstance(pd, bool):
                raise InvalidModelPayload("expected true/false", "positive_diagonal")
            return KernelMobilityModel(kind.split("_")[1], centers, weights,
                                       _real(d, "bandwidth"), pd)
    except InvalidModelPayload:
        raise
    except ConfigurationError as exc:
        err = InvalidModelPayload(str(exc))
        err.field = exc.field
        raise err from exc
    raise InvalidModelPayload(f"unknown kind {kind!r}", "kind")


def model_to_dict(model) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "kind": model.kind}
    if isinstance(model, ConstantBlock):
        d["block"] = model.matrix.ravel().tolist()
    elif isinstance(model, (OseenSelf, OseenPair)):
        d.update(eta=float(model.params.eta), a=float(model.params.a), r_min=float(model.params.r_min))
    elif isinstance(model, TabulatedPairModel):
        d.update(radii=model.radii.tolist(), alpha=model.alpha.tolist(), beta=model.beta.tolist())
    elif isinstance(model, KernelMobilityModel):
        d.update(bandwidth=model.bandwidth, centers=model.centers.tolist(),
                 weights=model.weights.tolist())
        if model.positive_diagonal:
            d["positive_diagonal"] = True
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return d


def load_model_file(path):
    """Load a JSON model file. ``.pt`` names are accepted; content must be JSON."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read model file ({exc.strerror})", str(path)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidModelPayload(f"{path}: not valid JSON ({exc.msg})") from exc
    try:
        return model_from_dict(doc)
    except ConfigurationError as exc:
        err = type(exc)(f"{path}: {exc}")
        err.field = exc.field
        raise err from exc


def save_model_file(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _fmt(v):
    return format(float(v), ".17g")


def trajectory_header(n: int, forces: bool) -> list[str]:
    cols = ["t"] + [f"{c}_{i}" for i in range(n) for c in "xyz"]
    if forces:
        cols += [f"f{c}_{i}" for i in range(n) for c in "xyz"]
    return cols


def save_trajectory(traj: Trajectory, path, sidecar: bool = True) -> None:
    """Write CSV (17 significant digits) and, optionally, ``<stem>.json`` metadata."""
    path = Path(path)
    forces = traj.forces is not None
    lines = [",".join(trajectory_header(traj.n, forces))]
    for k in range(traj.times.size):
        row = [traj.times[k], *traj.states[k]]
        if forces:
            row += list(traj.forces[k])
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    if sidecar:
        doc = {"run_config": traj.meta.get("run_config"), "repairs": int(traj.meta.get("repairs", 0))}
        path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read trajectory ({exc.strerror})", str(path)) from exc
    if not lines or not lines[0].strip():
        raise MalformedRow("missing header", 1)
    header = [c.strip() for c in lines[0].split(",")]
    width = len(header)
    if header[0] != "t" or (width - 1) % 3:
        raise MalformedRow("header must be t followed by coordinate columns", 1)
    has_forces = any(c.startswith("f") for c in header[1:])
    D = (width - 1) // 2 if has_forces else width - 1
    if D == 0 or D % 3 or header != trajectory_header(D // 3, has_forces):
        raise MalformedRow("unrecognized column layout", 1)
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise MalformedRow(f"expected {width} values, got {len(parts)}", ln)
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise MalformedRow(str(exc), ln) from exc
        if not all(math.isfinite(v) for v in vals):
            raise MalformedRow("non-finite value", ln)
        rows.append(vals)
    if not rows:
        raise MalformedRow("no data rows", 2)
    a = np.array(rows)
    times = a[:, 0]
    if times.size > 2:
        dts = np.diff(times)
        if np.any(np.abs(dts - dts[0]) > 1e-6 * abs(dts[0])):
            k = int(np.argmax(np.abs(dts - dts[0]) > 1e-6 * abs(dts[0])))
            raise NonUniformSpacing(f"spacing changes at line {k + 3}", str(path))
    meta = {}
    side = path.with_suffix(".json")
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError:
            log.warning("ignoring unreadable sidecar %s", side)
    try:
        return Trajectory(times, a[:, 1:1 + D], a[:, 1 + D:] if has_forces else None, meta)
    except ConfigurationError as exc:
        raise MalformedRow(str(exc), 2) from exc


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _vector(v, name):
    if isinstance(v, str):
        v = v.replace(",", " ").split()
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError) as exc:
        raise ConfigurationError("expected a list of numbers", name) from exc


def _number(v, name, kind=float):
    try:
        if kind is int:
            f = float(v)
            if f != int(f):
                raise ValueError
            return int(f)
        return float(v)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"expected {'an integer' if kind is int else 'a number'}, got {v!r}",
                                 name) from exc


def _pairs(v):
    if isinstance(v, str):
        flat = [int(_number(x, "force.pairs", int)) for x in v.replace(",", " ").split()]
        if len(flat) % 2:
            raise ConfigurationError("need an even number of indices", "force.pairs")
        return [flat[i:i + 2] for i in range(0, len(flat), 2)]
    return [[_number(i, "force.pairs", int), _number(j, "force.pairs", int)] for i, j in v]


def apply_overrides(d: dict, overrides) -> dict:
    """Copy of the nested dict ``d`` with ``section.key=value`` strings applied."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value", "--set")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigurationError("cannot descend into a value", key)
        if parts[0] == "initial" and parts[-1] in ("file", "positions"):
            node.pop("positions" if parts[-1] == "file" else "file", None)
        node[parts[-1]] = value.strip()
    return d


@dataclass(eq=False)
class RunConfig:
    """Experiment description: mode, model files, integrator, forces, start, output."""

    mode: str
    model_refs: dict = field(default_factory=dict)
    sim: SimulationParams | None = None
    force: ForceField = field(default_factory=ForceField)
    initial: dict = field(default_factory=dict)
    trajectory: str = "trajectory.csv"
    save_stride: int = 1
    base_dir: str = "."
    warnings: list = field(default_factory=list)

    # -- dict form (used for overrides, sidecars and round trips) ---------

    def to_dict(self) -> dict:
        f = self.force
        force = {"type": f.kind}
        if f.kind == "constant":
            force["forces"] = f.forces.tolist()
        if f.kind == "harmonic_trap":
            force.update(stiffness=f.stiffness, centers=f.centers.tolist())
        if f.kind == "pair_spring":
            force.update(stiffness=f.stiffness, rest_length=f.rest_length,
                         pairs=[list(p) for p in f.pairs])
        sim = None
        if self.sim is not None:
            sim = {k: getattr(self.sim, k) for k in SIM_KEYS}
        return {
            "mode": self.mode,
            "model_refs": dict(self.model_refs),
            "sim": sim,
            "force": force,
            "initial": copy.deepcopy(self.initial),
            "output": {"trajectory": self.trajectory, "save_stride": self.save_stride},
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=".", warnings=None) -> "RunConfig":
        """Build from a nested dict whose leaves may still be strings (XML, overrides)."""
        sim = None
        if d.get("sim") is not None:
            s = d["sim"]
            unknown = set(s) - set(SIM_KEYS)
            if unknown:
                raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", "sim")
            missing = [k for k in ("kBT", "dt", "n_steps", "seed") if s.get(k) is None]
            if missing:
                raise ConfigurationError("missing value", f"sim.{missing[0]}")
            fd = s.get("fd_step")
            fd = None if fd in (None, "", "auto") else _number(fd, "sim.fd_step")
            sim = SimulationParams(
                kBT=_number(s["kBT"], "sim.kBT"),
                dt=_number(s["dt"], "sim.dt"),
                n_steps=_number(s["n_steps"], "sim.n_steps", int),
                seed=_number(s["seed"], "sim.seed", int),
                fd_step=fd,
                divergence_mode=str(s.get("divergence_mode") or DIVERGENCE_MODES[0]),
            )
        fdict = dict(d.get("force") or {"type": "zero"})
        kind = str(fdict.pop("type", "zero"))
        unknown = set(fdict) - set(FORCE_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", "force")
        kw = {}
        for k, v in fdict.items():
            if k in ("forces", "centers"):
                kw[k] = _vector(v, f"force.{k}")
            elif k == "pairs":
                kw[k] = _pairs(v)
            else:
                kw[k] = _number(v, f"force.{k}")
        force = ForceField(kind, **kw)
        initial = dict(d.get("initial") or {})
        if "positions" in initial:
            initial["positions"] = _vector(initial["positions"], "initial.positions")
        unknown = set(initial) - {"positions", "file"}
        if unknown:
            raise ConfigurationError(f"unknown key(s) {sorted(unknown)}", "initial")
        out = d.get("output") or {}
        return cls(
            mode=str(d.get("mode", "")),
            model_refs={str(k): str(v) for k, v in (d.get("model_refs") or {}).items()},
            sim=sim,
            force=force,
            initial=initial,
            trajectory=str(out.get("trajectory", "trajectory.csv")),
            save_stride=_number(out.get("save_stride", 1), "output.save_stride", int),
            base_dir=str(base_dir),
            warnings=list(warnings or []),
        )

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply ``section.key=value`` strings (e.g. ``sim.dt=0.001``)."""
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides), self.base_dir, self.warnings)

    # -- resolution and validation -----------------------------------------

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def build_model(self) -> PairwiseMobilityModel:
        if self.mode not in MODES:
            raise ConfigurationError(f"unrecognized mode {self.mode!r}", "mode")
        sources = {}
        for role in MODES[self.mode]:
            if role not in self.model_refs:
                raise ConfigurationError("required model file missing", f"model_refs.{role}")
            path = self.resolve(self.model_refs[role])
            if not path.is_file():
                raise ConfigurationError(f"model file {path} not found", f"model_refs.{role}")
            src = load_model_file(path)
            if src.kind not in ROLE_KINDS[role]:
                raise ConfigurationError(f"model kind {src.kind!r} cannot serve as {role}",
                                         f"model_refs.{role}")
            sources[role] = src
        return PairwiseMobilityModel(sources["M_ii"], sources["M_ij"])

    def initial_positions(self) -> np.ndarray:
        if "positions" in self.initial:
            return ParticleConfiguration(self.initial["positions"]).positions
        if "file" in self.initial:
            return load_trajectory(self.resolve(self.initial["file"])).states[-1].copy()
        raise ConfigurationError("no initial configuration given", "initial")

    def validate(self) -> "RunConfig":
        """Check every cross-reference; raises :class:`ConfigurationError` naming the field."""
        self.build_model()
        if self.sim is None:
            raise ConfigurationError("missing <sim_params>", "sim")
        if self.save_stride < 1:
            raise ConfigurationError("must be >= 1", "output.save_stride")
        try:
            x = self.initial_positions()
        except ConfigurationError as exc:
            if exc.field and exc.field.startswith("initial"):
                raise
            where = "initial.positions" if "positions" in self.initial else "initial.file"
            raise ConfigurationError(str(exc), where) from exc
        self.force.evaluate(x)
        return self


# ---------------------------------------------------------------------------
# XML
# ---------------------------------------------------------------------------

def _value_children(elem, section, warn):
    out = {}
    for child in elem:
        if "value" not in child.attrib:
            warn(f"<{section}/{child.tag}> has no value attribute; ignored")
            continue
        out[child.tag] = child.attrib["value"]
    return out


def parse_params_xml(text: str, base_dir=".") -> RunConfig:
    """Parse a parameter document. Unknown elements produce warnings only."""
    d, warnings = params_xml_to_dict(text)
    return RunConfig.from_dict(d, base_dir, warnings)


def params_xml_to_dict(text: str):
    """Raw nested dict (string leaves) and warnings from a parameter document."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXML(f"not well-formed XML ({exc})") from exc
    if root.tag != "MLMOD":
        raise MalformedXML(f"root element is <{root.tag}>, expected <MLMOD>")
    warnings = []

    def warn(msg):
        warnings.append(msg)
        log.warning(msg)

    blocks = root.findall("model_data")
    if not blocks:
        raise MissingModelData("no <model_data> element", "model_data")
    if len(blocks) > 1:
        raise MalformedXML(f"{len(blocks)} <model_data> elements; one model group per file is supported")
    md = blocks[0]
    if "type" not in md.attrib:
        raise MissingModelData("<model_data> has no type attribute", "model_data.type")
    d = {"mode": md.attrib["type"], "model_refs": {}}
    for child in md:
        if not child.tag.endswith("_filename") or "value" not in child.attrib:
            warn(f"unrecognized element <model_data/{child.tag}> ignored")
            continue
        d["model_refs"][child.tag[: -len("_filename")]] = child.attrib["value"]
    known = {"model_data"}
    for elem in root:
        if elem.tag == "sim_params":
            d["sim"] = {k: v for k, v in _value_children(elem, "sim_params", warn).items()}
            for k in list(d["sim"]):
                if k not in SIM_KEYS:
                    warn(f"unrecognized element <sim_params/{k}> ignored")
                    del d["sim"][k]
        elif elem.tag == "force":
            f = {"type": elem.attrib.get("type", "zero")}
            for k, v in _value_children(elem, "force", warn).items():
                if k in FORCE_KEYS:
                    f[k] = v
                else:
                    warn(f"unrecognized element <force/{k}> ignored")
            d["force"] = f
        elif elem.tag == "initial":
            d["initial"] = {}
            for k, v in _value_children(elem, "initial", warn).items():
                if k in ("positions", "file"):
                    d["initial"][k] = v
                else:
                    warn(f"unrecognized element <initial/{k}> ignored")
        elif elem.tag == "output":
            d["output"] = {}
            for k, v in _value_children(elem, "output", warn).items():
                if k in ("trajectory", "save_stride"):
                    d["output"][k] = v
                else:
                    warn(f"unrecognized element <output/{k}> ignored")
        elif elem.tag not in known:
            warn(f"unrecognized element <{elem.tag}> ignored")
    return d, warnings


def _xml_value(v):
    if isinstance(v, (list, tuple)):
        flat = []
        for x in v:
            flat += list(x) if isinstance(x, (list, tuple)) else [x]
        return " ".join(_xml_value(x) for x in flat)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_config_to_xml(run: RunConfig) -> str:
    d = run.to_dict()
    root = ET.Element("MLMOD")
    md = ET.SubElement(root, "model_data", type=d["mode"])
    for role, p in d["model_refs"].items():
        ET.SubElement(md, f"{role}_filename", value=p)
    if d["sim"] is not None:
        sp = ET.SubElement(root, "sim_params")
        for k in SIM_KEYS:
            v = d["sim"][k]
            ET.SubElement(sp, k, value="auto" if v is None else _xml_value(v))
    force = dict(d["force"])
    fe = ET.SubElement(root, "force", type=force.pop("type"))
    for k, v in force.items():
        ET.SubElement(fe, k, value=_xml_value(v))
    if d["initial"]:
        ie = ET.SubElement(root, "initial")
        for k, v in d["initial"].items():
            ET.SubElement(ie, k, value=_xml_value(v))
    oe = ET.SubElement(root, "output")
    for k, v in d["output"].items():
        ET.SubElement(oe, k, value=_xml_value(v))
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def load_run_config(path, overrides=(), validate=True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read parameter file ({exc.strerror})", str(path)) from exc
    d, warnings = params_xml_to_dict(text)
    run = RunConfig.from_dict(apply_overrides(d, overrides), os.fspath(path.parent), warnings)
    return run.validate() if validate else run
