"""File formats for panels, specs, parameters, and run manifests.

Panels travel as a long CSV (columns ``subject_id,t,channel,value``; an
empty value cell is a missing observation) with wide companion files next
to it: ``<prefix>_treatment.csv`` for the treatment and any extra
indicator streams, ``<prefix>_covariates.csv`` for covariate rows. Specs,
parameter sets, fit documents, and configurations are JSON. Floats are
written with 17 significant digits, so a write-read round trip reproduces
every finite value bit for bit.

Every command-line run is described by a manifest recording the command,
a hash of its configuration, input digests, library versions, wall time,
and output paths.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import platform
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy

from .errors import FileFormatError, UnsupportedValue
from .estimator import FitResult
from .model import (
    ChannelSpec,
    GroupSpec,
    MrssSpec,
    ParameterSet,
    Scenario,
    StateSpec,
    SubjectData,
)
from .simbench import SimConfig

__all__ = [
    "RunManifest", "write_panels", "read_panels", "data_prefix",
    "spec_to_dict", "spec_from_dict", "psi_to_dict", "psi_from_dict",
    "fit_to_dict", "fit_from_dict", "sim_config_from_dict",
    "read_scenarios", "read_json", "write_json", "write_manifest",
]


def _fmt(v: float) -> str:
    """One CSV cell: empty for missing, full precision otherwise."""
    return "" if np.isnan(v) else format(float(v), ".17g")


def _parse_float(text: str, where: str) -> float:
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise FileFormatError(f"{where}: could not parse {text!r} "
                              "as a number") from None


def _parse_time(text: str, where: str) -> int:
    try:
        t = int(text)
    except ValueError:
        raise FileFormatError(f"{where}: could not parse {text!r} "
                              "as a grid time") from None
    if t < 1:
        raise FileFormatError(f"{where}: grid times start at 1, got {t}")
    return t


def _check_header(got, expected, path):
    if got is None or [h.strip() for h in got] != list(expected):
        raise FileFormatError(
            f"{path}: header must be {','.join(expected)}, "
            f"got {','.join(got) if got else 'an empty file'}")


def data_prefix(data_path) -> Path:
    """The companion-file prefix for a long data CSV.

    ``runs/sim_data.csv`` has prefix ``runs/sim``, so its companions are
    ``runs/sim_treatment.csv`` and ``runs/sim_covariates.csv``. A file
    without the ``_data`` suffix uses its plain stem.
    """
    path = Path(data_path)
    stem = path.name
    if stem.endswith(".csv"):
        stem = stem[:-4]
    if stem.endswith("_data"):
        stem = stem[:-5]
    return path.parent / stem


# ----------------------------------------------------------------------
# Panels
# ----------------------------------------------------------------------

def write_panels(prefix, subjects, *, channel_names, covariate_names=(),
                 stream_names=()) -> list:
    """Write panels as a long data CSV plus wide companions.

    Returns the list of paths written. Companion files are only created
    when the subjects carry the corresponding arrays. Indicator streams
    must be single-column (one shared column across modalities);
    per-modality streams have no wide representation here.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []

    data_path = prefix.with_name(prefix.name + "_data.csv")
    with open(data_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "t", "channel", "value"])
        for s in subjects:
            for i, t in enumerate(s.times):
                for j, name in enumerate(channel_names):
                    w.writerow([s.subject_id, int(t), name,
                                _fmt(s.z[i, j])])
    written.append(data_path)

    has_treatment = any(s.treatment is not None for s in subjects)
    if has_treatment or stream_names:
        tr_path = prefix.with_name(prefix.name + "_treatment.csv")
        cols = (["treatment"] if has_treatment else []) + list(stream_names)
        with open(tr_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "t"] + cols)
            for s in subjects:
                streams = []
                if has_treatment:
                    streams.append(_stream_column(s.treatment, "treatment",
                                                  s.subject_id))
                for name in stream_names:
                    streams.append(_stream_column(
                        s.indicators.get(name), name, s.subject_id))
                for i, t in enumerate(s.times):
                    w.writerow([s.subject_id, int(t)]
                               + [format(col[i], ".17g") for col in streams])
        written.append(tr_path)

    if covariate_names:
        cov_path = prefix.with_name(prefix.name + "_covariates.csv")
        with open(cov_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "t"] + list(covariate_names))
            for s in subjects:
                if s.x is None:
                    raise UnsupportedValue(
                        f"subject {s.subject_id!r} has no covariates to "
                        "write")
                x = s.x if s.x.ndim == 2 else np.tile(s.x,
                                                      (s.times.size, 1))
                for i, t in enumerate(s.times):
                    w.writerow([s.subject_id, int(t)]
                               + [format(v, ".17g") for v in x[i]])
        written.append(cov_path)
    return written


def _stream_column(arr, name, subject_id):
    if arr is None:
        raise UnsupportedValue(
            f"subject {subject_id!r} lacks indicator stream {name!r}")
    if arr.shape[1] != 1:
        raise UnsupportedValue(
            f"stream {name!r} of subject {subject_id!r} has "
            f"{arr.shape[1]} modality columns; the wide companion holds "
            "one shared column")
    return arr[:, 0]


def read_panels(data_path, *, channel_names, covariate_names=(),
                stream_names=(), group="all") -> tuple:
    """Read a long data CSV (and companions found next to it) into panels.

    Missing (subject, time, channel) rows and empty value cells both come
    back as NaN. The treatment companion is required whenever stream
    names are declared or the file exists; covariates likewise. Malformed
    cells raise FileFormatError naming the row and column.
    """
    data_path = Path(data_path)
    chan_pos = {name: j for j, name in enumerate(channel_names)}
    cells: dict[str, dict[int, np.ndarray]] = {}
    order: list[str] = []

    with open(data_path, newline="") as fh:
        rd = csv.reader(fh)
        _check_header(next(rd, None), ("subject_id", "t", "channel",
                                       "value"), data_path)
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FileFormatError(
                    f"{data_path} row {lineno}: expected 4 columns, "
                    f"got {len(row)}")
            sid, t_text, chan, val = row
            where = f"{data_path} row {lineno}"
            if chan not in chan_pos:
                raise FileFormatError(
                    f"{where}, column 'channel': unknown channel "
                    f"{chan!r}; declared: {list(channel_names)}")
            t = _parse_time(t_text, f"{where}, column 't'")
            v = _parse_float(val, f"{where}, column 'value'")
            if sid not in cells:
                cells[sid] = {}
                order.append(sid)
            rows = cells[sid]
            if t not in rows:
                rows[t] = np.full(len(channel_names), np.nan)
            elif not np.isnan(rows[t][chan_pos[chan]]):
                raise FileFormatError(
                    f"{where}: duplicate entry for subject {sid!r}, "
                    f"t={t}, channel {chan!r}")
            rows[t][chan_pos[chan]] = v
    if not order:
        raise FileFormatError(f"{data_path}: no data rows")

    prefix = data_prefix(data_path)
    tr_path = prefix.with_name(prefix.name + "_treatment.csv")
    cov_path = prefix.with_name(prefix.name + "_covariates.csv")
    streams = _read_wide(tr_path, ["treatment"] + list(stream_names),
                         required=bool(stream_names)) \
        if tr_path.exists() or stream_names else None
    covs = _read_wide(cov_path, list(covariate_names),
                      required=bool(covariate_names)) \
        if cov_path.exists() or covariate_names else None

    subjects = []
    for sid in order:
        times = np.array(sorted(cells[sid]), dtype=int)
        z = np.vstack([cells[sid][t] for t in times])
        treatment = None
        indicators = {}
        if streams is not None:
            wide = _align_wide(streams, sid, times, tr_path)
            treatment = wide[:, 0]
            indicators = {name: wide[:, 1 + k]
                          for k, name in enumerate(stream_names)}
        x = None
        if covs is not None:
            x = _align_wide(covs, sid, times, cov_path)
        subjects.append(SubjectData(sid, times, z, treatment=treatment,
                                    indicators=indicators, x=x,
                                    group=group))
    return tuple(subjects)


def _read_wide(path, value_cols, *, required):
    path = Path(path)
    if not path.exists():
        if required:
            raise FileFormatError(f"missing companion file {path}")
        return None
    table: dict[str, dict[int, np.ndarray]] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        _check_header(next(rd, None),
                      ["subject_id", "t"] + list(value_cols), path)
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 2 + len(value_cols):
                raise FileFormatError(
                    f"{path} row {lineno}: expected {2 + len(value_cols)} "
                    f"columns, got {len(row)}")
            sid = row[0]
            t = _parse_time(row[1], f"{path} row {lineno}, column 't'")
            vals = np.array([
                _parse_float(row[2 + k],
                             f"{path} row {lineno}, column {name!r}")
                for k, name in enumerate(value_cols)])
            table.setdefault(sid, {})[t] = vals
    return table


def _align_wide(table, sid, times, path):
    if sid not in table:
        raise FileFormatError(f"{path}: no rows for subject {sid!r}")
    rows = table[sid]
    out = []
    for t in times:
        if int(t) not in rows:
            raise FileFormatError(
                f"{path}: subject {sid!r} has no row at t={int(t)}")
        out.append(rows[int(t)])
    return np.vstack(out)


# ----------------------------------------------------------------------
# Specs, parameters, fit documents
# ----------------------------------------------------------------------

def _reject_unknown(d, allowed, what):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise FileFormatError(f"{what}: unknown keys {extra}; "
                              f"allowed: {sorted(allowed)}")


def spec_to_dict(spec: MrssSpec) -> dict:
    return {
        "channels": [{"name": c.name, "family": c.family, "kind": c.kind,
                      "modality": c.modality} for c in spec.channels],
        "states": [{"name": s.name, "kind": s.kind, "gate": s.gate}
                   for s in spec.states],
        "covariates": list(spec.covariates),
        "indicators": list(spec.indicators),
        "groups": [{"name": g.name,
                    "states": None if g.states is None else list(g.states),
                    "channels": None if g.channels is None
                    else list(g.channels)} for g in spec.groups],
        "loading_free": spec.loading_free.tolist(),
        "loading_fixed": spec.loading_fixed.tolist(),
        "q_mask": spec.q_mask.tolist(),
        "beta_free": spec.beta_free.tolist(),
    }


def spec_from_dict(d: dict) -> MrssSpec:
    _reject_unknown(d, ("channels", "states", "covariates", "indicators",
                        "groups", "loading_free", "loading_fixed",
                        "q_mask", "beta_free"), "model spec")
    for key in ("channels", "states"):
        if key not in d or not d[key]:
            raise FileFormatError(f"model spec: missing {key!r}")
    channels = []
    for i, c in enumerate(d["channels"]):
        _reject_unknown(c, ("name", "family", "kind", "modality"),
                        f"channel {i}")
        channels.append(ChannelSpec(**c))
    states = []
    for i, s in enumerate(d["states"]):
        _reject_unknown(s, ("name", "kind", "gate"), f"state {i}")
        states.append(StateSpec(**s))
    groups = []
    for i, g in enumerate(d.get("groups") or [{"name": "all"}]):
        _reject_unknown(g, ("name", "states", "channels"), f"group {i}")
        groups.append(GroupSpec(
            name=g["name"],
            states=None if g.get("states") is None else tuple(g["states"]),
            channels=None if g.get("channels") is None
            else tuple(g["channels"])))

    def arr(key, dtype):
        v = d.get(key)
        return None if v is None else np.asarray(v, dtype=dtype)

    return MrssSpec(
        channels=tuple(channels), states=tuple(states),
        covariates=tuple(d.get("covariates") or ()),
        indicators=tuple(d.get("indicators") or ()),
        groups=tuple(groups),
        loading_free=arr("loading_free", bool),
        loading_fixed=arr("loading_fixed", float),
        q_mask=arr("q_mask", bool),
        beta_free=arr("beta_free", bool),
    )


def psi_to_dict(psi: ParameterSet) -> dict:
    return {"lam": psi.lam.tolist(), "beta": psi.beta.tolist(),
            "t_diag": psi.t_diag.tolist(), "c": psi.c.tolist(),
            "Q": psi.Q.tolist(), "h_diag": psi.h_diag.tolist()}


def psi_from_dict(d: dict, spec: MrssSpec) -> ParameterSet:
    _reject_unknown(d, ("lam", "beta", "t_diag", "c", "Q", "h_diag"),
                    "parameter set")
    kw = {k: np.asarray(v, dtype=float) for k, v in d.items()}
    return ParameterSet.for_spec(spec, **kw)


def fit_to_dict(fit: FitResult, spec: MrssSpec) -> dict:
    return {
        "spec": spec_to_dict(spec),
        "psi": psi_to_dict(fit.psi_hat),
        "loglik": fit.loglik,
        "mc_se": fit.mc_se,
        "aic": fit.aic,
        "n_params": fit.n_params,
        "converged": fit.converged,
        "n_outer": fit.n_outer,
        "seed": fit.seed,
        "n_subjects": fit.n_subjects,
        "loglik_trace": np.asarray(fit.loglik_trace).tolist(),
        "trace_se": np.asarray(fit.trace_se).tolist(),
        "block_trace": [dataclasses.asdict(r) for r in fit.block_trace],
    }


def fit_from_dict(d: dict):
    """Spec, parameters, and metadata from a fit document."""
    for key in ("spec", "psi"):
        if key not in d:
            raise FileFormatError(f"fit document: missing {key!r}")
    spec = spec_from_dict(d["spec"])
    psi = psi_from_dict(d["psi"], spec)
    meta = {k: v for k, v in d.items() if k not in ("spec", "psi")}
    return spec, psi, meta


def sim_config_from_dict(d: dict) -> SimConfig:
    fields = [f.name for f in dataclasses.fields(SimConfig)]
    _reject_unknown(d, fields, "simulation config")
    for key in ("n_subjects", "n_times", "p_treat"):
        if key not in d:
            raise FileFormatError(f"simulation config: missing {key!r}")
    return SimConfig(**d)


# ----------------------------------------------------------------------
# Scenarios
# ----------------------------------------------------------------------

def read_scenarios(path, horizon, *, covariate_names=(),
                   stream_names=()) -> dict:
    """Per-subject forecast scenarios from a wide CSV.

    Header: ``subject_id,step``, then any of ``treatment``, declared
    stream names, and covariate names; each subject needs steps 1..horizon
    exactly once. Columns that are absent stay None on the Scenario (the
    forecast itself reports which ones it actually needed).
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or [h.strip() for h in header][:2] \
                != ["subject_id", "step"]:
            raise FileFormatError(
                f"{path}: header must start with subject_id,step")
        extras = [h.strip() for h in header[2:]]
        known = {"treatment", *stream_names, *covariate_names}
        unknown = [h for h in extras if h not in known]
        if unknown:
            raise FileFormatError(
                f"{path}: unknown scenario columns {unknown}; known: "
                f"{sorted(known)}")
        rows: dict[str, dict[int, np.ndarray]] = {}
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 2 + len(extras):
                raise FileFormatError(
                    f"{path} row {lineno}: expected {2 + len(extras)} "
                    f"columns, got {len(row)}")
            sid = row[0]
            try:
                step = int(row[1])
            except ValueError:
                raise FileFormatError(
                    f"{path} row {lineno}, column 'step': could not "
                    f"parse {row[1]!r}") from None
            if not 1 <= step <= horizon:
                raise FileFormatError(
                    f"{path} row {lineno}: step {step} outside "
                    f"1..{horizon}")
            vals = np.array([
                _parse_float(row[2 + k],
                             f"{path} row {lineno}, column {name!r}")
                for k, name in enumerate(extras)])
            per = rows.setdefault(sid, {})
            if step in per:
                raise FileFormatError(
                    f"{path} row {lineno}: duplicate step {step} for "
                    f"subject {sid!r}")
            per[step] = vals

    scenarios = {}
    col = {name: k for k, name in enumerate(extras)}
    for sid, per in rows.items():
        missing = sorted(set(range(1, horizon + 1)) - set(per))
        if missing:
            raise FileFormatError(
                f"{path}: subject {sid!r} lacks steps {missing}")
        grid = np.vstack([per[s] for s in range(1, horizon + 1)])

        def take(name):
            return grid[:, col[name]] if name in col else None

        x = None
        present = [n for n in covariate_names if n in col]
        if present and len(present) < len(covariate_names):
            raise FileFormatError(
                f"{path}: scenario has covariate columns {present} but "
                f"lacks {sorted(set(covariate_names) - set(present))}")
        if covariate_names and present:
            x = np.column_stack([grid[:, col[n]] for n in covariate_names])
        scenarios[sid] = Scenario(
            treatment=take("treatment"),
            indicators={n: take(n) for n in stream_names if n in col},
            x=x)
    return scenarios


# ----------------------------------------------------------------------
# JSON plumbing and manifests
# ----------------------------------------------------------------------

def read_json(path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise FileFormatError(f"{path}: invalid JSON ({err})") from None


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


@dataclass(frozen=True)
class RunManifest:
    """What a command run consumed and produced."""

    command: str
    config_hash: str
    seed: int | None
    versions: dict
    input_digests: dict
    wall_time: float
    outputs: list


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, *, command, config, seed, inputs, outputs,
                   wall_time) -> Path:
    """Write the run manifest next to the outputs; returns its path."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    manifest = RunManifest(
        command=command,
        config_hash=hashlib.sha256(canonical.encode()).hexdigest(),
        seed=seed,
        versions={
            "mrss": _package_version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        input_digests={str(p): _sha256(p) for p in inputs},
        wall_time=wall_time,
        outputs=[str(p) for p in outputs],
    )
    return write_json(Path(out_dir) / "manifest.json",
                      dataclasses.asdict(manifest))


def _package_version() -> str:
    from . import __version__
    return __version__
