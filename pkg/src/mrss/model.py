"""Panel models linking mixed-type channels to latent treatment and health states.

This module turns a declarative model description (:class:`MrssSpec`), one
subject's recorded panel (:class:`SubjectData`) and a parameter point
(:class:`ParameterSet`) into the concrete mixed-channel state-space model of
:mod:`mrss.mode`, and builds the subject-level products on top of it:
smoothed latent states, forecasts under hypothetical indicator scenarios,
and predicted treatment effects.

The observation side follows a gated loading design. Channels are grouped
into modalities; each latent state may be tied to a binary per-modality
indicator stream (the treatment indicator, or an extra declared stream such
as a morning flag). At time t the loading of channel j on a gated state k is
lam[j, k] * s_tj, where s_tj is the value of the state's stream for channel
j's modality, so a state contributes to the signal only while its stream is
switched on. Measurement-process channels (kind "measure") are by default
structurally zero on treatment-gated states: whether a subject records right
after treatment may reflect habits and health, never the instantaneous
treatment response itself.

Subjects live on an integer time grid and may skip points. Skipped grid
times are *gaps* -- the subject did not record at all -- and are collapsed
into single transition steps by default (exactly equivalent to carrying
fully-missing rows, but cheaper). A fully-missing measurement indicator at a
recorded time is therefore a data smell, not a modeling device; assembly
warns about it.

Initial states are diffuse: every state a subject's data can resolve gets
prior variance `kappa`, and the corrected likelihood (the big-kappa scheme
of :func:`mrss.lgss.diffuse_loglik`) stays stable in kappa and comparable
across state dimensions. A state with no structural path to any observed
entry -- say, the treatment state of a subject whose indicator never fires
-- keeps a proper unit prior instead and is excluded from the correction
count, since its diffuse term would never be absorbed by data.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np
import scipy.stats

from .errors import (
    DimensionMismatch,
    LayoutMismatch,
    ScenarioIncomplete,
    UnknownGroup,
    UnsupportedValue,
    UntreatedGroup,
)
from .families import family_from_name
from .lgss import gap_transition
from .mode import MixedSSM, find_mode

__all__ = [
    "ChannelSpec", "StateSpec", "GroupSpec", "MrssSpec", "ParameterSet",
    "SubjectData", "Scenario", "SubjectDesign", "AssembledModel",
    "StatePosterior", "Forecast", "OneStepPath", "EffectPrediction",
    "build_design", "assemble_ssm", "smoothed_states", "forecast",
    "one_step_path", "predicted_treatment_effect",
]

TREATMENT = "treatment"

_FAMILIES = ("gaussian", "bernoulli", "poisson")
_CHANNEL_KINDS = ("measure", "phenotype")
_STATE_KINDS = ("treatment", "health")


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Declarative model description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelSpec:
    """One observation channel.

    kind "measure" marks a measurement-process indicator (did the subject
    record before or after treatment); "phenotype" marks an outcome. The
    modality groups channels that share indicator streams.
    """

    name: str
    family: str
    kind: str = "phenotype"
    modality: str = "main"

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise LayoutMismatch(
                f"channel {self.name!r}: unknown family {self.family!r}"
            )
        if self.kind not in _CHANNEL_KINDS:
            raise LayoutMismatch(
                f"channel {self.name!r}: kind must be one of {_CHANNEL_KINDS}"
            )


@dataclass(frozen=True)
class StateSpec:
    """One latent state.

    `gate` names the indicator stream that switches the state's loadings on
    and off: ``"treatment"`` for the built-in treatment stream, any declared
    extra stream name, or None for an always-on state.
    """

    name: str
    kind: str = "health"
    gate: str | None = None

    def __post_init__(self):
        if self.kind not in _STATE_KINDS:
            raise LayoutMismatch(
                f"state {self.name!r}: kind must be one of {_STATE_KINDS}"
            )


@dataclass(frozen=True)
class GroupSpec:
    """A named subject group with its own transition diagonal.

    `states` / `channels` restrict the group to a subset (None keeps all):
    dropped states do not exist for the group's subjects, dropped channels
    are treated as never observed.
    """

    name: str
    states: tuple | None = None
    channels: tuple | None = None


@dataclass(frozen=True)
class MrssSpec:
    """Declarative description of the panel model.

    Holds the channel list (with families, kinds and modalities), the latent
    states with their gates, covariate names, extra indicator-stream names,
    groups, and the structural layout arrays:

    loading_free
        (p, w) bool, True where a loading is a free parameter. Defaults to
        free everywhere except measurement-process rows on treatment-gated
        states, which are structurally zero.
    loading_fixed
        (p, w) values of the non-free entries (structural zeros, anchors).
    q_mask
        (w, w) bool independence structure of the state noise: True inside a
        block, False across independent blocks. Must partition the states
        (symmetric, transitively closed).
    beta_free
        (p, q) bool, free covariate coefficients. Defaults to all free.

    The latent dimension may not exceed the observation dimension: the model
    exists to map many channels onto few states.
    """

    channels: tuple
    states: tuple
    covariates: tuple = ()
    indicators: tuple = ()
    groups: tuple = (GroupSpec("all"),)
    loading_free: np.ndarray | None = None
    loading_fixed: np.ndarray | None = None
    q_mask: np.ndarray | None = None
    beta_free: np.ndarray | None = None

    p: int = field(init=False)
    w: int = field(init=False)
    q: int = field(init=False)

    def __post_init__(self):
        channels = tuple(self.channels)
        states = tuple(self.states)
        groups = tuple(self.groups)
        if not channels or not states:
            raise LayoutMismatch("need at least one channel and one state")
        p, w, q = len(channels), len(states), len(self.covariates)
        if w > p:
            raise LayoutMismatch(
                f"{w} latent states for {p} channels; the latent dimension "
                "may not exceed the observation dimension"
            )
        for seq, label in ((channels, "channel"), (states, "state"),
                           (groups, "group")):
            names = [s.name for s in seq]
            if len(set(names)) != len(names):
                raise LayoutMismatch(f"duplicate {label} names in {names}")

        declared = {TREATMENT, *self.indicators}
        for st in states:
            if st.gate is not None and st.gate not in declared:
                raise LayoutMismatch(
                    f"state {st.name!r} gated by undeclared stream {st.gate!r}"
                )

        # modalities in first-appearance order
        modalities = []
        for ch in channels:
            if ch.modality not in modalities:
                modalities.append(ch.modality)
        mod_idx = np.array([modalities.index(ch.modality) for ch in channels])

        measure = np.array([ch.kind == "measure" for ch in channels])
        free = self.loading_free
        if free is None:
            free = np.ones((p, w), dtype=bool)
            for k, st in enumerate(states):
                if st.gate == TREATMENT:
                    free[measure, k] = False
        free = np.asarray(free, dtype=bool)
        if free.shape != (p, w):
            raise LayoutMismatch(
                f"loading_free has shape {free.shape}, expected {(p, w)}"
            )
        fixed = self.loading_fixed
        fixed = np.zeros((p, w)) if fixed is None else np.asarray(fixed, float)
        if fixed.shape != (p, w):
            raise LayoutMismatch(
                f"loading_fixed has shape {fixed.shape}, expected {(p, w)}"
            )
        fixed = np.where(free, 0.0, fixed)  # fixed values live off the free set

        qm = self.q_mask
        qm = np.ones((w, w), dtype=bool) if qm is None else np.asarray(qm, bool)
        if qm.shape != (w, w) or not np.array_equal(qm, qm.T) \
                or not np.all(np.diag(qm)):
            raise LayoutMismatch(
                "q_mask must be a symmetric boolean matrix with a True diagonal"
            )
        reach = np.linalg.matrix_power(qm.astype(int), max(w - 1, 1)) > 0
        if not np.array_equal(reach, qm):
            raise LayoutMismatch(
                "q_mask must partition states into independent blocks "
                "(transitively closed)"
            )

        bf = self.beta_free
        bf = np.ones((p, q), dtype=bool) if bf is None else np.asarray(bf, bool)
        if bf.shape != (p, q):
            raise LayoutMismatch(
                f"beta_free has shape {bf.shape}, expected {(p, q)}"
            )

        for g in groups:
            known_s = {st.name for st in states}
            known_c = {ch.name for ch in channels}
            if g.states is not None and not set(g.states) <= known_s:
                raise LayoutMismatch(
                    f"group {g.name!r} references unknown states "
                    f"{sorted(set(g.states) - known_s)}"
                )
            if g.channels is not None and not set(g.channels) <= known_c:
                raise LayoutMismatch(
                    f"group {g.name!r} references unknown channels "
                    f"{sorted(set(g.channels) - known_c)}"
                )

        set_ = object.__setattr__
        set_(self, "channels", channels)
        set_(self, "states", states)
        set_(self, "covariates", tuple(self.covariates))
        set_(self, "indicators", tuple(self.indicators))
        set_(self, "groups", groups)
        set_(self, "loading_free", _frozen(free, bool))
        set_(self, "loading_fixed", _frozen(fixed))
        set_(self, "q_mask", _frozen(qm, bool))
        set_(self, "beta_free", _frozen(bf, bool))
        set_(self, "p", p)
        set_(self, "w", w)
        set_(self, "q", q)
        set_(self, "_modalities", tuple(modalities))
        set_(self, "_mod_idx", _frozen(mod_idx, int))
        set_(self, "_group_pos", {g.name: i for i, g in enumerate(groups)})

    # -- lookups -----------------------------------------------------------
    @property
    def modalities(self) -> tuple:
        return self._modalities

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_index(self, name: str) -> int:
        try:
            return self._group_pos[name]
        except KeyError:
            raise UnknownGroup(
                f"group {name!r}; declared: {sorted(self._group_pos)}"
            ) from None

    def group(self, name: str) -> GroupSpec:
        return self.groups[self.group_index(name)]

    def active_states(self, group: str) -> np.ndarray:
        g = self.group(group)
        if g.states is None:
            return np.ones(self.w, dtype=bool)
        keep = set(g.states)
        return np.array([st.name in keep for st in self.states])

    def active_channels(self, group: str) -> np.ndarray:
        g = self.group(group)
        if g.channels is None:
            return np.ones(self.p, dtype=bool)
        keep = set(g.channels)
        return np.array([ch.name in keep for ch in self.channels])

    def structural_nonzero(self) -> np.ndarray:
        """(p, w) bool: entries that can be nonzero (free or fixed != 0)."""
        return self.loading_free | (self.loading_fixed != 0.0)

    def is_treated(self, group: str) -> bool:
        """Whether the group carries an effective treatment-gated state."""
        act_s = self.active_states(group)
        act_c = self.active_channels(group)
        nz = self.structural_nonzero()
        for k, st in enumerate(self.states):
            if act_s[k] and st.gate == TREATMENT and np.any(nz[act_c, k]):
                return True
        return False


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSet:
    """One point in parameter space, with its structural masks.

    Masks travel with the values so that a fitted result is self-describing:
    free entries (True) are estimated, the rest are structural and never
    move. `t_diag` holds one transition diagonal per group; entries of
    states a group does not use are fixed at zero and ignored. `Q` must be
    exactly zero across independence blocks. `h_diag` carries the Gaussian
    channel variances (entries for other families are inert).
    """

    lam: np.ndarray        # (p, w)
    beta: np.ndarray       # (p, q)
    t_diag: np.ndarray     # (n_groups, w)
    c: np.ndarray          # (w,)
    Q: np.ndarray          # (w, w)
    h_diag: np.ndarray     # (p,)
    lam_free: np.ndarray
    beta_free: np.ndarray
    t_free: np.ndarray
    q_mask: np.ndarray
    h_free: np.ndarray

    def __post_init__(self):
        set_ = object.__setattr__
        for name, dtype in (("lam", float), ("beta", float), ("t_diag", float),
                            ("c", float), ("Q", float), ("h_diag", float),
                            ("lam_free", bool), ("beta_free", bool),
                            ("t_free", bool), ("q_mask", bool),
                            ("h_free", bool)):
            set_(self, name, _frozen(getattr(self, name), dtype))
        p, w = self.lam.shape
        if self.beta.ndim != 2 or self.beta.shape[0] != p:
            raise LayoutMismatch(
                f"beta has shape {self.beta.shape}, expected ({p}, q)"
            )
        if self.t_diag.ndim != 2 or self.t_diag.shape[1] != w:
            raise LayoutMismatch(
                f"t_diag has shape {self.t_diag.shape}, expected (n_groups, {w})"
            )
        for name, shape in (("c", (w,)), ("Q", (w, w)), ("h_diag", (p,)),
                            ("lam_free", (p, w)),
                            ("beta_free", self.beta.shape),
                            ("t_free", self.t_diag.shape),
                            ("q_mask", (w, w)), ("h_free", (p,))):
            got = getattr(self, name).shape
            if got != shape:
                raise LayoutMismatch(f"{name} has shape {got}, expected {shape}")
        if not np.array_equal(self.Q, self.Q.T):
            raise LayoutMismatch("Q must be symmetric")
        if np.any(self.Q[~self.q_mask] != 0.0):
            raise LayoutMismatch(
                "Q has nonzero entries across independence blocks"
            )
        if np.any(np.abs(self.t_diag[self.t_free]) > 1.0 + 1e-6):
            raise LayoutMismatch("free t_diag entries must lie in [-1, 1]")
        if np.any(self.h_diag[self.h_free] <= 0.0):
            raise LayoutMismatch("Gaussian channel variances must be positive")

    # -- bookkeeping -------------------------------------------------------
    @property
    def n_free(self) -> int:
        """Count of free parameters (what information criteria charge for)."""
        return int(self.lam_free.sum() + self.beta_free.sum()
                   + self.t_free.sum() + self.c.size
                   + np.tril(self.q_mask).sum() + self.h_free.sum())

    def replace(self, **kw) -> "ParameterSet":
        return dataclasses.replace(self, **kw)

    @classmethod
    def for_spec(cls, spec: MrssSpec, *, lam=None, beta=None, t_diag=None,
                 c=None, Q=None, h_diag=None) -> "ParameterSet":
        """Build a parameter set with masks derived from the spec.

        Unsupplied values get neutral defaults (zeros, Q = I, unit
        variances); fixed loading entries are always taken from the spec's
        layout, whatever `lam` says elsewhere.
        """
        p, w, q = spec.p, spec.w, spec.q
        G = spec.n_groups
        lam = np.zeros((p, w)) if lam is None else np.asarray(lam, float)
        if lam.shape != (p, w):
            raise LayoutMismatch(f"lam has shape {lam.shape}, expected {(p, w)}")
        lam = np.where(spec.loading_free, lam, spec.loading_fixed)
        beta = np.zeros((p, q)) if beta is None else np.asarray(beta, float)
        t_diag = np.full((G, w), 0.5) if t_diag is None \
            else np.asarray(t_diag, float)
        if t_diag.shape == (w,):
            t_diag = np.tile(t_diag, (G, 1))
        t_free = np.stack([spec.active_states(g.name) for g in spec.groups])
        t_diag = np.where(t_free, t_diag, 0.0)
        c = np.zeros(w) if c is None else np.asarray(c, float)
        Q = np.eye(w) if Q is None else np.asarray(Q, float)
        Q = np.where(spec.q_mask, Q, 0.0)
        h_free = np.array([ch.family == "gaussian" for ch in spec.channels])
        h_diag = np.ones(p) if h_diag is None else np.asarray(h_diag, float)
        h_diag = np.where(h_free, h_diag, 1.0)
        return cls(lam=lam, beta=beta, t_diag=t_diag, c=c, Q=Q, h_diag=h_diag,
                   lam_free=spec.loading_free, beta_free=spec.beta_free,
                   t_free=t_free, q_mask=spec.q_mask, h_free=h_free)

    def validate_for(self, spec: MrssSpec) -> None:
        """Raise LayoutMismatch unless masks and fixed values match the spec."""
        if self.lam.shape != (spec.p, spec.w):
            raise LayoutMismatch(
                f"lam has shape {self.lam.shape}, spec wants {(spec.p, spec.w)}"
            )
        if self.beta.shape != (spec.p, spec.q):
            raise LayoutMismatch(
                f"beta has shape {self.beta.shape}, "
                f"spec wants {(spec.p, spec.q)}"
            )
        if self.t_diag.shape != (spec.n_groups, spec.w):
            raise LayoutMismatch(
                f"t_diag has shape {self.t_diag.shape}, "
                f"spec wants {(spec.n_groups, spec.w)}"
            )
        if not np.array_equal(self.lam_free, spec.loading_free):
            raise LayoutMismatch("loading mask differs from the spec layout")
        if not np.array_equal(self.beta_free, spec.beta_free):
            raise LayoutMismatch("beta mask differs from the spec layout")
        if not np.array_equal(self.q_mask, spec.q_mask):
            raise LayoutMismatch("Q independence mask differs from the spec")
        fixed = ~spec.loading_free
        if not np.array_equal(self.lam[fixed], spec.loading_fixed[fixed]):
            raise LayoutMismatch("fixed loading entries differ from the spec")
        h_free = np.array([ch.family == "gaussian" for ch in spec.channels])
        if not np.array_equal(self.h_free, h_free):
            raise LayoutMismatch("h mask differs from the spec's families")

    def families(self, spec: MrssSpec) -> tuple:
        """Channel family objects at this parameter point."""
        return tuple(
            family_from_name(ch.family, sigma2=self.h_diag[j])
            for j, ch in enumerate(spec.channels)
        )


# ---------------------------------------------------------------------------
# Subject panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectData:
    """One subject's recorded panel.

    `times` are the grid indices at which the subject recorded anything
    (strictly increasing, >= 1); rows of `z` align with it, NaN marking
    per-channel missingness within a recorded time. `treatment` and each
    extra indicator stream are (m,) or (m, n_modalities) binary arrays --
    a single column is shared across modalities. `x` holds covariates,
    either (m, q) time-varying or (q,) constant (broadcast).
    """

    subject_id: str
    times: np.ndarray
    z: np.ndarray
    treatment: np.ndarray | None = None
    indicators: Mapping[str, np.ndarray] = field(default_factory=dict)
    x: np.ndarray | None = None
    group: str = "all"

    def __post_init__(self):
        set_ = object.__setattr__
        times = np.asarray(self.times)
        if times.ndim != 1 or times.size < 1 \
                or not np.issubdtype(times.dtype, np.integer):
            raise DimensionMismatch("times must be a nonempty 1-d integer array")
        if np.any(np.diff(times) < 1) or times[0] < 1:
            raise DimensionMismatch("times must be strictly increasing and >= 1")
        m = times.size
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 2 or z.shape[0] != m:
            raise DimensionMismatch(
                f"z has shape {z.shape}, expected ({m}, n_channels)"
            )
        set_(self, "times", _frozen(times, int))
        set_(self, "z", _frozen(z))
        if self.treatment is not None:
            set_(self, "treatment", self._stream(self.treatment, m, "treatment"))
        ind = {name: self._stream(arr, m, name)
               for name, arr in dict(self.indicators).items()}
        set_(self, "indicators", MappingProxyType(ind))
        if self.x is not None:
            x = np.asarray(self.x, dtype=float)
            if x.ndim == 2 and x.shape[0] != m:
                raise DimensionMismatch(
                    f"x has {x.shape[0]} rows for {m} recorded times"
                )
            if x.ndim > 2:
                raise DimensionMismatch("x must be (m, q) or constant (q,)")
            if not np.all(np.isfinite(x)):
                raise UnsupportedValue("covariates must be finite")
            set_(self, "x", _frozen(x))

    @staticmethod
    def _stream(arr, m, name):
        s = np.asarray(arr, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] != m:
            raise DimensionMismatch(
                f"indicator stream {name!r} has shape {np.shape(arr)}, "
                f"expected ({m},) or ({m}, n_modalities)"
            )
        if not np.all((s == 0.0) | (s == 1.0)):
            raise UnsupportedValue(
                f"indicator stream {name!r} has values outside {{0, 1}}"
            )
        return _frozen(s)

    @property
    def x_constant(self) -> bool:
        return self.x is not None and self.x.ndim == 1

    def up_to(self, time: int) -> "SubjectData":
        """The panel restricted to grid times <= `time`."""
        keep = self.times <= int(time)
        if not np.any(keep):
            raise DimensionMismatch(
                f"subject {self.subject_id!r} has no data at or before "
                f"grid time {time}"
            )
        return SubjectData(
            subject_id=self.subject_id,
            times=self.times[keep],
            z=self.z[keep],
            treatment=None if self.treatment is None else self.treatment[keep],
            indicators={k: v[keep] for k, v in self.indicators.items()},
            x=self.x if self.x is None or self.x.ndim == 1 else self.x[keep],
            group=self.group,
        )


@dataclass(frozen=True)
class Scenario:
    """Future indicator and covariate values for a forecast horizon.

    Arrays cover the forecast steps in order: `treatment` and each entry of
    `indicators` are (h,) or (h, n_modalities); `x` is (h, q). Streams the
    spec does not gate on may be omitted, as may `x` when the subject's
    covariates are constant.
    """

    treatment: np.ndarray | None = None
    indicators: Mapping[str, np.ndarray] = field(default_factory=dict)
    x: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _expand_stream(s: np.ndarray, n_mod: int, what: str) -> np.ndarray:
    if s.shape[1] == n_mod:
        return s
    if s.shape[1] == 1:
        return np.broadcast_to(s, (s.shape[0], n_mod))
    raise LayoutMismatch(
        f"{what} has {s.shape[1]} columns for {n_mod} modalities"
    )


def _gates(spec, act_idx, streams, n_rows, what="subject data"):
    """(rows, p, w_act) gate multipliers from per-modality streams."""
    G = np.ones((n_rows, spec.p, act_idx.size))
    mod = np.asarray(spec._mod_idx)
    missing = []
    for kk, k in enumerate(act_idx):
        gate = spec.states[k].gate
        if gate is None:
            continue
        s = streams.get(gate)
        if s is None:
            missing.append(gate)
            continue
        G[:, :, kk] = _expand_stream(s, len(spec.modalities),
                                     f"stream {gate!r}")[:, mod]
    if missing:
        raise LayoutMismatch(
            f"{what} lacks indicator stream(s) required by gated states: "
            + ", ".join(sorted(set(missing)))
        )
    return G


def _subject_streams(subj: SubjectData) -> dict:
    streams = dict(subj.indicators)
    if subj.treatment is not None:
        streams[TREATMENT] = subj.treatment
    return streams


class SubjectDesign:
    """Everything about one subject that does not depend on parameters.

    Repeated likelihood evaluations at different parameter points reuse the
    design: the gate tensor, covariate rows, gap lengths, and the diffuse
    bookkeeping are all fixed once the spec, group and data are known.
    `matrices` is the per-parameter hot path and performs no validation.
    """

    def __init__(self, spec: MrssSpec, subj: SubjectData, *,
                 collapse: bool = True, kappa: float | None = 1e7):
        self.spec = spec
        self.subject_id = subj.subject_id
        self.group = subj.group
        self.group_idx = spec.group_index(subj.group)
        self.collapse = bool(collapse)
        self.kappa = kappa

        act_s = spec.active_states(subj.group)
        act_c = spec.active_channels(subj.group)
        act_idx = np.flatnonzero(act_s)
        mi = subj.times.size
        if subj.z.shape[1] != spec.p:
            raise LayoutMismatch(
                f"subject {subj.subject_id!r}: z has {subj.z.shape[1]} "
                f"channels, spec declares {spec.p}"
            )
        if spec.q and subj.x is None:
            raise LayoutMismatch(
                f"subject {subj.subject_id!r}: spec declares covariates "
                f"{spec.covariates} but the panel carries none"
            )
        if subj.x is not None and subj.x.shape[-1] != spec.q:
            raise LayoutMismatch(
                f"subject {subj.subject_id!r}: x has {subj.x.shape[-1]} "
                f"columns for {spec.q} declared covariates"
            )

        z = np.array(subj.z)
        z[:, ~act_c] = np.nan  # channels the group does not observe
        obs = ~np.isnan(z)
        for j, ch in enumerate(spec.channels):
            if act_c[j] and np.any(obs[:, j]):
                family_from_name(ch.family).check_support(z[obs[:, j], j])
        self._warn_orphan_phenotypes(spec, subj, act_c, obs)

        streams = _subject_streams(subj)
        G = _gates(spec, act_idx, streams, mi,
                   what=f"subject {subj.subject_id!r}")
        if subj.x is None:
            x2d = np.zeros((mi, 0))
        elif subj.x.ndim == 1:
            x2d = np.broadcast_to(subj.x, (mi, spec.q))
        else:
            x2d = subj.x

        nz = spec.structural_nonzero()
        resolved = np.array([
            bool(np.any(obs & (G[:, :, kk] != 0.0) & nz[:, k][None, :]))
            for kk, k in enumerate(act_idx)
        ])

        if self.collapse:
            rows = subj.times
            taus = np.zeros(mi, dtype=int)
            taus[:-1] = np.diff(subj.times) - 1
        else:
            rows = np.arange(subj.times[0], subj.times[-1] + 1)
            taus = np.zeros(rows.size, dtype=int)
            pos = subj.times - subj.times[0]
            z_full = np.full((rows.size, spec.p), np.nan)
            z_full[pos] = z
            G_full = np.ones((rows.size, spec.p, act_idx.size))
            G_full[pos] = G
            x_full = np.zeros((rows.size, spec.q))
            x_full[pos] = x2d
            z, G, x2d = z_full, G_full, x_full

        self.times = rows
        self.z = z
        self.gates = G
        self.x = np.asarray(x2d, dtype=float)
        self.taus = taus
        self.act_state_idx = act_idx
        self.state_names = tuple(spec.states[k].name for k in act_idx)
        self.active_channels = act_c
        self.resolved = resolved
        self.family_names = tuple(ch.family for ch in spec.channels)
        # rows the model never observes, on top of NaN entries in z
        self.channel_missing = np.ascontiguousarray(
            np.broadcast_to(~act_c, self.z.shape))

    @staticmethod
    def _warn_orphan_phenotypes(spec, subj, act_c, obs):
        measure = np.array([ch.kind == "measure" for ch in spec.channels])
        for mod in range(len(spec.modalities)):
            in_mod = np.asarray(spec._mod_idx) == mod
            mrows = in_mod & measure & act_c
            yrows = in_mod & ~measure & act_c
            if not mrows.any() or not yrows.any():
                continue
            orphan = obs[:, yrows].any(axis=1) & ~obs[:, mrows].any(axis=1)
            if np.any(orphan):
                t_bad = int(subj.times[np.argmax(orphan)])
                warnings.warn(
                    f"subject {subj.subject_id!r}: phenotype recorded without "
                    f"its measurement indicator ({spec.modalities[mod]!r}, "
                    f"grid time {t_bad}); unrecorded times should be gaps, "
                    "not missing indicators",
                    stacklevel=3,
                )
                break

    @property
    def diffuse_q(self) -> int:
        if self.kappa is None:
            return 0
        return int(self.resolved.sum())

    @property
    def loglik_offset(self) -> float:
        """Additive big-kappa correction for this subject's likelihood."""
        if self.kappa is None or self.diffuse_q == 0:
            return 0.0
        return 0.5 * self.diffuse_q * float(np.log(self.kappa))

    # -- per-parameter materialization ----------------------------------
    def matrices(self, psi: ParameterSet):
        """Raw model arrays at `psi`: (lam, d, T, c, Q, a1, P1).

        No validation happens here; callers on the optimization path check
        the parameter layout once per fit.
        """
        idx = self.act_state_idx
        lam_g = psi.lam[:, idx]
        lam = lam_g[None, :, :] * self.gates
        d = self.x @ psi.beta.T
        td = psi.t_diag[self.group_idx, idx]
        c_g = psi.c[idx]
        Q_g = psi.Q[np.ix_(idx, idx)]
        T_steps, c_steps, Q_steps = _transition_steps(td, c_g, Q_g, self.taus)
        wg = idx.size
        a1 = np.zeros(wg)
        if self.kappa is None:
            P1 = np.eye(wg)
        else:
            P1 = np.diag(np.where(self.resolved, float(self.kappa), 1.0))
        return lam, d, T_steps, c_steps, Q_steps, a1, P1

    def to_assembled(self, psi: ParameterSet) -> "AssembledModel":
        lam, d, T, c, Q, a1, P1 = self.matrices(psi)
        model = MixedSSM(
            lam=lam, d=d, T=T, c=c, Q=Q, a1=a1, P1=P1,
            channels=psi.families(self.spec),
            missing=self.channel_missing,
        )
        return AssembledModel(
            model=model, z=self.z, times=self.times,
            state_names=self.state_names, resolved=self.resolved,
            kappa=self.kappa, group=self.group, subject_id=self.subject_id,
        )


def _transition_steps(td, c, Q, taus):
    """Stacked per-step transitions, collapsing gaps of length tau > 0."""
    w = td.size
    rows = taus.size
    T1 = np.diag(td)
    if not np.any(taus):
        T = np.broadcast_to(T1, (rows, w, w))
        cs = np.broadcast_to(c, (rows, w))
        Qs = np.broadcast_to(Q, (rows, w, w))
        return (np.ascontiguousarray(T), np.ascontiguousarray(cs),
                np.ascontiguousarray(Qs))
    T = np.empty((rows, w, w))
    cs = np.empty((rows, w))
    Qs = np.empty((rows, w, w))
    cache = {0: (T1, np.asarray(c, float), np.asarray(Q, float))}
    for i, tau in enumerate(taus):
        tau = int(tau)
        if tau not in cache:
            cache[tau] = gap_transition(T1, c, Q, tau)
        T[i], cs[i], Qs[i] = cache[tau]
    return T, cs, Qs


@dataclass(frozen=True)
class AssembledModel:
    """A subject's concrete state-space model plus its aligned data panel.

    `times` maps model rows back to grid indices (gaps collapsed away or
    kept as all-missing rows, depending on how assembly was asked to run).
    `loglik_offset` is the additive diffuse-initialization correction that
    makes per-subject likelihoods comparable across state dimensions.
    """

    model: MixedSSM
    z: np.ndarray
    times: np.ndarray
    state_names: tuple
    resolved: np.ndarray
    kappa: float | None
    group: str
    subject_id: str

    @property
    def diffuse_q(self) -> int:
        if self.kappa is None:
            return 0
        return int(self.resolved.sum())

    @property
    def loglik_offset(self) -> float:
        if self.kappa is None or self.diffuse_q == 0:
            return 0.0
        return 0.5 * self.diffuse_q * float(np.log(self.kappa))


def build_design(spec: MrssSpec, subj: SubjectData, *, collapse: bool = True,
                 kappa: float | None = 1e7) -> SubjectDesign:
    """Validate a subject against the spec and fix its static design."""
    return SubjectDesign(spec, subj, collapse=collapse, kappa=kappa)


def assemble_ssm(spec: MrssSpec, subj: SubjectData, psi: ParameterSet, *,
                 collapse: bool = True,
                 kappa: float | None = 1e7) -> AssembledModel:
    """Build the subject's mixed state-space model at a parameter point.

    Instantiates the gated loading blocks from the subject's indicator
    streams, applies the group's transition diagonal and channel/state
    subsets, inserts collapsed gap transitions for skipped grid times
    (or all-missing rows with ``collapse=False``), and sets up the diffuse
    initial distribution. `kappa=None` switches the initial distribution to
    a proper standard normal (mostly useful for small exact comparisons).
    """
    psi.validate_for(spec)
    return build_design(spec, subj, collapse=collapse, kappa=kappa) \
        .to_assembled(psi)


# ---------------------------------------------------------------------------
# Smoothed states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StatePosterior:
    """Posterior summary of the latent states at the recorded times."""

    times: np.ndarray
    mean: np.ndarray        # (rows, w_g)
    var: np.ndarray         # (rows, w_g, w_g)
    state_names: tuple


def smoothed_states(spec: MrssSpec, subj: SubjectData, psi: ParameterSet, *,
                    kappa: float | None = 1e7) -> StatePosterior:
    """Posterior means and variances of the latent states given the panel.

    Runs the mode iteration and reads the approximating Gaussian model's
    smoother, so non-Gaussian channels get the mode-based approximation and
    all-Gaussian subjects get the exact smoother.
    """
    asm = assemble_ssm(spec, subj, psi, kappa=kappa)
    _, sm = find_mode(asm.model, asm.z)
    return StatePosterior(times=asm.times, mean=sm.alpha_hat, var=sm.V,
                          state_names=asm.state_names)


# ---------------------------------------------------------------------------
# Forecasting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Forecast:
    """Channel predictions over a forecast horizon.

    `theta` is the natural-parameter (signal) mean, with `theta_se` its
    standard error from the propagated state uncertainty; the interval
    bounds are Gaussian on the signal scale and mapped through the inverse
    link for the response-scale columns. `response` is the plug-in inverse
    link of `theta`.
    """

    times: np.ndarray
    theta: np.ndarray
    theta_se: np.ndarray
    theta_lo: np.ndarray
    theta_hi: np.ndarray
    response: np.ndarray
    response_lo: np.ndarray
    response_hi: np.ndarray
    state_mean: np.ndarray
    state_names: tuple
    channel_names: tuple


def _scenario_gates_x(spec, subj, design, scenario, horizon):
    """Gate tensor and covariate rows for the forecast steps."""
    scenario = scenario or Scenario()
    act_idx = design.act_state_idx
    needed = sorted({
        spec.states[k].gate for k in act_idx if spec.states[k].gate is not None
    })
    streams = {}
    missing = []
    for name in needed:
        arr = scenario.treatment if name == TREATMENT \
            else dict(scenario.indicators).get(name)
        if arr is None:
            missing.append(name)
            continue
        s = np.asarray(arr, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != horizon:
            raise ScenarioIncomplete(
                f"scenario stream {name!r} covers {s.shape[0]} steps, "
                f"horizon is {horizon}"
            )
        if not np.all((s == 0.0) | (s == 1.0)):
            raise UnsupportedValue(
                f"scenario stream {name!r} has values outside {{0, 1}}"
            )
        streams[name] = s
    if spec.q:
        if scenario.x is not None:
            xf = np.asarray(scenario.x, dtype=float)
            if xf.shape != (horizon, spec.q):
                raise ScenarioIncomplete(
                    f"scenario x has shape {xf.shape}, "
                    f"expected {(horizon, spec.q)}"
                )
        elif subj.x_constant:
            xf = np.broadcast_to(subj.x, (horizon, spec.q))
        else:
            missing.append("x")
            xf = None
    else:
        xf = np.zeros((horizon, 0))
    if missing:
        raise ScenarioIncomplete(
            "scenario is missing: " + ", ".join(sorted(missing))
        )
    G = _gates(spec, act_idx, streams, horizon, what="scenario")
    return G, xf


def forecast(spec: MrssSpec, subj: SubjectData, psi: ParameterSet,
             horizon: int, scenario: Scenario | None = None, *,
             origin: int | None = None, level: float = 0.95,
             kappa: float | None = 1e7) -> Forecast:
    """Predict the channels `horizon` grid steps past `origin`.

    Conditions on the panel up to and including `origin` (default: the last
    recorded time), propagates the filtered mode-approximate state through
    the transition, and maps it through loadings instantiated from the
    scenario's indicator streams. A horizon of zero returns the filtered
    signal at the origin itself (which must then be a recorded time), using
    the subject's own recorded indicators.
    """
    horizon = int(horizon)
    if horizon < 0:
        raise DimensionMismatch(f"horizon must be >= 0, got {horizon}")
    psi.validate_for(spec)
    if origin is None:
        origin = int(subj.times[-1])
    hist = subj.up_to(origin)
    design = build_design(spec, hist, kappa=kappa)
    asm = design.to_assembled(psi)
    lin, _ = find_mode(asm.model, asm.z)
    af = lin.filt.a_filt[-1]
    Pf = lin.filt.P_filt[-1]
    t_last = int(hist.times[-1])

    fams = psi.families(spec)
    names = tuple(ch.name for ch in spec.channels)
    zq = float(scipy.stats.norm.ppf(0.5 * (1.0 + level)))

    if horizon == 0:
        if t_last != origin:
            raise DimensionMismatch(
                f"zero-step forecast needs data recorded at the origin "
                f"(origin {origin}, last recorded {t_last})"
            )
        lam_o = asm.model.lam[-1]
        theta = lam_o @ af + asm.model.d[-1]
        se = np.sqrt(np.einsum("pw,wv,pv->p", lam_o, Pf, lam_o))
        return _package_forecast(
            np.array([origin]), theta[None], se[None], af[None],
            fams, names, design.state_names, zq,
        )

    G, xf = _scenario_gates_x(spec, subj, design, scenario, horizon)
    idx = design.act_state_idx
    lam_g = psi.lam[:, idx]
    T1 = np.diag(psi.t_diag[design.group_idx, idx])
    c_g = psi.c[idx]
    Q_g = psi.Q[np.ix_(idx, idx)]

    x_s, P_s = af, Pf
    theta = np.empty((horizon, spec.p))
    se = np.empty((horizon, spec.p))
    means = np.empty((horizon, idx.size))
    for gt in range(t_last + 1, origin + horizon + 1):
        x_s = T1 @ x_s + c_g
        P_s = T1 @ P_s @ T1.T + Q_g
        s = gt - origin - 1
        if s < 0:
            continue  # rolling forward from the last recorded time to origin
        lam_s = lam_g * G[s]
        theta[s] = lam_s @ x_s + xf[s] @ psi.beta.T
        se[s] = np.sqrt(np.einsum("pw,wv,pv->p", lam_s, P_s, lam_s))
        means[s] = x_s
    times = np.arange(origin + 1, origin + horizon + 1)
    return _package_forecast(times, theta, se, means, fams, names,
                             design.state_names, zq)


def _package_forecast(times, theta, se, state_mean, fams, channel_names,
                      state_names, zq):
    lo = theta - zq * se
    hi = theta + zq * se
    response = np.empty_like(theta)
    r_lo = np.empty_like(theta)
    r_hi = np.empty_like(theta)
    for j, fam in enumerate(fams):
        response[:, j] = fam.mean(theta[:, j])
        r_lo[:, j] = fam.mean(lo[:, j])   # inverse links are increasing
        r_hi[:, j] = fam.mean(hi[:, j])
    return Forecast(times=times, theta=theta, theta_se=se, theta_lo=lo,
                    theta_hi=hi, response=response, response_lo=r_lo,
                    response_hi=r_hi, state_mean=state_mean,
                    state_names=state_names, channel_names=channel_names)


# ---------------------------------------------------------------------------
# One-step-ahead prediction path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OneStepPath:
    """Signal predictions for recorded times, each using only earlier data."""

    times: np.ndarray
    theta: np.ndarray      # (k, p)
    response: np.ndarray   # (k, p)


def one_step_path(spec: MrssSpec, subj: SubjectData, psi: ParameterSet,
                  times: np.ndarray | None = None, *,
                  kappa: float | None = 1e7) -> OneStepPath:
    """Predict the signal at each requested recorded time from its past.

    For each target time t the mode iteration runs on the strictly earlier
    panel, the filtered state propagates across any gap up to t, and the
    loading uses the subject's own recorded indicators at t. The default
    covers every recorded time after the first.
    """
    psi.validate_for(spec)
    if times is None:
        times = subj.times[1:]
    times = np.asarray(times, dtype=int)
    recorded = set(subj.times.tolist())
    full = build_design(spec, subj, kappa=kappa)
    row_of = {int(t): i for i, t in enumerate(subj.times)}
    idx = full.act_state_idx
    lam_g = psi.lam[:, idx]
    T1 = np.diag(psi.t_diag[full.group_idx, idx])
    c_g = psi.c[idx]
    Q_g = psi.Q[np.ix_(idx, idx)]
    fams = psi.families(spec)

    theta = np.empty((times.size, spec.p))
    for i, t in enumerate(times):
        t = int(t)
        if t not in recorded:
            raise DimensionMismatch(
                f"time {t} is not a recorded time of subject "
                f"{subj.subject_id!r} (its indicators are unknown)"
            )
        if t <= subj.times[0]:
            raise DimensionMismatch(
                f"time {t} has no earlier data to predict from"
            )
        hist = subj.up_to(t - 1)
        asm = build_design(spec, hist, kappa=kappa).to_assembled(psi)
        lin, _ = find_mode(asm.model, asm.z)
        x_s = lin.filt.a_filt[-1]
        for _ in range(t - int(hist.times[-1])):
            x_s = T1 @ x_s + c_g
        r = row_of[t]
        lam_t = lam_g * full.gates[r]
        theta[i] = lam_t @ x_s + full.x[r] @ psi.beta.T
    response = np.column_stack([fams[j].mean(theta[:, j])
                                for j in range(spec.p)])
    return OneStepPath(times=times, theta=theta, response=response)


# ---------------------------------------------------------------------------
# Predicted treatment effect
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectPrediction:
    """Treated-minus-untreated prediction at one time, all else equal.

    `effect` is on the natural-parameter scale; by linearity of the signal
    it equals the treatment-gated loading columns times the predicted state
    mean, so channels with zero gated loadings show exactly zero effect.
    """

    at_time: int
    effect: np.ndarray            # (p,)
    theta_treated: np.ndarray
    theta_untreated: np.ndarray
    response_treated: np.ndarray
    response_untreated: np.ndarray
    state_mean: np.ndarray
    state_names: tuple
    channel_names: tuple


def predicted_treatment_effect(spec: MrssSpec, subj: SubjectData,
                               psi: ParameterSet, at_time: int,
                               scenario: Scenario | None = None, *,
                               kappa: float | None = 1e7) -> EffectPrediction:
    """Forecast at `at_time` with the treatment stream on versus off.

    Both forecasts share the history (data strictly before `at_time`), the
    non-treatment indicator streams and the covariates; only the treatment
    indicator at the target time differs. Without an explicit scenario the
    non-treatment context is read off the subject's recording at `at_time`
    (which must then exist).
    """
    if not spec.is_treated(subj.group):
        raise UntreatedGroup(
            f"group {subj.group!r} has no effective treatment-gated state"
        )
    at_time = int(at_time)
    earlier = subj.times[subj.times < at_time]
    if earlier.size == 0:
        raise DimensionMismatch(
            f"no data before grid time {at_time} to condition on"
        )
    origin = int(earlier[-1])
    h = at_time - origin
    base = _effect_scenario(spec, subj, scenario, at_time, h)

    on = dataclasses.replace(
        base, treatment=_set_last(base.treatment, h, 1.0))
    off = dataclasses.replace(
        base, treatment=_set_last(base.treatment, h, 0.0))
    fc1 = forecast(spec, subj, psi, h, on, origin=origin, kappa=kappa)
    fc0 = forecast(spec, subj, psi, h, off, origin=origin, kappa=kappa)
    return EffectPrediction(
        at_time=at_time,
        effect=fc1.theta[-1] - fc0.theta[-1],
        theta_treated=fc1.theta[-1],
        theta_untreated=fc0.theta[-1],
        response_treated=fc1.response[-1],
        response_untreated=fc0.response[-1],
        state_mean=fc1.state_mean[-1],
        state_names=fc1.state_names,
        channel_names=fc1.channel_names,
    )


def _set_last(stream, horizon, value):
    if stream is None:
        out = np.zeros((horizon, 1))
    else:
        out = np.array(np.asarray(stream, dtype=float), ndmin=2)
        if out.shape[0] == 1 and horizon > 1:
            out = out.T
        out = out.copy()
    out[-1, :] = value
    return out


def _effect_scenario(spec, subj, scenario, at_time, horizon):
    """A complete scenario for the effect forecast, derived if not given."""
    if scenario is not None:
        return scenario
    act = spec.active_states(subj.group)
    extra = sorted({
        st.gate for k, st in enumerate(spec.states)
        if act[k] and st.gate not in (None, TREATMENT)
    })
    row = np.flatnonzero(subj.times == at_time)
    indicators = {}
    for name in extra:
        if row.size == 0 or name not in subj.indicators:
            raise ScenarioIncomplete(
                f"no recording at time {at_time} to read stream {name!r} "
                "from; pass an explicit scenario"
            )
        vals = subj.indicators[name][row[0]]
        indicators[name] = np.tile(vals, (horizon, 1)) * 0.0
        indicators[name][-1] = vals
    x = None
    if spec.q and not subj.x_constant:
        if row.size == 0:
            raise ScenarioIncomplete(
                f"no recording at time {at_time} to read covariates from; "
                "pass an explicit scenario"
            )
        x = np.tile(subj.x[row[0]], (horizon, 1))
    return Scenario(treatment=np.zeros((horizon, 1)), indicators=indicators,
                    x=x)
