"""Kinetic parameter sets, calibration masks and the simulator config file."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
import yaml

from ..exceptions import ConfigError, InvalidArgumentError
from .layout import METABOLITES, read_stoichiometry

V_MAX = (
    "HK", "PGI", "PFK/ALD", "PGK", "PK", "fLDH", "rLDH", "PyrT", "fLacT", "rLacT",
    "OP", "NOP", "PDH", "CS", "fCITS/ISOD", "rCITS/ISOD", "AKGDH", "SDH", "fFUM", "rFUM",
    "fMDH", "rMDH", "ME", "PC", "fGLNS", "rGLNS", "fGLDH", "rGLDH", "fAlaTA", "rAlaTA",
    "AlaT", "GluT", "GlnT", "SAL", "fASTA", "rASTA", "AspT", "ACL", "growth",
)
K_M = (
    "GLC", "G6P", "F6P", "GAP", "PEP", "PYR", "LAC", "EPYR", "ELAC", "Ru5P", "AcCoA",
    "OAA", "CIT", "AKG", "SUC", "FUM", "MAL", "GLN", "GLU", "NH4", "ALA", "EGLN",
    "SER", "ASP", "EASP", "GLY",
)
K_I = ("G6P", "LactoHK", "PYR", "LactoPyr", "LactoGLNS", "GLN")
K_A = ("F6P", "GLN")

PARAM_NAMES = (
    tuple(f"v_max.{n}" for n in V_MAX)
    + tuple(f"K_m.{n}" for n in K_M)
    + tuple(f"K_i.{n}" for n in K_I)
    + tuple(f"K_a.{n}" for n in K_A)
)
PARAM_INDEX = {n: i for i, n in enumerate(PARAM_NAMES)}
assert len(PARAM_NAMES) == 73

# calibration sets of the three case studies (nested: 20 < 30 < 40)
CASE_20 = (
    "v_max.HK", "v_max.PGI", "v_max.PFK/ALD", "v_max.PGK", "v_max.PK", "v_max.fLDH",
    "v_max.PyrT", "v_max.fLacT", "v_max.OP", "v_max.NOP", "v_max.PDH", "v_max.CS",
    "v_max.ME", "v_max.fMDH", "v_max.GlnT",
    "K_m.NH4", "K_m.ALA", "K_m.GLC", "K_m.GLN", "K_m.GLU",
)
CASE_30 = CASE_20 + (
    "v_max.fCITS/ISOD", "v_max.AKGDH", "v_max.SDH", "v_max.fFUM", "v_max.PC",
    "v_max.fGLNS", "v_max.fGLDH", "v_max.fAlaTA", "v_max.AlaT", "v_max.GluT",
)
CASE_40 = CASE_30 + (
    "K_m.SER", "v_max.SAL", "K_m.Ru5P", "K_m.PYR", "K_m.AcCoA", "K_m.OAA",
    "K_m.CIT", "K_m.AKG", "K_m.MAL", "K_m.EGLN",
)
CASE_STUDIES = {20: CASE_20, 30: CASE_30, 40: CASE_40}


def case_mask(case: int) -> np.ndarray:
    try:
        names = CASE_STUDIES[int(case)]
    except KeyError:
        raise InvalidArgumentError(f"unknown case study {case!r}; expected one of 20, 30, 40") from None
    mask = np.zeros(len(PARAM_NAMES), dtype=bool)
    mask[[PARAM_INDEX[n] for n in names]] = True
    return mask


@dataclass
class KineticParams:
    """Full 73-entry parameter vector, its bounds and the calibration mask.

    ``beta`` is the masked sub-vector; :meth:`with_beta` writes a new one
    back into a copy of the full vector.
    """

    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mask: np.ndarray = field(default_factory=lambda: np.zeros(len(PARAM_NAMES), dtype=bool))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        self.lower = np.asarray(self.lower, dtype=float).copy()
        self.upper = np.asarray(self.upper, dtype=float).copy()
        self.mask = np.asarray(self.mask, dtype=bool).copy()
        n = len(PARAM_NAMES)
        for arr in (self.values, self.lower, self.upper, self.mask):
            if arr.shape != (n,):
                raise InvalidArgumentError(f"kinetic parameter arrays must have {n} entries")
        if np.any(self.values <= 0) or np.any(self.lower <= 0):
            raise InvalidArgumentError("kinetic parameters and lower bounds must be strictly positive")
        if np.any(self.lower > self.upper):
            raise InvalidArgumentError("lower bound exceeds upper bound")

    @property
    def names(self):
        return PARAM_NAMES

    @property
    def calibrated_names(self):
        return tuple(n for n, m in zip(PARAM_NAMES, self.mask) if m)

    @property
    def beta(self):
        return self.values[self.mask].copy()

    @property
    def beta_lower(self):
        return self.lower[self.mask].copy()

    @property
    def beta_upper(self):
        return self.upper[self.mask].copy()

    def with_beta(self, beta) -> "KineticParams":
        beta = np.asarray(beta, dtype=float).ravel()
        if beta.size != self.mask.sum():
            raise InvalidArgumentError(f"expected {self.mask.sum()} calibration values, got {beta.size}")
        vals = self.values.copy()
        vals[self.mask] = beta
        return replace(self, values=vals)

    def with_mask(self, mask) -> "KineticParams":
        return replace(self, mask=np.asarray(mask, dtype=bool))

    def __getitem__(self, name):
        return self.values[PARAM_INDEX[name]]

    def as_dict(self):
        return dict(zip(PARAM_NAMES, self.values.tolist()))


@dataclass(frozen=True)
class GrowthConstants:
    mu_max: float
    k_d: float
    K_Dlac: float
    K_glc: float
    K_Ilac: float

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise InvalidArgumentError(f"growth constant {k} must be > 0")


@dataclass(frozen=True)
class RewardConstants:
    c_r: float = 30.0
    c_m: float = 120.0
    c_l: float = 84.0
    yield_conversion: float = 1.0
    lactate_cap: float = 1.0
    density_cap: float = 1.0

    def __post_init__(self):
        for k in ("c_r", "c_m", "c_l"):
            if getattr(self, k) < 0:
                raise InvalidArgumentError(f"reward constant {k} must be >= 0")

    @property
    def shift(self):
        return self.c_m + self.c_l * self.lactate_cap

    @property
    def r_max(self):
        """Upper end of the shifted reward range used for normalisation."""
        return self.shift + self.c_r * self.yield_conversion * self.density_cap


@dataclass
class KineticConfig:
    """Everything needed to build the iPSC emulator."""

    params: KineticParams
    growth: GrowthConstants
    reward: RewardConstants
    fresh_medium: np.ndarray
    initial_density: float
    dt: float = 4.0
    substeps: int = 16
    noise_fraction: float = 0.05
    noise_rule: str = "sd"
    initial_perturbation: float = 0.2
    stoichiometry: np.ndarray | None = None

    @property
    def base_state(self):
        return np.concatenate([[self.initial_density], self.fresh_medium])

    def noise_sd(self):
        """Per-entry noise standard deviations from the base state.

        ``sd`` rule: sd = fraction * s0.  ``variance`` rule: var = fraction * s0.
        """
        s0 = self.base_state
        if self.noise_rule == "sd":
            return self.noise_fraction * np.abs(s0)
        if self.noise_rule == "variance":
            return np.sqrt(self.noise_fraction * np.abs(s0))
        raise ConfigError(f"unknown noise rule {self.noise_rule!r}")


def _flatten(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_parameter_tree(tree) -> dict:
    """Accept nested (``v_max: {HK: 2.92}``) or dotted (``v_max.HK: 2.92``) keys."""
    flat = _flatten(tree or {})
    unknown = sorted(set(flat) - set(PARAM_NAMES))
    if unknown:
        raise ConfigError(f"unknown kinetic parameter(s): {', '.join(unknown)}")
    return {k: float(v) for k, v in flat.items()}


def _default_text():
    return resources.files("actorsim.kinetics.data").joinpath("ipsc_default.yaml").read_text()


def load_kinetic_config(path=None, overrides=None, case=None) -> KineticConfig:
    """Read a simulator config (the packaged default when ``path`` is None).

    A user file only needs the keys it changes; everything else falls back
    to the packaged defaults.
    """
    base = yaml.safe_load(_default_text())
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        base = _merge(base, user)
    if overrides:
        base = _merge(base, overrides)
    return kinetic_config_from_dict(base, case=case)


def _merge(a, b):
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def kinetic_config_from_dict(tree, case=None) -> KineticConfig:
    try:
        values = parse_parameter_tree(tree["parameters"])
        missing = [n for n in PARAM_NAMES if n not in values]
        if missing:
            raise ConfigError(f"missing kinetic parameter(s): {', '.join(missing)}")
        vals = np.array([values[n] for n in PARAM_NAMES])
        bounds = tree.get("bounds", {})
        lo = vals * float(bounds.get("lower_factor", 1e-6))
        hi = vals * float(bounds.get("upper_factor", 4.0))
        for name, (l, h) in (bounds.get("explicit") or {}).items():
            if name not in PARAM_INDEX:
                raise ConfigError(f"bounds given for unknown parameter {name}")
            lo[PARAM_INDEX[name]], hi[PARAM_INDEX[name]] = float(l), float(h)
        mask = case_mask(case if case is not None else tree.get("case", 20))
        params = KineticParams(vals, lo, hi, mask)

        fresh = tree["fresh_medium"]
        missing = [m for m in METABOLITES if m not in fresh]
        if missing:
            raise ConfigError(f"fresh_medium lacks: {', '.join(missing)}")
        sim = tree.get("simulation", {})
        noise = tree.get("noise", {})
        stoich = tree.get("stoichiometry_file")
        return KineticConfig(
            params=params,
            growth=GrowthConstants(**{k: float(v) for k, v in tree["growth"].items()}),
            reward=RewardConstants(**{k: float(v) for k, v in tree.get("reward", {}).items()}),
            fresh_medium=np.array([float(fresh[m]) for m in METABOLITES]),
            initial_density=float(tree["initial_density"]),
            dt=float(sim.get("dt", 4.0)),
            substeps=int(sim.get("substeps", 16)),
            noise_fraction=float(noise.get("fraction", 0.05)),
            noise_rule=str(noise.get("rule", "sd")),
            initial_perturbation=float(sim.get("initial_perturbation", 0.2)),
            stoichiometry=read_stoichiometry(stoich),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed kinetic config: {exc}") from exc


def write_parameter_file(path, params: KineticParams):
    """Nested YAML with one ``section: {name: value}`` block per parameter kind."""
    tree: dict = {}
    for name, v in zip(PARAM_NAMES, params.values):
        sec, key = name.split(".", 1)
        tree.setdefault(sec, {})[key] = float(v)
    with open(path, "w") as fh:
        yaml.safe_dump({"parameters": tree}, fh, sort_keys=False)
