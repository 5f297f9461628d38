"""iPSC culture emulator: Michaelis-Menten fluxes, growth, exchange, Euler steps.

All flux and integration helpers accept parameters as a sequence of 73
entries that may mix floats and :class:`~actorsim.dual.Dual` seeds, so
the same code yields the simulator and the parameter Jacobian.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .. import dual
from ..exceptions import DivergedSimulationError, InvalidArgumentError, InvalidStateError
from ..models import GaussianTransitionModel
from .layout import (
    INDEX, METABOLITES, N_REACTIONS, REACTION_NAMES, SPECIES, STATE_DIM, default_stoichiometry,
)
from .params import PARAM_INDEX, GrowthConstants, KineticConfig, RewardConstants

# concentrations that appear in a denominator are floored here
DENOM_FLOOR = 1e-3


def _mm(c, k):
    return c / (k + c)


def _inh(c, k):
    return k / (k + c)


class _Params:
    """Name lookup over a 73-entry parameter sequence."""

    __slots__ = ("p",)

    def __init__(self, p):
        self.p = p

    def v(self, name):
        return self.p[PARAM_INDEX["v_max." + name]]

    def km(self, name):
        return self.p[PARAM_INDEX["K_m." + name]]

    def ki(self, name):
        return self.p[PARAM_INDEX["K_i." + name]]

    def ka(self, name):
        return self.p[PARAM_INDEX["K_a." + name]]


def _flux_terms(c, P: _Params):
    """Forward and reverse terms per reaction, in :data:`REACTION_NAMES` order.

    ``c`` maps species names to concentration arrays (or duals).
    """
    m, km = _mm, P.km
    f6p = dual.floor(c["F6P"], DENOM_FLOOR)
    gln_floor = dual.floor(c["GLN"], DENOM_FLOOR)
    glc, g6p, lac, pyr = c["GLC"], c["G6P"], c["LAC"], c["PYR"]
    akg, mal, oaa, glu, nh4 = c["AKG"], c["MAL"], c["OAA"], c["GLU"], c["NH4"]
    gln, ala, cit = c["GLN"], c["ALA"], c["CIT"]

    pk_den = km("PEP") * (1.0 + P.ka("F6P") / f6p) + c["PEP"]
    fwd = [
        P.v("HK") * m(glc, km("GLC")) * _inh(g6p, P.ki("G6P")) * _inh(lac, P.ki("LactoHK")),
        P.v("PGI") * m(g6p, km("G6P")),
        P.v("PFK/ALD") * m(c["F6P"], km("F6P")),
        P.v("PGK") * m(c["GAP"], km("GAP")),
        P.v("PK") * c["PEP"] / pk_den,
        P.v("fLDH") * m(pyr, km("PYR")),
        P.v("PyrT") * m(c["EPYR"], km("EPYR")) * _inh(lac, P.ki("LactoPyr")),
        P.v("fLacT") * m(lac, km("LAC")),
        P.v("OP") * m(g6p, km("G6P")),
        P.v("NOP") * m(c["Ru5P"], km("Ru5P")),
        P.v("PDH") * m(pyr, km("PYR")),
        P.v("CS") * m(c["AcCoA"], km("AcCoA")) * m(oaa, km("OAA")),
        P.v("fCITS/ISOD") * m(cit, km("CIT")),
        P.v("AKGDH") * m(akg, km("AKG")),
        P.v("SDH") * m(c["SUC"], km("SUC")),
        P.v("fFUM") * m(c["FUM"], km("FUM")),
        P.v("fMDH") * m(mal, km("MAL")),
        P.v("ME") * m(mal, km("MAL")),
        P.v("PC") * m(pyr, km("PYR")),
        P.v("fGLNS") * m(gln, km("GLN")) * _inh(lac, P.ki("LactoGLNS")),
        P.v("fGLDH") * m(glu, km("GLU")),
        P.v("fAlaTA") * m(glu, km("GLU")) * m(pyr, km("PYR")),
        P.v("AlaT") * m(ala, km("ALA")),
        P.v("GluT") * m(glu, km("GLU")),
        P.v("GlnT") * m(c["EGLN"], km("EGLN")) * _inh(gln, P.ki("GLN")),
        P.v("SAL") * m(c["SER"], km("SER")),
        P.v("fASTA") * m(c["ASP"], km("ASP")) * m(akg, km("AKG")),
        P.v("AspT") * m(c["EASP"], km("EASP")),
        P.v("ACL") * m(cit, km("CIT")),
        P.v("growth") * m(gln, km("GLN")) * m(glc, km("GLC")) * m(glu, km("GLU")) * m(ala, km("ALA"))
        * m(c["ASP"], km("ASP")) * m(c["SER"], km("SER")) * m(c["GLY"], km("GLY")),
    ]
    rev = {
        "LDH": P.v("rLDH") * m(lac, km("LAC")) * _inh(pyr, P.ki("PYR")),
        "LacT": P.v("rLacT") * m(c["ELAC"], km("ELAC")),
        "CITS/ISOD": P.v("rCITS/ISOD") * m(akg, km("AKG")),
        "FUM": P.v("rFUM") * m(mal, km("MAL")),
        "MDH": P.v("rMDH") * m(oaa, km("OAA")),
        "GLNS": P.v("rGLNS") * m(glu, km("GLU")) * m(nh4, km("NH4")),
        "GLDH": P.v("rGLDH") * m(akg, km("AKG")) * m(nh4, km("NH4")),
        "AlaTA": P.v("rAlaTA") * m(ala, km("ALA")) * m(akg, km("AKG")) * (1.0 + P.ka("GLN") / gln_floor),
        "ASTA": P.v("rASTA") * m(glu, km("GLU")) * m(oaa, km("OAA")) * m(nh4, km("NH4")),
    }
    return fwd, rev


# The same rate laws as _flux_terms, as a table for the vectorised float path.
# Each term is (reaction, sign, v_max name, Michaelis factors, inhibition factors);
# a factor is (species, constant name).  PK and the AlaTA activation are handled
# separately in _net_fluxes_array.
_TERMS = (
    ("HK", 1, "HK", [("GLC", "GLC")], [("G6P", "G6P"), ("LAC", "LactoHK")]),
    ("PGI", 1, "PGI", [("G6P", "G6P")], []),
    ("PFK/ALD", 1, "PFK/ALD", [("F6P", "F6P")], []),
    ("PGK", 1, "PGK", [("GAP", "GAP")], []),
    ("LDH", 1, "fLDH", [("PYR", "PYR")], []),
    ("LDH", -1, "rLDH", [("LAC", "LAC")], [("PYR", "PYR")]),
    ("PyrT", 1, "PyrT", [("EPYR", "EPYR")], [("LAC", "LactoPyr")]),
    ("LacT", 1, "fLacT", [("LAC", "LAC")], []),
    ("LacT", -1, "rLacT", [("ELAC", "ELAC")], []),
    ("OP", 1, "OP", [("G6P", "G6P")], []),
    ("NOP", 1, "NOP", [("Ru5P", "Ru5P")], []),
    ("PDH", 1, "PDH", [("PYR", "PYR")], []),
    ("CS", 1, "CS", [("AcCoA", "AcCoA"), ("OAA", "OAA")], []),
    ("CITS/ISOD", 1, "fCITS/ISOD", [("CIT", "CIT")], []),
    ("CITS/ISOD", -1, "rCITS/ISOD", [("AKG", "AKG")], []),
    ("AKGDH", 1, "AKGDH", [("AKG", "AKG")], []),
    ("SDH", 1, "SDH", [("SUC", "SUC")], []),
    ("FUM", 1, "fFUM", [("FUM", "FUM")], []),
    ("FUM", -1, "rFUM", [("MAL", "MAL")], []),
    ("MDH", 1, "fMDH", [("MAL", "MAL")], []),
    ("MDH", -1, "rMDH", [("OAA", "OAA")], []),
    ("ME", 1, "ME", [("MAL", "MAL")], []),
    ("PC", 1, "PC", [("PYR", "PYR")], []),
    ("GLNS", 1, "fGLNS", [("GLN", "GLN")], [("LAC", "LactoGLNS")]),
    ("GLNS", -1, "rGLNS", [("GLU", "GLU"), ("NH4", "NH4")], []),
    ("GLDH", 1, "fGLDH", [("GLU", "GLU")], []),
    ("GLDH", -1, "rGLDH", [("AKG", "AKG"), ("NH4", "NH4")], []),
    ("AlaTA", 1, "fAlaTA", [("GLU", "GLU"), ("PYR", "PYR")], []),
    ("AlaTA", -1, "rAlaTA", [("ALA", "ALA"), ("AKG", "AKG")], []),
    ("AlaT", 1, "AlaT", [("ALA", "ALA")], []),
    ("GluT", 1, "GluT", [("GLU", "GLU")], []),
    ("GlnT", 1, "GlnT", [("EGLN", "EGLN")], [("GLN", "GLN")]),
    ("SAL", 1, "SAL", [("SER", "SER")], []),
    ("ASTA", 1, "fASTA", [("ASP", "ASP"), ("AKG", "AKG")], []),
    ("ASTA", -1, "rASTA", [("GLU", "GLU"), ("OAA", "OAA"), ("NH4", "NH4")], []),
    ("AspT", 1, "AspT", [("EASP", "EASP")], []),
    ("ACL", 1, "ACL", [("CIT", "CIT")], []),
    ("growth", 1, "growth", [("GLN", "GLN"), ("GLC", "GLC"), ("GLU", "GLU"), ("ALA", "ALA"), ("ASP", "ASP"),
                             ("SER", "SER"), ("GLY", "GLY")], []),
)


def _build_term_tables():
    sp, kp, inh, starts, vidx = [], [], [], [], []
    M = np.zeros((len(_TERMS), N_REACTIONS))
    for i, (rxn, sign, vname, mms, inhs) in enumerate(_TERMS):
        starts.append(len(sp))
        vidx.append(PARAM_INDEX["v_max." + vname])
        M[i, REACTION_NAMES.index(rxn)] = sign
        for s, k in mms:
            sp.append(INDEX[s]), kp.append(PARAM_INDEX["K_m." + k]), inh.append(False)
        for s, k in inhs:
            sp.append(INDEX[s]), kp.append(PARAM_INDEX["K_i." + k]), inh.append(True)
    rev_alata = [i for i, term in enumerate(_TERMS) if term[0] == "AlaTA" and term[1] < 0][0]
    return (np.array(sp), np.array(kp), np.array(inh), np.array(starts), np.array(vidx), M, rev_alata)


_SP, _KP, _INH, _STARTS, _VIDX, _TERM_MAP, _REV_ALATA = _build_term_tables()
_PK = REACTION_NAMES.index("PK")


def _net_fluxes_array(state, values):
    """Float-only net fluxes ``(B, 30)``; agrees with :func:`_net_fluxes` to rounding."""
    values = np.asarray(values, dtype=float)
    c = state[:, _SP]
    k = values[_KP]
    fac = np.where(_INH, k, c) / (k + c)
    terms = np.multiply.reduceat(fac, _STARTS, axis=1) * values[_VIDX]
    gln = np.maximum(state[:, INDEX["GLN"]], DENOM_FLOOR)
    terms[:, _REV_ALATA] *= 1.0 + values[PARAM_INDEX["K_a.GLN"]] / gln
    v = terms @ _TERM_MAP
    f6p = np.maximum(state[:, INDEX["F6P"]], DENOM_FLOOR)
    pep = state[:, INDEX["PEP"]]
    den = values[PARAM_INDEX["K_m.PEP"]] * (1.0 + values[PARAM_INDEX["K_a.F6P"]] / f6p) + pep
    v[:, _PK] = values[PARAM_INDEX["v_max.PK"]] * pep / den
    return v


def _species(state):
    """Column views of a ``(B, 34)`` state (array or dual)."""
    return {name: state[:, i] for name, i in INDEX.items()}


def _net_fluxes(state, params):
    fwd, rev = _flux_terms(_species(state), _Params(params))
    return [f - rev[name] if name in rev else f for name, f in zip(REACTION_NAMES, fwd)]


def _growth(c, g: GrowthConstants):
    glc, egln, elac = c["GLC"], c["EGLN"], c["ELAC"]
    mu = g.mu_max * _mm(glc, g.K_glc) * _mm(egln, g.K_glc) * _inh(elac, g.K_Ilac)
    mu_d = g.k_d * _mm(elac, g.K_Dlac)
    return mu, mu_d


def _check_state(state):
    state = np.atleast_2d(np.asarray(state, dtype=float))
    if state.shape[-1] != STATE_DIM:
        raise InvalidArgumentError(f"expected {STATE_DIM} state entries, got {state.shape[-1]}")
    if not np.isfinite(state).all():
        raise InvalidStateError("state has non-finite entries")
    if (state < 0).any():
        bad = int(np.argwhere(state < 0)[0, -1])
        raise InvalidStateError(f"negative concentration for {SPECIES[bad]}")
    return state


def flux_rates(state, params) -> np.ndarray:
    """Net flux vector (30 entries) per state; reversible pairs are forward minus reverse.

    Parameters
    ----------
    state : array_like, shape (34,) or (B, 34)
    params : KineticParams or array_like of 73 values

    Returns
    -------
    ndarray, shape (30,) or (B, 30)
    """
    single = np.ndim(state) == 1
    state = _check_state(state)
    values = getattr(params, "values", params)
    v = _net_fluxes_array(state, values)
    return v[0] if single else v


def flux_components(state, params):
    """Forward and reverse terms separately: ``(forward (B,30), {name: reverse (B,)})``."""
    state = _check_state(state)
    values = list(np.asarray(getattr(params, "values", params), dtype=float))
    fwd, rev = _flux_terms(_species(state), _Params(values))
    return np.stack(fwd, axis=-1), rev


def growth_rate(state, growth: GrowthConstants):
    """Specific growth and death rates ``(mu, mu_d)`` in 1/h."""
    single = np.ndim(state) == 1
    state = _check_state(state)
    mu, mu_d = _growth(_species(state), growth)
    if single:
        return float(mu[0]), float(mu_d[0])
    return mu, mu_d


def apply_medium_exchange(metabolites, fresh, b):
    """``b * fresh + (1 - b) * metabolites`` row-wise; ``b`` scalar or per row."""
    b = np.asarray(b, dtype=float)
    if np.any(b < 0) or np.any(b > 1) or not np.isfinite(b).all():
        raise InvalidArgumentError("exchange ratio b must lie in [0, 1]")
    u = np.asarray(metabolites, dtype=float)
    bb = b[..., None] if (b.ndim and u.ndim > 1) else b
    return bb * np.asarray(fresh, dtype=float) + (1.0 - bb) * u


def exchange_state(states, fresh, b):
    """Apply the exchange to full ``(B, 34)`` states; X is untouched."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    out = states.copy()
    out[:, 1:] = apply_medium_exchange(states[:, 1:], fresh, np.broadcast_to(b, (states.shape[0],)))
    return out


def integrate(states, params, growth: GrowthConstants, stoich, dt, substeps, fresh=None, b=None):
    """Exchange (optional) then ``substeps`` explicit Euler steps with clamping.

    ``params`` may contain duals; the result is then a dual.
    """
    if dt <= 0 or substeps < 1:
        raise InvalidArgumentError("need dt > 0 and substeps >= 1")
    s = np.atleast_2d(np.asarray(states, dtype=float))
    if fresh is not None:
        s = exchange_state(s, fresh, b)
    h = dt / substeps
    plain = not any(isinstance(p, dual.Dual) for p in params)
    for k in range(substeps):
        v = _net_fluxes_array(s, params) if plain else dual.stack(_net_fluxes(s, params), axis=-1)
        x = s[:, 0]
        mu, mu_d = _growth(_species(s), growth)
        dx = (mu - mu_d) * x
        du = dual.matmul_const(v, stoich) * _col(x)
        deriv = dual.concatenate([_col(dx), du], axis=-1)
        s = dual.clamp_nonnegative(s + h * deriv)
        vals = dual.value(s)
        if not np.isfinite(vals).all():
            idx = int(np.argwhere(~np.isfinite(vals))[0, -1])
            raise DivergedSimulationError(
                f"non-finite {SPECIES[idx]} at substep {k}",
                step=k, index=idx,
            )
    return s


def _col(x):
    """Append a trailing unit axis to an array or dual."""
    if isinstance(x, dual.Dual):
        return dual.Dual(x.val[..., None], x.tan[..., None, :])
    return np.asarray(x)[..., None]


class IPSCReward:
    """Economic reward of one interval.

    ``raw = c_r * yield * dX - c_m * b - c_l * dELAC`` with the changes
    measured from the post-exchange state.  ``shifted`` adds
    ``c_m + c_l * lactate_cap`` and clips at zero; ``normalized`` divides
    the shifted value by ``r_max`` and clips to [0, 1].
    """

    def __init__(self, constants: RewardConstants, fresh, scale="normalized"):
        if scale not in ("raw", "shifted", "normalized"):
            raise InvalidArgumentError(f"unknown reward scale {scale!r}")
        self.constants = constants
        self.fresh = np.asarray(fresh, dtype=float)
        self.scale = scale

    def raw(self, prev_states, b, next_states):
        prev = np.atleast_2d(prev_states)
        nxt = np.atleast_2d(next_states)
        b = np.broadcast_to(np.asarray(b, dtype=float), (prev.shape[0],))
        c = self.constants
        e = INDEX["ELAC"]
        elac_plus = b * self.fresh[e - 1] + (1 - b) * prev[:, e]
        d_x = nxt[:, 0] - prev[:, 0]
        return c.c_r * c.yield_conversion * d_x - c.c_m * b - c.c_l * (nxt[:, e] - elac_plus)

    def shifted(self, prev_states, b, next_states):
        return np.maximum(self.raw(prev_states, b, next_states) + self.constants.shift, 0.0)

    def normalized(self, prev_states, b, next_states):
        return np.clip(self.shifted(prev_states, b, next_states) / self.constants.r_max, 0.0, 1.0)

    def __call__(self, prev_states, b, next_states):
        return getattr(self, self.scale)(prev_states, b, next_states)

    @property
    def r_max(self):
        return {"raw": np.inf, "shifted": self.constants.r_max, "normalized": 1.0}[self.scale]


def reward(prev_state, b, next_state, constants: RewardConstants, fresh, shifted=False) -> float:
    """Scalar reward of one interval; see :class:`IPSCReward`."""
    r = IPSCReward(constants, fresh)
    out = (r.shifted if shifted else r.raw)(prev_state, b, next_state)
    return float(out[0]) if np.ndim(prev_state) == 1 else out


class IPSCModel(GaussianTransitionModel):
    """Digital-twin and physical-system model over the masked parameter set.

    ``beta`` is the calibration sub-vector; the remaining kinetic
    parameters are held at their configured values.
    """

    nonnegative_states = True

    def __init__(self, config: KineticConfig):
        self.config = config
        self.params = config.params
        self.mask = config.params.mask.copy()
        self.state_dim = STATE_DIM
        self.n_params = int(self.mask.sum())
        self.noise_sd = config.noise_sd()
        self.lower = config.params.beta_lower
        self.upper = config.params.beta_upper
        self.stoich = config.stoichiometry if config.stoichiometry is not None else default_stoichiometry()
        if self.stoich.shape != (len(METABOLITES), N_REACTIONS):
            raise InvalidArgumentError(f"stoichiometry must be {len(METABOLITES)} x {N_REACTIONS}")
        self.fresh = config.fresh_medium.copy()
        self._masked_idx = np.flatnonzero(self.mask)

    @property
    def beta_true(self):
        return self.params.beta

    @property
    def param_names(self):
        return self.params.calibrated_names

    def full_params(self, beta):
        full = list(self.params.values)
        for j, i in enumerate(self._masked_idx):
            full[i] = beta[j]
        return full

    def _mean(self, states, b, beta):
        cfg = self.config
        return integrate(states, self.full_params(beta), cfg.growth, self.stoich, cfg.dt, cfg.substeps,
                         fresh=self.fresh, b=b)

    def with_substeps(self, substeps) -> "IPSCModel":
        return IPSCModel(replace(self.config, substeps=int(substeps)))

    def with_noise(self, noise_sd) -> "IPSCModel":
        out = IPSCModel(self.config)
        out.noise_sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (STATE_DIM,)).copy()
        return out

    def reward_fn(self, scale="normalized") -> IPSCReward:
        return IPSCReward(self.config.reward, self.fresh, scale=scale)

    def initial_sampler(self):
        """Base state with independent multiplicative U(1 - p, 1 + p) perturbations."""
        base = self.config.base_state
        p = self.config.initial_perturbation

        def sample(n, rng):
            return base * rng.uniform(1 - p, 1 + p, size=(n, base.size))

        return sample

    def fluxes(self, states, beta):
        return flux_rates(states, self.full_params(np.asarray(beta, dtype=float)))


def flux_mape(states, beta_hat, beta_true, model: IPSCModel, eps=1e-12) -> np.ndarray:
    """Per-flux mean absolute percentage error (in %) over a probe set of states.

    Fluxes whose true value is below ``eps`` in magnitude are skipped in the
    mean for that state; a flux that is never measurable reports 0.
    """
    v_hat = model.fluxes(states, beta_hat)
    v_true = model.fluxes(states, beta_true)
    ok = np.abs(v_true) > eps
    ape = np.where(ok, np.abs(v_hat - v_true) / np.where(ok, np.abs(v_true), 1.0), 0.0)
    counts = ok.sum(axis=0)
    return 100.0 * np.where(counts > 0, ape.sum(axis=0) / np.maximum(counts, 1), 0.0)


def mean_transition(state, b, params, growth, fresh, dt=4.0, substeps=16, stoich=None):
    """Noise-free next state(s) from pre-exchange ``state`` under ratio ``b``."""
    single = np.ndim(state) == 1
    values = list(np.asarray(getattr(params, "values", params), dtype=float))
    stoich = default_stoichiometry() if stoich is None else stoich
    out = integrate(_check_state(state), values, growth, stoich, dt, substeps, fresh=fresh, b=b)
    return out[0] if single else out


def sample_transition(state, b, params, growth, fresh, noise_sd, rng, dt=4.0, substeps=16, stoich=None):
    m = np.atleast_2d(mean_transition(state, b, params, growth, fresh, dt, substeps, stoich))
    out = np.maximum(m + np.asarray(noise_sd) * rng.standard_normal(m.shape), 0.0)
    return out[0] if np.ndim(state) == 1 else out
