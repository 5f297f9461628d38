import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from actorsim.exceptions import ConfigError, InvalidArgumentError, InvalidStateError
from actorsim.kinetics import layout
from actorsim.kinetics.layout import INDEX, METABOLITES, REACTION_NAMES, SPECIES, STATE_DIM
from actorsim.kinetics.model import (IPSCModel, IPSCReward, apply_medium_exchange, exchange_state, flux_mape,
                                     flux_rates, growth_rate, mean_transition, reward, sample_transition)
from actorsim.kinetics.params import (CASE_STUDIES, PARAM_INDEX, PARAM_NAMES, RewardConstants, case_mask,
                                      load_kinetic_config, parse_parameter_tree)


def zero_state(**conc):
    s = np.zeros(STATE_DIM)
    for k, v in conc.items():
        s[INDEX[k]] = v
    return s


def test_layout_sizes():
    assert STATE_DIM == 34 and len(SPECIES) == 34 and SPECIES[0] == "X"
    assert len(set(SPECIES)) == 34
    assert sorted(INDEX.values()) == list(range(34))
    assert len(REACTION_NAMES) == 30


def test_stoichiometry_shape_and_roundtrip(tmp_path):
    N = layout.default_stoichiometry()
    assert N.shape == (len(METABOLITES), 30)
    assert np.all(N == np.round(N))
    assert np.all(np.abs(N).sum(axis=0) > 0)
    path = tmp_path / "n.mtx"
    layout.write_stoichiometry(path, N)
    assert np.array_equal(layout.read_stoichiometry(path), N)


def test_hk_column_consumes_glucose_and_makes_g6p():
    N = layout.default_stoichiometry()
    j = REACTION_NAMES.index("HK")
    m = {name: i for i, name in enumerate(METABOLITES)}
    assert N[m["GLC"], j] < 0 and N[m["G6P"], j] > 0


def test_param_vector_shape_and_cases(kcfg):
    assert len(PARAM_NAMES) == 73
    assert np.all(kcfg.params.values > 0)
    for case, names in CASE_STUDIES.items():
        assert case_mask(case).sum() == case == len(names)
    assert set(CASE_STUDIES[20]) < set(CASE_STUDIES[30]) < set(CASE_STUDIES[40])
    with pytest.raises(InvalidArgumentError):
        case_mask(25)


@pytest.mark.parametrize("name, km_name, vmax", [
    ("HK", "GLC", 2.92), ("PGI", "G6P", None), ("NOP", "Ru5P", 0.02), ("AlaT", "ALA", 0.47),
])
def test_half_saturation_identities(kcfg, name, km_name, vmax):
    P = kcfg.params
    k = P[f"K_m.{km_name}"]
    v = P[f"v_max.{name}"]
    if vmax is not None:
        assert v == vmax
    s = zero_state(**{km_name: k})
    fl = flux_rates(s, P)
    assert fl[REACTION_NAMES.index(name)] == pytest.approx(v / 2, rel=1e-12)


def test_hk_half_rate_at_table_value(kcfg):
    fl = flux_rates(zero_state(GLC=1.46), kcfg.params)
    assert fl[REACTION_NAMES.index("HK")] == pytest.approx(1.46, rel=1e-12)


def test_flux_rates_batch_matches_single(kcfg):
    base = kcfg.base_state
    batch = np.stack([base, base * 1.1])
    out = flux_rates(batch, kcfg.params)
    assert out.shape == (2, 30)
    assert np.allclose(out[1], flux_rates(base * 1.1, kcfg.params))


def test_negative_state_rejected(kcfg):
    s = kcfg.base_state.copy()
    s[INDEX["GLC"]] = -1.0
    with pytest.raises(InvalidStateError):
        flux_rates(s, kcfg.params)


def test_growth_rate_positive(kcfg):
    mu, mu_d = growth_rate(kcfg.base_state, kcfg.growth)
    assert mu > 0 and mu_d > 0


def test_exchange_examples(kcfg):
    u = kcfg.base_state[1:] * 0.3
    fresh = kcfg.fresh_medium
    assert np.allclose(apply_medium_exchange(u, fresh, 1.0), fresh)
    assert np.allclose(apply_medium_exchange(u, fresh, 0.0), u)
    assert np.allclose(apply_medium_exchange(u, fresh, 0.5), 0.5 * (u + fresh))
    for bad in (-0.1, 1.1, np.nan):
        with pytest.raises(InvalidArgumentError):
            apply_medium_exchange(u, fresh, bad)


def test_exchange_keeps_density(kcfg):
    s = kcfg.base_state * 0.5
    out = exchange_state(s, kcfg.fresh_medium, 1.0)
    assert out[0, 0] == s[0]
    assert np.allclose(out[0, 1:], kcfg.fresh_medium)


def test_b1_exchange_resets_before_integration(ipsc, kcfg):
    # the mean transition from any depleted state with b = 1 equals the one from the fresh state
    depleted = kcfg.base_state.copy()
    depleted[1:] *= 0.2
    fresh_state = kcfg.base_state.copy()
    bt = ipsc.beta_true
    assert np.allclose(ipsc.mean(depleted, 1.0, bt), ipsc.mean(fresh_state, 1.0, bt))


@given(st.floats(0, 1), st.floats(0.05, 3.0))
def test_exchange_is_convex_combination(b, scale):
    cfg = load_kinetic_config()
    u = cfg.fresh_medium * scale
    out = apply_medium_exchange(u, cfg.fresh_medium, b)
    lo = np.minimum(u, cfg.fresh_medium) - 1e-12
    hi = np.maximum(u, cfg.fresh_medium) + 1e-12
    assert np.all((out >= lo) & (out <= hi))


def noise_free_episode(model, b, steps=12):
    s = model.config.base_state[None]
    traj = [s[0]]
    for _ in range(steps):
        s = model.mean(s, b, model.beta_true)
        traj.append(s[0])
    return np.array(traj)


def test_noise_free_b0_episode_is_physical(ipsc):
    traj = noise_free_episode(ipsc, 0.0)
    assert np.all(traj >= 0)
    assert np.all(np.diff(traj[:, INDEX["GLC"]]) <= 0)
    assert np.all(np.diff(traj[:, INDEX["ELAC"]]) >= 0)


def test_euler_substeps_converged_from_base_state(ipsc):
    fine = ipsc.with_substeps(1024)
    base = ipsc.config.base_state[None]
    for b in np.linspace(0, 1, 11):
        coarse = ipsc.mean(base, b, ipsc.beta_true)
        ref = fine.mean(base, b, ipsc.beta_true)
        assert np.max(np.abs(coarse - ref) / np.abs(ref)) < 0.01


def test_euler_substeps_converged_along_episode(ipsc):
    # every single interval of the noise-free b = 0 episode, restarted from the reference path
    fine = ipsc.with_substeps(1024)
    s = ipsc.config.base_state[None]
    for _ in range(12):
        ref = fine.mean(s, 0.0, ipsc.beta_true)
        coarse = ipsc.mean(s, 0.0, ipsc.beta_true)
        assert np.max(np.abs(coarse - ref) / np.maximum(np.abs(ref), 1e-12)) < 0.01
        s = ref


def test_zero_noise_sample_equals_mean(ipsc, rng):
    quiet = ipsc.with_noise(0.0)
    s = ipsc.config.base_state[None]
    assert np.array_equal(quiet.sample(s, 0.3, ipsc.beta_true, rng), ipsc.mean(s, 0.3, ipsc.beta_true))


def test_noise_standard_deviation(ipsc, rng):
    n = 100_000
    j = INDEX["GLC"]
    s = np.repeat(ipsc.config.base_state[None], n, axis=0)
    mean = ipsc.mean(s[:1], 0.0, ipsc.beta_true)[0, j]
    out = ipsc.sample(s, 0.0, ipsc.beta_true, rng)[:, j]
    assert np.std(out) == pytest.approx(ipsc.noise_sd[j], rel=0.02)
    assert abs(np.mean(out) - mean) < 4 * ipsc.noise_sd[j] / np.sqrt(n)


def test_noise_rule_variants():
    sd = load_kinetic_config(overrides={"noise": {"rule": "sd", "fraction": 0.05}})
    var = load_kinetic_config(overrides={"noise": {"rule": "variance", "fraction": 0.05}})
    s0 = sd.base_state
    assert np.allclose(sd.noise_sd(), 0.05 * s0)
    assert np.allclose(var.noise_sd() ** 2, 0.05 * s0)
    with pytest.raises(ConfigError):
        load_kinetic_config(overrides={"noise": {"rule": "bogus"}}).noise_sd()


def test_standalone_transition_functions(kcfg, rng):
    P = kcfg.params
    s = kcfg.base_state
    m = mean_transition(s, 0.2, P, kcfg.growth, kcfg.fresh_medium, dt=kcfg.dt, substeps=kcfg.substeps)
    model = IPSCModel(kcfg)
    assert np.allclose(m, model.mean(s[None], 0.2, model.beta_true)[0])
    z = sample_transition(s, 0.2, P, kcfg.growth, kcfg.fresh_medium, np.zeros(STATE_DIM), rng)
    assert np.allclose(z, m)


def test_reward_examples(kcfg):
    c = RewardConstants(c_r=30, c_m=120, c_l=84)
    s = kcfg.base_state.copy()
    nxt = s.copy()
    nxt[0] += 0.1
    nxt[INDEX["ELAC"]] += 0.5
    r = reward(s, 0.0, nxt, c, kcfg.fresh_medium)
    assert r == pytest.approx(30 * 0.1 - 84 * 0.5)
    # exchange cost, with lactate measured from the post-exchange level
    post = exchange_state(s, kcfg.fresh_medium, 1.0)[0]
    assert reward(s, 1.0, post, c, kcfg.fresh_medium) == pytest.approx(-120.0)


def test_reward_scales_bounded(ipsc, rng):
    init = ipsc.initial_sampler()(50, rng)
    b = rng.uniform(size=50)
    nxt = ipsc.sample(init, b, ipsc.beta_true, rng)
    rn = ipsc.reward_fn("normalized")(init, b, nxt)
    rs = ipsc.reward_fn("shifted")(init, b, nxt)
    assert np.all((rn >= 0) & (rn <= 1))
    assert np.all(rs >= 0)
    with pytest.raises(InvalidArgumentError):
        IPSCReward(RewardConstants(), ipsc.fresh, scale="nope")


def test_config_overrides_and_errors(tmp_path):
    cfg = load_kinetic_config(overrides={"parameters": {"v_max": {"HK": 3.0}}})
    assert cfg.params["v_max.HK"] == 3.0
    assert parse_parameter_tree({"v_max.HK": 1, "K_m": {"GLC": 2}}) == {"v_max.HK": 1.0, "K_m.GLC": 2.0}
    with pytest.raises(ConfigError):
        parse_parameter_tree({"v_max": {"NOPE": 1}})
    path = tmp_path / "k.yaml"
    path.write_text(yaml.safe_dump({"initial_density": 0.03}))
    assert load_kinetic_config(path).initial_density == 0.03
    with pytest.raises(ConfigError):
        load_kinetic_config(overrides={"fresh_medium": None})


def test_case_masks_select_calibrated_subvector():
    cfg = load_kinetic_config(case=30)
    m = IPSCModel(cfg)
    assert m.n_params == 30
    assert m.param_names[0] == "v_max.HK"
    assert np.allclose(m.beta_true, cfg.params.values[cfg.params.mask])


def test_forward_jacobian_matches_finite_differences(ipsc):
    s = ipsc.config.base_state[None] * np.array([[1.0] + [0.9] * 33])
    bt = ipsc.beta_true
    J = ipsc.jacobian(s, 0.3, bt)
    Jfd = ipsc.finite_difference_jacobian(s, 0.3, bt)
    scale = np.abs(J).max()
    assert np.allclose(J, Jfd, atol=1e-6 * scale, rtol=1e-4)


def test_flux_mape_zero_for_perfect_model(ipsc, rng):
    states = ipsc.initial_sampler()(10, rng)
    assert np.all(flux_mape(states, ipsc.beta_true, ipsc.beta_true, ipsc) == 0)


def test_parameter_index_consistent():
    assert PARAM_NAMES[PARAM_INDEX["K_m.GLC"]] == "K_m.GLC"
