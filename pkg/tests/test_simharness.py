import math

import numpy as np
import pytest
from scipy.special import expit

from augbin.errors import ParseError, TooManyFailures, ValidationError
from augbin.respprob import BOR, BOR_CONFIRMED, FIXED_TIME
from augbin.simharness import (
    Scenario,
    _classify_latent,
    _latent_draw,
    _new_lesion_times,
    _run_replicates,
    _single_arm_replicate,
    generate,
    load_scenario,
    parse_scenario,
    preset,
    preset_names,
    run_single_arm,
    run_two_arm_power,
    timing_probe,
    true_probability,
)

from dataclasses import replace

LOG07 = math.log(0.7)


def tiny_scenario(**overrides):
    base = dict(
        name="tiny",
        n=20,
        arms=1,
        T=2,
        fractions=np.array([0.5, 1.0]),
        sigma=np.array([[0.5, 0.5], [0.5, 1.0]]),
        alpha=-1.5,
        gamma=0.0,
        endpoint=FIXED_TIME,
        seed=7,
    )
    base.update(overrides)
    return Scenario(**base)


class TestScenario:
    def test_validation(self):
        with pytest.raises(ValidationError):
            tiny_scenario(n=1)
        with pytest.raises(ValidationError):
            tiny_scenario(arms=3)
        with pytest.raises(ValidationError):
            tiny_scenario(fractions=np.array([1.0]))
        with pytest.raises(ValidationError):
            tiny_scenario(sigma=np.eye(3))
        with pytest.raises(ValidationError):
            tiny_scenario(sigma=np.zeros((2, 2)))
        with pytest.raises(ValidationError):
            tiny_scenario(endpoint="nope")

    def test_single_arm_mean(self):
        sc = tiny_scenario()
        np.testing.assert_allclose(sc.mu(), np.array([0.5, 1.0]) * LOG07)

    def test_two_arm_means_split_by_tau(self):
        sc = tiny_scenario(arms=2, tau=0.1, psi=0.05)
        mu_c, mu_e = sc.mu(0), sc.mu(1)
        np.testing.assert_allclose(mu_c, np.array([0.5, 1.0]) * (LOG07 + 0.15))
        np.testing.assert_allclose(mu_e, np.array([0.5, 1.0]) * (LOG07 - 0.05))
        # experimental arm shrinks more (more negative log ratios)
        assert np.all(mu_e < mu_c)

    def test_null_two_arm_matches_single_arm(self):
        one = tiny_scenario()
        two = tiny_scenario(arms=2, tau=0.0, psi=0.0)
        np.testing.assert_allclose(two.mu(0), one.mu())
        np.testing.assert_allclose(two.mu(1), one.mu())


class TestParsing:
    TEXT = """
    # comment
    n = 30
    T = 2
    fractions = 0.5 1.0
    sigma = 0.5 0.5 ; 0.5 1.0
    alpha = -1.5
    """

    def test_parse_defaults(self):
        sc = parse_scenario(self.TEXT, name="demo")
        assert sc.name == "demo"
        assert sc.n == 30 and sc.arms == 1 and sc.T == 2
        assert sc.gamma == 0.0 and sc.tau == 0.0
        assert sc.endpoint == FIXED_TIME

    def test_missing_field(self):
        with pytest.raises(ParseError):
            parse_scenario("n=30\nT=2\nalpha=-1.5")

    def test_bad_value(self):
        with pytest.raises(ParseError):
            parse_scenario(self.TEXT.replace("-1.5", "abc"))

    def test_bad_line(self):
        with pytest.raises(ParseError):
            parse_scenario("n 30")

    def test_endpoint_names(self):
        for label, kind in (
            ("fixed", FIXED_TIME),
            ("bor", BOR),
            ("bor-confirmed", BOR_CONFIRMED),
        ):
            sc = parse_scenario(self.TEXT + f"endpoint = {label}\n")
            assert sc.endpoint == kind

    def test_load_scenario_roundtrip(self, tmp_path):
        p = tmp_path / "demo.txt"
        p.write_text(self.TEXT, encoding="utf-8")
        sc = load_scenario(p)
        assert sc.name == "demo"
        assert sc.n == 30


class TestPresets:
    def test_all_presets_load(self):
        names = preset_names()
        assert len(names) >= 10
        for name in names:
            sc = preset(name)
            assert sc.name == name
            assert sc.fractions.shape == (sc.T,)

    def test_unknown_preset(self):
        with pytest.raises(ValidationError):
            preset("definitely-not-a-preset")

    def test_fixed_t2_fields(self):
        sc = preset("fixed-T2-a15")
        assert (sc.n, sc.arms, sc.T) == (75, 1, 2)
        assert sc.alpha == -1.5 and sc.gamma == 0.0
        np.testing.assert_allclose(sc.fractions, [0.5, 1.0])
        np.testing.assert_allclose(sc.sigma, [[0.5, 0.5], [0.5, 1.0]])

    def test_covariance_is_min_of_fractions(self):
        for name in ("bor-T4-a15", "fixed-T3-a25g02", "bor-T7-a15"):
            sc = preset(name)
            expected = np.minimum.outer(sc.fractions, sc.fractions)
            np.testing.assert_allclose(sc.sigma, expected)

    def test_two_arm_presets(self):
        for name in ("twoarm-fixed-T2", "twoarm-bor-T4"):
            sc = preset(name)
            assert sc.arms == 2
            assert sc.tau == 0.0


class TestGenerate:
    def test_deterministic(self):
        sc = tiny_scenario()
        assert generate(sc, 3) == generate(sc, 3)
        assert generate(sc, 3) != generate(sc, 4)
        assert generate(sc, 3) != generate(replace(sc, seed=8), 3)

    def test_record_structure(self):
        sc = tiny_scenario(arms=2, n=10)
        data = generate(sc, 0)
        assert data.n == 20
        ids = [p.id for p in data.patients]
        assert len(set(ids)) == len(ids)
        for p in data.patients:
            assert 0.0 < p.z0 < 1.0
            assert all(s > 0 for s in p.sizes)
            assert len(p.sizes) == len(p.new_lesion)
            # truncated exactly at the first new lesion, if any
            if len(p.sizes) < sc.T:
                assert p.new_lesion[-1] == 1
            assert all(v == 0 for v in p.new_lesion[:-1])

    def test_visit_one_new_lesion_rate(self):
        sc = tiny_scenario(n=50_000)
        data = generate(sc, 0)
        rate = np.mean([p.new_lesion[0] == 1 for p in data.patients])
        assert abs(rate - expit(-1.5)) < 0.006

    def test_very_negative_alpha_keeps_everyone(self):
        sc = tiny_scenario(alpha=-50.0, n=200)
        data = generate(sc, 0)
        assert all(len(p.sizes) == sc.T for p in data.patients)
        assert all(all(v == 0 for v in p.new_lesion) for p in data.patients)

    def test_growth_keeps_fixed_time_records(self):
        # fixed-time follow-up continues past growth visits
        sc = tiny_scenario(alpha=-50.0, n=500)
        data = generate(sc, 1)
        grew = [
            p for p in data.patients
            if any(math.log(s / p.z0) > math.log(1.2) for s in p.sizes[:-1])
        ]
        assert grew  # the scenario produces early growth
        assert all(len(p.sizes) == sc.T for p in grew)

    def test_growth_truncates_bor_records(self):
        # best-observed-response follow-up stops at the first progression
        sc = tiny_scenario(alpha=-50.0, n=500, endpoint=BOR)
        data = generate(sc, 1)
        truncated = [p for p in data.patients if len(p.sizes) < sc.T]
        assert truncated
        for p in data.patients:
            ratios = [math.log(s / p.z0) for s in p.sizes]
            # no visit after the first >20% growth measurement
            for t, r in enumerate(ratios[:-1], start=1):
                assert r <= math.log(1.2)


class TestClassifyLatent:
    @pytest.mark.parametrize("endpoint", [FIXED_TIME, BOR, BOR_CONFIRMED])
    def test_matches_record_classifiers(self, endpoint):
        sc = tiny_scenario(
            n=2000,
            T=4,
            endpoint=endpoint,
            fractions=np.array([0.25, 0.5, 0.75, 1.0]),
            sigma=np.minimum.outer(
                np.array([0.25, 0.5, 0.75, 1.0]), np.array([0.25, 0.5, 0.75, 1.0])
            ),
            gamma=0.2,
            alpha=-1.2,
        )
        # redraw the same latent variables generate() consumed
        rng = np.random.default_rng(np.random.SeedSequence([sc.seed, 0]))
        z0, y, u = _latent_draw(sc, sc.n, rng, None)
        x, _ = _new_lesion_times(sc, z0, y, u)
        latent = _classify_latent(sc, y, x)

        data = generate(sc, 0)
        kind = {FIXED_TIME: "fixed_time", BOR: "bor", BOR_CONFIRMED: "bor"}[endpoint]
        confirmed = endpoint == BOR_CONFIRMED
        by_record = np.asarray(data.classify(kind, confirmed), dtype=bool)
        np.testing.assert_array_equal(latent, by_record)


class TestTrueProbability:
    def test_symmetric_oracle(self):
        # T=1, mean exactly at the threshold, no progression: probability 1/2
        sc = tiny_scenario(
            T=1,
            fractions=np.array([1.0]),
            sigma=np.array([[1.0]]),
            alpha=-60.0,
        )
        p, se = true_probability(sc, n_patients=200_000)
        assert se < 0.005
        assert abs(p - 0.5) < 4 * se

    def test_fixed_t2_reference_value(self):
        sc = preset("fixed-T2-a15")
        p, se = true_probability(sc, n_patients=400_000)
        assert abs(p - 0.334) < 0.005

    def test_two_arm_uses_control_by_default(self):
        sc = preset("twoarm-fixed-T2")
        p0, _ = true_probability(sc, n_patients=50_000)
        pc, _ = true_probability(sc, n_patients=50_000, arm=0)
        assert p0 == pc


class TestRunners:
    def test_single_arm_smoke(self):
        sc = preset("fixed-T2-a15")
        oc = run_single_arm(sc, methods=("bin", "maug"), n_reps=8, true_prob=0.334)
        assert oc.n_reps == 8 and oc.n_failed == 0
        assert oc.endpoint == "fixed"
        for m in ("bin", "maug"):
            s = oc.by_method(m)
            assert 0.0 < s.mean_estimate < 1.0
            assert 0.0 <= s.coverage <= 1.0
            assert s.mean_ci_width > 0
        assert oc.by_method("bin").width_reduction_pct is None
        assert math.isfinite(oc.by_method("maug").width_reduction_pct)

    def test_single_arm_rejects_two_arm_scenario(self):
        with pytest.raises(ValidationError):
            run_single_arm(preset("twoarm-fixed-T2"), n_reps=2, true_prob=0.3)

    def test_two_arm_power_smoke(self):
        sc = preset("twoarm-fixed-T2")
        points = run_two_arm_power(sc, taus=(0.0,), methods=("bin",), n_reps=6)
        assert len(points) == 1
        pt = points[0]
        assert pt.method == "bin" and pt.tau == 0.0
        assert 0.0 <= pt.power <= 1.0
        assert pt.mc_se > 0

    def test_two_arm_power_rejects_single_arm_scenario(self):
        with pytest.raises(ValidationError):
            run_two_arm_power(preset("fixed-T2-a15"), taus=(0.0,), n_reps=2)

    def test_too_many_failures(self):
        # too few patients to fit the model: every replicate fails
        sc = tiny_scenario(n=3)
        with pytest.raises(TooManyFailures):
            run_single_arm(sc, methods=("maug",), n_reps=4, true_prob=0.3)

    def test_threads_match_serial(self):
        sc = tiny_scenario(n=30)
        args = [(sc, ("bin",), 0.05, rep, 11) for rep in range(4)]
        serial, f1 = _run_replicates(_single_arm_replicate, args, threads=1)
        parallel, f2 = _run_replicates(_single_arm_replicate, args, threads=2)
        assert f1 == f2 == 0
        assert serial == parallel

    def test_timing_probe_returns_positive_medians(self):
        sc = preset("fixed-T2-a15")
        times = timing_probe(replace(sc, n=20), methods=("maug",), n_reps=2)
        assert set(times) == {"maug"}
        assert times["maug"] > 0
