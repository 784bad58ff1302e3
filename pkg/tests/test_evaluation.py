import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from betaend import core, estimation, evaluation, ingest, synthgen
from betaend.estimation import BETAEND, EventTable, FitResult, ScoredEvents
from betaend.ingest import RegistrationEvent as Ev

from conftest import profiles_from


def scored_from(p, y, model="m", **cols):
    n = len(p)
    table = EventTable(
        user_id=np.array(cols.get("user_id", [f"u{i}" for i in range(n)]), dtype=object),
        course_id=np.array(cols.get("course_id", ["c"] * n), dtype=object),
        timestamp=np.zeros(n, dtype=np.int64),
        certified=np.asarray(y, dtype=bool),
        burst_size=np.asarray(cols.get("burst_size", np.ones(n)), dtype=np.int64),
        burst_ordinal=np.asarray(cols.get("burst_ordinal", np.ones(n)), dtype=np.int64),
        burst_position=np.asarray(cols.get("burst_position", np.ones(n)), dtype=np.int64),
        n_registered=np.asarray(cols.get("n_registered", np.ones(n)), dtype=np.int64),
        age=np.asarray(cols.get("age", np.full(n, np.nan)), dtype=float),
    )
    p = np.asarray(p, dtype=float)
    return ScoredEvents(model, table, p, np.log(p), np.ones(n), np.ones(n), np.zeros(n, bool))


def truth_fit(truth):
    return FitResult(
        BETAEND, truth.params(), core.CourseEngagement(truth.engagements), truth.default_e_c,
        0.0, [0.0], True, False, 0, 0, dict(truth.singleton_rates), 0.0, 0, {},
    )


class TestCalibration:
    def test_constant_predictions(self):
        y = np.zeros(100, bool)
        y[::10] = True
        bins = evaluation.calibration_table(scored_from(np.full(100, 0.1), y), 20)
        assert all(b.mean_predicted == pytest.approx(0.1) for b in bins)
        assert sum(b.n_certified for b in bins) / 100 == pytest.approx(0.1)

    def test_one_event_per_bin(self):
        rng = np.random.default_rng(0)
        p = rng.permutation(np.linspace(0.01, 0.99, 20))
        bins = evaluation.calibration_table(scored_from(p, rng.random(20) < 0.5), 20)
        assert [b.count for b in bins] == [1] * 20
        assert all(b.observed in (0.0, 1.0) for b in bins)
        assert np.all(np.diff([b.mean_predicted for b in bins]) > 0)

    def test_fewer_events_than_bins(self):
        bins = evaluation.calibration_table(scored_from([0.2, 0.3, 0.4], [True, False, False]), 20)
        assert len(bins) == 3

    def test_stable_ties(self):
        y = [True, False, False, False]
        bins = evaluation.calibration_table(scored_from([0.5] * 4, y), 2)
        assert [b.n_certified for b in bins] == [1, 0]

    def test_perfect_calibration_slope(self):
        rng = np.random.default_rng(1)
        p = np.exp(rng.uniform(np.log(0.005), np.log(0.5), 10**5))
        bins = evaluation.calibration_table(scored_from(p, rng.random(p.size) < p), 20)
        slope = np.polyfit([b.mean_predicted for b in bins], [b.observed for b in bins], 1)[0]
        assert 0.9 <= slope <= 1.1

    @given(st.lists(st.tuples(st.floats(0.001, 0.999), st.booleans()), min_size=1, max_size=200), st.integers(1, 30))
    def test_partition(self, rows, k):
        p, y = zip(*rows)
        bins = evaluation.calibration_table(scored_from(p, y), k)
        assert sum(b.count for b in bins) == len(rows)
        assert sum(b.count * b.observed for b in bins) == pytest.approx(sum(y))
        assert max(b.count for b in bins) - min(b.count for b in bins) <= 1


class TestCohorts:
    def test_hand_statistics(self):
        rate, lo, lor, _ = evaluation.cohort_statistics(10, 2, 0.1)
        assert rate == 0.2
        assert lo == pytest.approx(-1.386294, abs=1e-6)
        assert lor == pytest.approx(0.810930, abs=1e-6)

    def _cohort_events(self, n_cert_a, n_users=10):
        events = []
        for i in range(n_users):
            events += [Ev(f"u{i}", "A", 0, i < n_cert_a), Ev(f"u{i}", "B", 10**7, True)]
        events += [Ev(f"s{i}", "A", 0, i < 1) for i in range(10)]
        return events

    def _table(self, events, min_cert=5):
        profiles = profiles_from(events)
        table = estimation.event_table(profiles)
        scored = {"m": scored_from(np.full(len(table), 0.3), table.certified, **{k: getattr(table, k) for k in ("user_id", "course_id", "n_registered")})}
        records = ingest.course_records(profiles, {"A", "B"})
        return evaluation.cohort_table(scored, records, min_cert)

    def test_floor(self):
        assert [(c.first, c.second) for c in self._table(self._cohort_events(5))] == [("A", "B"), ("B", "A")]
        assert [(c.first, c.second) for c in self._table(self._cohort_events(4))] == [("B", "A")]

    def test_cohort_values(self):
        (ab, _) = self._table(self._cohort_events(5))
        assert (ab.n_users, ab.n_certificates, ab.rate) == (10, 5, 0.5)
        s = ingest.smoothed_rate(1, 10)
        assert ab.log_odds_ratio == pytest.approx(0 - math.log(s / (1 - s)))
        assert ab.predicted["m"]["rate"] == pytest.approx(0.3)

    def test_pair_count_bound(self):
        cfg = synthgen.GeneratorConfig(n_users=3000, n_courses=6, burst_number={1: 0.5, 2: 0.5}, burst_size={1: 0.6, 2: 0.4})
        events, truth = synthgen.generate(cfg)
        profiles = profiles_from(events)
        fit = truth_fit(truth)
        table = estimation.event_table(profiles)
        cohorts = evaluation.cohort_table({"t": estimation.predict(fit, table)}, ingest.course_records(profiles, set(truth.difficulties)), 0)
        assert len(cohorts) <= 6 * 5
        assert all(c.first != c.second and c.n_certificates <= c.n_users for c in cohorts)


class TestCorrelation:
    def test_perfect(self):
        x = np.array([1.0, 2.0, 4.0, 3.0])
        assert evaluation.r_squared(x, x) == pytest.approx(1.0)

    def test_constant(self):
        with pytest.raises(evaluation.DegenerateCorrelationError):
            evaluation.r_squared([1, 1, 1], [1, 2, 3])

    def test_hand_dataset(self):
        x = np.array([0.1, 0.4, 0.35, 0.8, 0.5, 0.9, 0.2, 0.6, 0.3, 0.7])
        y = np.array([0.2, 0.3, 0.5, 0.7, 0.4, 1.0, 0.1, 0.5, 0.35, 0.9])
        n = x.size
        num = (n * np.sum(x * y) - x.sum() * y.sum()) ** 2
        den = (n * np.sum(x * x) - x.sum() ** 2) * (n * np.sum(y * y) - y.sum() ** 2)
        assert evaluation.r_squared(x, y) == pytest.approx(num / den, abs=1e-12)

    @given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=20))
    def test_matches_scipy(self, pairs):
        x, y = map(np.array, zip(*pairs))
        if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
            return
        assert evaluation.r_squared(x, y) == pytest.approx(stats.pearsonr(x, y)[0] ** 2, abs=1e-9)


class TestBurstCurve:
    def test_all_size_one(self):
        rows = evaluation.burst_size_curve({"m": scored_from([0.1, 0.2], [True, False])})
        assert [r.burst_size for r in rows] == [1] and rows[0].low_support

    def test_model_identity_for_fixed_user(self):
        fit = FitResult(BETAEND, core.BetaEndParams(0.5, {"c": 1.0}), core.CourseEngagement({"c": 2.0}), 2.0, 0, [0], True, False, 0, 0, {}, 0, 0, {})
        one = estimation.event_table(profiles_from([Ev("u", "c", 0, False)]))
        many = estimation.event_table(profiles_from([Ev("u", "c", 0, False)] + [Ev("u", f"x{i}", 1, False) for i in range(3)]))
        p1 = estimation.predict(fit, one).probability[0]
        p4 = estimation.predict(fit, many).probability[0]
        e_u = 2.0 + 3 * 2.0
        assert p4 == pytest.approx(core.weibull_survival(1.0, e_u, 0.5) / 4, rel=1e-12)
        assert p1 == pytest.approx(core.weibull_survival(1.0, 2.0, 0.5), rel=1e-12)


class TestHeatmap:
    def _cohorts(self, rates):
        cfg = synthgen.GeneratorConfig(
            seed=3, n_users=60000, n_courses=len(rates), beta=0.5, difficulties=(1.0,) * len(rates), singleton_rates=rates,
            burst_number={1: 0.4, 2: 0.6}, burst_size={1: 1.0},
        )
        events, truth = synthgen.generate(cfg)
        profiles = profiles_from(events)
        table = estimation.event_table(profiles)
        records = ingest.course_records(profiles, set(truth.difficulties))
        cohorts = evaluation.cohort_table({"t": estimation.predict(truth_fit(truth), table)}, records)
        return truth, cohorts

    def test_equal_engagement_symmetric(self):
        truth, cohorts = self._cohorts((0.2, 0.2))
        m = evaluation.engagement_effect_matrix(cohorts, {"t": truth.engagements})
        a, b = m.values[0, 1], m.values[1, 0]
        assert a == pytest.approx(b, abs=0.1)
        # exact model value: beta * (ln E - ln 2E)
        assert a == pytest.approx(-0.5 * math.log(2), abs=0.1)

    def test_low_engagement_course_gains_most(self):
        truth, cohorts = self._cohorts((0.03, 0.3, 0.3, 0.3))
        m = evaluation.engagement_effect_matrix(cohorts, {"t": truth.engagements})
        assert sorted(m.order) == sorted(truth.engagements)
        assert m.order[0] == "c000"
        assert m.row_median["c000"] < 0
        for c in cohorts:
            assert c.predicted["t"]["loglog_difference"] < 0
        assert np.all(np.isnan(np.diag(m.values)))

    def test_loglog_identity_single_engagement(self):
        beta, e_s, e_c, d = 0.4, 0.5, 1.7, 1.3
        s1, s2 = core.weibull_survival(d, e_s, beta), core.weibull_survival(d, e_c, beta)
        *_, lld = evaluation.cohort_statistics(10**6, s2 * 10**6, s1)
        assert lld == pytest.approx(beta * (math.log(e_s) - math.log(e_c)), abs=1e-9)


class TestTrends:
    def test_single_group_equals_global(self):
        y = [True, False, False, True, False]
        rows = evaluation.group_trends({"m": scored_from([0.3] * 5, y)}, "burst-ordinal")
        (r,) = rows
        assert (r.group, r.n_events, r.n_certified, r.observed) == ("1", 5, 2, 0.4)
        lo, hi = evaluation.binomial_interval(2, 5)
        assert (r.ci_low, r.ci_high) == (lo, hi)

    def test_age_bins_skip_missing(self):
        ages = [16, 33, 34, np.nan, 90]
        rows = evaluation.group_trends({"m": scored_from([0.2] * 5, [False] * 5, age=ages)}, "age")
        assert [r.group for r in rows] == ["15-19", "30-34", ">=75"]
        assert sum(r.n_events for r in rows) == 4

    def test_age_labels(self):
        assert evaluation.age_label(14) == "<15"
        assert evaluation.age_label(15) == "15-19"
        assert evaluation.age_label(75) == ">=75"

    def test_unknown_grouping(self):
        with pytest.raises(ValueError):
            evaluation.group_trends({"m": scored_from([0.2], [False])}, "colour")

    def test_wilson_interval(self):
        lo, hi = evaluation.binomial_interval(5, 20)
        z = stats.norm.ppf(0.975)
        centre = (0.25 + z * z / 40) / (1 + z * z / 20)
        half = z / (1 + z * z / 20) * math.sqrt(0.25 * 0.75 / 20 + z * z / 1600)
        assert (lo, hi) == pytest.approx((centre - half, centre + half), abs=1e-9)

    def test_age_assortment_trend(self):
        cfg = synthgen.GeneratorConfig(seed=5, n_users=8000, n_courses=30, age_fraction=1.0, age_assortment=1.5)
        events, truth = synthgen.generate(cfg)
        table = estimation.event_table(profiles_from(events))
        rows = evaluation.group_trends({"t": estimation.predict(truth_fit(truth), table)}, "age")
        d = [r.mean_difficulty["t"] for r in rows if r.n_events >= 300]
        assert d[0] > d[-1]
        assert np.corrcoef(np.arange(len(d)), d)[0, 1] < -0.8


class TestRates:
    def test_per_burst(self):
        y = [True, False, False, False, False]
        s = scored_from([0.1] * 5, y, burst_position=[1, 1, 1, 1, 1])
        assert evaluation.certificates_per_burst(s.table) == pytest.approx(0.2)
        assert evaluation.certificates_per_burst(s.table) == evaluation.certificate_rate(s.table)

    def test_no_bursts(self):
        with pytest.raises(core.DomainError):
            evaluation.certificates_per_burst(scored_from([], []).table)

    @pytest.mark.parametrize("seed", range(5))
    def test_inequality_on_generated(self, seed):
        events, _ = synthgen.generate(synthgen.GeneratorConfig(seed=seed, n_users=800, n_courses=10))
        table = estimation.event_table(profiles_from(events))
        assert evaluation.certificates_per_burst(table) >= evaluation.certificate_rate(table)


class TestExportRows:
    def test_paired_columns(self):
        a = scored_from([0.1, 0.2, 0.3], [True, False, False], model="betaend")
        b = scored_from([0.2, 0.2, 0.2], [True, False, False], model="logistic")
        rows = evaluation.burst_rows(evaluation.burst_size_curve({"betaend": a, "logistic": b}))
        assert {"predicted_betaend", "predicted_logistic"} <= set(rows[0])
        trows = evaluation.trend_rows(evaluation.group_trends({"betaend": a, "logistic": b}, "within-burst-order"), "within-burst-order")
        assert {"mean_difficulty_betaend", "mean_engagement_logistic"} <= set(trows[0])
        crows = evaluation.calibration_rows({m: evaluation.calibration_table(s, 3) for m, s in (("betaend", a), ("logistic", b))})
        assert len(crows) == 6
