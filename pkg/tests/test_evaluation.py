import statistics

import numpy as np
import pytest

from fpad.dataset import DatasetSplit, FingerprintSample
from fpad.errors import ConfigError, MetricError, ProtocolError
from fpad.evaluation import (
    EvalReport,
    ProtocolCell,
    ace,
    cells_from_sensors,
    check_protocol,
    error_rates,
    evaluate_scores,
    grid_search_weights,
    roc,
    run_protocol,
    summarize,
    tdr_at_fdr,
)


def _scores(n_live, n_spoof, live_lo, live_hi, spoof_lo, spoof_hi, seed=0):
    rng = np.random.default_rng(seed)
    scores = np.concatenate(
        [rng.uniform(live_lo, live_hi, n_live), rng.uniform(spoof_lo, spoof_hi, n_spoof)]
    )
    labels = np.array([0] * n_live + [1] * n_spoof)
    return scores, labels


class TestAce:
    def test_perfect_separation_is_zero(self):
        s, y = _scores(50, 50, 0.0, 0.4, 0.6, 1.0)
        assert ace(s, y) == 0.0

    def test_inverted_scores_are_one_hundred(self):
        s, y = _scores(50, 50, 0.6, 1.0, 0.0, 0.4)
        assert ace(s, y) == 100.0

    def test_dyadic_hand_case_exact(self):
        # 2 of 8 live wrong, 1 of 4 spoof wrong: 100 * (0.25 + 0.25) / 2 = 25
        scores = [0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.9, 0.8] + [0.9, 0.8, 0.7, 0.2]
        labels = [0] * 8 + [1] * 4
        assert ace(scores, labels) == 25.0

    def test_non_dyadic_hand_case(self):
        # 2 of 100 live wrong, 4 of 100 spoof wrong
        live = [0.1] * 98 + [0.9] * 2
        spoof = [0.9] * 96 + [0.1] * 4
        got = ace(live + spoof, [0] * 100 + [1] * 100)
        assert got == pytest.approx(3.0, abs=1e-12)

    def test_tie_at_threshold_counts_against_spoof_only(self):
        # score exactly at threshold: live correct (not >), spoof wrong (<=)
        assert ace([0.5, 0.5], [0, 1]) == 50.0

    def test_affine_rescale_with_matching_threshold(self):
        s, y = _scores(40, 40, 0.0, 1.0, 0.0, 1.0, seed=3)
        assert error_rates(2.0 * s, y, threshold=1.0) == error_rates(s, y, threshold=0.5)

    def test_label_swap_complements(self):
        s, y = _scores(32, 32, 0.0, 1.0, 0.0, 1.0, seed=4)
        assert ace(s, 1 - y) == pytest.approx(100.0 - ace(s, y), abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            ace([0.1, 0.2], [0, 0])
        with pytest.raises(MetricError):
            ace([0.8, 0.9], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            ace([0.1, 0.2, 0.3], [0, 1])


def _brute_tdr(scores, labels, cap):
    """Independent O(n^2) reimplementation of the threshold sweep."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    live = scores[labels == 0]
    spoof = scores[labels == 1]
    candidates = [-np.inf] + sorted(set(scores.tolist()))
    for tau in candidates:
        if sum(1 for v in live if v > tau) / len(live) <= cap:
            tdr = 100.0 * (sum(1 for v in spoof if v > tau) / len(spoof))
            return tdr, float(tau)
    raise AssertionError("unreachable")


class TestTdrAtFdr:
    def test_disjoint_classes_full_detection(self):
        s, y = _scores(100, 100, 0.0, 0.4, 0.6, 1.0)
        tdr, tau = tdr_at_fdr(s, y)
        assert tdr == 100.0
        assert tau <= s[:100].max()

    def test_identical_class_distributions_hit_the_cap(self):
        rng = np.random.default_rng(8)
        vals = rng.uniform(0, 1, 100)
        scores = np.concatenate([vals, vals])
        labels = np.array([0] * 100 + [1] * 100)
        # at the chosen threshold exactly one live (and hence one spoof)
        # exceeds it, so detection equals the 1% cap
        tdr, _ = tdr_at_fdr(scores, labels)
        assert tdr == 1.0

    def test_matches_brute_force_sweep(self):
        rng = np.random.default_rng(15)
        for trial in range(5):
            n = 1000
            scores = rng.normal(0.5, 0.25, n)
            labels = rng.integers(0, 2, n)
            if not ((labels == 0).any() and (labels == 1).any()):
                continue
            scores[labels == 1] += rng.uniform(0, 0.5)
            assert tdr_at_fdr(scores, labels) == _brute_tdr(scores, labels, 0.01)

    def test_zero_cap_allows_no_live_above_threshold(self):
        s, y = _scores(50, 50, 0.0, 1.0, 0.0, 1.0, seed=21)
        tdr, tau = tdr_at_fdr(s, y, fdr_cap=0.0)
        assert (tdr, tau) == _brute_tdr(s, y, 0.0)
        assert np.mean(s[y == 0] > tau) == 0.0

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            tdr_at_fdr([0.1, 0.2], [1, 1])


class TestRoc:
    def test_monotone_and_anchored(self):
        s, y = _scores(60, 60, 0.0, 1.0, 0.2, 1.0, seed=5)
        pts = roc(s, y)
        assert pts[-1] == (100.0, 100.0)  # threshold below every score
        assert pts[0][0] == 0.0  # threshold at the top score
        for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
            assert f1 >= f0 and t1 >= t0

    def test_point_count_matches_unique_scores(self):
        scores = [0.1, 0.2, 0.2, 0.3, 0.4]
        labels = [0, 0, 1, 1, 1]
        assert len(roc(scores, labels)) == 5  # 4 unique scores + the -inf anchor


class TestEvaluateScores:
    def test_report_is_internally_consistent(self):
        s, y = _scores(30, 40, 0.0, 0.6, 0.4, 1.0, seed=6)
        rep = evaluate_scores(s, y, protocol="cross-material", train_sensor="a", test_sensor="b")
        assert rep.ace_percent == pytest.approx(
            (rep.ferr_live_percent + rep.ferr_fake_percent) / 2.0, abs=1e-12
        )
        assert rep.n_live == 30 and rep.n_spoof == 40
        assert rep.protocol == "cross-material"
        assert rep.train_sensor == "a" and rep.test_sensor == "b"
        assert len(rep.roc) >= 2
        d = rep.to_dict()
        assert d["ace_percent"] == rep.ace_percent
        assert d["roc"][-1] == [100.0, 100.0]


def _sample(label, sensor, material, i):
    return FingerprintSample(
        image=np.zeros((96, 96), dtype=np.float32),
        label=label, sensor=sensor, material=material, id=f"{sensor}-{i}",
    )


def _split(train, test):
    return DatasetSplit(train=train, validation=[], test=test)


class TestCheckProtocol:
    def test_cross_material_disjoint_passes(self):
        split = _split(
            [_sample(0, "a", None, 0), _sample(1, "a", "gelatin", 1)],
            [_sample(0, "a", None, 2), _sample(1, "a", "ecoflex", 3)],
        )
        check_protocol(split, "cross-material")

    def test_cross_material_shared_material_fails(self):
        split = _split(
            [_sample(1, "a", "gelatin", 0)],
            [_sample(1, "a", "gelatin", 1)],
        )
        with pytest.raises(ProtocolError, match="gelatin"):
            check_protocol(split, "cross-material")

    def test_cross_material_requires_declared_materials(self):
        split = _split([_sample(0, "a", None, 0)], [_sample(1, "a", "ecoflex", 1)])
        with pytest.raises(ProtocolError, match="declared"):
            check_protocol(split, "cross-material")

    def test_cross_sensor_disjoint_passes(self):
        split = _split([_sample(0, "a", None, 0)], [_sample(0, "b", None, 1)])
        check_protocol(split, "cross-sensor")

    def test_cross_sensor_shared_sensor_fails(self):
        split = _split([_sample(0, "a", None, 0)], [_sample(0, "a", None, 1)])
        with pytest.raises(ProtocolError, match="a"):
            check_protocol(split, "cross-sensor")

    def test_unknown_protocol(self):
        split = _split([_sample(0, "a", None, 0)], [_sample(0, "b", None, 1)])
        with pytest.raises(ProtocolError):
            check_protocol(split, "same-material")


class TestCells:
    def test_three_sensors_make_six_ordered_cells(self):
        cells = cells_from_sensors(["a", "b", "c"])
        assert len(cells) == 6
        assert ("a", "b") in cells and ("b", "a") in cells
        assert all(ta != te for ta, te in cells)

    def test_duplicates_rejected(self):
        with pytest.raises(ProtocolError):
            cells_from_sensors(["a", "a", "b"])

    def test_fewer_than_two_rejected(self):
        with pytest.raises(ProtocolError):
            cells_from_sensors(["solo"])


def _random_cell(train, test, seed):
    s, y = _scores(25, 25, 0.0, 0.7, 0.3, 1.0, seed=seed)
    return ProtocolCell(train_sensor=train, test_sensor=test, scores=list(s), labels=list(y))


class TestRunProtocol:
    def test_six_cell_run_with_independent_summary_oracle(self):
        cells = [
            _random_cell(a, b, seed=10 * i)
            for i, (a, b) in enumerate(cells_from_sensors(["a", "b", "c"]))
        ]
        doc = run_protocol("cross-sensor", cells)
        assert doc["protocol"] == "cross-sensor"
        assert len(doc["cells"]) == 6
        aces = [c["ace_percent"] for c in doc["cells"]]
        tdrs = [c["tdr_at_fdr1_percent"] for c in doc["cells"]]
        assert doc["summary"]["n_cells"] == 6
        assert doc["summary"]["ace_mean"] == pytest.approx(statistics.fmean(aces), abs=1e-9)
        assert doc["summary"]["ace_sd"] == pytest.approx(statistics.stdev(aces), abs=1e-9)
        assert doc["summary"]["tdr_mean"] == pytest.approx(statistics.fmean(tdrs), abs=1e-9)
        assert doc["summary"]["tdr_sd"] == pytest.approx(statistics.stdev(tdrs), abs=1e-9)

    def test_single_cell_sd_is_zero(self):
        doc = run_protocol("cross-material", [_random_cell("a", "a", seed=1)])
        assert doc["summary"]["ace_sd"] == 0.0
        assert doc["summary"]["tdr_sd"] == 0.0

    def test_cross_sensor_rejects_same_sensor_cell(self):
        with pytest.raises(ProtocolError):
            run_protocol("cross-sensor", [_random_cell("a", "a", seed=2)])

    def test_empty_cells_rejected(self):
        with pytest.raises(ProtocolError):
            run_protocol("cross-sensor", [])

    def test_unknown_protocol_rejected(self):
        with pytest.raises(ProtocolError):
            run_protocol("mystery", [_random_cell("a", "b", seed=3)])

    def test_summarize_means_hand_case(self):
        reports = [
            EvalReport(10.0, 90.0, 0.0, 0.0),
            EvalReport(20.0, 70.0, 0.0, 0.0),
        ]
        s = summarize(reports)
        assert s["ace_mean"] == 15.0
        assert s["tdr_mean"] == 80.0
        assert s["ace_sd"] == pytest.approx(statistics.stdev([10.0, 20.0]), abs=1e-12)


class TestGridSearch:
    def test_default_grid_has_1331_points(self):
        triples = [[0.1, 0.5, 0.5], [0.9, 0.5, 0.5]] * 4
        labels = [0, 1] * 4
        res = grid_search_weights(triples, labels)
        assert res.n_evaluated == 11 ** 3

    def test_informative_global_with_flat_patches(self):
        # only the first column separates; patch columns are constant 0.5 so
        # any zero-global combo scores at the threshold and fails spoofs
        rng = np.random.default_rng(11)
        n = 30
        g = np.concatenate([rng.uniform(0.0, 0.3, n), rng.uniform(0.7, 1.0, n)])
        triples = np.stack([g, np.full(2 * n, 0.5), np.full(2 * n, 0.5)], axis=1)
        labels = [0] * n + [1] * n
        res = grid_search_weights(triples, labels)
        assert res.best_ace == 0.0
        assert res.weights == (0.1, 0.0, 0.0)  # lexicographically first winner

    def test_uninformative_scores_tie_to_lexicographic_minimum(self):
        triples = [[0.5, 0.5, 0.5]] * 10
        labels = [0, 1] * 5
        res = grid_search_weights(triples, labels)
        assert res.weights == (0.0, 0.0, 0.0)
        assert res.best_ace == 50.0

    def test_matches_independent_exhaustive_search(self):
        rng = np.random.default_rng(12)
        n = 40
        triples = rng.uniform(0, 1, (n, 3))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        triples[labels == 1] += 0.15
        res = grid_search_weights(triples, labels)

        values = [round(i * 0.1, 10) for i in range(11)]
        best = None
        for wg in values:
            for ws in values:
                for wl in values:
                    fused = wg * triples[:, 0] + ws * triples[:, 1] + wl * triples[:, 2]
                    thr = 0.5 * (wg + ws + wl)
                    fl = float(np.mean(fused[labels == 0] > thr))
                    ff = float(np.mean(fused[labels == 1] <= thr))
                    a = 50.0 * (fl + ff)
                    if best is None or a < best[1]:
                        best = ((wg, ws, wl), a)
        assert res.weights == best[0]
        assert res.best_ace == best[1]

    def test_step_validation(self):
        triples = [[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]
        labels = [0, 1]
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ConfigError):
                grid_search_weights(triples, labels, step=bad)

    def test_coarser_steps(self):
        triples = [[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]
        labels = [0, 1]
        assert grid_search_weights(triples, labels, step=0.5).n_evaluated == 27
        assert grid_search_weights(triples, labels, step=1.0).n_evaluated == 8

    def test_input_validation(self):
        with pytest.raises(MetricError):
            grid_search_weights(np.zeros((0, 3)), [])
        with pytest.raises(MetricError):
            grid_search_weights([[0.1, 0.2]], [0])
        with pytest.raises(MetricError):
            grid_search_weights([[0.1, 0.2, 0.3]], [0])
