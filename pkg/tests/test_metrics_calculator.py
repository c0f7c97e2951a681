"""失敗検出指標とスコア関数"""

import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from error_handler import ContractError, DimensionError, NumericError
from metrics_calculator import (aurc, auroc, energy_score, evaluate_mixture, f_auc,
                                fpr_at_95_tpr, get_score_function, maxlogit_score, msp_score,
                                risk_coverage)
from models.data_models import WildMixture


def brute_auroc(pos, neg):
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def brute_fpr95(pos, neg):
    best = None
    for t in sorted(set(pos)):
        if sum(p >= t for p in pos) * 100 >= 95 * len(pos):
            best = t
    return sum(n >= best for n in neg) / len(neg)


def brute_aurc(scores, accept):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    risks = []
    for k in range(1, len(scores) + 1):
        rejected = sum(not accept[i] for i in order[:k])
        risks.append(rejected / k)
    return sum(risks) / len(risks) * 1000.0


class TestBruteForceOracles:

    @pytest.mark.parametrize("seed", range(30))
    def test_small_samples_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        n_pos, n_neg = rng.integers(1, 9, size=2)
        pos = rng.integers(0, 4, size=n_pos).astype(float).tolist()
        neg = rng.integers(0, 4, size=n_neg).astype(float).tolist()

        assert auroc(pos, neg) == brute_auroc(pos, neg)
        assert fpr_at_95_tpr(pos, neg) == brute_fpr95(pos, neg)

        scores = pos + neg
        accept = [True] * len(pos) + [False] * len(neg)
        perm = rng.permutation(len(scores))
        scores = [scores[i] for i in perm]
        accept = [accept[i] for i in perm]
        assert math.isclose(aurc(scores, accept), brute_aurc(scores, accept), rel_tol=1e-12)

    @pytest.mark.parametrize("n", range(1, 9))
    def test_exhaustive_label_patterns(self, n):
        self._check_patterns(n, draws=20, seed=n)

    @pytest.mark.slow
    @pytest.mark.parametrize("n", range(1, 9))
    def test_exhaustive_label_patterns_thousand_draws(self, n):
        self._check_patterns(n, draws=1000, seed=100 + n)

    @staticmethod
    def _check_patterns(n, draws, seed):
        rng = np.random.default_rng(seed)
        for pattern in itertools.product([True, False], repeat=n):
            accept = list(pattern)
            for draw in range(draws):
                # 偶数回目は整数スコア（同点あり）
                if draw % 2 == 0:
                    scores = rng.integers(0, 3, size=n).astype(float).tolist()
                else:
                    scores = rng.random(n).tolist()
                assert math.isclose(aurc(scores, accept), brute_aurc(scores, accept),
                                    rel_tol=1e-12, abs_tol=1e-12)
                pos = [s for s, a in zip(scores, accept) if a]
                neg = [s for s, a in zip(scores, accept) if not a]
                if pos and neg:
                    assert auroc(pos, neg) == brute_auroc(pos, neg)
                    assert fpr_at_95_tpr(pos, neg) == brute_fpr95(pos, neg)

    def test_auroc_matches_sklearn(self, rng):
        pos = rng.normal(1.0, 1.0, size=200)
        neg = rng.normal(0.0, 1.0, size=150)
        labels = np.r_[np.ones(pos.size), np.zeros(neg.size)]
        expected = roc_auc_score(labels, np.r_[pos, neg])
        assert auroc(pos, neg) == pytest.approx(expected, abs=1e-12)


class TestThresholdMetrics:

    def test_fpr95_reference_example(self):
        pos = np.arange(1, 21, dtype=float)
        neg = [0.5, 1.5, 18.5]
        assert fpr_at_95_tpr(pos, neg) == pytest.approx(1.0 / 3.0)

    def test_perfect_separation(self):
        assert auroc([3.0, 4.0], [1.0, 2.0]) == 1.0
        assert fpr_at_95_tpr([3.0, 4.0], [1.0, 2.0]) == 0.0

    def test_empty_input(self):
        with pytest.raises(ContractError):
            auroc([], [1.0])

    def test_non_finite_scores(self):
        with pytest.raises(NumericError):
            fpr_at_95_tpr([np.inf, 1.0], [0.0])


class TestRiskCoverage:

    def test_curve_values(self):
        curve = risk_coverage([0.9, 0.8, 0.7], [True, False, True])
        np.testing.assert_allclose(curve.coverage, [1 / 3, 2 / 3, 1.0])
        np.testing.assert_allclose(curve.selective_risk, [0.0, 0.5, 1 / 3])
        assert aurc([0.9, 0.8, 0.7], [True, False, True]) == pytest.approx(
            (0.5 + 1 / 3) / 3 * 1000.0)

    def test_ties_keep_input_order(self):
        curve = risk_coverage([1.0, 1.0], [False, True])
        np.testing.assert_allclose(curve.selective_risk, [1.0, 0.5])
        assert curve.tie_rule == "stable-index"

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            risk_coverage([1.0, 2.0], [True])

    def test_reference_aurc(self):
        value = aurc([0.9, 0.8, 0.7, 0.6], [True, True, False, True])
        assert value == pytest.approx((1 / 3 + 1 / 4) / 4 * 1000.0, abs=1e-12)
        assert value == pytest.approx(145.833, abs=1e-3)


class TestInvariances:

    @pytest.mark.parametrize("seed", range(5))
    def test_auroc_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        pos = rng.integers(0, 5, size=12).astype(float)
        neg = rng.integers(0, 5, size=9).astype(float)
        assert auroc(pos, neg) + auroc(neg, pos) == pytest.approx(1.0, abs=1e-12)
        pos, neg = rng.normal(size=30), rng.normal(size=25)
        assert auroc(pos, neg) + auroc(neg, pos) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("transform", [
        lambda s: np.exp(3.0 * s),
        lambda s: s ** 3 + 2.0 * s - 7.0,
        lambda s: np.arctan(s),
    ])
    def test_monotone_transform(self, rng, transform):
        scores = np.round(rng.normal(size=60), 1)
        accept = rng.random(60) < 0.6
        mapped = transform(scores)
        pos, neg = scores[accept], scores[~accept]
        assert auroc(mapped[accept], mapped[~accept]) == pytest.approx(auroc(pos, neg),
                                                                       abs=1e-15)
        assert fpr_at_95_tpr(mapped[accept], mapped[~accept]) == fpr_at_95_tpr(pos, neg)
        assert aurc(mapped, accept) == aurc(scores, accept)
        np.testing.assert_array_equal(risk_coverage(mapped, accept).selective_risk,
                                      risk_coverage(scores, accept).selective_risk)


class TestHarmonicMean:

    @pytest.mark.parametrize("cov, sem, expected", [
        (90.47, 87.88, 89.16),
        (91.40, 93.68, 92.53),
    ])
    def test_reference_values(self, cov, sem, expected):
        assert f_auc(cov, sem) == pytest.approx(expected, abs=0.01)

    def test_zero_sum(self):
        with pytest.raises(ContractError):
            f_auc(0.0, 0.0)


class TestScoreFunctions:

    def test_single_row(self):
        logits = [2.0, 0.0, -1.0]
        expected_msp = np.exp(2.0) / np.sum(np.exp(logits))
        assert msp_score(logits) == pytest.approx(expected_msp)
        assert maxlogit_score(logits) == 2.0
        assert energy_score(logits) == pytest.approx(np.log(np.sum(np.exp(logits))))

    def test_batch_shape(self, rng):
        logits = rng.normal(size=(7, 4))
        for name in ("msp", "maxlogit", "energy"):
            assert get_score_function(name)(logits).shape == (7,)

    def test_unknown_score(self):
        with pytest.raises(ValueError):
            get_score_function("entropy")

    def test_zero_logits(self):
        logits = np.zeros(4)
        assert msp_score(logits) == pytest.approx(0.25)
        assert maxlogit_score(logits) == 0.0
        assert energy_score(logits) == pytest.approx(np.log(4.0))

    def test_msp_reference_row(self):
        assert msp_score([2.0, 0.0, 0.0]) == pytest.approx(0.786986, abs=1e-6)

    @pytest.mark.parametrize("shift", [-50.0, -1.5, 3.0, 400.0])
    def test_constant_shift(self, rng, shift):
        logits = rng.normal(size=(9, 5))
        shifted = logits + shift
        np.testing.assert_allclose(msp_score(shifted), msp_score(logits), rtol=0, atol=1e-12)
        np.testing.assert_allclose(maxlogit_score(shifted), maxlogit_score(logits) + shift,
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(energy_score(shifted), energy_score(logits) + shift,
                                   rtol=0, atol=1e-9)


class _FixedLogits:

    def __init__(self, logits):
        self._logits = np.asarray(logits, dtype=float)

    def logits(self, x):
        return self._logits


def _mixture(accept, sources):
    n = len(accept)
    return WildMixture(inputs=np.zeros((n, 2)), accept=np.asarray(accept, dtype=bool),
                       predicted=np.zeros(n, dtype=int), true_labels=np.zeros(n, dtype=int),
                       sources=np.asarray(sources), origins=list(sources), num_classes=3,
                       spec="test@1", cov_accuracy=0.5)


class TestEvaluateMixture:

    def test_report_units(self):
        model = _FixedLogits([[6.0, 0.0, 0.0], [0.5, 0.4, 0.3], [2.0, 1.9, 0.0],
                              [0.1, 0.0, 0.0]])
        report = evaluate_mixture(model, _mixture([True, False, False, False],
                                                  ['cov', 'cov', 'sem', 'sem']))
        assert report.auc_cov == pytest.approx(100.0)
        assert report.auc_sem == pytest.approx(75.0)
        assert report.f_auc == pytest.approx(f_auc(100.0, 75.0))
        assert report.accuracy == pytest.approx(50.0)
        assert report.counts['accept'] == 1 and report.counts['reject'] == 3

    def test_requires_both_outcomes(self):
        model = _FixedLogits(np.eye(3)[:2] * 4.0)
        with pytest.raises(ContractError):
            evaluate_mixture(model, _mixture([True, True], ['cov', 'cov']))

    def test_class_count_mismatch(self):
        model = _FixedLogits(np.zeros((2, 5)))
        with pytest.raises(ContractError):
            evaluate_mixture(model, _mixture([True, False], ['cov', 'sem']))

    def test_oracle_scores(self):
        accept = [True, False, True, True, False, False, True]
        logits = [[1.0, 0.0, 0.0] if a else [0.0, 0.0, 0.0] for a in accept]
        report = evaluate_mixture(_FixedLogits(logits), _mixture(accept, ['cov'] * 7),
                                  score="maxlogit")
        assert report.auroc == 100.0
        assert report.fpr95 == 0.0
        # 棄却分だけが末尾（被覆 4/7 以降）にリスクを持つ
        tail = sum((k - 4) / k for k in range(5, 8)) / 7 * 1000.0
        assert report.aurc == pytest.approx(tail, abs=1e-12)

    def test_anti_oracle_scores(self):
        accept = [True, False, True, True, False, False, True]
        logits = [[0.0, 0.0, 0.0] if a else [1.0, 0.0, 0.0] for a in accept]
        report = evaluate_mixture(_FixedLogits(logits), _mixture(accept, ['cov'] * 7),
                                  score="maxlogit")
        assert report.auroc == 0.0
        assert report.fpr95 == 100.0

    @pytest.mark.parametrize("seed", range(10))
    def test_random_scores(self, seed):
        rng = np.random.default_rng(seed)
        n = 20_000
        accept = rng.random(n) < 0.6
        sources = np.where(rng.random(n) < 0.8, 'cov', 'sem')
        accept &= sources == 'cov'
        report = evaluate_mixture(_FixedLogits(rng.normal(size=(n, 3))),
                                  _mixture(accept, sources))
        reject_rate = 1.0 - accept.mean()
        assert report.auroc == pytest.approx(50.0, abs=2.0)
        assert report.aurc == pytest.approx(reject_rate * 1000.0, rel=0.05)
