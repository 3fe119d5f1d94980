import unittest
import tempfile
import os
import sys
from unittest.mock import MagicMock

import numpy as np

# Добавляем родительскую директорию в путь для импорта модулей
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from protoinfomax import numerics as nx
from protoinfomax.corpus import EpisodeSpec
from protoinfomax.evaluation import (OOD_CLASS, PREDICTION_COLUMNS, PredictionRecord,
                                     ThresholdResult, bin_confidences, calibration,
                                     compute_metrics, evaluate_records, ood_confidence_histogram,
                                     read_json, read_predictions, score_encodings,
                                     score_meta_test, select_threshold, threshold_candidates,
                                     write_bins, write_json, write_predictions, write_sweep)
from protoinfomax.exceptions import EvaluationError, VisualizationError
from protoinfomax.protomax import EpisodeEncodings
from protoinfomax.visualizer import ReportVisualizer


def id_record(score, predicted=0, true=0, name=None, domain=''):
    return PredictionRecord(name or f"id-{score}", score, predicted, true, False, domain)


def ood_record(score, predicted=0, name=None, domain=''):
    return PredictionRecord(name or f"ood-{score}", score, predicted, OOD_CLASS, True, domain)


def records_from(id_scores, ood_scores):
    return ([id_record(float(s), name=f"i{n}") for n, s in enumerate(id_scores)]
            + [ood_record(float(s), name=f"o{n}") for n, s in enumerate(ood_scores)])


def brute_force_threshold(id_scores, ood_scores):
    ordered = sorted(list(id_scores) + list(ood_scores))
    candidates = sorted(set((ordered[i] + ordered[i + 1]) / 2.0 for i in range(len(ordered) - 1)))
    rates = []
    for c in candidates:
        frr = sum(1 for s in id_scores if s < c) / len(id_scores)
        far = sum(1 for s in ood_scores if s >= c) / len(ood_scores)
        rates.append((c, frr, far))
    for c, frr, far in rates:
        if frr - far >= 0:
            return c
    best = min(range(len(rates)), key=lambda i: (abs(rates[i][1] - rates[i][2]), i))
    return rates[best][0]


class TestThresholdSelection(unittest.TestCase):
    """Тесты выбора порога"""

    def test_1_small_example(self):
        """1. ID {0.9, 0.6}, OOD {0.2, 0.1}: tau = 0.4, FRR = FAR = 0"""
        result = select_threshold(records_from([0.9, 0.6], [0.2, 0.1]))

        self.assertAlmostEqual(result.tau, 0.4, places=12)
        self.assertEqual((result.frr_at_tau, result.far_at_tau), (0.0, 0.0))
        self.assertAlmostEqual(result.trace[0][0], 0.15, places=12)

    def test_2_single_pair(self):
        """2. Одна ID и одна OOD запись: tau строго между оценками"""
        result = select_threshold(records_from([0.7], [0.1]))
        self.assertTrue(0.1 < result.tau < 0.7)

    def test_3_one_sided_records(self):
        """3. Только ID или только OOD записи отклоняются"""
        with self.assertRaises(EvaluationError):
            select_threshold(records_from([0.5, 0.2], []))
        with self.assertRaises(EvaluationError):
            select_threshold(records_from([], [0.5, 0.2]))

    def test_4_matches_brute_force(self):
        """4. 200 случайных наборов (10–500 записей) совпадают с перебором"""
        rng = np.random.default_rng(0)
        for trial in range(200):
            n_id = int(rng.integers(5, 250))
            n_ood = int(rng.integers(5, 250))
            id_scores = rng.uniform(-1, 1, size=n_id) + 0.3
            ood_scores = rng.uniform(-1, 1, size=n_ood) - 0.3
            if trial % 3 == 0:
                id_scores, ood_scores = np.round(id_scores, 1), np.round(ood_scores, 1)
            result = select_threshold(records_from(id_scores, ood_scores))
            expected = brute_force_threshold([float(s) for s in id_scores],
                                             [float(s) for s in ood_scores])
            self.assertEqual(result.tau, expected, f"trial {trial}")

    def test_5_trace_monotone(self):
        """5. По трассе FRR не убывает, FAR не возрастает"""
        rng = np.random.default_rng(1)
        result = select_threshold(records_from(rng.normal(0.3, 0.3, 100), rng.normal(-0.2, 0.3, 80)))
        frr = [row[1] for row in result.trace]
        far = [row[2] for row in result.trace]
        self.assertEqual(frr, sorted(frr))
        self.assertEqual(far, sorted(far, reverse=True))
        self.assertEqual([row[0] for row in result.trace], sorted(row[0] for row in result.trace))

    def test_6_candidates(self):
        """6. Кандидаты - уникальные середины соседних оценок"""
        np.testing.assert_allclose(threshold_candidates(np.array([0.5, 0.1, 0.5, 0.3])),
                                   [0.2, 0.4, 0.5])


class TestMetrics(unittest.TestCase):
    """Тесты EER, CER^id и CER^all"""

    def fixture(self):
        return [
            id_record(0.9, 0, 0, 'a', 'A'), id_record(0.8, 1, 1, 'b', 'A'),
            id_record(0.7, 0, 1, 'c', 'B'), id_record(0.1, 0, 0, 'd', 'B'),
            ood_record(0.2, name='e', domain='A'), ood_record(0.3, name='f', domain='A'),
            ood_record(0.6, name='g', domain='B'), ood_record(0.95, name='h', domain='B'),
        ]

    def test_1_perfect_separation(self):
        """1. Идеальное разделение: все метрики нулевые"""
        records = [id_record(0.9), id_record(0.8, 1, 1, 'x'), ood_record(0.1), ood_record(-0.2)]
        _, report = evaluate_records(records)
        self.assertEqual((report.eer, report.cer_id, report.cer_all), (0.0, 0.0, 0.0))

    def test_2_hand_counts(self):
        """2. TP=3, TN=2, FP=1, FN=2, TP^id=2"""
        report = compute_metrics(self.fixture(), 0.5)

        self.assertEqual((report.tp, report.tn, report.fp, report.fn, report.tp_id),
                         (3, 2, 1, 2, 2))
        self.assertAlmostEqual(report.eer, 0.375)
        self.assertAlmostEqual(report.cer_id, 0.5)
        self.assertAlmostEqual(report.cer_all, 0.5)
        self.assertAlmostEqual(report.far, 0.5)
        self.assertAlmostEqual(report.frr, 0.25)

    def test_3_partition_and_domains(self):
        """3. TP+TN+FP+FN = n; разбивка по доменам"""
        report = compute_metrics(self.fixture(), 0.5)
        self.assertEqual(report.tp + report.tn + report.fp + report.fn, report.n)
        self.assertEqual(sorted(report.per_domain), ['A', 'B'])
        self.assertEqual(sum(d['n'] for d in report.per_domain.values()), report.n)
        self.assertAlmostEqual(report.per_domain['A']['eer'], 0.0)
        self.assertIn('per_domain', report.to_dict())

    def test_4_single_class_identity(self):
        """4. При N=1 CER^all совпадает с EER (50 наборов)"""
        rng = np.random.default_rng(2)
        for _ in range(50):
            records = records_from(rng.normal(0.4, 0.3, int(rng.integers(5, 60))),
                                   rng.normal(0.0, 0.3, int(rng.integers(5, 60))))
            _, report = evaluate_records(records)
            self.assertEqual(report.cer_all, report.eer)

    def test_5_empty_records(self):
        """5. Пустой список записей отклоняется"""
        with self.assertRaises(EvaluationError):
            compute_metrics([], 0.5)

    def test_6_record_validation(self):
        """6. Несогласованные записи отклоняются"""
        with self.assertRaises(EvaluationError):
            PredictionRecord('q', 0.5, 0, OOD_CLASS, False)
        with self.assertRaises(EvaluationError):
            PredictionRecord('q', float('nan'), 0, 0, False)


class TestCalibration(unittest.TestCase):
    """Тесты диаграмм надёжности и ECE"""

    def test_1_perfectly_calibrated(self):
        """1. Точность совпадает с уверенностью в каждом интервале: ECE = 0"""
        records = ([id_record(0.5, 0, 0, f"a{i}") for i in range(3)] + [id_record(0.5, 0, 1, 'a3')]
                   + [id_record(-0.5, 0, 0, 'b0')] + [id_record(-0.5, 0, 1, f"b{i}") for i in range(1, 4)])
        report = calibration(records)
        self.assertEqual(report.ece, 0.0)
        self.assertEqual(sum(b.count for b in report.bins), 8)

    def test_2_overconfident(self):
        """2. Уверенность 1.0 при половине верных ответов: ECE = 50%"""
        records = [id_record(1.0, 0, i % 2, f"q{i}") for i in range(10)]
        self.assertAlmostEqual(calibration(records).ece_percent, 50.0, places=10)

    def test_3_matches_brute_force(self):
        """3. 1000 случайных записей: ECE совпадает с прямым подсчётом"""
        rng = np.random.default_rng(3)
        confidences = rng.uniform(0, 1, 1000)
        correct = rng.uniform(0, 1, 1000) < confidences

        sums = {}
        for conf, ok in zip(confidences, correct):
            m = min(int(conf * 10), 9)
            count, hits, total = sums.get(m, (0, 0, 0.0))
            sums[m] = (count + 1, hits + int(ok), total + conf)
        expected = sum(count / 1000 * abs(hits / count - total / count)
                       for count, hits, total in sums.values())

        report = bin_confidences(confidences, correct)
        self.assertAlmostEqual(report.ece, expected, delta=1e-12)
        self.assertEqual(sum(b.count for b in report.bins), 1000)

    def test_4_order_invariance(self):
        """4. Перестановка записей не меняет ECE"""
        rng = np.random.default_rng(4)
        confidences = rng.uniform(0, 1, 300)
        correct = rng.uniform(0, 1, 300) < 0.6
        order = rng.permutation(300)
        self.assertAlmostEqual(bin_confidences(confidences, correct).ece,
                               bin_confidences(confidences[order], correct[order]).ece,
                               delta=1e-12)

    def test_5_ood_histogram(self):
        """5. Для OOD верно ⇔ d < tau; ID-записи не учитываются"""
        records = [ood_record(0.1, name='a'), ood_record(0.6, name='b'), id_record(0.9)]
        report = ood_confidence_histogram(records, 0.5)
        self.assertEqual(report.n, 2)
        self.assertAlmostEqual(report.accuracy, 0.5)
        with self.assertRaises(EvaluationError):
            calibration([ood_record(0.1)])


class TestScoring(unittest.TestCase):
    """Тесты скоринга закодированных эпизодов"""

    def test_1_scores_are_max_cosine(self):
        """1. Оценка - максимальный косинус, класс - аргмаксимум"""
        enc = EpisodeEncodings(
            support=nx.Tensor([[[1.0, 0.0]], [[0.0, 1.0]]]),
            id_queries=nx.Tensor([[2.0, 0.0], [1.0, 3.0]]),
            id_labels=np.array([0, 0]),
            ood_queries=nx.Tensor([[-1.0, -1.0]]),
        )
        records = score_encodings(enc, ['q1', 'q2'], ['o1'], 'books')

        self.assertAlmostEqual(records[0].score, 1.0)
        self.assertEqual(records[1].predicted_class, 1)
        self.assertAlmostEqual(records[1].score, 3.0 / np.sqrt(10.0))
        self.assertTrue(records[2].is_ood)
        self.assertAlmostEqual(records[2].score, -1.0 / np.sqrt(2.0))
        self.assertEqual({r.domain for r in records}, {'books'})

    def test_2_single_class_predictions(self):
        """2. При N=1 предсказанный класс всегда 0"""
        enc = EpisodeEncodings(support=nx.Tensor([[[1.0, 1.0], [1.0, 0.0]]]),
                               id_queries=nx.Tensor([[0.3, 1.0]]), id_labels=np.array([0]),
                               ood_queries=nx.Tensor([[-1.0, 2.0], [1.0, -3.0]]))
        records = score_encodings(enc, ['q'], ['o1', 'o2'])
        self.assertEqual([r.predicted_class for r in records], [0, 0, 0])

    def test_3_class_count_mismatch(self):
        """3. Число классов эпизода не совпадает с чекпоинтом"""
        checkpoint = MagicMock()
        checkpoint.n_classes = 3
        with self.assertRaises(EvaluationError):
            score_meta_test(checkpoint, MagicMock(), EpisodeSpec(n_classes=2, k_shot=1))


class TestReportFiles(unittest.TestCase):
    """Тесты файлов результатов и графиков"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.records = [id_record(0.8125, 1, 1, 'a'), id_record(-0.25, 0, 1, 'b'),
                        ood_record(0.1, 1, 'c'), ood_record(-0.6, 0, 'd')]

    def tearDown(self):
        self.temp_dir.cleanup()

    def path(self, name):
        return os.path.join(self.temp_dir.name, name)

    def test_1_predictions_round_trip(self):
        """1. Предсказания записываются с нужными колонками и читаются обратно"""
        write_predictions(self.records, self.path('predictions.csv'))
        with open(self.path('predictions.csv'), encoding='utf-8') as f:
            header = f.readline().strip()
            first = f.readline().strip()
        self.assertEqual(header, ','.join(PREDICTION_COLUMNS))
        self.assertEqual(first, 'a,0.8125,1,1,0')

        self.assertEqual(read_predictions(self.path('predictions.csv')), self.records)

    def test_2_bad_header(self):
        """2. Неверные колонки отклоняются"""
        with open(self.path('bad.csv'), 'w', encoding='utf-8') as f:
            f.write('id,score\nq,0.5\n')
        with self.assertRaises(EvaluationError):
            read_predictions(self.path('bad.csv'))

    def test_3_sweep_bins_and_json(self):
        """3. Трасса порога, интервалы и JSON"""
        threshold, report = evaluate_records(self.records)
        write_sweep(threshold, self.path('sweep.csv'))
        write_bins(calibration(self.records), self.path('bins.csv'))
        write_json(report.to_dict(), self.path('metrics.json'))

        with open(self.path('sweep.csv'), encoding='utf-8') as f:
            self.assertEqual(len(f.read().strip().split('\n')), len(threshold.trace) + 1)
        with open(self.path('bins.csv'), encoding='utf-8') as f:
            self.assertEqual(len(f.read().strip().split('\n')), 11)
        self.assertEqual(read_json(self.path('metrics.json'))['eer'], report.eer)

    def test_4_plots(self):
        """4. Графики сохраняются в PNG"""
        visualizer = ReportVisualizer('protoinfomax K=1')
        threshold, _ = evaluate_records(self.records)
        visualizer.plot_reliability_diagram(calibration(self.records), self.path('rel.png'))
        visualizer.plot_confidence_histogram(ood_confidence_histogram(self.records, threshold.tau),
                                             self.path('ood.png'))
        visualizer.plot_threshold_sweep(threshold, self.path('sweep.png'))

        for name in ('rel.png', 'ood.png', 'sweep.png'):
            self.assertTrue(os.path.exists(self.path(name)))

    def test_5_empty_trace(self):
        """5. Пустая трасса порога приводит к VisualizationError"""
        with self.assertRaises(VisualizationError):
            ReportVisualizer('x').plot_threshold_sweep(ThresholdResult(0.0, 0.0, 0.0, []),
                                                       self.path('empty.png'))


if __name__ == '__main__':
    unittest.main()
