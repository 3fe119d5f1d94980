import unittest
import tempfile
import json
import io
import os
import sys
from unittest.mock import patch

import numpy as np

# Добавляем родительскую директорию в путь для импорта модулей
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from protoinfomax import training
from protoinfomax.cli import REPORT_COLUMNS, cmd_generate, cmd_report, main
from protoinfomax.config import (DEFAULT_CONFIG, OUT_ENV, load_configuration, run_directory,
                                 synthetic_spec)
from protoinfomax.corpus import check_disjoint_domains, load_corpus
from protoinfomax.encoder import init_encoder
from protoinfomax.evaluation import read_json, write_json
from protoinfomax.exceptions import ConfigError, CorpusError
from protoinfomax.protomax import MODELS
from protoinfomax.synthetic import SyntheticSpec, domain_clusters, jaccard, write_corpora
from protoinfomax.training import load_checkpoint

SMALL_SETTINGS = {
    "n_way": 2,
    "k_shot": 2,
    "n_id_queries": 4,
    "n_ood_queries": 4,
    "epochs": 2,
    "episodes_per_epoch": 2,
    "batch_size": 8,
    "learning_rate": 0.01,
    "d_emb": 4,
    "hidden_size": 3,
    "n_attention_queries": 2,
    "max_len": 16,
    "n_bins": 5,
    "verbose": False,
    "synthetic_domains": 3,
    "synthetic_val_domains": 2,
    "synthetic_test_domains": 2,
    "synthetic_sentences_per_class": 8,
    "synthetic_vocab_size": 20,
    "synthetic_cluster_size": 6,
}


class TempDirTestCase(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = self.temp_dir.name

    def tearDown(self):
        self.temp_dir.cleanup()

    def write_config(self, values, name='config.json'):
        path = os.path.join(self.root, name)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(values, f)
        return path

    def small_config_file(self, **extra):
        values = dict(SMALL_SETTINGS)
        values.update({
            "train_path": os.path.join(self.root, 'data', 'train.jsonl'),
            "val_path": os.path.join(self.root, 'data', 'val.jsonl'),
            "test_path": os.path.join(self.root, 'data', 'test.jsonl'),
            "out_dir": os.path.join(self.root, 'runs'),
        })
        values.update(extra)
        return self.write_config(values)


class TestConfiguration(TempDirTestCase):
    """Тесты загрузки конфигурации"""

    def test_1_defaults(self):
        """1. Без файла используются значения по умолчанию"""
        with patch.dict(os.environ):
            os.environ.pop(OUT_ENV, None)
            config = load_configuration()
        self.assertEqual(config, DEFAULT_CONFIG)

    def test_2_precedence(self):
        """2. Флаги важнее файла, файл важнее переменной окружения"""
        path = self.write_config({"k_shot": 5, "model": "oproto"})
        with patch.dict(os.environ, {OUT_ENV: 'from_env'}):
            config = load_configuration(path, {"k_shot": 3, "seed": None})
            self.assertEqual(config["k_shot"], 3)
            self.assertEqual(config["model"], "oproto")
            self.assertEqual(config["seed"], 0)
            self.assertEqual(config["out_dir"], 'from_env')

            path = self.write_config({"out_dir": "from_file"}, 'other.json')
            self.assertEqual(load_configuration(path)["out_dir"], 'from_file')

    def test_3_all_errors_reported(self):
        """3. Неизвестные ключи и неверные значения сообщаются вместе"""
        path = self.write_config({"k_shot": 0, "dropout": 0.1, "model": "bert"})
        with self.assertRaises(ConfigError) as context:
            load_configuration(path)
        message = str(context.exception)
        self.assertIn('dropout', message)
        self.assertIn('k_shot', message)
        self.assertIn('bert', message)

    def test_4_invalid_json(self):
        """4. Некорректный JSON приводит к ConfigError"""
        path = os.path.join(self.root, 'broken.json')
        with open(path, 'w', encoding='utf-8') as f:
            f.write('{"k_shot": ')
        with self.assertRaises(ConfigError):
            load_configuration(path)

        path = self.write_config([1, 2, 3], 'list.json')
        with self.assertRaises(ConfigError):
            load_configuration(path)

    def test_5_missing_file(self):
        """5. Отсутствующий файл: значения по умолчанию"""
        with patch('builtins.print') as mock_print:
            config = load_configuration(os.path.join(self.root, 'absent.json'), {"seed": 4})
        self.assertEqual(config["seed"], 4)
        self.assertTrue(mock_print.called)

    def test_6_run_directory(self):
        """6. Имя каталога запуска включает модель, N, K и зерно"""
        config = dict(DEFAULT_CONFIG, out_dir='runs', model='protonet', k_shot=5, seed=2)
        self.assertEqual(run_directory(config), os.path.join('runs', 'protonet_n2_k5_seed2'))


class TestSyntheticCorpora(TempDirTestCase):
    """Тесты генератора синтетических корпусов"""

    def test_1_zero_overlap(self):
        """1. При overlap = 0 кластеры доменов не пересекаются"""
        clusters = domain_clusters(SyntheticSpec(overlap=0.0))
        names = sorted(clusters)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                self.assertEqual(jaccard(clusters[a], clusters[b]), 0.0)

    def test_2_partial_overlap(self):
        """2. overlap = 0.5 даёт пересечение по Жаккару около 0.5"""
        spec = SyntheticSpec(overlap=0.5, cluster_size=20)
        clusters = domain_clusters(spec)
        value = jaccard(clusters['train00'], clusters['test01'])
        self.assertAlmostEqual(value, 13 / 27)
        self.assertLess(abs(value - 0.5), 0.05)

    def test_3_same_seed_same_files(self):
        """3. generate с одинаковым зерном даёт побайтно одинаковые файлы"""
        outputs = []
        for name in ('a', 'b'):
            values = dict(SMALL_SETTINGS, seed=9)
            values.update({key: os.path.join(self.root, name, f"{split}.jsonl")
                           for key, split in (('train_path', 'train'), ('val_path', 'val'),
                                              ('test_path', 'test'))})
            path = self.write_config(values, f"{name}.json")
            self.assertEqual(main(['generate', '--config', path]), 0)
            outputs.append(values)

        for key in ('train_path', 'val_path', 'test_path'):
            with open(outputs[0][key], 'rb') as f1, open(outputs[1][key], 'rb') as f2:
                self.assertEqual(f1.read(), f2.read(), key)

    def test_4_generate_command(self):
        """4. generate пишет три корпуса с непересекающимися доменами"""
        config = load_configuration(self.small_config_file())
        paths = cmd_generate(config)

        corpora = {split: load_corpus(path, split) for split, path in paths.items()}
        check_disjoint_domains(corpora['meta-train'], corpora['meta-val'])
        check_disjoint_domains(corpora['meta-train'], corpora['meta-test'])
        check_disjoint_domains(corpora['meta-val'], corpora['meta-test'])
        self.assertEqual(len(corpora['meta-train'].domains), 3)
        self.assertEqual(len(corpora['meta-test'].sentences), 2 * 2 * 8)
        self.assertEqual(synthetic_spec(config).seed, config['seed'])
        self.assertTrue(os.path.exists(os.path.join(self.root, 'data', 'run_config.json')))

    def test_5_missing_split_path(self):
        """5. write_corpora требует путь для каждого сплита"""
        with self.assertRaises(CorpusError):
            write_corpora(SyntheticSpec(sentences_per_class=2),
                          {'meta-train': os.path.join(self.root, 'train.jsonl')})


class TestReport(TempDirTestCase):
    """Тесты сводной таблицы"""

    def setUp(self):
        super().setUp()
        self.metrics = {}
        for index, model in enumerate(MODELS):
            for k_shot in (1, 5, 10):
                directory = os.path.join(self.root, f"{model}_n2_k{k_shot}_seed0")
                os.makedirs(directory)
                metrics = {"model": model, "n_way": 2, "k_shot": k_shot, "seed": 0,
                           "eer": 0.1 + index / 7.0 + k_shot / 300.0, "cer_id": 0.2 / (k_shot + 1),
                           "cer_all": 1 / 3, "tau": 0.6125}
                write_json(metrics, os.path.join(directory, 'metrics.json'))
                self.metrics[(model, k_shot)] = metrics
        config = dict(DEFAULT_CONFIG, out_dir=self.root, verbose=False)
        self.csv_path = cmd_report(config)

    def test_1_rows(self):
        """1. Двенадцать строк в порядке моделей и K"""
        with open(self.csv_path, encoding='utf-8') as f:
            lines = f.read().strip().split('\n')
        self.assertEqual(lines[0], ','.join(REPORT_COLUMNS))
        self.assertEqual(len(lines), 13)
        keys = [tuple(line.split(',')[:3]) for line in lines[1:]]
        expected = [(model, '2', str(k)) for model in MODELS for k in (1, 5, 10)]
        self.assertEqual(keys, expected)

    def test_2_numbers_match_metrics(self):
        """2. Числа в отчёте посимвольно совпадают с metrics.json"""
        with open(self.csv_path, encoding='utf-8') as f:
            lines = f.read().strip().split('\n')[1:]
        for line in lines:
            fields = dict(zip(REPORT_COLUMNS, line.split(',')))
            metrics = self.metrics[(fields['model'], int(fields['k_shot']))]
            for key in ('eer', 'cer_id', 'cer_all', 'tau'):
                self.assertEqual(fields[key], repr(metrics[key]))
                self.assertEqual(float(fields[key]), metrics[key])
            self.assertEqual(fields['ece_id'], '')
        self.assertTrue(os.path.exists(os.path.join(self.root, 'report.md')))

    def test_3_empty_directory(self):
        """3. Пустой каталог: ненулевой код выхода"""
        empty = os.path.join(self.root, 'empty')
        os.makedirs(empty)
        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code = main(['report', '--out', empty])
        self.assertEqual(code, 1)
        self.assertIn('metrics.json', stderr.getvalue())


class TestPipeline(TempDirTestCase):
    """Сквозной прогон generate -> train -> evaluate -> calibrate -> report"""

    def run_command(self, command, *extra):
        return main([command, '--config', self.config_path] + list(extra))

    def setUp(self):
        super().setUp()
        self.config_path = self.small_config_file()

    def test_1_missing_checkpoint(self):
        """1. evaluate без чекпоинта завершается с кодом 1"""
        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code = self.run_command('evaluate')
        self.assertEqual(code, 1)
        self.assertIn('чекпоинт', stderr.getvalue())

    def test_2_full_pipeline(self):
        """2. Все команды отрабатывают и пишут артефакты"""
        for command in ('generate', 'train', 'evaluate', 'calibrate'):
            self.assertEqual(self.run_command(command, '--model', 'protoinfomaxpp'), 0, command)

        directory = os.path.join(self.root, 'runs', 'protoinfomaxpp_n2_k2_seed0')
        for name in ('checkpoint.bin', 'epoch_log.csv', 'vocab.txt', 'idf.tsv', 'run_config.json',
                     'predictions.csv', 'metrics.json', 'threshold_sweep.csv',
                     'threshold_sweep.png', 'calibration.json', 'reliability_id.csv',
                     'confidence_ood.csv', 'reliability_id.png', 'confidence_ood.png'):
            self.assertTrue(os.path.exists(os.path.join(directory, name)), name)

        metrics = read_json(os.path.join(directory, 'metrics.json'))
        self.assertEqual(metrics['model'], 'protoinfomaxpp')
        for key in ('eer', 'cer_id', 'cer_all'):
            self.assertGreaterEqual(metrics[key], 0.0)
            self.assertLessEqual(metrics[key], 1.0)

        self.assertEqual(self.run_command('report'), 0)
        with open(os.path.join(self.root, 'runs', 'report.csv'), encoding='utf-8') as f:
            lines = f.read().strip().split('\n')
        self.assertEqual(len(lines), 2)
        calibration_report = read_json(os.path.join(directory, 'calibration.json'))
        self.assertEqual(lines[1].split(',')[-1], repr(calibration_report['id']['ece_percent']))

    def test_3_evaluation_is_deterministic(self):
        """3. Повторная оценка даёт побайтно те же предсказания"""
        for command in ('generate', 'train', 'evaluate'):
            self.assertEqual(self.run_command(command), 0, command)
        path = os.path.join(self.root, 'runs', 'protoinfomax_n2_k2_seed0', 'predictions.csv')
        with open(path, 'rb') as f:
            first = f.read()

        self.assertEqual(self.run_command('evaluate'), 0)
        with open(path, 'rb') as f:
            self.assertEqual(f.read(), first)

    def test_4_divergence_exit_code(self):
        """4. Нечисловая потеря: код 1 и чекпоинт с начальными параметрами"""
        self.assertEqual(self.run_command('generate'), 0)
        real_update = training._update
        calls = []

        def nan_after_first(*args):
            calls.append(args)
            return real_update(*args) if len(calls) == 1 else float('nan')

        with patch('protoinfomax.training._update', side_effect=nan_after_first), \
                patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code = self.run_command('train')
        self.assertEqual(code, 1)
        self.assertIn('нечисловой', stderr.getvalue())

        checkpoint = load_checkpoint(os.path.join(self.root, 'runs', 'protoinfomax_n2_k2_seed0',
                                                  'checkpoint.bin'))
        self.assertEqual(checkpoint.epoch, 0)
        initial = init_encoder(len(checkpoint.vocabulary()), 4, 0, hidden_size=3,
                               n_queries=2).state()
        for name, array in initial.items():
            np.testing.assert_array_equal(checkpoint.state[name], array, err_msg=name)

    def test_5_invalid_encoding_exit_code(self):
        """5. Корпус не в UTF-8: код 1 и сообщение с номером строки"""
        self.assertEqual(self.run_command('generate'), 0)
        with open(os.path.join(self.root, 'data', 'train.jsonl'), 'ab') as f:
            f.write(b'{"id": "bad", "text": "\xff\xfe", "label": "c0", "domain": "train00"}\n')
        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code = self.run_command('train')
        self.assertEqual(code, 1)
        self.assertIn('UTF-8', stderr.getvalue())


if __name__ == '__main__':
    unittest.main()
