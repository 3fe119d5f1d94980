"""
Командная строка: generate, train, evaluate, calibrate, report

Каждая команда читает итоговую конфигурацию (флаги > файл > значения по
умолчанию), пишет артефакты в каталог запуска и возвращает код выхода.
"""
import argparse
import csv
import glob
import os
import sys
from typing import Any, Dict, List, Optional

from protoinfomax import __version__
from protoinfomax.config import (episode_spec, load_configuration, run_directory, save_run_config,
                                 synthetic_spec, train_config)
from protoinfomax.corpus import check_disjoint_domains, load_corpus
from protoinfomax.encoder import load_pretrained_vectors
from protoinfomax.evaluation import (calibration, compute_metrics, ood_confidence_histogram,
                                     read_json, read_predictions, score_meta_test, select_threshold,
                                     write_bins, write_json, write_predictions, write_sweep)
from protoinfomax.exceptions import ProtoInfoMaxError, TrainingError
from protoinfomax.features import build_vocabulary, save_idf, save_vocabulary
from protoinfomax.protomax import MODELS
from protoinfomax.synthetic import write_corpora
from protoinfomax.training import load_checkpoint, save_checkpoint, train, write_epoch_log
from protoinfomax.visualizer import ReportVisualizer

COMMANDS = ("generate", "train", "evaluate", "calibrate", "report")
REPORT_COLUMNS = ("model", "n_way", "k_shot", "seed", "eer", "cer_id", "cer_all", "tau", "ece_id")


def _checkpoint_path(config: Dict[str, Any]) -> str:
    return config["checkpoint"] or os.path.join(run_directory(config), "checkpoint.bin")


def _require(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise ProtoInfoMaxError(f"Не найден {what}: {path}")


def cmd_generate(config: Dict[str, Any]) -> Dict[str, str]:
    """
    Генерация синтетических корпусов по путям train_path, val_path, test_path

    Returns:
        Словарь {сплит: путь}
    """
    paths = {"meta-train": config["train_path"], "meta-val": config["val_path"],
             "meta-test": config["test_path"]}
    corpora = write_corpora(synthetic_spec(config), paths)
    if config["verbose"]:
        for split, corpus in corpora.items():
            print(f"{split}: {len(corpus.sentences)} предложений, {len(corpus.domains)} доменов -> "
                  f"{paths[split]}")
    save_run_config(config, os.path.dirname(paths["meta-train"]) or ".")
    return paths


def cmd_train(config: Dict[str, Any]) -> str:
    """
    Обучение модели

    Пишет checkpoint.bin, epoch_log.csv, vocab.txt, idf.tsv, run_config.json.

    Returns:
        Каталог запуска

    Raises:
        TrainingError: Если потеря стала нечисловой (артефакты к этому моменту записаны)
    """
    _require(config["train_path"], "корпус meta-train")
    _require(config["val_path"], "корпус meta-val")
    corpus = load_corpus(config["train_path"], "meta-train")
    val_corpus = load_corpus(config["val_path"], "meta-val")
    check_disjoint_domains(corpus, val_corpus)

    vocab = build_vocabulary([corpus, val_corpus])
    vectors = None
    if config["vectors_path"]:
        _require(config["vectors_path"], "файл векторов слов")
        vectors = load_pretrained_vectors(config["vectors_path"], vocab, seed=config["seed"],
                                          trainable=not config["freeze_embeddings"])
        if config["verbose"]:
            print(f"Векторы слов: покрытие {vectors.coverage:.1%}, "
                  f"пропущено строк {vectors.skipped_lines}")

    settings = train_config(config)
    if vectors is not None and vectors.d_emb != settings.d_emb:
        raise ProtoInfoMaxError(
            f"Размерность векторов {vectors.d_emb} не совпадает с d_emb={settings.d_emb}"
        )
    result = train(settings, corpus, val_corpus, vectors=vectors, vocab=vocab)

    directory = run_directory(config)
    save_run_config(config, directory)
    checkpoint_path = _checkpoint_path(config)
    save_checkpoint(result.checkpoint, checkpoint_path)
    write_epoch_log(result.log, os.path.join(directory, "epoch_log.csv"))
    save_vocabulary(result.checkpoint.vocabulary(), os.path.join(directory, "vocab.txt"))
    save_idf(result.checkpoint.idf_table(), result.checkpoint.vocabulary(),
             os.path.join(directory, "idf.tsv"))

    if result.diverged:
        raise TrainingError(
            f"Потеря стала нечисловой; сохранён последний проверенный чекпоинт "
            f"(эпоха {result.checkpoint.epoch}) -> {checkpoint_path}"
        )
    if config["verbose"]:
        print(f"Обучение завершено; лучший чекпоинт: эпоха {result.checkpoint.epoch} -> {checkpoint_path}")
    return directory


def cmd_evaluate(config: Dict[str, Any]) -> str:
    """
    Оценка на meta-test

    Пишет predictions.csv, metrics.json, threshold_sweep.csv (и PNG при plots).

    Returns:
        Каталог запуска
    """
    checkpoint_path = _checkpoint_path(config)
    _require(checkpoint_path, "чекпоинт")
    _require(config["test_path"], "корпус meta-test")
    checkpoint = load_checkpoint(checkpoint_path)
    test_corpus = load_corpus(config["test_path"], "meta-test")
    if os.path.exists(config["train_path"]):
        check_disjoint_domains(load_corpus(config["train_path"], "meta-train"), test_corpus)

    records = score_meta_test(checkpoint, test_corpus, episode_spec(config))
    threshold = select_threshold(records)
    report = compute_metrics(records, threshold.tau)

    directory = run_directory(config)
    save_run_config(config, directory)
    write_predictions(records, os.path.join(directory, "predictions.csv"))
    write_sweep(threshold, os.path.join(directory, "threshold_sweep.csv"))
    payload = {"model": checkpoint.config.model, "n_way": config["n_way"],
               "k_shot": config["k_shot"], "seed": config["seed"]}
    payload.update(report.to_dict())
    write_json(payload, os.path.join(directory, "metrics.json"))

    if config["plots"]:
        visualizer = ReportVisualizer(f"{checkpoint.config.model}, K={config['k_shot']}")
        visualizer.plot_threshold_sweep(threshold, os.path.join(directory, "threshold_sweep.png"))

    if config["verbose"]:
        print(f"EER={report.eer:.4f}, CER^id={report.cer_id:.4f}, CER^all={report.cer_all:.4f}, "
              f"tau={report.tau:.4f} ({report.n_id} ID, {report.n_ood} OOD)")
    return directory


def cmd_calibrate(config: Dict[str, Any]) -> str:
    """
    Калибровка по предсказаниям evaluate

    Пишет calibration.json, reliability_id.csv, confidence_ood.csv (и PNG при plots).

    Returns:
        Каталог запуска
    """
    directory = run_directory(config)
    predictions_path = os.path.join(directory, "predictions.csv")
    metrics_path = os.path.join(directory, "metrics.json")
    _require(predictions_path, "файл предсказаний (сначала выполните evaluate)")
    _require(metrics_path, "файл метрик (сначала выполните evaluate)")

    records = read_predictions(predictions_path)
    tau = read_json(metrics_path)["tau"]
    id_report = calibration(records, config["n_bins"])
    ood_report = ood_confidence_histogram(records, tau, config["n_bins"])

    save_run_config(config, directory)
    write_json({"tau": tau, "id": id_report.to_dict(), "ood": ood_report.to_dict()},
               os.path.join(directory, "calibration.json"))
    write_bins(id_report, os.path.join(directory, "reliability_id.csv"))
    write_bins(ood_report, os.path.join(directory, "confidence_ood.csv"))

    if config["plots"]:
        visualizer = ReportVisualizer(f"{config['model']}, K={config['k_shot']}")
        visualizer.plot_reliability_diagram(id_report, os.path.join(directory, "reliability_id.png"))
        visualizer.plot_confidence_histogram(id_report, os.path.join(directory, "confidence_id.png"),
                                             subject='ID')
        visualizer.plot_confidence_histogram(ood_report, os.path.join(directory, "confidence_ood.png"))

    if config["verbose"]:
        print(f"ECE (ID) = {id_report.ece_percent:.2f}, средняя уверенность "
              f"{id_report.average_confidence:.3f}, точность {id_report.accuracy:.3f}")
    return directory


def _report_rows(out_dir: str) -> List[Dict[str, str]]:
    rows = []
    for metrics_path in sorted(glob.glob(os.path.join(out_dir, "*", "metrics.json"))):
        metrics = read_json(metrics_path)
        calibration_path = os.path.join(os.path.dirname(metrics_path), "calibration.json")
        ece = None
        if os.path.exists(calibration_path):
            ece = read_json(calibration_path)["id"]["ece_percent"]
        row = {key: metrics[key] for key in REPORT_COLUMNS[:-1]}
        row["ece_id"] = ece
        rows.append(row)

    order = {model: index for index, model in enumerate(MODELS)}
    rows.sort(key=lambda row: (order.get(row["model"], len(order)), row["n_way"], row["k_shot"],
                               row["seed"]))
    return [{key: "" if value is None else (repr(value) if isinstance(value, float) else str(value))
             for key, value in row.items()} for row in rows]


def cmd_report(config: Dict[str, Any]) -> str:
    """
    Сводная таблица по всем запускам out_dir (модели x K)

    Пишет report.csv и report.md; числа совпадают с metrics.json посимвольно,
    ece_id берётся из calibration.json в процентах.

    Returns:
        Путь к report.csv
    """
    out_dir = config["out_dir"]
    rows = _report_rows(out_dir)
    if not rows:
        raise ProtoInfoMaxError(f"В каталоге {out_dir} нет ни одного metrics.json")

    csv_path = os.path.join(out_dir, "report.csv")
    markdown_path = os.path.join(out_dir, "report.md")
    try:
        with open(csv_path, "w", encoding="utf-8", newline="") as file:
            writer = csv.DictWriter(file, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        with open(markdown_path, "w", encoding="utf-8", newline="\n") as file:
            file.write("| " + " | ".join(REPORT_COLUMNS) + " |\n")
            file.write("|" + "---|" * len(REPORT_COLUMNS) + "\n")
            for row in rows:
                file.write("| " + " | ".join(row[key] for key in REPORT_COLUMNS) + " |\n")
    except IOError as e:
        raise ProtoInfoMaxError(f"Ошибка записи отчёта в {out_dir}: {e}")

    if config["verbose"]:
        print(f"Отчёт: {len(rows)} строк -> {csv_path}, {markdown_path}")
    return csv_path


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON-файл конфигурации")
    common.add_argument("--seed", type=int, default=None, help="Зерно генераторов")
    common.add_argument("--out", type=str, default=None, help="Корневой каталог результатов")
    common.add_argument("--model", type=str, default=None, choices=MODELS, help="Модель")
    common.add_argument("--k-shot", dest="k_shot", type=int, default=None, help="K опорных примеров")
    common.add_argument("--n-way", dest="n_way", type=int, default=None, help="N классов в эпизоде")

    parser = argparse.ArgumentParser(
        prog="protoinfomax",
        description="Прототипные сети с InfoMax для классификации ID и обнаружения OOD",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="Сгенерировать синтетические корпуса")
    sub.add_parser("train", parents=[common], help="Обучить модель")
    sub.add_parser("evaluate", parents=[common], help="Оценить модель на meta-test")
    sub.add_parser("calibrate", parents=[common], help="Построить диаграммы надёжности и ECE")
    sub.add_parser("report", parents=[common], help="Сводная таблица по запускам")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Точка входа командной строки

    Returns:
        Код выхода: 0 при успехе, 1 при ошибке, 130 при прерывании
    """
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out_dir": args.out, "model": args.model,
                 "k_shot": args.k_shot, "n_way": args.n_way}
    try:
        config = load_configuration(args.config, overrides)
        HANDLERS[args.command](config)
        return 0
    except ProtoInfoMaxError as e:
        print(f"Ошибка ({args.command}): {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\nПрограмма прервана пользователем.", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
