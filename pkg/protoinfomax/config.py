"""Модуль загрузки и валидации конфигурации"""
import json
import os
from typing import Any, Dict, Optional

from protoinfomax.corpus import EpisodeSpec
from protoinfomax.exceptions import ConfigError
from protoinfomax.protomax import MODELS
from protoinfomax.synthetic import SyntheticSpec
from protoinfomax.training import TrainConfig

OUT_ENV = "PROTOINFOMAX_OUT"
RUN_CONFIG_FILE = "run_config.json"

DEFAULT_CONFIG = {
    "train_path": "data/train.jsonl",
    "val_path": "data/val.jsonl",
    "test_path": "data/test.jsonl",
    "out_dir": "runs",
    "model": "protoinfomax",
    "n_way": 2,
    "k_shot": 10,
    "n_id_queries": 50,
    "n_ood_queries": 20,
    "seed": 0,
    "epochs": 60,
    "episodes_per_epoch": 20,
    "batch_size": 64,
    "learning_rate": 0.001,
    "margin": 0.5,
    "d_emb": 100,
    "hidden_size": 100,
    "n_attention_queries": 5,
    "max_len": 64,
    "max_keywords": 10,
    "grad_clip": 5.0,
    "freeze_embeddings": False,
    "vectors_path": None,
    "checkpoint": None,
    "n_bins": 10,
    "plots": True,
    "verbose": True,
    "synthetic_domains": 6,
    "synthetic_val_domains": 3,
    "synthetic_test_domains": 3,
    "synthetic_classes": 2,
    "synthetic_sentences_per_class": 200,
    "synthetic_vocab_size": 200,
    "synthetic_cluster_size": 20,
    "synthetic_overlap": 0.2,
}

POSITIVE_INT_KEYS = ("n_way", "k_shot", "n_id_queries", "n_ood_queries", "epochs",
                     "episodes_per_epoch", "batch_size", "d_emb", "hidden_size",
                     "n_attention_queries", "max_len", "max_keywords", "n_bins",
                     "synthetic_domains", "synthetic_val_domains", "synthetic_test_domains",
                     "synthetic_classes", "synthetic_vocab_size", "synthetic_cluster_size")
STRING_KEYS = ("train_path", "val_path", "test_path", "out_dir")
OPTIONAL_STRING_KEYS = ("vectors_path", "checkpoint")
BOOL_KEYS = ("freeze_embeddings", "plots", "verbose")


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_config(config: Dict[str, Any]) -> None:
    """
    Валидация конфигурации

    Все найденные проблемы собираются и сообщаются одной ошибкой.

    Args:
        config: Словарь с конфигурацией

    Raises:
        ConfigError: При невалидной конфигурации
    """
    errors = []

    unknown = sorted(set(config) - set(DEFAULT_CONFIG))
    if unknown:
        errors.append(f"неизвестные ключи: {unknown}")
    missing = sorted(set(DEFAULT_CONFIG) - set(config))
    if missing:
        errors.append(f"отсутствуют ключи: {missing}")

    for key in POSITIVE_INT_KEYS:
        if key in config and (not _is_int(config[key]) or config[key] < 1):
            errors.append(f"{key} должен быть целым числом >= 1")
    for key in STRING_KEYS:
        if key in config and (not isinstance(config[key], str) or not config[key]):
            errors.append(f"{key} должен быть непустой строкой")
    for key in OPTIONAL_STRING_KEYS:
        if key in config and config[key] is not None and not isinstance(config[key], str):
            errors.append(f"{key} должен быть строкой или null")
    for key in BOOL_KEYS:
        if key in config and not isinstance(config[key], bool):
            errors.append(f"{key} должен быть true или false")

    if "model" in config and config["model"] not in MODELS:
        errors.append(f"model должен быть одним из {MODELS}, получено {config['model']!r}")
    if "seed" in config and (not _is_int(config["seed"]) or not 0 <= config["seed"] < 2 ** 64):
        errors.append("seed должен быть целым числом в [0, 2^64)")
    if "learning_rate" in config and (not _is_number(config["learning_rate"])
                                      or config["learning_rate"] < 0):
        errors.append("learning_rate должен быть неотрицательным числом")
    if "grad_clip" in config and (not _is_number(config["grad_clip"]) or config["grad_clip"] <= 0):
        errors.append("grad_clip должен быть положительным числом")
    for key in ("margin", "synthetic_overlap"):
        if key in config and (not _is_number(config[key]) or not 0 <= config[key] <= 1):
            errors.append(f"{key} должен лежать в [0, 1]")
    if "synthetic_sentences_per_class" in config and (
            not _is_int(config["synthetic_sentences_per_class"])
            or config["synthetic_sentences_per_class"] < 2):
        errors.append("synthetic_sentences_per_class должен быть целым числом >= 2")

    if errors:
        raise ConfigError("Некорректная конфигурация: " + "; ".join(errors))


def load_configuration(config_path: Optional[str] = None,
                       overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Загрузка конфигурации

    Приоритет: overrides (флаги CLI) > файл > переменная PROTOINFOMAX_OUT
    (только out_dir) > DEFAULT_CONFIG.

    Args:
        config_path: Путь к JSON-файлу конфигурации (плоский объект)
        overrides: Значения из командной строки; None пропускаются

    Returns:
        Dict с настройками

    Raises:
        ConfigError: При ошибках чтения, парсинга или валидации
    """
    config = DEFAULT_CONFIG.copy()
    if os.environ.get(OUT_ENV):
        config["out_dir"] = os.environ[OUT_ENV]

    try:
        if config_path is not None:
            if not os.path.exists(config_path):
                print(f"Файл {config_path} не найден. Используются настройки по умолчанию")
            else:
                with open(config_path, 'r', encoding='utf-8') as file:
                    user_config = json.load(file)
                if not isinstance(user_config, dict):
                    raise ConfigError(f"Файл {config_path} должен содержать JSON-объект")
                config.update(user_config)

        config.update({key: value for key, value in (overrides or {}).items() if value is not None})
        validate_config(config)

        if config_path is not None and config["verbose"]:
            print(f"Конфигурация загружена из {config_path}")
            print(f"Модель: {config['model']}, N={config['n_way']}, K={config['k_shot']}, "
                  f"seed={config['seed']}")
        return config

    except json.JSONDecodeError as e:
        raise ConfigError(f"Ошибка парсинга JSON в файле {config_path}: {e}")
    except (IOError, UnicodeDecodeError) as e:
        raise ConfigError(f"Ошибка чтения файла {config_path}: {e}")


def save_run_config(config: Dict[str, Any], directory: str) -> str:
    """Запись итоговой конфигурации в run_config.json каталога"""
    path = os.path.join(directory, RUN_CONFIG_FILE)
    try:
        os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as file:
            json.dump(config, file, ensure_ascii=False, indent=2, sort_keys=True)
            file.write('\n')
    except OSError as e:
        raise ConfigError(f"Ошибка записи {path}: {e}")
    return path


def run_name(config: Dict[str, Any]) -> str:
    return f"{config['model']}_n{config['n_way']}_k{config['k_shot']}_seed{config['seed']}"


def run_directory(config: Dict[str, Any]) -> str:
    return os.path.join(config["out_dir"], run_name(config))


def episode_spec(config: Dict[str, Any]) -> EpisodeSpec:
    return EpisodeSpec(config["n_way"], config["k_shot"], config["n_id_queries"],
                       config["n_ood_queries"], config["seed"])


def train_config(config: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        model=config["model"],
        epochs=config["epochs"],
        episodes_per_epoch=config["episodes_per_epoch"],
        batch_size=config["batch_size"],
        learning_rate=float(config["learning_rate"]),
        seed=config["seed"],
        episode=episode_spec(config),
        margin=float(config["margin"]),
        d_emb=config["d_emb"],
        hidden_size=config["hidden_size"],
        n_attention_queries=config["n_attention_queries"],
        max_len=config["max_len"],
        max_keywords=config["max_keywords"],
        grad_clip=float(config["grad_clip"]),
        freeze_embeddings=config["freeze_embeddings"],
        verbose=config["verbose"],
    )


def synthetic_spec(config: Dict[str, Any]) -> SyntheticSpec:
    return SyntheticSpec(
        n_domains=config["synthetic_domains"],
        n_val_domains=config["synthetic_val_domains"],
        n_test_domains=config["synthetic_test_domains"],
        classes_per_domain=config["synthetic_classes"],
        sentences_per_class=config["synthetic_sentences_per_class"],
        vocab_size=config["synthetic_vocab_size"],
        cluster_size=config["synthetic_cluster_size"],
        overlap=float(config["synthetic_overlap"]),
        seed=config["seed"],
    )
