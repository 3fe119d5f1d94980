"""
Модуль генерации синтетических корпусов

Каждый домен получает кластер ключевых слов: часть токенов общая для всех
доменов (их число задаёт overlap), остальные уникальны. Классы домена
различаются собственными токенами, общий словарь-наполнитель смешивается
во все предложения.
"""
import os
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from protoinfomax.corpus import Corpus, Sentence, save_corpus
from protoinfomax.exceptions import ConfigError, CorpusError


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Параметры синтетического корпуса

    Attributes:
        n_domains: Число доменов meta-train
        n_val_domains: Число доменов meta-val
        n_test_domains: Число доменов meta-test
        classes_per_domain: Число классов в домене
        sentences_per_class: Число предложений на класс
        vocab_size: Размер словаря-наполнителя
        cluster_size: Размер кластера ключевых слов домена
        overlap: Доля пересечения кластеров разных доменов (по Жаккару), [0, 1]
        seed: Зерно генератора
    """

    n_domains: int = 6
    n_val_domains: int = 3
    n_test_domains: int = 3
    classes_per_domain: int = 2
    sentences_per_class: int = 200
    vocab_size: int = 200
    cluster_size: int = 20
    overlap: float = 0.2
    seed: int = 0
    class_tokens: int = 5
    cluster_words: int = 3
    class_words: int = 2
    filler_words: int = 3

    def __post_init__(self):
        errors = []
        for name in ("n_domains", "n_val_domains", "n_test_domains", "classes_per_domain",
                     "vocab_size", "cluster_size", "class_tokens"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                errors.append(f"{name} должен быть >= 1")
        if not isinstance(self.sentences_per_class, int) or self.sentences_per_class < 2:
            errors.append("sentences_per_class должен быть >= 2")
        for name in ("cluster_words", "class_words", "filler_words"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                errors.append(f"{name} должен быть >= 0")
        if self.cluster_words + self.class_words < 1:
            errors.append("cluster_words + class_words должно быть >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            errors.append(f"overlap должен лежать в [0, 1], получено {self.overlap}")
        if errors:
            raise ConfigError("Некорректные параметры генератора: " + "; ".join(errors))

    @property
    def shared_size(self) -> int:
        """Число общих токенов s: s / (2c - s) = overlap"""
        return int(round(2 * self.cluster_size * self.overlap / (1.0 + self.overlap)))

    def split_domains(self) -> Dict[str, List[str]]:
        names = {"meta-train": ("train", self.n_domains), "meta-val": ("val", self.n_val_domains),
                 "meta-test": ("test", self.n_test_domains)}
        return {split: [f"{prefix}{index:02d}" for index in range(count)]
                for split, (prefix, count) in names.items()}


def domain_clusters(spec: SyntheticSpec) -> Dict[str, List[str]]:
    """Кластеры ключевых слов всех доменов (по всем сплитам)"""
    shared = [f"shared{index}" for index in range(spec.shared_size)]
    clusters = {}
    for domains in spec.split_domains().values():
        for domain in domains:
            unique = [f"{domain}kw{index}" for index in range(spec.cluster_size - len(shared))]
            clusters[domain] = shared + unique
    return clusters


def jaccard(a: List[str], b: List[str]) -> float:
    union = set(a) | set(b)
    return len(set(a) & set(b)) / len(union) if union else 1.0


def _domain_sentences(spec: SyntheticSpec, domain: str, cluster: List[str],
                      filler: List[str], rng: np.random.Generator) -> List[Sentence]:
    sentences = []
    for class_index in range(spec.classes_per_domain):
        label = f"c{class_index}"
        class_vocab = [f"{domain}{label}w{index}" for index in range(spec.class_tokens)]
        for number in range(spec.sentences_per_class):
            words = list(rng.choice(cluster, size=spec.cluster_words))
            words += list(rng.choice(class_vocab, size=spec.class_words))
            words += list(rng.choice(filler, size=spec.filler_words))
            order = rng.permutation(len(words))
            text = " ".join(str(words[index]) for index in order)
            sentences.append(Sentence(f"{domain}-{label}-{number:04d}", text, label, domain))
    return sentences


def generate_corpora(spec: SyntheticSpec) -> Dict[str, Corpus]:
    """
    Генерация корпусов meta-train, meta-val и meta-test

    Домены сплитов не пересекаются; результат полностью определяется spec.
    """
    rng = np.random.default_rng(spec.seed)
    clusters = domain_clusters(spec)
    filler = [f"w{index}" for index in range(spec.vocab_size)]
    corpora = {}
    for split, domains in spec.split_domains().items():
        sentences = []
        for domain in domains:
            sentences.extend(_domain_sentences(spec, domain, clusters[domain], filler, rng))
        corpora[split] = Corpus(tuple(sentences), split)
    return corpora


def write_corpora(spec: SyntheticSpec, paths: Dict[str, str]) -> Dict[str, Corpus]:
    """
    Генерация и запись трёх JSONL-корпусов

    Args:
        spec: Параметры генератора
        paths: Словарь {сплит: путь к файлу} для meta-train, meta-val и meta-test

    Returns:
        Словарь {сплит: корпус}

    Raises:
        CorpusError: Если не задан путь для сплита или каталог недоступен для записи
    """
    corpora = generate_corpora(spec)
    missing = sorted(set(corpora) - set(paths))
    if missing:
        raise CorpusError(f"Не заданы пути для сплитов {missing}")

    for split, corpus in corpora.items():
        directory = os.path.dirname(paths[split]) or "."
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError as e:
            raise CorpusError(f"Не удалось создать каталог {directory}: {e}")
        save_corpus(corpus, paths[split])
    return corpora
