"""Модуль корпусов предложений и сэмплирования эпизодов"""
import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Tuple

import numpy as np

from protoinfomax.exceptions import CorpusError, EpisodeSamplingError

OOD_LABEL = "ood"
SPLITS = ("meta-train", "meta-val", "meta-test")
EVALUATION_SPLITS = ("meta-val", "meta-test")
RECORD_FIELDS = ("id", "text", "label", "domain")
# то же правило слова, что и в features.tokenize
_WORD = re.compile(r"\w")


@dataclass(frozen=True)
class Sentence:
    """Размеченное предложение корпуса"""

    id: str
    text: str
    label: str
    domain: str

    def __post_init__(self):
        if not self.id:
            raise CorpusError("Пустой идентификатор предложения")
        if not self.text.strip():
            raise CorpusError(f"Пустой текст у предложения {self.id}")
        if not _WORD.search(self.text):
            raise CorpusError(f"Текст предложения {self.id} не содержит ни одного слова")
        if not self.label.strip():
            raise CorpusError(f"Пустая метка у предложения {self.id}")
        if not self.domain.strip():
            raise CorpusError(f"Пустой домен у предложения {self.id}")

    def to_record(self) -> Dict[str, str]:
        return {name: getattr(self, name) for name in RECORD_FIELDS}


@dataclass(frozen=True)
class Corpus:
    """
    Неизменяемый корпус одного сплита (meta-train, meta-val или meta-test)

    Attributes:
        sentences: Предложения в порядке файла
        split: Тег сплита
    """

    sentences: Tuple[Sentence, ...]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise CorpusError(f"Неизвестный сплит '{self.split}', ожидается один из {SPLITS}")
        if not self.sentences:
            raise CorpusError("Пустой корпус")

        ids = Counter(sentence.id for sentence in self.sentences)
        duplicates = sorted(sentence_id for sentence_id, count in ids.items() if count > 1)
        if duplicates:
            raise CorpusError(f"Повторяющиеся идентификаторы предложений: {duplicates[:10]}")

        small = sorted(domain for domain, items in self.by_domain.items() if len(items) < 2)
        if small:
            raise CorpusError(f"Домены с менее чем двумя предложениями: {small}")

        if self.split == "meta-train":
            leaked = [s.id for s in self.sentences if s.label == OOD_LABEL]
            if leaked:
                raise CorpusError(
                    f"Метка '{OOD_LABEL}' недопустима в meta-train (предложения {leaked[:10]})"
                )

    @cached_property
    def by_domain(self) -> Dict[str, List[Sentence]]:
        groups = defaultdict(list)
        for sentence in self.sentences:
            groups[sentence.domain].append(sentence)
        return dict(groups)

    @property
    def domains(self) -> List[str]:
        return sorted(self.by_domain)

    def class_pools(self, domain: str) -> Dict[str, List[Sentence]]:
        """
        Предложения домена, сгруппированные по ID-классам

        Предложения с меткой "ood" в классы не попадают.

        Args:
            domain: Имя домена

        Returns:
            Словарь {метка: [предложения]} с отсортированными ключами
        """
        pools = defaultdict(list)
        for sentence in self.by_domain.get(domain, []):
            if sentence.label != OOD_LABEL:
                pools[sentence.label].append(sentence)
        return {label: pools[label] for label in sorted(pools)}

    def outside(self, domain: str) -> List[Sentence]:
        """Пул OOD: все предложения остальных доменов"""
        return [sentence for sentence in self.sentences if sentence.domain != domain]


def _parse_record(record, line_number: int, path: str) -> Sentence:
    if not isinstance(record, dict):
        raise CorpusError(f"{path}, строка {line_number}: ожидается JSON-объект")

    missing = [name for name in RECORD_FIELDS if name not in record]
    if missing:
        raise CorpusError(f"{path}, строка {line_number}: отсутствуют поля {missing}")

    not_strings = [name for name in RECORD_FIELDS if not isinstance(record[name], str)]
    if not_strings:
        raise CorpusError(f"{path}, строка {line_number}: поля {not_strings} должны быть строками")

    try:
        return Sentence(**{name: record[name] for name in RECORD_FIELDS})
    except CorpusError as e:
        raise CorpusError(f"{path}, строка {line_number}: {e}")


def load_corpus(path: str, split: str) -> Corpus:
    """
    Загрузка корпуса из JSONL-файла

    Args:
        path: Путь к файлу (один объект с полями id, text, label, domain на строку)
        split: Тег сплита

    Returns:
        Corpus

    Raises:
        CorpusError: При ошибке чтения, разбора или нарушении инвариантов корпуса
    """
    if split not in SPLITS:
        raise CorpusError(f"Неизвестный сплит '{split}', ожидается один из {SPLITS}")

    sentences = []
    seen = {}
    try:
        with open(path, "rb") as file:
            for line_number, raw in enumerate(file, start=1):
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError as e:
                    raise CorpusError(f"{path}, строка {line_number}: некорректная кодировка UTF-8 ({e})")
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise CorpusError(f"{path}, строка {line_number}: некорректный JSON ({e})")

                sentence = _parse_record(record, line_number, path)
                if sentence.id in seen:
                    raise CorpusError(
                        f"{path}, строка {line_number}: идентификатор '{sentence.id}' "
                        f"уже встречался в строке {seen[sentence.id]}"
                    )
                seen[sentence.id] = line_number
                sentences.append(sentence)
    except IOError as e:
        raise CorpusError(f"Ошибка чтения файла {path}: {e}")

    if not sentences:
        raise CorpusError(f"Файл {path} не содержит ни одного предложения")

    return Corpus(tuple(sentences), split)


def save_corpus(corpus: Corpus, path: str) -> None:
    """Сохранение корпуса в JSONL (обратная операция к load_corpus)"""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as file:
            for sentence in corpus.sentences:
                file.write(json.dumps(sentence.to_record(), ensure_ascii=False))
                file.write("\n")
    except IOError as e:
        raise CorpusError(f"Ошибка записи файла {path}: {e}")


def check_disjoint_domains(train: Corpus, test: Corpus) -> None:
    """
    Проверка, что домены meta-train и meta-test не пересекаются

    Raises:
        CorpusError: Если найдены общие домены
    """
    shared = sorted(set(train.domains) & set(test.domains))
    if shared:
        raise CorpusError(f"Домены {shared} присутствуют и в {train.split}, и в {test.split}")


@dataclass(frozen=True)
class EpisodeSpec:
    """
    Параметры эпизода N-way K-shot

    Attributes:
        n_classes: Число ID-классов N
        k_shot: Число опорных предложений на класс K
        n_id_queries: Число ID-запросов на эпизод
        n_ood_queries: Число OOD-запросов на эпизод
        seed: Зерно генератора
    """

    n_classes: int = 2
    k_shot: int = 10
    n_id_queries: int = 50
    n_ood_queries: int = 20
    seed: int = 0

    def __post_init__(self):
        errors = [
            f"{name} должен быть >= 1"
            for name in ("n_classes", "k_shot", "n_id_queries", "n_ood_queries")
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1
        ]
        if errors:
            raise EpisodeSamplingError("; ".join(errors))

    def query_quotas(self) -> List[int]:
        """Сбалансированное распределение ID-запросов по классам (остаток - первым классам)"""
        base, extra = divmod(self.n_id_queries, self.n_classes)
        return [base + (1 if index < extra else 0) for index in range(self.n_classes)]

    @property
    def sentences_per_class(self) -> int:
        return self.k_shot + math.ceil(self.n_id_queries / self.n_classes)


@dataclass(frozen=True)
class Episode:
    """
    Один эпизод: опорное множество S^id, ID-запросы Q^id и OOD-запросы Q^ood

    Attributes:
        domain: ID-домен эпизода
        classes: Метки выбранных классов; индекс в кортеже - индекс класса
        support: N кортежей по K предложений
        id_queries: Пары (предложение, индекс класса)
        ood_queries: Предложения из других доменов
    """

    domain: str
    classes: Tuple[str, ...]
    support: Tuple[Tuple[Sentence, ...], ...]
    id_queries: Tuple[Tuple[Sentence, int], ...]
    ood_queries: Tuple[Sentence, ...]

    @property
    def n_classes(self) -> int:
        return len(self.support)

    @property
    def k_shot(self) -> int:
        return len(self.support[0])

    def support_sentences(self) -> List[Sentence]:
        return [sentence for group in self.support for sentence in group]


def _eligible_classes(corpus: Corpus, domain: str, spec: EpisodeSpec) -> List[str]:
    need = spec.sentences_per_class
    return [label for label, pool in corpus.class_pools(domain).items() if len(pool) >= need]


def _largest_class_sizes(corpus: Corpus, spec: EpisodeSpec) -> Dict[str, List[int]]:
    return {
        domain: sorted((len(pool) for pool in corpus.class_pools(domain).values()),
                       reverse=True)[:spec.n_classes]
        for domain in corpus.domains
    }


def _sample_from_domain(corpus: Corpus, domain: str, spec: EpisodeSpec,
                        rng: np.random.Generator) -> Episode:
    eligible = _eligible_classes(corpus, domain, spec)
    if len(eligible) < spec.n_classes:
        raise EpisodeSamplingError(
            f"Домен '{domain}' не содержит {spec.n_classes} классов по "
            f"{spec.sentences_per_class} предложений; крупнейшие классы: "
            f"{_largest_class_sizes(corpus, spec)[domain]}"
        )

    pools = corpus.class_pools(domain)
    chosen = rng.choice(len(eligible), size=spec.n_classes, replace=False)
    classes = tuple(eligible[int(index)] for index in chosen)

    support = []
    id_queries = []
    for class_index, (label, quota) in enumerate(zip(classes, spec.query_quotas())):
        pool = pools[label]
        order = rng.permutation(len(pool))[:spec.k_shot + quota]
        picked = [pool[int(index)] for index in order]
        support.append(tuple(picked[:spec.k_shot]))
        id_queries.extend((sentence, class_index) for sentence in picked[spec.k_shot:])

    ood_pool = corpus.outside(domain)
    if len(ood_pool) < spec.n_ood_queries:
        raise EpisodeSamplingError(
            f"Пул OOD для домена '{domain}' содержит {len(ood_pool)} предложений, "
            f"требуется {spec.n_ood_queries}"
        )
    ood_indices = rng.choice(len(ood_pool), size=spec.n_ood_queries, replace=False)
    ood_queries = tuple(ood_pool[int(index)] for index in ood_indices)

    return Episode(domain, classes, tuple(support), tuple(id_queries), ood_queries)


def sample_episode(corpus: Corpus, spec: EpisodeSpec, rng_state: np.random.Generator) -> Episode:
    """
    Сэмплирование обучающего эпизода

    Домен выбирается равномерно среди подходящих, классы - равномерно без
    возвращения, OOD-запросы - равномерно из объединения остальных доменов.

    Args:
        corpus: Корпус
        spec: Параметры эпизода
        rng_state: Генератор numpy; результат полностью определяется его состоянием

    Returns:
        Episode

    Raises:
        EpisodeSamplingError: Если в корпусе один домен или ни один домен не подходит
    """
    domains = corpus.domains
    if len(domains) < 2:
        raise EpisodeSamplingError(f"Корпус содержит один домен ({domains[0]}): нет пула OOD")

    eligible = [d for d in domains if len(_eligible_classes(corpus, d, spec)) >= spec.n_classes]
    if not eligible:
        raise EpisodeSamplingError(
            f"Ни один домен не содержит {spec.n_classes} классов по "
            f"{spec.sentences_per_class} предложений; крупнейшие классы по доменам: "
            f"{_largest_class_sizes(corpus, spec)}"
        )

    domain = eligible[int(rng_state.integers(len(eligible)))]
    return _sample_from_domain(corpus, domain, spec, rng_state)


def sample_meta_test_stream(corpus: Corpus, spec: EpisodeSpec, seed: int) -> List[Episode]:
    """
    Эпизоды оценки: по одному на каждый домен корпуса

    Домены, в которых есть только предложения с меткой "ood", эпизодов не
    порождают, но остаются в пуле OOD для остальных доменов.

    Args:
        corpus: Корпус сплита meta-test (или meta-val)
        spec: Параметры эпизода
        seed: Зерно генератора

    Returns:
        Список эпизодов в порядке сортировки доменов

    Raises:
        EpisodeSamplingError: При неверном сплите, одном домене или неподходящем домене
    """
    if corpus.split not in EVALUATION_SPLITS:
        raise EpisodeSamplingError(
            f"Поток эпизодов оценки строится только для {EVALUATION_SPLITS}, получен {corpus.split}"
        )
    if len(corpus.domains) < 2:
        raise EpisodeSamplingError(
            f"Корпус содержит один домен ({corpus.domains[0]}): нет пула OOD"
        )

    rng = np.random.default_rng(seed)
    return [
        _sample_from_domain(corpus, domain, spec, rng)
        for domain in corpus.domains
        if corpus.class_pools(domain)
    ]
