"""
Модуль прототипов, косинусной меры и функций потерь

InfoMax BCE поднимает вероятность p = (d + 1) / 2 для ID-запросов
относительно прототипа их класса и опускает её для OOD-запросов
относительно ближайшего прототипа. Базовые линии: Proto-Net
(кросс-энтропия) и O-Proto (кросс-энтропия + два hinge-слагаемых).
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from protoinfomax import numerics as nx
from protoinfomax.exceptions import ProtoMaxError, ZeroNormError
from protoinfomax.numerics import Tensor

NORM_EPS = 1e-12
PROBABILITY_EPS = 1e-6
DEFAULT_MARGIN = 0.5
MODELS = ("protonet", "oproto", "protoinfomax", "protoinfomaxpp")
PERSPECTIVES = ("sentence", "keyword", "keyword_sentence")


@dataclass
class EpisodeEncodings:
    """
    Закодированный эпизод

    Attributes:
        support: Опорные векторы (N, K, D)
        id_queries: ID-запросы (Q_id, D)
        id_labels: Индексы классов ID-запросов
        ood_queries: OOD-запросы (Q_ood, D)
        support_keywords: Векторы ключевых слов опорных предложений (N, K, D)
        id_query_keywords: Векторы ключевых слов ID-запросов
        ood_query_keywords: Векторы ключевых слов OOD-запросов
    """

    support: Tensor
    id_queries: Tensor
    id_labels: np.ndarray
    ood_queries: Tensor
    support_keywords: Optional[Tensor] = None
    id_query_keywords: Optional[Tensor] = None
    ood_query_keywords: Optional[Tensor] = None

    @property
    def n_classes(self) -> int:
        return self.support.shape[0]

    @property
    def has_keywords(self) -> bool:
        return all(tensor is not None for tensor in
                   (self.support_keywords, self.id_query_keywords, self.ood_query_keywords))


@dataclass
class Prototypes:
    """Прототипы классов (N, D) одного вида: sentence или keyword"""

    vectors: Tensor
    kind: str

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class LossValue:
    """
    Значение функции потерь

    Attributes:
        total: Скалярный тензор (узел графа)
        terms: Слагаемые, сумма которых равна total
        details: Более подробная разбивка (например, id/ood каждой перспективы)
    """

    total: Tensor
    terms: Dict[str, float]
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()


def _prototype(encodings: Tensor, kind: str) -> Prototypes:
    if encodings.ndim != 3:
        raise ProtoMaxError(f"Ожидаются опорные векторы формы (N, K, D), получено {encodings.shape}")
    if encodings.shape[0] == 0 or encodings.shape[1] == 0:
        raise ProtoMaxError(f"Пустой класс в опорном множестве: форма {encodings.shape}")
    return Prototypes(nx.mean(encodings, axis=1), kind)


def prototype_sentence(support_encodings: Tensor) -> Prototypes:
    """Прототип C_S: среднее K векторов предложений каждого класса"""
    return _prototype(support_encodings, "sentence")


def prototype_keywords(support_keyword_encodings: Tensor) -> Prototypes:
    """Прототип C_w: среднее K векторов ключевых слов каждого класса"""
    return _prototype(support_keyword_encodings, "keyword")


def _check_norms(x: Tensor, operand: str) -> None:
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    small = np.flatnonzero(np.atleast_1d(norms) <= NORM_EPS)
    if small.size:
        raise ZeroNormError(
            f"Косинусная мера: почти нулевая норма у операнда '{operand}' (строки {small[:10].tolist()})"
        )


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """
    Косинус угла между двумя векторами

    Raises:
        ZeroNormError: Если норма одного из векторов не больше 1e-12
    """
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ProtoMaxError(f"cosine_similarity: ожидаются векторы одной длины, {a.shape} и {b.shape}")
    _check_norms(a, "a")
    _check_norms(b, "b")
    dot = nx.sum(a * b)
    return dot / (nx.sqrt(nx.sum(a * a)) * nx.sqrt(nx.sum(b * b)))


def _normalize_rows(x: Tensor) -> Tensor:
    norms = nx.sqrt(nx.sum(x * x, axis=1, keepdims=True))
    return x / nx.expand(norms, x.shape)


def cosine_matrix(queries: Tensor, prototypes: Tensor,
                  names: tuple = ("queries", "prototypes")) -> Tensor:
    """
    Матрица косинусных мер запросов (Q, D) и прототипов (N, D)

    Returns:
        Тензор (Q, N) со значениями в [-1, 1]
    """
    if queries.ndim != 2 or prototypes.ndim != 2 or queries.shape[1] != prototypes.shape[1]:
        raise ProtoMaxError(f"cosine_matrix: несовместимые формы {queries.shape} и {prototypes.shape}")
    _check_norms(queries, names[0])
    _check_norms(prototypes, names[1])
    return _normalize_rows(queries) @ nx.transpose(_normalize_rows(prototypes))


def similarity_to_probability(d) -> Tensor:
    """p = clamp((d + 1) / 2, 1e-6, 1 - 1e-6)"""
    d = nx.as_tensor(d)
    return nx.clamp((d + 1.0) * 0.5, PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)


def _one_hot(labels: np.ndarray, n_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ProtoMaxError(f"Индекс класса вне диапазона [0, {n_classes}): {labels.tolist()[:10]}")
    encoded = np.zeros((labels.size, n_classes), dtype=dtype)
    encoded[np.arange(labels.size), labels] = 1.0
    return encoded


def class_mask(similarities: Tensor, labels: np.ndarray) -> Tensor:
    """
    Мера истинного класса для каждого ID-запроса (умножение на one-hot и сумма)

    Args:
        similarities: Матрица (Q, N)
        labels: Индексы классов длины Q

    Returns:
        Тензор (Q,)
    """
    if len(labels) != similarities.shape[0]:
        raise ProtoMaxError(f"Число меток {len(labels)} не совпадает с числом запросов {similarities.shape[0]}")
    mask = _one_hot(labels, similarities.shape[1], similarities.data.dtype)
    return nx.sum(similarities * Tensor(mask), axis=1)


def ood_mask(similarities: Tensor) -> Tensor:
    """Мера OOD-запроса: максимум по прототипам (ближайший класс)"""
    return nx.max(similarities, axis=1)


def infomax_bce(p_id: Tensor, p_ood: Tensor) -> LossValue:
    """
    InfoMax BCE

    loss = -[mean(log p_id) + mean(log(1 - p_ood))]

    Raises:
        ProtoMaxError: Если нет ID- или OOD-запросов
    """
    if p_id.size == 0 or p_ood.size == 0:
        raise ProtoMaxError(f"InfoMax BCE требует ID- и OOD-запросы: {p_id.size} ID, {p_ood.size} OOD")
    id_term = -nx.mean(nx.log(p_id))
    ood_term = -nx.mean(nx.log(1.0 - p_ood))
    return LossValue(id_term + ood_term, {"id": id_term.item(), "ood": ood_term.item()})


def _infomax_perspective(prototypes: Tensor, id_queries: Tensor, ood_queries: Tensor,
                         labels: np.ndarray, name: str) -> LossValue:
    d_id = class_mask(cosine_matrix(id_queries, prototypes, (f"{name}.id_queries", f"{name}.prototypes")),
                      labels)
    d_ood = ood_mask(cosine_matrix(ood_queries, prototypes, (f"{name}.ood_queries", f"{name}.prototypes")))
    return infomax_bce(similarity_to_probability(d_id), similarity_to_probability(d_ood))


def loss_protoinfomax(enc: EpisodeEncodings) -> LossValue:
    """ProtoInfoMax: InfoMax BCE по прототипам предложений"""
    prototypes = prototype_sentence(enc.support)
    return _infomax_perspective(prototypes.vectors, enc.id_queries, enc.ood_queries,
                                enc.id_labels, "sentence")


def loss_protoinfomaxpp(enc: EpisodeEncodings) -> LossValue:
    """
    ProtoInfoMax++: сумма InfoMax BCE по трём перспективам

    sentence: F(C_S, Q); keyword: F(C_w, Q_w);
    keyword_sentence: F(C_w * C_S, Q_w * Q) (поэлементные произведения).

    Raises:
        ProtoMaxError: Если у эпизода нет векторов ключевых слов
    """
    if not enc.has_keywords:
        raise ProtoMaxError(
            "ProtoInfoMax++ требует векторы ключевых слов: извлеките их модулем features "
            "(featurize_corpus) и кодируйте эпизод с with_keywords=True"
        )
    sentence_protos = prototype_sentence(enc.support).vectors
    keyword_protos = prototype_keywords(enc.support_keywords).vectors

    perspectives = {
        "sentence": (sentence_protos, enc.id_queries, enc.ood_queries),
        "keyword": (keyword_protos, enc.id_query_keywords, enc.ood_query_keywords),
        "keyword_sentence": (keyword_protos * sentence_protos,
                             enc.id_query_keywords * enc.id_queries,
                             enc.ood_query_keywords * enc.ood_queries),
    }

    total = None
    terms = {}
    details = {}
    for name in PERSPECTIVES:
        protos, id_queries, ood_queries = perspectives[name]
        part = _infomax_perspective(protos, id_queries, ood_queries, enc.id_labels, name)
        total = part.total if total is None else total + part.total
        terms[name] = part.value
        details.update({f"{name}.{key}": value for key, value in part.terms.items()})
    return LossValue(total, terms, details)


def loss_protonet(similarities_id: Tensor, labels: np.ndarray) -> LossValue:
    """Proto-Net: кросс-энтропия softmax по мерам классов"""
    if similarities_id.shape[0] == 0:
        raise ProtoMaxError("Proto-Net требует хотя бы один ID-запрос")
    entropy = nx.mean(nx.logsumexp(similarities_id, axis=1) - class_mask(similarities_id, labels))
    return LossValue(entropy, {"id_entropy": entropy.item()})


def loss_oproto(similarities_id: Tensor, similarities_ood: Tensor, labels: np.ndarray,
                margin: float = DEFAULT_MARGIN) -> LossValue:
    """
    O-Proto: кросс-энтропия + hinge для ID и OOD

    id_hinge = mean(max(0, m - d_true)), ood_hinge = mean(max(0, d_max - (1 - m)))
    """
    if similarities_ood.shape[0] == 0:
        raise ProtoMaxError("O-Proto требует хотя бы один OOD-запрос")
    entropy = loss_protonet(similarities_id, labels).total
    id_hinge = nx.mean(nx.clamp(margin - class_mask(similarities_id, labels), 0.0, np.inf))
    ood_hinge = nx.mean(nx.clamp(ood_mask(similarities_ood) - (1.0 - margin), 0.0, np.inf))
    return LossValue(entropy + id_hinge + ood_hinge, {
        "id_entropy": entropy.item(),
        "id_hinge": id_hinge.item(),
        "ood_hinge": ood_hinge.item(),
    })


def episode_similarities(enc: EpisodeEncodings):
    """Матрицы мер (ID, OOD) к прототипам предложений"""
    prototypes = prototype_sentence(enc.support).vectors
    return (cosine_matrix(enc.id_queries, prototypes, ("id_queries", "prototypes")),
            cosine_matrix(enc.ood_queries, prototypes, ("ood_queries", "prototypes")))


def compute_loss(model: str, enc: EpisodeEncodings, margin: float = DEFAULT_MARGIN) -> LossValue:
    """
    Функция потерь выбранной модели

    Args:
        model: Одна из MODELS
        enc: Закодированный эпизод
        margin: Отступ O-Proto

    Returns:
        LossValue
    """
    if model == "protoinfomax":
        return loss_protoinfomax(enc)
    if model == "protoinfomaxpp":
        return loss_protoinfomaxpp(enc)
    if model == "protonet":
        similarities_id, _ = episode_similarities(enc)
        return loss_protonet(similarities_id, enc.id_labels)
    if model == "oproto":
        similarities_id, similarities_ood = episode_similarities(enc)
        return loss_oproto(similarities_id, similarities_ood, enc.id_labels, margin)
    raise ProtoMaxError(f"Неизвестная модель '{model}', ожидается одна из {MODELS}")
