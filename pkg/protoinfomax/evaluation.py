"""
Модуль оценки: скоринг эпизодов, выбор порога, EER/CER, калибровка

Оценка запроса d - максимальная косинусная мера к прототипам предложений,
предсказанный класс - аргмаксимум. Запрос с d < tau считается OOD.
"""
import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from protoinfomax import numerics as nx
from protoinfomax.corpus import OOD_LABEL, Corpus, Episode, EpisodeSpec, sample_meta_test_stream
from protoinfomax.encoder import EncoderParams, encode_episode
from protoinfomax.exceptions import EvaluationError, ProtoInfoMaxError
from protoinfomax.features import SentenceFeatures, featurize_corpus
from protoinfomax.protomax import EpisodeEncodings, episode_similarities

if TYPE_CHECKING:
    from protoinfomax.training import Checkpoint

OOD_CLASS = -1
N_BINS = 10
PREDICTION_COLUMNS = ("query_id", "score", "predicted_class", "true_class", "is_ood")
BIN_COLUMNS = ("bin_lo", "bin_hi", "count", "accuracy", "confidence", "gap")
SWEEP_COLUMNS = ("candidate", "frr", "far")


@dataclass(frozen=True)
class PredictionRecord:
    """
    Предсказание для одного целевого запроса

    Attributes:
        query_id: Идентификатор предложения
        score: Мера d в [-1, 1]
        predicted_class: Аргмаксимум по прототипам
        true_class: Индекс класса или OOD_CLASS
        is_ood: Истинная принадлежность к OOD
        domain: ID-домен эпизода
    """

    query_id: str
    score: float
    predicted_class: int
    true_class: int
    is_ood: bool
    domain: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise EvaluationError(f"Нечисловая оценка у запроса {self.query_id}")
        if self.is_ood != (self.true_class == OOD_CLASS):
            raise EvaluationError(
                f"Запрос {self.query_id}: is_ood={self.is_ood} не согласуется с true_class={self.true_class}"
            )

    @property
    def confidence(self) -> float:
        return min(max((self.score + 1.0) / 2.0, 0.0), 1.0)


def score_encodings(enc: EpisodeEncodings, id_query_ids: Sequence[str],
                    ood_query_ids: Sequence[str], domain: str = "") -> List[PredictionRecord]:
    """
    Записи предсказаний по закодированному эпизоду

    Args:
        enc: Закодированный эпизод
        id_query_ids: Идентификаторы ID-запросов (в порядке enc.id_queries)
        ood_query_ids: Идентификаторы OOD-запросов

    Returns:
        Список PredictionRecord: сначала ID, затем OOD
    """
    with nx.no_grad():
        similarities_id, similarities_ood = episode_similarities(enc)

    records = []
    for query_id, row, label in zip(id_query_ids, similarities_id.data, enc.id_labels):
        records.append(PredictionRecord(query_id, float(row.max()), int(row.argmax()),
                                        int(label), False, domain))
    for query_id, row in zip(ood_query_ids, similarities_ood.data):
        records.append(PredictionRecord(query_id, float(row.max()), int(row.argmax()),
                                        OOD_CLASS, True, domain))
    return records


def score_episode(episode: Episode, features: Dict[str, SentenceFeatures],
                  params: EncoderParams) -> List[PredictionRecord]:
    with nx.no_grad():
        enc = encode_episode(episode, features, params)
    return score_encodings(enc, [sentence.id for sentence, _ in episode.id_queries],
                           [sentence.id for sentence in episode.ood_queries], episode.domain)


def score_stream(episodes: Sequence[Episode], features: Dict[str, SentenceFeatures],
                 params: EncoderParams, n_classes: Optional[int] = None) -> List[PredictionRecord]:
    """
    Скоринг последовательности эпизодов

    Raises:
        EvaluationError: Если число классов эпизода отличается от n_classes
    """
    records = []
    for episode in episodes:
        if n_classes is not None and episode.n_classes != n_classes:
            raise EvaluationError(
                f"Эпизод домена '{episode.domain}' содержит {episode.n_classes} классов, "
                f"модель ожидает {n_classes}"
            )
        records.extend(score_episode(episode, features, params))
    return records


def score_meta_test(checkpoint: "Checkpoint", corpus: Corpus, spec: EpisodeSpec) -> List[PredictionRecord]:
    """
    Скоринг meta-test корпуса моделью из чекпоинта

    Args:
        checkpoint: Чекпоинт обучения
        corpus: Корпус meta-test (или meta-val)
        spec: Параметры эпизодов; spec.seed задаёт поток эпизодов

    Returns:
        Список PredictionRecord по всем эпизодам

    Raises:
        EvaluationError: При несовпадении числа классов с чекпоинтом
    """
    expected = checkpoint.n_classes
    if spec.n_classes != expected:
        raise EvaluationError(
            f"Чекпоинт обучен для {expected} классов на эпизод, запрошено {spec.n_classes}"
        )
    try:
        vocab = checkpoint.vocabulary()
        features = featurize_corpus(corpus, vocab, checkpoint.idf_table(), checkpoint.max_len)
        episodes = sample_meta_test_stream(corpus, spec, spec.seed)
        return score_stream(episodes, features, checkpoint.params(), expected)
    except EvaluationError:
        raise
    except ProtoInfoMaxError as e:
        raise EvaluationError(f"Ошибка скоринга корпуса {corpus.split}: {e}")


@dataclass
class ThresholdResult:
    """
    Выбранный порог и трасса перебора

    Attributes:
        tau: Порог
        frr_at_tau: FRR при tau
        far_at_tau: FAR при tau
        trace: Кортежи (кандидат, FRR, FAR) по возрастанию кандидата
    """

    tau: float
    frr_at_tau: float
    far_at_tau: float
    trace: List[Tuple[float, float, float]] = field(default_factory=list)


def _split_scores(records: Sequence[PredictionRecord]) -> Tuple[np.ndarray, np.ndarray]:
    id_scores = np.array([r.score for r in records if not r.is_ood], dtype=np.float64)
    ood_scores = np.array([r.score for r in records if r.is_ood], dtype=np.float64)
    return id_scores, ood_scores


def error_rates(id_scores: np.ndarray, ood_scores: np.ndarray, tau: float) -> Tuple[float, float]:
    """(FRR, FAR) при пороге tau: FRR - доля ID с d < tau, FAR - доля OOD с d >= tau"""
    frr = float(np.count_nonzero(id_scores < tau)) / id_scores.size
    far = float(np.count_nonzero(ood_scores >= tau)) / ood_scores.size
    return frr, far


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """
    Кандидаты порога: середины соседних отсортированных оценок

    Первый кандидат - среднее двух наименьших оценок.
    """
    ordered = np.sort(scores)
    if ordered.size < 2:
        return ordered.copy()
    return np.unique((ordered[:-1] + ordered[1:]) / 2.0)


def select_threshold(records: Sequence[PredictionRecord]) -> ThresholdResult:
    """
    Выбор порога tau перебором по возрастанию

    Возвращается первый кандидат с FRR - FAR >= 0; если такого нет -
    кандидат с минимальным |FRR - FAR| (при равенстве меньший).

    Args:
        records: Записи предсказаний (хотя бы одна ID и одна OOD)

    Returns:
        ThresholdResult

    Raises:
        EvaluationError: Если записи только ID или только OOD
    """
    id_scores, ood_scores = _split_scores(records)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EvaluationError(
            f"Для выбора порога нужны ID и OOD записи: {id_scores.size} ID, {ood_scores.size} OOD"
        )

    trace = []
    chosen = None
    for candidate in threshold_candidates(np.concatenate([id_scores, ood_scores])):
        frr, far = error_rates(id_scores, ood_scores, candidate)
        trace.append((float(candidate), frr, far))
        if chosen is None and frr - far >= 0:
            chosen = len(trace) - 1

    if chosen is None:
        gaps = [abs(frr - far) for _, frr, far in trace]
        chosen = int(np.argmin(gaps))

    tau, frr, far = trace[chosen]
    return ThresholdResult(tau, frr, far, trace)


@dataclass
class MetricsReport:
    """
    Метрики при пороге tau

    EER = 1 - (TP + TN) / n; CER^id = 1 - TP^id / #ID; CER^all = 1 - (TP^id + TN) / n.
    """

    eer: float
    cer_id: float
    cer_all: float
    tau: float
    tp: int
    tn: int
    fp: int
    fn: int
    tp_id: int
    n_id: int
    n_ood: int
    far: float
    frr: float
    per_domain: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.n_id + self.n_ood

    def to_dict(self) -> Dict:
        return asdict(self)


def _confusion(records: Sequence[PredictionRecord], tau: float) -> Dict[str, int]:
    counts = {"tp": 0, "tn": 0, "fp": 0, "fn": 0, "tp_id": 0, "n_id": 0, "n_ood": 0}
    for record in records:
        accepted = record.score >= tau
        if record.is_ood:
            counts["n_ood"] += 1
            counts["fn" if accepted else "tn"] += 1
        else:
            counts["n_id"] += 1
            counts["tp" if accepted else "fp"] += 1
            if accepted and record.predicted_class == record.true_class:
                counts["tp_id"] += 1
    return counts


def _rates(counts: Dict[str, int]) -> Dict[str, float]:
    """
    Доли ошибок по счётчикам _confusion

    В CER^all верными считаются принятые и верно классифицированные ID-запросы
    (TP^id) и отвергнутые OOD-запросы (TN): у OOD нет класса, поэтому правильный
    ответ для него - отказ. При N=1 CER^all совпадает с EER.
    """
    n = counts["n_id"] + counts["n_ood"]
    return {
        "eer": 1.0 - (counts["tp"] + counts["tn"]) / n,
        "cer_id": 1.0 - counts["tp_id"] / counts["n_id"] if counts["n_id"] else 0.0,
        "cer_all": 1.0 - (counts["tp_id"] + counts["tn"]) / n,
        "far": counts["fn"] / counts["n_ood"] if counts["n_ood"] else 0.0,
        "frr": counts["fp"] / counts["n_id"] if counts["n_id"] else 0.0,
    }


def compute_metrics(records: Sequence[PredictionRecord], tau: float) -> MetricsReport:
    """
    Подсчёт TP/TN/FP/FN и метрик ошибок

    Args:
        records: Записи предсказаний
        tau: Порог

    Returns:
        MetricsReport с разбивкой по доменам эпизодов

    Raises:
        EvaluationError: Для пустого списка записей
    """
    if not records:
        raise EvaluationError("Нет записей для подсчёта метрик")

    counts = _confusion(records, tau)
    rates = _rates(counts)

    by_domain = defaultdict(list)
    for record in records:
        by_domain[record.domain].append(record)
    per_domain = {}
    for domain in sorted(by_domain):
        domain_counts = _confusion(by_domain[domain], tau)
        domain_rates = _rates(domain_counts)
        per_domain[domain] = {
            "eer": domain_rates["eer"],
            "cer_id": domain_rates["cer_id"],
            "cer_all": domain_rates["cer_all"],
            "n": domain_counts["n_id"] + domain_counts["n_ood"],
        }

    return MetricsReport(rates["eer"], rates["cer_id"], rates["cer_all"], float(tau),
                         counts["tp"], counts["tn"], counts["fp"], counts["fn"], counts["tp_id"],
                         counts["n_id"], counts["n_ood"], rates["far"], rates["frr"], per_domain)


def evaluate_records(records: Sequence[PredictionRecord]) -> Tuple[ThresholdResult, MetricsReport]:
    threshold = select_threshold(records)
    return threshold, compute_metrics(records, threshold.tau)


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    accuracy: float
    confidence: float
    gap: float


@dataclass
class CalibrationReport:
    """
    Диаграмма надёжности

    Attributes:
        bins: Равные интервалы по нормированной уверенности
        ece: Ожидаемая ошибка калибровки (доля)
        average_confidence: Средняя уверенность
        accuracy: Общая точность
        n: Число записей
    """

    bins: List[CalibrationBin]
    ece: float
    average_confidence: float
    accuracy: float
    n: int

    @property
    def ece_percent(self) -> float:
        return 100.0 * self.ece

    def to_dict(self) -> Dict:
        result = asdict(self)
        result["ece_percent"] = self.ece_percent
        return result


def bin_confidences(confidences: np.ndarray, correct: np.ndarray, n_bins: int = N_BINS) -> CalibrationReport:
    """
    Разбиение уверенностей на n_bins равных интервалов [0, 1]

    ECE = sum_m (|B_m| / n) * |acc(B_m) - conf(B_m)|; пустые интервалы в сумму не входят.
    """
    if n_bins < 1:
        raise EvaluationError(f"Число интервалов должно быть >= 1, получено {n_bins}")
    confidences = np.clip(np.asarray(confidences, dtype=np.float64), 0.0, 1.0)
    correct = np.asarray(correct, dtype=bool)
    if confidences.size == 0:
        raise EvaluationError("Нет записей для калибровки")

    indices = np.minimum((confidences * n_bins).astype(np.int64), n_bins - 1)
    n = confidences.size
    bins = []
    ece = 0.0
    for m in range(n_bins):
        members = indices == m
        count = int(np.count_nonzero(members))
        if count:
            accuracy = float(correct[members].mean())
            confidence = float(confidences[members].mean())
            gap = abs(accuracy - confidence)
            ece += count / n * gap
        else:
            accuracy = confidence = gap = 0.0
        bins.append(CalibrationBin(m / n_bins, (m + 1) / n_bins, count, accuracy, confidence, gap))

    return CalibrationReport(bins, ece, float(confidences.mean()), float(correct.mean()), n)


def calibration(records: Sequence[PredictionRecord], n_bins: int = N_BINS) -> CalibrationReport:
    """
    Калибровка классификации ID

    Уверенность (d + 1) / 2, верно ⇔ predicted_class == true_class; OOD-записи не учитываются.

    Raises:
        EvaluationError: Если нет ID-записей
    """
    id_records = [record for record in records if not record.is_ood]
    if not id_records:
        raise EvaluationError("Нет ID-записей для калибровки")
    return bin_confidences(np.array([r.confidence for r in id_records]),
                           np.array([r.predicted_class == r.true_class for r in id_records]),
                           n_bins)


def ood_confidence_histogram(records: Sequence[PredictionRecord], tau: float,
                             n_bins: int = N_BINS) -> CalibrationReport:
    """Гистограмма уверенности на OOD-записях: верно ⇔ d < tau"""
    ood_records = [record for record in records if record.is_ood]
    if not ood_records:
        raise EvaluationError("Нет OOD-записей для гистограммы уверенности")
    return bin_confidences(np.array([r.confidence for r in ood_records]),
                           np.array([r.score < tau for r in ood_records]),
                           n_bins)


def write_predictions(records: Sequence[PredictionRecord], path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(PREDICTION_COLUMNS)
            for record in records:
                writer.writerow([
                    record.query_id,
                    repr(record.score),
                    record.predicted_class,
                    OOD_LABEL if record.is_ood else record.true_class,
                    int(record.is_ood),
                ])
    except IOError as e:
        raise EvaluationError(f"Ошибка записи предсказаний {path}: {e}")


def read_predictions(path: str) -> List[PredictionRecord]:
    """
    Чтение CSV предсказаний

    Raises:
        EvaluationError: При ошибке чтения или неверных колонках
    """
    records = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as file:
            reader = csv.DictReader(file)
            if tuple(reader.fieldnames or ()) != PREDICTION_COLUMNS:
                raise EvaluationError(f"{path}: ожидаются колонки {','.join(PREDICTION_COLUMNS)}")
            for row in reader:
                is_ood = row["is_ood"] == "1"
                true_class = OOD_CLASS if row["true_class"] == OOD_LABEL else int(row["true_class"])
                records.append(PredictionRecord(row["query_id"], float(row["score"]),
                                                int(row["predicted_class"]), true_class, is_ood))
    except IOError as e:
        raise EvaluationError(f"Ошибка чтения предсказаний {path}: {e}")
    except (KeyError, ValueError) as e:
        raise EvaluationError(f"Некорректная строка в файле {path}: {e}")
    return records


def write_bins(report: CalibrationReport, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(BIN_COLUMNS)
            for b in report.bins:
                writer.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.accuracy),
                                 repr(b.confidence), repr(b.gap)])
    except IOError as e:
        raise EvaluationError(f"Ошибка записи интервалов {path}: {e}")


def write_sweep(threshold: ThresholdResult, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(SWEEP_COLUMNS)
            for candidate, frr, far in threshold.trace:
                writer.writerow([repr(candidate), repr(frr), repr(far)])
    except IOError as e:
        raise EvaluationError(f"Ошибка записи трассы порога {path}: {e}")


def write_json(payload: Dict, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as file:
            json.dump(payload, file, ensure_ascii=False, indent=2)
            file.write("\n")
    except IOError as e:
        raise EvaluationError(f"Ошибка записи {path}: {e}")


def read_json(path: str) -> Dict:
    try:
        with open(path, "r", encoding="utf-8") as file:
            return json.load(file)
    except json.JSONDecodeError as e:
        raise EvaluationError(f"Ошибка парсинга JSON в файле {path}: {e}")
    except (IOError, UnicodeDecodeError) as e:
        raise EvaluationError(f"Ошибка чтения файла {path}: {e}")
