"""
Модуль эпизодического обучения и чекпоинтов

Каждое обновление усредняет потери по нескольким эпизодам так, чтобы
суммарно набралось не меньше batch_size целевых запросов. Оптимизатор -
Adam с ограничением глобальной нормы градиента.
"""
import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np

from protoinfomax import numerics as nx
from protoinfomax.corpus import Corpus, EpisodeSpec, sample_episode, sample_meta_test_stream
from protoinfomax.encoder import (HIDDEN_SIZE, N_ATTENTION_QUERIES, EmbeddingTable, EncoderParams,
                                  encode_episode, init_encoder, params_from_state)
from protoinfomax.evaluation import evaluate_records, score_stream
from protoinfomax.exceptions import (CheckpointError, CheckpointVersionError, ProtoInfoMaxError,
                                     TrainingError)
from protoinfomax.features import (MAX_KEYWORDS, MAX_LENGTH, PAD_INDEX, IdfTable, Vocabulary,
                                   build_vocabulary, featurize_corpus, fit_idf)
from protoinfomax.protomax import DEFAULT_MARGIN, MODELS, compute_loss

CHECKPOINT_MAGIC = b"PIMXCKPT"
CHECKPOINT_VERSION = 1
EPOCH_LOG_COLUMNS = ("epoch", "loss", "val_eer", "val_cer_id", "val_cer_all")


@dataclass
class TrainConfig:
    """
    Параметры обучения

    Attributes:
        model: Одна из MODELS
        epochs: Число эпох
        episodes_per_epoch: Число эпизодов в эпохе
        batch_size: Минимум целевых запросов на одно обновление
        learning_rate: Шаг Adam
        seed: Зерно (инициализация, эпизоды; валидация использует seed + 1)
        episode: Параметры эпизода
        margin: Отступ O-Proto
    """

    model: str = "protoinfomax"
    epochs: int = 60
    episodes_per_epoch: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    margin: float = DEFAULT_MARGIN
    d_emb: int = 100
    hidden_size: int = HIDDEN_SIZE
    n_attention_queries: int = N_ATTENTION_QUERIES
    max_len: int = MAX_LENGTH
    max_keywords: int = MAX_KEYWORDS
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_embeddings: bool = False
    verbose: bool = False

    def validate(self) -> None:
        """
        Raises:
            TrainingError: Со списком всех нарушений
        """
        errors = []
        if self.model not in MODELS:
            errors.append(f"model должен быть одним из {MODELS}, получено '{self.model}'")
        for name in ("epochs", "episodes_per_epoch", "batch_size", "d_emb", "hidden_size",
                     "n_attention_queries", "max_len", "max_keywords"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                errors.append(f"{name} должен быть целым числом >= 1")
        if not self.learning_rate >= 0:
            errors.append("learning_rate должен быть >= 0")
        if not 0 <= self.margin <= 1:
            errors.append("margin должен лежать в [0, 1]")
        if not self.grad_clip > 0:
            errors.append("grad_clip должен быть > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append("beta1 и beta2 должны лежать в [0, 1)")
        if errors:
            raise TrainingError("Некорректная конфигурация обучения: " + "; ".join(errors))

    @property
    def episodes_per_update(self) -> int:
        queries = self.episode.n_id_queries + self.episode.n_ood_queries
        return max(1, math.ceil(self.batch_size / queries))

    @property
    def uses_keywords(self) -> bool:
        return self.model == "protoinfomaxpp"

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise TrainingError(f"Неизвестные поля конфигурации обучения: {unknown}")
        values = dict(payload)
        if isinstance(values.get("episode"), dict):
            values["episode"] = EpisodeSpec(**values["episode"])
        return cls(**values)


@dataclass
class Checkpoint:
    """
    Снимок обученной модели

    Attributes:
        state: Массивы параметров по именам (в порядке записи)
        config: Конфигурация обучения
        epoch: Эпоха снимка (0 - до обучения)
        metrics: Метрики валидации на этой эпохе
        vocab_tokens: Незарезервированные токены словаря
        idf_values: Значения IDF по индексам словаря
        idf_documents: Число документов IDF
        frozen: Имена замороженных параметров
    """

    state: Dict[str, np.ndarray]
    config: TrainConfig
    epoch: int
    metrics: Dict[str, float]
    vocab_tokens: List[str]
    idf_values: List[float]
    idf_documents: int
    frozen: List[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.config.episode.n_classes

    @property
    def max_len(self) -> int:
        return self.config.max_len

    def params(self) -> EncoderParams:
        return params_from_state(self.state, self.frozen)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab_tokens)

    def idf_table(self) -> IdfTable:
        return IdfTable(np.array(self.idf_values, dtype=np.float64), self.idf_documents)

    def metadata(self) -> Dict:
        return {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "metrics": self.metrics,
            "vocabulary": self.vocab_tokens,
            "idf": {"values": self.idf_values, "documents": self.idf_documents},
            "frozen": self.frozen,
        }


def make_checkpoint(params: EncoderParams, config: TrainConfig, epoch: int,
                    metrics: Dict[str, float], vocab: Vocabulary, idf: IdfTable) -> Checkpoint:
    return Checkpoint(params.state(), config, epoch, dict(metrics), list(vocab.tokens),
                      [float(value) for value in idf.values], idf.documents, sorted(params.frozen))


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """
    Запись чекпоинта в бинарном формате

    Магия PIMXCKPT, версия (u16), длина (u32) и UTF-8 JSON метаданных,
    число тензоров (u32), затем на каждый тензор: длина имени (u16), имя,
    ранг (u8), размеры (u32), данные float64 little-endian.

    Raises:
        CheckpointError: При ошибке записи
    """
    metadata = json.dumps(checkpoint.metadata(), ensure_ascii=False).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(metadata)), metadata,
              struct.pack("<I", len(checkpoint.state))]
    for name, array in checkpoint.state.items():
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    try:
        with open(path, "wb") as file:
            file.write(b"".join(chunks))
    except IOError as e:
        raise CheckpointError(f"Ошибка записи чекпоинта {path}: {e}")


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointError(f"Чекпоинт {self.path} обрезан (смещение {self.offset})")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    """
    Чтение чекпоинта

    Raises:
        CheckpointVersionError: При неподдерживаемой версии формата
        CheckpointError: При ошибке чтения, неверной магии, обрезанном файле
    """
    try:
        with open(path, "rb") as file:
            payload = file.read()
    except IOError as e:
        raise CheckpointError(f"Ошибка чтения чекпоинта {path}: {e}")

    reader = _Reader(payload, path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Файл {path} не является чекпоинтом (неверная сигнатура)")
    version, = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"Чекпоинт {path}: версия формата {version}, поддерживается {CHECKPOINT_VERSION}"
        )

    meta_length, = reader.unpack("<I")
    raw_metadata = reader.take(meta_length)
    try:
        metadata = json.loads(raw_metadata.decode("utf-8"))
        config = TrainConfig.from_dict(metadata["config"])
        epoch, metrics = metadata["epoch"], metadata["metrics"]
        vocab_tokens, frozen = metadata["vocabulary"], metadata["frozen"]
        idf_values, idf_documents = metadata["idf"]["values"], metadata["idf"]["documents"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, TrainingError) as e:
        raise CheckpointError(f"Чекпоинт {path}: повреждены метаданные ({e})")

    count, = reader.unpack("<I")
    state = {}
    for _ in range(count):
        name_length, = reader.unpack("<H")
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Чекпоинт {path}: повреждено имя тензора ({e})")
        rank, = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        state[name] = data.reshape(shape)

    if reader.offset != len(payload):
        raise CheckpointError(f"Чекпоинт {path}: лишние байты после последнего тензора")

    return Checkpoint(state, config, epoch, metrics, vocab_tokens, idf_values, idf_documents, frozen)


class AdamOptimizer:
    """Adam с ограничением глобальной нормы градиента"""

    def __init__(self, params: EncoderParams, config: TrainConfig):
        self.params = params
        self.learning_rate = config.learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.grad_clip = config.grad_clip
        self.step_count = 0
        self.moments = {name: (np.zeros_like(t.data), np.zeros_like(t.data))
                        for name, t in params.trainable()}

    def gradients(self) -> Dict[str, np.ndarray]:
        grads = {}
        for name, tensor in self.params.trainable():
            grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if name == "embedding":
                grad = grad.copy()
                grad[PAD_INDEX] = 0.0
            grads[name] = grad
        return grads

    def step(self) -> float:
        """
        Один шаг оптимизации по накопленным градиентам

        Returns:
            Глобальная норма градиента до ограничения
        """
        grads = self.gradients()
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise TrainingError("Нечисловая норма градиента")
        scale = self.grad_clip / norm if norm > self.grad_clip else 1.0

        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.trainable():
            grad = grads[name] * scale
            m, v = self.moments[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            tensor.data -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        return norm


@dataclass
class EpochLogRow:
    epoch: int
    loss: float
    val_eer: float
    val_cer_id: float
    val_cer_all: float


@dataclass
class TrainResult:
    """
    Результат обучения

    Attributes:
        checkpoint: Лучший по 1 - CER^id на валидации (или последний корректный)
        log: Строки журнала эпох
        loss_trace: Потери каждого обновления
        diverged: Обучение прервано из-за нечисловой потери
    """

    checkpoint: Checkpoint
    log: List[EpochLogRow]
    loss_trace: List[float]
    diverged: bool = False


def write_epoch_log(rows: List[EpochLogRow], path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(EPOCH_LOG_COLUMNS)
            for row in rows:
                writer.writerow([row.epoch, repr(row.loss), repr(row.val_eer),
                                 repr(row.val_cer_id), repr(row.val_cer_all)])
    except IOError as e:
        raise TrainingError(f"Ошибка записи журнала эпох {path}: {e}")


def _update(config: TrainConfig, params: EncoderParams, episodes, features) -> float:
    params.zero_grad()
    losses = [compute_loss(config.model,
                           encode_episode(episode, features, params, config.uses_keywords),
                           config.margin).total
              for episode in episodes]
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    total = total * (1.0 / len(losses))
    if not math.isfinite(total.item()):
        return float("nan")
    nx.backward(total)
    return total.item()


def train(config: TrainConfig, corpus: Corpus, val_corpus: Corpus,
          vectors: Optional[EmbeddingTable] = None, vocab: Optional[Vocabulary] = None,
          idf: Optional[IdfTable] = None) -> TrainResult:
    """
    Эпизодическое мета-обучение

    После каждой эпохи модель оценивается на val_corpus фиксированным
    потоком эпизодов; сохраняется чекпоинт с лучшим 1 - CER^id (при
    равенстве - более ранний). Нечисловая потеря прерывает обучение; если
    ни одна эпоха не завершилась, возвращается снимок начальных параметров
    (эпоха 0).

    Args:
        config: Конфигурация обучения
        corpus: Корпус meta-train
        val_corpus: Корпус meta-val
        vectors: Предобученные эмбеддинги (необязательно)
        vocab: Словарь; по умолчанию строится по обоим корпусам
        idf: Таблица IDF; по умолчанию оценивается по meta-train

    Returns:
        TrainResult
    """
    config.validate()
    if corpus.split != "meta-train":
        raise TrainingError(f"Обучение требует корпус meta-train, получен {corpus.split}")

    if vocab is None:
        vocab = build_vocabulary([corpus, val_corpus])
    if idf is None:
        idf = fit_idf(corpus, vocab)
    try:
        train_features = featurize_corpus(corpus, vocab, idf, config.max_len, config.max_keywords)
        val_features = featurize_corpus(val_corpus, vocab, idf, config.max_len, config.max_keywords)
        val_spec = EpisodeSpec(config.episode.n_classes, config.episode.k_shot,
                               config.episode.n_id_queries, config.episode.n_ood_queries,
                               config.seed + 1)
        val_episodes = sample_meta_test_stream(val_corpus, val_spec, val_spec.seed)
    except ProtoInfoMaxError as e:
        raise TrainingError(f"Ошибка подготовки данных: {e}")

    params = init_encoder(len(vocab), config.d_emb, config.seed, config.hidden_size,
                          config.n_attention_queries)
    if vectors is not None:
        params.set_embedding(vectors)
    if config.freeze_embeddings:
        params.frozen.add("embedding")
    params.require_grad(True)
    initial = make_checkpoint(params, config, 0, {}, vocab, idf)

    optimizer = AdamOptimizer(params, config)
    rng = np.random.default_rng(config.seed)
    group = config.episodes_per_update

    log = []
    loss_trace = []
    best = None
    best_accuracy = -1.0
    diverged = False

    if config.verbose:
        print(f"Обучение {config.model}: {config.epochs} эпох по {config.episodes_per_epoch} "
              f"эпизодов, {group} эпизод(ов) на обновление, параметров: {params.parameter_count()}")

    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for start in range(0, config.episodes_per_epoch, group):
            count = min(group, config.episodes_per_epoch - start)
            episodes = [sample_episode(corpus, config.episode, rng) for _ in range(count)]
            value = _update(config, params, episodes, train_features)
            if not math.isfinite(value):
                diverged = True
                break
            try:
                optimizer.step()
            except TrainingError:
                diverged = True
                break
            loss_trace.append(value)
            epoch_losses.append(value)

        if diverged:
            if config.verbose:
                print(f"Эпоха {epoch}: потеря не является числом, обучение прервано")
            break

        records = score_stream(val_episodes, val_features, params, config.episode.n_classes)
        _, report = evaluate_records(records)
        row = EpochLogRow(epoch, float(np.mean(epoch_losses)), report.eer, report.cer_id,
                          report.cer_all)
        log.append(row)

        if config.verbose:
            print(f"Эпоха {epoch}/{config.epochs}: loss={row.loss:.4f}, EER={row.val_eer:.4f}, "
                  f"CER^id={row.val_cer_id:.4f}, CER^all={row.val_cer_all:.4f}")

        accuracy = 1.0 - report.cer_id
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best = make_checkpoint(params, config, epoch, {
                "val_eer": report.eer, "val_cer_id": report.cer_id,
                "val_cer_all": report.cer_all, "val_tau": report.tau,
            }, vocab, idf)

    if best is None:
        best = initial
    params.zero_grad()
    return TrainResult(best, log, loss_trace, diverged)
