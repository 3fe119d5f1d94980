"""
Модуль энкодера предложений

Эмбеддинги слов -> двунаправленный GRU -> пулинг вниманием с r запросами
для предложений; IDF-взвешенное среднее эмбеддингов для ключевых слов.
"""
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from protoinfomax import numerics as nx
from protoinfomax.corpus import Episode
from protoinfomax.exceptions import EncoderError, ProtoMaxError
from protoinfomax.features import PAD_INDEX, KeywordSet, SentenceFeatures, TokenSeq, Vocabulary
from protoinfomax.numerics import Tensor
from protoinfomax.protomax import EpisodeEncodings

HIDDEN_SIZE = 100
N_ATTENTION_QUERIES = 5
INIT_RANGE = 0.1
GATES = ("z", "r", "h")
DIRECTIONS = ("gru_fw", "gru_bw")


class EncoderParams:
    """
    Именованные параметры энкодера

    Имена: embedding; gru_fw.* и gru_bw.* (w_x{z,r,h}, w_h{z,r,h}, b_{z,r,h});
    attention.queries, attention.w_key; keyword.projection (если d_emb != 2h).
    """

    def __init__(self, tensors: "OrderedDict[str, Tensor]", frozen: Sequence[str] = ()):
        if "embedding" not in tensors or "attention.queries" not in tensors:
            raise EncoderError("В параметрах энкодера нет embedding или attention.queries")
        self.tensors = tensors
        self.frozen = set(frozen)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise EncoderError(f"Неизвестный параметр энкодера: {name}")

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    @property
    def vocab_size(self) -> int:
        return self.tensors["embedding"].shape[0]

    @property
    def d_emb(self) -> int:
        return self.tensors["embedding"].shape[1]

    @property
    def hidden_size(self) -> int:
        return self.tensors["gru_fw.w_hz"].shape[0]

    @property
    def n_queries(self) -> int:
        return self.tensors["attention.queries"].shape[0]

    @property
    def output_size(self) -> int:
        return 2 * self.hidden_size

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.tensors.values())

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(name, tensor) for name, tensor in self.tensors.items() if name not in self.frozen]

    def require_grad(self, enabled: bool = True) -> None:
        for name, tensor in self.tensors.items():
            tensor.requires_grad = enabled and name not in self.frozen

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        """Копии массивов параметров (для чекпоинта и сравнения)"""
        return {name: tensor.data.copy() for name, tensor in self.tensors.items()}

    def set_embedding(self, table: "EmbeddingTable") -> None:
        """
        Замена матрицы эмбеддингов

        Raises:
            EncoderError: При несовпадении формы
        """
        current = self.tensors["embedding"]
        if table.matrix.shape != current.shape:
            raise EncoderError(
                f"Форма таблицы эмбеддингов {table.matrix.shape} не совпадает с {current.shape}"
            )
        current.data = table.matrix.astype(current.data.dtype).copy()
        current.data[PAD_INDEX] = 0.0
        if table.trainable:
            self.frozen.discard("embedding")
        else:
            self.frozen.add("embedding")


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_encoder(vocab_size: int, d_emb: int, seed: int, hidden_size: int = HIDDEN_SIZE,
                 n_queries: int = N_ATTENTION_QUERIES, dtype=np.float64) -> EncoderParams:
    """
    Инициализация параметров энкодера

    Запросы внимания и эмбеддинги ~ U[-0.1, 0.1] (строка PAD нулевая),
    матрицы GRU и проекций ~ U[-a, a], a = sqrt(6 / (fan_in + fan_out)),
    смещения нулевые.

    Args:
        vocab_size: Размер словаря
        d_emb: Размерность эмбеддингов
        seed: Зерно генератора
        hidden_size: Ширина скрытого состояния одного направления h
        n_queries: Число запросов внимания r

    Returns:
        EncoderParams
    """
    sizes = {"vocab_size": vocab_size, "d_emb": d_emb, "hidden_size": hidden_size,
             "n_queries": n_queries}
    bad = [f"{name}={value}" for name, value in sizes.items()
           if not isinstance(value, int) or value < 1]
    if bad:
        raise EncoderError(f"Размеры энкодера должны быть >= 1: {', '.join(bad)}")

    rng = np.random.default_rng(seed)
    width = 2 * hidden_size
    tensors = OrderedDict()

    embedding = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(vocab_size, d_emb)).astype(dtype)
    embedding[PAD_INDEX] = 0.0
    tensors["embedding"] = embedding

    for direction in DIRECTIONS:
        for gate in GATES:
            tensors[f"{direction}.w_x{gate}"] = _xavier(rng, d_emb, hidden_size, dtype)
        for gate in GATES:
            tensors[f"{direction}.w_h{gate}"] = _xavier(rng, hidden_size, hidden_size, dtype)
        for gate in GATES:
            tensors[f"{direction}.b_{gate}"] = np.zeros(hidden_size, dtype=dtype)

    tensors["attention.queries"] = rng.uniform(
        -INIT_RANGE, INIT_RANGE, size=(n_queries, width)).astype(dtype)
    tensors["attention.w_key"] = _xavier(rng, width, width, dtype)
    if d_emb != width:
        tensors["keyword.projection"] = _xavier(rng, d_emb, width, dtype)

    return EncoderParams(OrderedDict(
        (name, Tensor(value, requires_grad=True, name=name)) for name, value in tensors.items()
    ))


def params_from_state(state: Dict[str, np.ndarray], frozen: Sequence[str] = ()) -> EncoderParams:
    """Сборка EncoderParams из словаря массивов (например, из чекпоинта)"""
    return EncoderParams(OrderedDict(
        (name, Tensor(np.array(value), requires_grad=name not in frozen, name=name))
        for name, value in state.items()
    ), frozen)


@dataclass
class EmbeddingTable:
    """
    Матрица эмбеддингов словаря

    Attributes:
        matrix: Массив |словаря| x d_emb
        trainable: Дообучать ли эмбеддинги
        coverage: Доля (незарезервированных) слов словаря, найденных в файле
        skipped_lines: Число пропущенных нечитаемых строк
    """

    matrix: np.ndarray
    trainable: bool = True
    coverage: float = 0.0
    skipped_lines: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise EncoderError("Таблица эмбеддингов содержит нечисловые значения")

    @property
    def d_emb(self) -> int:
        return self.matrix.shape[1]


def _is_header(parts: List[str]) -> bool:
    return len(parts) == 2 and all(part.isdigit() for part in parts)


def load_pretrained_vectors(path: str, vocab: Vocabulary, base: Optional[np.ndarray] = None,
                            seed: int = 0, trainable: bool = True) -> EmbeddingTable:
    """
    Загрузка предобученных векторов слов из текстового файла

    Формат: необязательный заголовок "n d", затем строки "слово v1 ... vd".
    Строки для слов словаря перезаписывают начальные значения, строка PAD
    остаётся нулевой.

    Args:
        path: Путь к файлу векторов
        vocab: Словарь
        base: Начальная матрица (|словаря| x d); по умолчанию U[-0.1, 0.1]
        seed: Зерно для начальной матрицы
        trainable: Флаг дообучения

    Returns:
        EmbeddingTable

    Raises:
        EncoderError: При ошибке чтения или несовпадении размерности
    """
    matrix = None if base is None else np.array(base, dtype=np.float64)
    if matrix is not None and matrix.shape[0] != len(vocab):
        raise EncoderError(f"Начальная матрица на {matrix.shape[0]} строк, словарь на {len(vocab)}")

    covered = set()
    skipped = 0
    try:
        with open(path, "r", encoding="utf-8") as file:
            for line_number, line in enumerate(file, start=1):
                parts = line.rstrip("\n").split(" ")
                parts = [part for part in parts if part]
                if not parts:
                    continue
                if line_number == 1 and _is_header(parts):
                    continue
                try:
                    values = np.array([float(value) for value in parts[1:]], dtype=np.float64)
                except ValueError:
                    skipped += 1
                    continue
                if values.size == 0 or not np.all(np.isfinite(values)):
                    skipped += 1
                    continue

                if matrix is None:
                    rng = np.random.default_rng(seed)
                    matrix = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(len(vocab), values.size))
                if values.size != matrix.shape[1]:
                    raise EncoderError(
                        f"{path}, строка {line_number}: размерность {values.size}, "
                        f"ожидается {matrix.shape[1]}"
                    )

                word = parts[0]
                if word not in vocab:
                    continue
                index = vocab.index(word)
                if index == PAD_INDEX:
                    continue
                matrix[index] = values
                covered.add(word)
    except (IOError, UnicodeDecodeError) as e:
        raise EncoderError(f"Ошибка чтения файла векторов {path}: {e}")

    if matrix is None:
        raise EncoderError(f"Файл {path} не содержит ни одного вектора")
    if skipped:
        warnings.warn(f"{path}: пропущено нечитаемых строк: {skipped}", RuntimeWarning)

    matrix[PAD_INDEX] = 0.0
    regular = set(vocab.tokens)
    coverage = len(covered & regular) / len(regular) if regular else 0.0
    return EmbeddingTable(matrix, trainable, coverage, skipped)


def save_pretrained_vectors(table: EmbeddingTable, vocab: Vocabulary, path: str) -> None:
    """Запись векторов в текстовом формате (все строки, кроме PAD)"""
    if table.matrix.shape[0] != len(vocab):
        raise EncoderError(f"Таблица на {table.matrix.shape[0]} строк, словарь на {len(vocab)}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as file:
            file.write(f"{len(vocab) - 1} {table.d_emb}\n")
            for index in range(len(vocab)):
                if index == PAD_INDEX:
                    continue
                values = " ".join(repr(float(value)) for value in table.matrix[index])
                file.write(f"{vocab.token(index)} {values}\n")
    except IOError as e:
        raise EncoderError(f"Ошибка записи файла векторов {path}: {e}")


def _pad_batch(seqs: Sequence[TokenSeq]) -> Tuple[np.ndarray, np.ndarray]:
    if not seqs:
        raise EncoderError("Пустой батч предложений")
    longest = max(seq.length for seq in seqs)
    indices = np.full((len(seqs), longest), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for row, seq in enumerate(seqs):
        indices[row, :seq.length] = seq.tokens
        mask[row, :seq.length] = True
    return indices, mask


def _gru_direction(inputs: Tensor, mask: np.ndarray, params: EncoderParams, prefix: str,
                   reverse: bool) -> List[Tensor]:
    batch, steps, _ = inputs.shape
    width = params.hidden_size
    weight = {name: params[f"{prefix}.{name}"] for name in
              ("w_xz", "w_xr", "w_xh", "w_hz", "w_hr", "w_hh")}
    bias = {gate: nx.expand(params[f"{prefix}.b_{gate}"], (batch, width)) for gate in GATES}

    state = Tensor(np.zeros((batch, width), dtype=inputs.data.dtype))
    outputs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        x = inputs[:, t, :]
        z = nx.sigmoid(x @ weight["w_xz"] + state @ weight["w_hz"] + bias["z"])
        r = nx.sigmoid(x @ weight["w_xr"] + state @ weight["w_hr"] + bias["r"])
        candidate = nx.tanh(x @ weight["w_xh"] + (r * state) @ weight["w_hh"] + bias["h"])
        updated = (1.0 - z) * state + z * candidate

        # на шагах PAD состояние переносится без изменений
        keep = np.repeat(mask[:, t:t + 1], width, axis=1).astype(inputs.data.dtype)
        state = Tensor(keep) * updated + Tensor(1.0 - keep) * state
        outputs[t] = state
    return outputs


def _encode_states(seqs: Sequence[TokenSeq], params: EncoderParams) -> Tuple[Tensor, np.ndarray]:
    indices, mask = _pad_batch(seqs)
    embedded = nx.take_rows(params["embedding"], indices)
    forward = _gru_direction(embedded, mask, params, "gru_fw", reverse=False)
    backward = _gru_direction(embedded, mask, params, "gru_bw", reverse=True)
    states = nx.concat([nx.stack(forward, axis=1), nx.stack(backward, axis=1)], axis=2)
    return states, mask


def _attention(states: Tensor, mask: np.ndarray, params: EncoderParams) -> Tuple[Tensor, Tensor]:
    batch, steps, width = states.shape
    keys = states @ params["attention.w_key"]
    scores = (keys @ nx.transpose(params["attention.queries"])) * (1.0 / math.sqrt(width))
    query_mask = np.repeat(mask[:, :, None], params.n_queries, axis=2)
    weights = nx.softmax(scores, axis=1, mask=query_mask)
    pooled = nx.transpose(weights, (0, 2, 1)) @ states
    return nx.mean(pooled, axis=1), weights


def encode_sentences(seqs: Sequence[TokenSeq], params: EncoderParams) -> Tensor:
    """
    Кодирование батча предложений

    Последовательности дополняются PAD до максимальной длины; шаги PAD
    не меняют состояние GRU и исключены из softmax внимания.

    Args:
        seqs: Токенизированные предложения
        params: Параметры энкодера

    Returns:
        Тензор формы (B, 2h)
    """
    states, mask = _encode_states(seqs, params)
    pooled, _ = _attention(states, mask, params)
    return pooled


def encode_sentence(tokens: TokenSeq, params: EncoderParams) -> Tensor:
    """Кодирование одного предложения в вектор ширины 2h"""
    return nx.reshape(encode_sentences([tokens], params), (params.output_size,))


def attention_weights(seqs: Sequence[TokenSeq], params: EncoderParams) -> np.ndarray:
    """Веса внимания формы (B, T, r) без построения графа"""
    with nx.no_grad():
        states, mask = _encode_states(seqs, params)
        _, weights = _attention(states, mask, params)
    return weights.data


def encode_keywords(keyword_sets: Sequence[KeywordSet], params: EncoderParams) -> Tensor:
    """
    IDF-взвешенное среднее эмбеддингов ключевых слов

    c_w = (1/n) * sum_i embed(w_i) * idf_i, затем линейная проекция
    (без смещения) в ширину 2h, если d_emb != 2h.

    Args:
        keyword_sets: Наборы ключевых слов
        params: Параметры энкодера

    Returns:
        Тензор формы (B, 2h)

    Raises:
        EncoderError: Для пустого батча или пустого набора ключевых слов
    """
    if not keyword_sets:
        raise EncoderError("Пустой батч наборов ключевых слов")
    if any(len(keywords) == 0 for keywords in keyword_sets):
        raise EncoderError("Пустой набор ключевых слов")

    longest = max(len(keywords) for keywords in keyword_sets)
    indices = np.full((len(keyword_sets), longest), PAD_INDEX, dtype=np.int64)
    weights = np.zeros((len(keyword_sets), longest), dtype=params["embedding"].data.dtype)
    mask = np.zeros((len(keyword_sets), longest), dtype=bool)
    for row, keywords in enumerate(keyword_sets):
        indices[row, :len(keywords)] = keywords.indices
        weights[row, :len(keywords)] = keywords.weights
        mask[row, :len(keywords)] = True

    embedded = nx.take_rows(params["embedding"], indices)
    scale = Tensor(np.repeat(weights[:, :, None], params.d_emb, axis=2))
    averaged = nx.masked_mean(embedded * scale, mask, axis=1)
    if "keyword.projection" in params:
        averaged = averaged @ params["keyword.projection"]
    return averaged


def encode_keyword_set(keywords: KeywordSet, params: EncoderParams) -> Tensor:
    return nx.reshape(encode_keywords([keywords], params), (params.output_size,))


def _episode_order(episode: Episode) -> List[str]:
    ids = [sentence.id for sentence in episode.support_sentences()]
    ids.extend(sentence.id for sentence, _ in episode.id_queries)
    ids.extend(sentence.id for sentence in episode.ood_queries)
    return ids


def encode_episode(episode: Episode, features: Dict[str, SentenceFeatures],
                   params: EncoderParams, with_keywords: bool = False) -> EpisodeEncodings:
    """
    Кодирование всех предложений эпизода одним батчем

    Args:
        episode: Эпизод
        features: Признаки предложений (см. features.featurize_corpus)
        params: Параметры энкодера
        with_keywords: Кодировать также ключевые слова (для ProtoInfoMax++)

    Returns:
        EpisodeEncodings

    Raises:
        EncoderError: Если для предложения нет признаков
        ProtoMaxError: Если with_keywords и у предложения нет ключевых слов
    """
    order = _episode_order(episode)
    missing = [sentence_id for sentence_id in order if sentence_id not in features]
    if missing:
        raise EncoderError(f"Нет признаков для предложений: {missing[:10]}")

    n_support = episode.n_classes * episode.k_shot
    n_id = len(episode.id_queries)
    bounds = (slice(0, n_support), slice(n_support, n_support + n_id),
              slice(n_support + n_id, len(order)))
    support_shape = (episode.n_classes, episode.k_shot, params.output_size)

    encoded = encode_sentences([features[sentence_id].tokens for sentence_id in order], params)
    result = EpisodeEncodings(
        support=nx.reshape(encoded[bounds[0]], support_shape),
        id_queries=encoded[bounds[1]],
        id_labels=np.array([label for _, label in episode.id_queries], dtype=np.int64),
        ood_queries=encoded[bounds[2]],
    )

    if with_keywords:
        without = [sentence_id for sentence_id in order if features[sentence_id].keywords is None]
        if without:
            raise ProtoMaxError(
                f"У предложений {without[:10]} нет ключевых слов; "
                f"пересчитайте признаки features.featurize_corpus с общим IdfTable"
            )
        keywords = encode_keywords([features[sentence_id].keywords for sentence_id in order], params)
        result.support_keywords = nx.reshape(keywords[bounds[0]], support_shape)
        result.id_query_keywords = keywords[bounds[1]]
        result.ood_query_keywords = keywords[bounds[2]]

    return result
