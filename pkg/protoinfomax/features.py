"""Модуль токенизации, словаря и извлечения ключевых слов по TF-IDF"""
import re
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from protoinfomax.corpus import Corpus
from protoinfomax.exceptions import EmptySequenceError, FeatureError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN)

MAX_LENGTH = 64
MAX_KEYWORDS = 10

_TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")
_WORD_PATTERN = re.compile(r"\w+")


def split_tokens(text: str) -> List[str]:
    """Нижний регистр, слова и знаки пунктуации как отдельные токены"""
    return _TOKEN_PATTERN.findall(text.lower())


class Vocabulary:
    """
    Словарь токенов с зарезервированными индексами PAD=0 и UNK=1
    """

    def __init__(self, tokens: Sequence[str]):
        """
        Args:
            tokens: Незарезервированные токены в порядке индексов (начиная с 2)

        Raises:
            FeatureError: При повторах или зарезервированных токенах в списке
        """
        reserved = [token for token in tokens if token in RESERVED_TOKENS]
        if reserved:
            raise FeatureError(f"Зарезервированные токены в словаре: {reserved}")

        duplicates = [token for token, count in Counter(tokens).items() if count > 1]
        if duplicates:
            raise FeatureError(f"Повторяющиеся токены в словаре: {duplicates[:10]}")

        self._itos = list(RESERVED_TOKENS) + list(tokens)
        self._stoi = {token: index for index, token in enumerate(self._itos)}

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def index(self, token: str) -> int:
        return self._stoi.get(token, UNK_INDEX)

    def token(self, index: int) -> str:
        return self._itos[index]

    @property
    def tokens(self) -> List[str]:
        """Незарезервированные токены в порядке индексов"""
        return self._itos[len(RESERVED_TOKENS):]


def build_vocabulary(corpora: Iterable[Corpus], min_count: int = 1) -> Vocabulary:
    """
    Построение словаря по текстам корпусов

    Токены упорядочены по убыванию частоты, при равенстве - лексикографически.

    Args:
        corpora: Корпуса, тексты которых входят в словарь
        min_count: Минимальная частота токена

    Returns:
        Vocabulary
    """
    counts = Counter()
    for corpus in corpora:
        for sentence in corpus.sentences:
            counts.update(split_tokens(sentence.text))

    for token in RESERVED_TOKENS:
        counts.pop(token, None)

    ordered = sorted((item for item in counts.items() if item[1] >= min_count),
                     key=lambda item: (-item[1], item[0]))
    return Vocabulary([token for token, _ in ordered])


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    """Один токен на строку; номер строки + 2 = индекс"""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as file:
            for token in vocab.tokens:
                file.write(token + "\n")
    except IOError as e:
        raise FeatureError(f"Ошибка записи словаря {path}: {e}")


def load_vocabulary(path: str) -> Vocabulary:
    try:
        with open(path, "r", encoding="utf-8") as file:
            tokens = [line.rstrip("\n") for line in file if line.rstrip("\n")]
    except (IOError, UnicodeDecodeError) as e:
        raise FeatureError(f"Ошибка чтения словаря {path}: {e}")
    return Vocabulary(tokens)


@dataclass(frozen=True)
class TokenSeq:
    """Последовательность индексов словаря"""

    tokens: Tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise EmptySequenceError("Пустая последовательность токенов")

    @property
    def length(self) -> int:
        return len(self.tokens)


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_LENGTH) -> TokenSeq:
    """
    Токенизация текста

    Args:
        text: Исходный текст
        vocab: Словарь; неизвестные токены получают индекс UNK
        max_len: Максимальная длина, лишние токены отбрасываются справа

    Returns:
        TokenSeq

    Raises:
        EmptySequenceError: Если в тексте нет ни одного словесного токена
    """
    raw = split_tokens(text)
    if not any(_WORD_PATTERN.fullmatch(token) for token in raw):
        raise EmptySequenceError(f"Текст не содержит слов: {text[:50]!r}")
    return TokenSeq(tuple(vocab.index(token) for token in raw[:max_len]))


def detokenize(sequence: TokenSeq, vocab: Vocabulary) -> str:
    return " ".join(vocab.token(index) for index in sequence.tokens)


@dataclass(frozen=True, eq=False)
class IdfTable:
    """
    Значения IDF по индексам словаря

    Attributes:
        values: Массив длины |словаря|
        documents: Число документов D (предложений meta-train)
    """

    values: np.ndarray
    documents: int

    def __post_init__(self):
        if np.any(self.values < 0):
            raise FeatureError("IDF не может быть отрицательным")

    def __len__(self) -> int:
        return len(self.values)

    def idf(self, index: int) -> float:
        return float(self.values[index])


def fit_idf(corpus: Corpus, vocab: Vocabulary) -> IdfTable:
    """
    Оценка IDF по корпусу; документ - одно предложение

    idf(t) = ln((1 + D) / (1 + df(t))) + 1

    Args:
        corpus: Корпус meta-train
        vocab: Словарь

    Returns:
        IdfTable
    """
    if not corpus.sentences:
        raise FeatureError("Нельзя оценить IDF по пустому корпусу")

    document_frequency = np.zeros(len(vocab), dtype=np.float64)
    for sentence in corpus.sentences:
        present = {vocab.index(token) for token in split_tokens(sentence.text)}
        document_frequency[list(present)] += 1.0

    documents = len(corpus.sentences)
    values = np.log((1.0 + documents) / (1.0 + document_frequency)) + 1.0
    return IdfTable(values, documents)


def save_idf(idf: IdfTable, vocab: Vocabulary, path: str) -> None:
    """Строки token<TAB>idf; первая строка хранит число документов"""
    if len(idf) != len(vocab):
        raise FeatureError(f"Размер IDF ({len(idf)}) не совпадает со словарём ({len(vocab)})")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as file:
            file.write(f"#documents\t{idf.documents}\n")
            for index in range(len(vocab)):
                file.write(f"{vocab.token(index)}\t{idf.idf(index)!r}\n")
    except IOError as e:
        raise FeatureError(f"Ошибка записи IDF {path}: {e}")


def load_idf(path: str, vocab: Vocabulary) -> IdfTable:
    values = np.zeros(len(vocab), dtype=np.float64)
    seen = set()
    documents = None
    try:
        with open(path, "r", encoding="utf-8") as file:
            for line_number, line in enumerate(file, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FeatureError(f"{path}, строка {line_number}: ожидается token<TAB>idf")
                token, value = parts
                if line_number == 1 and token == "#documents":
                    documents = int(value)
                    continue
                if token not in vocab:
                    raise FeatureError(f"{path}, строка {line_number}: токен {token!r} вне словаря")
                values[vocab.index(token)] = float(value)
                seen.add(token)
    except IOError as e:
        raise FeatureError(f"Ошибка чтения IDF {path}: {e}")
    except ValueError as e:
        raise FeatureError(f"Некорректное значение в файле IDF {path}: {e}")

    if documents is None:
        raise FeatureError(f"В файле {path} нет строки #documents")
    if len(seen) != len(vocab):
        raise FeatureError(f"Файл {path} покрывает {len(seen)} из {len(vocab)} токенов")
    return IdfTable(values, documents)


@dataclass(frozen=True)
class KeywordSet:
    """Ключевые слова предложения: пары (индекс токена, idf) по убыванию tf·idf"""

    keywords: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        indices = [index for index, _ in self.keywords]
        if len(set(indices)) != len(indices):
            raise FeatureError(f"Повторяющиеся ключевые слова: {indices}")

    def __len__(self) -> int:
        return len(self.keywords)

    @property
    def indices(self) -> List[int]:
        return [index for index, _ in self.keywords]

    @property
    def weights(self) -> List[float]:
        return [weight for _, weight in self.keywords]


def extract_keywords(sentence: TokenSeq, idf: IdfTable, max_k: int = MAX_KEYWORDS) -> KeywordSet:
    """
    Топ max_k токенов предложения по tf·idf

    Равные оценки упорядочиваются по индексу токена; PAD и UNK исключены.

    Args:
        sentence: Токенизированное предложение
        idf: Таблица IDF
        max_k: Максимальное число ключевых слов

    Returns:
        KeywordSet

    Raises:
        FeatureError: Если в предложении только служебные токены
    """
    term_frequency = Counter(index for index in sentence.tokens
                             if index not in (PAD_INDEX, UNK_INDEX))
    if not term_frequency:
        raise FeatureError("Предложение состоит только из служебных токенов (PAD/UNK)")

    scored = sorted(((count * idf.idf(index), index) for index, count in term_frequency.items()),
                    key=lambda item: (-item[0], item[1]))
    return KeywordSet(tuple((index, idf.idf(index)) for _, index in scored[:max_k]))


@dataclass(frozen=True)
class SentenceFeatures:
    tokens: TokenSeq
    keywords: Optional[KeywordSet]


def featurize_corpus(corpus: Corpus, vocab: Vocabulary, idf: IdfTable,
                     max_len: int = MAX_LENGTH,
                     max_keywords: int = MAX_KEYWORDS) -> Dict[str, SentenceFeatures]:
    """
    Токены и ключевые слова для всех предложений корпуса

    Предложения без извлекаемых ключевых слов (только UNK) получают keywords=None.

    Returns:
        Словарь {id предложения: SentenceFeatures}

    Raises:
        EmptySequenceError: Если текст предложения не содержит слов
    """
    features = {}
    for sentence in corpus.sentences:
        try:
            tokens = tokenize(sentence.text, vocab, max_len)
        except EmptySequenceError as e:
            raise EmptySequenceError(f"Предложение {sentence.id}: {e}")
        try:
            keywords = extract_keywords(tokens, idf, max_keywords)
        except FeatureError:
            keywords = None
        features[sentence.id] = SentenceFeatures(tokens, keywords)
    return features
