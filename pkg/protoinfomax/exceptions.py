"""Модуль пользовательских исключений"""


class ProtoInfoMaxError(Exception):
    """Базовое исключение для ошибок пакета protoinfomax"""
    pass


class ConfigError(ProtoInfoMaxError):
    """Ошибка загрузки или валидации конфигурации"""
    pass


class CorpusError(ProtoInfoMaxError):
    """Ошибка чтения или проверки корпуса"""
    pass


class EpisodeSamplingError(CorpusError):
    """Невозможно сэмплировать эпизод с заданными параметрами"""
    pass


class FeatureError(ProtoInfoMaxError):
    """Ошибка токенизации, словаря или извлечения ключевых слов"""
    pass


class EmptySequenceError(FeatureError):
    """После токенизации не осталось ни одного токена"""
    pass


class NumericsError(ProtoInfoMaxError):
    """Ошибка тензорных вычислений"""
    pass


class ShapeError(NumericsError):
    """Несовместимые формы тензоров"""
    pass


class GradientError(NumericsError):
    """Ошибка обратного прохода"""
    pass


class EncoderError(ProtoInfoMaxError):
    """Ошибка энкодера предложений"""
    pass


class ProtoMaxError(ProtoInfoMaxError):
    """Ошибка построения прототипов или вычисления функции потерь"""
    pass


class ZeroNormError(ProtoMaxError):
    """Вектор с почти нулевой нормой в косинусной мере"""
    pass


class TrainingError(ProtoInfoMaxError):
    """Ошибка обучения"""
    pass


class CheckpointError(TrainingError):
    """Ошибка чтения или записи чекпоинта"""
    pass


class CheckpointVersionError(CheckpointError):
    """Неподдерживаемая версия формата чекпоинта"""
    pass


class EvaluationError(ProtoInfoMaxError):
    """Ошибка оценки модели"""
    pass


class VisualizationError(ProtoInfoMaxError):
    """Ошибка визуализации данных"""
    pass
