"""
ProtoInfoMax Package
Прототипные сети с InfoMax для классификации ID и обнаружения OOD в текстах
"""

from .config import load_configuration, validate_config, DEFAULT_CONFIG
from .exceptions import (ProtoInfoMaxError, ConfigError, CorpusError, EpisodeSamplingError,
                         FeatureError, NumericsError, EncoderError, ProtoMaxError,
                         TrainingError, CheckpointError, EvaluationError, VisualizationError)
from .corpus import Corpus, Episode, EpisodeSpec, load_corpus, sample_episode, sample_meta_test_stream
from .features import Vocabulary, build_vocabulary, tokenize, fit_idf, extract_keywords
from .encoder import init_encoder, encode_sentence, encode_keywords, load_pretrained_vectors
from .protomax import MODELS, compute_loss, loss_protoinfomax, loss_protoinfomaxpp
from .training import TrainConfig, train, save_checkpoint, load_checkpoint
from .evaluation import score_meta_test, select_threshold, compute_metrics, calibration
from .visualizer import ReportVisualizer

__all__ = [
    'load_configuration',
    'validate_config',
    'DEFAULT_CONFIG',
    'ProtoInfoMaxError',
    'ConfigError',
    'CorpusError',
    'EpisodeSamplingError',
    'FeatureError',
    'NumericsError',
    'EncoderError',
    'ProtoMaxError',
    'TrainingError',
    'CheckpointError',
    'EvaluationError',
    'VisualizationError',
    'Corpus',
    'Episode',
    'EpisodeSpec',
    'load_corpus',
    'sample_episode',
    'sample_meta_test_stream',
    'Vocabulary',
    'build_vocabulary',
    'tokenize',
    'fit_idf',
    'extract_keywords',
    'init_encoder',
    'encode_sentence',
    'encode_keywords',
    'load_pretrained_vectors',
    'MODELS',
    'compute_loss',
    'loss_protoinfomax',
    'loss_protoinfomaxpp',
    'TrainConfig',
    'train',
    'save_checkpoint',
    'load_checkpoint',
    'score_meta_test',
    'select_threshold',
    'compute_metrics',
    'calibration',
    'ReportVisualizer',
]

__version__ = '1.0.0'
