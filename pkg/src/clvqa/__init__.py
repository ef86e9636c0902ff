"""Continual learning for driving question answering on a synthetic task stream."""
from .config import RunConfig, load_config, parse_config
from .metrics import ScoreMatrix, average, forgetting, score_corpus
from .model import Vocabulary
from .replay import KMeans, MemoryBuffer, TfidfVectorizer
from .taskstream import TASKS, StreamSizes, generate_stream, read_stream, write_stream
from .trainer import ContinualVQA, evaluate, run, run_continual, run_joint, run_vanilla

__version__ = "0.1.0"

__all__ = [
    "ContinualVQA", "KMeans", "MemoryBuffer", "RunConfig", "ScoreMatrix", "StreamSizes", "TASKS",
    "TfidfVectorizer", "Vocabulary", "average", "evaluate", "forgetting", "generate_stream", "load_config",
    "parse_config", "read_stream", "run", "run_continual", "run_joint", "run_vanilla", "score_corpus",
    "write_stream",
]
