"""Query-driven unsupervised adaptation of vision-language embeddings
over archives of previously observed object segments."""

__version__ = "0.1.0"

from .store import GroundTruth, SceneStore, SegmentRecord, load_store, save_store
from .selection import ClassSet, TrainingSet
from .adaptation import AdapterCheckpoint, TrainConfig
from .retrieval import RetrievalResult

__all__ = [
    "GroundTruth",
    "SceneStore",
    "SegmentRecord",
    "load_store",
    "save_store",
    "ClassSet",
    "TrainingSet",
    "AdapterCheckpoint",
    "TrainConfig",
    "RetrievalResult",
    "__version__",
]
