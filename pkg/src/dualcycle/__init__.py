"""Joint training of a frame-to-text generator and a text-to-frame parser
through primal (frame -> text -> frame) and dual (text -> frame -> text)
cycles."""

from .data import Corpus, load_corpus
from .metrics import EvalReport
from .models import NlgModel, NluModel
from .trainer import DualTrainer, TrainConfig, evaluate

__version__ = "0.1.0"

__all__ = ["Corpus", "DualTrainer", "EvalReport", "NlgModel", "NluModel", "TrainConfig", "evaluate",
           "load_corpus"]
