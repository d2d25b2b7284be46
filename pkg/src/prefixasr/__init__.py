"""Speech-prefix-tuned prefix language model ASR, desk scale, fully checkable."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .corpus import CorpusSpec, Utterance, generate_synthetic_corpus
from .losses import JointLossConfig, ctc_loss, joint_loss, lm_loss, rnnt_loss
from .metrics import align_wer, cmi, corpus_report
from .model import AsrModel, ModelOutputs, PrefixLMConfig
from .training import Adam, ParameterRegistry, REGIMES, TrainConfig, train_step

__version__ = "0.1.0"

__all__ = [
    "Adam", "AsrModel", "CorpusSpec", "JointLossConfig", "ModelOutputs",
    "ParameterRegistry", "PrefixLMConfig", "REGIMES", "Tape", "Tensor",
    "TrainConfig", "Utterance", "align_wer", "backward", "cmi",
    "corpus_report", "ctc_loss", "finite_difference_check",
    "generate_synthetic_corpus", "joint_loss", "lm_loss", "rnnt_loss",
    "train_step",
]
