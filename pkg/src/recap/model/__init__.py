from .network import CaptionModel, ModelConfig
from .tokenizer import BOS, EOS, SEP, VOCAB_SIZE, detokenize, tokenize, tokenize_with_sep
from .training import (
    Batch,
    TrainPair,
    TrainResult,
    apply_freeze_policy,
    batch_loss,
    caption_sequence,
    make_batch,
    mean_loss,
    train,
)
from .beam import beam_search, greedy_decode
from .gradcheck import GradCheckReport, finite_diff_check
from .checkpoint import load_checkpoint, save_checkpoint, checkpoint_bytes

__all__ = [
    "CaptionModel", "ModelConfig", "BOS", "EOS", "SEP", "VOCAB_SIZE",
    "detokenize", "tokenize", "tokenize_with_sep", "Batch", "TrainPair",
    "TrainResult", "apply_freeze_policy", "batch_loss", "caption_sequence",
    "make_batch", "mean_loss", "train", "beam_search", "greedy_decode",
    "GradCheckReport", "finite_diff_check", "load_checkpoint",
    "save_checkpoint", "checkpoint_bytes",
]
