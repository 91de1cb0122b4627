"""Attention-based encoder-decoder whose output layer sees a summary of all previous outputs."""
from .data import BOS, EOS, PAD, UNK, Vocabulary, make_synthetic_task
from .errors import (CheckpointError, ContractError, DimensionError, InputError, NumericError,
                     ParseError, ResdecError)
from .evaluation import bleu, max_attention_histogram, perplexity, token_accuracy
from .inference import AttentionTrace, Hypothesis, beam_decode, greedy_decode
from .model import ModelConfig, ModelParams, Scoring, Variant, param_count
from .structure import BinaryTree, build_tree, parseval, right_branching_tree
from .training import TrainConfig, init_params, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
