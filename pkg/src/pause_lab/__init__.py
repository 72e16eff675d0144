"""Pause-token training for small decoder-only transformers, on a numpy autodiff core."""

from .autograd import Tensor, backward, grad_check, no_grad, set_precision
from .model import ModelConfig, Transformer, build_causal_mask, build_prefix_mask, count_params, init_params
from .pause import PausedSequence, inject_corpus, pause_finetune_loss, pause_generate, pause_pretrain_loss, random_insert
from .tasks import TaskSpec, Vocab, build_vocab, gen_pretrain_corpus, gen_task_examples
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_finetune, train_pretrain

__version__ = "0.1.0"
