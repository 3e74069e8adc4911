"""Optimizer, task generators, corpora and training schedules."""

from .baseline import AttentionBaseline
from .corpus import Corpus, encode, decode, load_corpus, sample_windows, write_desk_corpus
from .loop import accumulate_grads, train_step
from .mqar import MqarBatch, MqarInstance, eval_mqar, generate_mqar, replay_answers
from .optim import AdamW, cosine_lr
