"""Common-words-frequency rescoring: add scaled rare-word overlap at eval time.

A high-band encoder never sees rare keywords, so a context and its correct
response sharing one is invisible to it. The CWF layer adds
scale * sum(1/n_w) over common word types to each candidate's probability;
the scale is tuned on validation recall@1. Here the base model is untrained,
which makes the effect stark.
"""

from ccnrank.corpus import generate_splits
from ccnrank.evaluation import (
    ranks_at_scale,
    recall_at_k,
    score_instances,
    tune_scale_from_scored,
)
from ccnrank.models import ModelConfig, build_model
from ccnrank.vocab import build_vocab

train_set, eval_set, val_set = generate_splits(seed=7, n_train=1500, n_eval=300, n_val=300)
vocab = build_vocab(train_set)

config = ModelConfig(architecture="dual_lstm", embedding_dim=16, hidden_size=16, max_len=40, seed=7)
model, _ = build_model(config, vocab)  # deliberately left untrained

val_scored = score_instances([model], val_set)
scale = tune_scale_from_scored(val_scored)
print(f"tuned CWF scale on validation: {scale:g}\n")

eval_scored = score_instances([model], eval_set)
print("eval recall@1 at a few scales:")
for s in (0.0, scale / 10, scale, scale * 10):
    r1 = recall_at_k(ranks_at_scale(eval_scored, s), 1)
    marker = "  <- tuned" if s == scale else ""
    print(f"  scale {s:8g}: recall@1 = {r1:.3f}{marker}")
