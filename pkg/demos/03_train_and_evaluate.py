"""Train each architecture on a small synthetic corpus and compare Recall@k.

Desk-scale version of the full experiment (a few hundred instances, small
dimensions) so it finishes in well under a minute per model.
"""

import time

from ccnrank.corpus import generate_splits
from ccnrank.evaluation import evaluate
from ccnrank.models import ARCHITECTURES, ModelConfig, build_model
from ccnrank.training import TrainConfig, train
from ccnrank.vocab import build_vocab

train_set, eval_set, val_set = generate_splits(seed=7, n_train=1200, n_eval=200, n_val=200)
vocab = build_vocab(train_set)
print(f"corpus: {len(train_set)} train / {len(val_set)} validation / {len(eval_set)} eval\n")

for arch in ARCHITECTURES:
    config = ModelConfig(architecture=arch, embedding_dim=16, hidden_size=16, max_len=40, seed=7)
    model, _ = build_model(config, vocab)
    t0 = time.perf_counter()
    model, reports = train(
        model,
        train_set,
        TrainConfig(batch_size=64, max_epochs=6, seed=7, patience=6,
                    validation=val_set, epsilon=1e-8),
    )
    elapsed = time.perf_counter() - t0
    curve = " ".join(f"{r.val_recall1:.2f}" for r in reports)
    report = evaluate([model], eval_set, scale=0.0)
    print(f"{arch:10s} val r@1 per epoch [{curve}]")
    print(f"{arch:10s} eval recall@1={report.recall_at[1]:.3f} recall@2={report.recall_at[2]:.3f} "
          f"recall@5={report.recall_at[5]:.3f}  ({elapsed:.0f}s)\n")
