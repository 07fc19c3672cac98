"""Ensembling: average candidate probabilities over a mix of models.

Members differ in architecture and seed; the unweighted mean of their
probabilities tracks the strongest member and smooths over the weak ones.
"""

from ccnrank.corpus import generate_splits
from ccnrank.evaluation import evaluate
from ccnrank.models import ModelConfig, build_model
from ccnrank.training import TrainConfig, train
from ccnrank.vocab import build_vocab

train_set, eval_set, val_set = generate_splits(seed=7, n_train=1200, n_eval=200, n_val=150)
vocab = build_vocab(train_set)

members = []
for arch, seed in (("dual_lstm", 1), ("dual_lstm", 2), ("ccn_lstm", 3)):
    config = ModelConfig(architecture=arch, embedding_dim=16, hidden_size=16, max_len=40, seed=seed)
    model, _ = build_model(config, vocab)
    model, _ = train(
        model,
        train_set,
        TrainConfig(batch_size=64, max_epochs=4, seed=seed, patience=4,
                    validation=val_set, epsilon=1e-8),
    )
    members.append(model)
    solo = evaluate([model], eval_set, scale=0.0)
    print(f"member {arch} (seed {seed}): recall@1 = {solo.recall_at[1]:.3f}")

combined = evaluate(members, eval_set, scale=0.0)
print(f"\nensemble of {len(members)}: recall@1 = {combined.recall_at[1]:.3f} "
      f"recall@2 = {combined.recall_at[2]:.3f} recall@5 = {combined.recall_at[5]:.3f}")
best = max(evaluate([m], eval_set, scale=0.0).recall_at[1] for m in members)
print(f"best single member: recall@1 = {best:.3f}")
