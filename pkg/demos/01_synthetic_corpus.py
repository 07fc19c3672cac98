"""Generate a synthetic dialogue corpus and poke at its structure.

Every dialogue draws a topic. Topics own a handful of frequent "topical"
words plus rare keyword tokens; the correct response shares a rare keyword
with its context while distractors come from other topics. That makes the
corpus learnable by both sequence encoders (topical words) and word-overlap
models (echoed words, shared keywords).
"""

from ccnrank.corpus import SyntheticConfig, generate_splits, topic_keywords
from ccnrank.vocab import build_vocab, cwf_score, split_by_frequency

config = SyntheticConfig()  # 4 topics, 60 filler words, 2 context turns
train, evals, val = generate_splits(seed=7, n_train=2000, n_eval=200, n_val=200, config=config)

print(f"{len(train)} train instances, {len(evals)} eval, {len(val)} validation")
print(f"label balance: {sum(t.label for t in train)}/{len(train)} positive\n")

pos = next(t for t in train if t.label == 1)
print("a positive pair:")
print("  context :", " ".join(pos.context))
print("  response:", " ".join(pos.response))
print("  shared keywords:", topic_keywords(pos.context) & topic_keywords(pos.response), "\n")

vocab = build_vocab(train)
split = split_by_frequency(vocab, threshold=5)
print(f"vocabulary: {vocab.size} ids ({len(split.high)} high-band, {len(split.low)} low-band words)")
most = vocab.words_by_id[:5]
print("most frequent:", ", ".join(f"{w} (n={vocab.counts[w]})" for w in most))
rare = [w for w in vocab.words_by_id if vocab.counts[w] <= 5][:5]
print("rare keywords:", ", ".join(f"{w} (n={vocab.counts[w]})" for w in rare), "\n")

inst = evals[0]
print("CWF score of each candidate against one eval context")
print("(rareness-weighted word overlap; candidate 0 is the correct response):")
for i, cand in enumerate(inst.candidates):
    print(f"  candidate {i}: cwf = {cwf_score(inst.context, cand, vocab):.4f}")
