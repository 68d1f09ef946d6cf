"""
Retrieval baseline and scoring
==============================

Nearest-neighbour retrieval on the documentation with member renaming,
scored with exact match and corpus BLEU.
"""
from envcodegen.baselines import TfIdfIndex, parse_failure_rate, retrieval_predict_corpus
from envcodegen.grammar import load_java_grammar
from envcodegen.metrics import evaluate
from envcodegen.synthetic import generate_synthetic

g = load_java_grammar()
train_set = generate_synthetic(200, seed=1, g=g)
test = generate_synthetic(50, seed=2, g=g)

index = TfIdfIndex.from_corpus(train_set)
q = test[0]
sims = index.similarities(q.nl)
nearest = train_set[int(sims.argmax())]
print("query:   ", " ".join(q.nl))
print("nearest: ", " ".join(nearest.nl), f"(cosine {sims.max():.3f})")

preds = retrieval_predict_corpus(test, train_set, seed=0)
print("retrieved:", " ".join(preds[0]))
print("gold:     ", " ".join(q.tokens))

report = evaluate(preds, [ex.tokens for ex in test],
                  {"parse_failure_rate": parse_failure_rate(preds, g)})
print(report.table())
