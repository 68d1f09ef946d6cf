"""Exact match and BLEU over token sequences, plus report tables."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

MAX_N = 4

# Row labels of the ablation table, keyed by the config toggle they switch off.
ABLATION_ROWS = [
    ("Full", None),
    ("-Variables", "use_variables"),
    ("-Methods", "use_methods"),
    ("-Two step attention", "use_two_step_attention"),
    ("-Camel-case encoding", "use_camel_encoding"),
]


def _normalize(seq):
    if isinstance(seq, str):
        return seq.split()
    return [t for tok in seq for t in str(tok).split()]


def _check(preds, refs):
    if len(preds) != len(refs):
        raise ValueError(f"prediction/reference count mismatch: {len(preds)} vs {len(refs)}")


def exact_match(preds, refs) -> float:
    """Percentage of predictions equal to their reference token sequence."""
    _check(preds, refs)
    if not preds:
        raise ValueError("empty corpus")
    hits = sum(_normalize(p) == _normalize(r) for p, r in zip(preds, refs))
    return 100.0 * hits / len(preds)


def ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped(pred, ref, n):
    p, r = ngrams(pred, n), ngrams(ref, n)
    return sum(min(c, r[g]) for g, c in p.items()), max(len(pred) - n + 1, 0)


def bleu(preds, refs, max_n=MAX_N) -> float:
    """Corpus BLEU-4 on a 0-100 scale.

    Clipped n-gram counts are pooled over the corpus before taking the
    geometric mean; the brevity penalty is exp(1 - r/c) when c <= r.
    Any zero precision gives 0.  Orders for which the predictions contain
    no n-gram at all (every prediction shorter than n) are left out of the
    mean, so that very short corpora still score bleu(x, x) = 100.
    """
    _check(preds, refs)
    if not preds:
        raise ValueError("empty corpus")
    match = [0] * max_n
    possible = [0] * max_n
    c = r = 0
    for p, ref in zip(preds, refs):
        p, ref = _normalize(p), _normalize(ref)
        c += len(p)
        r += len(ref)
        for n in range(1, max_n + 1):
            m, t = _clipped(p, ref, n)
            match[n - 1] += m
            possible[n - 1] += t
    if c == 0:
        return 100.0 if r == 0 else 0.0
    orders = [(m, t) for m, t in zip(match, possible) if t > 0]
    if any(m == 0 for m, _ in orders):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in orders) / len(orders)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def sentence_bleu(pred, ref, max_n=MAX_N) -> float:
    """Add-one smoothed sentence BLEU (orders >= 2).  Diagnostic only."""
    p, ref = _normalize(pred), _normalize(ref)
    if not p:
        return 0.0
    logs = 0.0
    for n in range(1, max_n + 1):
        m, t = _clipped(p, ref, n)
        if n > 1:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        logs += math.log(m / t)
    bp = 1.0 if len(p) > len(ref) else math.exp(1.0 - len(ref) / len(p))
    return 100.0 * bp * math.exp(logs / max_n)


@dataclass
class EvalReport:
    exact_match: float
    bleu: float
    n: int
    records: list = field(default_factory=list)  # (match, sentence_bleu) per example
    extra: dict = field(default_factory=dict)

    def to_json(self, per_example=False) -> str:
        d = asdict(self)
        if not per_example:
            d.pop("records")
        return json.dumps(d, sort_keys=True)

    def table(self) -> str:
        rows = [("examples", str(self.n)), ("exact match", f"{self.exact_match:.2f}"),
                ("BLEU", f"{self.bleu:.2f}")]
        rows += [(k, f"{v:.2f}" if isinstance(v, float) else str(v))
                 for k, v in sorted(self.extra.items())]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)


def evaluate(preds, refs, extra=None) -> EvalReport:
    em = exact_match(preds, refs)
    records = [{"match": _normalize(p) == _normalize(r), "sentence_bleu": sentence_bleu(p, r)}
               for p, r in zip(preds, refs)]
    return EvalReport(em, bleu(preds, refs), len(preds), records, dict(extra or {}))


def ablation_table(rows) -> str:
    """``rows`` is a list of (label, train_exact, dev_exact, bleu); None prints as '-'."""
    def fmt(x):
        return "-" if x is None else f"{x:.2f}"
    header = ("Model", "Train exact", "Dev exact", "BLEU")
    body = [(lab, fmt(a), fmt(b), fmt(c)) for lab, a, b, c in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def read_predictions(path) -> list[list[str]]:
    """One prediction per line; JSONL lines with a ``tokens`` field are accepted too."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("{"):
                out.append(list(json.loads(line)["tokens"]))
            else:
                out.append(line.split())
    return out
