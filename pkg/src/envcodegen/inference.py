"""Grammar-constrained greedy and beam decoding.

A hypothesis keeps a stack of pending nonterminals; every step pops one,
scores its admissible expansions (plus environment copies at identifier
nonterminals) and pushes the chosen rule's nonterminals right to left.
Completed hypotheses are therefore always valid derivations.

With ``enforce_budget`` an action is admissible only if the hypothesis can
still be finished within the rule and token limits using shortest
completions, so decoding never truncates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import grammar as G
from .corpus import PREV_SENTINEL, UNK
from .model import UNK_IDENTIFIER, UNK_LITERALS


@dataclass
class Hypothesis:
    frontier: list  # (nonterminal, parent step, parent prev-rule id, parent s_t)
    states: list  # per decoder layer, packed (2H,) state
    rules: list = field(default_factory=list)
    actions: list = field(default_factory=list)  # ("rule", out idx) | ("copy", slot)
    tokens: int = 0
    prev: int = PREV_SENTINEL
    logp: float = 0.0
    pending: tuple = (0, 0)  # shortest completion of the frontier (steps, tokens)
    done_at: int = -1

    @property
    def complete(self):
        return not self.frontier


@dataclass
class DecodeResult:
    tokens: list
    rules: list
    logp: float
    truncated: bool = False
    actions: list = field(default_factory=list)
    derivation: G.Derivation | None = None


def _start(model, enc):
    g = model.grammar
    init = [s.data[0] for s in enc.init]
    top = init[-1][:model.config.H]
    return Hypothesis([(g.start_symbol, G.NO_PARENT, PREV_SENTINEL, top)], init,
                      pending=g.min_completion(g.start_symbol))


def _candidates(model, hyp, k, lg_row, lc_row, enc_row_strings, fanout):
    """Top admissible (logp, kind, index, rule) actions for one hypothesis."""
    g, c = model.grammar, model.config
    nt = hyp.frontier[-1][0]
    steps_after = len(hyp.rules) + 1
    pend_s, pend_t = hyp.pending
    ms, mt = g.min_completion(nt)
    base_s, base_t = pend_s - ms, pend_t - mt
    scores = lg_row.copy()
    if lc_row is not None and np.isfinite(lc_row).any():
        scores[UNK] = -np.inf  # UNK only when nothing can be copied
    cands = []
    order = np.argsort(-scores, kind="stable")
    for idx in order:
        if not np.isfinite(scores[idx]):
            break
        rid = _rule_for(model, nt, idx)
        rule = g.rules[rid]
        if c.enforce_budget:
            add_s, add_t = 0, 0
            for sym in rule.rhs:
                s_, t_ = g.min_completion(sym)
                add_s += s_
                add_t += t_
            if steps_after + base_s + add_s > c.max_rules or \
                    hyp.tokens + base_t + add_t > c.max_tokens:
                continue
        cands.append((float(scores[idx]), "rule", int(idx), rid))
        if len(cands) >= fanout:
            break
    if lc_row is not None:
        corder = np.argsort(-lc_row, kind="stable")
        n = 0
        for j in corder:
            if not np.isfinite(lc_row[j]) or n >= fanout:
                break
            rid = g.terminal_rule(nt, enc_row_strings[j]).id
            cands.append((float(lc_row[j]), "copy", int(j), rid))
            n += 1
    cands.sort(key=lambda a: (-a[0], a[1] != "rule", a[2]))
    return cands[:fanout]


def _rule_for(model, nt, idx):
    if idx != UNK:
        return int(model.out_rule[idx])
    cls = model.grammar.lexical[nt]
    text = UNK_IDENTIFIER if cls == "IDENT" else UNK_LITERALS[cls]
    return model.grammar.terminal_rule(nt, text).id


def _advance(model, hyp, cand, states_row, s_row):
    g, v = model.grammar, model.vocab
    logp, kind, idx, rid = cand
    rule = g.rules[rid]
    t = len(hyp.rules)
    frontier = hyp.frontier[:-1]
    nt = hyp.frontier[-1][0]
    ps, pt = hyp.pending
    ms, mt = g.min_completion(nt)
    ps, pt = ps - ms, pt - mt
    par_id = v.prev_id(rule)
    n_terms = 0
    for sym in reversed(rule.rhs):
        if G.is_terminal(sym):
            n_terms += 1
        else:
            frontier.append((sym, t, par_id, s_row))
            s_, t_ = g.min_completion(sym)
            ps += s_
            pt += t_
    return Hypothesis(frontier, states_row, hyp.rules + [rid], hyp.actions + [(kind, idx)],
                      hyp.tokens + n_terms, par_id, hyp.logp + logp, (ps, pt))


def _expand(model, enc, live, fanout):
    """Score every live hypothesis in one batch; return candidate lists."""
    v = model.vocab
    K = len(live)
    encK = enc.rows(np.zeros(K, dtype=np.int64))
    nt = np.array([v.nt_id(h.frontier[-1][0]) for h in live])
    prev = np.array([h.prev for h in live])
    par = np.array([h.frontier[-1][2] for h in live])
    parent_h = np.stack([h.frontier[-1][3] for h in live])
    from .tensor import const
    states = [const(np.stack([h.states[l] for h in live])) for l in range(model.config.layers)]
    new_states, s, lg, lc = model.step_logprobs(encK, nt, prev, par, states, parent_h)
    out = []
    for k, h in enumerate(live):
        cands = _candidates(model, h, k, lg[k], None if lc is None else lc[k],
                            enc.copy_strings[0], fanout)
        st_row = [ns.data[k] for ns in new_states]
        out.append([(c, st_row, s[k]) for c in cands])
    return out


def _result(model, hyp, truncated=False):
    g = model.grammar
    if hyp.complete:
        d = G.validate(hyp.rules, g)
        toks = G.realize(d, g)
    else:
        d, toks = None, _partial_tokens(hyp, g)
    return DecodeResult(toks, list(hyp.rules), hyp.logp, truncated, list(hyp.actions), d)


def _partial_tokens(hyp, g):
    out, stack, t = [], [g.start_symbol], 0
    while stack and t <= len(hyp.rules):
        sym = stack.pop()
        if G.is_terminal(sym):
            out.append(G.terminal_text(sym))
        elif t < len(hyp.rules):
            stack.extend(reversed(g.rules[hyp.rules[t]].rhs))
            t += 1
        else:
            break
    return out


def _over_limit(model, hyp):
    """True once even the shortest completion would break a limit."""
    c = model.config
    ps, pt = hyp.pending
    return len(hyp.rules) + ps > c.max_rules or hyp.tokens + pt > c.max_tokens


def greedy_decode(ex, model) -> DecodeResult:
    enc = model.init_decoder(ex)
    hyp = _start(model, enc)
    while not hyp.complete:
        if _over_limit(model, hyp):
            return _result(model, hyp, truncated=True)
        (cands,) = _expand(model, enc, [hyp], 1)
        if not cands:
            return _result(model, hyp, truncated=True)
        cand, st_row, s_row = cands[0]
        hyp = _advance(model, hyp, cand, st_row, s_row)
    return _result(model, hyp)


def _score(model, hyp):
    if model.config.length_normalize and hyp.rules:
        return hyp.logp / len(hyp.rules)
    return hyp.logp


def _beam_search(model, enc, k):
    """One fixed-width beam search; returns its completed hypotheses."""
    live = [_start(model, enc)]
    done = []
    step = 0
    while live:
        pool = []
        for hi, cand_list in enumerate(_expand(model, enc, live, k)):
            for ci, (cand, st_row, s_row) in enumerate(cand_list):
                pool.append((live[hi].logp + cand[0], hi, ci, cand, st_row, s_row))
        pool.sort(key=lambda x: (-x[0], x[1], x[2]))
        survivors = []
        for _, hi, _, cand, st_row, s_row in pool[:k]:
            h = _advance(model, live[hi], cand, st_row, s_row)
            if h.complete:
                h.done_at = step
                done.append(h)
            elif not _over_limit(model, h):
                survivors.append(h)
        step += 1
        if done and not model.config.length_normalize:
            best = max(h.logp for h in done)
            survivors = [h for h in survivors if h.logp > best]
        live = survivors
    return done


def beam_decode(ex, model, beam_size=None, nested=True) -> list[DecodeResult]:
    """Ranked completed decodes (best first).

    Each live hypothesis proposes its ``beam_size`` best actions, the best
    ``beam_size`` candidates survive, and finished ones move to the done
    set.  Search continues while a live hypothesis could still beat the
    best finished one.  Ties: earlier completion, then token order.

    A fixed-width beam can lose the path a narrower beam would have kept,
    so with ``nested`` the done sets of widths 1..beam_size are pooled.
    The best result then never gets worse as the beam grows, and always
    matches or beats greedy decoding.
    """
    k = model.config.beam_size if beam_size is None else beam_size
    if k < 1:
        raise ValueError("beam size must be at least 1")
    enc = model.init_decoder(ex)
    done, seen = [], set()
    for width in (range(1, k + 1) if nested else [k]):
        for h in _beam_search(model, enc, width):
            key = tuple(h.rules)
            if key not in seen:
                seen.add(key)
                done.append(h)
    if not done:
        return []
    results = [(h, _result(model, h)) for h in done]
    results.sort(key=lambda hr: (-_score(model, hr[0]), hr[0].done_at, hr[1].tokens))
    return [r for _, r in results]


def decode(ex, model, beam_size=None) -> DecodeResult:
    k = model.config.beam_size if beam_size is None else beam_size
    if k == 1:
        return greedy_decode(ex, model)
    res = beam_decode(ex, model, k)
    return res[0] if res else greedy_decode(ex, model)


def exact_match_rate(model, examples, beam_size=1) -> float:
    hits = 0
    for ex in examples:
        hits += decode(ex, model, beam_size).tokens == list(ex.tokens)
    return 100.0 * hits / len(examples)


def predict_corpus(examples, model, out_path, beam_size=None, jsonl=False) -> int:
    """Write one prediction per example; returns the number written."""
    with open(out_path, "w", encoding="utf-8") as fh:
        for ex in examples:
            r = decode(ex, model, beam_size)
            if jsonl:
                fh.write(json.dumps({"tokens": r.tokens, "logp": r.logp, "rules": r.rules,
                                     "truncated": r.truncated}) + "\n")
            else:
                fh.write(" ".join(r.tokens) + "\n")
    return len(examples)
