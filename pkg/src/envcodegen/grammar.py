"""Context-free grammar, derivations, and an Earley parser.

A derivation is the sequence of production rules applied in a depth-first,
left-to-right expansion from the start symbol.  Identifier and literal
nonterminals are *lexical*: they match a whole token class, and each
distinct token they produce becomes its own single-terminal rule, interned
on first use so rule ids stay dense.
"""
from __future__ import annotations

import random
import sys
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .lexer import IDENT, Token, classify

STRUCTURAL = "structural"
IDENTIFIER_TERMINAL = "identifier-terminal"
LITERAL_TERMINAL = "literal-terminal"

NO_PARENT = -1
MAX_TOKENS = 150
MAX_RULES = 500


class GrammarError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParseError(ValueError):
    def __init__(self, message, index):
        super().__init__(f"{message} (furthest failure at token {index})")
        self.index = index


class DerivationError(ValueError):
    pass


@dataclass(frozen=True)
class ProductionRule:
    id: int
    lhs: str
    rhs: tuple
    kind: str = STRUCTURAL

    def __str__(self):
        return f"{self.lhs} -> " + " ".join(
            s if s.startswith("'") else s for s in self.rhs)


def is_terminal(sym: str) -> bool:
    return sym.startswith("'")


def terminal_text(sym: str) -> str:
    return sym[1:-1]


def quote(text: str) -> str:
    return "'" + text + "'"


class Step(NamedTuple):
    rule: int
    parent: int


@dataclass(frozen=True)
class Derivation:
    steps: tuple

    @property
    def rules(self):
        return [s.rule for s in self.steps]

    def __len__(self):
        return len(self.steps)


@dataclass
class Grammar:
    nonterminals: set
    terminals: set
    rules: list
    start_symbol: str
    identifier_nts: set = field(default_factory=set)
    # lexical nonterminal -> token class it matches
    lexical: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {}
        self.by_lhs = {n: [] for n in self.nonterminals}
        for r in self.rules:
            self._index[(r.lhs, r.rhs)] = r.id
            self.by_lhs[r.lhs].append(r.id)
        self._structural_count = len(self.rules)
        self._analyse()

    # -- interning of lexical rules ------------------------------------
    def terminal_rule(self, lhs: str, text: str) -> ProductionRule:
        """Rule ``lhs -> 'text'``; created on first use for lexical nonterminals."""
        key = (lhs, (quote(text),))
        rid = self._index.get(key)
        if rid is not None:
            return self.rules[rid]
        if lhs not in self.lexical:
            raise GrammarError(f"no rule {lhs} -> {quote(text)} and {lhs} is not lexical")
        kind = IDENTIFIER_TERMINAL if lhs in self.identifier_nts else LITERAL_TERMINAL
        rule = ProductionRule(len(self.rules), lhs, key[1], kind)
        self.rules.append(rule)
        self._index[key] = rule.id
        self.by_lhs[lhs].append(rule.id)
        self.terminals.add(key[1][0])
        return rule

    def rule_id(self, lhs, rhs) -> int | None:
        return self._index.get((lhs, tuple(rhs)))

    @property
    def structural_rules(self):
        return [r for r in self.rules if r.kind == STRUCTURAL]

    def is_lexical(self, sym) -> bool:
        return sym in self.lexical

    def nt_children(self, rule_id):
        return [s for s in self.rules[rule_id].rhs if not is_terminal(s)]

    # -- static analysis -----------------------------------------------
    def _analyse(self):
        nullable = set()
        changed = True
        while changed:
            changed = False
            for r in self.rules:
                if r.lhs not in nullable and all(s in nullable for s in r.rhs):
                    nullable.add(r.lhs)
                    changed = True
        self.nullable = nullable
        # unit cycles (A =>+ A) would make leftmost derivations unbounded
        unit = {n: set() for n in self.nonterminals}
        for r in self.rules:
            syms = [s for s in r.rhs]
            for k, s in enumerate(syms):
                if s in self.nonterminals and all(
                        o in nullable for j, o in enumerate(syms) if j != k):
                    unit[r.lhs].add(s)
        for n in self.nonterminals:
            seen, todo = set(), list(unit[n])
            while todo:
                m = todo.pop()
                if m == n:
                    raise GrammarError(f"cyclic unit derivation through {n}")
                if m not in seen:
                    seen.add(m)
                    todo.extend(unit[m])
        # shortest completion per nonterminal: (steps, tokens, rule)
        INF = (10 ** 9, 10 ** 9)
        best = {n: INF for n in self.nonterminals}
        best_rule = {}
        for n in self.lexical:
            best[n] = (1, 1)
        changed = True
        while changed:
            changed = False
            for r in self.rules[:self._structural_count]:
                if r.lhs in self.lexical:
                    continue
                steps, toks = 1, 0
                for s in r.rhs:
                    if is_terminal(s):
                        toks += 1
                    else:
                        st, tk = best[s]
                        steps += st
                        toks += tk
                if (steps, toks) < best[r.lhs]:
                    best[r.lhs] = (steps, toks)
                    best_rule[r.lhs] = r.id
                    changed = True
        self.min_cost = best
        self.min_rule = best_rule

    def min_completion(self, sym):
        """(steps, tokens) of the shortest completion of ``sym``."""
        if is_terminal(sym):
            return (0, 1)
        return self.min_cost[sym]

    def check(self):
        """Raise GrammarError if any structural invariant is violated."""
        if self.start_symbol not in self.nonterminals:
            raise GrammarError(f"start symbol {self.start_symbol} is not a nonterminal")
        seen = set()
        for i, r in enumerate(self.rules):
            if r.id != i:
                raise GrammarError(f"rule ids are not dense at {i}")
            if not r.lhs or any(not s for s in r.rhs):
                raise GrammarError(f"empty symbol name in rule {r}")
            if r.lhs not in self.nonterminals:
                raise GrammarError(f"rule lhs {r.lhs} is not a nonterminal")
            for s in r.rhs:
                if s not in self.nonterminals and s not in self.terminals:
                    raise GrammarError(f"undefined symbol {s} in rule {r}")
            if (r.lhs, r.rhs) in seen:
                raise GrammarError(f"duplicate rule {r}")
            seen.add((r.lhs, r.rhs))
            single_t = len(r.rhs) == 1 and is_terminal(r.rhs[0])
            if (r.kind == IDENTIFIER_TERMINAL) != (r.lhs in self.identifier_nts and single_t):
                raise GrammarError(f"rule {r} has inconsistent kind {r.kind}")
        for n in self.nonterminals:
            if not self.by_lhs[n] and n not in self.lexical:
                raise GrammarError(f"nonterminal {n} has no expansion rules")
        if not self.identifier_nts <= self.nonterminals:
            raise GrammarError("identifier_nt flags must name nonterminals")


# ---------------------------------------------------------------- loading

LITERAL_CLASSES = ("INT", "FLOAT", "CHAR", "STRING")


def load_grammar(text: str) -> Grammar:
    """Parse the line-oriented grammar file format.

    ``start: NT`` must be the first directive; ``identifier_nt: NT`` flags an
    identifier nonterminal and ``literal_nt: NT CLASS`` binds a literal
    nonterminal to a token class.  A flagged nonterminal with no rules of its
    own matches any token of its class.
    """
    start = None
    idents, literal_nts = [], {}
    raw_rules = []
    first = True
    for lineno, line in enumerate(text.splitlines(), 1):
        line = _strip_comment(line)
        if not line:
            continue
        if first:
            if not line.startswith("start:"):
                raise GrammarError("missing start directive", lineno)
            first = False
        if "->" not in line:
            key, sep, value = line.partition(":")
            if not sep:
                raise GrammarError(f"syntax error: {line!r}", lineno)
            key, value = key.strip(), value.split()
            if key == "start":
                if start is not None or len(value) != 1:
                    raise GrammarError("bad start directive", lineno)
                start = value[0]
            elif key == "identifier_nt":
                if len(value) != 1:
                    raise GrammarError("identifier_nt takes one nonterminal", lineno)
                idents.append(value[0])
            elif key == "literal_nt":
                if len(value) != 2 or value[1] not in LITERAL_CLASSES:
                    raise GrammarError("literal_nt takes a nonterminal and one of "
                                       + "/".join(LITERAL_CLASSES), lineno)
                literal_nts[value[0]] = value[1]
            else:
                raise GrammarError(f"unknown directive {key!r}", lineno)
            continue
        lhs, _, rhs = line.partition("->")
        lhs = lhs.strip()
        if not lhs or not lhs.replace("_", "").isalnum():
            raise GrammarError(f"syntax error: bad left-hand side {lhs!r}", lineno)
        syms = _split_rhs(rhs, lineno)
        raw_rules.append((lineno, lhs, tuple(syms)))
    if start is None:
        raise GrammarError("missing start directive")

    nts = {lhs for _, lhs, _ in raw_rules} | set(idents) | set(literal_nts)
    terminals = set()
    rules, seen = [], set()
    for lineno, lhs, rhs in raw_rules:
        for s in rhs:
            if is_terminal(s):
                terminals.add(s)
            elif s not in nts:
                raise GrammarError(f"undefined symbol {s}", lineno)
        if (lhs, rhs) in seen:
            raise GrammarError(f"duplicate rule {lhs} -> {' '.join(rhs)}", lineno)
        seen.add((lhs, rhs))
        single_t = len(rhs) == 1 and is_terminal(rhs[0])
        if lhs in idents and single_t:
            kind = IDENTIFIER_TERMINAL
        elif lhs in literal_nts and single_t:
            kind = LITERAL_TERMINAL
        else:
            kind = STRUCTURAL
        rules.append(ProductionRule(len(rules), lhs, rhs, kind))
    if start not in nts:
        raise GrammarError(f"undefined start symbol {start}")
    has_rules = {lhs for _, lhs, _ in raw_rules}
    lexical = {n: IDENT for n in idents if n not in has_rules}
    lexical.update({n: c for n, c in literal_nts.items() if n not in has_rules})
    g = Grammar(nts, terminals, rules, start, set(idents), lexical)
    g.check()
    return g


def _strip_comment(line):
    out, inq = [], False
    for ch in line:
        if ch == "'":
            inq = not inq
        if ch == "#" and not inq:
            break
        out.append(ch)
    return "".join(out).strip()


def _split_rhs(rhs, lineno):
    syms, i = [], 0
    while i < len(rhs):
        ch = rhs[i]
        if ch.isspace():
            i += 1
        elif ch == "'":
            j = rhs.find("'", i + 1)
            if j < 0:
                raise GrammarError("syntax error: unterminated terminal", lineno)
            if j == i + 1:
                raise GrammarError("syntax error: empty terminal", lineno)
            syms.append(rhs[i:j + 1])
            i = j + 1
        else:
            j = i
            while j < len(rhs) and not rhs[j].isspace() and rhs[j] != "'":
                j += 1
            name = rhs[i:j]
            if not name.replace("_", "").isalnum():
                raise GrammarError(f"syntax error: bad symbol {name!r}", lineno)
            syms.append(name)
            i = j
    return syms


def load_java_grammar() -> Grammar:
    """The shipped wildcard-free Java method-declaration grammar."""
    from importlib import resources
    text = resources.files("envcodegen").joinpath("data/java_subset.grammar").read_text("utf-8")
    return load_grammar(text)


# ---------------------------------------------------------------- replay

def validate(rules: Sequence[int], g: Grammar) -> Derivation:
    """Replay rule ids on a frontier stack and attach parent pointers."""
    frontier = [(g.start_symbol, NO_PARENT)]
    steps = []
    for t, rid in enumerate(rules):
        if not frontier:
            raise DerivationError(f"{len(rules) - t} rules remain after the frontier emptied")
        if not 0 <= rid < len(g.rules):
            raise DerivationError(f"step {t}: unknown rule id {rid}")
        sym, parent = frontier.pop()
        rule = g.rules[rid]
        if rule.lhs != sym:
            raise DerivationError(f"step {t}: rule {rule} does not expand {sym}")
        steps.append(Step(rid, parent))
        for s in reversed(rule.rhs):
            if not is_terminal(s):
                frontier.append((s, t))
    if frontier:
        raise DerivationError(f"{len(frontier)} nonterminals left on the frontier")
    return Derivation(tuple(steps))


def realize(d: Derivation | Sequence[int], g: Grammar) -> list[str]:
    """Terminal yield of a derivation, left to right."""
    rules = d.rules if isinstance(d, Derivation) else list(d)
    out = []
    stack = [g.start_symbol]
    t = 0
    while stack:
        sym = stack.pop()
        if is_terminal(sym):
            out.append(terminal_text(sym))
            continue
        if t >= len(rules):
            raise DerivationError("stack underflow: derivation ended with pending nonterminals")
        rule = g.rules[rules[t]]
        if rule.lhs != sym:
            raise DerivationError(f"step {t}: rule {rule} does not expand {sym}")
        t += 1
        stack.extend(reversed(rule.rhs))
    if t != len(rules):
        raise DerivationError(f"stack overflow: {len(rules) - t} unused rules")
    return out


def token_steps(d: Derivation, g: Grammar) -> list[tuple[str, int]]:
    """Each yielded terminal paired with the step whose rule produced it."""
    out = []
    stack = [(g.start_symbol, NO_PARENT)]
    t = 0
    rules = d.rules
    while stack:
        sym, owner = stack.pop()
        if is_terminal(sym):
            out.append((terminal_text(sym), owner))
            continue
        rule = g.rules[rules[t]]
        stack.extend((s, t) for s in reversed(rule.rhs))
        t += 1
    return out


# ---------------------------------------------------------------- Earley

def _as_tokens(tokens):
    out = []
    for tok in tokens:
        if isinstance(tok, Token):
            out.append(tok)
        else:
            out.append(Token(classify(tok), tok))
    return out


def parse(tokens, g: Grammar, max_tokens: int = MAX_TOKENS) -> Derivation:
    """Earley-parse ``tokens`` and return the preferred derivation.

    Among ambiguous parses the one whose rule-id sequence is
    lexicographically smallest wins, i.e. the lowest rule id at every
    choice point of the leftmost derivation.
    """
    toks = _as_tokens(tokens)
    n = len(toks)
    if n > max_tokens:
        raise ParseError(f"input has {n} tokens, limit is {max_tokens}", max_tokens)
    done = _earley(toks, g)
    if n not in done.get((g.start_symbol, 0), ()):
        furthest = max(i for i, s in enumerate(done["__sets__"]) if s)
        raise ParseError("no parse", furthest)
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 20000))
    try:
        seq = _Extractor(toks, g, done).best(g.start_symbol, 0, n)
    finally:
        sys.setrecursionlimit(old)
    return validate(seq, g)


def _earley(toks, g: Grammar):
    """Recognize; return completed spans {(A, i): set(j)}."""
    n = len(toks)
    rules = g.rules
    lexical = g.lexical
    nullable = g.nullable
    sets = [dict() for _ in range(n + 1)]  # item -> None (ordered set)
    waiting = [dict() for _ in range(n + 1)]  # sym -> list of items
    completed = {}

    def lex_match(sym, i):
        return i < n and toks[i].kind == lexical[sym]

    for rid in g.by_lhs[g.start_symbol]:
        if rid < g._structural_count:
            sets[0][(rid, 0, 0)] = None
    for i in range(n + 1):
        agenda = list(sets[i])
        cur = sets[i]
        wait = waiting[i]
        predicted = set()
        k = 0
        while k < len(agenda):
            item = agenda[k]
            k += 1
            rid, dot, origin = item
            rhs = rules[rid].rhs
            if dot == len(rhs):
                lhs = rules[rid].lhs
                ends = completed.setdefault((lhs, origin), set())
                if i in ends:
                    continue
                ends.add(i)
                for (r2, d2, o2) in waiting[origin].get(lhs, ()):
                    new = (r2, d2 + 1, o2)
                    if new not in cur:
                        cur[new] = None
                        agenda.append(new)
                continue
            sym = rhs[dot]
            if sym[0] == "'":
                if i < n and toks[i].text == sym[1:-1]:
                    sets[i + 1][(rid, dot + 1, origin)] = None
                continue
            if sym in lexical:
                if lex_match(sym, i):
                    completed.setdefault((sym, i), set()).add(i + 1)
                    sets[i + 1][(rid, dot + 1, origin)] = None
                continue
            wait.setdefault(sym, []).append(item)
            if sym not in predicted:
                predicted.add(sym)
                for r2 in g.by_lhs[sym]:
                    new = (r2, 0, i)
                    if new not in cur:
                        cur[new] = None
                        agenda.append(new)
            if sym in nullable or i in completed.get((sym, i), ()):
                new = (rid, dot + 1, origin)
                if new not in cur:
                    cur[new] = None
                    agenda.append(new)
    completed["__sets__"] = sets
    return completed


class _Extractor:
    def __init__(self, toks, g, done):
        self.toks = toks
        self.g = g
        self.done = done
        self.memo = {}
        self.seq_memo = {}

    def best(self, sym, i, j):
        """Lexicographically smallest derivation of toks[i:j] from ``sym``."""
        key = (sym, i, j)
        if key in self.memo:
            return self.memo[key]
        g = self.g
        result = None
        if sym in g.lexical:
            if j == i + 1 and self.toks[i].kind == g.lexical[sym]:
                result = (g.terminal_rule(sym, self.toks[i].text).id,)
        else:
            for rid in g.by_lhs[sym]:
                if rid >= g._structural_count:
                    break
                rest = self.seq(rid, 0, i, j)
                if rest is not None:
                    result = (rid,) + rest
                    break
        self.memo[key] = result
        return result

    def seq(self, rid, k, i, j):
        key = (rid, k, i, j)
        if key in self.seq_memo:
            return self.seq_memo[key]
        rhs = self.g.rules[rid].rhs
        result = None
        if k == len(rhs):
            result = () if i == j else None
        else:
            sym = rhs[k]
            if sym[0] == "'":
                if i < j and self.toks[i].text == sym[1:-1]:
                    result = self.seq(rid, k + 1, i + 1, j)
            else:
                ends = self.done.get((sym, i), set())
                if sym in self.g.nullable:
                    ends = ends | {i}
                remaining = len(rhs) - k - 1
                best_head = None
                for e in sorted(ends):
                    if e > j or (remaining == 0 and e != j):
                        continue
                    tail = self.seq(rid, k + 1, e, j)
                    if tail is None:
                        continue
                    head = self.best(sym, i, e)
                    if head is None:
                        continue
                    if best_head is None or head < best_head:
                        best_head, best_tail = head, tail
                if best_head is not None:
                    result = best_head + best_tail
        self.seq_memo[key] = result
        return result


# ---------------------------------------------------------------- sampling

_SAMPLE_IDENTS = ["x", "y", "count", "value", "items", "size", "name", "total",
                  "buffer", "index", "result", "node", "data", "flag", "Foo", "Bar"]


def sample_tokens(g: Grammar, rng: random.Random, max_depth: int = 12, ident_pool=None):
    """Random program from ``g``: uniform rule choice, shortest completion past ``max_depth``."""
    pool = ident_pool or _SAMPLE_IDENTS
    out = []

    def lexeme(cls):
        if cls == IDENT:
            return rng.choice(pool)
        if cls == "INT":
            return str(rng.randint(0, 99))
        if cls == "FLOAT":
            return f"{rng.randint(0, 9)}.{rng.randint(0, 9)}"
        if cls == "CHAR":
            return "'" + rng.choice("abcxyz") + "'"
        return '"str"'

    stack = [(g.start_symbol, 0)]
    while stack:
        sym, depth = stack.pop()
        if is_terminal(sym):
            out.append(terminal_text(sym))
            continue
        if sym in g.lexical:
            out.append(lexeme(g.lexical[sym]))
            continue
        if depth >= max_depth:
            rid = g.min_rule[sym]
        else:
            rid = rng.choice([r for r in g.by_lhs[sym] if r < g._structural_count])
        stack.extend((s, depth + 1) for s in reversed(g.rules[rid].rhs))
    return out


def sample_derivation(g: Grammar, rng: random.Random, max_depth: int = 8) -> Derivation:
    """Random derivation (with interned lexical rules) from ``g``."""
    rules = []
    stack = [(g.start_symbol, 0)]
    while stack:
        sym, depth = stack.pop()
        if is_terminal(sym):
            continue
        if sym in g.lexical:
            cls = g.lexical[sym]
            text = rng.choice(_SAMPLE_IDENTS) if cls == IDENT else {
                "INT": "1", "FLOAT": "1.5", "CHAR": "'c'", "STRING": '"str"'}[cls]
            rules.append(g.terminal_rule(sym, text).id)
            continue
        if depth >= max_depth:
            rid = g.min_rule[sym]
        else:
            rid = rng.choice([r for r in g.by_lhs[sym] if r < g._structural_count])
        rules.append(rid)
        stack.extend((s, depth + 1) for s in reversed(g.rules[rid].rhs))
    return validate(rules, g)
