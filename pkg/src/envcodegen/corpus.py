"""Dataset records, preprocessing, copy supervision and vocabularies."""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field

from . import grammar as G
from .lexer import IDENT, STRING, LexError, tokenize_code

PAD, UNK = 0, 1
MAX_INPUT_TOKENS = 200
DEFAULT_THRESHOLDS = {"identifier": 7, "type": 2, "rule": 2}

# Nonterminal names in the shipped grammar that bind identifiers.
PARAM_PARENT = "FormalParam"
LOCAL_PARENTS = ("VariableDeclarator", "Statement")
METHOD_PARENT = "MemberDeclaration"
METHOD_NAME = "function"


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------- NL

_INLINE_TAG = re.compile(r"\{@(\w+)\s*([^}]*)\}")
_BLOCK_TAG = re.compile(r"(^|\s)@(param|return|returns|throws|exception|see|since|author|version|deprecated|serial)\b.*",
                        re.S)
_HTML = re.compile(r"</?[A-Za-z][^>]*>")
_WORD = re.compile(r"[A-Za-z0-9_]+")
_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z][a-z0-9]*|[A-Z]+[0-9]*|[0-9]+")


def camel_split(name: str) -> list[str]:
    """Sub-words of an identifier, lower-cased.

    Splits at lower-to-upper boundaries and underscores; a run of capitals
    stays together up to the capital that starts the next word.
    """
    pieces = []
    for part in name.split("_"):
        pieces.extend(p.lower() for p in _CAMEL.findall(part))
    return pieces


def strip_doc(doc: str) -> list[str]:
    """Javadoc text to lower-cased NL tokens.

    Inline tags keep their enclosed words ({@link Foo} -> foo), block tags
    such as @param and everything after them are dropped, HTML tags are
    removed.  A camel-cased word is followed by its sub-words.
    """
    doc = doc.replace("/**", " ").replace("*/", " ")
    doc = re.sub(r"^\s*\*", " ", doc, flags=re.M)
    doc = _INLINE_TAG.sub(lambda m: " " + (m.group(2) if m.group(1) != "inheritDoc" else "") + " ", doc)
    doc = _BLOCK_TAG.sub(" ", doc)
    doc = _HTML.sub(" ", doc)
    out = []
    for word in _WORD.findall(doc):
        out.append(word.lower())
        pieces = camel_split(word)
        if len(pieces) > 1:
            out.extend(pieces)
    return out


# ---------------------------------------------------------------- code

def canonicalize(code: str, g: G.Grammar) -> str:
    """Rename parameters to argN, locals to locN, the method to ``function``,
    and string literals to ``"str"``; all other text is left as written."""
    try:
        toks = tokenize_code(code)
    except LexError as e:
        raise DatasetError(f"unparseable method: {e}") from e
    try:
        d = G.parse(toks, g)
    except G.ParseError as e:
        raise DatasetError(f"unparseable method: {e}") from e
    owners = G.token_steps(d, g)
    steps = d.steps
    rename = {}
    n_args = n_locs = 0
    method_name = None
    for k, (tok, (_, owner)) in enumerate(zip(toks, owners)):
        if tok.kind != IDENT:
            continue
        parent = steps[owner].parent
        if parent < 0:
            continue
        prule = g.rules[steps[parent].rule]
        if prule.lhs == METHOD_PARENT and method_name is None:
            method_name = tok.text
        elif prule.lhs == PARAM_PARENT and tok.text not in rename:
            rename[tok.text] = f"arg{n_args}"
            n_args += 1
        elif prule.lhs in LOCAL_PARENTS and _declares(prule, toks, k) and tok.text not in rename:
            rename[tok.text] = f"loc{n_locs}"
            n_locs += 1
    name_index = _method_name_index(toks, owners, steps, g)
    pieces, pos = [], 0
    for k, tok in enumerate(toks):
        new = None
        qualified = k > 0 and toks[k - 1].text == "."
        if tok.kind == STRING:
            new = '"str"'
        elif tok.kind == IDENT and not qualified:
            if k == name_index or (
                    tok.text == method_name and k + 1 < len(toks) and toks[k + 1].text == "("
                    and tok.text not in rename):
                new = METHOD_NAME
            elif tok.text in rename:
                new = rename[tok.text]
        if new is not None:
            pieces.append(code[pos:tok.offset])
            pieces.append(new)
            pos = tok.offset + len(tok.text)
    pieces.append(code[pos:])
    return "".join(pieces)


def _declares(prule, toks, k):
    if prule.lhs == "VariableDeclarator":
        return True
    # enhanced for: 'for' '(' Type Identifier ':'
    return prule.rhs[:2] == ("'for'", "'('") and k + 1 < len(toks) and toks[k + 1].text == ":"


def _method_name_index(toks, owners, steps, g):
    for k, (tok, (_, owner)) in enumerate(zip(toks, owners)):
        if tok.kind == IDENT and steps[owner].parent >= 0 and \
                g.rules[steps[steps[owner].parent].rule].lhs == METHOD_PARENT:
            return k
    return -1


# ---------------------------------------------------------------- examples

@dataclass
class Example:
    nl: list
    variables: list  # (name, type)
    methods: list  # (name, return type)
    code: str
    tokens: list = field(default_factory=list)
    target: G.Derivation | None = None
    copy_labels: tuple = ()

    @property
    def environment(self) -> list[str]:
        """Surface strings of the environment slots in [t:v:r:m] order."""
        return ([t for _, t in self.variables] + [v for v, _ in self.variables]
                + [r for _, r in self.methods] + [m for m, _ in self.methods])

    @property
    def input_length(self) -> int:
        return len(self.nl) + 2 * len(self.variables) + 2 * len(self.methods)


def label_copies(ex: Example, g: G.Grammar) -> Example:
    """Mark identifier-terminal steps whose token is an environment string."""
    env = ex.environment
    first = {}
    for j, s in enumerate(env):
        first.setdefault(s, j)
    labels = []
    for step in ex.target.steps:
        rule = g.rules[step.rule]
        label = None
        if rule.kind == G.IDENTIFIER_TERMINAL:
            label = first.get(G.terminal_text(rule.rhs[0]))
        labels.append(label)
    ex.copy_labels = tuple(labels)
    return ex


def make_example(nl, variables, methods, code, g: G.Grammar, canonical=False) -> Example:
    """Build a fully preprocessed Example; ``nl`` may be raw text or tokens."""
    if isinstance(nl, str):
        nl = strip_doc(nl)
    if not canonical:
        code = canonicalize(code, g)
    toks = tokenize_code(code)
    target = G.parse(toks, g)
    ex = Example(list(nl), [tuple(v) for v in variables], [tuple(m) for m in methods],
                 code, [t.text for t in toks], target)
    return label_copies(ex, g)


def load_dataset(path, g: G.Grammar, stats: dict | None = None,
                 max_input=MAX_INPUT_TOKENS, max_code=G.MAX_TOKENS) -> list[Example]:
    """Read the JSONL dataset; unparseable and over-long records are skipped.

    ``stats`` (if given) receives counts under ``read``, ``skipped_unparseable``
    and ``filtered_length``.
    """
    stats = stats if stats is not None else {}
    for k in ("read", "skipped_unparseable", "filtered_length"):
        stats.setdefault(k, 0)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                nl, code = rec["nl"], rec["code"]
                vn, vt = rec["var_names"], rec["var_types"]
                mn, mr = rec["method_names"], rec["method_returns"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed record ({e})") from e
            if len(vn) != len(vt) or len(mn) != len(mr):
                raise DatasetError(f"{path}:{lineno}: environment arrays differ in length")
            stats["read"] += 1
            nl_toks = strip_doc(nl)
            if len(nl_toks) + 2 * len(vn) + 2 * len(mn) > max_input:
                stats["filtered_length"] += 1
                continue
            try:
                ex = make_example(nl_toks, zip(vn, vt), zip(mn, mr), code, g)
            except (DatasetError, LexError, G.ParseError):
                stats["skipped_unparseable"] += 1
                continue
            if len(ex.tokens) > max_code or len(ex.target) > G.MAX_RULES:
                stats["filtered_length"] += 1
                continue
            out.append(ex)
    return out


def example_to_record(ex: Example) -> dict:
    return {
        "nl": " ".join(ex.nl),
        "code": ex.code,
        "var_names": [v for v, _ in ex.variables],
        "var_types": [t for _, t in ex.variables],
        "method_names": [m for m, _ in ex.methods],
        "method_returns": [r for _, r in ex.methods],
    }


def write_dataset(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex)) + "\n")


# ---------------------------------------------------------------- vocabulary

PREV_SENTINEL = 2
PREV_IDENT_OR_LITERAL = 3
NT_SENTINEL = 2


def rule_key(rule: G.ProductionRule) -> str:
    return f"{rule.lhs} -> {' '.join(rule.rhs)}"


def _table(counts: Counter, threshold: int, reserved=("<pad>", "<unk>")) -> dict:
    table = {name: i for i, name in enumerate(reserved)}
    for tok in sorted(t for t, c in counts.items() if c >= threshold):
        if tok not in table:
            table[tok] = len(table)
    return table


def name_pieces(name: str, camel=True) -> list[str]:
    if not camel:
        return [name.lower()]
    return camel_split(name) or [name.lower()]


@dataclass
class Vocabulary:
    identifier: dict
    type: dict
    rule: dict  # rule key -> output index
    nonterminal: dict
    prev_rule: dict  # structural rule key (or marker) -> index into A
    thresholds: dict

    def ident_id(self, tok):
        return self.identifier.get(tok, UNK)

    def type_id(self, tok):
        return self.type.get(tok, UNK)

    def rule_id(self, rule: G.ProductionRule):
        return self.rule.get(rule_key(rule), UNK)

    def prev_id(self, rule: G.ProductionRule):
        if rule.kind != G.STRUCTURAL:
            return PREV_IDENT_OR_LITERAL
        return self.prev_rule.get(rule_key(rule), UNK)

    def nt_id(self, nt):
        return self.nonterminal.get(nt, UNK)

    def to_json(self) -> str:
        return json.dumps({"identifier": self.identifier, "type": self.type, "rule": self.rule,
                           "nonterminal": self.nonterminal, "prev_rule": self.prev_rule,
                           "thresholds": self.thresholds}, sort_keys=True, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(**json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def build_vocab(corpus, g: G.Grammar, thresholds=None) -> Vocabulary:
    """Frequency-thresholded tables.  Index 0 is padding and 1 is UNK everywhere.

    Every structural rule of the grammar gets an output index regardless of
    frequency; the rule threshold applies to identifier/literal rules.
    """
    if not corpus:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    th = dict(DEFAULT_THRESHOLDS)
    th.update(thresholds or {})
    ident, types, rules = Counter(), Counter(), Counter()
    for ex in corpus:
        ident.update(ex.nl)
        for name, typ in list(ex.variables) + list(ex.methods):
            pieces = camel_split(name)
            ident.update(pieces)
            if name.lower() not in pieces:
                ident[name.lower()] += 1
            types[typ] += 1
        for step in ex.target.steps:
            r = g.rules[step.rule]
            if r.kind != G.STRUCTURAL:
                rules[rule_key(r)] += 1
    rule_table = {"<pad>": 0, "<unk>": 1}
    for r in g.structural_rules:
        rule_table[rule_key(r)] = len(rule_table)
    for key in sorted(k for k, c in rules.items() if c >= th["rule"]):
        rule_table[key] = len(rule_table)
    nts = {"<pad>": 0, "<unk>": 1, "<start>": NT_SENTINEL}
    for n in sorted(g.nonterminals):
        nts[n] = len(nts)
    prev = {"<pad>": 0, "<unk>": 1, "<start>": PREV_SENTINEL,
            "<IdentifierOrLiteral>": PREV_IDENT_OR_LITERAL}
    for r in g.structural_rules:
        prev[rule_key(r)] = len(prev)
    return Vocabulary(_table(ident, th["identifier"]), _table(types, th["type"]),
                      rule_table, nts, prev, th)


def corpus_statistics(corpus, g: G.Grammar) -> dict:
    """Summary statistics of a preprocessed corpus."""
    n = len(corpus)
    if n == 0:
        return {"examples": 0}
    uses_var = sum(any(t in {v for v, _ in ex.variables} for t in ex.tokens) for ex in corpus)
    uses_meth = sum(any(t in {m for m, _ in ex.methods} for t in ex.tokens) for ex in corpus)
    getters = sum(_is_getter(ex) for ex in corpus)
    setters = sum(_is_setter(ex) for ex in corpus)
    return {
        "examples": n,
        "avg_nl_length": sum(len(ex.nl) for ex in corpus) / n,
        "avg_code_characters": sum(len(ex.code) for ex in corpus) / n,
        "avg_code_tokens": sum(len(ex.tokens) for ex in corpus) / n,
        "avg_env_variables": sum(len(ex.variables) for ex in corpus) / n,
        "avg_env_methods": sum(len(ex.methods) for ex in corpus) / n,
        "avg_derivation_length": sum(len(ex.target) for ex in corpus) / n,
        "structural_rules": len(g.structural_rules),
        "nonterminals": len(g.nonterminals),
        "pct_getters": 100.0 * getters / n,
        "pct_setters": 100.0 * setters / n,
        "pct_using_class_variables": 100.0 * uses_var / n,
        "pct_using_class_methods": 100.0 * uses_meth / n,
    }


def _body(ex):
    toks = ex.tokens
    return toks[toks.index("{") + 1:-1] if "{" in toks else []


def _is_getter(ex):
    b = _body(ex)
    names = {v for v, _ in ex.variables}
    return (len(b) == 3 and b[0] == "return" and b[1] in names) or \
        (len(b) == 5 and b[:3] == ["return", "this", "."] and b[3] in names)


def _is_setter(ex):
    b = _body(ex)
    names = {v for v, _ in ex.variables}
    return (len(b) == 4 and b[0] in names and b[1] == "=") or \
        (len(b) == 6 and b[:2] == ["this", "."] and b[2] in names and b[3] == "=")
