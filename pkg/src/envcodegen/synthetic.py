"""Templated desk-scale corpus: getters, setters, increments, containment
checks and delegating calls over randomized class environments."""
from __future__ import annotations

import random

from . import grammar as G
from .corpus import Example, camel_split, make_example

_HEADS = ["vec", "item", "user", "max", "total", "node", "buffer", "row", "page", "file",
          "cache", "score", "path", "line", "word"]
_TAILS = ["Elements", "Count", "Name", "Size", "Value", "Index", "List", "Data", "Width",
          "Limit", "Id", "Map", "Text", "Offset", "Flag"]
_VERBS = ["reset", "clear", "update", "refresh", "flush", "validate", "close", "init"]
_SCALAR_TYPES = ["int", "double", "long", "String", "boolean"]
_ARRAY_TYPES = ["int[]", "double[]"]
_OTHER_TYPES = ["Vector", "Node", "List<String>", "Object"]
_SYLLABLES = ["ka", "zo", "ru", "mi", "te", "bo", "xa", "ne", "pu", "li", "vo", "gre",
              "sku", "dra", "fen", "qui", "yor", "wam"]

_GET_NL = ["returns the {w}", "gets the {w}", "return the current {w}"]
_SET_NL = ["sets the {w}", "set the {w} to the given value", "updates the {w}"]
_INC_NL = ["increment the {w}", "increments the {w} by one"]
_ADD_NL = ["adds the given value to every element of {w}", "increment each {w} entry by the argument"]
_HAS_NL = ["returns true if {w} contains the given value", "checks whether the value is in {w}"]
_CALL_NL = ["calls {w}", "delegates to {w}", "invokes {w} on this object"]
_TYPED = {"get": "returns the {t} field", "set": "sets the {t} field",
          "inc": "increments the {t} field"}


def _camel(rng, used):
    for _ in range(100):
        name = rng.choice(_HEADS) + rng.choice(_TAILS)
        if name not in used:
            return name
    raise RuntimeError("name pool exhausted")


def _nonce(rng, used):
    for _ in range(1000):
        name = "".join(rng.choice(_SYLLABLES) for _ in range(3))
        if name not in used:
            return name
    raise RuntimeError("nonce pool exhausted")


def _words(name):
    return " ".join(camel_split(name))


def generate_synthetic(n: int, seed: int, g: G.Grammar, getter_fraction: float = 0.1674,
                       unique_names: bool = False, max_variables: int = 4,
                       max_methods: int = 3) -> list[Example]:
    """``n`` deterministic examples for ``seed``.

    With ``unique_names`` every member name is a fresh nonsense word used
    exactly once in the corpus, and the NL names the member's type instead
    of the member, so identifiers can only be produced by copying.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = random.Random(seed)
    used = set()
    out = []
    for _ in range(n):
        if unique_names:
            out.append(_typed_example(rng, used, g))
        else:
            out.append(_templated_example(rng, set(), g, getter_fraction,
                                          max_variables, max_methods))
    return out


def _environment(rng, used, fresh, n_vars, n_meths, types):
    variables, methods = [], []
    names = set()
    for _ in range(n_vars):
        name = fresh(rng, used | names)
        names.add(name)
        variables.append((name, rng.choice(types)))
    for _ in range(n_meths):
        name = rng.choice(_VERBS) + rng.choice(_TAILS) if fresh is _camel else fresh(rng, used | names)
        if name in names:
            continue
        names.add(name)
        methods.append((name, rng.choice(["void", "int", "boolean", "String"])))
    return variables, methods


def _templated_example(rng, used, g, getter_fraction, max_vars, max_meths) -> Example:
    types = _SCALAR_TYPES + _ARRAY_TYPES + _OTHER_TYPES
    variables, methods = _environment(rng, used, _camel, rng.randint(1, max_vars),
                                      rng.randint(0, max_meths), types)
    if rng.random() < getter_fraction:
        kind = "get"
    else:
        kind = rng.choice(["set", "inc", "add", "has", "call"])
    if kind == "call" and not methods:
        kind = "set"
    if kind == "inc" and not any(t in ("int", "long", "double") for _, t in variables):
        kind = "set"
    if kind in ("add", "has") and not any(t in _ARRAY_TYPES for _, t in variables):
        kind = "set"

    def pick(allowed=None):
        cands = [v for v in variables if allowed is None or v[1] in allowed]
        return rng.choice(cands)

    if kind == "get":
        name, typ = pick()
        nl = rng.choice(_GET_NL).format(w=_words(name))
        getter = "get" + name[0].upper() + name[1:]
        body = rng.choice([f"return {name};", f"return this.{name};"])
        code = f"{typ} {getter}() {{ {body} }}"
    elif kind == "set":
        name, typ = pick()
        nl = rng.choice(_SET_NL).format(w=_words(name))
        setter = "set" + name[0].upper() + name[1:]
        code = f"void {setter}({typ} value) {{ this.{name} = value; }}"
    elif kind == "inc":
        name, _ = pick({"int", "long", "double"})
        nl = rng.choice(_INC_NL).format(w=_words(name))
        code = f"void inc() {{ {name}++; }}"
    elif kind == "add":
        name, typ = pick(set(_ARRAY_TYPES))
        elem = typ[:-2]
        nl = rng.choice(_ADD_NL).format(w=_words(name))
        code = (f"void add({elem} delta) {{ for (int i = 0; i < {name}.length; i++) "
                f"{{ {name}[i] += delta; }} }}")
    elif kind == "has":
        name, typ = pick(set(_ARRAY_TYPES))
        elem = typ[:-2]
        nl = rng.choice(_HAS_NL).format(w=_words(name))
        code = (f"boolean contains({elem} needle) {{ for ({elem} e : {name}) "
                f"{{ if (e == needle) {{ return true; }} }} return false; }}")
    else:
        meth, _ = rng.choice(methods)
        nl = rng.choice(_CALL_NL).format(w=_words(meth))
        code = f"void run() {{ {meth}(); }}"
    return make_example(nl, variables, methods, code, g)


def _typed_example(rng, used, g) -> Example:
    # distinct primitive types so the NL's type word identifies the member
    types = rng.sample(["int", "double", "long", "boolean"], rng.randint(1, 2))
    variables = []
    for t in types:
        name = _nonce(rng, used)
        used.add(name)
        variables.append((name, t))
    name, typ = rng.choice(variables)
    kind = rng.choice(["get", "set"] + (["inc"] if typ != "boolean" else []))
    nl = _TYPED[kind].format(t=typ)
    if kind == "get":
        code = f"{typ} getIt() {{ return {name}; }}"
    elif kind == "set":
        code = f"void setIt({typ} value) {{ {name} = value; }}"
    else:
        code = f"void inc() {{ {name}++; }}"
    return make_example(nl, variables, [], code, g)


def statistics(examples) -> dict:
    """Fractions of getters and of examples touching a member variable."""
    from .corpus import _is_getter
    n = len(examples)
    uses = sum(any(t in {v for v, _ in ex.variables} for t in ex.tokens) for ex in examples)
    return {"n": n, "pct_getters": 100.0 * sum(_is_getter(ex) for ex in examples) / n,
            "pct_using_class_variables": 100.0 * uses / n}
