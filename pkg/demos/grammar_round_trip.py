"""
Code as a derivation
====================

A Java method is canonicalized, parsed into its leftmost derivation and
turned back into tokens.  The rule sequence is what the decoder predicts.
"""
from envcodegen import grammar as G
from envcodegen.corpus import canonicalize
from envcodegen.lexer import tokenize_code

g = G.load_java_grammar()
print(f"{len(g.rules)} rules, start symbol {g.start_symbol}")

code = "void add(double d){for(int i=0;i<vecElements.length;i++){vecElements[i]+=d;}}"
canon = canonicalize(code, g)
print("canonical:", canon)

tokens = [t.text for t in tokenize_code(canon)]
d = G.parse(tokens, g)
print(f"{len(tokens)} tokens -> {len(d)} rules")

# first few steps: rule and the step whose rule introduced its nonterminal
for t, step in enumerate(d.steps[:12]):
    r = g.rules[step.rule]
    print(f"{t:3d}  parent {step.parent:3d}  {r.lhs} -> {' '.join(r.rhs)}")

# identifier terminals are the copy targets at decode time
idents = [G.terminal_text(g.rules[s.rule].rhs[0]) for s in d.steps
          if g.rules[s.rule].kind == G.IDENTIFIER_TERMINAL]
print("identifier terminals:", idents)

assert G.realize(d, g) == tokens
print("round trip ok")
