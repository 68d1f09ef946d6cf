"""Encoder-decoder over grammar derivations with two-step attention and
supervised copying from the class environment.

Everything is computed in padded batches.  A single example is a batch of
one; beam search runs its live hypotheses as the rows of a batch.
"""
from __future__ import annotations

import copy as _copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import grammar as G
from . import tensor as T
from .corpus import (NT_SENTINEL, PREV_SENTINEL, UNK, Example, Vocabulary, name_pieces,
                     rule_key)
from .lexer import is_identifier

log = logging.getLogger(__name__)

UNK_IDENTIFIER = "unk_id"
# Placeholders keep UNK output lexically valid at literal nonterminals.
UNK_LITERALS = {"INT": "0", "FLOAT": "0.0", "CHAR": "'?'", "STRING": '"str"'}


@dataclass
class ModelConfig:
    H: int = 1024
    decoder_sym_embed: int = 512
    layers: int = 2
    dropout_p: float = 0.5
    use_variables: bool = True
    use_methods: bool = True
    use_two_step_attention: bool = True
    use_camel_encoding: bool = True
    use_copy: bool = True
    beam_size: int = 3
    max_rules: int = G.MAX_RULES
    max_tokens: int = G.MAX_TOKENS
    length_normalize: bool = False
    enforce_budget: bool = True
    batch_size: int = 20
    epochs: int = 30
    lr: float = 0.001
    lr_decay: float = 0.2
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.H % 2:
            raise ValueError("H must be even: BiLSTMs split it across directions")
        for name in ("H", "decoder_sym_embed", "layers", "beam_size", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- layers

def _lstm_params(rng, prefix, n_in, hid, params):
    W = T.glorot(rng, n_in + hid, 4 * hid)
    b = np.zeros(4 * hid)
    b[hid:2 * hid] = 1.0  # forget gate
    params[prefix + "_W"] = T.parameter(W, prefix + "_W")
    params[prefix + "_b"] = T.parameter(b, prefix + "_b")


def _zero_state(B, hid):
    return T.const(np.zeros((B, 2 * hid), dtype=T.DTYPE))


def bilstm(params, prefix, xs, mask, layers, dropout_p, train, rng):
    """Masked multi-layer BiLSTM.

    ``xs`` is a list over time of (B, in) tensors; ``mask`` is (B, Tn) with
    each row a prefix of ones.  Returns the last layer's per-position
    outputs (B, 2*hid each), and for every layer the packed forward/backward
    states at the last real position and after the full backward pass.
    """
    B, Tn = mask.shape
    lengths = mask.sum(axis=1).astype(np.int64)
    steps = np.arange(Tn)
    rev = np.where(steps[None, :] < lengths[:, None], lengths[:, None] - 1 - steps[None, :], 0)
    layer_info = []
    for layer in range(layers):
        if layer > 0:
            xs = [T.dropout(x, dropout_p, train, rng) for x in xs]
        Wf, bf = params[f"{prefix}_l{layer}_fwd_W"], params[f"{prefix}_l{layer}_fwd_b"]
        Wb, bb = params[f"{prefix}_l{layer}_bwd_W"], params[f"{prefix}_l{layer}_bwd_b"]
        hid = Wf.data.shape[1] // 4
        st = _zero_state(B, hid)
        fwd = []
        for t in range(Tn):
            new = T.lstm_cell(xs[t], st, Wf, bf)
            st = T.blend(mask[:, t], new, st) if not mask[:, t].all() else new
            fwd.append(st)
        fwd_final = st
        st = _zero_state(B, hid)
        bwd_rev = []
        for t in range(Tn):
            x = T.pick_rows(xs, rev[:, t])
            new = T.lstm_cell(x, st, Wb, bb)
            st = T.blend(mask[:, t], new, st) if not mask[:, t].all() else new
            bwd_rev.append(st)
        bwd_final = st
        bwd = [T.pick_rows(bwd_rev, rev[:, t]) for t in range(Tn)]
        xs = [T.concat([T.slice_cols(f, 0, hid), T.slice_cols(b, 0, hid)]) for f, b in zip(fwd, bwd)]
        last = lengths - 1
        layer_info.append({"fwd_last": fwd_final, "bwd_at_last": bwd_rev[0],
                           "bwd_final": bwd_final, "hid": hid, "last": last})
    return xs, layer_info


def _pack(h_f, h_b, hid):
    """[h_f | h_b | c_f | c_b] from two packed (h, c) states."""
    return T.concat([T.slice_cols(h_f, 0, hid), T.slice_cols(h_b, 0, hid),
                     T.slice_cols(h_f, hid, 2 * hid), T.slice_cols(h_b, hid, 2 * hid)])


# ---------------------------------------------------------------- encodings

@dataclass
class Encoded:
    """Encoder output for a batch (rows are examples or hypotheses)."""
    mem: T.Tensor  # (B, Z, H) NL states h_1..h_z
    mem_mask: np.ndarray  # (B, Z)
    env: T.Tensor | None  # (B, S, H) environment slot states
    env_mask: np.ndarray  # (B, S)
    init: list  # per decoder layer, packed (B, 2H) state
    copy_valid: np.ndarray  # (B, S') slots that may be copied at inference
    copy_strings: list  # per row, surface strings of the copy sources

    def rows(self, index):
        """Re-index the batch dimension (used to fan one example out to a beam)."""
        index = np.asarray(index, dtype=np.int64)

        def sel(t):
            return None if t is None else T.const(t.data[index])
        return Encoded(sel(self.mem), self.mem_mask[index], sel(self.env), self.env_mask[index],
                       [sel(s) for s in self.init], self.copy_valid[index],
                       [self.copy_strings[i] for i in index])


@dataclass
class DecodeTargets:
    nt: np.ndarray  # (B, Tn) nonterminal vocab ids
    prev: np.ndarray  # previous-rule ids into A
    par: np.ndarray  # parent-rule ids into A
    par_step: np.ndarray  # parent step index + 1 (0 = encoder init)
    gold: np.ndarray  # output-rule ids
    ident: np.ndarray  # 1.0 where n_t is an identifier nonterminal
    label: np.ndarray  # copy label or -1
    gen_ok: np.ndarray  # 0.0 where only the copy path produces the gold token
    mask: np.ndarray  # 1.0 on real steps


class GrammarDecoderModel:
    """Shared grammar decoder: LSTM over (n_t, a_{t-1}, par(n_t), s_{n_t}),
    lhs-masked output over rules, and a copy switch at identifier nonterminals.

    Subclasses provide ``encode`` and ``context`` (attention -> c_t and copy weights).
    """

    context_inputs = 3  # number of H-wide blocks fed to the c_t projection

    def __init__(self, config: ModelConfig, vocab: Vocabulary, grammar: G.Grammar, seed=None):
        self.config = config
        self.vocab = vocab
        self.grammar = grammar
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self._build_rule_tables()
        self.params = {}
        self._init_params()

    # -- rule tables -----------------------------------------------------
    def _build_rule_tables(self):
        g, v = self.grammar, self.vocab
        V = len(v.rule)
        self.out_rule = np.full(V, -1, dtype=np.int64)
        for key, idx in v.rule.items():
            if idx <= UNK:
                continue
            lhs, _, rhs = key.partition(" -> ")
            rhs = tuple(rhs.split(" ")) if rhs else ()
            rid = g.rule_id(lhs, rhs)
            if rid is None:
                rid = g.terminal_rule(lhs, G.terminal_text(rhs[0])).id
            self.out_rule[idx] = rid
        n_nt = len(v.nonterminal)
        self.allowed = np.zeros((n_nt, V), dtype=bool)
        self.nt_is_ident = np.zeros(n_nt, dtype=bool)
        self.nt_lexical = {}
        for idx in range(2, V):
            lhs = g.rules[self.out_rule[idx]].lhs
            self.allowed[v.nt_id(lhs), idx] = True
        for nt in g.nonterminals:
            i = v.nt_id(nt)
            if nt in g.lexical:
                self.allowed[i, UNK] = True
                self.nt_lexical[i] = g.lexical[nt]
            if nt in g.identifier_nts:
                self.nt_is_ident[i] = True

    # -- parameters ------------------------------------------------------
    def _init_params(self):
        c, p, rng = self.config, self.params, self.rng
        H, D, L = c.H, c.decoder_sym_embed, c.layers
        v = self.vocab
        p["N"] = T.parameter(rng.normal(0, 0.1, (len(v.nonterminal), D)), "N")
        p["A"] = T.parameter(rng.normal(0, 0.1, (len(v.prev_rule), D)), "A")
        for layer in range(L):
            n_in = 3 * D + H if layer == 0 else H
            _lstm_params(rng, f"dec_l{layer}", n_in, H, p)
        p["W_c"] = T.parameter(T.glorot(rng, self.context_inputs * H, H), "W_c")
        p["R"] = T.parameter(T.glorot(rng, H, len(v.rule), (len(v.rule), H)), "R")
        p["b_copy"] = T.parameter(T.glorot(rng, H, 1), "b_copy")
        self._init_encoder_params()

    def _init_encoder_params(self):
        raise NotImplementedError

    def _bilstm_params(self, prefix, n_in):
        hid = self.config.H // 2
        for layer in range(self.config.layers):
            for d in ("fwd", "bwd"):
                _lstm_params(self.rng, f"{prefix}_l{layer}_{d}", n_in if layer == 0 else 2 * hid,
                             hid, self.params)

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays):
        for k, arr in arrays.items():
            self.params[k].data[...] = arr

    def shapes(self):
        return {k: v.data.shape for k, v in self.params.items()}

    # -- copy sources ----------------------------------------------------
    def copy_sources(self, ex: Example) -> list[str]:
        raise NotImplementedError

    # -- decoder ---------------------------------------------------------
    def decoder_step(self, nt, prev, par, states, parent_h, train):
        """One decoder LSTM step; returns new per-layer states and s_t."""
        c = self.config
        x = T.concat([T.embedding_lookup(self.params["N"], nt),
                      T.embedding_lookup(self.params["A"], prev),
                      T.embedding_lookup(self.params["A"], par), parent_h])
        new_states = []
        for layer in range(c.layers):
            if layer > 0:
                x = T.dropout(x, c.dropout_p, train, self.rng)
            st = T.lstm_cell(x, states[layer], self.params[f"dec_l{layer}_W"],
                             self.params[f"dec_l{layer}_b"])
            new_states.append(st)
            x = T.slice_cols(st, 0, c.H)
        return new_states, x

    def context(self, enc: Encoded, s, train):
        """Return (c_t, copy weights over sources, attention dict)."""
        raise NotImplementedError

    def output_distribution(self, ctx, nt, copy_weights, has_copy):
        """Log-probabilities of generating each output rule (lhs-masked) and
        the copy switch probability per row.

        Returns ``(logp_gen (B, V), copy_prob (B,))``; ``copy_prob`` is zero
        for rows whose nonterminal is not an identifier nonterminal.
        """
        scores = T.matmul(ctx, _transpose(self.params["R"]))
        logp = T.log_softmax(scores, self.allowed[nt])
        gate = self.nt_is_ident[nt] & has_copy
        if self.config.use_copy and gate.any():
            copy = T.mul(T.sigmoid(T.matmul(ctx, self.params["b_copy"])),
                         T.const(gate.astype(T.DTYPE)[:, None]))
            copy = _flatten(copy)
        else:
            copy = T.const(np.zeros(len(nt), dtype=T.DTYPE))
        return logp, copy

    # -- training loss ---------------------------------------------------
    def targets(self, examples) -> DecodeTargets:
        g, v = self.grammar, self.vocab
        B = len(examples)
        Tn = max(len(ex.target) for ex in examples)
        arr = {k: np.zeros((B, Tn), dtype=np.int64) for k in ("nt", "prev", "par", "par_step", "gold")}
        label = np.full((B, Tn), -1, dtype=np.int64)
        flt = {k: np.zeros((B, Tn), dtype=T.DTYPE) for k in ("ident", "gen_ok", "mask")}
        for b, ex in enumerate(examples):
            first = {}
            for j, s in enumerate(self.copy_sources(ex)):
                first.setdefault(s, j)
            rules = [g.rules[st.rule] for st in ex.target.steps]
            for t, (st, rule) in enumerate(zip(ex.target.steps, rules)):
                arr["nt"][b, t] = v.nt_id(rule.lhs)
                arr["prev"][b, t] = PREV_SENTINEL if t == 0 else v.prev_id(rules[t - 1])
                arr["par"][b, t] = PREV_SENTINEL if st.parent < 0 else v.prev_id(rules[st.parent])
                arr["par_step"][b, t] = st.parent + 1
                gold = v.rule_id(rule)
                arr["gold"][b, t] = gold
                flt["mask"][b, t] = 1.0
                flt["gen_ok"][b, t] = 1.0
                if rule.lhs in g.identifier_nts:
                    flt["ident"][b, t] = 1.0
                    if rule.kind == G.IDENTIFIER_TERMINAL and self.config.use_copy:
                        lab = first.get(G.terminal_text(rule.rhs[0]), -1)
                        label[b, t] = lab
                        if lab >= 0 and gold == UNK:
                            flt["gen_ok"][b, t] = 0.0
            for t in range(len(rules), Tn):
                arr["nt"][b, t] = NT_SENTINEL
                arr["prev"][b, t] = PREV_SENTINEL
                arr["par"][b, t] = PREV_SENTINEL
        return DecodeTargets(label=label, **arr, **flt)

    def loss(self, examples, train=True):
        """Summed negative log-likelihood of the gold derivations, as a scalar Tensor."""
        enc = self.encode(examples, train)
        tg = self.targets(examples)
        B, Tn = tg.nt.shape
        states = list(enc.init)
        history = [T.slice_cols(enc.init[-1], 0, self.config.H)]
        has_copy = enc.copy_valid.shape[1] > 0
        has_copy_rows = (np.asarray([len(s) > 0 for s in enc.copy_strings]))
        total = None
        for t in range(Tn):
            parent_h = T.pick_rows(history, tg.par_step[:, t])
            states, s = self.decoder_step(tg.nt[:, t], tg.prev[:, t], tg.par[:, t], states,
                                          parent_h, train)
            history.append(s)
            ctx, copy_w, _ = self.context(enc, s, train)
            ctx = T.dropout(ctx, self.config.dropout_p, train, self.rng)
            logp, copy = self.output_distribution(ctx, tg.nt[:, t], copy_w, has_copy_rows)
            pg = T.exp(T.gather_cols(logp, tg.gold[:, t]))
            ident = tg.ident[:, t]
            mask = tg.mask[:, t]
            if has_copy and copy_w is not None and self.config.use_copy:
                lab = tg.label[:, t]
                has_lab = (lab >= 0).astype(T.DTYPE)
                bl = T.mul(T.gather_cols(copy_w, np.maximum(lab, 0)), T.const(has_lab))
                gen_part = T.mul(T.mul(T.sub(T.const(1.0), copy), pg), T.const(tg.gen_ok[:, t]))
                p_ident = T.add(T.mul(copy, bl), gen_part)
                p = T.add(T.mul(p_ident, T.const(ident)), T.mul(pg, T.const(1.0 - ident)))
            else:
                p = pg
            p = T.add(p, T.const(1.0 - mask))
            step_loss = T.total(T.mul(T.log(p), T.const(-mask)))
            total = step_loss if total is None else T.add(total, step_loss)
        return total

    # -- inference hooks -------------------------------------------------
    def init_decoder(self, ex: Example):
        with T.no_grad():
            return self.encode([ex], train=False)

    def step_logprobs(self, enc: Encoded, nt, prev, par, states, parent_h):
        """Inference step for K rows.

        Returns new states, s_t (K, H), generation log-probs (K, V) and copy
        log-probs (K, S) (``None`` when there is nothing to copy).
        """
        with T.no_grad():
            states, s = self.decoder_step(nt, prev, par, states, T.const(parent_h), False)
            ctx, copy_w, _ = self.context(enc, s, False)
            has_copy_rows = np.asarray([len(x) > 0 for x in enc.copy_strings])
            logp, copy = self.output_distribution(ctx, nt, copy_w, has_copy_rows)
            lg = logp.data.copy()
            cp = copy.data
            ident = self.nt_is_ident[nt]
            with np.errstate(divide="ignore"):
                lg[ident] += np.log1p(-cp[ident])[:, None]
                lc = None
                if copy_w is not None and enc.copy_valid.shape[1] > 0 and self.config.use_copy:
                    lc = np.log(cp)[:, None] + np.log(copy_w.data)
                    lc = np.where(enc.copy_valid & ident[:, None], lc, -np.inf)
        return states, s.data, lg, lc


def _transpose(t):
    data = t.data.T

    def bw(g):
        T._acc(t, g.T)
    return T._make(data, (t,), bw)


def _flatten(t):
    data = t.data.reshape(-1)

    def bw(g):
        T._acc(t, g.reshape(t.data.shape))
    return T._make(data, (t,), bw)


class ContextModel(GrammarDecoderModel):
    """NL + class environment encoder with two-step attention."""

    def _init_encoder_params(self):
        c, p, rng = self.config, self.params, self.rng
        H = c.H
        v = self.vocab
        p["I"] = T.parameter(rng.normal(0, 0.1, (len(v.identifier), H)), "I")
        p["T"] = T.parameter(rng.normal(0, 0.1, (len(v.type), H)), "T")
        p["F"] = T.parameter(T.glorot(rng, H, H), "F")
        p["G"] = T.parameter(T.glorot(rng, H, H), "G")
        self._bilstm_params("nl", H)
        self._bilstm_params("name", H)
        self._bilstm_params("pair", H)

    def visible_env(self, ex: Example):
        c = self.config
        variables = list(ex.variables) if c.use_variables else []
        methods = list(ex.methods) if c.use_methods else []
        return variables, methods

    def copy_sources(self, ex: Example) -> list[str]:
        variables, methods = self.visible_env(ex)
        return ([t for _, t in variables] + [n for n, _ in variables]
                + [r for _, r in methods] + [n for n, _ in methods])

    def encode_nl(self, nl_batch, train):
        c, v = self.config, self.vocab
        B = len(nl_batch)
        Z = max(1, max(len(q) for q in nl_batch))
        ids = np.zeros((B, Z), dtype=np.int64)
        mask = np.zeros((B, Z), dtype=T.DTYPE)
        for b, q in enumerate(nl_batch):
            if not q:
                raise ValueError("empty NL input")
            ids[b, :len(q)] = [v.ident_id(w) for w in q]
            mask[b, :len(q)] = 1.0
        emb = T.embedding_lookup(self.params["I"], ids)
        xs = [_col(emb, t) for t in range(Z)]
        outs, info = bilstm(self.params, "nl", xs, mask, c.layers, c.dropout_p, train, self.rng)
        mem = T.stack(outs, axis=1)
        hid = c.H // 2
        init = [_pack(li["fwd_last"], li["bwd_at_last"], hid) for li in info]
        return mem, mask, init

    def encode_env(self, envs, train):
        """Slot states for a batch of (variables, methods) environments."""
        c, v = self.config, self.vocab
        names, types, owners = [], [], []
        for b, (variables, methods) in enumerate(envs):
            for name, typ in list(variables) + list(methods):
                names.append(name)
                types.append(typ)
        B = len(envs)
        sizes = [2 * (len(vs) + len(ms)) for vs, ms in envs]
        S = max(sizes) if sizes else 0
        env_mask = np.zeros((B, S), dtype=T.DTYPE)
        if not names:
            return None, env_mask
        P = len(names)
        pieces = [[v.ident_id(w) for w in name_pieces(n, c.use_camel_encoding)] for n in names]
        K = max(len(x) for x in pieces)
        ids = np.zeros((P, K), dtype=np.int64)
        pmask = np.zeros((P, K), dtype=T.DTYPE)
        for i, x in enumerate(pieces):
            ids[i, :len(x)] = x
            pmask[i, :len(x)] = 1.0
        emb = T.embedding_lookup(self.params["I"], ids)
        _, info = bilstm(self.params, "name", [_col(emb, k) for k in range(K)], pmask, c.layers,
                         c.dropout_p, train, self.rng)
        hid = c.H // 2
        top = info[-1]
        name_vec = T.concat([T.slice_cols(top["fwd_last"], 0, hid), T.slice_cols(top["bwd_final"], 0, hid)])
        type_vec = T.embedding_lookup(self.params["T"], np.array([v.type_id(t) for t in types]))
        outs, _ = bilstm(self.params, "pair", [type_vec, name_vec], np.ones((P, 2)), c.layers,
                         c.dropout_p, train, self.rng)
        # rows: 0..P-1 type states, P..2P-1 name states, 2P zero padding
        table = T.concat([outs[0], outs[1], T.const(np.zeros((1, c.H), dtype=T.DTYPE))], axis=0)
        idx = np.full((B, S), 2 * P, dtype=np.int64)
        k = 0
        for b, (variables, methods) in enumerate(envs):
            nv, nm = len(variables), len(methods)
            vi = list(range(k, k + nv))
            mi = list(range(k + nv, k + nv + nm))
            order = vi + [P + i for i in vi] + mi + [P + i for i in mi]
            idx[b, :len(order)] = order
            env_mask[b, :len(order)] = 1.0
            k += nv + nm
        return T.embedding_lookup(table, idx), env_mask

    def encode(self, examples, train):
        mem, mem_mask, init = self.encode_nl([ex.nl for ex in examples], train)
        envs = [self.visible_env(ex) for ex in examples]
        env, env_mask = self.encode_env(envs, train)
        strings = [self.copy_sources(ex) for ex in examples]
        S = env_mask.shape[1]
        valid = np.zeros((len(examples), S), dtype=bool)
        for b, s in enumerate(strings):
            for j, x in enumerate(s):
                valid[b, j] = is_identifier(x)
        return Encoded(mem, mem_mask, env, env_mask, init, valid, strings)

    def attend(self, enc: Encoded, s):
        """alpha over NL, z_t, beta over environment slots, e_t."""
        H = self.config.H
        alpha = T.softmax(T.bdot(enc.mem, T.matmul(s, self.params["F"])), mask=enc.mem_mask)
        z = T.wsum(alpha, enc.mem)
        if enc.env is None:
            return alpha, z, None, T.const(np.zeros((s.data.shape[0], H), dtype=T.DTYPE))
        query = z if self.config.use_two_step_attention else s
        beta = T.softmax(T.bdot(enc.env, T.matmul(query, self.params["G"])), mask=enc.env_mask)
        e = T.wsum(beta, enc.env)
        return alpha, z, beta, e

    def context(self, enc, s, train):
        alpha, z, beta, e = self.attend(enc, s)
        ctx = T.tanh(T.matmul(T.concat([s, z, e]), self.params["W_c"]))
        return ctx, beta, {"alpha": alpha, "z": z, "beta": beta, "e": e}


def _col(t, k):
    """t[:, k, :] of a (B, K, H) tensor."""
    data = t.data[:, k, :]

    def bw(g):
        full = np.zeros_like(t.data)
        full[:, k, :] = g
        T._acc(t, full)
    return T._make(data, (t,), bw)


# ---------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    dev_exact: float | None = None
    train_exact: float | None = None


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_dev: float | None = None
    diverged: bool = False


def batches(examples, size, rng):
    order = rng.permutation(len(examples))
    for i in range(0, len(order), size):
        yield [examples[j] for j in order[i:i + size]]


def train(model, corpus, dev=None, config: ModelConfig | None = None, epochs=None,
          eval_fn=None, target_train_exact=None, eval_every=1, callback=None) -> TrainResult:
    """Mini-batch Adam training.

    After each epoch the dev exact match (``eval_fn(model, dev)``) is checked;
    if it does not improve the learning rate is multiplied by ``lr_decay``.
    The best-dev parameters are restored at the end.  Without ``dev`` no
    decay happens.  ``target_train_exact`` stops early once the training
    exact match (checked every ``eval_every`` epochs) reaches it.
    """
    config = config or model.config
    if not corpus:
        raise ValueError("training corpus is empty")
    epochs = config.epochs if epochs is None else epochs
    rng = np.random.default_rng(config.seed)
    opt = T.Adam(model.parameters(), lr=config.lr, clip_norm=config.clip_norm)
    result = TrainResult()
    best_state = model.state_dict()
    last_good = best_state
    if eval_fn is None and hasattr(model, "exact_match"):
        eval_fn = lambda m, data: m.exact_match(data)  # noqa: E731
    elif eval_fn is None:
        from .inference import exact_match_rate
        eval_fn = exact_match_rate
    for epoch in range(epochs):
        total = 0.0
        for batch in batches(corpus, config.batch_size, rng):
            T.zero_grads(opt.params)
            loss = model.loss(batch, train=True)
            value = float(loss.data)
            if not math.isfinite(value):
                log.error("non-finite loss at epoch %d; restoring last good parameters", epoch)
                model.load_state_dict(last_good)
                result.diverged = True
                return result
            scaled = T.mul(loss, T.const(1.0 / len(batch)))
            T.backward(scaled)
            try:
                opt.step()
            except T.NonFiniteError:
                model.load_state_dict(last_good)
                result.diverged = True
                return result
            total += value
        last_good = model.state_dict()
        entry = EpochLog(epoch, total / len(corpus), opt.lr)
        if dev:
            entry.dev_exact = eval_fn(model, dev)
            if result.best_dev is None or entry.dev_exact > result.best_dev:
                result.best_dev = entry.dev_exact
                best_state = model.state_dict()
            else:
                opt.lr *= config.lr_decay
        if target_train_exact is not None and (epoch + 1) % eval_every == 0:
            entry.train_exact = eval_fn(model, corpus)
        result.log.append(entry)
        log.info("epoch %d loss %.4f lr %.2e dev %s train %s", epoch, entry.loss, entry.lr,
                 entry.dev_exact, entry.train_exact)
        if callback:
            callback(entry)
        if entry.train_exact is not None and entry.train_exact >= target_train_exact:
            break
    if dev:
        model.load_state_dict(best_state)
    return result


def build_model(config, vocab, grammar, seed=None) -> ContextModel:
    return ContextModel(config, vocab, grammar, seed)


def clone(model):
    return _copy.deepcopy(model)
