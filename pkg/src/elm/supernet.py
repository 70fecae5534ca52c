"""Elastic weight-sharing supernet and final-model instantiation.

Per layer the net holds six candidate blocks: {Standard, Bottleneck} x
{no sharing, shared query/value, shared key/value}. A forward pass routes
through exactly one candidate per layer (the genome's choice), so
gradients touch only chosen blocks plus the shared embeddings, final
norm and output head. Blocks never share weights across layers or
candidates; within a block a shared projection pair is one tensor used
twice (one weight and one bias).

Layout is pre-norm residual: x + attn(norm(x)), then x + ffn(norm(x)).
Bottleneck candidates wrap both sublayers in entry/exit projections
between trunk width C and inner width c, with the residual in C-space
and a norm on the exit projection before the residual add.

FFN dimensions are elastic: grow_ffn extends w1/b1/w2 in place,
preserving trained coordinates exactly and drawing new rows/columns from
N(0, 0.02^2) with zero new biases.

Checkpoint tensor names: "emb.tok", "emb.pos",
"layer.<i>.cand.<j>.<tensor>", "final_norm.*", "head.out"/"head.bias".
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ContractError
from .genome import (CANDIDATES, KIND_BOTTLENECK, KIND_STANDARD, SHARE_KV,
                     SHARE_NONE, SHARE_QV, ArchGenome, BlockChoice, ModelDims)

INIT_STD = 0.02


@dataclass
class ActivationTrace:
    """Per-layer activations captured during a traced forward pass.

    attention: [B,H,N,N] post-softmax maps (autograd Tensors, so they can
    carry distillation gradients); head_outputs: per head [(B·N), W/H]
    plain arrays for similarity analysis; ffn_hidden: [(B·N), ffn_dim]
    post-activation hidden states; layer_out: [B,N,C] block outputs.
    """

    attention: list = field(default_factory=list)
    head_outputs: list = field(default_factory=list)
    ffn_hidden: list = field(default_factory=list)
    layer_out: list = field(default_factory=list)
    logits: object = None


def _attn_param_specs(width: int, share: str):
    if share == SHARE_NONE:
        qkv = [("attn.wq", (width, width), "w"), ("attn.bq", (width,), "b"),
               ("attn.wk", (width, width), "w"), ("attn.bk", (width,), "b"),
               ("attn.wv", (width, width), "w"), ("attn.bv", (width,), "b")]
    elif share == SHARE_QV:
        qkv = [("attn.wqv", (width, width), "w"), ("attn.bqv", (width,), "b"),
               ("attn.wk", (width, width), "w"), ("attn.bk", (width,), "b")]
    elif share == SHARE_KV:
        qkv = [("attn.wq", (width, width), "w"), ("attn.bq", (width,), "b"),
               ("attn.wkv", (width, width), "w"), ("attn.bkv", (width,), "b")]
    else:
        raise ContractError(f"unknown share mode {share!r}")
    return qkv + [("attn.wo", (width, width), "w"), ("attn.bo", (width,), "b")]


def block_param_specs(choice: BlockChoice, ffn_dim: int, dims: ModelDims):
    """(suffix, shape, init kind) for every tensor of one block, in a
    fixed order so initialization is reproducible."""
    c_out = dims.hidden
    w = dims.attention_width(choice)
    specs = []
    if choice.kind == KIND_BOTTLENECK:
        specs += [("entry.w", (c_out, w), "w"), ("entry.b", (w,), "b"),
                  ("ln_entry.g", (w,), "g"), ("ln_entry.b", (w,), "b")]
    specs += [("ln_attn.g", (w,), "g"), ("ln_attn.b", (w,), "b")]
    specs += _attn_param_specs(w, choice.share)
    specs += [("ln_ffn.g", (w,), "g"), ("ln_ffn.b", (w,), "b"),
              ("ffn.w1", (w, ffn_dim), "w"), ("ffn.b1", (ffn_dim,), "b"),
              ("ffn.w2", (ffn_dim, w), "w"), ("ffn.b2", (w,), "b")]
    if choice.kind == KIND_BOTTLENECK:
        specs += [("exit.w", (w, c_out), "w"), ("exit.b", (c_out,), "b"),
                  ("ln_exit.g", (c_out,), "g"), ("ln_exit.b", (c_out,), "b")]
    return specs


def _init_array(rng, shape, kind: str, dtype, zeros_init: bool):
    if kind == "g":
        return np.ones(shape, dtype=dtype)
    if kind == "b" or zeros_init:
        return np.zeros(shape, dtype=dtype)
    return rng.normal(0.0, INIT_STD, shape).astype(dtype)


def _causal_bias(n: int, dtype) -> np.ndarray:
    mask = np.triu(np.ones((n, n), dtype=dtype), k=1)
    return mask * np.asarray(-1e9, dtype=dtype)


class _TransformerCore:
    """Forward engine shared by the supernet and instantiated models.

    Subclasses own `params` (name -> Tensor) and supply a per-layer plan:
    (param prefix, BlockChoice, ffn_dim, heads).
    """

    def __init__(self, dims: ModelDims, dtype=np.float32):
        dims.validate()
        self.dims = dims
        self.dtype = np.dtype(dtype)
        self.params: dict = {}

    # -- parameter plumbing

    def _add_param(self, name: str, array: np.ndarray) -> None:
        self.params[name] = ag.tensor(array, dtype=self.dtype)

    def _init_shared(self, rng, zeros_init: bool) -> None:
        d = self.dims
        self._add_param(
            "emb.tok", _init_array(rng, (d.vocab_size, d.hidden), "w",
                                   self.dtype, zeros_init))
        self._add_param(
            "emb.pos", _init_array(rng, (d.n_max, d.hidden), "w",
                                   self.dtype, zeros_init))
        self._add_param("final_norm.g", np.ones(d.hidden, dtype=self.dtype))
        self._add_param("final_norm.b", np.zeros(d.hidden, dtype=self.dtype))
        if not d.tie_head:
            self._add_param(
                "head.out", _init_array(rng, (d.hidden, d.vocab_size), "w",
                                        self.dtype, zeros_init))
        self._add_param("head.bias", np.zeros(d.vocab_size, dtype=self.dtype))

    def _init_block(self, prefix: str, choice: BlockChoice, ffn_dim: int,
                    rng, zeros_init: bool) -> None:
        for suffix, shape, kind in block_param_specs(choice, ffn_dim, self.dims):
            self._add_param(f"{prefix}.{suffix}",
                            _init_array(rng, shape, kind, self.dtype, zeros_init))

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward

    def _attention(self, p, x, heads: int, causal_bias, trace: ActivationTrace):
        b, n, w = x.shape
        dh = w // heads
        if p("wq") is not None:
            q_w, q_b = p("wq"), p("bq")
        else:
            q_w, q_b = p("wqv"), p("bqv")
        if p("wk") is not None:
            k_w, k_b = p("wk"), p("bk")
        else:
            k_w, k_b = p("wkv"), p("bkv")
        if p("wv") is not None:
            v_w, v_b = p("wv"), p("bv")
        elif p("wqv") is not None:
            v_w, v_b = p("wqv"), p("bqv")
        else:
            v_w, v_b = p("wkv"), p("bkv")

        def split(t):
            return ag.transpose(ag.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

        q = split(ag.add(ag.matmul(x, q_w), q_b))
        k = split(ag.add(ag.matmul(x, k_w), k_b))
        v = split(ag.add(ag.matmul(x, v_w), v_b))
        scores = ag.scale(ag.matmul(q, ag.swap_last(k)), 1.0 / math.sqrt(dh))
        if causal_bias is not None:
            scores = ag.add(scores, causal_bias)
        att = ag.softmax_rows(scores)
        ctx = ag.matmul(att, v)  # [B,H,N,dh]
        if trace is not None:
            trace.attention.append(att)
            trace.head_outputs.append(
                [np.ascontiguousarray(
                    ctx.data[:, h].reshape(b * n, dh)) for h in range(heads)])
        merged = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, n, w))
        return ag.add(ag.matmul(merged, p("wo")), p("bo"))

    def _block_forward(self, prefix: str, choice: BlockChoice, heads: int,
                       x, causal_bias, trace):
        P = self.params

        def p(suffix):
            return P.get(f"{prefix}.attn.{suffix}")

        def g(suffix):
            return P[f"{prefix}.{suffix}"]

        b, n, _ = x.shape
        if choice.kind == KIND_BOTTLENECK:
            h = ag.layer_norm(
                ag.add(ag.matmul(x, g("entry.w")), g("entry.b")),
                g("ln_entry.g"), g("ln_entry.b"))
        else:
            h = x
        a_in = ag.layer_norm(h, g("ln_attn.g"), g("ln_attn.b"))
        h = ag.add(h, self._attention(p, a_in, heads, causal_bias, trace))
        f_in = ag.layer_norm(h, g("ln_ffn.g"), g("ln_ffn.b"))
        hid = ag.gelu(ag.add(ag.matmul(f_in, g("ffn.w1")), g("ffn.b1")))
        h = ag.add(h, ag.add(ag.matmul(hid, g("ffn.w2")), g("ffn.b2")))
        if choice.kind == KIND_BOTTLENECK:
            out = ag.add(x, ag.layer_norm(
                ag.add(ag.matmul(h, g("exit.w")), g("exit.b")),
                g("ln_exit.g"), g("ln_exit.b")))
        else:
            out = h
        if trace is not None:
            d = hid.shape[-1]
            trace.ffn_hidden.append(ag.reshape(hid, (b * n, d)))
            trace.layer_out.append(out)
        return out

    def _forward(self, plan, input_ids: np.ndarray, causal: bool, trace_on: bool):
        ids = np.asarray(input_ids)
        if ids.ndim != 2:
            raise ContractError(f"input_ids must be [B, N], got {ids.shape}")
        b, n = ids.shape
        if n > self.dims.n_max:
            raise ContractError(
                f"sequence length {n} exceeds positional table {self.dims.n_max}"
            )
        trace = ActivationTrace() if trace_on else None
        tok = ag.embedding_lookup(self.params["emb.tok"], ids)
        pos = ag.take_rows(self.params["emb.pos"], np.arange(n))
        x = ag.add(tok, pos)
        causal_bias = ag.constant(_causal_bias(n, self.dtype)) if causal else None
        for prefix, choice, _ffn, heads in plan:
            x = self._block_forward(prefix, choice, heads, x, causal_bias, trace)
        x = ag.layer_norm(x, self.params["final_norm.g"],
                          self.params["final_norm.b"])
        if self.dims.tie_head:
            logits = ag.add(
                ag.matmul(x, ag.transpose(self.params["emb.tok"], (1, 0))),
                self.params["head.bias"])
        else:
            logits = ag.add(ag.matmul(x, self.params["head.out"]),
                            self.params["head.bias"])
        if trace is not None:
            trace.logits = logits
        return logits, trace


class ElasticSupernet(_TransformerCore):
    """All candidate blocks of every layer, with elastic FFN dimensions.

    `candidates` restricts which of the six blocks are built per layer
    (the no-weight-sharing ablation builds only indices 0 and 3).
    """

    def __init__(self, dims: ModelDims, rng, dtype=np.float32,
                 zeros_init: bool = False, candidates=None):
        super().__init__(dims, dtype)
        self.frozen = False
        self.ffn_dims = {}
        if candidates is None:
            candidates = tuple(range(len(CANDIDATES)))
        self.candidates = tuple(sorted(candidates))
        if not self.candidates or any(
                not 0 <= j < len(CANDIDATES) for j in self.candidates):
            raise ContractError(
                f"candidate set {candidates} outside 0..{len(CANDIDATES) - 1}"
            )
        self._init_shared(rng, zeros_init)
        for l in range(dims.n_layers):
            for j in self.candidates:
                self.ffn_dims[(l, j)] = dims.ffn_init
                self._init_block(f"layer.{l}.cand.{j}", CANDIDATES[j],
                                 dims.ffn_init, rng, zeros_init)

    def _plan_for(self, genome: ArchGenome):
        genome.validate(self.dims)
        plan = []
        for l in range(self.dims.n_layers):
            j = genome.choices[l]
            if (l, j) not in self.ffn_dims:
                raise ContractError(
                    f"layer {l}: candidate {j} not built in this supernet "
                    f"(available: {self.candidates})"
                )
            if genome.ffn_dims[l] != self.ffn_dims[(l, j)]:
                raise ContractError(
                    f"layer {l}: genome ffn_dim {genome.ffn_dims[l]} does not "
                    f"match supernet state {self.ffn_dims[(l, j)]}"
                )
            # head counts take effect only at final instantiation; the
            # supernet always runs its configured default
            plan.append((f"layer.{l}.cand.{j}", genome.choice(l),
                         genome.ffn_dims[l], self.dims.heads))
        return plan

    def forward_path(self, genome: ArchGenome, input_ids, causal: bool = False,
                     trace: bool = False):
        """Route one batch through the genome's blocks only."""
        return self._forward(self._plan_for(genome), input_ids, causal, trace)

    def current_ffn_table(self) -> dict:
        return dict(self.ffn_dims)

    def genome_with_current_dims(self, choices, heads=None) -> ArchGenome:
        """Attach the net's live ffn dims to a choice vector."""
        choices = tuple(choices)
        ffn = tuple(self.ffn_dims[(l, j)] for l, j in enumerate(choices))
        if heads is None:
            heads = tuple(self.dims.heads for _ in choices)
        return ArchGenome(choices, ffn, tuple(heads))

    def grow_ffn(self, layer: int, cand: int, new_dim: int, rng):
        """Extend one block's FFN from its current dim to new_dim.

        Returns the list of renamed-in-place tensor names on success, or
        None when new_dim exceeds ffn_max (refusal; caller skips block).
        Existing coordinates are preserved bitwise.
        """
        if self.frozen:
            raise ContractError("cannot grow a frozen snapshot")
        key = (layer, cand)
        if key not in self.ffn_dims:
            raise ContractError(f"no block at layer {layer} candidate {cand}")
        old = self.ffn_dims[key]
        if new_dim != old + self.dims.ffn_step:
            raise ContractError(
                f"growth must be one step: {old} -> {new_dim} "
                f"(step {self.dims.ffn_step})"
            )
        if new_dim > self.dims.ffn_max:
            return None
        prefix = f"layer.{layer}.cand.{cand}"
        w1 = self.params[f"{prefix}.ffn.w1"].data
        b1 = self.params[f"{prefix}.ffn.b1"].data
        w2 = self.params[f"{prefix}.ffn.w2"].data
        step = new_dim - old
        w1_new = np.concatenate(
            [w1, rng.normal(0.0, INIT_STD, (w1.shape[0], step)).astype(self.dtype)],
            axis=1)
        b1_new = np.concatenate([b1, np.zeros(step, dtype=self.dtype)])
        w2_new = np.concatenate(
            [w2, rng.normal(0.0, INIT_STD, (step, w2.shape[1])).astype(self.dtype)],
            axis=0)
        names = [f"{prefix}.ffn.w1", f"{prefix}.ffn.b1", f"{prefix}.ffn.w2"]
        for name, arr in zip(names, (w1_new, b1_new, w2_new)):
            self.params[name] = ag.tensor(arr, dtype=self.dtype)
        self.ffn_dims[key] = new_dim
        return names

    def snapshot(self) -> "ElasticSupernet":
        """Read-only copy for concurrent fitness evaluation."""
        dup = object.__new__(ElasticSupernet)
        _TransformerCore.__init__(dup, self.dims, self.dtype)
        dup.frozen = True
        dup.candidates = self.candidates
        dup.ffn_dims = dict(self.ffn_dims)
        dup.params = {
            name: ag.constant(t.data.copy()) for name, t in self.params.items()
        }
        return dup


class FinalModel(_TransformerCore):
    """A standalone model for one genome, freshly initialized."""

    def __init__(self, dims: ModelDims, genome: ArchGenome, rng,
                 dtype=np.float32, zeros_init: bool = False):
        super().__init__(dims, dtype)
        genome.validate(dims)
        self.genome = genome
        self._init_shared(rng, zeros_init)
        self._plan = []
        for l in range(genome.n_layers):
            j = genome.choices[l]
            prefix = f"layer.{l}.cand.{j}"
            self._init_block(prefix, genome.choice(l), genome.ffn_dims[l],
                             rng, zeros_init)
            self._plan.append((prefix, genome.choice(l), genome.ffn_dims[l],
                               genome.heads[l]))

    def forward(self, input_ids, causal: bool = False, trace: bool = False):
        return self._forward(self._plan, input_ids, causal, trace)


def instantiate_final(net: ElasticSupernet, genome: ArchGenome, rng,
                      dtype=None, zeros_init: bool = False) -> FinalModel:
    """Fresh model for the searched genome (retrained, not weight-inherited)."""
    return FinalModel(net.dims, genome, rng,
                      dtype=dtype or net.dtype, zeros_init=zeros_init)
