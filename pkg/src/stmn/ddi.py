"""Dependency-driven interaction: graph attention with typed edge features.

Nodes are the merged dependency graph's words (plus ROOT); each edge carries a
feature vector seeded from its relation id.  Attention logits between a node
and an in-neighbor are the scaled query-key dot product gated by the edge
feature; the unnormalized per-edge score vector also drives the edge update.
Four block structures are supported: graph attention alone, self-attention
before or after it, or both in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor, concat, gather_rows, gelu, layer_norm, relu, reshape,
    segment_softmax, segment_sum, softmax_axis, tensor_sum, uniform_init,
)
from .language import effective_relation_count

STRUCTURES = ("GA", "SA_GA", "GA_SA", "GA_PAR_SA")


@dataclass
class DdiState:
    h: Tensor   # (N_w+1, D) node features
    e: Tensor   # (E, D) edge features aligned with the graph's edge list


class DdiLayerParams:
    """Projections for one graph-transformer layer.

    ``norm_sa`` is only consumed by the sequential structures, which give the
    self-attention block its own residual+norm.
    """

    def __init__(self, d, d_hidden=None, structure="GA_PAR_SA", rng=None):
        if structure not in STRUCTURES:
            raise ValueError(f"unknown DDI structure {structure!r}")
        rng = rng or np.random.default_rng(0)
        d_hidden = d_hidden or 4 * d
        self.d = d
        self.d_hidden = d_hidden
        self.structure = structure

        def mat(rows, cols):
            return Tensor(uniform_init(rng, (rows, cols)), requires_grad=True)

        def norm_pair():
            return (Tensor(np.ones((1, d)), requires_grad=True),
                    Tensor(np.zeros((1, d)), requires_grad=True))

        self.q_h, self.k_h, self.v_h = mat(d, d), mat(d, d), mat(d, d)
        self.e_e, self.o_h, self.o_e = mat(d, d), mat(d, d), mat(d, d)
        self.sa_q, self.sa_k, self.sa_v, self.sa_o = (
            mat(d, d), mat(d, d), mat(d, d), mat(d, d))
        self.w_h1, self.w_h2 = mat(d, d_hidden), mat(d_hidden, d)
        self.w_e1, self.w_e2 = mat(d, 2 * d), mat(2 * d, d)
        self.norm_attn = norm_pair()
        self.norm_node_ffn = norm_pair()
        self.norm_edge_attn = norm_pair()
        self.norm_edge_ffn = norm_pair()
        self.norm_sa = norm_pair()

    def parameters(self, prefix):
        named = {
            "q_h": self.q_h, "k_h": self.k_h, "v_h": self.v_h,
            "e_e": self.e_e, "o_h": self.o_h, "o_e": self.o_e,
            "sa_q": self.sa_q, "sa_k": self.sa_k, "sa_v": self.sa_v,
            "sa_o": self.sa_o,
            "w_h1": self.w_h1, "w_h2": self.w_h2,
            "w_e1": self.w_e1, "w_e2": self.w_e2,
        }
        out = {f"{prefix}.{k}": v for k, v in named.items()}
        for name, pair in [("norm_attn", self.norm_attn),
                           ("norm_node_ffn", self.norm_node_ffn),
                           ("norm_edge_attn", self.norm_edge_attn),
                           ("norm_edge_ffn", self.norm_edge_ffn),
                           ("norm_sa", self.norm_sa)]:
            out[f"{prefix}.{name}.gain"] = pair[0]
            out[f"{prefix}.{name}.bias"] = pair[1]
        return out


class EdgeInitParams:
    """Relation-id -> edge feature projection and PE -> node projection."""

    def __init__(self, d, k_pe, rng=None):
        rng = rng or np.random.default_rng(0)
        self.b0 = Tensor(uniform_init(rng, (1, d)), requires_grad=True)
        self.b0_bias = Tensor(np.zeros((1, d)), requires_grad=True)
        self.c0 = Tensor(uniform_init(rng, (k_pe, d)), requires_grad=True)
        self.c0_bias = Tensor(np.zeros((1, d)), requires_grad=True)

    def parameters(self):
        return {"ddi.edge_init.scale": self.b0,
                "ddi.edge_init.bias": self.b0_bias,
                "ddi.pe_proj.weight": self.c0,
                "ddi.pe_proj.bias": self.c0_bias}


def init_ddi_state(word_features, graph, init_params, pe):
    """Seed node and edge features for the first decoding round.

    Node features get the projected positional encodings added once (only at
    the input layer); each edge feature is its scalar relation id through the
    ``b0`` linear map.  Row 0 of ``word_features`` is the ROOT feature.
    """
    n_rel = effective_relation_count(graph)
    rel_ids = np.array([rel for _, _, rel in graph.edges], dtype=np.float64)
    if rel_ids.size and (rel_ids.min() < 0 or rel_ids.max() >= n_rel):
        raise ValueError(
            f"edge relation id out of range for vocabulary of size {n_rel}")
    pe_nodes = Tensor(pe) @ init_params.c0 + init_params.c0_bias
    h = word_features + pe_nodes
    rel_col = Tensor(rel_ids.reshape(-1, 1))
    e = rel_col @ init_params.b0 + init_params.b0_bias
    return DdiState(h=h, e=e)


def reseed_nodes(state, word_features):
    """Thread edge features into the next round; nodes come from SWA output."""
    return DdiState(h=word_features, e=state.e)


def graph_attention(state, graph, params):
    """One pass of edge-gated attention over in-neighborhoods.

    Returns (node_update, edge_scores, edge_update): the O_h-projected
    aggregation per node, the unnormalized per-edge score vectors, and their
    O_e projection.  Nodes with no in-edges receive a zero update (the empty
    sum convention).
    """
    h, e = state.h, state.e
    n = h.data.shape[0]
    d = params.d
    src, dst, _ = graph.in_neighborhoods()

    q = h @ params.q_h
    k = h @ params.k_h
    v = h @ params.v_h
    ee = e @ params.e_e

    q_e = gather_rows(q, dst)
    k_e = gather_rows(k, src)
    scalar = tensor_sum(q_e * k_e, axis=1, keepdims=True) * (1.0 / math.sqrt(d))
    edge_scores = scalar * ee                          # (E, D) pre-softmax
    logits = tensor_sum(edge_scores, axis=1)           # (E,)
    weights = segment_softmax(logits, dst, n)
    weighted = reshape(weights, (-1, 1)) * gather_rows(v, src)
    node_update = segment_sum(weighted, dst, n) @ params.o_h
    edge_update = edge_scores @ params.o_e
    return node_update, edge_scores, edge_update


def self_attention(h, params):
    """Full (dense) single-head self-attention over all nodes."""
    d = params.d
    logits = (h @ params.sa_q) @ (h @ params.sa_k).t() * (1.0 / math.sqrt(d))
    attn = softmax_axis(logits, axis=1)
    return (attn @ (h @ params.sa_v)) @ params.sa_o


def _norm(x, pair):
    return layer_norm(x, pair[0], pair[1])


def ddi_layer(state, graph, params):
    """One full DDI block: attention variant, then node and edge FFNs."""
    h, e = state.h, state.e

    if params.structure == "GA":
        ga, scores, edge_up = graph_attention(state, graph, params)
        h_mid = _norm(h + ga, params.norm_attn)
    elif params.structure == "GA_PAR_SA":
        ga, scores, edge_up = graph_attention(state, graph, params)
        h_mid = _norm(h + self_attention(h, params) + ga, params.norm_attn)
    elif params.structure == "SA_GA":
        t = _norm(h + self_attention(h, params), params.norm_sa)
        ga, scores, edge_up = graph_attention(DdiState(h=t, e=e), graph, params)
        h_mid = _norm(t + ga, params.norm_attn)
    else:  # GA_SA
        ga, scores, edge_up = graph_attention(state, graph, params)
        t = _norm(h + ga, params.norm_attn)
        h_mid = _norm(t + self_attention(t, params), params.norm_sa)

    h_ffn = gelu(h_mid @ params.w_h1) @ params.w_h2
    h_out = _norm(h_mid + h_ffn, params.norm_node_ffn)

    e_mid = _norm(e + edge_up, params.norm_edge_attn)
    e_ffn = relu(e_mid @ params.w_e1) @ params.w_e2
    e_out = _norm(e_mid + e_ffn, params.norm_edge_ffn)
    return DdiState(h=h_out, e=e_out)
