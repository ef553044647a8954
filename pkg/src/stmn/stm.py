"""Superpoint-text matching decoder.

The description picks its most relevant superpoints once, then L rounds of
dependency-driven interaction and masked superpoint-word cross-attention
refine the word features.  Response maps (sigmoid word-superpoint similarity)
provide both the next round's attention mask and the final segmentation
kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor, concat, gather_rows, sigmoid, softmax_axis, tensor_mean,
    tensor_sum, uniform_init,
)

KERNEL_STRATEGIES = ("Root", "Avg", "Top1", "CLS")


class RoundParams:
    """Per-round projections: SWA cross-attention plus kernel scoring."""

    def __init__(self, d, rng=None):
        rng = rng or np.random.default_rng(0)

        def mat():
            return Tensor(uniform_init(rng, (d, d)), requires_grad=True)

        self.swa_q, self.swa_k, self.swa_v = mat(), mat(), mat()
        self.sel_q, self.sel_k = mat(), mat()

    def parameters(self, prefix):
        return {f"{prefix}.swa_q": self.swa_q, f"{prefix}.swa_k": self.swa_k,
                f"{prefix}.swa_v": self.swa_v, f"{prefix}.sel_q": self.sel_q,
                f"{prefix}.sel_k": self.sel_k}


class StmParams:
    """Decoder parameters and knobs.

    ``k_rel`` is clamped to the number of superpoints at use time; ``tau``
    thresholds response maps into attention masks; per-round parameters are
    independent (no weight sharing across rounds).
    """

    def __init__(self, c_p, c_t, d, n_rounds=2, k_rel=64, tau=0.5,
                 kernel_strategy="Top1", rng=None):
        if n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if kernel_strategy not in KERNEL_STRATEGIES:
            raise ValueError(f"unknown kernel strategy {kernel_strategy!r}")
        rng = rng or np.random.default_rng(0)
        self.d = d
        self.n_rounds = n_rounds
        self.k_rel = k_rel
        self.tau = tau
        self.kernel_strategy = kernel_strategy
        self.w_s = Tensor(uniform_init(rng, (c_p, d)), requires_grad=True)
        self.w_t = Tensor(uniform_init(rng, (c_t, d)), requires_grad=True)
        self.q_s = Tensor(uniform_init(rng, (d, d)), requires_grad=True)
        self.k_t = Tensor(uniform_init(rng, (c_t, d)), requires_grad=True)
        self.rounds = [RoundParams(d, rng=rng) for _ in range(n_rounds)]
        self.score_w = Tensor(uniform_init(rng, (d, 1)), requires_grad=True)
        self.score_b = Tensor(np.zeros((1, 1)), requires_grad=True)

    def parameters(self):
        out = {"stm.w_s": self.w_s, "stm.w_t": self.w_t,
               "stm.q_s": self.q_s, "stm.k_t": self.k_t,
               "stm.score_w": self.score_w, "stm.score_b": self.score_b}
        for i, rp in enumerate(self.rounds):
            out.update(rp.parameters(f"stm.round{i}"))
        return out


@dataclass
class DecodeState:
    """Everything one refinement round produced."""
    round_index: int
    word_features: Tensor          # (N_w+1, D)
    response_map: Tensor           # (N_w+1, N_s)
    attention_mask: np.ndarray     # (N_w+1, k_rel+1), entries in {0, -inf}
    relevance_scores: Tensor = None
    selected_indices: np.ndarray = None
    visual_scores: Tensor = None
    attention: Tensor = None       # (N_w+1, k_rel+1) cross-attention weights


def project_superpoints(s, w_s):
    """S W_s: plain linear projection of pooled superpoint features."""
    return s @ w_s


def relevance_filter(s_hat, word_embeddings, q_s, k_t, k_rel):
    """Description-guided superpoint sampling.

    The word-superpoint attention is normalized over the superpoint axis, so
    each superpoint's relevance score is the total attention mass it receives
    from the words.  The top-``k_rel`` superpoints (ties to the lower index,
    output sorted ascending) are kept and a global average slot is appended.
    """
    n_s, d = s_hat.data.shape
    if word_embeddings.data.shape[0] < 1:
        raise ValueError("relevance_filter requires a nonempty expression")
    k_rel = min(k_rel, n_s)
    logits = (s_hat @ q_s) @ (word_embeddings @ k_t).t() * (1.0 / math.sqrt(d))
    attn = softmax_axis(logits, axis=0)
    s_r = tensor_sum(attn, axis=1)
    order = np.argsort(-s_r.data, kind="stable")   # ties break to lower index
    indices = np.sort(order[:k_rel])
    top = gather_rows(s_hat, indices)
    global_row = tensor_mean(s_hat, axis=0, keepdims=True)
    s_rel = concat([top, global_row], axis=0)
    return s_rel, s_r, indices


def swa(word_features, s_rel, attn_mask, round_params, return_attention=False):
    """Masked superpoint-word cross-attention (one refinement round).

    ``attn_mask`` rows that are entirely -inf fall back to the unmasked
    logits so the softmax stays well defined.
    """
    d = word_features.data.shape[1]
    mask = np.asarray(attn_mask, dtype=np.float64)
    dead = ~np.isfinite(mask).any(axis=1)
    if dead.any():
        mask = mask.copy()
        mask[dead] = 0.0
    logits = (word_features @ round_params.swa_q) @ \
        (s_rel @ round_params.swa_k).t() * (1.0 / math.sqrt(d))
    attn = softmax_axis(logits, axis=1, mask=mask)
    out = attn @ (s_rel @ round_params.swa_v)
    if return_attention:
        return out, attn
    return out


def response_map(word_features, s_hat):
    """Sigmoid similarity between every word token and every superpoint."""
    return sigmoid(word_features @ s_hat.t())


def mask_from_map(response, indices, tau):
    """Threshold the response map into a {0, -inf} attention mask.

    Column j of the mask reads the response at superpoint ``indices[j]``;
    the final (global) slot is always open.
    """
    m = response.data if isinstance(response, Tensor) else np.asarray(response)
    selected = m[:, indices]
    mask = np.where(selected >= tau, 0.0, -np.inf)
    return np.concatenate([mask, np.zeros((m.shape[0], 1))], axis=1)


def select_kernel(word_features, s_rel, response, strategy, round_params,
                  s_hat, w_t=None, cls_vector=None):
    """Pick the segmentation kernel and its response row.

    Returns (final map (N_s,), kernel_index, visual scores or None,
    kernel embedding).  Top1 scores words by the attention mass they draw
    from the relevant superpoints (softmax over the word axis); ArgMax ties
    break to the lowest index.  Root always uses node 0; Avg pools all word
    rows; CLS projects the description-level embedding.
    """
    d = word_features.data.shape[1]
    if strategy == "Top1":
        logits = (word_features @ round_params.sel_q) @ \
            (s_rel @ round_params.sel_k).t() * (1.0 / math.sqrt(d))
        a_v = softmax_axis(logits, axis=0)
        s_v = tensor_sum(a_v, axis=1)
        kernel_index = int(np.argmax(s_v.data))   # lowest index on ties
        final = gather_rows(response, [kernel_index]).reshape(-1)
        kernel = gather_rows(word_features, [kernel_index])
        return final, kernel_index, s_v, kernel
    if strategy == "Root":
        final = gather_rows(response, [0]).reshape(-1)
        return final, 0, None, gather_rows(word_features, [0])
    if strategy == "Avg":
        kernel = tensor_mean(word_features, axis=0, keepdims=True)
        final = sigmoid(kernel @ s_hat.t()).reshape(-1)
        return final, -1, None, kernel
    if strategy == "CLS":
        if w_t is None or cls_vector is None:
            raise ValueError("CLS strategy needs the text projection and "
                             "description-level embedding")
        kernel = cls_vector @ w_t
        final = sigmoid(kernel @ s_hat.t()).reshape(-1)
        return final, -1, None, kernel
    raise ValueError(f"unknown kernel strategy {strategy!r}")


@dataclass
class StmOutput:
    final_map: Tensor              # (N_s,)
    kernel_index: int
    quality_score: Tensor          # scalar in (0, 1)
    relevance_scores: Tensor       # (N_s,)
    selected_indices: np.ndarray
    rounds: list = field(default_factory=list)   # DecodeState per round


def stm_forward(s_hat, entry_features, raw_word_embeddings, params,
                run_round, cls_vector=None):
    """Run the full decoder.

    ``entry_features`` is the (N_w+1, D) projection of (root || words);
    ``run_round`` is a callable (round_idx, word_features) -> word features
    that applies the interaction stage (DDI or identity for the no-DDI
    ablation).  Relevance filtering happens once; each round then refines
    word features under the previous round's attention mask.
    """
    s_rel, s_r, indices = relevance_filter(
        s_hat, raw_word_embeddings, params.q_s, params.k_t, params.k_rel)
    n_words = entry_features.data.shape[0]
    mask = np.zeros((n_words, len(indices) + 1))   # round 1 attends everywhere

    states = []
    e_hat = entry_features
    for rnd in range(params.n_rounds):
        interacted = run_round(rnd, e_hat)
        rp = params.rounds[rnd]
        e_hat, attn = swa(interacted, s_rel, mask, rp, return_attention=True)
        m = response_map(e_hat, s_hat)
        mask = mask_from_map(m, indices, params.tau)
        states.append(DecodeState(
            round_index=rnd, word_features=e_hat, response_map=m,
            attention_mask=mask, relevance_scores=s_r,
            selected_indices=indices, attention=attn))

    final, kernel_index, s_v, kernel = select_kernel(
        e_hat, s_rel, states[-1].response_map, params.kernel_strategy,
        params.rounds[-1], s_hat, w_t=params.w_t, cls_vector=cls_vector)
    states[-1].visual_scores = s_v
    score = sigmoid(kernel @ params.score_w + params.score_b).reshape(())
    return StmOutput(final_map=final, kernel_index=kernel_index,
                     quality_score=score, relevance_scores=s_r,
                     selected_indices=indices, rounds=states)
