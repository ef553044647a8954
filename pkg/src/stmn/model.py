"""Full matching model: encoder, embeddings, interaction layers and decoder."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .ddi import DdiLayerParams, EdgeInitParams, ddi_layer, init_ddi_state, reseed_nodes
from .language import (
    TokenEmbeddingTable, embed_tokens, laplacian_pe, orient_edges,
    random_sign_flip,
)
from .objective import GroundTruth, LossWeights, compute_losses
from .scene import PointEncoder, superpoint_pool
from .stm import StmParams, project_superpoints, stm_forward
from .synth import SceneConfig


class MatchingModel:
    """Owns every trainable tensor and runs one (scene, expression) forward."""

    def __init__(self, config, token_vocab, relation_vocab, rng=None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        self.relations = relation_vocab
        self.encoder = PointEncoder(config.c_p, knn=config.encoder_knn, rng=rng)
        self.table = TokenEmbeddingTable(token_vocab, config.c_t, rng=rng)
        self.stm = StmParams(
            c_p=config.c_p, c_t=config.c_t, d=config.d,
            n_rounds=config.n_rounds, k_rel=config.k_rel, tau=config.tau,
            kernel_strategy=config.kernel_strategy, rng=rng)
        self.edge_init = EdgeInitParams(config.d, config.k_pe, rng=rng)
        if config.structure == "NONE":
            self.ddi_layers = []
        else:
            self.ddi_layers = [
                DdiLayerParams(config.d, config.d_hidden,
                               structure=config.structure, rng=rng)
                for _ in range(config.n_rounds)]
        self.loss_weights = LossWeights(bce=config.w_bce, dice=config.w_dice,
                                        rel=config.w_rel, score=config.w_score)

    # -- parameter registry -------------------------------------------------
    def named_parameters(self):
        out = {}
        out.update(self.encoder.parameters())
        out.update(self.table.parameters())
        out.update(self.stm.parameters())
        if self.ddi_layers:
            out.update(self.edge_init.parameters())
            for i, layer in enumerate(self.ddi_layers):
                out.update(layer.parameters(f"ddi.layer{i}"))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    # -- forward -------------------------------------------------------------
    def scene_features(self, sample):
        """Projected superpoint features for a scene (shareable across its
        expressions when parameters are frozen)."""
        point_feats = self.encoder.encode(sample.scene, sample.neighbor_idx)
        pooled = superpoint_pool(point_feats, sample.partition)
        return project_superpoints(pooled, self.stm.w_s)

    def forward(self, sample, training=False, rng=None, s_hat=None):
        """Decode one sample; returns the decoder output.

        ``sample`` carries the scene, partition, neighbor indices, expression,
        oriented dependency graph and canonical positional encodings.
        """
        if s_hat is None:
            s_hat = self.scene_features(sample)

        words, cls_vec = embed_tokens(sample.expression, self.table)
        entry = concat([self.table.root_embedding, words], axis=0) @ self.stm.w_t

        if self.ddi_layers:
            pe = sample.pe
            if training and rng is not None:
                pe = random_sign_flip(pe, rng)
            graph = sample.graph
            edge_init = self.edge_init
            layers = self.ddi_layers
            carried = {}

            def run_round(rnd, e_hat):
                if rnd == 0:
                    state = init_ddi_state(e_hat, graph, edge_init, pe)
                else:
                    state = reseed_nodes(carried["state"], e_hat)
                state = ddi_layer(state, graph, layers[rnd])
                carried["state"] = state
                return state.h
        else:
            def run_round(rnd, e_hat):
                return e_hat

        return stm_forward(s_hat, entry, words, self.stm, run_round,
                           cls_vector=cls_vec)

    def losses(self, sample, training=False, rng=None):
        output = self.forward(sample, training=training, rng=rng)
        components, total, iou = compute_losses(
            output, sample.gt, self.loss_weights,
            sample.expression.n_words, sample.partition)
        if self.config.aux_loss and sample.gt.word_targets is not None:
            # dense superpoint-word supervision: each color/category word row
            # of every round is pulled toward the cells carrying that
            # attribute, ROOT toward the target mask, and the cross-attention
            # mass of those words is pulled onto their own cells; this breaks
            # the uniform-attention symmetry the final-map loss alone cannot
            from .autodiff import clip, gather_rows, log, tensor_sum
            from .objective import bce_loss, dice_loss
            targets = [(row, t) for row, t in enumerate(sample.gt.word_targets)
                       if t is not None]
            if targets:
                scale = 1.0 / len(targets)
                idx = output.selected_indices
                for state in output.rounds:
                    for row, target in targets:
                        aux_map = gather_rows(state.response_map,
                                              [row]).reshape(-1)
                        total = total + scale * self.loss_weights.bce * \
                            bce_loss(aux_map, target)
                        total = total + scale * self.loss_weights.dice * \
                            dice_loss(aux_map, target)
                        slot_hits = np.flatnonzero(target[idx])
                        if slot_hits.size:
                            attn_row = gather_rows(state.attention, [row])
                            mass = tensor_sum(
                                gather_rows(attn_row.t(), slot_hits))
                            total = total - scale * log(
                                clip(mass, 1e-7, 1.0)).reshape(())
        return output, components, total, iou

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra=None):
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        meta = {
            "config": self.config.to_json(),
            "token_vocab": self.table.vocab_json(),
            "relation_vocab": self.relations.to_json(),
        }
        if extra:
            meta.update(extra)
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        from .language import RelationVocabulary
        arrays, extra = load_checkpoint(path)
        config = RunConfig.from_json(extra["config"])
        relations = RelationVocabulary.from_json(extra["relation_vocab"])
        model = cls(config, token_vocab=[], relation_vocab=relations)
        model.table = TokenEmbeddingTable.from_vocab_json(
            extra["token_vocab"], config.c_t)
        named = model.named_parameters()
        for name, param in named.items():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != param.data.shape:
                raise ValueError(
                    f"checkpoint parameter {name!r} has shape "
                    f"{arrays[name].shape}, expected {param.data.shape}")
            param.data = arrays[name]
        return model, extra
