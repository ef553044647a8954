"""Acceptance suite: every criterion prints one PASS/FAIL line.

The heavy end-to-end criteria (gradient suite, overfit, generalization,
ablation ordering, determinism, latency) train real models at desk scale;
the whole module is the release gate and takes tens of minutes.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from stmn.autodiff import Tensor, no_grad
from stmn.config import RunConfig
from stmn.data import load_manifest, load_samples, make_dataset
from stmn.engine import bench, evaluate, gradcheck, train
from stmn.language import DependencyGraph, laplacian_pe, merge_trees, parse_conllu, RelationVocabulary
from stmn.objective import bce_loss, dice_loss, mask_iou, rel_loss
from stmn.scene import SuperpointPartition, pool_gt_mask, superpoint_pool
from stmn.stm import mask_from_map, relevance_filter
from stmn.synth import SceneConfig, generate_expression, generate_scene

GEN_SEED = 0          # dataset seed for the end-to-end criteria
TRAIN_SEEDS = (1, 2)  # training seeds; the re-run must agree within 0.1 mIoU


def _report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def gen_dataset(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("accept_ds"))
    config = RunConfig.toy(n_train_scenes=40, n_val_scenes=10,
                           exprs_per_scene=5, epochs=30, aux_loss=True,
                           batch_size=2, lr=4e-3, decay_epochs=(20, 26, 40),
                           seed=GEN_SEED)
    make_dataset(config, root, seed=GEN_SEED)
    manifest = load_manifest(root)
    assert len(manifest["train"]) == 200 and len(manifest["val"]) == 50
    return root, config


class TestGradientSuite:
    def test_finite_differences_everywhere(self):
        t0 = time.time()
        results = gradcheck(log=lambda *_: None)
        elapsed = time.time() - t0
        ok = results["pass"] and elapsed < 120.0
        assert _report(
            "gradient suite",
            ok,
            f"max rel err {results['max_error']:.2e} (tol 1e-5), "
            f"{elapsed:.0f}s (< 120s), structures "
            f"{sorted(results['full_model'])}"), results


class TestOracleEquivalence:
    N_TRIALS = 100

    def test_superpoint_pool_oracle(self):
        rng = np.random.default_rng(10)
        worst = 0.0
        for _ in range(self.N_TRIALS):
            n = int(rng.integers(6, 40))
            c = int(rng.integers(1, 6))
            n_cells = int(rng.integers(1, max(2, n // 2)))
            assignment = rng.integers(0, n_cells, size=n)
            assignment[:n_cells] = np.arange(n_cells)
            part = SuperpointPartition.from_assignment(assignment)
            x = rng.normal(size=(n, c))
            ours = superpoint_pool(Tensor(x), part).data
            oracle = np.stack([x[cell].mean(axis=0) for cell in part.cells])
            worst = max(worst, float(np.max(np.abs(ours - oracle))))
        assert _report("superpoint_pool vs loop oracle", worst <= 1e-10,
                       f"max abs dev {worst:.2e} over {self.N_TRIALS} trials")

    def test_pool_gt_mask_oracle(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(self.N_TRIALS):
            n = int(rng.integers(4, 40))
            n_cells = int(rng.integers(1, max(2, n // 2)))
            assignment = rng.integers(0, n_cells, size=n)
            assignment[:n_cells] = np.arange(n_cells)
            part = SuperpointPartition.from_assignment(assignment)
            mask = rng.integers(0, 2, size=n).astype(float)
            ours = pool_gt_mask(mask, part)
            oracle = np.array([1.0 if mask[cell].mean() > 0.5 else 0.0
                               for cell in part.cells])
            worst = max(worst, float(np.max(np.abs(ours - oracle))))
        assert _report("pool_gt_mask vs loop oracle", worst <= 1e-10,
                       f"max abs dev {worst:.2e}")

    def test_graph_attention_oracle(self):
        from stmn.ddi import DdiLayerParams, DdiState, graph_attention
        from tests.test_ddi import _graph_attention_oracle
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(self.N_TRIALS):
            n = int(rng.integers(2, 8))
            d = int(rng.integers(2, 8))
            params = DdiLayerParams(d, rng=rng)
            n_edges = int(rng.integers(1, 2 * n))
            edges = [(int(rng.integers(0, n)), int(rng.integers(0, n)), 0)
                     for _ in range(n_edges)]
            graph = DependencyGraph(node_count=n, edges=edges,
                                    direction_mode="forward", n_relations=1)
            h = rng.normal(size=(n, d))
            e = rng.normal(size=(n_edges, d))
            node, scores, edge = graph_attention(
                DdiState(h=Tensor(h), e=Tensor(e)), graph, params)
            on, osc, oe = _graph_attention_oracle(h, e, graph, params)
            worst = max(worst,
                        float(np.max(np.abs(node.data - on))),
                        float(np.max(np.abs(scores.data - osc))),
                        float(np.max(np.abs(edge.data - oe))))
        assert _report("graph_attention vs loop oracle", worst <= 1e-10,
                       f"max abs dev {worst:.2e}")

    def test_relevance_filter_oracle(self):
        rng = np.random.default_rng(13)
        worst = 0.0
        for _ in range(self.N_TRIALS):
            n_s = int(rng.integers(2, 20))
            n_w = int(rng.integers(1, 8))
            d = int(rng.integers(2, 8))
            s_hat = rng.normal(size=(n_s, d))
            words = rng.normal(size=(n_w, d))
            q_s, k_t = rng.normal(size=(d, d)), rng.normal(size=(d, d))
            k_rel = int(rng.integers(1, n_s + 3))
            s_rel, s_r, idx = relevance_filter(
                Tensor(s_hat), Tensor(words), Tensor(q_s), Tensor(k_t), k_rel)
            logits = (s_hat @ q_s) @ (words @ k_t).T / math.sqrt(d)
            ex = np.exp(logits - logits.max(axis=0, keepdims=True))
            attn = ex / ex.sum(axis=0, keepdims=True)
            oracle_sr = attn.sum(axis=1)
            order = np.argsort(-oracle_sr, kind="stable")
            oracle_idx = np.sort(order[:min(k_rel, n_s)])
            oracle_rel = np.vstack([s_hat[oracle_idx],
                                    s_hat.mean(axis=0, keepdims=True)])
            worst = max(worst,
                        float(np.max(np.abs(s_r.data - oracle_sr))),
                        float(np.max(np.abs(s_rel.data - oracle_rel))),
                        0.0 if np.array_equal(idx, oracle_idx) else 1.0)
        assert _report("relevance_filter vs direct-sum oracle", worst <= 1e-10,
                       f"max abs dev {worst:.2e}")

    def test_losses_oracle(self):
        rng = np.random.default_rng(14)
        worst = 0.0
        for _ in range(self.N_TRIALS):
            n = int(rng.integers(1, 30))
            pred = rng.uniform(1e-4, 1 - 1e-4, size=n)
            target = rng.integers(0, 2, size=n).astype(float)
            ours_bce = float(bce_loss(Tensor(pred), target).data)
            clamped = np.clip(pred, 1e-7, 1 - 1e-7)
            o_bce = float(np.mean(-(target * np.log(clamped)
                                    + (1 - target) * np.log(1 - clamped))))
            ours_dice = float(dice_loss(Tensor(pred), target).data)
            inter = float((pred * target).sum())
            o_dice = 1.0 - (2 * inter + 1e-6) / (pred.sum() + target.sum() + 1e-6)
            n_w = int(rng.integers(1, 6))
            scores = rng.uniform(0, n_w, size=n)
            ours_rel = float(rel_loss(Tensor(scores), target, n_w).data)
            p = np.clip(scores / n_w, 1e-7, 1 - 1e-7)
            o_rel = float(np.mean(-(target * np.log(p)
                                    + (1 - target) * np.log(1 - p))))
            worst = max(worst, abs(ours_bce - o_bce), abs(ours_dice - o_dice),
                        abs(ours_rel - o_rel))
        assert _report("losses vs loop oracles", worst <= 1e-10,
                       f"max abs dev {worst:.2e}")


class TestStructuralInvariants:
    def test_graph_shape_invariant(self):
        rng = np.random.default_rng(15)
        ok = True
        for trial in range(60):
            scene, objects = generate_scene(
                SceneConfig(n_points=256, n_objects=(2, 4)), seed=trial + 500)
            expr, conllu, _, _, _ = generate_expression(objects, seed=trial)
            trees = parse_conllu(conllu)
            vocab = RelationVocabulary.from_relations(
                [r for t in trees for (_, _, r) in t])
            graph = merge_trees(trees, vocab)
            ok &= graph.node_count == expr.n_words + 1
            ok &= len(graph.edges) == expr.n_words
            graph.validate()
        assert _report("dependency graphs: N_w edges, N_w+1 nodes", ok,
                       "60 generated expressions")

    def test_laplacian_eigenpair_residuals(self):
        rng = np.random.default_rng(16)
        worst = 0.0
        for trial in range(40):
            n = int(rng.integers(2, 12))
            edges = [(int(rng.integers(0, i + 1)), i + 1, 0)
                     for i in range(n - 1)]
            graph = DependencyGraph(node_count=n, edges=edges,
                                    direction_mode="forward", n_relations=1)
            k = int(rng.integers(1, 8))
            pe = laplacian_pe(graph, k)
            adj = np.zeros((n, n))
            for s, d, _ in edges:
                adj[s, d] = adj[d, s] = 1.0
            lap = np.diag(adj.sum(axis=1)) - adj
            eigvals = np.sort(np.linalg.eigvalsh(lap))
            for col in range(min(k, n - 1)):
                v = pe[:, col]
                lam = eigvals[col + 1]
                worst = max(worst, float(np.linalg.norm(lap @ v - lam * v)))
        assert _report("Laplacian PE eigenpair residuals", worst <= 1e-8,
                       f"max residual {worst:.2e}")

    def test_softmax_normalization_and_masks(self):
        from stmn.autodiff import softmax_axis
        rng = np.random.default_rng(17)
        worst = 0.0
        mask_ok = True
        for _ in range(50):
            n_s, n_w = int(rng.integers(2, 20)), int(rng.integers(1, 6))
            logits = rng.normal(size=(n_s, n_w), scale=3)
            col = softmax_axis(Tensor(logits), axis=0).data
            worst = max(worst, float(np.max(np.abs(col.sum(axis=0) - 1))))
            row = softmax_axis(Tensor(logits), axis=1).data
            worst = max(worst, float(np.max(np.abs(row.sum(axis=1) - 1))))
            m = rng.uniform(size=(n_w + 1, n_s))
            idx = np.sort(rng.choice(n_s, size=min(4, n_s), replace=False))
            mask = mask_from_map(m, idx, tau=0.5)
            vals = set(np.unique(mask))
            mask_ok &= vals <= {0.0, -np.inf}
            mask_ok &= bool(np.all(mask[:, -1] == 0.0))
        ok = worst <= 1e-9 and mask_ok
        assert _report("softmax sums and {0,-inf} masks with open global slot",
                       ok, f"max sum dev {worst:.2e}, masks valid: {mask_ok}")


class TestSingleSampleOverfit:
    def test_overfit_one_expression(self, tmp_path):
        from stmn.autodiff import backward
        from stmn.engine import build_model
        from stmn.optim import Adam, LrSchedule
        config = RunConfig.toy(n_train_scenes=1, n_val_scenes=1,
                               exprs_per_scene=1, n_points=1024, seed=3,
                               aux_loss=True)
        root = str(tmp_path / "ds")
        make_dataset(config, root)
        manifest = load_manifest(root)
        model, relations = build_model(config, root, manifest)
        samples, _ = load_samples(root, manifest, config, "train",
                                  relations=relations)
        sample = samples[0]
        opt = Adam(model.parameters(),
                   LrSchedule(base_lr=4e-3, decay_epochs=()))
        rng = np.random.default_rng(0)
        t0 = time.time()
        best = 0.0
        steps = 0
        for step in range(300):
            steps = step + 1
            opt.zero_grad()
            _, _, total, iou = model.losses(sample, training=True, rng=rng)
            best = max(best, iou)
            if iou >= 0.9:
                break
            backward(total)
            opt.clip_global_norm(1.0)
            opt.step()
        elapsed = time.time() - t0
        ok = best >= 0.9 and elapsed < 120.0
        assert _report("single-sample overfit", ok,
                       f"IoU {best:.3f} after {steps} steps in {elapsed:.0f}s "
                       f"(needs >= 0.9 within 300 steps, < 120s)")


class TestSyntheticGeneralization:
    def test_two_seed_generalization(self, gen_dataset):
        root, config = gen_dataset
        t0 = time.time()
        reports = {}
        for seed in TRAIN_SEEDS:
            cfg = config.replace(seed=seed)
            model, _ = train(cfg, root, os.path.join(root, f"run{seed}"))
            report, _ = evaluate(model, root, split="val")
            reports[seed] = report
        elapsed = time.time() - t0
        first = reports[TRAIN_SEEDS[0]]
        second = reports[TRAIN_SEEDS[1]]
        gap = abs(first["mIoU"] - second["mIoU"])
        ok = (first["mIoU"] >= 0.5 and first["acc_at_025"] >= 0.6
              and gap <= 0.1 and elapsed < 1800.0)
        assert _report(
            "synthetic generalization",
            ok,
            f"seed {TRAIN_SEEDS[0]}: mIoU {first['mIoU']:.3f} "
            f"acc@0.25 {first['acc_at_025']:.3f} (needs 0.5/0.6); "
            f"seed {TRAIN_SEEDS[1]}: mIoU {second['mIoU']:.3f}; "
            f"gap {gap:.3f} (tol 0.1); {elapsed:.0f}s (< 1800s)")


class TestAblationOrdering:
    def test_structure_ordering(self, gen_dataset):
        root, config = gen_dataset
        base = config.replace(seed=TRAIN_SEEDS[0], epochs=20)
        scores = {}
        for name, delta in [
            ("wo_ddi", {"structure": "NONE", "kernel_strategy": "CLS"}),
            ("GA", {"structure": "GA"}),
            ("GA_PAR_SA", {"structure": "GA_PAR_SA"}),
        ]:
            cfg = base.replace(**delta)
            model, _ = train(cfg, root, os.path.join(root, f"abl_{name}"))
            report, _ = evaluate(model, root, split="val")
            scores[name] = report["mIoU"]
        tol = 0.05
        ok = (scores["GA_PAR_SA"] >= scores["GA"] - tol
              and scores["GA"] >= scores["wo_ddi"] - tol)
        assert _report(
            "ablation ordering (soft)", ok,
            f"GA||SA {scores['GA_PAR_SA']:.3f} >= GA {scores['GA']:.3f} >= "
            f"w/o-DDI {scores['wo_ddi']:.3f} within {tol}")


class TestDeterminism:
    def test_identical_logs_and_checkpoint_round_trip(self, tmp_path):
        config = RunConfig.toy(n_train_scenes=2, n_val_scenes=1,
                               exprs_per_scene=3, n_points=512, epochs=1,
                               batch_size=4, aux_loss=True, seed=9)
        root = str(tmp_path / "ds")
        make_dataset(config, root)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        model_a, _ = train(config, root, str(out_a))
        train(config, root, str(out_b))
        logs_equal = (out_a / "train_log.jsonl").read_bytes() == \
            (out_b / "train_log.jsonl").read_bytes()

        report_live, _ = evaluate(model_a, root, split="val")
        from stmn.engine import load_model
        loaded, _ = load_model(str(out_a / "last.ckpt"))
        report_loaded, _ = evaluate(loaded, root, split="val")
        round_trip = all(report_live[k] == report_loaded[k]
                         for k in ("mIoU", "acc_at_025", "acc_at_05"))
        ok = logs_equal and round_trip
        assert _report("determinism", ok,
                       f"epoch logs bit-identical: {logs_equal}, "
                       f"checkpoint round-trip metrics identical: {round_trip}")


class TestLatencyHarness:
    def test_superpoint_speedup(self, tmp_path):
        config = RunConfig.toy(n_points=2048, n_objects=(2, 4), seed=4)
        result = bench(config, out_dir=str(tmp_path), n_inferences=100)
        ratio = result["unit_ratio"]
        speedup = result["speedup"]
        ok = result["n_inferences"] >= 100 and ratio >= 10 and speedup >= 2.0
        assert _report(
            "latency harness", ok,
            f"N_p/N_s = {ratio:.1f} (needs >= 10), "
            f"superpoint vs point speedup {speedup:.1f}x (needs >= 2x), "
            f"median {result['superpoint']['median_ms']:.2f}ms vs "
            f"{result['point']['median_ms']:.2f}ms over "
            f"{result['n_inferences']} inferences")
