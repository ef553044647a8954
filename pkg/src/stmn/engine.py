"""Training loop, evaluation, inference, ablation grids, latency bench and
the gradient-check suite."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .checkpoint import load_checkpoint
from .config import RunConfig, ValidationError
from .data import (
    Sample, collect_vocabularies, load_manifest, load_samples,
    record_to_expression,
)
from .language import laplacian_pe, merge_trees, orient_edges
from .model import MatchingModel
from .objective import GroundTruth, mask_iou
from .optim import Adam, LrSchedule
from .scene import (
    PointCloudScene, SuperpointPartition, build_superpoints, expand_mask,
    knn_indices,
)


class TrainingError(RuntimeError):
    """Raised on non-finite loss; carries a diagnostic dump path."""


def _rng_state(rng):
    return rng.bit_generator.state


def _restore_rng(state):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def build_model(config, root, manifest):
    """Model with vocabularies drawn from the dataset's full record set."""
    with open(os.path.join(root, manifest["expressions"]),
              encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    tokens, relations = collect_vocabularies(records)
    model = MatchingModel(config, tokens, relations,
                          rng=np.random.default_rng(config.seed))
    return model, relations


def train(config, root, out_dir, resume=None, epoch_hook=None):
    """Train on the manifest's train split; returns (model, log rows).

    Writes one JSON line per epoch to train_log.jsonl and a resumable
    checkpoint (parameters, optimizer moments, RNG state) to last.ckpt.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = load_manifest(root)
    model, relations = build_model(config, root, manifest)
    samples, _ = load_samples(root, manifest, config, "train",
                              relations=relations)
    if not samples:
        raise ValidationError("train split is empty")

    named = model.named_parameters()
    params = list(named.values())
    schedule = LrSchedule(config.lr, config.decay_epochs, config.decay_factor)
    opt = Adam(params, schedule)
    rng = np.random.default_rng(config.seed + 1)
    start_epoch = 1
    log_rows = []

    if resume:
        arrays, extra = load_checkpoint(resume)
        for name, p in named.items():
            p.data = arrays[name].copy()
        for i, name in enumerate(named):
            opt.state.m[i] = arrays[f"optim.m.{name}"].copy()
            opt.state.v[i] = arrays[f"optim.v.{name}"].copy()
        opt.state.step_count = extra["step_count"]
        rng = _restore_rng(extra["rng_state"])
        start_epoch = extra["epoch"] + 1

    log_path = os.path.join(out_dir, "train_log.jsonl")
    mode = "a" if resume else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, config.epochs + 1):
            opt.set_epoch(epoch)
            order = rng.permutation(len(samples))
            sums = {"bce": 0.0, "dice": 0.0, "rel": 0.0, "score": 0.0}
            total_sum = 0.0
            iou_sum = 0.0
            n_batches = 0
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo:lo + config.batch_size]
                opt.zero_grad()
                batch_total = None
                for idx in batch:
                    sample = samples[idx]
                    _, comps, total, iou = model.losses(
                        sample, training=True, rng=rng)
                    if not math.isfinite(float(total.data)):
                        _dump_diagnostic(out_dir, epoch, batch, samples, comps)
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch} "
                            f"({sample.expr_id}); diagnostic written to "
                            f"{out_dir}/diagnostic.json")
                    batch_total = total if batch_total is None \
                        else batch_total + total
                    for k in sums:
                        sums[k] += float(comps[k].data)
                    iou_sum += iou
                batch_mean = batch_total * (1.0 / len(batch))
                total_sum += float(batch_mean.data)
                n_batches += 1
                backward(batch_mean)
                if config.grad_clip:
                    opt.clip_global_norm(config.grad_clip)
                opt.step()
            n = len(order)
            row = {
                "epoch": epoch,
                "loss": total_sum / n_batches,
                "bce": sums["bce"] / n,
                "dice": sums["dice"] / n,
                "rel": sums["rel"] / n,
                "score": sums["score"] / n,
                "train_iou": iou_sum / n,
                "lr": opt.state.lr,
                "steps": opt.state.step_count,
            }
            log_rows.append(row)
            log.write(json.dumps(row, sort_keys=True) + "\n")
            log.flush()
            _save_training_checkpoint(model, opt, named, rng, epoch,
                                      os.path.join(out_dir, "last.ckpt"))
            if epoch_hook:
                epoch_hook(epoch, model)
    try:
        from .report import save_training_curves
        save_training_curves(log_rows, os.path.join(out_dir, "loss_curve.png"))
    except Exception:
        pass  # figures are a best-effort side artifact
    return model, log_rows


def _save_training_checkpoint(model, opt, named, rng, epoch, path):
    arrays = {name: p.data for name, p in named.items()}
    for i, name in enumerate(named):
        arrays[f"optim.m.{name}"] = opt.state.m[i]
        arrays[f"optim.v.{name}"] = opt.state.v[i]
    from .checkpoint import save_checkpoint
    meta = {
        "config": model.config.to_json(),
        "token_vocab": model.table.vocab_json(),
        "relation_vocab": model.relations.to_json(),
        "epoch": epoch,
        "step_count": opt.state.step_count,
        "rng_state": _rng_state(rng),
    }
    save_checkpoint(path, arrays, meta)


def evaluate(model, root, split="val", workers=1, out_dir=None, config=None):
    """Point-level metrics over one split; optionally dumps records + figure."""
    config = config or model.config
    manifest = load_manifest(root)
    samples, _ = load_samples(root, manifest, config, split,
                              relations=model.relations)
    if not samples:
        raise ValidationError(f"split {split!r} is empty")

    scene_feats = {}
    with no_grad():
        for sample in samples:
            if sample.scene_id not in scene_feats:
                scene_feats[sample.scene_id] = model.scene_features(sample)

    def run_one(sample):
        with no_grad():
            t0 = time.perf_counter()
            output = model.forward(sample,
                                   s_hat=scene_feats[sample.scene_id])
            latency_ms = (time.perf_counter() - t0) * 1e3
        sp_mask = (output.final_map.data >= 0.5).astype(np.float64)
        point_mask = expand_mask(sp_mask, sample.partition)
        iou = mask_iou(point_mask, sample.gt.point_mask)
        return {
            "scene_id": sample.scene_id,
            "expr_id": sample.expr_id,
            "kernel_index": output.kernel_index,
            "superpoint_mask": [round(float(v), 6)
                                for v in output.final_map.data],
            "point_mask": [int(v) for v in point_mask],
            "iou_vs_gt": iou,
            "quality_score": float(output.quality_score.data),
            "latency_ms": latency_ms,
            "tag": sample.tag,
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_one, samples))
    else:
        records = [run_one(s) for s in samples]

    report = summarize_records(records)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"eval_{split}.jsonl"), "w",
                  encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, f"eval_{split}.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        try:
            from .report import save_metrics_chart
            save_metrics_chart(report, os.path.join(out_dir,
                                                    f"eval_{split}.png"))
        except Exception:
            pass
    return report, records


def summarize_records(records):
    """Aggregate per-expression IoU records into the metrics report."""
    def agg(rows):
        if not rows:
            return {"mIoU": 0.0, "acc_at_025": 0.0, "acc_at_05": 0.0, "n": 0}
        ious = np.array([r["iou_vs_gt"] for r in rows])
        return {
            "mIoU": float(ious.mean()),
            "acc_at_025": float((ious > 0.25).mean()),
            "acc_at_05": float((ious > 0.5).mean()),
            "n": len(rows),
        }

    overall = agg(records)
    report = {
        "mIoU": overall["mIoU"],
        "acc_at_025": overall["acc_at_025"],
        "acc_at_05": overall["acc_at_05"],
        "n_expressions": overall["n"],
        "per_tag": {
            tag: agg([r for r in records if r.get("tag") == tag])
            for tag in ("unique", "multiple")
        },
        "mean_latency_ms": float(np.mean([r["latency_ms"] for r in records])),
    }
    return report


def load_model(checkpoint_path):
    model, extra = MatchingModel.load(checkpoint_path)
    return model, extra


def infer(model, scene_path, expr_record, partition=None):
    """One inference record for a scene file + expression record."""
    scene = PointCloudScene.load(scene_path)
    config = model.config
    if partition is None:
        partition = build_superpoints(
            scene, knn=config.superpoint_knn,
            spatial_w=config.superpoint_spatial_w,
            color_w=config.superpoint_color_w,
            normal_w=config.superpoint_normal_w,
            threshold=config.superpoint_threshold,
            max_cell=config.superpoint_max_cell)
    expr, trees = record_to_expression(expr_record)
    graph = orient_edges(merge_trees(trees, model.relations),
                         config.direction_mode)
    pe = laplacian_pe(graph, config.k_pe)
    target = expr_record.get("target_instance")
    cat_ids = __import__("stmn.synth", fromlist=["SceneConfig"]) \
        .SceneConfig().category_ids()
    mentioned = sorted({t for t in expr.tokens if t in cat_ids})
    gt = None
    if target is not None:
        gt = GroundTruth.build(scene, partition, target, mentioned, cat_ids)
    sample = Sample(record=dict(expr_record), scene=scene, partition=partition,
                    neighbor_idx=knn_indices(scene.positions,
                                             config.encoder_knn),
                    expression=expr, graph=graph, pe=pe, gt=gt,
                    tag=expr_record.get("tag", "unique"))
    with no_grad():
        t0 = time.perf_counter()
        output = model.forward(sample)
        latency_ms = (time.perf_counter() - t0) * 1e3
    sp_mask = (output.final_map.data >= 0.5).astype(np.float64)
    point_mask = expand_mask(sp_mask, partition)
    record = {
        "scene_id": scene.scene_id,
        "expr_id": expr_record.get("expr_id", "expr0"),
        "kernel_index": output.kernel_index,
        "superpoint_mask": [round(float(v), 6) for v in output.final_map.data],
        "point_mask": [int(v) for v in point_mask],
        "quality_score": float(output.quality_score.data),
        "latency_ms": latency_ms,
    }
    if gt is not None:
        record["iou_vs_gt"] = mask_iou(point_mask, gt.point_mask)
    return record


ABLATION_AXES = {
    "kernel": [
        ("Root", {"kernel_strategy": "Root"}),
        ("Avg", {"kernel_strategy": "Avg"}),
        ("Top1", {"kernel_strategy": "Top1"}),
        ("CLS", {"kernel_strategy": "CLS"}),
    ],
    "structure": [
        ("wo_ddi", {"structure": "NONE", "kernel_strategy": "CLS"}),
        ("GA", {"structure": "GA"}),
        ("SA-GA", {"structure": "SA_GA"}),
        ("GA-SA", {"structure": "GA_SA"}),
        ("GA||SA", {"structure": "GA_PAR_SA"}),
    ],
    "direction": [
        ("forward", {"direction_mode": "forward"}),
        ("reverse", {"direction_mode": "reverse"}),
        ("bidirectional", {"direction_mode": "bidirectional"}),
    ],
    "sampling": [
        ("k8", {"k_rel": 8}),
        ("k16", {"k_rel": 16}),
        ("k32", {"k_rel": 32}),
        ("k64", {"k_rel": 64}),
        ("all", {"k_rel": 10 ** 9}),
    ],
}


def ablate(config, root, axis_or_grid, out_dir):
    """Train/evaluate each config variant with a shared seed.

    ``axis_or_grid`` is one of the named axes or a list of (name, delta)
    pairs.  Emits rows sorted in grid order as CSV and JSON plus a chart.
    """
    if isinstance(axis_or_grid, str):
        if axis_or_grid not in ABLATION_AXES:
            raise ValidationError(
                f"unknown ablation axis {axis_or_grid!r}; "
                f"choose from {sorted(ABLATION_AXES)}")
        grid = ABLATION_AXES[axis_or_grid]
    else:
        grid = axis_or_grid
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for name, delta in grid:
        variant = config.replace(**delta)
        variant_dir = os.path.join(out_dir, f"variant_{name.replace('|', 'I')}")
        model, _ = train(variant, root, variant_dir)
        report, _ = evaluate(model, root, split="val", config=variant)
        rows.append({
            "variant": name,
            "seed": variant.seed,
            "mIoU": report["mIoU"],
            "acc_at_025": report["acc_at_025"],
            "acc_at_05": report["acc_at_05"],
            "n": report["n_expressions"],
        })
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("variant,seed,mIoU,acc_at_025,acc_at_05,n\n")
        for r in rows:
            fh.write(f"{r['variant']},{r['seed']},{r['mIoU']:.6f},"
                     f"{r['acc_at_025']:.6f},{r['acc_at_05']:.6f},{r['n']}\n")
    with open(os.path.join(out_dir, "ablation.json"), "w",
              encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    try:
        from .report import save_ablation_chart
        save_ablation_chart(rows, os.path.join(out_dir, "ablation.png"))
    except Exception:
        pass
    return rows


def bench(config, out_dir=None, n_inferences=120, model=None, seed=None):
    """Per-description decode latency: superpoint level vs point level.

    The scene encoding is warmed once per mode (it is shared by every
    description of a scene); the timed region is the matching decoder.  The
    point-level baseline runs the identical model over singleton superpoints.
    """
    seed = config.seed if seed is None else seed
    from .synth import SceneConfig, generate_expression, generate_scene
    scene_cfg = SceneConfig(n_points=config.n_points,
                            n_objects=config.n_objects)
    scene, objects = generate_scene(scene_cfg, seed + 17)
    partition = build_superpoints(
        scene, knn=config.superpoint_knn,
        spatial_w=config.superpoint_spatial_w,
        color_w=config.superpoint_color_w,
        normal_w=config.superpoint_normal_w,
        threshold=config.superpoint_threshold,
        max_cell=config.superpoint_max_cell)
    singleton = SuperpointPartition.from_assignment(
        np.arange(scene.n_points, dtype=np.int64))

    records = []
    for j in range(8):
        expr, conllu, target, tag, _ = generate_expression(
            objects, seed=seed * 97 + j)
        records.append({"scene_id": scene.scene_id, "expr_id": f"bench:e{j}",
                        "text": expr.raw_text, "conllu": conllu,
                        "target_instance": target, "tag": tag})

    tokens, relations = collect_vocabularies(records)
    if model is None:
        model = MatchingModel(config, tokens, relations,
                              rng=np.random.default_rng(seed))

    def samples_for(part):
        out = []
        nbr = knn_indices(scene.positions, config.encoder_knn)
        cat_ids = scene_cfg.category_ids()
        for rec in records:
            expr, trees = record_to_expression(rec)
            graph = orient_edges(merge_trees(trees, model.relations),
                                 config.direction_mode)
            pe = laplacian_pe(graph, config.k_pe)
            gt = GroundTruth.build(scene, part, rec["target_instance"],
                                   [], cat_ids)
            out.append(Sample(record=rec, scene=scene, partition=part,
                              neighbor_idx=nbr, expression=expr, graph=graph,
                              pe=pe, gt=gt, tag=rec["tag"]))
        return out

    def time_mode(part):
        sams = samples_for(part)
        with no_grad():
            s_hat = model.scene_features(sams[0])
            for s in sams[:2]:  # warmup
                model.forward(s, s_hat=s_hat)
            times = []
            for i in range(n_inferences):
                s = sams[i % len(sams)]
                t0 = time.perf_counter()
                model.forward(s, s_hat=s_hat)
                times.append((time.perf_counter() - t0) * 1e3)
        return np.array(times)

    t_super = time_mode(partition)
    t_point = time_mode(singleton)
    result = {
        "n_inferences": int(n_inferences),
        "n_points": int(scene.n_points),
        "superpoint": {"n_units": partition.count,
                       "mean_ms": float(t_super.mean()),
                       "median_ms": float(np.median(t_super))},
        "point": {"n_units": singleton.count,
                  "mean_ms": float(t_point.mean()),
                  "median_ms": float(np.median(t_point))},
    }
    result["speedup"] = result["point"]["mean_ms"] / result["superpoint"]["mean_ms"]
    result["unit_ratio"] = scene.n_points / partition.count
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "bench.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
        try:
            from .report import save_latency_hist
            save_latency_hist(t_super, t_point,
                              os.path.join(out_dir, "latency.png"))
        except Exception:
            pass
    return result


# -- gradient-check suite ------------------------------------------------------

def _micro_fixture(structure, seed=123):
    """Tiny but complete training instance: 200 points, 12 superpoints,
    5 words, D=8, 2 rounds."""
    from .synth import SceneConfig, generate_scene
    config = RunConfig(
        c_p=8, c_t=8, d=8, d_hidden=16, k_pe=4, n_rounds=2, k_rel=6,
        structure=structure if structure != "NONE" else "NONE",
        kernel_strategy="CLS" if structure == "NONE" else "Top1",
        direction_mode="reverse", n_points=200, n_objects=(2, 2), seed=seed)
    scene, _ = generate_scene(SceneConfig(n_points=200, n_objects=(2, 2)),
                              seed)
    partition = SuperpointPartition.from_assignment(
        np.arange(200, dtype=np.int64) % 12)
    conllu = ("1\tthe\t_\t_\t_\t_\t3\tdet\t_\t_\n"
              "2\tred\t_\t_\t_\t_\t3\tamod\t_\t_\n"
              "3\tchair\t_\t_\t_\t_\t0\troot\t_\t_\n"
              "4\tnear\t_\t_\t_\t_\t5\tcase\t_\t_\n"
              "5\ttable\t_\t_\t_\t_\t3\tnmod\t_\t_\n\n")
    record = {"scene_id": scene.scene_id, "expr_id": "micro:e0",
              "text": "the red chair near table", "conllu": conllu,
              "target_instance": 1, "tag": "unique"}
    tokens, relations = collect_vocabularies([record])
    model = MatchingModel(config, tokens, relations,
                          rng=np.random.default_rng(seed))
    expr, trees = record_to_expression(record)
    graph = orient_edges(merge_trees(trees, relations), config.direction_mode)
    pe = laplacian_pe(graph, config.k_pe)
    gt = GroundTruth.build(scene, partition, 1, [], {})
    # synthetic relevance labels keep the rel term informative
    gt.relevance_labels = (np.arange(12) % 3 == 0).astype(np.float64)
    sample = Sample(record=record, scene=scene, partition=partition,
                    neighbor_idx=knn_indices(scene.positions,
                                             config.encoder_knn),
                    expression=expr, graph=graph, pe=pe, gt=gt, tag="unique")
    return model, sample


def gradcheck(structures=("GA", "SA_GA", "GA_SA", "GA_PAR_SA"), h=1e-5,
              out_path=None, log=print):
    """Central finite differences vs analytic gradients, per-op and end-to-end.

    Returns a result dict; every entry must come in at or under 1e-5.
    """
    results = {"ops": {}, "full_model": {}, "tolerance": 1e-5}
    t_start = time.time()

    results["ops"] = _op_level_checks()
    for name, err in results["ops"].items():
        log(f"gradcheck op {name}: max rel err {err:.3e} "
            f"{'PASS' if err <= 1e-5 else 'FAIL'}")

    for structure in structures:
        model, sample = _micro_fixture(structure)
        params = list(model.named_parameters().values())

        def f():
            _, _, total, _ = model.losses(sample)
            return total

        err = finite_difference_check(f, params, h=h)
        results["full_model"][structure] = err
        log(f"gradcheck full model [{structure}]: max rel err {err:.3e} "
            f"{'PASS' if err <= 1e-5 else 'FAIL'}")

    results["elapsed_s"] = time.time() - t_start
    results["max_error"] = max(list(results["ops"].values())
                               + list(results["full_model"].values()))
    results["pass"] = results["max_error"] <= 1e-5
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return results


def _op_level_checks():
    """Finite-difference checks for each differentiable primitive."""
    from . import autodiff as ad
    from .objective import bce_loss, dice_loss, rel_loss, score_loss
    from .scene import superpoint_pool as pool
    rng = np.random.default_rng(42)
    out = {}

    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    u = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    coeff = rng.standard_normal((5, 4))
    checks = {
        "matmul": lambda: (w @ u).sum(),
        "softmax": lambda: (ad.softmax_axis(w, axis=1) * coeff).sum(),
        "sigmoid": lambda: ad.sigmoid(w).sum(),
        "gelu": lambda: ad.gelu(w).sum(),
        "relu": lambda: (ad.relu(w) * w).sum(),
        "layer_norm": lambda: ad.layer_norm(
            w, Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4)))).sum(),
        "gather_concat": lambda: ad.concat(
            [ad.gather_rows(w, [0, 2, 2]), w], axis=0).sum(),
        "segment_softmax": lambda: ad.segment_sum(
            ad.reshape(ad.segment_softmax(ad.reshape(w, (20,)),
                                          np.arange(20) % 4, 4), (20, 1)),
            np.arange(20) % 5, 5).sum(),
        "mean_log_abs": lambda: (ad.log(ad.sigmoid(w)).mean()
                                 + ad.absolute(u).mean()),
    }
    for name, f in checks.items():
        out[name] = finite_difference_check(f, [w, u])

    part = SuperpointPartition.from_assignment(rng.integers(0, 4, size=24))
    feats = Tensor(rng.normal(size=(24, 3)), requires_grad=True)
    out["superpoint_pool"] = finite_difference_check(
        lambda: (pool(feats, part) * pool(feats, part)).sum(), [feats])

    logits = Tensor(rng.normal(size=(9,)), requires_grad=True)
    labels = rng.integers(0, 2, size=9).astype(np.float64)
    out["bce_loss"] = finite_difference_check(
        lambda: bce_loss(ad.sigmoid(logits), labels), [logits])
    out["dice_loss"] = finite_difference_check(
        lambda: dice_loss(ad.sigmoid(logits), labels), [logits])
    out["rel_loss"] = finite_difference_check(
        lambda: rel_loss(ad.sigmoid(logits) * 3.0, labels, 3), [logits])
    s = Tensor(np.array(0.3), requires_grad=True)
    out["score_loss"] = finite_difference_check(
        lambda: score_loss(s, 0.9), [s])
    return out
