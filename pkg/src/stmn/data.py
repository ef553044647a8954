"""Dataset generation, manifest handling and sample preparation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import ValidationError
from .language import (
    RelationVocabulary, laplacian_pe, merge_trees, orient_edges, parse_conllu,
)
from .objective import GroundTruth
from .scene import PointCloudScene, SuperpointPartition, build_superpoints, knn_indices
from .synth import GenerationError, SceneConfig, generate_expression, generate_scene

MANIFEST_FORMAT = 1
MANIFEST_NAME = "manifest.json"
EXPRESSIONS_NAME = "expressions.jsonl"


def data_root(cli_value=None):
    """Dataset root: the CLI flag wins, then STMN_DATA_DIR, then ./data."""
    if cli_value:
        return cli_value
    return os.environ.get("STMN_DATA_DIR", "data")


def _scene_config(config):
    return SceneConfig(n_points=config.n_points, n_objects=config.n_objects)


def make_dataset(config, out_dir, seed=None):
    """Generate scenes, superpoint caches and expressions; write a manifest.

    Scenes are split between train and val; expressions inherit their
    scene's split.  Everything is deterministic in (config, seed).
    """
    seed = config.seed if seed is None else seed
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "superpoints"), exist_ok=True)
    scene_cfg = _scene_config(config)

    n_scenes = config.n_train_scenes + config.n_val_scenes
    scene_entries = []
    records = []
    scene_seed = seed * 100000
    for i in range(n_scenes):
        split = "train" if i < config.n_train_scenes else "val"
        exprs = []
        for _ in range(64):  # retry scenes that cannot host enough expressions
            scene_seed += 1
            try:
                scene, objects = generate_scene(scene_cfg, scene_seed)
            except GenerationError:
                continue
            exprs = _scene_expressions(objects, config, scene_seed)
            if len(exprs) >= config.exprs_per_scene:
                break
        else:
            raise GenerationError(
                f"could not build a describable scene for slot {i}")
        partition = build_superpoints(
            scene, knn=config.superpoint_knn,
            spatial_w=config.superpoint_spatial_w,
            color_w=config.superpoint_color_w,
            normal_w=config.superpoint_normal_w,
            threshold=config.superpoint_threshold,
            max_cell=config.superpoint_max_cell)
        scene_path = os.path.join("scenes", f"{scene.scene_id}.json")
        sp_path = os.path.join("superpoints", f"{scene.scene_id}.json")
        scene.save(os.path.join(out_dir, scene_path))
        partition.save(os.path.join(out_dir, sp_path), scene.scene_id)
        scene_entries.append({"scene_id": scene.scene_id, "split": split,
                              "scene": scene_path, "superpoints": sp_path})
        for j, (expr, conllu, target, tag, mentioned) in enumerate(
                exprs[:config.exprs_per_scene]):
            records.append({
                "scene_id": scene.scene_id,
                "expr_id": f"{scene.scene_id}:e{j}",
                "text": expr.raw_text,
                "conllu": conllu,
                "target_instance": int(target),
                "tag": tag,
            })

    with open(os.path.join(out_dir, EXPRESSIONS_NAME), "w",
              encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    split_of = {e["scene_id"]: e["split"] for e in scene_entries}
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "scenes": scene_entries,
        "expressions": EXPRESSIONS_NAME,
        "train": [r["expr_id"] for r in records
                  if split_of[r["scene_id"]] == "train"],
        "val": [r["expr_id"] for r in records
                if split_of[r["scene_id"]] == "val"],
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _scene_expressions(objects, config, scene_seed):
    """Distinct expressions for one scene (distinct target/template pairs)."""
    out = []
    seen = set()
    for j in range(config.exprs_per_scene * 6):
        try:
            expr, conllu, target, tag, mentioned = generate_expression(
                objects, seed=scene_seed * 1000 + j)
        except GenerationError:
            return []
        key = (target, expr.raw_text)
        if key in seen:
            continue
        seen.add(key)
        out.append((expr, conllu, target, tag, mentioned))
        if len(out) >= config.exprs_per_scene:
            break
    return out


def load_manifest(root):
    path = os.path.join(root, MANIFEST_NAME)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read dataset manifest: {exc}")
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValidationError(
            f"unsupported manifest format {manifest.get('format')!r}")
    return manifest


@dataclass
class Sample:
    """One (scene, expression) pair with everything preprocessed."""
    record: dict
    scene: PointCloudScene
    partition: SuperpointPartition
    neighbor_idx: np.ndarray
    expression: object
    graph: object            # oriented dependency graph
    pe: np.ndarray           # canonical-sign positional encodings
    gt: GroundTruth
    tag: str

    @property
    def expr_id(self):
        return self.record["expr_id"]

    @property
    def scene_id(self):
        return self.record["scene_id"]


def record_to_expression(record, max_words=80):
    """Expression + parsed sentence trees from a dataset record."""
    from .language import Expression
    trees = parse_conllu(record["conllu"])
    tokens = [form for sent in trees for (form, _, _) in sent]
    spans = []
    start = 0
    for sent in trees:
        spans.append((start, start + len(sent)))
        start += len(sent)
    expr = Expression(tokens=tokens, sentence_spans=spans,
                      raw_text=record.get("text", " ".join(tokens)))
    return expr, trees


def collect_vocabularies(records):
    """Token and relation vocabularies over a record set (sorted, stable)."""
    tokens = set()
    relations = set()
    for rec in records:
        trees = parse_conllu(rec["conllu"])
        for sent in trees:
            for form, _, deprel in sent:
                tokens.add(form)
                relations.add(deprel)
    return sorted(tokens), RelationVocabulary.from_relations(relations)


def load_samples(root, manifest, config, split, relations=None):
    """Materialize Sample bundles for one split.

    Scenes, partitions and neighbor indices are shared between the
    expressions of a scene.
    """
    with open(os.path.join(root, manifest["expressions"]),
              encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    wanted = set(manifest[split])
    records = [r for r in records if r["expr_id"] in wanted]
    if relations is None:
        _, relations = collect_vocabularies(records)

    scene_cache = {}
    for entry in manifest["scenes"]:
        scene_cache[entry["scene_id"]] = entry

    scene_cfg = _scene_config(config)
    cat_ids = scene_cfg.category_ids()
    loaded = {}
    samples = []
    for rec in records:
        sid = rec["scene_id"]
        if sid not in loaded:
            entry = scene_cache[sid]
            scene = PointCloudScene.load(os.path.join(root, entry["scene"]))
            partition = SuperpointPartition.load(
                os.path.join(root, entry["superpoints"]))
            nbr = knn_indices(scene.positions, config.encoder_knn)
            loaded[sid] = (scene, partition, nbr)
        scene, partition, nbr = loaded[sid]
        expr, trees = record_to_expression(rec, max_words=config.max_words)
        graph = merge_trees(trees, relations)
        graph = orient_edges(graph, config.direction_mode)
        pe = laplacian_pe(graph, config.k_pe)
        mentioned = sorted({tok for tok in expr.tokens if tok in cat_ids})
        gt = GroundTruth.build(scene, partition, rec["target_instance"],
                               mentioned, cat_ids, expr_tokens=expr.tokens,
                               color_names=set(scene_cfg.colors))
        samples.append(Sample(record=rec, scene=scene, partition=partition,
                              neighbor_idx=nbr, expression=expr, graph=graph,
                              pe=pe, gt=gt, tag=rec.get("tag", "unique")))
    return samples, relations
