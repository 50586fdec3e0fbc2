"""End-to-end helpers shared by the CLI and the acceptance harness."""
from __future__ import annotations

import numpy as np

from .data import DatasetManifest, SyntheticSpec, generate_synthetic, parse_reid_dir
from .evaluation import RankingProblem, evaluate
from .image import embed_images, resize_normalize
from .training import Models, run_stage1, run_stage2, stage1_config, stage2_config


def build_manifest(cfg):
    ds = cfg["dataset"]
    if ds.get("path"):
        path = ds["path"]
        if path.endswith(".json"):
            return DatasetManifest.load(path)
        return parse_reid_dir(path)
    return generate_synthetic(SyntheticSpec(seed=cfg["seed"], **ds["synthetic"]))


def load_for_model(manifest, sample, model_cfg):
    img = manifest.load_image(sample)
    h, w = model_cfg["height"], model_cfg["width"]
    return img if img.shape[:2] == (h, w) else resize_normalize(img, h, w)


def fit_images(manifest, model_cfg):
    """Resize every image once so encoders always see the model geometry."""
    for s in manifest.samples:
        img = manifest.load_image(s)
        if img.shape[:2] != (model_cfg["height"], model_cfg["width"]):
            small = resize_normalize(img, model_cfg["height"], model_cfg["width"])
            manifest.images[s.file] = np.round(small * 255).astype(np.uint8)
    return manifest


def embed_split(models, manifest, split):
    samples = manifest.split(split)
    emb = embed_images(models.image, [manifest.load_image(s) for s in samples])
    ids = np.array([s.identity for s in samples])
    cams = np.array([s.camera for s in samples])
    return emb, ids, cams


def ranking_problem(models, manifest):
    q, qi, qc = embed_split(models, manifest, "query")
    g, gi, gc = embed_split(models, manifest, "gallery")
    return RankingProblem(q, qi, qc, g, gi, gc)


def evaluate_models(models, manifest, ranks=(1, 5, 10)):
    return evaluate(ranking_problem(models, manifest), ranks)


def train_two_stage(cfg, manifest=None, metrics1=None, metrics2=None):
    """Build models from the config seed and run both stages; returns (models, reports)."""
    manifest = manifest if manifest is not None else fit_images(build_manifest(cfg), cfg["model"])
    models = Models(cfg["model"], manifest.n_identities, cfg["seed"])
    r1 = run_stage1(manifest, models, stage1_config(cfg), metrics1)
    r2 = run_stage2(manifest, models, stage2_config(cfg), metrics2)
    return models, manifest, (r1, r2)
