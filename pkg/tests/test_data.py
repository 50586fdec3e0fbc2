import hashlib
import json
import math
import os

import numpy as np
import pytest

from svllreid.data import (DatasetManifest, ReIDSample, SyntheticSpec, export_manifest,
                           generate_synthetic, parse_filename, parse_reid_dir, pk_batches,
                           stage1_batches, write_png)
from svllreid.evaluation import RankingProblem, evaluate


def manifest_digest(m):
    h = hashlib.sha256(json.dumps(m.to_json(), sort_keys=True).encode())
    for s in m.samples:
        h.update(m.images[s.file].tobytes())
    return h.hexdigest()


SMALL = dict(n_identities=4, train_per_id=4, query_per_id=2, gallery_per_id=2, height=32, width=16)


# ---- synthetic ----

def test_default_spec_counts():
    m = generate_synthetic(SyntheticSpec())
    assert m.n_identities == 20
    assert m.counts() == {"train": 160, "query": 80, "gallery": 160}
    assert len(m.samples) == 20 * 20
    assert all(m.images[s.file].shape == (64, 32, 3) for s in m.samples)
    train_ids = sorted({s.identity for s in m.split("train")})
    assert train_ids == list(range(20))


def test_synthetic_is_deterministic_and_seeded():
    a = generate_synthetic(SyntheticSpec(seed=3, **SMALL))
    b = generate_synthetic(SyntheticSpec(seed=3, **SMALL))
    c = generate_synthetic(SyntheticSpec(seed=4, **SMALL))
    assert manifest_digest(a) == manifest_digest(b)
    assert manifest_digest(a) != manifest_digest(c)


def test_no_occluders_when_probability_zero():
    assert generate_synthetic(SyntheticSpec(occluder_prob=0.0, **SMALL)).occluded == 0
    assert generate_synthetic(SyntheticSpec(occluder_prob=1.0, **SMALL)).occluded == 4 * 8


def test_occluder_count_binomial_interval():
    spec = SyntheticSpec(occluder_prob=0.5, seed=1)
    n = 400
    k = generate_synthetic(spec).occluded
    # 99% normal interval of Binomial(400, 0.5)
    half = 2.576 * math.sqrt(n * 0.25)
    assert abs(k - n * 0.5) <= half, k


def test_noiseless_identities_identical_across_cameras():
    spec = SyntheticSpec(clutter=0, illumination=0, occluder_prob=0, **SMALL)
    m = generate_synthetic(spec)
    for ident in range(4):
        imgs = [m.images[s.file] for s in m.samples if s.identity == ident]
        assert all(np.array_equal(imgs[0], im) for im in imgs[1:])
    # nearest neighbour on raw pixels is then perfect
    q = m.split("query")
    g = m.split("gallery")
    flat = lambda ss: np.stack([m.load_image(s).ravel() for s in ss])
    qx, gx = flat(q), flat(g)
    qx /= np.linalg.norm(qx, axis=1, keepdims=True)
    gx /= np.linalg.norm(gx, axis=1, keepdims=True)
    prob = RankingProblem(qx, [s.identity for s in q], [s.camera for s in q],
                          gx, [s.identity for s in g], [s.camera for s in g])
    assert evaluate(prob).rank1 == 1.0


def test_impossible_specs_rejected():
    for bad in (dict(n_identities=0), dict(train_per_id=1), dict(cameras=1),
                dict(occluder_prob=1.5), dict(gallery_per_id=1), dict(clutter=-1)):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(**bad))


def test_manifest_contiguity_invariant():
    with pytest.raises(ValueError):
        DatasetManifest([ReIDSample("a.png", 0, 0), ReIDSample("b.png", 2, 0)], 3)


# ---- filenames / directories ----

def test_parse_filename_grammar():
    assert parse_filename("0002_c1s1_000451_03.jpg") == (2, 0)
    assert parse_filename("-1_c3s2_000000_00.jpg") == (-1, 2)
    assert parse_filename("0000_c6s4_002202_01.jpg") == (0, 5)
    assert parse_filename("bounding_box_test/1501_c6s4_001902_01.png") == (1501, 5)
    for bad in ("Thumbs.db", "abcd_c1s1_000451_03.jpg", "0002_s1_000451_03.jpg", "0002_c1s1.jpg"):
        assert parse_filename(bad) is None


def _touch_png(path):
    write_png(path, np.zeros((4, 2, 3), dtype=np.uint8))


def test_hand_counted_directory(tmp_path):
    names = {
        "bounding_box_train": ["0007_c1s1_000001_00.jpg", "0007_c2s1_000002_00.jpg",
                               "0003_c1s1_000003_00.jpg", "0003_c1s1_000004_00.jpg",
                               "0011_c2s1_000005_00.jpg", "0011_c1s1_000006_00.jpg"],
        "query": ["0007_c1s1_000007_00.jpg", "0003_c2s1_000008_00.jpg"],
        "bounding_box_test": ["0007_c2s1_000009_00.jpg", "0003_c1s1_000010_00.jpg",
                              "0011_c2s1_000011_00.jpg", "0000_c1s1_000012_00.jpg"],
    }
    for d, files in names.items():
        os.makedirs(tmp_path / d)
        for f in files:
            _touch_png(tmp_path / d / f)
    _touch_png(tmp_path / "bounding_box_test" / "-1_c1s1_000013_00.jpg")
    (tmp_path / "query" / "notes.txt").write_text("x")
    m = parse_reid_dir(str(tmp_path))
    assert m.counts() == {"train": 6, "query": 2, "gallery": 4}
    assert m.n_identities == 3
    assert m.skipped == 1
    # raw ids 3, 7, 11 -> 0, 1, 2; distractor 0000 gets the first unseen label
    by_file = {os.path.basename(s.file): s for s in m.samples}
    assert by_file["0003_c1s1_000003_00.jpg"].identity == 0
    assert by_file["0007_c2s1_000002_00.jpg"].identity == 1
    assert by_file["0007_c2s1_000002_00.jpg"].camera == 1
    assert by_file["0011_c2s1_000005_00.jpg"].identity == 2
    assert by_file["0000_c1s1_000012_00.jpg"].identity == 3
    assert by_file["0000_c1s1_000012_00.jpg"].split == "gallery"
    assert "-1_c1s1_000013_00.jpg" not in by_file
    assert m.load_image(m.samples[0]).shape == (4, 2, 3)


def test_flat_directory_is_train(tmp_path):
    for f in ("0005_c1s1_000001_00.jpg", "0009_c2s1_000002_00.jpg"):
        _touch_png(tmp_path / f)
    m = parse_reid_dir(str(tmp_path))
    assert m.counts()["train"] == 2 and m.n_identities == 2


def test_missing_directory():
    with pytest.raises(FileNotFoundError):
        parse_reid_dir("/nonexistent/reid")


def test_export_parse_round_trip(tmp_path):
    m = generate_synthetic(SyntheticSpec(seed=5, **SMALL))
    path = export_manifest(m, str(tmp_path))
    parsed = parse_reid_dir(str(tmp_path))
    assert parsed.samples == m.samples
    assert parsed.n_identities == m.n_identities
    loaded = DatasetManifest.load(path)
    assert loaded.samples == m.samples
    for s in m.samples:
        assert np.array_equal(parsed.load_image(s), m.load_image(s))


# ---- samplers ----

def _manifest_with(n_train, n_ids):
    samples = [ReIDSample(f"{i}.png", i % n_ids, 0) for i in range(n_train)]
    return DatasetManifest(samples, n_ids)


def test_stage1_batches_partition():
    m = _manifest_with(130, 10)
    batches = list(stage1_batches(m, 64, np.random.default_rng(0)))
    assert len(batches) == 2 and all(len(b) == 64 for b in batches)
    seen = np.concatenate(batches)
    assert len(set(seen.tolist())) == 128
    with pytest.raises(ValueError):
        list(stage1_batches(m, 131, np.random.default_rng(0)))


def test_stage1_identity_frequency():
    # identity i owns i + 1 images; long-run frequency follows the image counts
    samples = [ReIDSample(f"{i}_{k}.png", i, 0) for i in range(8) for k in range(i + 1)]
    m = DatasetManifest(samples, 8)
    labels = np.array([s.identity for s in m.split("train")])
    rng = np.random.default_rng(1)
    counts = np.zeros(8)
    for _ in range(2000):
        for b in stage1_batches(m, 7, rng):
            counts += np.bincount(labels[b], minlength=8)
    freq = counts / counts.sum()
    expected = np.arange(1, 9) / 36
    assert np.abs(freq - expected).max() <= 0.02


def test_pk_batches_structure():
    m = generate_synthetic(SyntheticSpec())
    labels = np.array([s.identity for s in m.split("train")])
    rng = np.random.default_rng(2)
    batches = list(pk_batches(m, 16, 4, rng, n_batches=100))
    assert len(batches) == 100
    for b in batches:
        assert len(b) == 64
        ids, counts = np.unique(labels[b], return_counts=True)
        assert len(ids) == 16 and (counts == 4).all()
        # grouped: rows 4k..4k+3 share one identity
        assert (labels[b].reshape(16, 4) == labels[b].reshape(16, 4)[:, :1]).all()


def test_pk_resamples_small_identities():
    samples = [ReIDSample("a0.png", 0, 0), ReIDSample("b0.png", 1, 0), ReIDSample("b1.png", 1, 1)]
    m = DatasetManifest(samples, 2)
    (b,) = pk_batches(m, 2, 4, np.random.default_rng(0), n_batches=1)
    labels = np.array([0, 1, 1])[b]
    assert sorted(np.bincount(labels).tolist()) == [4, 4]


def test_pk_guards():
    m = _manifest_with(20, 4)
    with pytest.raises(ValueError):
        next(pk_batches(m, 1, 4, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        next(pk_batches(m, 5, 4, np.random.default_rng(0)))


def test_samplers_reproducible():
    m = generate_synthetic(SyntheticSpec(**SMALL))
    a = [b.tolist() for b in pk_batches(m, 2, 4, np.random.default_rng(9), 5)]
    b = [b.tolist() for b in pk_batches(m, 2, 4, np.random.default_rng(9), 5)]
    assert a == b
