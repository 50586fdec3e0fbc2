"""Synthetic ReID data, Market-style directory ingestion and the two batch samplers."""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels as K

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
FILENAME = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(?:jpe?g|png|bmp)$", re.IGNORECASE)


@dataclass(frozen=True)
class ReIDSample:
    file: str
    identity: int
    camera: int
    split: str = "train"


@dataclass
class DatasetManifest:
    samples: list
    n_identities: int
    root: str = ""
    images: dict = field(default_factory=dict, repr=False, compare=False)
    skipped: int = field(default=0, compare=False)
    occluded: int = field(default=0, compare=False)

    def __post_init__(self):
        train_ids = sorted({s.identity for s in self.samples if s.split == "train"})
        if train_ids and train_ids != list(range(self.n_identities)):
            raise ValueError("train identities must form a contiguous 0..N-1 range")

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    def counts(self):
        return {name: sum(1 for s in self.samples if s.split == name) for name in SPLITS}

    def load_image(self, sample):
        """Float ``(H, W, 3)`` image in ``[0, 1]``, from memory or from disk."""
        img = self.images.get(sample.file)
        if img is None:
            img = read_png(os.path.join(self.root, sample.file))
            self.images[sample.file] = img
        return img.astype(np.float64) / 255.0

    def load_split(self, name):
        return [self.load_image(s) for s in self.split(name)]

    def mean_pixel(self):
        imgs = self.load_split("train")
        return np.mean([im.reshape(-1, 3).mean(axis=0) for im in imgs], axis=0)

    def to_json(self):
        return {"identities": self.n_identities,
                "samples": [{"file": s.file, "id": s.identity, "cam": s.camera, "split": s.split}
                            for s in self.samples]}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        samples = [ReIDSample(d["file"], int(d["id"]), int(d["cam"]), d["split"])
                   for d in doc["samples"]]
        for s in samples:
            if s.split not in SPLITS:
                raise ValueError(f"unknown split {s.split!r}")
        return cls(samples, int(doc["identities"]), root=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------- PNG i/o

def write_png(path, img):
    from PIL import Image
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path)


def read_png(path):
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    n_identities: int = 20
    train_per_id: int = 8
    query_per_id: int = 4
    gallery_per_id: int = 8
    cameras: int = 2
    height: int = 64
    width: int = 32
    clutter: float = 0.3
    illumination: float = 0.3
    occluder_prob: float = 0.4
    kind: str = "person"
    seed: int = 0

    def validate(self):
        counts = (self.n_identities, self.cameras, self.height, self.width)
        if min(counts) < 1 or self.train_per_id < 2:
            raise ValueError("identity/camera/extent counts must be >= 1 and train_per_id >= 2")
        if min(self.query_per_id, self.gallery_per_id) < 0:
            raise ValueError("split sizes must be nonnegative")
        if self.query_per_id and self.cameras < 2:
            raise ValueError("query images need a second camera to have any valid match")
        if self.query_per_id and self.gallery_per_id < self.cameras:
            raise ValueError("gallery_per_id must cover every camera")
        if not 0 <= self.occluder_prob <= 1:
            raise ValueError("occluder_prob must lie in [0, 1]")
        if min(self.clutter, self.illumination) < 0:
            raise ValueError("nuisance strengths must be nonnegative")
        return self

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def _identity_look(rng):
    """Latent appearance: colours, torso pattern and body proportions."""
    return {
        "head": rng.uniform(0.15, 0.95, 3),
        "torso": rng.uniform(0.05, 0.95, 3),
        "torso2": rng.uniform(0.05, 0.95, 3),
        "legs": rng.uniform(0.05, 0.95, 3),
        "pattern": int(rng.integers(0, 4)),
        "stripes": int(rng.integers(2, 5)),
        "body_w": rng.uniform(0.45, 0.8),
        "torso_h": rng.uniform(0.3, 0.45),
    }


def _figure_rects(look, H, W, shift):
    """Rectangles (top, left, h, w) and colours for one rendered figure."""
    rects, colors = [], []
    bw = max(2, int(round(look["body_w"] * W)))
    left = (W - bw) // 2 + shift
    head_h = max(2, H // 8)
    head_w = max(2, bw // 2)
    rects.append((H // 16, (W - head_w) // 2 + shift, head_h, head_w))
    colors.append(look["head"])
    t0 = H // 16 + head_h
    th = max(2, int(round(look["torso_h"] * H)))
    rects.append((t0, left, th, bw))
    colors.append(look["torso"])
    p, n = look["pattern"], look["stripes"]
    if p == 1:    # horizontal stripes
        step = max(1, th // (2 * n))
        for k in range(n):
            rects.append((t0 + (2 * k + 1) * step, left, step, bw))
            colors.append(look["torso2"])
    elif p == 2:  # vertical stripes
        step = max(1, bw // (2 * n))
        for k in range(n):
            rects.append((t0, left + (2 * k + 1) * step, th, step))
            colors.append(look["torso2"])
    elif p == 3:  # two-tone split
        rects.append((t0, left + bw // 2, th, bw - bw // 2))
        colors.append(look["torso2"])
    lt = t0 + th
    lh = H - lt - H // 16
    gap = max(1, bw // 6)
    leg_w = (bw - gap) // 2
    rects.append((lt, left, lh, leg_w))
    rects.append((lt, left + leg_w + gap, lh, leg_w))
    colors += [look["legs"], look["legs"]]
    return rects, colors


def _camera_light(spec, rng):
    """Per-camera gain and colour cast scaled by the illumination strength."""
    gains = 1.0 + spec.illumination * rng.uniform(-0.6, 0.6, spec.cameras)
    casts = spec.illumination * rng.uniform(-0.15, 0.15, (spec.cameras, 3))
    return gains, casts


def render_image(spec, look, camera, light, rng):
    """Render one image; returns ``(uint8 image, occluded flag)``."""
    H, W = spec.height, spec.width
    canvas = np.full((H, W, 3), 0.5)
    # draw order is fixed so zero strengths consume the same rng stream
    n_clutter = rng.integers(3, 7)
    c_rects = np.column_stack([rng.integers(0, H, n_clutter), rng.integers(0, W, n_clutter),
                               rng.integers(2, H // 3 + 2, n_clutter),
                               rng.integers(2, W // 2 + 2, n_clutter)])
    c_cols = rng.uniform(0, 1, (n_clutter, 3))
    noise = rng.normal(0, 1, (H, W, 3))
    shift = int(rng.integers(-2, 3))
    occ = rng.uniform() < spec.occluder_prob
    o_h = int(rng.integers(H // 4, H // 2 + 1))
    o_w = int(rng.integers(W // 2, W + 1))
    o_t = int(rng.integers(0, H - o_h + 1))
    o_l = int(rng.integers(0, W - o_w + 1))
    o_col = rng.uniform(0, 1, 3)
    jitter = rng.normal(0, 1)

    if spec.clutter > 0:
        mix = min(1.0, spec.clutter)
        c_cols = 0.5 + mix * (c_cols - 0.5)
        K.render_rects(canvas, c_rects, c_cols)
        shift = int(round(shift * min(1.0, spec.clutter)))
    else:
        shift = 0
    rects, colors = _figure_rects(look, H, W, shift)
    K.render_rects(canvas, rects, np.asarray(colors))
    if occ:
        K.render_rects(canvas, [(o_t, o_l, o_h, o_w)], o_col[None])
    gains, casts = light
    gain = gains[camera] * (1.0 + 0.05 * spec.illumination * jitter)
    canvas = canvas * gain + casts[camera]
    if spec.clutter > 0:
        canvas = canvas + 0.03 * spec.clutter * noise
    img = np.clip(np.round(np.clip(canvas, 0, 1) * 255), 0, 255).astype(np.uint8)
    return img, bool(occ)


def sample_filename(identity, camera, frame):
    return f"{identity + 1:04d}_c{camera + 1}s1_{frame:06d}_00.png"


def generate_synthetic(spec):
    """Deterministic in-memory dataset; every image draws from its own rng substream."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    look_ss, light_ss, img_ss = root.spawn(3)
    looks = [_identity_look(np.random.default_rng(s)) for s in look_ss.spawn(spec.n_identities)]
    light = _camera_light(spec, np.random.default_rng(light_ss))
    per_id = spec.train_per_id + spec.query_per_id + spec.gallery_per_id
    id_streams = img_ss.spawn(spec.n_identities)
    samples, images, occluded = [], {}, 0
    for ident in range(spec.n_identities):
        streams = id_streams[ident].spawn(per_id)
        frame = 0
        plan = ([("train", i % spec.cameras) for i in range(spec.train_per_id)]
                + [("query", 0)] * spec.query_per_id
                + [("gallery", i % spec.cameras) for i in range(spec.gallery_per_id)])
        for (split, cam), ss in zip(plan, streams):
            img, occ = render_image(spec, looks[ident], cam, light, np.random.default_rng(ss))
            occluded += occ
            name = f"{SPLIT_DIRS[split]}/{sample_filename(ident, cam, frame)}"
            frame += 1
            images[name] = img
            samples.append(ReIDSample(name, ident, cam, split))
    order = {s: i for i, s in enumerate(SPLITS)}
    samples.sort(key=lambda s: (order[s.split], s.file))
    return DatasetManifest(samples, spec.n_identities, "", images, 0, occluded)


def export_manifest(manifest, out_dir):
    """Write every in-memory image as PNG under ``out_dir`` plus ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    for d in SPLIT_DIRS.values():
        os.makedirs(os.path.join(out_dir, d), exist_ok=True)
    for s in manifest.samples:
        write_png(os.path.join(out_dir, s.file), manifest.images[s.file])
    manifest.save(os.path.join(out_dir, "manifest.json"))
    manifest.root = os.path.abspath(out_dir)
    return os.path.join(out_dir, "manifest.json")


# ---------------------------------------------------------------- real data

def parse_filename(name):
    """``(raw_id, camera)`` from a Market-1501 style name, or ``None``.

    Cameras are 1-based in file names and 0-based in the result.
    """
    m = FILENAME.match(os.path.basename(name))
    if not m:
        return None
    return int(m.group(1)), int(m.group(2)) - 1


def parse_reid_dir(path):
    """Build a manifest from a Market-1501 style directory.

    With ``bounding_box_train``/``query``/``bounding_box_test`` sub-directories
    each maps to its split; otherwise every file in ``path`` is training data.
    Junk (id -1) is dropped, distractors (id 0) are kept in the gallery only,
    and train identities are relabelled to ``0..N-1``.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    layout = {s: d for s, d in SPLIT_DIRS.items() if os.path.isdir(os.path.join(path, d))}
    if not layout:
        layout = {"train": ""}
    raw, skipped = [], 0
    for split, sub in layout.items():
        for name in sorted(os.listdir(os.path.join(path, sub))):
            full = os.path.join(path, sub, name)
            if not os.path.isfile(full):
                continue
            parsed = parse_filename(name)
            if parsed is None:
                log.warning("skipping unparseable file %s", full)
                skipped += 1
                continue
            pid, cam = parsed
            if pid == -1 or (pid == 0 and split != "gallery"):
                continue
            raw.append((split, os.path.join(sub, name) if sub else name, pid, cam))
    train_ids = sorted({pid for split, _, pid, _ in raw if split == "train"})
    relabel = {pid: i for i, pid in enumerate(train_ids)}
    extra = sorted({pid for _, _, pid, _ in raw if pid not in relabel})
    relabel.update({pid: len(train_ids) + i for i, pid in enumerate(extra)})
    samples = [ReIDSample(f, relabel[pid], cam, split) for split, f, pid, cam in raw]
    order = {s: i for i, s in enumerate(SPLITS)}
    samples.sort(key=lambda s: (order[s.split], s.file))
    return DatasetManifest(samples, len(train_ids), os.path.abspath(path), skipped=skipped)


# ---------------------------------------------------------------- samplers

def stage1_batches(manifest, batch_size, rng):
    """One epoch of uniformly shuffled train indices; the short tail is dropped."""
    n = len(manifest.split("train"))
    if n == 0:
        raise ValueError("empty train split")
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds train size {n}")
    perm = rng.permutation(n)
    for b in range(n // batch_size):
        yield perm[b * batch_size:(b + 1) * batch_size]


def pk_batches(manifest, P, K, rng, n_batches=None):
    """``P`` identities x ``K`` images per batch, grouped by identity.

    Identities are drawn without replacement inside a batch; an identity with
    fewer than ``K`` images is resampled with replacement.
    """
    if P < 2:
        raise ValueError("PK sampling needs P >= 2 identities per batch")
    train = manifest.split("train")
    by_id = {}
    for i, s in enumerate(train):
        by_id.setdefault(s.identity, []).append(i)
    ids = np.array(sorted(by_id))
    if len(ids) < P:
        raise ValueError(f"only {len(ids)} identities, need {P}")
    if n_batches is None:
        n_batches = max(1, len(train) // (P * K))
    for _ in range(n_batches):
        chosen = rng.choice(ids, size=P, replace=False)
        idx = []
        for pid in chosen:
            pool = by_id[int(pid)]
            idx.extend(rng.choice(pool, size=K, replace=len(pool) < K))
        yield np.asarray(idx, dtype=np.int64)


def spec_dict(spec):
    return asdict(spec)
