"""Two-stage training: prompt learning with frozen encoders, then image-encoder tuning.

Stage 1 optimises only the prompt bank with the text/image contrastive losses
plus NT-Xent over masked prompt pairs. Stage 2 freezes the text side, and
trains the image encoder and a classifier head with the identity-text cross
entropy, triplet and ID losses plus NT-Xent over erased image pairs.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .blobs import TruncatedError, read_blob, write_blob
from .config import canonical, digest
from .data import pk_batches, stage1_batches
from .image import ImageEncoder, embed_images, erase
from .nn import Linear
from .optim import Adam, AdamState, cosine_lr, warmup_step_lr
from .tensor import NonFiniteError, Tensor
from .text import PromptBank, PromptBuilder, TextEncoder, Vocabulary, sample_keep

log = logging.getLogger(__name__)

MAGIC = b"SVLL"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Stage1Config:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3.5e-4
    alpha: float = 0.5
    lambda_lss: float = 0.8
    tau: float = 0.07
    detach_masked: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lambda_lss < 0:
            raise ValueError("lambda_lss must be nonnegative")


@dataclass
class Stage2Config:
    epochs: int = 60
    P: int = 16
    K: int = 4
    lr_start: float = 1e-3
    lr_peak: float = 1e-2
    warmup_epochs: int = 10
    milestones: tuple = (30, 50)
    gamma: float = 0.1
    beta: float = 1 / 3
    lambda_vss: float = 0.8
    tau: float = 0.07
    margin: float = 0.3
    epsilon: float = 0.1
    pair_mode: str = "identity"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.lambda_vss < 0:
            raise ValueError("lambda_vss must be nonnegative")
        self.milestones = tuple(self.milestones)

    def lr(self, epoch):
        return warmup_step_lr(epoch, self.lr_start, self.lr_peak, self.warmup_epochs,
                              self.milestones, self.gamma)


class Models:
    """Every learnable piece of the system plus the frozen identity text features."""

    def __init__(self, model_cfg, n_identities, seed):
        mc = model_cfg
        ss = np.random.SeedSequence([seed, 7])
        r_text, r_img, r_bank, r_head = (np.random.default_rng(s) for s in ss.spawn(4))
        self.cfg = dict(mc)
        self.vocab = Vocabulary.for_templates(mc["n_slots"])
        self.text = TextEncoder(len(self.vocab), mc["d_word"], mc["d_embed"], mc["text_layers"],
                                mc["text_heads"], mc["context"], r_text)
        self.image = ImageEncoder(mc["height"], mc["width"], mc["patch"], mc["image_dim"],
                                  mc["d_embed"], mc["image_layers"], mc["image_heads"], r_img)
        self.bank = PromptBank(n_identities, mc["n_slots"], mc["d_word"], r_bank)
        self.head = Linear(mc["d_embed"], n_identities, r_head, bias=False)
        self.builder = PromptBuilder(self.vocab, self.text, mc.get("kind", "person"))
        self.id_text_features = None

    def groups(self):
        return {"text": self.text, "image": self.image, "bank": self.bank, "head": self.head}

    def digests(self):
        return {k: m.digest() for k, m in self.groups().items()}

    def named_arrays(self):
        out = []
        for g, mod in self.groups().items():
            out += [(f"{g}.{n}", p.data) for n, p in mod.named_parameters()]
        if self.id_text_features is not None:
            out.append(("id_text_features", self.id_text_features))
        return out

    def load_arrays(self, arrays):
        for g, mod in self.groups().items():
            prefix = g + "."
            mod.load_state_dict({k[len(prefix):]: v for k, v in arrays.items()
                                 if k.startswith(prefix)})
        feats = arrays.get("id_text_features")
        self.id_text_features = None if feats is None else np.array(feats)


# ---------------------------------------------------------------- metrics log

class MetricsLog:
    """Tab-separated ``step<TAB>name<TAB>value`` lines after a ``#`` header."""

    def __init__(self, path=None, header=None, append=False):
        self.lines = []
        self.path = path
        if path is not None and not append:
            with open(path, "w", encoding="utf-8") as fh:
                for h in header or ():
                    fh.write(f"# {h}\n")

    def log(self, step, name, value):
        line = f"{step}\t{name}\t{float(value)!r}"
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def epoch_rngs(seed, stage, epoch):
    """Independent sampling and augmentation streams for one epoch."""
    s, a = np.random.SeedSequence([seed, stage, epoch]).spawn(2)
    return np.random.default_rng(s), np.random.default_rng(a)


def _guard(fn, what):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingError(f"{what}: {exc}") from exc


def _as_batch(images):
    return np.stack(images).astype(T.default_dtype())


# ---------------------------------------------------------------- stage 1

@dataclass
class StageReport:
    losses: list = field(default_factory=list)
    monitor: list = field(default_factory=list)
    entry_digests: dict = field(default_factory=dict)
    exit_digests: dict = field(default_factory=dict)
    optimizer: object = None
    epochs_done: int = 0


def text_image_similarity(models, img_emb, labels):
    """Mean cosine between each train image and its own identity's text feature."""
    feats = compute_id_text_features(models)
    return float(np.mean(np.sum(img_emb * feats[labels], axis=1)))


def run_stage1(manifest, models, cfg, metrics=None, start_epoch=0, stop_epoch=None,
               opt_state=None, monitor=False):
    """Optimise the prompt bank; both encoders stay bitwise frozen.

    Returns a ``StageReport`` whose ``optimizer`` can be checkpointed to resume.
    """
    metrics = metrics or MetricsLog()
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    models.text.freeze()
    models.image.freeze()
    models.head.freeze()
    models.bank.unfreeze()
    report = StageReport(entry_digests=models.digests())

    train = manifest.split("train")
    labels_all = np.array([s.identity for s in train])
    img_emb = embed_images(models.image, [manifest.load_image(s) for s in train])
    opt = Adam([models.bank.tokens])
    if opt_state is not None:
        opt.state = opt_state
    n_batches = len(train) // cfg.batch_size
    M = models.bank.n_slots
    for epoch in range(start_epoch, stop):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        rng_s, rng_a = epoch_rngs(cfg.seed, 1, epoch)
        metrics.log(epoch * n_batches, "lr", lr)
        for b, idx in enumerate(stage1_batches(manifest, cfg.batch_size, rng_s)):
            step = epoch * n_batches + b
            labels = labels_all[idx]
            uniq, inv = np.unique(labels, return_inverse=True)

            def forward():
                image = Tensor(img_emb[idx])
                text = models.text(models.builder.batch(models.bank, uniq))[inv]
                t2i = L.loss_t2i(text, image, labels)
                i2t = L.loss_i2t(image, text, labels)
                parts = {"t2i": t2i, "i2t": i2t}
                if cfg.lambda_lss > 0:
                    keep = sample_keep(2 * len(uniq), M, cfg.alpha, rng_a)
                    bank = models.bank
                    if cfg.detach_masked:
                        bank = PromptBank.__new__(PromptBank)
                        bank.tokens = models.bank.tokens.detach()
                    z = models.text(models.builder.batch(bank, np.repeat(uniq, 2), keep))
                    parts["lss"] = L.loss_ntxent(z, cfg.tau)
                    total = L.stage1_total(t2i, i2t, parts["lss"], cfg.lambda_lss)
                else:
                    total = t2i + i2t
                grads = T.gradients(total, [models.bank.tokens])
                return total, parts, grads

            total, parts, grads = _guard(forward, f"stage 1 epoch {epoch} step {step}")
            opt.step(grads, lr)
            for k, v in parts.items():
                metrics.log(step, k, v.item())
            metrics.log(step, "stage1", total.item())
            report.losses.append(total.item())
        if monitor:
            report.monitor.append(text_image_similarity(models, img_emb, labels_all))
    report.exit_digests = models.digests()
    report.optimizer = opt.state
    report.epochs_done = stop
    models.id_text_features = compute_id_text_features(models)
    return report


def compute_id_text_features(models):
    """One unit-norm text feature per identity from the (frozen) bank."""
    with T.no_grad():
        ids = np.arange(models.bank.n_identities)
        feats = models.text(models.builder.batch(models.bank, ids)).data
    return np.asarray(feats, dtype=np.float32)


# ---------------------------------------------------------------- stage 2

def erased_pairs(batch_idx, labels, images, cfg, rng, fill):
    """Two independently erased views per identity in the batch, ordered as pairs."""
    views = []
    for pid in dict.fromkeys(labels.tolist()):
        rows = np.flatnonzero(labels == pid)
        if cfg.pair_mode == "instance" or len(rows) < 2:
            a = b = int(rng.choice(rows))
        else:
            a, b = (int(r) for r in rng.choice(rows, size=2, replace=False))
        for r in (a, b):
            views.append(erase(images[r], cfg.beta, rng, fill=fill).image)
    return views


def run_stage2(manifest, models, cfg, metrics=None, start_epoch=0, stop_epoch=None,
               opt_state=None):
    """Train the image encoder and classifier head; the text side stays frozen."""
    if models.id_text_features is None:
        raise TrainingError("stage 2 needs identity text features from stage 1")
    metrics = metrics or MetricsLog()
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    models.text.freeze()
    models.bank.freeze()
    models.image.unfreeze()
    models.head.unfreeze()
    report = StageReport(entry_digests=models.digests())

    train = manifest.split("train")
    labels_all = np.array([s.identity for s in train])
    images_all = [manifest.load_image(s) for s in train]
    fill = manifest.mean_pixel()
    feats = Tensor(models.id_text_features)
    params = models.image.parameters() + models.head.parameters()
    opt = Adam(params)
    if opt_state is not None:
        opt.state = opt_state
    n_batches = max(1, len(train) // (cfg.P * cfg.K))
    for epoch in range(start_epoch, stop):
        lr = cfg.lr(epoch)
        rng_s, rng_a = epoch_rngs(cfg.seed, 2, epoch)
        metrics.log(epoch * n_batches, "lr", lr)
        for b, idx in enumerate(pk_batches(manifest, cfg.P, cfg.K, rng_s, n_batches)):
            step = epoch * n_batches + b
            labels = labels_all[idx]
            images = [images_all[i] for i in idx]

            def forward():
                emb = models.image(_as_batch(images))
                parts = {
                    "i2tce": L.loss_i2tce(emb, feats, labels, cfg.epsilon),
                    "id": L.loss_id(models.head(emb), labels, cfg.epsilon),
                    "tri": L.loss_triplet(emb, labels, cfg.margin),
                }
                total = parts["i2tce"] + parts["id"] + parts["tri"]
                if cfg.lambda_vss > 0:
                    views = erased_pairs(idx, labels, images, cfg, rng_a, fill)
                    parts["vss"] = L.loss_ntxent(models.image(_as_batch(views)), cfg.tau)
                    total = L.stage2_total(parts["i2tce"], parts["id"], parts["tri"],
                                           parts["vss"], cfg.lambda_vss)
                return total, parts, T.gradients(total, params)

            total, parts, grads = _guard(forward, f"stage 2 epoch {epoch} step {step}")
            opt.step(grads, lr)
            for k, v in parts.items():
                metrics.log(step, k, v.item())
            metrics.log(step, "stage2", total.item())
            report.losses.append(total.item())
    report.exit_digests = models.digests()
    report.optimizer = opt.state
    report.epochs_done = stop
    return report


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    arrays: dict
    stage: int
    epoch: int
    config: dict
    adam: AdamState | None = None
    rng_state: dict | None = None
    vocab: str = ""

    @property
    def config_digest(self):
        return digest(self.config)


def checkpoint_from(models, stage, epoch, config, optimizer=None):
    rng_state = {"seed": config.get("seed", 0), "stage": stage, "next_epoch": epoch}
    return Checkpoint(dict(models.named_arrays()), stage, epoch, config, optimizer,
                      rng_state, models.vocab.dumps())


def dumps_checkpoint(ckpt):
    meta = {"stage": ckpt.stage, "epoch": ckpt.epoch, "config": ckpt.config,
            "rng_state": ckpt.rng_state, "vocab": ckpt.vocab,
            "adam_step": ckpt.adam.step if ckpt.adam else None}
    meta_raw = canonical(meta).encode("utf-8")
    blobs = sorted(ckpt.arrays.items())
    if ckpt.adam is not None:
        blobs += [(f"adam.m.{i:04d}", m) for i, m in enumerate(ckpt.adam.m)]
        blobs += [(f"adam.v.{i:04d}", v) for i, v in enumerate(ckpt.adam.v)]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(bytes.fromhex(ckpt.config_digest))
    buf.write(struct.pack("<Q", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<Q", len(blobs)))
    for name, arr in blobs:
        write_blob(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(ckpt))


def loads_checkpoint(raw):
    fh = io.BytesIO(raw)
    try:
        if fh.read(4) != MAGIC:
            raise CheckpointError("not an SVLL checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        stored = fh.read(32).hex()
        (n,) = struct.unpack("<Q", fh.read(8))
        meta_raw = fh.read(n)
        if len(meta_raw) != n:
            raise TruncatedError("metadata cut short")
        meta = json.loads(meta_raw)
        if digest(meta["config"]) != stored:
            raise CheckpointError("config digest mismatch: header does not match stored config")
        (count,) = struct.unpack("<Q", fh.read(8))
        arrays, ms, vs = {}, [], []
        for _ in range(count):
            name, arr = read_blob(fh)
            if name.startswith("adam.m."):
                ms.append(arr.copy())
            elif name.startswith("adam.v."):
                vs.append(arr.copy())
            else:
                arrays[name] = arr
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last blob")
    except (struct.error, TruncatedError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    adam = AdamState(ms, vs, meta["adam_step"]) if meta["adam_step"] is not None else None
    return Checkpoint(arrays, meta["stage"], meta["epoch"], meta["config"], adam,
                      meta["rng_state"], meta["vocab"])


def load_checkpoint(path, expected_digest=None):
    with open(path, "rb") as fh:
        ckpt = loads_checkpoint(fh.read())
    if expected_digest is not None and ckpt.config_digest != expected_digest:
        raise CheckpointError("config digest mismatch between checkpoint and current config")
    return ckpt


def models_from_checkpoint(ckpt, n_identities=None):
    n = n_identities if n_identities is not None else ckpt.arrays["bank.tokens"].shape[0]
    models = Models(ckpt.config["model"], n, ckpt.config.get("seed", 0))
    try:
        models.load_arrays(ckpt.arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not fit the model config: {exc}") from exc
    return models


def stage1_config(cfg):
    return Stage1Config(seed=cfg["seed"], **cfg["stage1"])


def stage2_config(cfg):
    return Stage2Config(seed=cfg["seed"], **cfg["stage2"])


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


__all__ = [
    "Stage1Config", "Stage2Config", "Models", "MetricsLog", "run_stage1", "run_stage2",
    "compute_id_text_features", "Checkpoint", "save_checkpoint", "load_checkpoint",
]
