"""Optimization loops: supervised source training and target adaptation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, prototypes
from . import tensor as T
from .model import SegNet
from .prototypes import AdaptConfig, PrototypeBank
from .scenes import IGNORE, LabeledScene
from .tensor import Tensor
from .tensor_io import DataError


@dataclass
class AugmentConfig:
    resize: bool = True
    ratio: tuple[float, float] = (0.5, 2.0)
    hflip: bool = True
    crop: bool = True


@dataclass
class TrainConfig:
    lr0: float = 5e-5
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 2
    max_iters: int = 300
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_target: AugmentConfig = field(default_factory=lambda: AugmentConfig(resize=False))

    def __post_init__(self):
        if self.lr0 <= 0 or self.poly_power <= 0:
            raise ValueError("lr0 and poly power must be positive")


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float) -> float:
    """lr0 * (1 - iter/max_iter)^power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError("iteration outside [0, max_iter]")
    return lr0 * (1.0 - iteration / max_iter) ** power


class AdamW:
    """Decoupled weight decay Adam with bias-corrected moments."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        b1, b2 = self.cfg.betas
        eps = self.cfg.eps
        wd = self.cfg.weight_decay
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + eps) + wd * p.data
            p.data = p.data - lr * update
            p.grad = None


# ---------------------------------------------------------------------------
# augmentation


def _resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img
    mh = T._resample_matrix(h, out_h)
    mw = T._resample_matrix(w, out_w)
    t = np.tensordot(mh, img, axes=(1, 0))
    return np.tensordot(t, mw, axes=(1, 1)).transpose(0, 2, 1)


def _resize_labels(lab: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = lab.shape
    if (h, w) == (out_h, out_w):
        return lab
    rows = np.minimum((np.arange(out_h) + 0.5) * h // out_h, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_w) + 0.5) * w // out_w, w - 1).astype(np.intp)
    return lab[rows][:, cols]


def hflip_scene(scene: LabeledScene) -> LabeledScene:
    labels = None if scene.labels is None else np.ascontiguousarray(scene.labels[:, ::-1])
    return LabeledScene(
        image=np.ascontiguousarray(scene.image[:, ::-1]),
        labels=labels,
        domain=scene.domain,
        scene_id=scene.scene_id,
    )


def augment_scene(scene: LabeledScene, aug: AugmentConfig, rng: np.random.Generator) -> LabeledScene:
    """Random resize / horizontal flip / crop back to the scene's native size.

    When the resized scene is smaller than the crop window, the border is
    padded with zeros (image) and the ignore label.
    """
    out_h, out_w, _ = scene.image.shape
    img, lab = scene.image, scene.labels
    if aug.resize:
        ratio = rng.uniform(*aug.ratio)
        nh = max(1, round(out_h * ratio))
        nw = max(1, round(out_w * ratio))
        img = _resize_image(img, nh, nw)
        lab = None if lab is None else _resize_labels(lab, nh, nw)
    if aug.hflip and rng.random() < 0.5:
        img = np.ascontiguousarray(img[:, ::-1])
        lab = None if lab is None else np.ascontiguousarray(lab[:, ::-1])

    ph, pw = max(img.shape[0], out_h), max(img.shape[1], out_w)
    if (ph, pw) != img.shape[:2]:
        pad_img = np.zeros((ph, pw, 3))
        pad_img[: img.shape[0], : img.shape[1]] = img
        img = pad_img
        if lab is not None:
            # label maps may carry extra trailing channels (stacked variants)
            pad_lab = np.full((ph, pw) + lab.shape[2:], IGNORE, dtype=np.int64)
            pad_lab[: lab.shape[0], : lab.shape[1]] = lab
            lab = pad_lab
    if aug.crop:
        top = int(rng.integers(0, ph - out_h + 1))
        left = int(rng.integers(0, pw - out_w + 1))
    else:
        top = left = 0
    img = img[top : top + out_h, left : left + out_w]
    lab = None if lab is None else lab[top : top + out_h, left : left + out_w]
    return LabeledScene(
        image=np.ascontiguousarray(img), labels=lab, domain=scene.domain, scene_id=scene.scene_id
    )


# ---------------------------------------------------------------------------
# loops


def _write_log(path, entries: list[dict]) -> None:
    if path is None:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def train_source(
    net: SegNet, scenes: list[LabeledScene], cfg: TrainConfig, log_path=None
) -> list[dict]:
    """Supervised training on labeled source scenes; deterministic in seed."""
    if not scenes:
        raise DataError("no labeled source scenes")
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 102]))
    opt = AdamW(cfg)
    params = net.parameters()
    logs = []
    for it in range(cfg.max_iters):
        lr = poly_lr(it, cfg.max_iters, cfg.lr0, cfg.poly_power)
        idx = data_rng.integers(0, len(scenes), cfg.batch_size)
        losses = []
        for i in idx:
            item = augment_scene(scenes[i], cfg.augment, aug_rng)
            out = net.forward(Tensor(item.image))
            losses.append(T.cross_entropy(out.logits, item.labels))
        loss = losses[0]
        for extra in losses[1:]:
            loss = T.add(loss, extra)
        loss = T.scale(loss, 1.0 / len(losses))
        loss.backward()
        opt.step(params, lr)
        seg = float(loss.data)
        logs.append(
            {
                "iter": it,
                "lr": lr,
                "loss_seg": seg,
                "loss_ssl": 0.0,
                "loss_mpa_s": 0.0,
                "loss_mpa_t": 0.0,
                "total": seg,
            }
        )
    _write_log(log_path, logs)
    return logs


def adapt(
    net: SegNet,
    bank: PrototypeBank | None,
    source_scenes: list[LabeledScene],
    target_scenes: list[LabeledScene],
    cfg: TrainConfig,
    acfg: AdaptConfig,
    mode: str = "mpa+ssl",
    log_path=None,
) -> list[dict]:
    """Adaptation over paired source/target batches with a fresh optimizer.

    Modes: "ssl" (pseudo-label self-training only), "mpa" (prototype
    alignment only), "mpa+ssl" (both).  In the alignment modes the bank is
    updated online each iteration from the current batch of both domains,
    before the loss uses it.
    """
    if mode not in prototypes.MODES:
        raise ValueError(f"unknown adaptation mode {mode!r}")
    if mode != "ssl" and bank is None:
        raise DataError(f"mode {mode!r} requires an initialized prototype bank")
    if not source_scenes or not target_scenes:
        raise DataError("adaptation needs scenes in both domains")
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 201]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    opt = AdamW(cfg)
    params = net.parameters()

    # self-training round: pseudo-label every target scene with the incoming
    # checkpoint once, then treat those maps as fixed labels for the round.
    # The hard CE gets the confidence-thresholded map; feature alignment gets
    # the plain argmax map (stacked on a second channel) so it also covers
    # the pixels the CE skips.  The prototype bank, by contrast, refreshes
    # its pseudo-labels from the live model every iteration.
    pseudo_scenes = []
    tgt_border = net.border_for(target_scenes[0].domain)
    for scene in target_scenes:
        logits = net.forward(Tensor(scene.image), tgt_border).logits.data
        stacked = np.stack(
            [
                prototypes.pseudo_label(logits, acfg.threshold),
                prototypes.pseudo_label(logits, None),
            ],
            axis=-1,
        )
        pseudo_scenes.append(
            LabeledScene(
                image=scene.image,
                labels=stacked,
                domain=scene.domain,
                scene_id=scene.scene_id,
            )
        )

    logs = []
    for it in range(cfg.max_iters):
        lr = poly_lr(it, cfg.max_iters, cfg.lr0, cfg.poly_power)
        src_idx = data_rng.integers(0, len(source_scenes), cfg.batch_size)
        tgt_idx = data_rng.integers(0, len(target_scenes), cfg.batch_size)

        source_pairs = []
        for i in src_idx:
            item = augment_scene(source_scenes[i], cfg.augment, aug_rng)
            source_pairs.append((net.forward(Tensor(item.image)), item.labels))
        target_pairs = []
        for i in tgt_idx:
            item = augment_scene(pseudo_scenes[i], cfg.augment_target, aug_rng)
            out = net.forward(Tensor(item.image), tgt_border)
            if acfg.refresh_pseudo:
                logits = out.logits.data
                target_pairs.append(
                    (
                        out,
                        prototypes.pseudo_label(logits, acfg.threshold),
                        prototypes.pseudo_label(logits, None),
                    )
                )
            else:
                target_pairs.append((out, item.labels[..., 0], item.labels[..., 1]))

        if mode != "ssl":
            # bank ingestion re-labels targets with the live model each
            # iteration (plain argmax); the loss terms keep the round labels
            embs, labs = [], []
            for out, lab in source_pairs:
                fh, fw = out.fused.shape[:2]
                embs.append(out.fused.data.reshape(-1, bank.dim))
                labs.append(prototypes.downsample_labels(lab, fh, fw).reshape(-1))
            for out, _ssl, _al in target_pairs:
                fh, fw = out.fused.shape[:2]
                live = prototypes.pseudo_label(out.logits.data)
                embs.append(out.fused.data.reshape(-1, bank.dim))
                labs.append(prototypes.downsample_labels(live, fh, fw).reshape(-1))
            bank.update(np.concatenate(embs), np.concatenate(labs))

        total, parts = prototypes.total_loss(source_pairs, target_pairs, bank, acfg, mode)
        total.backward()
        opt.step(params, lr)
        logs.append({"iter": it, "lr": lr, **parts})
    _write_log(log_path, logs)
    return logs


# ---------------------------------------------------------------------------
# evaluation over scene lists


def evaluate_scenes(
    net: SegNet, scenes: list[LabeledScene], classes: int, n_sectors: int = 8
) -> tuple[metrics.ConfusionMatrix, list[metrics.ConfusionMatrix] | None]:
    """Confusion matrix over labeled scenes (+ sector matrices for panoramas)."""
    cm = metrics.ConfusionMatrix(classes)
    sector_cms = None
    for scene in scenes:
        if scene.labels is None:
            raise DataError(f"scene {scene.scene_id} has no labels to evaluate against")
        pred = net.predict(scene.image, scene.domain)
        cm.update(pred, scene.labels)
        if scene.domain == "panorama":
            cms = metrics.polar_eval(pred, scene.labels, classes, n_sectors)
            sector_cms = cms if sector_cms is None else metrics.merge_sector_lists(sector_cms, cms)
    return cm, sector_cms
