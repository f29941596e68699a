"""Class prototypes over both domains and the feature-alignment loss.

A prototype is the running mean embedding of one class, pooled from source
pixels (ground-truth labels) and target pixels (pseudo-labels) alike.  The
bank is initialized with a full pass over both datasets and then updated
online with momentum.  The alignment loss softens each prototype map and the
fused features with a temperature and penalizes their KL divergence, plus a
small cross-entropy that ties class k to feature channel k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from . import tensor_io
from .tensor_io import DataError
from .scenes import IGNORE, LabeledScene
from .model import ForwardResult, SegNet


@dataclass
class AdaptConfig:
    temperature: float = 20.0
    lam: float = 0.9
    alpha: float = 0.001
    threshold: float | None = None
    momentum: float = 0.999
    refresh_pseudo: bool = False  # relabel targets from the live model each iteration

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")


def pseudo_label(logits: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Argmax class map; ties go to the lowest class index.

    With a threshold, pixels whose max softmax probability falls below it are
    marked ignore.
    """
    labels = np.argmax(logits, axis=-1).astype(np.int64)
    if threshold is not None:
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        conf = e.max(axis=-1) / e.sum(axis=-1)
        labels[conf < threshold] = IGNORE
    return labels


def downsample_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor label downsampling (keeps values intact)."""
    h, w = labels.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h // out_h, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_w) + 0.5) * w // out_w, w - 1).astype(np.intp)
    return labels[rows][:, cols]


class PrototypeBank:
    """K mean-embedding vectors with momentum updates and init flags."""

    def __init__(self, classes: int, dim: int, momentum: float = 0.999):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.classes = classes
        self.dim = dim
        self.momentum = momentum
        self.prototypes = np.zeros((classes, dim))
        self.initialized = np.zeros(classes, dtype=bool)
        self.update_count = np.zeros(classes, dtype=np.int64)

    def update(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        """Momentum update from one mini-batch of pixel embeddings.

        `embeddings` is (N, dim), `labels` is (N,).  Classes absent from the
        batch keep their prototype; classes seen for the first time are set
        directly to the batch mean.
        """
        emb = embeddings.reshape(-1, self.dim)
        lab = np.asarray(labels).reshape(-1)
        if emb.shape[0] != lab.shape[0]:
            raise ShapeError("embedding/label counts disagree")
        m = self.momentum
        for k in np.unique(lab):
            if k == IGNORE or k < 0 or k >= self.classes:
                continue
            batch_mean = emb[lab == k].mean(axis=0)
            if self.initialized[k]:
                self.prototypes[k] = m * self.prototypes[k] + (1.0 - m) * batch_mean
            else:
                self.prototypes[k] = batch_mean
                self.initialized[k] = True
            self.update_count[k] += 1

    def feature_map(self, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stack prototypes by pixel class: (H', W', dim) plus a validity mask.

        Ignore pixels and pixels of uninitialized classes come back masked
        with a zero vector.
        """
        lab = np.asarray(labels)
        valid = (lab != IGNORE) & (lab >= 0) & (lab < self.classes)
        valid &= self.initialized[np.clip(lab, 0, self.classes - 1)]
        out = np.zeros(lab.shape + (self.dim,))
        out[valid] = self.prototypes[lab[valid]]
        return out, valid

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensor_io.save_tensor(directory / "bank.pdt1", self.prototypes)
        meta = {
            "classes": self.classes,
            "dim": self.dim,
            "momentum": self.momentum,
            "state": {
                str(k): {
                    "initialized": bool(self.initialized[k]),
                    "update_count": int(self.update_count[k]),
                }
                for k in range(self.classes)
            },
        }
        (directory / "bank.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "PrototypeBank":
        directory = Path(directory)
        meta_path = directory / "bank.json"
        if not meta_path.exists():
            raise DataError(f"no prototype bank at {directory}")
        meta = json.loads(meta_path.read_text())
        bank = cls(meta["classes"], meta["dim"], meta["momentum"])
        bank.prototypes = tensor_io.load_tensor(directory / "bank.pdt1")
        for k, st in meta["state"].items():
            bank.initialized[int(k)] = st["initialized"]
            bank.update_count[int(k)] = st["update_count"]
        return bank


def scene_embedding(net: SegNet, scene: LabeledScene) -> tuple[np.ndarray, np.ndarray]:
    """Fused features plus matching small label map for one scene.

    Source scenes use their ground truth; target scenes use the model's own
    argmax prediction.  Labels are nearest-downsampled to the feature grid.
    """
    out = net.forward(Tensor(scene.image), net.border_for(scene.domain))
    fh, fw = out.fused.shape[0], out.fused.shape[1]
    if scene.labels is not None:
        small = downsample_labels(scene.labels, fh, fw)
    else:
        small = downsample_labels(pseudo_label(out.logits.data), fh, fw)
    return out.fused.data, small


def build_bank(
    net: SegNet,
    source_scenes: list[LabeledScene],
    target_scenes: list[LabeledScene],
    cfg: AdaptConfig,
) -> PrototypeBank:
    """One full pass over both domains; prototypes are class-wise pixel means.

    Classes never seen anywhere stay uninitialized.
    """
    dim = net.cfg.emb_channels
    k = net.cfg.classes
    sums = np.zeros((k, dim))
    counts = np.zeros(k, dtype=np.int64)
    for scene in list(source_scenes) + list(target_scenes):
        emb, small = scene_embedding(net, scene)
        flat = emb.reshape(-1, dim)
        lab = small.reshape(-1)
        for cls in np.unique(lab):
            if cls == IGNORE or cls < 0 or cls >= k:
                continue
            sel = lab == cls
            sums[cls] += flat[sel].sum(axis=0)
            counts[cls] += int(sel.sum())
    bank = PrototypeBank(k, dim, cfg.momentum)
    seen = counts > 0
    bank.prototypes[seen] = sums[seen] / counts[seen, None]
    bank.initialized[:] = seen
    return bank


def alignment_loss(
    fused: Tensor, bank: PrototypeBank, labels_small: np.ndarray, cfg: AdaptConfig
) -> Tensor:
    """Distillation-style loss pulling fused features toward prototype maps.

    loss = lam * T^2 * KL(softmax(proto/T) || softmax(f/T))
         + (1 - lam) * CE(labels, softmax over the first K feature channels)

    computed as a masked mean over pixels whose label has an initialized
    prototype.  Returns 0 when nothing is valid.
    """
    fh, fw, dim = fused.shape
    if labels_small.shape != (fh, fw):
        raise ShapeError("label map must match the fused feature grid")
    proto, valid = bank.feature_map(labels_small)
    if not valid.any():
        return Tensor(0.0)
    idx = np.nonzero(valid.reshape(-1))[0]
    f_rows = T.take_rows(T.reshape(fused, (fh * fw, dim)), idx)
    p_rows = Tensor(proto.reshape(-1, dim)[idx])

    t = cfg.temperature
    p_ref = T.softmax(T.scale(p_rows, 1.0 / t))
    p_model = T.softmax(T.scale(f_rows, 1.0 / t))
    kl_term = T.scale(T.kl_div(p_ref, p_model), cfg.lam * t * t)

    lab = labels_small.reshape(-1)[idx]
    ce_term = T.scale(T.cross_entropy(f_rows, lab), 1.0 - cfg.lam)
    return T.add(kl_term, ce_term)


MODES = ("ssl", "mpa", "mpa+ssl")


def total_loss(
    source_pairs: list[tuple[ForwardResult, np.ndarray]],
    target_pairs: list[tuple],
    bank: PrototypeBank | None,
    cfg: AdaptConfig,
    mode: str = "mpa+ssl",
) -> tuple[Tensor, dict]:
    """Combined adaptation objective and its logged components.

    source supervision + target pseudo-label self-training
    + alpha * (source alignment + target alignment)

    `mode` selects the active terms: "ssl" drops the alignment losses
    (alpha = 0 path), "mpa" drops the pseudo-label CE, "mpa+ssl" keeps all.

    Target pairs are (forward result, ssl label map[, alignment label map]).
    The ssl map may be confidence-thresholded; the alignment map defaults to
    the ssl map but is normally the plain argmax so the feature-space loss
    covers the pixels the hard CE skips.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    use_mpa = mode != "ssl"
    use_ssl = mode != "mpa"
    if use_mpa and bank is None:
        raise DataError("alignment modes need an initialized prototype bank")

    def batch_mean(parts: list[Tensor]) -> Tensor:
        acc = parts[0]
        for p in parts[1:]:
            acc = T.add(acc, p)
        return T.scale(acc, 1.0 / len(parts))

    seg = batch_mean([T.cross_entropy(out.logits, lab) for out, lab in source_pairs])
    total = seg
    parts = {"loss_seg": float(seg.data)}

    if use_ssl:
        ssl = batch_mean([T.cross_entropy(pair[0].logits, pair[1]) for pair in target_pairs])
        total = T.add(total, ssl)
        parts["loss_ssl"] = float(ssl.data)
    else:
        parts["loss_ssl"] = 0.0

    if use_mpa:

        def align(out: ForwardResult, lab: np.ndarray) -> Tensor:
            fh, fw = out.fused.shape[:2]
            return alignment_loss(out.fused, bank, downsample_labels(lab, fh, fw), cfg)

        mpa_s = batch_mean([align(out, lab) for out, lab in source_pairs])
        mpa_t = batch_mean([align(pair[0], pair[-1]) for pair in target_pairs])
        total = T.add(total, T.scale(T.add(mpa_s, mpa_t), cfg.alpha))
        parts["loss_mpa_s"] = float(mpa_s.data)
        parts["loss_mpa_t"] = float(mpa_t.data)
    else:
        parts["loss_mpa_s"] = 0.0
        parts["loss_mpa_t"] = 0.0

    parts["total"] = float(total.data)
    return total, parts
