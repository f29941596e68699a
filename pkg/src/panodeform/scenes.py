"""Synthetic sphere worlds rendered as labeled pinhole and panorama scenes.

A world is a procedural labeling of the unit sphere: a sky band around the top
pole, a ground band around the bottom pole, a wall band between them, and
rectangular/elliptical objects placed in (azimuth, polar-angle) space.  The
same world can be rendered through an equirectangular projection (2:1
panorama, with the characteristic latitude stretch) or through a perspective
pinhole camera, which is what creates the geometry gap between the two
domains.  Object classes share a color palette and differ by shape, so labels
cannot be recovered from color alone.
"""

from __future__ import annotations

import os
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_io
from .tensor_io import DataError

IGNORE = 255
PIXEL_NOISE = 0.035


@dataclass
class SceneSpec:
    classes: int = 5
    layout_seed: int = 0
    objects: tuple[int, int] = (8, 12)
    fov_deg: float = 70.0
    pano_height: int = 64  # panorama is pano_height x 2*pano_height
    pinhole_size: int = 64

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class LabeledScene:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray | None  # (H, W) int64 in [0, K) or 255
    domain: str  # "pinhole" | "panorama"
    scene_id: str


@dataclass
class _Object:
    cls: int
    shape: str  # "rect" | "ellipse"
    theta: float
    phi: float
    half_az: float
    half_pol: float


class SphereWorld:
    """Procedural labeling/coloring of the unit sphere, deterministic in seed."""

    def __init__(self, spec: SceneSpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.layout_seed, seed]))
        k = spec.classes
        if k == 2:
            self.phi_sky = rng.uniform(0.4, 0.6) * np.pi
            self.phi_ground = self.phi_sky
        else:
            self.phi_sky = rng.uniform(0.30, 0.40) * np.pi
            self.phi_ground = rng.uniform(0.60, 0.70) * np.pi

        self.objects: list[_Object] = []
        obj_classes = list(range(3, k))
        if obj_classes:
            lo, hi = spec.objects
            count = int(rng.integers(lo, hi + 1))
            for i in range(count):
                cls = obj_classes[i % len(obj_classes)]
                shape = "rect" if (cls - 3) % 2 == 0 else "ellipse"
                half_pol = rng.uniform(0.16, 0.30)
                # objects may reach the band edges, where the equirectangular
                # stretch is strongest; pinhole views see them near-undistorted
                margin = 0.2 * half_pol
                self.objects.append(
                    _Object(
                        cls=cls,
                        shape=shape,
                        theta=rng.uniform(0.0, 2 * np.pi),
                        phi=rng.uniform(self.phi_sky + margin, self.phi_ground - margin),
                        half_az=rng.uniform(0.25, 0.55),
                        half_pol=half_pol,
                    )
                )

        base = np.array(
            [
                [0.55, 0.72, 0.92],  # sky
                [0.34, 0.30, 0.22],  # ground
                [0.62, 0.61, 0.58],  # wall
            ]
        )
        palette = np.zeros((k, 3))
        palette[: min(k, 3)] = base[: min(k, 3)]
        shared = np.array([0.72, 0.31, 0.27])
        for cls in range(3, k):
            # the first two object classes share a color: only shape tells
            # them apart, which is what the projections distort
            palette[cls] = shared if cls < 5 else rng.uniform(0.2, 0.8, 3)
        jitter = rng.uniform(-0.06, 0.06, (k, 3))
        if k > 4:
            jitter[4] = jitter[3]
        self.palette = np.clip(palette + jitter, 0.05, 0.95)
        self.noise_seed = int(rng.integers(0, 2**31))

    def labels_at(self, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
        lab = np.full(theta.shape, 2 if self.spec.classes >= 3 else 1, dtype=np.int64)
        lab[phi < self.phi_sky] = 0
        lab[phi >= self.phi_ground] = 1
        for obj in self.objects:
            dth = np.mod(theta - obj.theta + np.pi, 2 * np.pi) - np.pi
            dph = phi - obj.phi
            if obj.shape == "rect":
                mask = (np.abs(dth) <= obj.half_az) & (np.abs(dph) <= obj.half_pol)
            else:
                mask = (dth / obj.half_az) ** 2 + (dph / obj.half_pol) ** 2 <= 1.0
            lab[mask] = obj.cls
        return lab

    def colors_at(self, theta: np.ndarray, phi: np.ndarray, labels: np.ndarray) -> np.ndarray:
        img = self.palette[labels]
        shade = (0.82 + 0.3 * (phi / np.pi))[..., None]
        return img * shade

    def _noise(self, key: str, shape: tuple[int, ...]) -> np.ndarray:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.noise_seed, zlib.crc32(key.encode())])
        )
        return rng.normal(0.0, PIXEL_NOISE, shape)


def generate_sphere_world(spec: SceneSpec, seed: int) -> SphereWorld:
    return SphereWorld(spec, seed)


def render_equirectangular(world: SphereWorld, h: int, w: int, scene_id: str = "pano") -> LabeledScene:
    """Panorama pixel (i, j) looks along phi = pi(i+.5)/h, theta = 2pi(j+.5)/w."""
    if w != 2 * h:
        raise ValueError(f"equirectangular panorama must be 2:1, got {h}x{w}")
    phi = np.pi * (np.arange(h) + 0.5) / h
    theta = 2 * np.pi * (np.arange(w) + 0.5) / w
    tt, pp = np.meshgrid(theta, phi)
    labels = world.labels_at(tt, pp)
    img = world.colors_at(tt, pp, labels)
    img = np.clip(img + world._noise(f"pano:{h}x{w}", img.shape), 0.0, 1.0)
    return LabeledScene(image=img, labels=labels, domain="panorama", scene_id=scene_id)


def _camera_frame(yaw: float, pitch: float):
    fwd = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    right = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    up = np.cross(fwd, right)
    return fwd, right, up


def pinhole_directions(h: int, w: int, fov_deg: float, yaw: float, pitch: float) -> tuple[np.ndarray, np.ndarray]:
    """(theta, phi) of every pinhole pixel's viewing ray."""
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"fov must be in (0, 180), got {fov_deg}")
    f = 0.5 * w / np.tan(np.radians(fov_deg) / 2)
    u = (np.arange(w) + 0.5 - w / 2) / f
    v = (h / 2 - (np.arange(h) + 0.5)) / f
    uu, vv = np.meshgrid(u, v)
    fwd, right, upv = _camera_frame(yaw, pitch)
    d = fwd[None, None] + uu[..., None] * right[None, None] + vv[..., None] * upv[None, None]
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    theta = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
    phi = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    return theta, phi


def render_pinhole(
    world: SphereWorld,
    h: int,
    w: int,
    fov_deg: float,
    yaw: float,
    pitch: float,
    scene_id: str = "pin",
) -> LabeledScene:
    theta, phi = pinhole_directions(h, w, fov_deg, yaw, pitch)
    labels = world.labels_at(theta, phi)
    img = world.colors_at(theta, phi, labels)
    key = f"pin:{h}x{w}:{round(yaw * 1e9)}:{round(pitch * 1e9)}"
    img = np.clip(img + world._noise(key, img.shape), 0.0, 1.0)
    return LabeledScene(image=img, labels=labels, domain="pinhole", scene_id=scene_id)


# ---------------------------------------------------------------------------
# dataset building


def _worker_count() -> int:
    return max(1, int(os.environ.get("PANO_DEFORM_THREADS", "1")))


def _make_scene(spec: SceneSpec, seed: int, split: int, index: int) -> LabeledScene:
    """Render one scene of a split; pure function of its arguments."""
    world = generate_sphere_world(spec, seed * 1000003 + split * 7919 + index)
    rng = np.random.default_rng(np.random.SeedSequence([seed, split, index]))
    if split in (0, 3):  # source / held-out pinhole
        yaw = rng.uniform(0.0, 2 * np.pi)
        pitch = rng.uniform(-0.2, 0.2)
        name = "source" if split == 0 else "test_pin"
        return render_pinhole(
            world,
            spec.pinhole_size,
            spec.pinhole_size,
            spec.fov_deg,
            yaw,
            pitch,
            scene_id=f"{name}_{index:04d}",
        )
    name = "target" if split == 1 else "test"
    return render_equirectangular(
        world, spec.pano_height, 2 * spec.pano_height, scene_id=f"{name}_{index:04d}"
    )


def build_datasets(
    spec: SceneSpec,
    n_source: int,
    n_target: int,
    n_test: int,
    seed: int,
    out_dir,
) -> dict:
    """Write the three splits (plus a held-out pinhole split) and a manifest.

    Source scenes are labeled pinhole crops, target scenes are panoramas
    without a label payload, and the test split holds labeled panoramas.  A
    same-sized labeled pinhole split ships alongside for measuring the
    pinhole-to-panorama evaluation gap.
    """
    if min(n_source, n_target, n_test) < 1:
        raise ValueError("split sizes must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "data").mkdir(parents=True, exist_ok=True)

    jobs = (
        [(0, i) for i in range(n_source)]
        + [(1, i) for i in range(n_target)]
        + [(2, i) for i in range(n_test)]
        + [(3, i) for i in range(n_test)]
    )
    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda sj: _make_scene(spec, seed, *sj), jobs))
    else:
        scenes = [_make_scene(spec, seed, s, i) for s, i in jobs]

    manifest = {"classes": spec.classes, "source": [], "target": [], "test": [], "source_test": []}
    split_key = {0: "source", 1: "target", 2: "test", 3: "source_test"}
    for (split, _idx), scene in zip(jobs, scenes):
        entry = {"id": scene.scene_id, "domain": scene.domain}
        img_rel = f"data/{scene.scene_id}_img.pdt1"
        tensor_io.save_tensor(out_dir / img_rel, scene.image)
        entry["image"] = img_rel
        if split == 1:
            entry["labels"] = None
        else:
            lab_rel = f"data/{scene.scene_id}_lab.pdt1"
            tensor_io.save_tensor(out_dir / lab_rel, scene.labels.astype(np.float64))
            entry["labels"] = lab_rel
        manifest[split_key[split]].append(entry)

    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return json.loads(path.read_text()), path.parent


def load_scene(entry: dict, base: Path, classes: int) -> LabeledScene:
    image = tensor_io.load_tensor(base / entry["image"])
    labels = None
    if entry.get("labels"):
        raw = tensor_io.load_tensor(base / entry["labels"])
        labels = raw.astype(np.int64)
        if not np.array_equal(raw, labels):
            raise DataError(f"non-integer labels in {entry['labels']}")
        bad = (labels != IGNORE) & ((labels < 0) | (labels >= classes))
        if bad.any():
            raise DataError(f"label values out of range in {entry['labels']}")
    return LabeledScene(image=image, labels=labels, domain=entry["domain"], scene_id=entry["id"])


def load_split(manifest: dict, base: Path, split: str) -> list[LabeledScene]:
    return [load_scene(e, base, manifest["classes"]) for e in manifest[split]]
