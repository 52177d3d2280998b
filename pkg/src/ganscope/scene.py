"""Procedural scene distribution with exact ground-truth segmentation.

Scenes are compositions of colored geometric objects over a fixed background
gradient on a small square canvas. Sampling, rasterization, and segmentation
are pure functions of their inputs, so every dataset is reproducible from a
seed. Two segmenters are provided: `segment_exact` reads class ids straight
off the scene geometry, and `segment_image` recovers them from pixel colors
by nearest-prototype assignment, usable on generated images where no
geometry exists.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .autodiff import Tensor

BACKGROUND_ID = 0
CANVAS = 32
COLOR_JITTER = 0.08
PROTO_SEPARATION = 0.25
BG_THRESHOLD = 0.125

# background gradient endpoints (RGB in [0,1], top row to bottom row)
_BG_TOP = (0.10, 0.11, 0.13)
_BG_BOTTOM = (0.22, 0.24, 0.28)


@dataclass(frozen=True)
class ClassDef:
    class_id: int
    name: str
    color: tuple  # prototype RGB in [0,1]
    family: str  # rectangle | disk | triangle | hbars
    size_range: tuple  # (lo, hi) as fraction of canvas
    presence: float  # probability the class appears in a scene


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    cy: float  # center, pixels
    cx: float
    size: float  # characteristic extent, pixels
    jitter: tuple  # per-channel color offset


@dataclass(frozen=True)
class SceneSpec:
    canvas: int
    instances: tuple  # ObjectInstance, in draw (occlusion) order


def default_inventory() -> list[ClassDef]:
    """Eight foreground classes; class 4 is the striped high-frequency family."""
    return [
        ClassDef(1, "crimson-slab", (0.85, 0.10, 0.10), "rectangle", (0.22, 0.40), 0.40),
        ClassDef(2, "leaf-disk", (0.10, 0.75, 0.15), "disk", (0.20, 0.36), 0.35),
        ClassDef(3, "azure-wedge", (0.15, 0.35, 0.90), "triangle", (0.22, 0.42), 0.32),
        ClassDef(4, "gold-fence", (0.95, 0.80, 0.10), "hbars", (0.28, 0.46), 0.30),
        ClassDef(5, "magenta-disk", (0.85, 0.10, 0.80), "disk", (0.18, 0.34), 0.32),
        ClassDef(6, "teal-slab", (0.10, 0.80, 0.85), "rectangle", (0.18, 0.34), 0.35),
        ClassDef(7, "amber-wedge", (0.95, 0.50, 0.10), "triangle", (0.20, 0.40), 0.30),
        ClassDef(8, "pearl-disk", (0.92, 0.92, 0.92), "disk", (0.16, 0.30), 0.28),
    ]


def class_ids(inventory) -> list[int]:
    return [BACKGROUND_ID] + [c.class_id for c in inventory]


def inventory_hash(inventory) -> str:
    blob = json.dumps([asdict(c) for c in inventory], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# geometry

# analytic area of each family as a multiple of size^2
FAMILY_AREA = {"rectangle": 0.70, "disk": np.pi / 4.0, "triangle": 0.30, "hbars": 0.50}


def _instance_mask(inst: ObjectInstance, canvas: int, family: str) -> np.ndarray:
    yy = (np.arange(canvas, dtype=np.float64) + 0.5)[:, None]
    xx = (np.arange(canvas, dtype=np.float64) + 0.5)[None, :]
    s, cy, cx = inst.size, inst.cy, inst.cx
    if family == "rectangle":
        return (np.abs(yy - cy) <= 0.35 * s) & (np.abs(xx - cx) <= 0.5 * s)
    if family == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.5 * s) ** 2
    if family == "triangle":
        dy = yy - (cy - 0.3 * s)  # apex at top, height 0.6*s, base width s
        half = np.where(dy >= 0, (dy / (0.6 * s)) * (0.5 * s), -1.0)
        return (dy >= 0) & (dy <= 0.6 * s) & (np.abs(xx - cx) <= half)
    if family == "hbars":
        # canvas-aligned 2px bands with 2px gaps; high-frequency structure
        inside = (np.abs(yy - cy) <= 0.5 * s) & (np.abs(xx - cx) <= 0.5 * s)
        band = (np.arange(canvas)[:, None] // 2) % 2 == 0
        return inside & np.broadcast_to(band, (canvas, canvas))
    raise ValueError(f"unknown shape family: {family}")


def scene_from_uniforms(core_u: np.ndarray, jitter_u, inventory, canvas: int = CANVAS) -> SceneSpec:
    """Build a SceneSpec from per-class uniforms.

    core_u is [C,4]: (presence draw, size, center-y, center-x), each in [0,1).
    jitter_u is [C,3] color-jitter uniforms, or None for clean prototype
    colors. Shared by `sample_scene` and the generator's latent decode, which
    is what makes the generator's target distribution equal the sampled one.
    """
    instances = []
    for i, cdef in enumerate(inventory):
        if core_u[i, 0] >= cdef.presence:
            continue
        lo, hi = cdef.size_range
        size = (lo + (hi - lo) * core_u[i, 1]) * canvas
        margin = 0.5 * size
        cy = margin + (canvas - 2.0 * margin) * core_u[i, 2]
        cx = margin + (canvas - 2.0 * margin) * core_u[i, 3]
        if jitter_u is None:
            jit = (0.0, 0.0, 0.0)
        else:
            jit = tuple((jitter_u[i] - 0.5) * 2.0 * COLOR_JITTER)
        instances.append(ObjectInstance(cdef.class_id, cy, cx, size, jit))
    # fixed class-priority draw order: higher ids occlude lower
    instances.sort(key=lambda inst: inst.class_id)
    return SceneSpec(canvas=canvas, instances=tuple(instances))


def sample_scene(rng_seed: int, inventory, canvas: int = CANVAS) -> SceneSpec:
    """Sample one scene; pure function of the seed."""
    if not inventory:
        raise ValueError("sample_scene: empty class inventory")
    rng = np.random.default_rng(rng_seed)
    core = rng.random((len(inventory), 4))
    jitter = rng.random((len(inventory), 3))
    return scene_from_uniforms(core, jitter, inventory, canvas)


def _family_of(class_id: int, inventory) -> str:
    for c in inventory:
        if c.class_id == class_id:
            return c.family
    raise ValueError(f"class id {class_id} not in inventory")


def _color_of(class_id: int, inventory) -> np.ndarray:
    for c in inventory:
        if c.class_id == class_id:
            return np.array(c.color, dtype=np.float64)
    raise ValueError(f"class id {class_id} not in inventory")


def background(canvas: int = CANVAS) -> np.ndarray:
    """Fixed vertical gradient, [3,H,W] in [0,1]."""
    t = (np.arange(canvas, dtype=np.float64) + 0.5) / canvas
    top = np.array(_BG_TOP)[:, None]
    bottom = np.array(_BG_BOTTOM)[:, None]
    cols = top + (bottom - top) * t[None, :]
    return np.repeat(cols[:, :, None], canvas, axis=2)


def render(scene: SceneSpec, inventory) -> Tensor:
    """Rasterize a scene to an image tensor [3,H,W] with values in [-1,1]."""
    img = background(scene.canvas)
    for inst in scene.instances:
        mask = _instance_mask(inst, scene.canvas, _family_of(inst.class_id, inventory))
        color = np.clip(_color_of(inst.class_id, inventory) + np.array(inst.jitter), 0.0, 1.0)
        img[:, mask] = color[:, None]
    return Tensor(2.0 * img - 1.0)


def segment_exact(scene: SceneSpec, inventory) -> np.ndarray:
    """Ground-truth segmentation map [H,W] of class ids, from geometry alone."""
    seg = np.zeros((scene.canvas, scene.canvas), dtype=np.uint8)
    for inst in scene.instances:
        mask = _instance_mask(inst, scene.canvas, _family_of(inst.class_id, inventory))
        seg[mask] = inst.class_id
    return seg


def _majority_filter(labels: np.ndarray, n_classes: int) -> np.ndarray:
    # one 3x3 mode-smoothing pass; a pixel is only reassigned when at least
    # 6 of its 9 neighbors agree on another class, which removes speckle
    # without eroding corners and thin structures
    h, w = labels.shape[-2:]
    batched = labels.ndim == 3
    lab = labels if batched else labels[None]
    padded = np.pad(lab, ((0, 0), (1, 1), (1, 1)), mode="edge")
    counts = np.zeros((lab.shape[0], n_classes, h, w), dtype=np.uint8)
    onehot = np.eye(n_classes, dtype=np.uint8)[padded]  # [N,H+2,W+2,C]
    for di in range(3):
        for dj in range(3):
            counts += onehot[:, di : di + h, dj : dj + w].transpose(0, 3, 1, 2)
    winner = counts.argmax(axis=1).astype(np.uint8)
    winner_count = counts.max(axis=1)
    out = np.where(winner_count >= 6, winner, lab)
    return out if batched else out[0]


def segment_image(image, inventory) -> np.ndarray:
    """Segment an image by nearest prototype color with a background threshold.

    Accepts a Tensor or ndarray [3,H,W] (or [N,3,H,W]) in [-1,1]. Pixels
    whose closest prototype is farther than BG_THRESHOLD in max-channel
    distance are background. One 3x3 majority smoothing pass is applied.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    batched = data.ndim == 4
    x = data if batched else data[None]
    colors01 = (x.astype(np.float64) + 1.0) / 2.0  # [N,3,H,W]
    ids = np.array([c.class_id for c in inventory], dtype=np.uint8)
    protos = np.stack([np.array(c.color) for c in inventory])  # [C,3]
    # [N,C,H,W] max-channel distance to each prototype
    dists = np.abs(colors01[:, None, :, :, :] - protos[None, :, :, None, None]).max(axis=2)
    nearest = dists.argmin(axis=1)
    dmin = np.take_along_axis(dists, nearest[:, None], axis=1)[:, 0]
    labels = np.where(dmin <= BG_THRESHOLD, ids[nearest], BACKGROUND_ID).astype(np.uint8)
    n_classes = int(max(ids)) + 1
    out = _majority_filter(labels, n_classes)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# datasets


def dataset_seeds(n: int, seed: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


def make_dataset(n: int, seed: int, inventory, withhold: int | None = None):
    """Sample n (image, segmap, scene) tuples; withhold removes one class.

    Withholding drops the class's instances after sampling, so the other
    classes' draws are identical to the unwithheld dataset at the same seed.
    """
    if n < 1:
        raise ValueError("make_dataset: n must be >= 1")
    if withhold is not None and withhold not in {c.class_id for c in inventory}:
        raise ValueError(f"make_dataset: withheld class {withhold} not in inventory")
    out = []
    for s in dataset_seeds(n, seed):
        scene = sample_scene(int(s), inventory)
        if withhold is not None:
            scene = SceneSpec(
                canvas=scene.canvas,
                instances=tuple(i for i in scene.instances if i.class_id != withhold),
            )
        out.append((render(scene, inventory), segment_exact(scene, inventory), scene))
    return out


def pixel_counts(segmap: np.ndarray, ids) -> np.ndarray:
    """Per-class pixel counts for one segmentation map, ordered like ids."""
    flat = np.bincount(segmap.reshape(-1), minlength=max(ids) + 1)
    return np.array([flat[i] for i in ids], dtype=np.float64)


def image_to_png_array(image) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    arr01 = np.clip((data.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return np.round(arr01 * 255.0).astype(np.uint8).transpose(1, 2, 0)


def png_array_to_image(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(np.float32).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0)


def save_dataset(dataset, directory, inventory, seed: int, withhold: int | None = None) -> None:
    """Write images and segmaps as PNG plus a JSON manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "segmaps").mkdir(parents=True, exist_ok=True)
    names = []
    for i, (img, seg, _scene) in enumerate(dataset):
        name = f"{i:06d}.png"
        PILImage.fromarray(image_to_png_array(img), mode="RGB").save(directory / "images" / name)
        PILImage.fromarray(seg, mode="L").save(directory / "segmaps" / name)
        names.append(name)
    manifest = {
        "canvas": dataset[0][0].shape[1],
        "count": len(dataset),
        "seed": seed,
        "withheld_class": withhold,
        "classes": [asdict(c) for c in inventory],
        "inventory_hash": inventory_hash(inventory),
        "files": names,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_manifest(directory) -> dict:
    with open(Path(directory) / "manifest.json") as fh:
        return json.load(fh)


def inventory_from_manifest(manifest: dict) -> list[ClassDef]:
    return [
        ClassDef(
            class_id=c["class_id"],
            name=c["name"],
            color=tuple(c["color"]),
            family=c["family"],
            size_range=tuple(c["size_range"]),
            presence=c["presence"],
        )
        for c in manifest["classes"]
    ]


def load_dataset(directory):
    """Read back (image, segmap) pairs; scene geometry is not persisted."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    out = []
    for name in manifest["files"]:
        img = np.asarray(PILImage.open(directory / "images" / name).convert("RGB"))
        seg = np.asarray(PILImage.open(directory / "segmaps" / name))
        out.append((png_array_to_image(img), seg.astype(np.uint8)))
    return out, manifest
