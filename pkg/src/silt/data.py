"""Scene inventories, illumination pairing, style references and toy data.

Directory layouts understood here:

* Multi-Illumination style: ``<root>/<scene>/dir_<k>[_suffix].{jpg,png}``,
  tag ``"<k>"``.
* VIDIT style: a flat directory of ``Image<scene>_<a>_<b>.png`` where one of
  ``a``/``b`` is a colour temperature (``4500`` or ``4500K``) and the other a
  compass direction; tag ``"4500K-E"``.

The toy generator writes the Multi-Illumination layout under
``<root>/train`` and ``<root>/test`` with ground-truth sidecars in each
scene's ``gt/`` folder and a ``scene.txt`` key=value metadata file.
"""
from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .imaging import IMAGE_SUFFIXES, load_image, resize, save_image, to_network, to_tensor

log = logging.getLogger(__name__)

_MI_PATTERN = re.compile(r"^dir_(\d+)(?:_[A-Za-z0-9]+)*$")
_VIDIT_PATTERN = re.compile(r"^Image(\d+)_([A-Za-z0-9]+)_([A-Za-z0-9]+)$")
COMPASS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
VIDIT_DIRECTIONS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
VIDIT_STYLE_TAG = "4500K-E"


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneRecord:
    scene_id: str
    images: dict
    split: str = "train"

    def path(self, tag: str) -> Path:
        try:
            return self.images[tag]
        except KeyError:
            raise DatasetError(f"scene {self.scene_id!r} has no image for tag {tag!r}") from None


@dataclass
class IlluminationPair:
    scene_id: str
    tag_a: str
    tag_b: str
    path_a: Path
    path_b: Path

    def swapped(self) -> "IlluminationPair":
        return IlluminationPair(self.scene_id, self.tag_b, self.tag_a, self.path_b, self.path_a)


@dataclass
class DatasetLayout:
    scenes: list
    input_tags: list
    style_tag: str | None = None

    def style_references(self) -> "StyleReferenceSet":
        if self.style_tag is None:
            raise DatasetError("layout has no style tag configured")
        return StyleReferenceSet([s.path(self.style_tag) for s in self.scenes if self.style_tag in s.images])


class StyleReferenceSet:
    """Images of the target illumination, shown to the discriminator only."""

    def __init__(self, paths: Sequence):
        self.paths = [Path(p) for p in paths]

    def __len__(self):
        return len(self.paths)


def _sort_key(tag: str):
    return (0, int(tag), "") if tag.isdigit() else (1, 0, tag)


def validate_tags(scenes: Iterable[SceneRecord], tags: Sequence[str]) -> None:
    missing = [(s.scene_id, t) for s in scenes for t in tags if t not in s.images]
    if missing:
        listing = ", ".join(f"{sid!r} lacks tag {t!r}" for sid, t in missing[:20])
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        raise DatasetError(f"incomplete scenes: {listing}{more}")


def enumerate_pairs(scenes: Sequence[SceneRecord], tags: Sequence[str], seed: int = 0, epoch: int = 0):
    """All unordered tag pairs of every scene, shuffled for one epoch.

    Order and the A/B branch assignment inside each pair depend only on
    ``(seed, epoch)``.
    """
    tags = list(tags)
    if len(tags) < 2:
        raise DatasetError(f"need at least two illumination tags to pair, got {tags}")
    if len(set(tags)) != len(tags):
        raise DatasetError(f"duplicate illumination tags: {tags}")
    validate_tags(scenes, tags)
    pairs = [
        IlluminationPair(s.scene_id, a, b, s.images[a], s.images[b])
        for s in scenes
        for a, b in itertools.combinations(tags, 2)
    ]
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pairs))
    flips = rng.random(len(pairs)) < 0.5
    return [pairs[i].swapped() if f else pairs[i] for i, f in zip(order, flips)]


def sample_style_indices(n_refs: int, n: int, seed) -> np.ndarray:
    if n_refs < 1:
        raise DatasetError("style reference set is empty")
    return np.random.default_rng(seed).integers(0, n_refs, size=n)


def sample_style_batch(refs: StyleReferenceSet, n: int, seed, store: "ImageStore | None" = None):
    """``n`` style images drawn uniformly with replacement.

    With a ``store`` the result is a stacked network-domain tensor,
    otherwise a list of [0, 1] arrays.
    """
    idx = sample_style_indices(len(refs), n, seed)
    if store is not None:
        if n == 0:
            return torch.empty(0, 3, *store.size)
        return torch.cat([store.tensor(refs.paths[i]) for i in idx])
    return [load_image(refs.paths[i]) for i in idx]


class ImageStore:
    """Loads, resizes and caches network-domain tensors keyed by path."""

    def __init__(self, size: tuple[int, int] | None = None, cache: bool = True):
        self.size = tuple(size) if size is not None else None
        self.cache = cache
        self._cache: dict = {}

    def image(self, path) -> np.ndarray:
        img = load_image(path)
        if self.size is not None and img.shape[:2] != self.size:
            img = resize(img, *self.size)
        return img

    def tensor(self, path) -> torch.Tensor:
        key = str(path)
        t = self._cache.get(key)
        if t is None:
            t = to_network(to_tensor(self.image(path)))
            if self.cache:
                self._cache[key] = t
        return t


# -- directory adapters ----------------------------------------------------

def scan_multiillum_layout(root, input_tags: Sequence | None = None, style_tag=None, split: str = "train") -> DatasetLayout:
    """Inventory ``<root>/<scene>/dir_<k>.*`` files.

    Without ``input_tags`` every tag found in all scenes (minus the style
    tag) becomes an input tag.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    scenes, bad = [], []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = {}
        for f in sorted(scene_dir.iterdir()):
            if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            m = _MI_PATTERN.match(f.stem)
            if m is None:
                bad.append(f)
                continue
            images[str(int(m.group(1)))] = f
        if images:
            scenes.append(SceneRecord(scene_dir.name, images, split))
    if bad:
        raise DatasetError("unparsable image filenames: " + ", ".join(map(str, bad)))
    if not scenes:
        raise DatasetError(f"no scenes found under {root}")
    style_tag = None if style_tag is None else str(style_tag)
    if input_tags is None:
        common = set.intersection(*(set(s.images) for s in scenes))
        common.discard(style_tag)
        input_tags = sorted(common, key=_sort_key)
    input_tags = [str(t) for t in input_tags]
    validate_tags(scenes, input_tags + ([style_tag] if style_tag is not None and split == "train" else []))
    return DatasetLayout(scenes, input_tags, style_tag)


def parse_vidit_name(stem: str):
    """``Image000_4500_E`` (either token order) -> ``("000", "E", 4500)``; None if unparsable."""
    m = _VIDIT_PATTERN.match(stem)
    if m is None:
        return None
    scene, a, b = m.groups()
    for temp, direction in ((a, b), (b, a)):
        t = temp[:-1] if temp.upper().endswith("K") else temp
        if t.isdigit() and direction.upper() in VIDIT_DIRECTIONS:
            return scene, direction.upper(), int(t)
    return None


def scan_vidit_layout(root, regime: str = "all", split: str = "train") -> DatasetLayout:
    """Inventory a VIDIT directory for one of the two any-to-one regimes.

    ``regime="single"`` keeps only 4500K captures; ``"all"`` keeps every
    temperature. Either way ``4500K-E`` is the style tag and every other
    tag present in all scenes is an input tag.
    """
    if regime not in ("single", "all"):
        raise DatasetError(f"unknown VIDIT regime {regime!r} (expected 'single' or 'all')")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    by_scene: dict = {}
    bad = []
    for f in sorted(root.iterdir()):
        if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        parsed = parse_vidit_name(f.stem)
        if parsed is None:
            bad.append(f)
            continue
        scene, direction, temp = parsed
        if regime == "single" and temp != 4500:
            continue
        by_scene.setdefault(scene, {})[f"{temp}K-{direction}"] = f
    if bad:
        raise DatasetError("unparsable VIDIT filenames: " + ", ".join(map(str, bad)))
    if not by_scene:
        raise DatasetError(f"no VIDIT images found under {root}")
    scenes = [SceneRecord(sid, imgs, split) for sid, imgs in sorted(by_scene.items())]
    common = set.intersection(*(set(s.images) for s in scenes))
    if split == "train" and VIDIT_STYLE_TAG not in common:
        validate_tags(scenes, [VIDIT_STYLE_TAG])
    common.discard(VIDIT_STYLE_TAG)
    input_tags = sorted(common, key=lambda t: (int(t.split("K-")[0]), VIDIT_DIRECTIONS.index(t.split("-")[1])))
    return DatasetLayout(scenes, input_tags, VIDIT_STYLE_TAG)


def evaluation_items(layout: DatasetLayout):
    """``(scene_id, tag, input_path, target_path | None)`` for every test input."""
    items = []
    for s in layout.scenes:
        target = s.images.get(layout.style_tag) if layout.style_tag is not None else None
        for t in layout.input_tags:
            if t in s.images:
                items.append((s.scene_id, t, s.images[t], target))
    return items


# -- procedural toy data ---------------------------------------------------

@dataclass
class ToySceneSpec:
    """Parameters of the procedural multi-illumination generator."""

    seed: int = 0
    size: tuple = (64, 64)
    n_shapes: int = 6
    ambient_range: tuple = (0.2, 0.3)
    shadow_depth: tuple = (0.35, 0.6)
    shadow_sigma: tuple = (0.12, 0.2)
    tint_range: tuple = (0.75, 1.0)
    target_shading: tuple = (1.0, 0.9, 0.75)


def direction_name(k: int, n_dirs: int) -> str:
    deg = 360.0 * k / n_dirs
    if abs(deg / 45 - round(deg / 45)) < 1e-9:
        return COMPASS[int(round(deg / 45)) % 8]
    return f"dir{deg:g}"


def shading_ramp(h: int, w: int, angle: float, ambient: float) -> np.ndarray:
    """Linear ramp climbing from ``ambient`` to 1 towards the light at ``angle``.

    Angles are counter-clockwise from east in image coordinates (y down).
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = np.cos(angle) * xs / max(w - 1, 1) - np.sin(angle) * ys / max(h - 1, 1)
    lo, hi = proj.min(), proj.max()
    t = (proj - lo) / (hi - lo) if hi > lo else np.ones_like(proj)
    return ambient + (1.0 - ambient) * t


def _quantize(x):
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _draw_reflectance(rng, h, w, n_shapes):
    base = rng.uniform(0.35, 0.8, size=3)
    r = np.broadcast_to(base, (h, w, 3)).copy()
    ys, xs = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    for _ in range(n_shapes):
        color = rng.uniform(0.15, 0.95, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.08, 0.25, size=2)
            theta = rng.uniform(0, math.pi)
            dy, dx = ys - cy, xs - cx
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1
        else:
            n = int(rng.integers(3, 6))
            angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
            radii = rng.uniform(0.1, 0.25, size=n)
            py = cy + radii * np.sin(angles)
            px = cx + radii * np.cos(angles)
            mask = _polygon_mask(ys, xs, py, px)
        r[mask] = color
    return r


def _polygon_mask(ys, xs, py, px):
    inside = np.zeros(ys.shape, dtype=bool)
    n = len(py)
    for i in range(n):
        y0, x0, y1, x1 = py[i], px[i], py[(i + 1) % n], px[(i + 1) % n]
        crosses = (y0 > ys) != (y1 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < x_int)
    return inside


def _lighting_params(rng, spec: ToySceneSpec, n_dirs: int):
    params = []
    for k in range(n_dirs):
        angle = 2 * math.pi * k / n_dirs
        params.append({
            "angle": angle,
            "ambient": float(rng.uniform(*spec.ambient_range)),
            "tint": rng.uniform(*spec.tint_range, size=3),
            # shadow falls on the side away from the light
            "shadow_center": (
                0.5 + 0.3 * math.sin(angle) + rng.uniform(-0.1, 0.1),
                0.5 - 0.3 * math.cos(angle) + rng.uniform(-0.1, 0.1),
            ),
            "shadow_sigma": float(rng.uniform(*spec.shadow_sigma)),
            "shadow_depth": float(rng.uniform(*spec.shadow_depth)),
        })
    return params


def render_shading(h: int, w: int, p: dict) -> np.ndarray:
    """Ramp x soft shadow x per-channel tint, clipped to [0.2, 1]."""
    ramp = shading_ramp(h, w, p["angle"], p["ambient"])
    ys, xs = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    cy, cx = p["shadow_center"]
    blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * p["shadow_sigma"] ** 2))
    s = (ramp * (1 - p["shadow_depth"] * blob))[..., None] * np.asarray(p["tint"]).reshape(1, 1, 3)
    return np.clip(s, 0.2, 1.0)


def _fmt(v):
    if isinstance(v, (tuple, list, np.ndarray)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metadata(path, items: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metadata(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def generate_toy_scene(spec: ToySceneSpec, scene_seed, n_dirs: int):
    """One scene: reflectance, per-direction shading/images and the target render.

    R and every S are snapped to the 8-bit grid before composing, so the
    saved files satisfy ``I = clamp(R * S)`` to within one quantisation step.
    """
    h, w = spec.size
    rng = np.random.default_rng(scene_seed)
    r = _quantize(_draw_reflectance(rng, h, w, spec.n_shapes))
    params = _lighting_params(rng, spec, n_dirs)
    shadings = [_quantize(render_shading(h, w, p)) for p in params]
    s_target = _quantize(np.broadcast_to(np.asarray(spec.target_shading, dtype=np.float64), (h, w, 3)))
    images = [_quantize(r * s) for s in shadings]
    target = _quantize(r * s_target)
    return {"reflectance": r, "shadings": shadings, "images": images,
            "target_shading": s_target, "target": target, "params": params}


def generate_toy_dataset(root, spec: ToySceneSpec | None = None, n_train: int = 16, n_test: int = 4, n_dirs: int = 4):
    """Write a toy multi-illumination dataset and return its train/test layouts.

    Input directions are tags ``0 .. n_dirs-1``; the target (style) lighting
    is tag ``n_dirs``.
    """
    spec = spec or ToySceneSpec()
    if n_dirs < 2:
        raise ValueError(f"n_dirs must be >= 2, got {n_dirs}")
    root = Path(root)
    seeds = np.random.SeedSequence(spec.seed).spawn(n_train + n_test)
    for idx, ss in enumerate(seeds):
        split = "train" if idx < n_train else "test"
        scene_id = f"scene{idx:04d}"
        scene_dir = root / split / scene_id
        gt = scene_dir / "gt"
        scene = generate_toy_scene(spec, ss, n_dirs)
        for k, (img, s) in enumerate(zip(scene["images"], scene["shadings"])):
            save_image(img, scene_dir / f"dir_{k}.png")
            save_image(s, gt / f"shading_dir_{k}.png")
        save_image(scene["target"], scene_dir / f"dir_{n_dirs}.png")
        save_image(scene["target_shading"], gt / f"shading_dir_{n_dirs}.png")
        save_image(scene["target"], gt / "target.png")
        save_image(scene["reflectance"], gt / "reflectance.png")
        meta = {
            "scene_id": scene_id, "split": split, "seed_entropy": ss.entropy,
            "seed_spawn_key": ",".join(map(str, ss.spawn_key)) or "-",
            "height": spec.size[0], "width": spec.size[1], "n_dirs": n_dirs,
            "target_tag": n_dirs, "target_shading": spec.target_shading,
        }
        for k, p in enumerate(scene["params"]):
            meta[f"dir_{k}.name"] = direction_name(k, n_dirs)
            for key, value in p.items():
                meta[f"dir_{k}.{key}"] = value
        write_metadata(scene_dir / "scene.txt", meta)
    tags = [str(k) for k in range(n_dirs)]
    train = scan_multiillum_layout(root / "train", tags, str(n_dirs), "train")
    test = scan_multiillum_layout(root / "test", tags, str(n_dirs), "test")
    return train, test


def toy_ground_truth(scene_dir, tag) -> dict:
    gt = Path(scene_dir) / "gt"
    return {
        "reflectance": load_image(gt / "reflectance.png"),
        "shading": load_image(gt / f"shading_dir_{tag}.png"),
        "target": load_image(gt / "target.png"),
    }
