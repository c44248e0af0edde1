"""Part taxonomies, synthetic multi-object multi-part scenes and raster datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from .channelizer import (
    ProviderError,
    check_labelmap,
    read_labelmap,
    read_mask,
    write_labelmap,
    write_mask,
)


class DataError(ValueError):
    pass


@dataclass
class PartTaxonomy:
    name: str
    objects: list[str]
    parts: list[dict]  # {"name", "object", "id"}

    def __post_init__(self):
        ids = sorted(p["id"] for p in self.parts)
        if ids != list(range(1, len(self.parts) + 1)):
            raise DataError(f"part ids must be dense in [1, K), got {ids}")
        for p in self.parts:
            if p["object"] not in self.objects:
                raise DataError(f"part {p['name']!r} owned by unknown object {p['object']!r}")

    @property
    def num_classes(self) -> int:
        return len(self.parts) + 1

    @property
    def class_names(self) -> list[str]:
        by_id = {p["id"]: p["name"] for p in self.parts}
        return ["background"] + [by_id[i] for i in range(1, self.num_classes)]

    def object_parts(self) -> dict[str, list[int]]:
        groups = {o: [] for o in self.objects}
        for p in sorted(self.parts, key=lambda p: p["id"]):
            groups[p["object"]].append(p["id"])
        return groups

    def part_to_object_id(self) -> np.ndarray:
        """Lookup table part id -> object id (objects numbered from 1)."""
        lut = np.zeros(self.num_classes, dtype=np.int64)
        for p in self.parts:
            lut[p["id"]] = self.objects.index(p["object"]) + 1
        return lut

    def permuted(self, perm: np.ndarray) -> "PartTaxonomy":
        """Same taxonomy with part ids relabelled by ``perm`` (perm[0] must be 0)."""
        parts = [dict(p, id=int(perm[p["id"]])) for p in self.parts]
        return PartTaxonomy(self.name, list(self.objects), parts)

    def to_dict(self) -> dict:
        return {"name": self.name, "objects": list(self.objects), "parts": [dict(p) for p in self.parts]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "PartTaxonomy":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing taxonomy file {path}")
        d = yaml.safe_load(path.read_text())
        return cls(d["name"], list(d["objects"]), [dict(p) for p in d["parts"]])


def synthetic_taxonomy() -> PartTaxonomy:
    return PartTaxonomy(
        "synthetic-3x7",
        ["disk", "blob", "bar"],
        [
            {"name": "disk-rim", "object": "disk", "id": 1},
            {"name": "disk-core", "object": "disk", "id": 2},
            {"name": "blob-body", "object": "blob", "id": 3},
            {"name": "blob-spot", "object": "blob", "id": 4},
            {"name": "bar-shaft", "object": "bar", "id": 5},
            {"name": "bar-cap-top", "object": "bar", "id": 6},
            {"name": "bar-cap-bottom", "object": "bar", "id": 7},
        ],
    )


@dataclass
class Sample:
    image_id: str
    rgb: np.ndarray  # H x W x 3 float32 in [0, 1]
    objects: np.ndarray
    parts: np.ndarray
    gt_edges: np.ndarray | None = None


def derive_gt_edges(parts: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour carrying a different part label."""
    parts = check_labelmap(parts)
    diff = np.zeros(parts.shape, dtype=bool)
    vert = parts[1:, :] != parts[:-1, :]
    horiz = parts[:, 1:] != parts[:, :-1]
    diff[1:, :] |= vert
    diff[:-1, :] |= vert
    diff[:, 1:] |= horiz
    diff[:, :-1] |= horiz
    return (diff & (parts != 0)).astype(np.uint8)


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class SceneSpec:
    size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    archetypes: tuple[str, ...] = ("disk", "blob", "bar")
    occlusion: bool = True
    noise_sigma: float = 0.05
    part_contrast: float = 0.22
    seed: int = 0

    MIN_CANVAS = 32


def _sample_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index, 0x5C3E])))


def _shade(color: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(color + delta, 0.0, 1.0)


def _disk(rng, yy, xx, size):
    r = rng.uniform(7.0, 12.0)
    w = rng.uniform(1.5, 2.0)
    cy, cx = rng.uniform(r, size - r, size=2)
    d = np.hypot(yy - cy, xx - cx)
    core = d <= r - w
    rim = (d <= r) & ~core
    return [(rim, 1), (core, 2)]


def _blob(rng, yy, xx, size):
    R = rng.uniform(7.0, 11.0)
    cy, cx = rng.uniform(R * 1.25, size - R * 1.25, size=2)
    lobes = rng.integers(2, 5)
    phase = rng.uniform(0, 2 * np.pi)
    ang = np.arctan2(yy - cy, xx - cx)
    radius = R * (1.0 + 0.2 * np.sin(lobes * ang + phase))
    body = np.hypot(yy - cy, xx - cx) <= radius
    # spot fits in a 4x4 box inside the body
    sr = rng.uniform(1.0, 1.9)
    off = rng.uniform(0, R * 0.4, size=2) * rng.choice([-1, 1], size=2)
    spot = (np.abs(yy - cy - off[0]) <= sr) & (np.abs(xx - cx - off[1]) <= sr) & body
    return [(body & ~spot, 3), (spot, 4)]


def _bar(rng, yy, xx, size):
    length = rng.uniform(18.0, 30.0) * min(1.0, size / 64)  # shorter bars on small canvases
    half_t = rng.uniform(1.5, 2.5)
    theta = rng.uniform(0.3, np.pi - 0.3)
    # direction points downward so negative axial coordinates are the top end
    dy, dx = np.sin(theta), np.cos(theta)
    m = length / 2 + 2
    cy, cx = rng.uniform(m, size - m, size=2)
    u = (yy - cy) * dy + (xx - cx) * dx
    v = -(yy - cy) * dx + (xx - cx) * dy
    bar = (np.abs(u) <= length / 2) & (np.abs(v) <= half_t)
    cap = rng.uniform(2.0, 3.5)
    top = bar & (u < -length / 2 + cap)
    bottom = bar & (u > length / 2 - cap)
    return [(bar & ~top & ~bottom, 5), (top, 6), (bottom, 7)]


_ARCHETYPES = {"disk": (_disk, 1), "blob": (_blob, 2), "bar": (_bar, 3)}
# per-part brightness offsets relative to the instance colour, sign chosen per instance
_PART_SHADE = {1: -1.0, 2: 0.0, 3: 0.0, 4: -1.0, 5: 0.0, 6: 1.0, 7: -1.0}


def _background(rng, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    tex = ndimage.gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(4, 4, 0))
    tex /= np.abs(tex).max() + 1e-9
    return np.clip(base + 0.3 * tex, 0.0, 1.0)


def render_sample(spec: SceneSpec, index: int) -> Sample:
    rng = _sample_rng(spec, index)
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rgb = _background(rng, size)
    objects = np.zeros((size, size), dtype=np.int64)
    parts = np.zeros((size, size), dtype=np.int64)

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_obj):
        kind = spec.archetypes[int(rng.integers(len(spec.archetypes)))]
        make, obj_id = _ARCHETYPES[kind]
        regions = make(rng, yy, xx, size)
        silhouette = np.zeros((size, size), dtype=bool)
        for region, _pid in regions:
            silhouette |= region
        if not spec.occlusion and (objects[silhouette] != 0).any():
            continue
        color = rng.uniform(0.15, 0.85, size=3)
        sign = rng.choice([-1.0, 1.0])
        for region, pid in regions:
            objects[region] = obj_id
            parts[region] = pid
            rgb[region] = _shade(color, sign * _PART_SHADE[pid] * spec.part_contrast)

    rgb = rgb + rng.normal(scale=spec.noise_sigma, size=rgb.shape)
    # quantised to 8 bits so on-disk round trips are lossless
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    return Sample(f"{spec.seed:04d}_{index:05d}", rgb.astype(np.float32), objects, parts, derive_gt_edges(parts))


def generate(spec: SceneSpec, n: int, offset: int = 0) -> tuple[list[Sample], PartTaxonomy, dict]:
    """Generate ``n`` samples (indices offset..offset+n-1), the taxonomy and a manifest."""
    if n < 1:
        raise DataError("n must be >= 1")
    if spec.size < SceneSpec.MIN_CANVAS:
        raise DataError(f"canvas {spec.size}px is too small, need at least {SceneSpec.MIN_CANVAS}px")
    if spec.max_objects < spec.min_objects or spec.min_objects < 1:
        raise DataError("invalid object count range")
    tax = synthetic_taxonomy()
    samples = [render_sample(spec, offset + i) for i in range(n)]
    for s in samples:
        if not np.array_equal(s.objects != 0, s.parts != 0):
            raise AssertionError(f"parts do not partition objects in {s.image_id}")
    return samples, tax, build_manifest(samples, tax, spec=asdict(spec))


def component_areas(labels: np.ndarray, cls: int) -> list[int]:
    comp, n = ndimage.label(labels == cls)  # 4-connectivity
    if n == 0:
        return []
    return np.bincount(comp.ravel())[1:].tolist()


def build_manifest(samples: list[Sample], tax: PartTaxonomy, spec: dict | None = None) -> dict:
    k = tax.num_classes
    pixels = np.zeros(k, dtype=np.int64)
    areas: list[list[int]] = [[] for _ in range(k)]
    for s in samples:
        pixels += np.bincount(s.parts.ravel(), minlength=k)
        for c in range(1, k):
            areas[c].extend(component_areas(s.parts, c))
    classes = []
    for c, name in enumerate(tax.class_names):
        classes.append({
            "id": c,
            "name": name,
            "pixels": int(pixels[c]),
            "components": len(areas[c]),
            "median_component_area": float(np.median(areas[c])) if areas[c] else None,
        })
    return {"taxonomy": tax.name, "num_samples": len(samples), "spec": spec, "classes": classes}


# -- raster datasets on disk ---------------------------------------------------

def write_raster_dataset(root: str | Path, samples: list[Sample], tax: PartTaxonomy,
                         manifest: dict | None = None, with_edges: bool = True) -> Path:
    root = Path(root)
    for sub in ("images", "objects", "parts") + (("edges",) if with_edges else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(np.round(s.rgb * 255).astype(np.uint8)).save(root / "images" / f"{s.image_id}.png")
        write_labelmap(root / "objects" / f"{s.image_id}.png", s.objects, len(tax.objects) + 1)
        write_labelmap(root / "parts" / f"{s.image_id}.png", s.parts, tax.num_classes)
        if with_edges:
            write_mask(root / "edges" / f"{s.image_id}.png", s.gt_edges)
    tax.save(root / "taxonomy.yaml")
    (root / "manifest.json").write_text(json.dumps(manifest or build_manifest(samples, tax), indent=2))
    return root


class RasterDataset:
    """Directory of rasters ``{images,objects,parts,edges?}/<id>.png``, loaded lazily."""

    def __init__(self, root: str | Path, taxonomy: str | Path | PartTaxonomy | None = None):
        self.root = Path(root)
        if isinstance(taxonomy, PartTaxonomy):
            self.taxonomy = taxonomy
        else:
            self.taxonomy = PartTaxonomy.load(taxonomy or self.root / "taxonomy.yaml")
        for sub in ("images", "objects", "parts"):
            if not (self.root / sub).is_dir():
                raise DataError(f"missing asset directory {self.root / sub}")
        self.ids = sorted(p.stem for p in (self.root / "images").glob("*.png"))
        self.has_edges = (self.root / "edges").is_dir()

    def __len__(self) -> int:
        return len(self.ids)

    def _labels(self, sub: str, image_id: str, k: int) -> np.ndarray:
        path = self.root / sub / f"{image_id}.png"
        try:
            labels = read_labelmap(path)
        except ProviderError as e:
            raise DataError(str(e)) from e
        if labels.size and labels.max() >= k:
            y, x = np.argwhere(labels >= k)[0]
            raise DataError(f"{path}: label {labels[y, x]} at (y={y}, x={x}) exceeds K={k}")
        return labels

    def __getitem__(self, i: int) -> Sample:
        image_id = self.ids[i]
        with Image.open(self.root / "images" / f"{image_id}.png") as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        objects = self._labels("objects", image_id, len(self.taxonomy.objects) + 1)
        parts = self._labels("parts", image_id, self.taxonomy.num_classes)
        if self.has_edges:
            edges = read_mask(self.root / "edges" / f"{image_id}.png")
        else:
            edges = derive_gt_edges(parts)
        return Sample(image_id, rgb, objects, parts, edges)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_raster_dataset(root: str | Path, taxonomy: str | Path | None = None) -> RasterDataset:
    return RasterDataset(root, taxonomy)
