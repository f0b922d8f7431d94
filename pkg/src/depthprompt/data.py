"""Synthetic scene generation, dataset I/O and spatially disjoint splits.

Scenes are procedurally built 3-channel tiles with a per-pixel class mask
and a height field. Two effects are baked in on purpose because they are
the failure modes the depth prompts are meant to fix:

* spectral confusion: building roofs and impervious plazas draw their
  texture from the same distribution, so appearance alone cannot separate
  classes 2 and 6;
* shadow occlusion: buildings cast shadows away from the sun that darken
  whatever ground class they fall on.

Dataset layout on disk is ``<root>/{images,masks,depth}/``; images and
masks are 8-bit PNG, depth pseudo-labels are 16-bit PNG named
``<tile_id>_depth.png``.
"""

import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigError,
    IllegalClassError,
    InputError,
    MissingLabelError,
    ShapeMismatchError,
    UnreadableFileError,
)

IGNORE_INDEX = 255

WATER = 0
ROAD = 1
BUILDINGS = 2
FARMLAND = 3
FOREST = 4
BARE_LAND = 5
IMPERVIOUS = 6

CLASS_NAMES = (
    "water",
    "road",
    "buildings",
    "farmland",
    "forest",
    "bare_land",
    "impervious_surface",
)

# Render palette, one RGB triple per class index.
CLASS_COLORS = (
    (41, 100, 235),    # water
    (120, 120, 130),   # road
    (214, 58, 47),     # buildings
    (222, 196, 92),    # farmland
    (34, 125, 61),     # forest
    (170, 130, 96),    # bare_land
    (200, 200, 205),   # impervious_surface
)

IGNORE_COLOR = (0, 0, 0)

VALID_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ClassSchema:
    """Ordered land-cover classes with render colors."""

    names: Tuple[str, ...] = CLASS_NAMES
    colors: Tuple[Tuple[int, int, int], ...] = CLASS_COLORS

    def __post_init__(self):
        if len(self.names) != 7 or len(self.colors) != 7:
            raise ConfigError("class schema must have exactly 7 entries")
        if len(set(self.colors)) != len(self.colors):
            raise ConfigError("class colors must be unique")
        if IGNORE_COLOR in self.colors:
            raise ConfigError("class colors may not reuse the ignore color")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def validate_mask(self, mask: np.ndarray) -> None:
        values = np.unique(mask)
        legal = set(range(self.num_classes)) | {IGNORE_INDEX}
        bad = [int(v) for v in values if int(v) not in legal]
        if bad:
            raise IllegalClassError(
                "mask contains illegal class values %s" % bad
            )

    def render(self, mask: np.ndarray) -> np.ndarray:
        """Return an H x W x 3 uint8 color image for an index mask."""
        self.validate_mask(mask)
        out = np.zeros(mask.shape + (3,), dtype=np.uint8)
        out[mask == IGNORE_INDEX] = IGNORE_COLOR
        for idx, color in enumerate(self.colors):
            out[mask == idx] = color
        return out

    def decode(self, color_image: np.ndarray) -> np.ndarray:
        """Invert render(); unknown colors raise IllegalClassError."""
        if color_image.ndim != 3 or color_image.shape[2] != 3:
            raise ShapeMismatchError("expected an H x W x 3 color image")
        mask = np.full(color_image.shape[:2], -1, dtype=np.int64)
        match = np.all(color_image == np.array(IGNORE_COLOR, dtype=np.uint8), axis=2)
        mask[match] = IGNORE_INDEX
        for idx, color in enumerate(self.colors):
            match = np.all(color_image == np.array(color, dtype=np.uint8), axis=2)
            mask[match] = idx
        if np.any(mask < 0):
            raise IllegalClassError("color image contains colors outside the palette")
        return mask


@dataclass
class ImageTile:
    """Model input: H x W x 3 reflectance raster in [0, 1]."""

    pixels: np.ndarray
    tile_id: str

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeMismatchError("tile pixels must be H x W x 3")
        h, w = p.shape[:2]
        if h % 32 != 0 or w % 32 != 0:
            raise InputError("tile dims must be divisible by 32, got %dx%d" % (h, w))
        if not np.all(np.isfinite(p)):
            raise InputError("tile contains non-finite pixels")
        if p.min() < 0.0 or p.max() > 1.0:
            raise InputError("tile pixels must lie in [0, 1]")


@dataclass
class SceneSpec:
    """Parameters of one procedural scene."""

    seed: int
    size: int = 64
    building_density: float = 0.5
    sun_azimuth_deg: float = 135.0
    sun_elevation_deg: float = 35.0
    road_width: int = 8
    water_blob_count: int = 1
    shadow_factor: float = 0.6

    def validate(self) -> None:
        if self.size % 32 != 0 or self.size <= 0:
            raise InputError("scene size must be a positive multiple of 32")
        if not (0.0 <= self.building_density <= 1.0):
            raise InputError("building density must lie in [0, 1]")
        if not (5.0 <= self.sun_elevation_deg <= 85.0):
            raise InputError("sun elevation must lie in [5, 85] degrees")
        if self.road_width < 1:
            raise InputError("road width must be >= 1")
        if self.water_blob_count < 0:
            raise InputError("water blob count must be >= 0")
        if not (0.0 < self.shadow_factor < 1.0):
            raise InputError("shadow factor must lie in (0, 1)")


def default_scene_spec(seed: int, size: int = 64, shadow_stress: bool = False) -> SceneSpec:
    """Standard spec; shadow_stress raises density, drops the sun and
    darkens the cast shadows."""
    if shadow_stress:
        return SceneSpec(
            seed=seed,
            size=size,
            building_density=0.9,
            sun_elevation_deg=18.0,
            shadow_factor=0.42,
        )
    return SceneSpec(seed=seed, size=size)


@dataclass
class Scene:
    """Full generator output, including the diagnostic shadow mask."""

    tile: ImageTile
    mask: np.ndarray
    height: np.ndarray
    shadow: np.ndarray


# Per-class base colors used by the texture painter. Roofs and plazas are
# deliberately absent here, they share _confusable_texture below.
_BASE_COLORS = {
    WATER: (0.06, 0.16, 0.38),
    ROAD: (0.34, 0.34, 0.38),
    FARMLAND: (0.30, 0.52, 0.22),
    FOREST: (0.08, 0.30, 0.12),
    BARE_LAND: (0.56, 0.46, 0.30),
}

def _paint(image, region, rng, base, noise=0.025):
    n = int(region.sum())
    if n == 0:
        return
    base = np.asarray(base, dtype=np.float32)
    image[region] = base + rng.normal(0.0, noise, size=(n, 3)).astype(np.float32)


def _confusable_texture(rng, n):
    """Shared roof/plaza texture: flat gray with a per-region tone."""
    tone = rng.uniform(0.48, 0.62)
    base = np.array([tone, tone, tone * 0.98], dtype=np.float32)
    return base + rng.normal(0.0, 0.02, size=(n, 3)).astype(np.float32)


def _rect(rng, size, lo, hi, snap=4):
    """Random axis-aligned rectangle fully inside the tile, as slices.

    Corners and extents land on the snap grid, imitating the block
    structure of planned urban layouts; it also keeps region edges on
    clean feature-stride boundaries.
    """
    h = int(rng.integers(lo // snap, hi // snap + 1)) * snap
    w = int(rng.integers(lo // snap, hi // snap + 1)) * snap
    r0 = int(rng.integers(0, (size - h) // snap + 1)) * snap
    c0 = int(rng.integers(0, (size - w) // snap + 1)) * snap
    return slice(r0, r0 + h), slice(c0, c0 + w)


def _rect_avoiding(rng, size, lo, hi, blocked, tries=8):
    """Like _rect, but redraws while the rectangle overlaps `blocked`.

    Falls back to the last draw when the tile is too crowded, so dense
    specs still place every region.
    """
    rs = cs = None
    for _ in range(tries):
        rs, cs = _rect(rng, size, lo, hi)
        if not blocked[rs, cs].any():
            break
    return rs, cs


def generate_scene(spec: SceneSpec) -> Tuple[ImageTile, np.ndarray, np.ndarray]:
    """Build one scene; returns (tile, label mask, height map)."""
    scene = generate_scene_full(spec)
    return scene.tile, scene.mask, scene.height


def generate_scene_full(spec: SceneSpec) -> Scene:
    """Like generate_scene but also returns the cast-shadow mask."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    scale = size / 64.0

    mask = np.full((size, size), FARMLAND, dtype=np.int64)
    height = np.zeros((size, size), dtype=np.float32)
    image = np.zeros((size, size, 3), dtype=np.float32)

    # Ground: farmland with a bare-land band and a forest band, chunky on
    # purpose so boundaries sit on long straight lines.
    split_col = int(rng.integers(size // 16, 3 * size // 16 + 1)) * 4
    if rng.random() < 0.5:
        mask[:, split_col:] = BARE_LAND
    else:
        mask[:, :split_col] = BARE_LAND
    forest_rows = int(rng.integers(max(1, size // 24), size // 12 + 1)) * 4
    if rng.random() < 0.5:
        mask[:forest_rows, :] = FOREST
    else:
        mask[-forest_rows:, :] = FOREST

    # Water blobs: rectangles with rounded mass, height stays 0. Sized so
    # that a road crossing one still leaves substantial water on each side.
    for _ in range(spec.water_blob_count):
        rs, cs = _rect(rng, size, max(12, int(16 * scale)), max(16, int(28 * scale)))
        mask[rs, cs] = WATER

    # Roads: one horizontal and one vertical stripe.
    rw = spec.road_width
    row = int(rng.integers(1, (size - 2 * rw) // 4 + 1)) * 4
    col = int(rng.integers(1, (size - 2 * rw) // 4 + 1)) * 4
    mask[row : row + rw, :] = ROAD
    mask[:, col : col + rw] = ROAD

    # Paint everything placed so far.
    for cls, base in _BASE_COLORS.items():
        _paint(image, mask == cls, rng, base)

    # Impervious plazas, textured from the shared roof/plaza distribution.
    # Plazas and buildings stay off the water so lakes keep their shape.
    water = mask == WATER
    plaza_count = int(round(2 * scale * scale)) + 1
    for _ in range(plaza_count):
        rs, cs = _rect_avoiding(
            rng, size, max(8, int(12 * scale)), max(12, int(20 * scale)), water
        )
        mask[rs, cs] = IMPERVIOUS
        region = np.zeros((size, size), dtype=bool)
        region[rs, cs] = True
        image[region] = _confusable_texture(rng, int(region.sum()))

    # Buildings last so their footprints never get overwritten.
    max_buildings = max(1, int(round(5 * scale * scale)))
    n_buildings = int(round(spec.building_density * max_buildings))
    footprints = []
    for _ in range(n_buildings):
        rs, cs = _rect_avoiding(
            rng, size, max(8, int(8 * scale)), max(12, int(16 * scale)), water
        )
        h = float(rng.uniform(3.0, 8.0))
        mask[rs, cs] = BUILDINGS
        region = np.zeros((size, size), dtype=bool)
        region[rs, cs] = True
        height[region] = h
        image[region] = _confusable_texture(rng, int(region.sum()))
        footprints.append((region, h))
    # A building stamped over an earlier one reclaims those pixels, so
    # re-sync: height is positive exactly on building pixels.
    height[mask != BUILDINGS] = 0.0

    # Cast shadows: shift each footprint away from the sun, length grows
    # with height over tan(elevation). Shadows darken the image only and
    # never land on building pixels.
    shadow = np.zeros((size, size), dtype=bool)
    az = math.radians(spec.sun_azimuth_deg)
    elev = math.radians(spec.sun_elevation_deg)
    # Sun direction on the grid (row grows downward); shadow goes opposite.
    d_row = math.cos(az)
    d_col = -math.sin(az)
    for region, h in footprints:
        region = region & (mask == BUILDINGS)
        length = h / math.tan(elev)
        for step in range(1, int(math.ceil(length)) + 1):
            dr = int(round(step * d_row))
            dc = int(round(step * d_col))
            shifted = np.zeros_like(region)
            rs_src = slice(max(0, -dr), min(size, size - dr))
            cs_src = slice(max(0, -dc), min(size, size - dc))
            rs_dst = slice(max(0, dr), min(size, size + dr))
            cs_dst = slice(max(0, dc), min(size, size + dc))
            shifted[rs_dst, cs_dst] = region[rs_src, cs_src]
            shadow |= shifted
    shadow &= mask != BUILDINGS
    image[shadow] *= spec.shadow_factor

    image = np.clip(image, 0.0, 1.0)
    tile = ImageTile(pixels=image, tile_id="scene_%d" % spec.seed)
    return Scene(tile=tile, mask=mask, height=height, shadow=shadow)


def split_spatial(
    grid: Tuple[int, int],
    ratios: Sequence[float],
    id_format: str = "r{row:03d}_c{col:03d}",
) -> Dict[str, List[str]]:
    """Partition an nrows x ncols tile grid into contiguous split blocks.

    Tiles are walked in boustrophedon order (left-to-right on even rows,
    right-to-left on odd ones) so every split is a 4-connected region.
    Counts follow largest-remainder rounding of the ratios; every split is
    forced non-empty by borrowing from the largest one.
    """
    nrows, ncols = grid
    if nrows <= 0 or ncols <= 0:
        raise InputError("grid dims must be positive")
    total = nrows * ncols
    if total < len(VALID_SPLITS):
        raise InputError("need at least 3 tiles for 3 non-empty splits")
    if len(ratios) != 3:
        raise ConfigError("expected exactly 3 split ratios")
    if any(r <= 0 for r in ratios):
        raise ConfigError("split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split ratios must sum to 1")

    counts = [int(math.floor(total * r)) for r in ratios]
    remainders = [total * r - c for r, c in zip(ratios, counts)]
    leftover = total - sum(counts)
    order = sorted(range(3), key=lambda i: (-remainders[i], i))
    for i in range(leftover):
        counts[order[i % 3]] += 1
    while min(counts) == 0:
        counts[counts.index(max(counts))] -= 1
        counts[counts.index(min(counts))] += 1

    ids = []
    for row in range(nrows):
        cols = range(ncols) if row % 2 == 0 else range(ncols - 1, -1, -1)
        for col in cols:
            ids.append(id_format.format(row=row, col=col))
    splits = {}
    start = 0
    for name, count in zip(VALID_SPLITS, counts):
        splits[name] = ids[start : start + count]
        start += count
    return splits


def write_split_manifest(path: str, splits: Dict[str, Sequence[str]]) -> None:
    """One `tile_id<TAB>split` line per tile, train/val/test order."""
    with open(path, "w") as fh:
        for name in VALID_SPLITS:
            for tile_id in splits.get(name, ()):
                fh.write("%s\t%s\n" % (tile_id, name))


def read_split_manifest(path: str) -> Dict[str, List[str]]:
    if not os.path.isfile(path):
        raise UnreadableFileError("split manifest not found: %s" % path)
    splits = {name: [] for name in VALID_SPLITS}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError("bad manifest line %d: %r" % (line_no, line))
            tile_id, split = parts
            if split not in splits:
                raise InputError("unknown split %r on line %d" % (split, line_no))
            splits[split].append(tile_id)
    return splits


def image_path(root: str, tile_id: str) -> str:
    return os.path.join(root, "images", tile_id + ".png")


def mask_path(root: str, tile_id: str) -> str:
    return os.path.join(root, "masks", tile_id + ".png")


def depth_path(root: str, tile_id: str) -> str:
    return os.path.join(root, "depth", tile_id + "_depth.png")


def manifest_path(root: str) -> str:
    return os.path.join(root, "splits.tsv")


def save_image_png(path: str, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask_png(path: str, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8)).save(path)


def save_depth_png(path: str, depth: np.ndarray) -> None:
    """16-bit PNG, 0 -> 0.0 and 65535 -> 1.0."""
    if depth.min() < 0.0 or depth.max() > 1.0:
        raise InputError("depth must lie in [0, 1] before quantization")
    arr = np.round(depth * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def _open_image(path: str) -> Image.Image:
    if not os.path.isfile(path):
        raise UnreadableFileError("file not found: %s" % path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableFileError("cannot read %s: %s" % (path, exc))
    return img


def load_image_png(path: str) -> np.ndarray:
    img = _open_image(path)
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_mask_png(path: str) -> np.ndarray:
    img = _open_image(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.int64)


def load_depth_png(path: str) -> np.ndarray:
    img = _open_image(path)
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise InputError("depth PNG must be single channel: %s" % path)
    return arr / 65535.0


@dataclass
class Sample:
    """One training/eval item: tile, label mask, optional depth target."""

    tile: ImageTile
    mask: np.ndarray
    depth: Optional[np.ndarray] = None
    schema: ClassSchema = field(default_factory=ClassSchema)


def load_sample(
    image_file: str,
    mask_file: str,
    depth_file: Optional[str] = None,
    require_depth: bool = False,
    schema: Optional[ClassSchema] = None,
    tile_id: Optional[str] = None,
) -> Sample:
    """Load and validate one image/mask(/depth) triple."""
    from .depth_branch import normalize_depth

    schema = schema or ClassSchema()
    pixels = load_image_png(image_file)
    mask = load_mask_png(mask_file)
    if mask.shape != pixels.shape[:2]:
        raise ShapeMismatchError(
            "mask shape %s does not match image %s"
            % (mask.shape, pixels.shape[:2])
        )
    schema.validate_mask(mask)
    if tile_id is None:
        tile_id = os.path.splitext(os.path.basename(image_file))[0]
    tile = ImageTile(pixels=pixels, tile_id=tile_id)

    depth = None
    if depth_file is not None and os.path.isfile(depth_file):
        raw = load_depth_png(depth_file)
        if raw.shape != mask.shape:
            raise ShapeMismatchError(
                "depth shape %s does not match image %s" % (raw.shape, mask.shape)
            )
        depth = normalize_depth(raw)
    elif require_depth:
        raise MissingLabelError(
            "depth pseudo-label required but missing for %s" % tile_id
        )
    return Sample(tile=tile, mask=mask, depth=depth, schema=schema)


def write_scene_files(root: str, tile_id: str, scene: Scene) -> None:
    """Write one scene's image/mask/depth triple under the dataset layout."""
    from .depth_branch import normalize_depth

    for sub in ("images", "masks", "depth"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    save_image_png(image_path(root, tile_id), scene.tile.pixels)
    save_mask_png(mask_path(root, tile_id), scene.mask)
    save_depth_png(depth_path(root, tile_id), normalize_depth(scene.height))
