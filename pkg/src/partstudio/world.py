"""Procedural creature corpus: layered 2D primitives rendered from four views.

Every creature is assembled from a fixed set of part roles (head, wings,
torso, legs, tail).  Each part is controlled by a six-dimensional descriptor
(size, aspect, curvature, red, green, blue), all in [0, 1].  Rendering is a
deterministic painter's algorithm over hard-edged primitives, so the part
masks written alongside each image are exact pixel-ownership maps rather
than approximations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PART_ROLES = ("head", "wings", "torso", "legs", "tail")
DESCRIPTOR_FIELDS = ("size", "aspect", "curvature", "red", "green", "blue")
DESCRIPTOR_DIM = len(DESCRIPTOR_FIELDS)

# column indices into a descriptor row
SIZE, ASPECT, CURVE, RED, GREEN, BLUE = range(DESCRIPTOR_DIM)

VIEW_COUNT = 4
VIEW_AZIMUTHS_DEG = (0, 90, 180, 270)
VIEW_NAMES = ("front", "left", "back", "right")

# Minimum L-inf distance between the descriptors of the same part role in any
# two species.  Instance jitter stays strictly below half of this, which keeps
# nearest-nominal classification exact (see identifiability test).
MIN_SEPARATION = 0.25
DEFAULT_JITTER = 0.05

DEFAULT_IMAGE_SIZE = 32
DEFAULT_BACKGROUND = (0.78, 0.82, 0.86)


class WorldError(Exception):
    """Base error for corpus construction problems."""


class SeparationError(WorldError):
    """A species pair violates the minimum descriptor separation."""

    def __init__(self, pair, part_index, distance):
        self.pair = pair
        self.part_index = part_index
        self.distance = distance
        super().__init__(
            f"species {pair[0]} and {pair[1]} are {distance:.4f} apart on part "
            f"{part_index}, below the floor {MIN_SEPARATION}"
        )


def _quantize_color(rgb):
    """Snap a float color to the uint8 grid used by the PNG files."""
    arr = np.asarray(rgb, dtype=np.float64)
    return np.round(arr * 255.0) / 255.0


@dataclass
class SpeciesSpec:
    """Nominal descriptors for one species."""

    species_id: int
    parts: np.ndarray  # (part_count, DESCRIPTOR_DIM) in [0, 1]
    layout_seed: int

    def __post_init__(self):
        self.parts = np.asarray(self.parts, dtype=np.float64)
        if self.parts.ndim != 2 or self.parts.shape[1] != DESCRIPTOR_DIM:
            raise WorldError(f"descriptor table must be (M, {DESCRIPTOR_DIM})")
        if np.any(self.parts < 0.0) or np.any(self.parts > 1.0):
            raise WorldError("descriptors must lie in [0, 1]")

    @property
    def part_count(self):
        return self.parts.shape[0]

    def jittered(self, rng, amplitude=DEFAULT_JITTER):
        """Instance-level perturbation, clipped back into [0, 1]."""
        noise = rng.uniform(-amplitude, amplitude, size=self.parts.shape)
        return np.clip(self.parts + noise, 0.0, 1.0)

    def to_json(self):
        return {
            "species_id": self.species_id,
            "parts": self.parts.tolist(),
            "layout_seed": self.layout_seed,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            species_id=int(obj["species_id"]),
            parts=np.asarray(obj["parts"], dtype=np.float64),
            layout_seed=int(obj["layout_seed"]),
        )


@dataclass
class ComposedSpec:
    """A creature whose parts may come from different species.

    ``part_sources[m]`` records the species that donated part m, or -1 for
    parts that were sampled or interpolated rather than copied.
    """

    parts: np.ndarray
    part_sources: list

    def __post_init__(self):
        self.parts = np.asarray(self.parts, dtype=np.float64)
        if len(self.part_sources) != self.parts.shape[0]:
            raise WorldError("one source tag per part required")


@dataclass
class SpeciesCatalog:
    """The closed world of species the corpus is drawn from."""

    species: list
    part_count: int
    separation: float
    seed: int

    def __len__(self):
        return len(self.species)

    def __getitem__(self, species_id) -> SpeciesSpec:
        return self.species[species_id]

    def descriptor_table(self):
        """(C, M, 6) array of nominal descriptors."""
        return np.stack([s.parts for s in self.species], axis=0)

    def min_pairwise_distance(self):
        """Smallest per-part L-inf distance over all species pairs.

        Returns (distance, pair, part_index).
        """
        table = self.descriptor_table()
        best = (np.inf, (-1, -1), -1)
        for i in range(len(table)):
            for j in range(i + 1, len(table)):
                per_part = np.abs(table[i] - table[j]).max(axis=1)
                m = int(np.argmin(per_part))
                if per_part[m] < best[0]:
                    best = (float(per_part[m]), (i, j), m)
        return best

    def validate_separation(self):
        dist, pair, part = self.min_pairwise_distance()
        if dist < self.separation:
            raise SeparationError(pair, part, dist)

    def to_json(self):
        return {
            "part_count": self.part_count,
            "separation": self.separation,
            "seed": self.seed,
            "species": [s.to_json() for s in self.species],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            species=[SpeciesSpec.from_json(s) for s in obj["species"]],
            part_count=int(obj["part_count"]),
            separation=float(obj["separation"]),
            seed=int(obj["seed"]),
        )


def generate_species_catalog(
    species_count,
    part_count=len(PART_ROLES),
    seed=0,
    separation=MIN_SEPARATION,
    max_rejections=20000,
) -> SpeciesCatalog:
    """Draw a catalog whose species are mutually separated on every part.

    Shape parameters are free; colors are rejection-sampled so that for each
    part role, every species pair (and the background) differs by at least
    ``separation`` in L-inf distance over RGB.  Color separation implies the
    full-descriptor separation the evaluation oracle relies on.
    """
    if species_count < 1:
        raise WorldError("catalog needs at least one species")
    if part_count < 1:
        raise WorldError("creatures need at least one part")
    rng = np.random.default_rng(seed)
    bg = np.asarray(DEFAULT_BACKGROUND, dtype=np.float64)
    # accepted colors per part role, background counts as taken everywhere
    taken = [[bg] for _ in range(part_count)]
    species = []
    rejections = 0
    for sid in range(species_count):
        parts = np.empty((part_count, DESCRIPTOR_DIM), dtype=np.float64)
        parts[:, :3] = rng.uniform(0.0, 1.0, size=(part_count, 3))
        for m in range(part_count):
            while True:
                color = _quantize_color(rng.uniform(0.0, 1.0, size=3))
                gaps = [np.abs(color - prev).max() for prev in taken[m]]
                if min(gaps) >= separation:
                    break
                rejections += 1
                if rejections > max_rejections:
                    raise WorldError(
                        f"could not place {species_count} species with "
                        f"separation {separation}; color space exhausted"
                    )
            taken[m].append(color)
            parts[m, 3:] = color
        species.append(
            SpeciesSpec(
                species_id=sid,
                parts=parts,
                layout_seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    catalog = SpeciesCatalog(
        species=species, part_count=part_count, separation=separation, seed=seed
    )
    catalog.validate_separation()
    return catalog


# --- rasterizer ----------------------------------------------------------
#
# All footprints are boolean masks evaluated at pixel centers, no
# anti-aliasing.  Coordinates are normalized to [0, 1] with y pointing down.


def _grid(n):
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c)  # xx[y, x], yy[y, x]


def _disc(xx, yy, cx, cy, r):
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _triangle(xx, yy, p0, p1, p2):
    def edge(a, b):
        return (xx - a[0]) * (b[1] - a[1]) - (yy - a[1]) * (b[0] - a[0])

    d0, d1, d2 = edge(p0, p1), edge(p1, p2), edge(p2, p0)
    neg = (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
    pos = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
    return neg | pos


def _capsule(xx, yy, p0, p1, half_width):
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    norm = px * px + py * py
    if norm == 0:
        return _disc(xx, yy, p0[0], p0[1], half_width)
    t = np.clip(((xx - p0[0]) * px + (yy - p0[1]) * py) / norm, 0.0, 1.0)
    dx = xx - (p0[0] + t * px)
    dy = yy - (p0[1] + t * py)
    return dx * dx + dy * dy <= half_width * half_width


def _fan(xx, yy, cx, cy, r, direction, half_angle):
    inside = _disc(xx, yy, cx, cy, r)
    ang = np.arctan2(yy - cy, xx - cx)
    delta = np.arctan2(np.sin(ang - direction), np.cos(ang - direction))
    return inside & (np.abs(delta) <= half_angle)


def _frontal_layout(parts, back):
    """Footprint recipe shared by the front (0) and back (180) views.

    Returns a list of (part_index, footprint_fn) in paint order, rear to
    front.  In the front view the tail is tucked behind the torso and is
    fully occluded; in the back view it fans out above the torso.
    """
    head, wings, torso, legs, tail = parts[0], parts[1], parts[2], parts[3], parts[4]
    cx, cy = 0.5, 0.58
    rx = 0.11 + 0.07 * torso[SIZE]
    ry = rx * (0.8 + 0.5 * torso[ASPECT])
    r_head = 0.06 + 0.05 * head[SIZE]
    head_cy = cy - ry - 0.55 * r_head

    def torso_fp(xx, yy):
        return _ellipse(xx, yy, cx, cy, rx, ry)

    def head_fp(xx, yy):
        squish = 0.8 + 0.4 * head[ASPECT]
        return _ellipse(xx, yy, cx, head_cy, r_head, r_head * squish)

    def wings_fp(xx, yy):
        span = 0.10 + 0.10 * wings[SIZE]
        wh = 0.10 + 0.08 * wings[ASPECT]
        droop = (wings[CURVE] - 0.3) * 0.25
        ay = cy - 0.2 * ry
        out = np.zeros_like(xx, dtype=bool)
        for sgn in (-1.0, 1.0):
            ax = cx + sgn * rx * 0.9
            out |= _triangle(
                xx, yy,
                (ax, ay - 0.5 * wh),
                (ax, ay + 0.5 * wh),
                (ax + sgn * span, ay + droop),
            )
        return out

    def legs_fp(xx, yy):
        off = (0.3 + 0.4 * legs[CURVE]) * rx
        top = cy + ry - 0.03
        length = 0.08 + 0.07 * legs[SIZE]
        hw = 0.02 + 0.012 * legs[ASPECT]
        out = np.zeros_like(xx, dtype=bool)
        for sgn in (-1.0, 1.0):
            x = cx + sgn * off
            out |= _capsule(xx, yy, (x, top), (x, top + length), hw)
        return out

    def tail_fp(xx, yy):
        if back:
            # hangs below the torso; pokes out past the bottom rim for every
            # descriptor combination, which keeps front and back views distinct
            r_fan = 0.16 + 0.08 * tail[SIZE]
            spread = 0.9 + 0.4 * tail[CURVE]
            return _fan(xx, yy, cx, cy + 0.5 * ry, r_fan, np.pi / 2, spread)
        # tucked: a small fan strictly inside the torso, painted below it
        return _fan(xx, yy, cx, cy + 0.3 * ry, 0.5 * ry, np.pi / 2, 0.6)

    order = [(4, tail_fp), (3, legs_fp), (1, wings_fp), (2, torso_fp), (0, head_fp)]
    return order


def _profile_layout(parts, sgn):
    """Side views; sgn=-1 faces left (azimuth 90), sgn=+1 faces right (270)."""
    head, wings, torso, legs, tail = parts[0], parts[1], parts[2], parts[3], parts[4]
    cx, cy = 0.5, 0.55
    rx = 0.14 + 0.08 * torso[SIZE]
    ry = rx * (0.55 + 0.45 * torso[ASPECT])
    r_head = 0.06 + 0.05 * head[SIZE]

    def torso_fp(xx, yy):
        return _ellipse(xx, yy, cx, cy, rx, ry)

    def head_fp(xx, yy):
        hx = cx + sgn * (rx + 0.45 * r_head)
        hy = cy - ry * 0.55 - 0.2 * r_head
        squish = 0.8 + 0.4 * head[ASPECT]
        return _ellipse(xx, yy, hx, hy, r_head, r_head * squish)

    def wings_fp(xx, yy):
        # folded wing drawn over the flank
        span = 0.12 + 0.10 * wings[SIZE]
        wh = 0.08 + 0.08 * wings[ASPECT]
        droop = (wings[CURVE] - 0.3) * 0.2
        bx = cx + sgn * 0.1 * rx
        by = cy - 0.35 * ry
        return _triangle(
            xx, yy,
            (bx, by - 0.5 * wh),
            (bx, by + 0.5 * wh),
            (bx - sgn * span, by + droop),
        )

    def legs_fp(xx, yy):
        top = cy + ry - 0.03
        length = 0.08 + 0.07 * legs[SIZE]
        hw = 0.02 + 0.012 * legs[ASPECT]
        out = np.zeros_like(xx, dtype=bool)
        for xoff in (-0.45, 0.25):
            x = cx + sgn * xoff * rx
            out |= _capsule(xx, yy, (x, top), (x, top + length), hw)
        return out

    def tail_fp(xx, yy):
        # trails behind the body, opposite the head
        r_fan = 0.08 + 0.09 * tail[SIZE]
        spread = 0.3 + 0.4 * tail[CURVE]
        tx = cx - sgn * (rx + 0.2 * r_fan)
        ty = cy - 0.2 * ry
        direction = np.pi if sgn > 0 else 0.0
        return _fan(xx, yy, tx, ty, r_fan, direction, spread)

    order = [(4, tail_fp), (3, legs_fp), (2, torso_fp), (1, wings_fp), (0, head_fp)]
    return order


def _extra_orb(parts, m, view_index):
    """Roles beyond the named five become small satellites around the body."""
    desc = parts[m]
    k = m - len(PART_ROLES)
    angle = 2.0 * np.pi * (k * 0.37 + 0.05 * view_index)
    cx = 0.5 + 0.36 * np.cos(angle)
    cy = 0.30 + 0.12 * np.sin(angle)
    r = 0.025 + 0.035 * desc[SIZE]

    def orb_fp(xx, yy):
        squish = 0.7 + 0.6 * desc[ASPECT]
        return _ellipse(xx, yy, cx, cy, r, r * squish)

    return (m, orb_fp)


@dataclass
class LabeledImage:
    """A rendered view plus exact per-part ownership masks."""

    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    masks: np.ndarray  # (M, H, W) bool
    view_index: int
    species_id: int = -1
    part_sources: list = field(default_factory=list)


def render_creature(
    spec,
    view_index,
    image_size=DEFAULT_IMAGE_SIZE,
    background=DEFAULT_BACKGROUND,
    background_texture=False,
) -> LabeledImage:
    """Rasterize one view of a creature.

    Accepts a SpeciesSpec, a ComposedSpec, or a bare (M, 6) descriptor
    array.  Masks record pixel ownership after occlusion, so they are
    mutually disjoint and a fully hidden part yields an empty mask.
    """
    if not 0 <= view_index < VIEW_COUNT:
        raise WorldError(f"view_index must be in [0, {VIEW_COUNT})")
    if isinstance(spec, SpeciesSpec):
        parts = spec.parts
        species_id = spec.species_id
        sources = [spec.species_id] * spec.part_count
    elif isinstance(spec, ComposedSpec):
        parts = spec.parts
        species_id = -1
        sources = list(spec.part_sources)
    else:
        parts = np.asarray(spec, dtype=np.float64)
        species_id = -1
        sources = [-1] * parts.shape[0]
    m_total = parts.shape[0]
    if m_total < len(PART_ROLES):
        raise WorldError(f"renderer requires at least {len(PART_ROLES)} parts")

    xx, yy = _grid(image_size)
    if view_index in (0, 2):
        order = _frontal_layout(parts, back=(view_index == 2))
    else:
        order = _profile_layout(parts, sgn=-1.0 if view_index == 1 else 1.0)
    # satellites sit behind everything else
    order = [_extra_orb(parts, m, view_index) for m in range(len(PART_ROLES), m_total)] + order

    owner = np.full((image_size, image_size), -1, dtype=np.int32)
    for part_index, fp in order:
        owner[fp(xx, yy)] = part_index

    bg = _quantize_color(background).astype(np.float32)
    pixels = np.empty((image_size, image_size, 3), dtype=np.float32)
    pixels[:] = bg
    if background_texture:
        # deterministic checker tint, kept far from any part color gap
        xi = np.arange(image_size)
        checker = ((xi[None, :] // 4 + xi[:, None] // 4) % 2).astype(np.float32)
        pixels += (checker[..., None] - 0.5) * (4.0 / 255.0)
        pixels = _quantize_color(np.clip(pixels, 0.0, 1.0)).astype(np.float32)
    masks = np.zeros((m_total, image_size, image_size), dtype=bool)
    for m in range(m_total):
        sel = owner == m
        masks[m] = sel
        pixels[sel] = _quantize_color(parts[m, 3:]).astype(np.float32)
    return LabeledImage(
        pixels=pixels,
        masks=masks,
        view_index=view_index,
        species_id=species_id,
        part_sources=sources,
    )


# --- dataset -------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Index of a rendered corpus on disk."""

    root: Path
    catalog: SpeciesCatalog
    records: list
    instances_per_species: int
    image_size: int
    jitter_amplitude: float
    seed: int
    background: tuple
    background_texture: bool

    @property
    def species_count(self):
        return len(self.catalog)

    @property
    def part_count(self):
        return self.catalog.part_count

    @property
    def view_count(self):
        return VIEW_COUNT

    def train_records(self):
        return [r for r in self.records if r["split"] == "train"]

    def to_json(self):
        return {
            "species_count": len(self.catalog),
            "part_count": self.catalog.part_count,
            "view_count": VIEW_COUNT,
            "image_size": self.image_size,
            "instances_per_species": self.instances_per_species,
            "jitter_amplitude": self.jitter_amplitude,
            "seed": self.seed,
            "background": list(self.background),
            "background_texture": self.background_texture,
            "catalog": self.catalog.to_json(),
            "records": self.records,
        }

    def save(self):
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def from_json(cls, obj, root):
        return cls(
            root=Path(root),
            catalog=SpeciesCatalog.from_json(obj["catalog"]),
            records=obj["records"],
            instances_per_species=int(obj["instances_per_species"]),
            image_size=int(obj["image_size"]),
            jitter_amplitude=float(obj["jitter_amplitude"]),
            seed=int(obj["seed"]),
            background=tuple(obj["background"]),
            background_texture=bool(obj["background_texture"]),
        )


def build_dataset(
    catalog,
    out_root,
    instances_per_species=8,
    jitter_amplitude=DEFAULT_JITTER,
    seed=0,
    image_size=DEFAULT_IMAGE_SIZE,
    background=DEFAULT_BACKGROUND,
    background_texture=False,
    train_fraction=0.75,
) -> DatasetManifest:
    """Render the corpus: every instance of every species from every view.

    Writes images/<id>.png, masks/<id>_<m>.png (255 inside the part), and
    manifest.json under out_root.  Instances of one species share nominal
    descriptors and differ by clipped uniform jitter.  The split assigns the
    last instances of each species to "val" so every species appears in both
    splits.
    """
    if jitter_amplitude >= MIN_SEPARATION / 2:
        raise WorldError(
            f"jitter {jitter_amplitude} must stay below {MIN_SEPARATION / 2} "
            "or species stop being identifiable"
        )
    root = Path(out_root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = max(1, int(round(instances_per_species * train_fraction)))
    records = []
    rid = 0
    for spec in catalog.species:
        for inst in range(instances_per_species):
            jittered = spec.jittered(rng, jitter_amplitude)
            split = "train" if inst < n_train else "val"
            for view in range(VIEW_COUNT):
                img = render_creature(
                    jittered,
                    view,
                    image_size=image_size,
                    background=background,
                    background_texture=background_texture,
                )
                name = f"{rid:05d}"
                Image.fromarray(
                    np.round(img.pixels * 255.0).astype(np.uint8)
                ).save(root / "images" / f"{name}.png")
                mask_files = []
                for m in range(catalog.part_count):
                    mf = f"{name}_{m}.png"
                    Image.fromarray(
                        (img.masks[m] * 255).astype(np.uint8)
                    ).save(root / "masks" / mf)
                    mask_files.append(f"masks/{mf}")
                records.append(
                    {
                        "id": name,
                        "image": f"images/{name}.png",
                        "masks": mask_files,
                        "species_id": spec.species_id,
                        "instance": inst,
                        "view_index": view,
                        "split": split,
                        "descriptors": jittered.tolist(),
                    }
                )
                rid += 1
    manifest = DatasetManifest(
        root=root,
        catalog=catalog,
        records=records,
        instances_per_species=instances_per_species,
        image_size=image_size,
        jitter_amplitude=jitter_amplitude,
        seed=seed,
        background=tuple(background),
        background_texture=background_texture,
    )
    manifest.save()
    return manifest


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise WorldError(f"no manifest.json under {root}")
    return DatasetManifest.from_json(json.loads(path.read_text()), root)


def load_record(manifest, record):
    """Read one record back as a LabeledImage (masks from the PNG files)."""
    root = Path(manifest.root)
    pixels = (
        np.asarray(Image.open(root / record["image"]), dtype=np.float32) / 255.0
    )
    masks = np.stack(
        [
            np.asarray(Image.open(root / mf)) >= 128
            for mf in record["masks"]
        ]
    )
    return LabeledImage(
        pixels=pixels,
        masks=masks,
        view_index=int(record["view_index"]),
        species_id=int(record["species_id"]),
        part_sources=[int(record["species_id"])] * len(record["masks"]),
    )


def classify_descriptors(catalog, descriptors):
    """Nearest-nominal species under L-inf over all part descriptors."""
    table = catalog.descriptor_table()
    flat = np.asarray(descriptors, dtype=np.float64)
    dists = np.abs(table - flat[None]).reshape(len(table), -1).max(axis=1)
    return int(np.argmin(dists))
