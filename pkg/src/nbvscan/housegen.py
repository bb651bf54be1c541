"""Procedural watertight house meshes assembled from a small style vocabulary.

A house is a main body plus optional attachments. Each part is an
independent closed shell built by lofting four-vertex rings from the
ground up (walls, overhang soffit, fascia band, roof), so watertightness
holds by construction. Shells may overlap; they never share vertices.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Mesh, merge_meshes

ROOF_STYLES = ("flat", "gabled", "pyramidal", "shed")
ATTACHMENT_KINDS = ("porch", "wing", "dormer")
SIDES = ("+x", "-x", "+y", "-y")

FASCIA = 4.0          # vertical thickness of the roof slab at its outer edge
CANOPY = 2.0          # porch canopy thickness
POST = 2.0            # porch post cross-section
OVERLAP = 1.0         # attachments sink this far into the main body
ROOF_RISE = {"flat": 0.0, "gabled": 0.4, "pyramidal": 0.5, "shed": 0.3}

# (wall, roof, trim) reflectances
PALETTES = {
    "brick": (0.55, 0.35, 0.85),
    "stucco": (0.85, 0.45, 0.6),
    "timber": (0.5, 0.3, 0.75),
    "slate": (0.7, 0.25, 0.9),
    "sand": (0.8, 0.55, 0.4),
}


class HouseConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Attachment:
    kind: str
    side: str = "+y"
    position: float = 0.0     # centre offset along the wall, units from the wall midpoint
    width: float = 16.0
    projection: float = 12.0  # outward reach (porch, wing) or depth into the roof (dormer)
    height: float = 24.0      # wall height (wing), canopy height (porch), box height (dormer)

    def __post_init__(self):
        if self.kind not in ATTACHMENT_KINDS:
            raise ValueError(f"unknown attachment kind {self.kind!r}")
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if min(self.width, self.projection, self.height) <= 0:
            raise ValueError(f"{self.kind}: lengths must be positive")


@dataclass(frozen=True)
class HouseSpec:
    width: float = 50.0        # footprint extent along x
    depth: float = 40.0        # footprint extent along y
    storeys: int = 2
    wall_height: float = 30.0  # per storey
    roof_style: str = "gabled"
    roof_overhang: float = 5.0
    attachments: tuple[Attachment, ...] = ()
    albedo_palette: str = "brick"

    def __post_init__(self):
        object.__setattr__(self, "attachments", tuple(self.attachments))
        if min(self.width, self.depth, self.wall_height) <= 0:
            raise ValueError("footprint and wall height must be positive")
        if self.storeys not in (1, 2):
            raise ValueError("storeys must be 1 or 2")
        if self.roof_style not in ROOF_STYLES:
            raise ValueError(f"unknown roof style {self.roof_style!r}")
        if self.roof_overhang < 0 or self.roof_overhang > min(self.width, self.depth) / 4 + 1e-12:
            raise ValueError("overhang must lie in [0, min(width, depth)/4]")
        if self.albedo_palette not in PALETTES:
            raise ValueError(f"unknown palette {self.albedo_palette!r}")

    @property
    def eave_height(self) -> float:
        return self.storeys * self.wall_height

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attachments"] = [asdict(a) for a in self.attachments]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HouseSpec":
        d = dict(d)
        d["attachments"] = tuple(Attachment(**a) for a in d.get("attachments", ()))
        return cls(**d)


def geometry_key(spec: HouseSpec) -> tuple:
    """Footprint rounded to 5 units, storeys, roof style and sorted attachment kinds."""
    q = lambda v: int(5 * round(v / 5))
    return (q(spec.width), q(spec.depth), spec.storeys, spec.roof_style,
            tuple(sorted(a.kind for a in spec.attachments)))


# --------------------------------------------------------------------------
# Lofting
# --------------------------------------------------------------------------

def _rect(cx: float, cy: float, hx: float, hy: float, z: float) -> list[tuple]:
    """Counter-clockwise (seen from above) rectangle ring."""
    return [(cx - hx, cy - hy, z), (cx + hx, cy - hy, z), (cx + hx, cy + hy, z), (cx - hx, cy + hy, z)]


def _loft(rings: Sequence[Sequence[tuple]], band_albedo: Sequence[float], bottom_albedo: float,
          top_albedo: float) -> Mesh:
    verts: list[tuple] = []
    lookup: dict[tuple, int] = {}

    def vid(p):
        key = tuple(round(float(c), 9) for c in p)
        if key not in lookup:
            lookup[key] = len(verts)
            verts.append(key)
        return lookup[key]

    idx = [[vid(p) for p in ring] for ring in rings]
    faces: list[tuple[int, int, int]] = []
    albedo: list[float] = []

    def add(tri, alb):
        if len(set(tri)) == 3:
            faces.append(tri)
            albedo.append(alb)

    b = idx[0]
    add((b[0], b[3], b[2]), bottom_albedo)
    add((b[0], b[2], b[1]), bottom_albedo)
    for band, (lo, hi) in enumerate(zip(idx[:-1], idx[1:])):
        for i in range(4):
            j = (i + 1) % 4
            add((lo[i], lo[j], hi[j]), band_albedo[band])
            add((lo[i], hi[j], hi[i]), band_albedo[band])
    t = idx[-1]
    add((t[0], t[1], t[2]), top_albedo)
    add((t[0], t[2], t[3]), top_albedo)
    return Mesh(np.array(verts), np.array(faces), np.array(albedo))


def _to_world(side: str, points: list[tuple]) -> list[tuple]:
    """Map local (outward, along-wall, z) coordinates for a wall side to world x, y, z."""
    out = []
    for x, t, z in points:
        if side == "+x":
            out.append((x, t, z))
        elif side == "-x":
            out.append((-x, -t, z))
        elif side == "+y":
            out.append((-t, x, z))
        else:
            out.append((t, -x, z))
    return out


def _local_rect(x0: float, x1: float, t0: float, t1: float, z: float) -> list[tuple]:
    return [(x0, t0, z), (x1, t0, z), (x1, t1, z), (x0, t1, z)]


# --------------------------------------------------------------------------
# Parts
# --------------------------------------------------------------------------

def _ridge_ring(hx: float, hy: float, z: float, along_y: bool) -> list[tuple]:
    if along_y:
        a, b = (0.0, -hy, z), (0.0, hy, z)
        return [a, a, b, b]
    a, b = (-hx, 0.0, z), (hx, 0.0, z)
    return [a, b, b, a]


def _ridge_along_y(spec: HouseSpec) -> bool:
    return spec.depth >= spec.width


def _roof_rise(spec: HouseSpec) -> float:
    hx = spec.width / 2 + spec.roof_overhang
    hy = spec.depth / 2 + spec.roof_overhang
    if spec.roof_style == "gabled":
        return ROOF_RISE["gabled"] * (hx if _ridge_along_y(spec) else hy)
    if spec.roof_style == "pyramidal":
        return ROOF_RISE["pyramidal"] * min(hx, hy)
    if spec.roof_style == "shed":
        return ROOF_RISE["shed"] * hx
    return 0.0


def house_height(spec: HouseSpec) -> float:
    return spec.eave_height + FASCIA + _roof_rise(spec)


def _main_body(spec: HouseSpec, wall: float, roof: float, trim: float) -> Mesh:
    hx, hy = spec.width / 2, spec.depth / 2
    ox, oy = hx + spec.roof_overhang, hy + spec.roof_overhang
    e = spec.eave_height
    top = e + FASCIA
    rings = [_rect(0, 0, hx, hy, 0.0), _rect(0, 0, hx, hy, e),
             _rect(0, 0, ox, oy, e), _rect(0, 0, ox, oy, top)]
    bands = [wall, trim, trim]
    peak = top + _roof_rise(spec)
    if spec.roof_style == "gabled":
        rings.append(_ridge_ring(ox, oy, peak, _ridge_along_y(spec)))
        bands.append(roof)
    elif spec.roof_style == "pyramidal":
        rings.append([(0.0, 0.0, peak)] * 4)
        bands.append(roof)
    elif spec.roof_style == "shed":
        r = rings[-1]
        rings.append([r[0], (ox, -oy, peak), (ox, oy, peak), r[3]])
        bands.append(roof)
    return _loft(rings, bands, wall, roof)


def _wall_frame(spec: HouseSpec, side: str) -> tuple[float, float]:
    """Distance from centre to the wall on ``side`` and that wall's length."""
    if side in ("+x", "-x"):
        return spec.width / 2, spec.depth
    return spec.depth / 2, spec.width


def _check_span(spec: HouseSpec, att: Attachment, name: str) -> tuple[float, float, float]:
    dist, length = _wall_frame(spec, att.side)
    t0, t1 = att.position - att.width / 2, att.position + att.width / 2
    if t0 < -length / 2 + 1.0 or t1 > length / 2 - 1.0:
        raise HouseConstructionError(f"{name}: spans [{t0:g}, {t1:g}] beyond the {length:g}-unit wall on side {att.side}")
    return dist, t0, t1


def _wing(spec: HouseSpec, att: Attachment, wall: float, roof: float) -> Mesh:
    dist, t0, t1 = _check_span(spec, att, "wing")
    rise = 0.4 * att.width / 2
    if att.height + rise > spec.eave_height:
        raise HouseConstructionError(
            f"wing: ridge at {att.height + rise:g} would pierce the main eaves at {spec.eave_height:g}")
    x0, x1 = dist - OVERLAP, dist + att.projection
    tc = 0.5 * (t0 + t1)
    a, b = (x0, tc, att.height + rise), (x1, tc, att.height + rise)
    rings = [_local_rect(x0, x1, t0, t1, 0.0), _local_rect(x0, x1, t0, t1, att.height), [a, b, b, a]]
    return _loft([_to_world(att.side, r) for r in rings], [wall, roof], wall, roof)


def _porch(spec: HouseSpec, att: Attachment, wall: float, trim: float) -> list[Mesh]:
    dist, t0, t1 = _check_span(spec, att, "porch")
    if att.height + CANOPY > spec.eave_height:
        raise HouseConstructionError(
            f"porch: canopy top {att.height + CANOPY:g} above the main eaves {spec.eave_height:g}")
    if att.projection < 2 * POST:
        raise HouseConstructionError("porch: projection too short for its posts")
    x0, x1 = dist - OVERLAP, dist + att.projection
    z0, z1 = att.height, att.height + CANOPY
    canopy = _loft([_to_world(att.side, _local_rect(x0, x1, t0, t1, z)) for z in (z0, z1)], [trim], trim, trim)
    parts = [canopy]
    for tc in (t0 + POST / 2, t1 - POST / 2):
        px = x1 - POST / 2
        rings = [_to_world(att.side, _local_rect(px - POST / 2, px + POST / 2, tc - POST / 2, tc + POST / 2, z))
                 for z in (0.0, z0)]
        parts.append(_loft(rings, [trim], trim, trim))
    return parts


def _dormer(spec: HouseSpec, att: Attachment, wall: float, roof: float) -> Mesh:
    if spec.roof_style not in ("gabled", "shed"):
        raise HouseConstructionError(f"dormer: needs a sloped gabled or shed roof, not {spec.roof_style}")
    dist, t0, t1 = _check_span(spec, att, "dormer")
    out = dist + spec.roof_overhang
    base = spec.eave_height + FASCIA
    rise = _roof_rise(spec)
    if spec.roof_style == "gabled":
        along_y = _ridge_along_y(spec)
        if (along_y and att.side not in ("+x", "-x")) or (not along_y and att.side not in ("+y", "-y")):
            raise HouseConstructionError(f"dormer: side {att.side} is a gable end, not a roof slope")

        def roof_z(x):
            return base + rise * (out - x) / out
    else:
        if att.side != "-x":
            raise HouseConstructionError("dormer: a shed roof only slopes down towards -x")

        def roof_z(x):
            return base + rise * (out - x) / (2 * out)
    x_front = dist - 1.0
    x_back = x_front - att.projection
    if spec.roof_style == "gabled" and x_back < 0:
        raise HouseConstructionError("dormer: reaches past the ridge")
    z0 = base - 1.0
    z1 = z0 + att.height
    cap = 0.3 * att.width / 2
    if z1 < roof_z(x_front) + 2.0:
        raise HouseConstructionError(f"dormer: front wall top {z1:g} does not clear the roof ({roof_z(x_front):g})")
    if z1 + cap > roof_z(x_back):
        raise HouseConstructionError("dormer: back end sticks out of the roof")
    tc = 0.5 * (t0 + t1)
    a, b = (x_back, tc, z1 + cap), (x_front, tc, z1 + cap)
    rings = [_local_rect(x_back, x_front, t0, t1, z0), _local_rect(x_back, x_front, t0, t1, z1), [a, b, b, a]]
    return _loft([_to_world(att.side, r) for r in rings], [wall, roof], wall, roof)


def generate_house(spec: HouseSpec) -> Mesh:
    """Watertight, outward-oriented house mesh; a pure function of ``spec``."""
    wall, roof, trim = PALETTES[spec.albedo_palette]
    parts = [_main_body(spec, wall, roof, trim)]
    for att in spec.attachments:
        if att.kind == "wing":
            parts.append(_wing(spec, att, wall, roof))
        elif att.kind == "porch":
            parts.extend(_porch(spec, att, wall, trim))
        else:
            parts.append(_dormer(spec, att, wall, roof))
    return merge_meshes(parts)


# --------------------------------------------------------------------------
# Sampling and splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    widths: tuple[float, ...] = (40.0, 50.0, 60.0)
    depths: tuple[float, ...] = (40.0, 50.0, 60.0)
    storeys: tuple[int, ...] = (1, 2)
    wall_heights: tuple[float, ...] = (28.0, 32.0, 36.0)
    roof_styles: tuple[str, ...] = ROOF_STYLES
    overhangs: tuple[float, ...] = (0.0, 4.0, 8.0)
    attachment_sets: tuple[tuple[str, ...], ...] = ((), ("porch",), ("wing",), ("dormer",), ("porch", "wing"))
    sides: tuple[str, ...] = SIDES
    palettes: tuple[str, ...] = tuple(PALETTES)

    def __post_init__(self):
        for name in ("widths", "depths", "storeys", "wall_heights", "roof_styles", "overhangs",
                     "attachment_sets", "sides", "palettes"):
            if not getattr(self, name):
                raise ValueError(f"vocabulary field {name} is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        d = {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) for k, v in d.items()}
        return cls(**d)


def _pick(rng: np.random.Generator, options: Sequence):
    return options[int(rng.integers(len(options)))]


def _attachment_for(kind: str, rng: np.random.Generator, vocab: Vocabulary, spec: HouseSpec,
                    taken: set[str]) -> Attachment | None:
    sides = [s for s in vocab.sides if s not in taken]
    if kind == "dormer":
        if spec.roof_style == "gabled":
            slope = ("+x", "-x") if _ridge_along_y(spec) else ("+y", "-y")
            sides = [s for s in sides if s in slope]
        elif spec.roof_style == "shed":
            sides = [s for s in sides if s == "-x"]
        else:
            sides = []
    if not sides:
        return None
    side = _pick(rng, sides)
    dist, length = _wall_frame(spec, side)
    if kind == "wing":
        att = Attachment("wing", side, 0.0, round(0.4 * length), round(0.5 * dist), round(0.55 * spec.eave_height))
    elif kind == "porch":
        att = Attachment("porch", side, 0.0, round(0.5 * length), 10.0, min(22.0, spec.eave_height - CANOPY - 2))
    else:
        out = dist + spec.roof_overhang
        rise = _roof_rise(spec)
        if spec.roof_style == "gabled":
            slope, proj = rise / out, 0.8 * dist
        else:
            slope, proj = rise / (2 * out), 1.6 * dist
        front_gap = (spec.roof_overhang + 1.0) * slope
        cap = 0.3 * 8.0 / 2
        lo, hi = front_gap + 3.0, 1.0 + front_gap + proj * slope - cap
        if lo > hi:
            return None
        att = Attachment("dormer", side, 0.0, 8.0, round(proj, 3), round(0.5 * (lo + hi), 3))
    try:
        generate_house(HouseSpec(**{**spec.__dict__, "attachments": spec.attachments + (att,)}))
    except HouseConstructionError:
        return None
    return att


def sample_spec(seed: int, vocabulary: Vocabulary | None = None) -> HouseSpec:
    """Deterministic random house from the vocabulary; unusable attachments are dropped."""
    vocab = vocabulary or Vocabulary()
    rng = np.random.default_rng(seed)
    width = float(_pick(rng, vocab.widths))
    depth = float(_pick(rng, vocab.depths))
    storeys = int(_pick(rng, vocab.storeys))
    wall_h = float(_pick(rng, vocab.wall_heights))
    style = str(_pick(rng, vocab.roof_styles))
    overhang = min(float(_pick(rng, vocab.overhangs)), min(width, depth) / 4)
    kinds = tuple(_pick(rng, vocab.attachment_sets))
    palette = str(_pick(rng, vocab.palettes))
    spec = HouseSpec(width, depth, storeys, wall_h, style, overhang, (), palette)
    taken: set[str] = set()
    for kind in kinds:
        att = _attachment_for(kind, rng, vocab, spec, taken)
        if att is not None:
            taken.add(att.side)
            spec = HouseSpec(width, depth, storeys, wall_h, style, overhang, spec.attachments + (att,), palette)
    return spec


@dataclass(frozen=True)
class DatasetSplit:
    train: list[HouseSpec] = field(default_factory=list)
    test: list[HouseSpec] = field(default_factory=list)
    mode: str = "random"
    train_index: list[int] = field(default_factory=list)
    test_index: list[int] = field(default_factory=list)


def split_dataset(specs: Sequence[HouseSpec], mode: str = "random", test_fraction: float = 0.1,
                  seed: int = 0) -> DatasetSplit:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    if mode not in ("random", "geometry"):
        raise ValueError(f"unknown split mode {mode!r}")
    n = len(specs)
    n_test = int(math.floor(test_fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    if mode == "random":
        order = rng.permutation(n)
        test_idx = sorted(order[:n_test].tolist())
    else:
        groups: dict[tuple, list[int]] = {}
        for i, s in enumerate(specs):
            groups.setdefault(geometry_key(s), []).append(i)
        if len(groups) < 2:
            raise ValueError("geometry split needs at least two distinct geometries")
        keys = sorted(groups, key=repr)
        test_idx = []
        for gi in rng.permutation(len(keys)).tolist():
            members = groups[keys[gi]]
            if not test_idx or len(test_idx) + len(members) <= n_test:
                test_idx.extend(members)
            if len(test_idx) >= n_test:
                break
        if len(test_idx) == n:
            raise ValueError("geometry split left no training houses")
        test_idx.sort()
    test_set = set(test_idx)
    train_idx = [i for i in range(n) if i not in test_set]
    return DatasetSplit([specs[i] for i in train_idx], [specs[i] for i in test_idx], mode, train_idx, test_idx)
