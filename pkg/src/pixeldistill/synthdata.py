"""Procedural scenes with analytic ground truth.

Orthographic camera: pixel (r, c) maps to world (x, y) =
((c + 0.5) / W * 2 - 1, (r + 0.5) / H * 2 - 1) with x right, y down, and the
camera looking along -z. Rays travel in -z; visible surfaces therefore have
normals with n_z >= 0. Shading is Lambertian under one directional light
plus ambient. Normals come from the primitive geometry itself (sphere:
radial; plane/box: face normal; cylinder: axis-orthogonal radial), never
from depth differences.

Two stock distributions:

* ``indoor_spec()``  - planes and boxes, flat/stripe textures, few objects,
  narrow light cone, wall backdrop (the constrained labeled source).
* ``diverse_spec()`` - all four shapes and textures, up to six objects, wide
  lighting, varied backgrounds (the broad unlabeled pool). Its palettes are
  strict supersets of the indoor ones.

Pixels not covered by any object have seg id 0 and valid 0; their stored
normal is the zero vector.
"""

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .fnv import fnv1a64_str
from .rng import Rng, _mix64_array

SHAPE_IDS = {"plane": 1, "box": 2, "sphere": 3, "cylinder": 4}
ALL_SHAPES = ("plane", "box", "sphere", "cylinder")
ALL_TEXTURES = ("flat", "stripes", "checker", "noise")
ALL_BACKGROUNDS = ("wall", "void_dark", "void_light", "gradient")


@dataclass(frozen=True)
class DistributionSpec:
    name: str
    shapes: tuple
    textures: tuple
    min_objects: int
    max_objects: int
    light_cone_deg: float
    ambient: tuple
    diffuse: tuple
    backgrounds: tuple

    def __post_init__(self):
        if not self.shapes or not self.textures or not self.backgrounds:
            raise ValueError("palettes must be non-empty")
        for s in self.shapes:
            if s not in ALL_SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        for t in self.textures:
            if t not in ALL_TEXTURES:
                raise ValueError(f"unknown texture {t!r}")
        for b in self.backgrounds:
            if b not in ALL_BACKGROUNDS:
                raise ValueError(f"unknown background {b!r}")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("need 1 <= min_objects <= max_objects")

    @property
    def diversity_level(self):
        """Count of active (shape, texture, background) combinations."""
        return len(self.shapes) * len(self.textures) * len(self.backgrounds)

    def contains(self, other):
        """True if every scene of ``other`` is expressible under this spec."""
        return (set(other.shapes) <= set(self.shapes)
                and set(other.textures) <= set(self.textures)
                and set(other.backgrounds) <= set(self.backgrounds)
                and self.min_objects <= other.min_objects
                and other.max_objects <= self.max_objects
                and other.light_cone_deg <= self.light_cone_deg
                and self.ambient[0] <= other.ambient[0] and other.ambient[1] <= self.ambient[1]
                and self.diffuse[0] <= other.diffuse[0] and other.diffuse[1] <= self.diffuse[1])

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return DistributionSpec(
            name=d["name"], shapes=tuple(d["shapes"]), textures=tuple(d["textures"]),
            min_objects=int(d["min_objects"]), max_objects=int(d["max_objects"]),
            light_cone_deg=float(d["light_cone_deg"]),
            ambient=tuple(d["ambient"]), diffuse=tuple(d["diffuse"]),
            backgrounds=tuple(d["backgrounds"]))

    def fnv(self):
        import json
        return fnv1a64_str(json.dumps(self.to_dict(), sort_keys=True))


def indoor_spec():
    return DistributionSpec(
        name="indoor", shapes=("plane", "box"), textures=("flat", "stripes"),
        min_objects=1, max_objects=3, light_cone_deg=20.0,
        ambient=(0.25, 0.40), diffuse=(0.50, 0.70), backgrounds=("wall",))


def diverse_spec():
    return DistributionSpec(
        name="diverse", shapes=ALL_SHAPES, textures=ALL_TEXTURES,
        min_objects=1, max_objects=6, light_cone_deg=65.0,
        ambient=(0.05, 0.60), diffuse=(0.30, 0.95),
        backgrounds=ALL_BACKGROUNDS)


def spec_by_name(name):
    if name == "indoor":
        return indoor_spec()
    if name == "diverse":
        return diverse_spec()
    raise ValueError(f"unknown distribution {name!r} (expected indoor|diverse)")


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Box:
    center: tuple
    rot: tuple          # 3x3 row-major world-from-local rotation
    half: tuple


@dataclass(frozen=True)
class Cylinder:
    center: tuple
    axis: tuple         # unit vector
    radius: float
    half_len: float


@dataclass(frozen=True)
class PlanePatch:
    center: tuple
    normal: tuple       # unit, n_z > 0
    u: tuple            # unit, orthogonal to normal
    v: tuple            # unit, = n x u
    half_u: float
    half_v: float


@dataclass(frozen=True)
class Texture:
    kind: str
    base: tuple
    alt: tuple
    freq: float
    phase: tuple
    direction: tuple
    salt: int


@dataclass
class Scene:
    objects: list       # [(primitive, seg_id, Texture)]
    light: tuple        # unit vector toward the light, l_z > 0
    ambient: float
    diffuse: float
    background: dict    # {"mode": ..., extra params}


_RAY_Z = 10.0


def _intersect(prim, px, py):
    """Vectorized ortho-ray intersection.

    Returns (hit mask, z of hit, normals (N,3), points (N,3)); normals face
    the camera (n_z >= 0) or the pixel is reported as a miss.
    """
    n = px.size
    if isinstance(prim, Sphere):
        cx, cy, cz = prim.center
        d2 = (px - cx) ** 2 + (py - cy) ** 2
        hit = d2 <= prim.radius ** 2
        h = np.sqrt(np.maximum(prim.radius ** 2 - d2, 0.0))
        z = cz + h
        normals = np.stack([(px - cx), (py - cy), h], axis=1) / prim.radius
        points = np.stack([px, py, z], axis=1)
        return hit, z, normals, points

    if isinstance(prim, PlanePatch):
        nx, ny, nz = prim.normal
        c = np.asarray(prim.center)
        z = (np.dot(prim.normal, c) - nx * px - ny * py) / nz
        points = np.stack([px, py, z], axis=1)
        rel = points - c
        du = rel @ np.asarray(prim.u)
        dv = rel @ np.asarray(prim.v)
        hit = (np.abs(du) <= prim.half_u) & (np.abs(dv) <= prim.half_v)
        normals = np.broadcast_to(np.asarray(prim.normal), (n, 3)).copy()
        return hit, z, normals, points

    if isinstance(prim, Box):
        rot = np.asarray(prim.rot)          # world <- local
        half = np.asarray(prim.half)
        origin = np.stack([px, py, np.full(n, _RAY_Z)], axis=1) - np.asarray(prim.center)
        o_l = origin @ rot                   # = rot.T rows applied to each origin
        d_l = rot.T @ np.array([0.0, 0.0, -1.0])
        t_lo = np.full(n, -np.inf)
        t_hi = np.full(n, np.inf)
        axis_of_entry = np.zeros(n, dtype=np.int64)
        entry_sign = np.zeros(n)
        for a in range(3):
            da = d_l[a]
            oa = o_l[:, a]
            if abs(da) < 1e-12:
                inside = np.abs(oa) <= half[a]
                t_hi = np.where(inside, t_hi, -np.inf)
                continue
            t1 = (-half[a] - oa) / da
            t2 = (half[a] - oa) / da
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            take = near > t_lo
            axis_of_entry = np.where(take, a, axis_of_entry)
            entry_sign = np.where(take, -np.sign(da), entry_sign)
            t_lo = np.maximum(t_lo, near)
            t_hi = np.minimum(t_hi, far)
        hit = (t_hi >= t_lo) & (t_lo > 0)
        z = _RAY_Z - t_lo
        normals = rot.T[axis_of_entry] * entry_sign[:, None]
        keep = normals[:, 2] >= 0
        hit &= keep
        points = np.stack([px, py, z], axis=1)
        return hit, z, normals, points

    if isinstance(prim, Cylinder):
        a = np.asarray(prim.axis)
        c = np.asarray(prim.center)
        d = np.array([0.0, 0.0, -1.0])
        oc = np.stack([px, py, np.full(n, _RAY_Z)], axis=1) - c
        d_perp = d - np.dot(d, a) * a
        oc_perp = oc - np.outer(oc @ a, a)
        qa = float(d_perp @ d_perp)
        if qa < 1e-12:
            miss = np.zeros(n, dtype=bool)
            return miss, np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3))
        qb = 2.0 * (oc_perp @ d_perp)
        qc = np.einsum("ij,ij->i", oc_perp, oc_perp) - prim.radius ** 2
        disc = qb * qb - 4 * qa * qc
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = (-qb - sq) / (2 * qa)
        points = np.stack([px, py, _RAY_Z - t], axis=1)
        s = (points - c) @ a
        hit &= (np.abs(s) <= prim.half_len) & (t > 0)
        radial = points - c - np.outer(s, a)
        normals = radial / prim.radius
        hit &= normals[:, 2] >= 0      # open-ended tube: cull interior faces
        return hit, points[:, 2], normals, points

    raise TypeError(f"unknown primitive {type(prim).__name__}")


# ---------------------------------------------------------------------------
# textures


def _texture_colors(tex, points):
    n = points.shape[0]
    base = np.asarray(tex.base)
    alt = np.asarray(tex.alt)
    if tex.kind == "flat":
        return np.broadcast_to(base, (n, 3)).copy()
    if tex.kind == "stripes":
        coord = points @ np.asarray(tex.direction)
        k = np.floor(coord * tex.freq + tex.phase[0]).astype(np.int64) % 2
        return np.where(k[:, None] == 0, base, alt)
    if tex.kind == "checker":
        k = np.zeros(n, dtype=np.int64)
        for a in range(3):
            k += np.floor(points[:, a] * tex.freq + tex.phase[a]).astype(np.int64)
        return np.where((k % 2)[:, None] == 0, base, alt)
    if tex.kind == "noise":
        cells = np.floor(points * tex.freq + np.asarray(tex.phase)).astype(np.int64)
        h = cells[:, 0].astype(np.uint64)
        with np.errstate(over="ignore"):
            h = h * np.uint64(0x9E3779B97F4A7C15) ^ cells[:, 1].astype(np.uint64)
            h = h * np.uint64(0xBF58476D1CE4E5B9) ^ cells[:, 2].astype(np.uint64)
            h = _mix64_array(h ^ np.uint64(tex.salt))
        shade = (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return base * (0.35 + 0.65 * shade)[:, None]
    raise ValueError(f"unknown texture kind {tex.kind!r}")


# ---------------------------------------------------------------------------
# scene sampling


def _unit(v):
    return v / np.linalg.norm(v)


def _rotation_matrix(axis, angle):
    ux, uy, uz = _unit(np.asarray(axis, dtype=np.float64))
    c, s = math.cos(angle), math.sin(angle)
    m = np.array([
        [c + ux * ux * (1 - c), ux * uy * (1 - c) - uz * s, ux * uz * (1 - c) + uy * s],
        [uy * ux * (1 - c) + uz * s, c + uy * uy * (1 - c), uy * uz * (1 - c) - ux * s],
        [uz * ux * (1 - c) - uy * s, uz * uy * (1 - c) + ux * s, c + uz * uz * (1 - c)],
    ])
    return m


def _sample_direction_in_cone(rng, max_deg):
    alpha = math.radians(max_deg) * rng.uniform()
    phi = 2 * math.pi * rng.uniform()
    sa = math.sin(alpha)
    return (sa * math.cos(phi), sa * math.sin(phi), math.cos(alpha))


def _sample_texture(rng, kinds):
    kind = kinds[rng.randint(len(kinds))]
    base = tuple(0.25 + 0.75 * rng.uniform() for _ in range(3))
    alt = tuple(0.25 + 0.75 * rng.uniform() for _ in range(3))
    freq = 2.0 + 8.0 * rng.uniform()
    phase = tuple(rng.uniform() for _ in range(3))
    direction = _unit(np.array([rng.uniform() - 0.5 for _ in range(3)]) + 1e-9)
    return Texture(kind, base, alt, freq, phase, tuple(direction), rng.next_u64())


def _sample_primitive(rng, shape):
    cx = rng.uniform_in(-0.7, 0.7)
    cy = rng.uniform_in(-0.7, 0.7)
    cz = rng.uniform_in(-3.5, -0.5)
    if shape == "sphere":
        return Sphere((cx, cy, cz), rng.uniform_in(0.2, 0.55))
    if shape == "box":
        axis = [rng.uniform() - 0.5 for _ in range(3)]
        rot = _rotation_matrix(np.array(axis) + 1e-9, rng.uniform_in(0, math.pi))
        half = tuple(rng.uniform_in(0.15, 0.5) for _ in range(3))
        return Box((cx, cy, cz), tuple(map(tuple, rot)), half)
    if shape == "cylinder":
        while True:
            ax = np.array([rng.uniform() - 0.5 for _ in range(3)])
            ax[2] *= 0.6                      # keep the tube mostly in-plane
            nrm = np.linalg.norm(ax)
            if nrm > 1e-3:
                break
        axis = _unit(ax)
        return Cylinder((cx, cy, cz), tuple(axis),
                        rng.uniform_in(0.12, 0.4), rng.uniform_in(0.3, 0.8))
    if shape == "plane":
        while True:
            nv = np.array([rng.uniform() - 0.5, rng.uniform() - 0.5,
                           rng.uniform_in(0.4, 1.5)])
            if np.linalg.norm(nv) > 1e-3:
                break
        normal = _unit(nv)
        helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = _unit(np.cross(normal, helper))
        v = np.cross(normal, u)
        return PlanePatch((cx, cy, cz), tuple(normal), tuple(u), tuple(v),
                          rng.uniform_in(0.3, 0.9), rng.uniform_in(0.3, 0.9))
    raise ValueError(f"unknown shape {shape!r}")


def sample_scene(spec, rng):
    n_obj = spec.min_objects + rng.randint(spec.max_objects - spec.min_objects + 1)
    objects = []
    for k in range(n_obj):
        r = rng.child(f"object{k}")
        shape = spec.shapes[r.randint(len(spec.shapes))]
        prim = _sample_primitive(r, shape)
        tex = _sample_texture(r.child("texture"), spec.textures)
        objects.append((prim, SHAPE_IDS[shape], tex))
    lrng = rng.child("light")
    light = _sample_direction_in_cone(lrng, spec.light_cone_deg)
    ambient = lrng.uniform_in(*spec.ambient)
    diffuse = lrng.uniform_in(*spec.diffuse)
    brng = rng.child("background")
    mode = spec.backgrounds[brng.randint(len(spec.backgrounds))]
    background = {"mode": mode}
    if mode == "wall":
        nv = _unit(np.array([brng.uniform_in(-0.15, 0.15),
                             brng.uniform_in(-0.15, 0.15), 1.0]))
        u = _unit(np.cross(nv, np.array([0.0, 1.0, 0.0])))
        v = np.cross(nv, u)
        background["plane"] = PlanePatch((0.0, 0.0, brng.uniform_in(-4.4, -3.8)),
                                         tuple(nv), tuple(u), tuple(v), 6.0, 6.0)
        background["texture"] = _sample_texture(brng.child("texture"), spec.textures)
    elif mode == "void_dark":
        background["color"] = tuple(brng.uniform_in(0.02, 0.15) for _ in range(3))
    elif mode == "void_light":
        background["color"] = tuple(brng.uniform_in(0.70, 0.95) for _ in range(3))
    else:  # gradient
        background["top"] = tuple(brng.uniform_in(0.1, 0.9) for _ in range(3))
        background["bottom"] = tuple(brng.uniform_in(0.1, 0.9) for _ in range(3))
    return Scene(objects, light, ambient, diffuse, background)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class Sample:
    image: np.ndarray     # (3, H, W) float32 in [0, 1]
    normals: np.ndarray   # (3, H, W) float32, unit at valid pixels, 0 elsewhere
    seg: np.ndarray       # (H, W) int32, 0 = background
    valid: np.ndarray     # (H, W) uint8


def _pixel_grid(h, w):
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = ((cc.reshape(-1) + 0.5) / w) * 2.0 - 1.0
    py = ((rr.reshape(-1) + 0.5) / h) * 2.0 - 1.0
    return px, py


def _shade(tex, points, normals, light, ambient, diffuse):
    albedo = _texture_colors(tex, points)
    lam = np.maximum(normals @ np.asarray(light), 0.0)
    return albedo * (ambient + diffuse * lam)[:, None]


def render(scene, h, w):
    npix = h * w
    px, py = _pixel_grid(h, w)
    zbuf = np.full(npix, -np.inf)
    seg = np.zeros(npix, dtype=np.int32)
    normals = np.zeros((npix, 3))
    image = np.zeros((npix, 3))

    bg = scene.background
    if bg["mode"] == "wall":
        hit, z, nrm, pts = _intersect(bg["plane"], px, py)
        image[hit] = _shade(bg["texture"], pts[hit], nrm[hit],
                            scene.light, scene.ambient, scene.diffuse)[:]
        zbuf[hit] = z[hit]
    elif bg["mode"] == "gradient":
        t = (py + 1.0) / 2.0
        top = np.asarray(bg["top"])
        bottom = np.asarray(bg["bottom"])
        image[:] = top * (1 - t)[:, None] + bottom * t[:, None]
    else:
        image[:] = np.asarray(bg["color"])

    for prim, seg_id, tex in scene.objects:
        hit, z, nrm, pts = _intersect(prim, px, py)
        front = hit & (z > zbuf)
        if not front.any():
            continue
        zbuf[front] = z[front]
        seg[front] = seg_id
        normals[front] = nrm[front]
        image[front] = _shade(tex, pts[front], nrm[front],
                              scene.light, scene.ambient, scene.diffuse)

    valid = (seg > 0).astype(np.uint8)
    normals[valid.reshape(-1) == 0] = 0.0
    lengths = np.linalg.norm(normals, axis=1)
    nz = lengths > 0
    normals[nz] /= lengths[nz][:, None]
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(
        image=image.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32),
        normals=normals.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32),
        seg=seg.reshape(h, w),
        valid=valid.reshape(h, w),
    )


def render_scene(spec, seed, size=64):
    """One deterministic sample of the distribution: (spec, seed) -> Sample."""
    rng = Rng(seed)
    scene = sample_scene(spec, rng)
    return render(scene, size, size)
