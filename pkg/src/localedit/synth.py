"""Synthetic scenes of coloured primitives, multiview captures and instruction rules.

Instruction strings are exact-match keys; each rule maps to a deterministic
per-object edit (recolor, remove, checker texture) whose spatial support is
known exactly, which is what makes relevance and edit results checkable.
"""

from __future__ import annotations

import math
import string
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .codec import Codec
from .denoise import EditTargets
from .field import Camera, VoxelField, render_image

NAMED_COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.85, 0.1),
    "blue": (0.1, 0.1, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.6, 0.1, 0.8),
}

SOLID_DENSITY = 60.0


@dataclass(frozen=True)
class Primitive:
    shape: str  # "sphere" | "box"
    center: tuple
    size: tuple  # sphere: (radius,), box: half extents (hx, hy, hz)
    color: tuple
    object_id: str
    texture: dict | None = None  # {"kind": "checker", "colors": [c1, c2], "cell": float}

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        size = tuple(float(s) for s in np.atleast_1d(self.size))
        if (self.shape == "sphere" and len(size) != 1) or (self.shape == "box" and len(size) != 3):
            raise ValueError(f"bad size {size} for a {self.shape}")
        object.__setattr__(self, "size", size)
        color = tuple(float(c) for c in self.color)
        if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
            raise ValueError("colors must be RGB triples in [0, 1]")
        object.__setattr__(self, "color", color)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        if self.shape == "sphere":
            return np.sum(d * d, axis=-1) <= self.size[0] ** 2
        return np.all(np.abs(d) <= np.asarray(self.size), axis=-1)

    def colors_at(self, pts: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self.color), pts.shape[:-1] + (3,)).copy()
        if self.texture and self.texture.get("kind") == "checker":
            c1, c2 = (np.asarray(c, dtype=np.float64) for c in self.texture["colors"])
            cell = float(self.texture.get("cell", 0.2))
            parity = np.sum(np.floor(pts / cell).astype(np.int64), axis=-1) % 2
            out = np.where(parity[..., None] == 0, c1, c2)
        return out

    def top(self, xy: np.ndarray):
        """Orthographic view along -z: (hit mask, top z) per (x, y)."""
        d = xy - np.asarray(self.center[:2])
        if self.shape == "sphere":
            r2 = self.size[0] ** 2 - np.sum(d * d, axis=-1)
            hit = r2 >= 0
            return hit, self.center[2] + np.sqrt(np.maximum(r2, 0.0))
        hit = np.all(np.abs(d) <= np.asarray(self.size[:2]), axis=-1)
        return hit, np.full(hit.shape, self.center[2] + self.size[2])


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        lo, hi = np.asarray(self.bbox_min), np.asarray(self.bbox_max)
        for p in self.primitives:
            c, s = np.asarray(p.center), np.asarray(p.size)
            ext = s[0] if p.shape == "sphere" else s
            if np.any(c - ext < lo - 1e-9) or np.any(c + ext > hi + 1e-9):
                raise ValueError(f"primitive {p.object_id} leaves the bounding box")
        ids = [p.object_id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")

    def primitive(self, object_id: str) -> Primitive:
        for p in self.primitives:
            if p.object_id == object_id:
                return p
        raise KeyError(f"no object {object_id!r} in scene")

    def to_dict(self):
        return {
            "primitives": [asdict(p) for p in self.primitives],
            "bbox_min": list(self.bbox_min),
            "bbox_max": list(self.bbox_max),
            "background": list(self.background),
        }

    @classmethod
    def from_dict(cls, d):
        prims = [Primitive(**p) for p in d.get("primitives", [])]
        return cls(
            primitives=tuple(prims),
            bbox_min=tuple(d.get("bbox_min", (-1, -1, -1))),
            bbox_max=tuple(d.get("bbox_max", (1, 1, 1))),
            background=tuple(d.get("background", (0, 0, 0))),
        )


def default_scene() -> SceneSpec:
    """Two-primitive demo scene: a blue sphere and a green box."""
    return SceneSpec(
        primitives=(
            Primitive("sphere", (-0.3, -0.35, 0.0), (0.5,), (0.2, 0.45, 0.9), "sphere-A"),
            Primitive("box", (0.45, 0.45, -0.1), (0.3, 0.3, 0.35), (0.3, 0.8, 0.35), "box-B"),
        ),
    )


def random_scene(rng: np.random.Generator, n_primitives: int = 3) -> SceneSpec:
    """Non-overlapping random spheres and boxes with well-separated colours."""
    prims = []
    letters = iter(string.ascii_uppercase)
    attempts = 0
    while len(prims) < n_primitives:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("could not place non-overlapping primitives")
        shape = "sphere" if rng.random() < 0.5 else "box"
        radius = rng.uniform(0.2, 0.35)
        center = rng.uniform(-0.95 + radius, 0.95 - radius, size=3)
        if any(np.linalg.norm(center - np.asarray(p.center)) < radius + _extent(p) + 0.1 for p in prims):
            continue
        color = rng.uniform(0.1, 0.9, size=3)
        size = (radius,) if shape == "sphere" else tuple(np.full(3, radius / math.sqrt(3)) * rng.uniform(1.0, 1.5, 3))
        prims.append(Primitive(shape, tuple(center), size, tuple(color), f"{shape}-{next(letters)}"))
    return SceneSpec(primitives=tuple(prims))


def _extent(p: Primitive) -> float:
    return p.size[0] if p.shape == "sphere" else float(np.linalg.norm(p.size))


# --------------------------------------------------------------------------
# Instruction rules


class UnknownInstructionError(KeyError):
    pass


@dataclass(frozen=True)
class InstructionRule:
    pattern: str
    effect: str  # "recolor" | "remove" | "texture" | "noop"
    object_ids: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.effect not in ("recolor", "remove", "texture", "noop"):
            raise ValueError(f"unknown effect {self.effect!r}")
        if self.effect != "noop" and not self.object_ids:
            raise ValueError("a non-noop rule needs a non-empty support")


NOOP_INSTRUCTION = "do nothing"


def scene_rules(spec: SceneSpec) -> dict[str, InstructionRule]:
    """All registered instruction strings for a scene."""
    rules = {NOOP_INSTRUCTION: InstructionRule(NOOP_INSTRUCTION, "noop")}
    for p in spec.primitives:
        oid = p.object_id
        for name, rgb in NAMED_COLORS.items():
            pat = f"recolor {oid} {name}"
            rules[pat] = InstructionRule(pat, "recolor", (oid,), {"color": rgb})
        pat = f"remove {oid}"
        rules[pat] = InstructionRule(pat, "remove", (oid,))
        pat = f"make {oid} checkered"
        rules[pat] = InstructionRule(
            pat, "texture", (oid,), {"colors": [(1.0, 1.0, 1.0), (0.05, 0.05, 0.05)], "cell": 0.15}
        )
    return rules


def lookup_rule(spec: SceneSpec, instruction: str) -> InstructionRule:
    rules = scene_rules(spec)
    if instruction not in rules:
        raise UnknownInstructionError(f"unregistered instruction {instruction!r}")
    return rules[instruction]


def apply_instruction(spec: SceneSpec, rule: InstructionRule) -> tuple[SceneSpec, tuple]:
    """Edited scene and the ids of the objects whose appearance changes."""
    if rule.effect == "noop":
        return spec, ()
    prims = []
    for p in spec.primitives:
        if p.object_id not in rule.object_ids:
            prims.append(p)
        elif rule.effect == "recolor":
            prims.append(replace(p, color=tuple(rule.params["color"]), texture=None))
        elif rule.effect == "texture":
            prims.append(replace(p, texture={"kind": "checker", **rule.params}))
        # "remove" drops the primitive
    for oid in rule.object_ids:
        spec.primitive(oid)
    return replace(spec, primitives=tuple(prims)), tuple(rule.object_ids)


# --------------------------------------------------------------------------
# Voxelisation and rendering


def build_scene(spec: SceneSpec, dims=(32, 32, 32), *, density=SOLID_DENSITY) -> VoxelField:
    """Nearest-sample voxelisation: solid density inside primitives, zero outside.

    Empty voxels copy the colour of the nearest occupied voxel so that surfaces
    keep their colour under trilinear interpolation; with no primitives at all
    they take the background colour.  Overlaps resolve last-writer-wins.
    """
    dims = tuple(int(n) for n in dims)
    sigma = np.zeros(dims)
    color = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), dims + (3,)).copy()
    f = VoxelField.empty(dims, spec.bbox_min, spec.bbox_max)
    centers = f.voxel_centers()
    occupied = np.zeros(dims, dtype=bool)
    for p in spec.primitives:
        inside = p.contains(centers)
        if np.any(inside & occupied):
            warnings.warn(f"primitive {p.object_id} overlaps earlier primitives; last writer wins")
        sigma[inside] = density
        color[inside] = p.colors_at(centers[inside])
        occupied |= inside
    if occupied.any():
        color = color[_nearest_occupied(occupied)]
    return VoxelField.from_values(sigma, color, None, spec.bbox_min, spec.bbox_max)


def _nearest_occupied(occupied: np.ndarray) -> tuple:
    idx = ndimage.distance_transform_edt(~occupied, return_distances=False, return_indices=True)
    return tuple(idx)


def support_voxels(spec: SceneSpec, object_ids, dims=(32, 32, 32)) -> np.ndarray:
    f = VoxelField.empty(dims, spec.bbox_min, spec.bbox_max)
    centers = f.voxel_centers()
    mask = np.zeros(f.dims, dtype=bool)
    for oid in object_ids:
        mask |= spec.primitive(oid).contains(centers)
    return mask


def indicator_field(field_: VoxelField, voxels: np.ndarray) -> VoxelField:
    """Copy of a ground-truth field whose relevance is the indicator of ``voxels``.

    Like colour in ``build_scene``, empty voxels inherit the value of their
    nearest occupied voxel, so a ray that hits a support surface renders
    relevance equal to its opacity.
    """
    out = field_.copy()
    voxels = np.asarray(voxels, dtype=bool)
    occupied = field_.density() > 1e-6 * max(float(field_.density().max()), 1e-300)
    if occupied.any():
        voxels = (voxels & occupied)[_nearest_occupied(occupied)]
    with np.errstate(divide="ignore"):
        out.relevance_raw[:] = np.where(voxels, np.inf, -np.inf)
    return out


def orbit_cameras(n_views, *, radius=2.8, elevation_deg=25.0, resolution=64, fov_deg=45.0,
                  near=0.9, far=4.7, phase=0.0, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    cams = []
    el = math.radians(elevation_deg)
    for k in range(n_views):
        az = phase + 2 * math.pi * k / n_views
        eye = np.asarray(target) + radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        cams.append(Camera.look_at(eye, target, width=resolution, height=resolution,
                                   fov_deg=fov_deg, near=near, far=far))
    return cams


def capture(field_: VoxelField, n_views=8, *, resolution=64, radius=2.8, elevation_deg=25.0,
            fov_deg=45.0, seed=None, n_samples=64, background=(0.0, 0.0, 0.0)):
    """Render an orbit of views looking at the bbox centre; a seed randomises the phase."""
    if n_views < 2:
        raise ValueError("capture needs at least two views")
    phase = 0.0
    if seed is not None:
        phase = float(np.random.default_rng(seed).uniform(0.0, 2 * math.pi / n_views))
    target = 0.5 * (field_.bbox_min + field_.bbox_max)
    cams = orbit_cameras(n_views, radius=radius, elevation_deg=elevation_deg, resolution=resolution,
                         fov_deg=fov_deg, phase=phase, target=target)
    return [(c, render_image(field_, c, n_samples, background=background)[0]) for c in cams]


def rasterize_top(spec: SceneSpec, size=64) -> np.ndarray:
    """Crisp orthographic top-down image (looking along -z) of the scene."""
    lo, hi = np.asarray(spec.bbox_min), np.asarray(spec.bbox_max)
    rows, cols = np.mgrid[0:size, 0:size]
    x = lo[0] + (cols + 0.5) * (hi[0] - lo[0]) / size
    y = hi[1] - (rows + 0.5) * (hi[1] - lo[1]) / size
    xy = np.stack([x, y], axis=-1)
    img = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), (size, size, 3)).copy()
    depth = np.full((size, size), -np.inf)
    for p in spec.primitives:
        hit, z = p.top(xy)
        take = hit & (z > depth)
        pts = np.concatenate([xy, z[..., None]], axis=-1)
        img[take] = p.colors_at(pts[take])
        depth[take] = z[take]
    return img


# --------------------------------------------------------------------------
# Oracle targets


def image_task(spec: SceneSpec, instruction: str, size=64):
    """Top-down image, its edited counterpart and the pixel support of the edit."""
    edited, _ = apply_instruction(spec, lookup_rule(spec, instruction))
    before = rasterize_top(spec, size)
    after = rasterize_top(edited, size)
    return before, after, np.any(before != after, axis=-1)


def register_pairs(targets: EditTargets, codec: Codec, instruction: str, pairs) -> EditTargets:
    """Register (original image, edited image) pairs at latent resolution."""
    for before, after in pairs:
        targets.register(instruction, codec.encode(before), codec.encode(after))
    return targets


def scene_targets(spec: SceneSpec, instruction: str, cams, codec: Codec, *, dims=(32, 32, 32),
                  n_samples=64, targets: EditTargets | None = None) -> EditTargets:
    """Procedural-oracle targets: per camera, the render of the edited scene."""
    targets = EditTargets() if targets is None else targets
    rule = lookup_rule(spec, instruction)
    if rule.effect == "noop":
        targets.register_noop(instruction)
        return targets
    edited, _ = apply_instruction(spec, rule)
    f0, f1 = build_scene(spec, dims), build_scene(edited, dims)
    pairs = [(render_image(f0, c, n_samples, background=spec.background)[0],
              render_image(f1, c, n_samples, background=spec.background)[0]) for c in cams]
    return register_pairs(targets, codec, instruction, pairs)
