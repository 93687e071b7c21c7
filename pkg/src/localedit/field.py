"""Dense voxel radiance field with a relevance channel.

Per-voxel parameters are stored raw and activated before trilinear
interpolation between voxel centres:

    density   = density_scale * softplus(raw)
    color     = sigmoid(raw)            (3 channels)
    relevance = sigmoid(raw)

Rendering uses the usual quadrature ``C = sum_i w_i c_i + (1 - sum_i w_i) bg``
with ``w_i = T_i (1 - exp(-sigma_i delta_i))``.  Gradients are derived by
hand (no autodiff); the relevance branch never sends gradient to density.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

log = logging.getLogger(__name__)

_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)))


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return y + np.log(-np.expm1(-y))


def safe_logit(p):
    with np.errstate(divide="ignore"):
        return logit(np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0))


# --------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation`` maps camera axes (x right, y down, z forward) to world."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    position: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "position", p)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width=64, height=64,
                fov_deg=40.0, near=0.5, far=6.0):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, R, eye, width, height, near, far)

    def ray_directions(self, us, vs) -> np.ndarray:
        """Unit world-space directions through pixel centres (u, v)."""
        us = np.asarray(us, dtype=np.float64)
        vs = np.asarray(vs, dtype=np.float64)
        d_cam = np.stack(
            [(us + 0.5 - self.cx) / self.fx, (vs + 0.5 - self.cy) / self.fy, np.ones_like(us)], -1
        )
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def rays(self):
        """All pixel rays in row-major order: origins (H*W, 3), directions (H*W, 3)."""
        vs, us = np.mgrid[0 : self.height, 0 : self.width]
        d = self.ray_directions(us.ravel(), vs.ravel())
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "position": self.position.tolist(),
            "width": self.width, "height": self.height, "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# Field


class VoxelField:
    def __init__(self, density_raw, color_raw, relevance_raw, bbox_min, bbox_max, density_scale=None):
        self.density_raw = np.array(density_raw, dtype=np.float64)
        self.color_raw = np.array(color_raw, dtype=np.float64)
        self.relevance_raw = np.array(relevance_raw, dtype=np.float64)
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        dims = self.density_raw.shape
        if len(dims) != 3 or self.color_raw.shape != dims + (3,) or self.relevance_raw.shape != dims:
            raise ValueError("inconsistent voxel parameter shapes")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("empty bounding box")
        if density_scale is None:
            density_scale = 1.0 / float(np.mean(self.voxel_size))
        self.density_scale = float(density_scale)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.density_raw.shape

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.density_raw.shape)

    @classmethod
    def empty(cls, dims, bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1), *, density=0.1,
              color=0.5, relevance=0.05, density_scale=None):
        """Uniform initialisation, e.g. as the starting point of a fit."""
        dims = tuple(int(n) for n in dims)
        f = cls(np.zeros(dims), np.zeros(dims + (3,)), np.zeros(dims), bbox_min, bbox_max, density_scale)
        f.density_raw[:] = inverse_softplus(density / f.density_scale)
        f.color_raw[:] = safe_logit(color)
        f.relevance_raw[:] = safe_logit(relevance)
        return f

    @classmethod
    def from_values(cls, density, color, relevance=None, bbox_min=(-1, -1, -1),
                    bbox_max=(1, 1, 1), density_scale=None):
        """Build a field from activated values (exact zeros/ones map to infinite raws)."""
        density = np.asarray(density, dtype=np.float64)
        if relevance is None:
            relevance = np.full(density.shape, 0.05)
        f = cls(np.zeros(density.shape), np.zeros(density.shape + (3,)), np.zeros(density.shape),
                bbox_min, bbox_max, density_scale)
        f.density_raw[:] = inverse_softplus(density / f.density_scale)
        f.color_raw[:] = safe_logit(color)
        f.relevance_raw[:] = safe_logit(relevance)
        return f

    def copy(self) -> "VoxelField":
        return VoxelField(self.density_raw, self.color_raw, self.relevance_raw,
                          self.bbox_min, self.bbox_max, self.density_scale)

    def density(self):
        return self.density_scale * softplus(self.density_raw)

    def color(self):
        return expit(self.color_raw)

    def relevance(self):
        return expit(self.relevance_raw)

    def geometry_digest(self) -> str:
        """Hash of the density and colour parameter bytes."""
        h = hashlib.sha256()
        h.update(self.density_raw.tobytes())
        h.update(self.color_raw.tobytes())
        return h.hexdigest()

    def voxel_centers(self) -> np.ndarray:
        axes = [self.bbox_min[k] + (np.arange(n) + 0.5) * self.voxel_size[k] for k, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# --------------------------------------------------------------------------
# Ray sampling and quadrature


def sample_along(near, far, n_rays, n_samples, jitter="none", rng=None):
    """Sample positions t (n_rays, N) and spacings delta; last delta runs to ``far``.

    Unjittered samples sit at bin midpoints; stratified samples are uniform
    within each of the N equal bins.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))[:, None]
    bin_width = (far - near) / n_samples
    if jitter == "none":
        u = np.full((n_rays, n_samples), 0.5)
    elif jitter == "stratified":
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((n_rays, n_samples))
    else:
        raise ValueError(f"unknown jitter mode {jitter!r}")
    t = near + (np.arange(n_samples) + u) * bin_width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far[:, 0] - t[:, -1]
    return t, delta


def sample_ray(cam: Camera, pixel, n_samples, jitter="none", seed=None):
    """Origin, unit direction, sample positions and spacings for one pixel."""
    u, v = pixel
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel {pixel} outside the image")
    d = cam.ray_directions(np.array([u]), np.array([v]))[0]
    rng = None if seed is None else np.random.default_rng(seed)
    t, delta = sample_along(cam.near, cam.far, 1, n_samples, jitter, rng)
    return cam.position.copy(), d, t[0], delta[0]


def _padded_shape(dims):
    # one border voxel below each axis, two above, so clipped corners stay in range
    return tuple(n + 3 for n in dims)


def _trilinear(field: VoxelField, pts: np.ndarray):
    """Corner indices into the zero-padded grid and trilinear weights, each (8, S)."""
    dims = np.asarray(field.dims)
    g = (pts - field.bbox_min) / field.voxel_size - 0.5
    g = np.clip(g, -1.0, dims.astype(np.float64))
    i0 = np.floor(g)
    frac = g - i0
    i0 = i0.astype(np.int64) + 1
    Px, Py, Pz = _padded_shape(field.dims)
    base = (i0[:, 0] * Py + i0[:, 1]) * Pz + i0[:, 2]
    offsets = (_CORNERS[:, 0] * Py + _CORNERS[:, 1]) * Pz + _CORNERS[:, 2]
    idx = base[None, :] + offsets[:, None]
    lo, hi = 1.0 - frac, frac
    wx = np.stack([lo[:, 0], hi[:, 0]])
    wy = np.stack([lo[:, 1], hi[:, 1]])
    wz = np.stack([lo[:, 2], hi[:, 2]])
    w = wx[_CORNERS[:, 0]] * wy[_CORNERS[:, 1]] * wz[_CORNERS[:, 2]]
    return idx, w


def _padded_table(field: VoxelField, values: np.ndarray) -> np.ndarray:
    """Flattened (P, C) lookup table with a border around the grid.

    Channel 0 (density) is zero on the border so nothing exists outside the
    box; the other channels replicate the edge voxels, so a surface touching
    the box keeps its colour and relevance where its density ramps up.
    """
    C = values.shape[-1]
    table = np.pad(values, ((1, 2), (1, 2), (1, 2), (0, 0)), mode="edge")
    nx, ny, nz = field.dims
    density = np.zeros(_padded_shape(field.dims))
    density[1 : nx + 1, 1 : ny + 1, 1 : nz + 1] = values[..., 0]
    table[..., 0] = density
    return table.reshape(-1, C)


def _unpad(field: VoxelField, flat: np.ndarray, fold: bool) -> np.ndarray:
    """Crop the border; with ``fold`` first add border entries onto the edge voxels they copy."""
    nx, ny, nz = field.dims
    grid = flat.reshape(_padded_shape(field.dims) + flat.shape[1:])
    if fold:
        grid = grid.copy()
        for axis, n in enumerate(field.dims):
            g = np.moveaxis(grid, axis, 0)
            g[1] += g[0]
            g[n] += g[n + 1] + g[n + 2]
    return grid[1 : nx + 1, 1 : ny + 1, 1 : nz + 1]


def _gather(table, idx, w):
    return np.einsum("ks,ksc->sc", w, table[idx])


def _scatter(grad_samples, idx, w, n_entries):
    """Adjoint of ``_gather``: accumulate per-sample gradients onto table entries."""
    flat_idx = idx.ravel()
    out = np.empty((n_entries, grad_samples.shape[1]))
    for ch in range(grad_samples.shape[1]):
        out[:, ch] = np.bincount(flat_idx, weights=(w * grad_samples[:, ch]).ravel(), minlength=n_entries)
    return out


def composite_weights(sigma, delta):
    """Transmittance T (R, N+1) and weights w (R, N); T[:, N] is the leftover."""
    tau = sigma * delta
    acc = np.cumsum(tau, axis=1)
    T = np.exp(-np.concatenate([np.zeros((tau.shape[0], 1)), acc], axis=1))
    w = T[:, :-1] * -np.expm1(-tau)
    return T, w


@dataclass
class RayBatchRender:
    rgb: np.ndarray  # (R, 3)
    alpha: np.ndarray  # (R,)
    relevance: np.ndarray  # (R,)
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray  # (R, N, 3)
    rel: np.ndarray  # (R, N)
    T: np.ndarray
    weights: np.ndarray
    idx: np.ndarray
    w_interp: np.ndarray


def render_rays(field: VoxelField, origins, dirs, near, far, n_samples, *,
                background=(0.0, 0.0, 0.0), jitter="none", rng=None) -> RayBatchRender:
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = len(origins)
    t, delta = sample_along(near, far, R, n_samples, jitter, rng)
    pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    idx, w_interp = _trilinear(field, pts)
    values = np.concatenate(
        [field.density()[..., None], field.color(), field.relevance()[..., None]], axis=-1
    )
    table = _padded_table(field, values)
    vals = _gather(table, idx, w_interp).reshape(R, n_samples, 5)
    sigma, color, rel = vals[..., 0], vals[..., 1:4], vals[..., 4]
    T, weights = composite_weights(sigma, delta)
    alpha = weights.sum(axis=1)
    bg = np.asarray(background, dtype=np.float64)
    rgb = np.einsum("rn,rnc->rc", weights, color) + T[:, -1:] * bg
    relevance = np.einsum("rn,rn->r", weights, rel)
    return RayBatchRender(rgb, alpha, relevance, t, delta, sigma, color, rel, T, weights, idx, w_interp)


def _tau_adjoint(out: RayBatchRender, values, g, leftover):
    """dL/dtau_i for L = g . (sum_j w_j v_j + T_{N+1} leftover), per ray.

    d/dtau_i = T_{i+1} v_i - sum_{j>i} w_j v_j - T_{N+1} leftover.
    """
    proj = values * g[:, None] if values.ndim == 2 else np.einsum("rnc,rc->rn", values, g)
    contrib = out.weights * proj
    after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib  # sum over j > i
    return out.T[:, 1:] * proj - after - out.T[:, -1:] * leftover


def color_gradients(field: VoxelField, out: RayBatchRender, grad_rgb, background=(0.0, 0.0, 0.0)):
    """Gradients of ``sum(grad_rgb * rgb)`` w.r.t. density_raw and color_raw."""
    R, N = out.sigma.shape
    g = np.asarray(grad_rgb, dtype=np.float64)
    bg_term = g @ np.asarray(background, dtype=np.float64)
    d_tau = _tau_adjoint(out, out.color.reshape(R, N, 3), g, bg_term[:, None])
    d_sigma = d_tau * out.delta
    d_color = out.weights[..., None] * g[:, None, :]
    per_sample = np.concatenate([d_sigma.reshape(-1, 1), d_color.reshape(-1, 3)], axis=1)
    n_entries = int(np.prod(_padded_shape(field.dims)))
    vox = _scatter(per_sample, out.idx, out.w_interp, n_entries)
    d_density_raw = _unpad(field, vox[:, 0], False) * field.density_scale * expit(field.density_raw)
    c = field.color()
    d_color_raw = _unpad(field, vox[:, 1:], True) * c * (1.0 - c)
    return d_density_raw, d_color_raw


def relevance_gradients(field: VoxelField, out: RayBatchRender, grad_rel):
    """Gradient of ``sum(grad_rel * relevance)`` w.r.t. relevance_raw only (density detached)."""
    d_rel = out.weights * np.asarray(grad_rel, dtype=np.float64)[:, None]
    n_entries = int(np.prod(_padded_shape(field.dims)))
    vox = _unpad(field, _scatter(d_rel.reshape(-1, 1), out.idx, out.w_interp, n_entries)[:, 0], True)
    r = field.relevance()
    return vox * r * (1.0 - r)


def relevance_density_gradient(field: VoxelField, out: RayBatchRender, grad_rel):
    """Gradient of rendered relevance w.r.t. density_raw (used only to verify detachment)."""
    d_tau = _tau_adjoint(out, out.rel, np.asarray(grad_rel, dtype=np.float64), 0.0)
    n_entries = int(np.prod(_padded_shape(field.dims)))
    vox = _scatter((d_tau * out.delta).reshape(-1, 1), out.idx, out.w_interp, n_entries)[:, 0]
    return _unpad(field, vox, False) * field.density_scale * expit(field.density_raw)


# --------------------------------------------------------------------------
# Image-level rendering


def render_image(field: VoxelField, cam: Camera, n_samples=64, *, background=(0.0, 0.0, 0.0),
                 chunk=4096):
    """Render colour (H, W, 3), alpha (H, W) and relevance (H, W) for every pixel."""
    o, d = cam.rays()
    rgb, alpha, rel = [], [], []
    for s in range(0, len(o), chunk):
        out = render_rays(field, o[s : s + chunk], d[s : s + chunk], cam.near, cam.far, n_samples,
                          background=background)
        rgb.append(out.rgb)
        alpha.append(out.alpha)
        rel.append(out.relevance)
    H, W = cam.height, cam.width
    return (np.concatenate(rgb).reshape(H, W, 3), np.concatenate(alpha).reshape(H, W),
            np.concatenate(rel).reshape(H, W))


def render_color(field, cam, pixel, n_samples=64, *, background=(0.0, 0.0, 0.0), jitter="none", seed=None):
    o, d, _, _ = sample_ray(cam, pixel, n_samples)
    rng = None if seed is None else np.random.default_rng(seed)
    out = render_rays(field, o[None], d[None], cam.near, cam.far, n_samples,
                      background=background, jitter=jitter, rng=rng)
    return out.rgb[0], float(out.alpha[0])


def render_relevance(field, cam, pixel, n_samples=64, *, jitter="none", seed=None) -> float:
    o, d, _, _ = sample_ray(cam, pixel, n_samples)
    rng = None if seed is None else np.random.default_rng(seed)
    out = render_rays(field, o[None], d[None], cam.near, cam.far, n_samples, jitter=jitter, rng=rng)
    return float(out.relevance[0])


# --------------------------------------------------------------------------
# Optimisation


class Adam:
    def __init__(self, lr, betas=(0.9, 0.99), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = None
        self.v = None
        self.k = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.k)
        v_hat = self.v / (1 - self.b2 ** self.k)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class FitDivergedError(FloatingPointError):
    pass


class RayBank:
    """Every pixel ray of a set of views, flattened, with per-ray near/far and targets."""

    def __init__(self, cams, targets):
        o, d, near, far, tgt = [], [], [], [], []
        for cam, img in zip(cams, targets):
            img = np.asarray(img, dtype=np.float64)
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError("target resolution does not match its camera")
            ro, rd = cam.rays()
            o.append(ro)
            d.append(rd)
            near.append(np.full(len(ro), cam.near))
            far.append(np.full(len(ro), cam.far))
            tgt.append(img.reshape(len(ro), -1))
        self.origins = np.concatenate(o)
        self.dirs = np.concatenate(d)
        self.near = np.concatenate(near)
        self.far = np.concatenate(far)
        self.targets = np.concatenate(tgt)

    def __len__(self):
        return len(self.origins)

    def batch(self, rng, size):
        sel = rng.integers(0, len(self), size=min(size, len(self)))
        return self.origins[sel], self.dirs[sel], self.near[sel], self.far[sel], self.targets[sel]


class FieldOptimizer:
    """Adam state for the geometry/colour branch and the relevance branch."""

    def __init__(self, field: VoxelField, lr=1e-2, lr_relevance=1e-1, n_samples=64,
                 background=(0.0, 0.0, 0.0), lr_density=1e-1):
        self.field = field
        self.n_samples = n_samples
        self.background = background
        self.opt_density = Adam(lr_density)
        self.opt_color = Adam(lr)
        self.opt_relevance = Adam(lr_relevance)

    def color_step(self, origins, dirs, near, far, target_rgb) -> float:
        out = render_rays(self.field, origins, dirs, near, far, self.n_samples, background=self.background)
        resid = out.rgb - target_rgb
        loss = float(np.mean(resid ** 2))
        if not math.isfinite(loss):
            raise FitDivergedError(f"photometric loss is {loss}")
        g = 2.0 * resid / resid.size
        d_density, d_color = color_gradients(self.field, out, g, self.background)
        self.opt_density.step(self.field.density_raw, d_density)
        self.opt_color.step(self.field.color_raw, d_color)
        return loss

    def relevance_step(self, origins, dirs, near, far, target_rel) -> float:
        out = render_rays(self.field, origins, dirs, near, far, self.n_samples)
        resid = out.relevance - np.asarray(target_rel).reshape(-1)
        loss = float(np.mean(resid ** 2))
        if not math.isfinite(loss):
            raise FitDivergedError(f"relevance loss is {loss}")
        g = 2.0 * resid / resid.size
        self.opt_relevance.step(self.field.relevance_raw, relevance_gradients(self.field, out, g))
        return loss


def fit_field(field: VoxelField, views, iters, *, lr=1e-2, batch_size=1024, n_samples=64, seed=0,
              background=(0.0, 0.0, 0.0), log_every=0, lr_density=1e-1) -> VoxelField:
    """Fit density and colour to posed images; returns a new field."""
    if len(views) < 2:
        raise ValueError("fit_field needs at least two views")
    fitted = field.copy()
    if iters <= 0:
        return fitted
    bank = RayBank([c for c, _ in views], [img for _, img in views])
    opt = FieldOptimizer(fitted, lr=lr, n_samples=n_samples, background=background,
                         lr_density=lr_density)
    rng = np.random.default_rng(seed)
    for it in range(iters):
        o, d, near, far, tgt = bank.batch(rng, batch_size)
        loss = opt.color_step(o, d, near, far, tgt)
        if log_every and it % log_every == 0:
            log.info("fit iter %d loss %.3e", it, loss)
    return fitted


def fit_relevance(field: VoxelField, rel_views, iters, *, lr=1e-1, batch_size=1024, n_samples=64,
                  seed=0) -> VoxelField:
    """Fit only the relevance channel to pixel-resolution relevance maps."""
    fitted = field.copy()
    if iters <= 0 or not rel_views:
        return fitted
    bank = RayBank([c for c, _ in rel_views], [r for _, r in rel_views])
    opt = FieldOptimizer(fitted, lr_relevance=lr, n_samples=n_samples)
    rng = np.random.default_rng(seed)
    for _ in range(iters):
        o, d, near, far, tgt = bank.batch(rng, batch_size)
        opt.relevance_step(o, d, near, far, tgt)
    return fitted
