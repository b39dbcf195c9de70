"""Gaussian primitive data model: activations, point-map-to-cloud
construction, covariance reparameterization, and spherical harmonics.

Activations applied to the raw per-pixel head outputs:

- rotation: quaternion normalized to unit length (w, x, y, z order);
- scale: ``s_min + s_max * tanh(exp(raw) / s_max)``, an everywhere-smooth
  exponential with a soft ceiling at s_max;
- opacity: sigmoid;
- offset: ``d_max * tanh(sign(r) * (exp(|r|) - 1) * d_unit / d_max)``, odd,
  slope d_unit at zero, softly bounded by d_max;
- color: the spherical-harmonic DC coefficient is the pixel color mapped
  through (c - 0.5) / Y00 plus the raw DC residual; higher-order
  coefficients pass through unchanged.

With all-zero raw color, a degree-0 Gaussian renders exactly its source
pixel color. Every activation is smooth and `activation_jacobians` exposes
the exact local derivatives the backward pass uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)
SH_C4 = (2.5033429417967046, -1.7701307697799304, 0.9461746957575601,
         -0.6690465435572892, 0.10578554691520431, -0.6690465435572892,
         0.47308734787878004, -1.7701307697799304, 0.6258357354491761)

MAX_SH_DEGREE = 4
ZERO_QUAT_TOL = 1e-12
_OPACITY_EPS = 1e-12


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass(frozen=True)
class SplatConfig:
    """Gaussian construction parameters."""

    sh_degree: int = 0
    scale_min: float = 1e-6
    scale_max: float = 1.0
    offset_unit: float = 1e-3
    offset_max: float = 0.05

    def __post_init__(self):
        if not (0 <= self.sh_degree <= MAX_SH_DEGREE):
            raise ValueError(f"sh_degree must be in [0, {MAX_SH_DEGREE}], got {self.sh_degree}")
        if self.scale_min <= 0 or self.scale_max <= self.scale_min:
            raise ValueError("require 0 < scale_min < scale_max")
        if self.offset_unit <= 0 or self.offset_max <= 0:
            raise ValueError("offset activation constants must be positive")

    @property
    def n_coeffs(self):
        return sh_coeff_count(self.sh_degree)


@dataclass
class PointMap:
    """Per-pixel 3D points in the first camera's frame plus confidence."""

    points: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        c = np.asarray(self.confidence, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"points must be (H, W, 3), got {p.shape}")
        if c.shape != p.shape[:2] or v.shape != p.shape[:2]:
            raise ValueError("confidence/valid grids must match the point grid")
        if not np.all(np.isfinite(p[v])):
            raise ValueError("point map has non-finite valid entries")
        if np.any(c[v] < 1.0):
            raise ValueError("confidence must be >= 1 on valid pixels")
        self.points, self.confidence, self.valid = p, c, v

    @property
    def shape(self):
        return self.valid.shape


@dataclass
class RawGaussianParams:
    """Pre-activation per-pixel Gaussian attributes."""

    offset_raw: np.ndarray
    rotation_raw: np.ndarray
    scale_raw: np.ndarray
    opacity_raw: np.ndarray
    color_raw: np.ndarray

    def __post_init__(self):
        h, w = self.opacity_raw.shape
        expect = {
            "offset_raw": (h, w, 3),
            "rotation_raw": (h, w, 4),
            "scale_raw": (h, w, 3),
            "opacity_raw": (h, w),
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        c = np.asarray(self.color_raw, dtype=np.float64)
        if c.ndim != 4 or c.shape[:2] != (h, w) or c.shape[2] != 3:
            raise ValueError(f"color_raw must be (H, W, 3, B), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("color_raw contains non-finite values")
        self.color_raw = c

    @property
    def shape(self):
        return self.opacity_raw.shape

    @property
    def n_coeffs(self):
        return self.color_raw.shape[3]

    @classmethod
    def zeros(cls, height, width, n_coeffs):
        return cls(
            offset_raw=np.zeros((height, width, 3)),
            rotation_raw=np.zeros((height, width, 4)),
            scale_raw=np.zeros((height, width, 3)),
            opacity_raw=np.zeros((height, width)),
            color_raw=np.zeros((height, width, 3, n_coeffs)),
        )


@dataclass
class ActivatedGaussians:
    """Post-activation per-pixel Gaussian attributes."""

    offset: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray


@dataclass
class GaussianCloud:
    """Renderable set of Gaussians, all attributes in one shared frame."""

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_degree: int

    def __post_init__(self):
        m = np.asarray(self.means, dtype=np.float64)
        q = np.asarray(self.rotations, dtype=np.float64)
        s = np.asarray(self.scales, dtype=np.float64)
        a = np.asarray(self.opacities, dtype=np.float64)
        c = np.asarray(self.sh, dtype=np.float64)
        n = m.shape[0]
        b = sh_coeff_count(self.sh_degree)
        if m.shape != (n, 3) or q.shape != (n, 4) or s.shape != (n, 3) \
                or a.shape != (n,) or c.shape != (n, 3, b):
            raise ValueError("inconsistent cloud array shapes")
        if n:
            if not np.all(np.isfinite(m)):
                raise ValueError("cloud means must be finite")
            norms = np.linalg.norm(q, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("cloud quaternions must be unit norm (1e-9)")
            if np.any(s <= 0.0):
                raise ValueError("cloud scales must be strictly positive")
            if np.any(a <= 0.0) or np.any(a >= 1.0):
                raise ValueError("cloud opacities must lie in the open interval (0, 1)")
        self.means, self.rotations, self.scales = m, q, s
        self.opacities, self.sh = a, c

    @property
    def n(self):
        return self.means.shape[0]

    @classmethod
    def empty(cls, sh_degree=0):
        b = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0,)), np.zeros((0, 3, b)), sh_degree)


# -- activations -------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate_scale(raw, config: SplatConfig):
    e = np.exp(raw)
    return config.scale_min + config.scale_max * np.tanh(e / config.scale_max)


def activate_offset(raw, config: SplatConfig):
    inner = np.sign(raw) * (np.exp(np.abs(raw)) - 1.0) * config.offset_unit
    return config.offset_max * np.tanh(inner / config.offset_max)


def activate_opacity(raw):
    return np.clip(sigmoid(raw), _OPACITY_EPS, 1.0 - _OPACITY_EPS)


def _normalize_rotation(rotation_raw, where=""):
    norms = np.linalg.norm(rotation_raw, axis=-1)
    if np.any(norms < ZERO_QUAT_TOL):
        idx = np.argwhere(norms < ZERO_QUAT_TOL)[0]
        raise ValueError(f"zero-norm rotation quaternion{where} at pixel {tuple(idx)}")
    return rotation_raw / norms[..., None], norms


def activate(raw: RawGaussianParams, pixel_colors, config: SplatConfig) -> ActivatedGaussians:
    """Apply all attribute activations to one view's raw grids.

    `pixel_colors` is the (H, W, 3) source image; it seeds the SH DC term
    so the raw color grid predicts a residual on top of the pixel color.
    """
    if raw.n_coeffs != config.n_coeffs:
        raise ValueError(f"raw color has {raw.n_coeffs} coefficients, "
                         f"config expects {config.n_coeffs}")
    colors = np.asarray(pixel_colors, dtype=np.float64)
    if colors.shape != raw.shape + (3,):
        raise ValueError(f"pixel colors {colors.shape} do not match raw grids {raw.shape}")
    rotation, _ = _normalize_rotation(raw.rotation_raw)
    sh = raw.color_raw.copy()
    sh[..., 0] = (colors - 0.5) / SH_C0 + raw.color_raw[..., 0]
    return ActivatedGaussians(
        offset=activate_offset(raw.offset_raw, config),
        rotation=rotation,
        scale=activate_scale(raw.scale_raw, config),
        opacity=activate_opacity(raw.opacity_raw),
        sh=sh,
    )


@dataclass
class ActivationJacobians:
    """Exact local derivatives of each activation w.r.t. its raw input.

    offset/scale/opacity are elementwise; rotation_raw_norm together with
    the normalized quaternion determines the normalization Jacobian
    (I - q q^T) / |raw|.
    """

    d_offset: np.ndarray
    d_scale: np.ndarray
    d_opacity: np.ndarray
    rotation_unit: np.ndarray
    rotation_raw_norm: np.ndarray


def activation_jacobians(raw: RawGaussianParams, config: SplatConfig) -> ActivationJacobians:
    e_s = np.exp(raw.scale_raw)
    th_s = np.tanh(e_s / config.scale_max)
    inner = np.sign(raw.offset_raw) * (np.exp(np.abs(raw.offset_raw)) - 1.0) * config.offset_unit
    th_o = np.tanh(inner / config.offset_max)
    sig = sigmoid(raw.opacity_raw)
    unit, norms = _normalize_rotation(raw.rotation_raw)
    return ActivationJacobians(
        d_offset=(1.0 - th_o * th_o) * np.exp(np.abs(raw.offset_raw)) * config.offset_unit,
        d_scale=e_s * (1.0 - th_s * th_s),
        d_opacity=sig * (1.0 - sig),
        rotation_unit=unit,
        rotation_raw_norm=norms,
    )


def activate_backward(raw: RawGaussianParams, config: SplatConfig,
                      grad_offset, grad_rotation, grad_scale, grad_opacity,
                      grad_sh) -> RawGaussianParams:
    """Chain gradients on activated attributes back to the raw grids.

    Gradients arrive w.r.t. the unit quaternion; the normalization Jacobian
    maps them to the raw 4-vector. Returns grids shaped like `raw`.
    """
    jac = activation_jacobians(raw, config)
    q = jac.rotation_unit
    dot = np.sum(q * grad_rotation, axis=-1, keepdims=True)
    grad_rot_raw = (grad_rotation - q * dot) / jac.rotation_raw_norm[..., None]
    grad_color_raw = np.asarray(grad_sh, dtype=np.float64).copy()
    return RawGaussianParams(
        offset_raw=grad_offset * jac.d_offset,
        rotation_raw=grad_rot_raw,
        scale_raw=grad_scale * jac.d_scale,
        opacity_raw=grad_opacity * jac.d_opacity,
        color_raw=grad_color_raw,
    )


# -- covariance & quaternions ------------------------------------------------

def quaternion_to_rotation(q):
    """Rotation matrices from unit quaternions, (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def covariance(rotation, scale):
    """3D covariance R diag(s)^2 R^T from unit quaternion(s) and scale(s)."""
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("covariance requires unit quaternions")
    if np.any(s <= 0.0):
        raise ValueError("covariance requires positive scales")
    r = quaternion_to_rotation(q)
    rs = r * (s[..., None, :] ** 2)
    return rs @ np.swapaxes(r, -1, -2)


# -- spherical harmonics -----------------------------------------------------

def sh_basis(dirs, degree: int):
    """Real SH basis values at unit directions, (..., 3) -> (..., B)."""
    if not (0 <= degree <= MAX_SH_DEGREE):
        raise ValueError(f"sh degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    b = np.empty(d.shape[:-1] + (sh_coeff_count(degree),))
    b[..., 0] = SH_C0
    if degree >= 1:
        b[..., 1] = -SH_C1 * y
        b[..., 2] = SH_C1 * z
        b[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 4] = SH_C2[0] * x * y
        b[..., 5] = SH_C2[1] * y * z
        b[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        b[..., 7] = SH_C2[3] * x * z
        b[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        b[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        b[..., 10] = SH_C3[1] * x * y * z
        b[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        b[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        b[..., 14] = SH_C3[5] * z * (xx - yy)
        b[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    if degree >= 4:
        b[..., 16] = SH_C4[0] * x * y * (xx - yy)
        b[..., 17] = SH_C4[1] * y * z * (3 * xx - yy)
        b[..., 18] = SH_C4[2] * x * y * (7 * zz - 1)
        b[..., 19] = SH_C4[3] * y * z * (7 * zz - 3)
        b[..., 20] = SH_C4[4] * (zz * (35 * zz - 30) + 3)
        b[..., 21] = SH_C4[5] * x * z * (7 * zz - 3)
        b[..., 22] = SH_C4[6] * (xx - yy) * (7 * zz - 1)
        b[..., 23] = SH_C4[7] * x * z * (xx - 3 * yy)
        b[..., 24] = SH_C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy))
    return b


def sh_basis_grad(dirs, degree: int):
    """d(basis)/d(direction), (..., 3) -> (..., B, 3)."""
    if not (0 <= degree <= MAX_SH_DEGREE):
        raise ValueError(f"sh degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    g = np.zeros(d.shape[:-1] + (sh_coeff_count(degree), 3))
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = -2 * SH_C2[2] * x
        g[..., 6, 1] = -2 * SH_C2[2] * y
        g[..., 6, 2] = 4 * SH_C2[2] * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = 2 * SH_C2[4] * x
        g[..., 8, 1] = -2 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6 * x * y
        g[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[..., 11, 2] = SH_C3[2] * 8 * y * z
        g[..., 12, 0] = SH_C3[3] * (-6 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2 * x * y)
        g[..., 13, 2] = SH_C3[4] * 8 * x * z
        g[..., 14, 0] = SH_C3[5] * 2 * x * z
        g[..., 14, 1] = SH_C3[5] * (-2 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6 * x * y)
    if degree >= 4:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 16, 0] = SH_C4[0] * (3 * xx * y - yy * y)
        g[..., 16, 1] = SH_C4[0] * (xx * x - 3 * x * yy)
        g[..., 17, 0] = SH_C4[1] * 6 * x * y * z
        g[..., 17, 1] = SH_C4[1] * z * (3 * xx - 3 * yy)
        g[..., 17, 2] = SH_C4[1] * y * (3 * xx - yy)
        g[..., 18, 0] = SH_C4[2] * y * (7 * zz - 1)
        g[..., 18, 1] = SH_C4[2] * x * (7 * zz - 1)
        g[..., 18, 2] = SH_C4[2] * 14 * x * y * z
        g[..., 19, 1] = SH_C4[3] * z * (7 * zz - 3)
        g[..., 19, 2] = SH_C4[3] * y * (21 * zz - 3)
        g[..., 20, 2] = SH_C4[4] * (140 * zz * z - 60 * z)
        g[..., 21, 0] = SH_C4[5] * z * (7 * zz - 3)
        g[..., 21, 2] = SH_C4[5] * x * (21 * zz - 3)
        g[..., 22, 0] = SH_C4[6] * 2 * x * (7 * zz - 1)
        g[..., 22, 1] = SH_C4[6] * (-2 * y) * (7 * zz - 1)
        g[..., 22, 2] = SH_C4[6] * 14 * z * (xx - yy)
        g[..., 23, 0] = SH_C4[7] * z * (3 * xx - 3 * yy)
        g[..., 23, 1] = SH_C4[7] * (-6 * x * y * z)
        g[..., 23, 2] = SH_C4[7] * x * (xx - 3 * yy)
        g[..., 24, 0] = SH_C4[8] * (4 * xx * x - 12 * x * yy)
        g[..., 24, 1] = SH_C4[8] * (4 * yy * y - 12 * xx * y)
    return g


def eval_sh(coeffs, view_dir, degree: int):
    """RGB radiance from SH coefficients at a unit view direction.

    coeffs is (3, B) with B = (degree + 1)^2. The result carries the +0.5
    shift and is clamped to [0, inf) per channel.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    b = sh_coeff_count(degree)
    if c.shape != (3, b):
        raise ValueError(f"coeffs must be (3, {b}) for degree {degree}, got {c.shape}")
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit length")
    rgb = c @ sh_basis(d, degree) + 0.5
    return np.maximum(rgb, 0.0)


# -- cloud construction ------------------------------------------------------

def build_cloud(pointmaps, raws, images, config: SplatConfig,
                return_sources=False):
    """Union the per-pixel Gaussians of two views into one cloud.

    Attributes stay in the first camera's frame (the point maps already
    live there): means are point + activated offset, and no pose is
    applied. Output order is view-1 row-major then view-2 row-major over
    valid pixels, so construction is deterministic.

    With `return_sources`, also returns (view_index, row, col) arrays
    mapping each Gaussian back to its source pixel.
    """
    if len(pointmaps) != 2 or len(raws) != 2 or len(images) != 2:
        raise ValueError("build_cloud expects exactly two views")
    means, rots, scales, opacs, shs = [], [], [], [], []
    src_view, src_row, src_col = [], [], []
    for vi, (pmap, raw, image) in enumerate(zip(pointmaps, raws, images)):
        if pmap.shape != raw.shape:
            raise ValueError(f"view {vi}: point map {pmap.shape} does not match "
                             f"raw grids {raw.shape}")
        try:
            act = activate(raw, image, config)
        except ValueError as exc:
            raise ValueError(f"view {vi}: {exc}") from exc
        rows, cols = np.nonzero(pmap.valid)
        means.append(pmap.points[rows, cols] + act.offset[rows, cols])
        rots.append(act.rotation[rows, cols])
        scales.append(act.scale[rows, cols])
        opacs.append(act.opacity[rows, cols])
        shs.append(act.sh[rows, cols])
        src_view.append(np.full(rows.shape, vi, dtype=np.int64))
        src_row.append(rows)
        src_col.append(cols)
    cloud = GaussianCloud(
        means=np.concatenate(means, axis=0),
        rotations=np.concatenate(rots, axis=0),
        scales=np.concatenate(scales, axis=0),
        opacities=np.concatenate(opacs, axis=0),
        sh=np.concatenate(shs, axis=0),
        sh_degree=config.sh_degree,
    )
    if return_sources:
        sources = (np.concatenate(src_view), np.concatenate(src_row),
                   np.concatenate(src_col))
        return cloud, sources
    return cloud
