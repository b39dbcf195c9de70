"""Covisibility loss masks, frustum tests, and overlap-based pair curation.

A target pixel is covisible when the world point lifted from its ground
truth depth lands inside the frustum of at least one context view and the
reprojected depth agrees with that context's own ground-truth depth at the
nearest pixel (relative tolerance, default 3%). Occlusion needs no extra
handling: an occluded point reprojects onto a nearer surface and fails the
depth agreement test.

The vectorized mask computation evaluates exactly the same per-element
expression tree as a per-pixel loop over the scalar geometry functions, so
results are reproducible bit for bit against a brute-force oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, _cam_from_world, _world_from_cam


class NoValidDepthError(ValueError):
    """Source view has no valid-depth pixels to score."""


@dataclass(frozen=True)
class CurationConfig:
    """Thresholds for pair/target curation.

    phi: minimum fraction of a context view's pixels with correspondences
        in the other context.
    psi: minimum fraction of a target view's valid pixels covered by the
        context pair.
    depth_rel_tol: relative tolerance for the reprojected-depth agreement
        test.
    min_valid_fraction: frames with a lower valid-depth fraction are
        dropped from curation entirely.
    """

    phi: float = 0.3
    psi: float = 0.3
    depth_rel_tol: float = 0.03
    min_valid_fraction: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.phi <= 1.0):
            raise ValueError(f"phi must be in (0, 1], got {self.phi}")
        if not (0.0 < self.psi <= 1.0):
            raise ValueError(f"psi must be in (0, 1], got {self.psi}")
        if self.depth_rel_tol <= 0.0:
            raise ValueError(f"depth_rel_tol must be positive, got {self.depth_rel_tol}")
        if not (0.0 <= self.min_valid_fraction <= 1.0):
            raise ValueError("min_valid_fraction must be in [0, 1]")


@dataclass
class LossMask:
    """Per-pixel validity grid for one target view."""

    width: int
    height: int
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.valid, dtype=bool)
        if v.shape != (self.height, self.width):
            raise ValueError(f"mask grid {v.shape} does not match ({self.height}, {self.width})")
        self.valid = v

    @property
    def count(self):
        return int(np.count_nonzero(self.valid))


def in_frustum(camera: Camera, point_world) -> bool:
    """True iff camera-frame depth is in [near, far] and the projected
    pixel lies in [0, width) x [0, height)."""
    p = np.asarray(point_world, dtype=np.float64)
    x, y, z = _cam_from_world(camera.rotation, camera.translation,
                              p[0], p[1], p[2])
    if not (z >= camera.near and z <= camera.far):
        return False
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy
    return bool(u >= 0.0 and u < camera.width and v >= 0.0 and v < camera.height)


def _check_view(view, role):
    h, w = view.camera.height, view.camera.width
    if view.depth.shape != (h, w):
        raise ValueError(f"{role} depth grid {view.depth.shape} does not match "
                         f"camera ({h}, {w})")


def covisibility_mask(target, contexts, config: CurationConfig | None = None) -> LossMask:
    """Mask of target pixels whose lifted point is depth-consistently
    visible in at least one context view.

    `target` and each context must expose `.camera` and `.depth`.
    """
    if config is None:
        config = CurationConfig()
    contexts = list(contexts)
    if not contexts:
        raise ValueError("covisibility_mask requires at least one context view")
    _check_view(target, "target")
    for ctx in contexts:
        _check_view(ctx, "context")

    cam_t = target.camera
    d = np.asarray(target.depth, dtype=np.float64)
    target_valid = d > 0.0

    # Lift every target pixel at its ground-truth depth; same expression
    # tree as geometry.unproject applied per pixel.
    cols = np.arange(cam_t.width, dtype=np.float64)
    rows = np.arange(cam_t.height, dtype=np.float64)
    u = np.broadcast_to(cols[None, :] + 0.5, d.shape)
    v = np.broadcast_to(rows[:, None] + 0.5, d.shape)
    x = (u - cam_t.cx) * d / cam_t.fx
    y = (v - cam_t.cy) * d / cam_t.fy
    wx, wy, wz = _world_from_cam(cam_t.rotation, cam_t.translation, x, y, d)

    covis = np.zeros(d.shape, dtype=bool)
    for ctx in contexts:
        cam_c = ctx.camera
        cxp, cyp, czp = _cam_from_world(cam_c.rotation, cam_c.translation,
                                        wx, wy, wz)
        with np.errstate(divide="ignore", invalid="ignore"):
            ur = cam_c.fx * cxp / czp + cam_c.cx
            vr = cam_c.fy * cyp / czp + cam_c.cy
        inside = ((czp >= cam_c.near) & (czp <= cam_c.far)
                  & (ur >= 0.0) & (ur < cam_c.width)
                  & (vr >= 0.0) & (vr < cam_c.height))
        iu = np.floor(np.where(inside, ur, 0.0)).astype(np.int64)
        iv = np.floor(np.where(inside, vr, 0.0)).astype(np.int64)
        d_gt = np.asarray(ctx.depth, dtype=np.float64)[iv, iu]
        agree = (d_gt > 0.0) & (np.abs(czp - d_gt) <= config.depth_rel_tol * d_gt)
        covis |= inside & agree

    return LossMask(cam_t.width, cam_t.height, target_valid & covis)


def overlap_score(src, dst, config: CurationConfig | None = None) -> float:
    """Fraction of src's valid-depth pixels covisible in dst."""
    if config is None:
        config = CurationConfig()
    n_valid = int(np.count_nonzero(np.asarray(src.depth) > 0.0))
    if n_valid == 0:
        raise NoValidDepthError("source view has no valid-depth pixels")
    mask = covisibility_mask(src, [dst], config)
    return mask.count / n_valid


def usable_frames(views, config: CurationConfig):
    return [i for i, view in enumerate(views)
            if float(np.count_nonzero(np.asarray(view.depth) > 0.0)) / view.depth.size
            >= config.min_valid_fraction]


def select_pairs(views, config: CurationConfig | None = None):
    """All ordered context pairs (i, j) with overlap_score(j -> i) >= phi.

    Returned as (i, j, score) tuples sorted by descending score, ties
    broken by (i, j). The pair is ordered: j's pixels are matched into i.
    """
    if config is None:
        config = CurationConfig()
    usable = usable_frames(views, config)
    if len(usable) < 2:
        raise ValueError(f"pair selection needs >= 2 usable frames, found {len(usable)}")
    pairs = []
    for i in usable:
        for j in usable:
            if i == j:
                continue
            score = overlap_score(views[j], views[i], config)
            if score >= config.phi:
                pairs.append((i, j, score))
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    return pairs


def select_targets(views, pair, config: CurationConfig | None = None):
    """Frames (excluding the pair) whose covisibility coverage against the
    pair reaches psi, as (frame, coverage) sorted by descending coverage."""
    if config is None:
        config = CurationConfig()
    i, j = pair
    if not (0 <= i < len(views) and 0 <= j < len(views)) or i == j:
        raise ValueError(f"invalid context pair {pair!r}")
    usable = set(usable_frames(views, config))
    contexts = [views[i], views[j]]
    out = []
    for k, view in enumerate(views):
        if k == i or k == j or k not in usable:
            continue
        n_valid = int(np.count_nonzero(np.asarray(view.depth) > 0.0))
        if n_valid == 0:
            continue
        mask = covisibility_mask(view, contexts, config)
        coverage = mask.count / n_valid
        if coverage >= config.psi:
            out.append((k, coverage))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out


def curate_scene(views, config: CurationConfig | None = None) -> dict:
    """Full curation of one scene into the pairs.json structure."""
    if config is None:
        config = CurationConfig()
    pairs = select_pairs(views, config)
    entries = []
    for i, j, score in pairs:
        targets = select_targets(views, (i, j), config)
        entries.append({
            "context": [i, j],
            "score": score,
            "targets": [{"frame": k, "coverage": c} for k, c in targets],
        })
    return {
        "schema_version": 1,
        "phi": config.phi,
        "psi": config.psi,
        "pairs": entries,
    }
