"""Scene directory I/O: posed RGB images plus metric depth maps.

Directory layout::

    scene/
      scene.json          frame list with intrinsics, poses, sizes
      images/<name>.png   8-bit RGB
      depth/<name>.png    16-bit single channel, millimeters, 0 = invalid

scene.json has the shape ``{"frames": [{"name", "image", "depth",
"intrinsics" (9 row-major), "pose" (16 row-major world-from-camera),
"width", "height"}]}``. Depth ranges (near/far) are not stored; loaders
apply the package defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, camera_from_dict

DEPTH_UNITS_PER_METER = 1000.0
DEPTH_MAX_METERS = 65535 / DEPTH_UNITS_PER_METER


@dataclass
class View:
    """One posed frame: RGB in [0,1] floats, metric depth (0 = invalid)."""

    name: str
    image: np.ndarray
    depth: np.ndarray
    camera: Camera

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image shape {self.image.shape} does not match camera ({h}, {w}, 3)")
        if self.depth.shape != (h, w):
            raise ValueError(f"depth shape {self.depth.shape} does not match camera ({h}, {w})")

    @property
    def valid_depth(self):
        return self.depth > 0.0

    @property
    def valid_fraction(self):
        return float(np.count_nonzero(self.valid_depth)) / self.depth.size


def encode_image_u8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def decode_image_u8(raw):
    return np.asarray(raw, dtype=np.float64) / 255.0


def encode_depth_u16(depth):
    mm = np.round(np.asarray(depth) * DEPTH_UNITS_PER_METER)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def decode_depth_u16(raw):
    return np.asarray(raw, dtype=np.float64) / DEPTH_UNITS_PER_METER


def save_image_png(path, image):
    Image.fromarray(encode_image_u8(image), mode="RGB").save(path, format="PNG")


def load_image_png(path):
    with Image.open(path) as im:
        return decode_image_u8(np.array(im.convert("RGB"), dtype=np.uint8))


def save_depth_png(path, depth):
    Image.fromarray(encode_depth_u16(depth), mode="I;16").save(path, format="PNG")


def load_depth_png(path):
    with Image.open(path) as im:
        arr = np.array(im, dtype=np.uint16)
    return decode_depth_u16(arr)


def save_mask_png(path, valid):
    arr = np.where(np.asarray(valid, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path):
    with Image.open(path) as im:
        arr = np.array(im.convert("L"), dtype=np.uint8)
    return arr >= 128


def save_scene(scene_dir, views):
    """Write views to a scene directory, creating it if needed."""
    scene_dir = Path(scene_dir)
    (scene_dir / "images").mkdir(parents=True, exist_ok=True)
    (scene_dir / "depth").mkdir(parents=True, exist_ok=True)
    frames = []
    for view in views:
        image_rel = f"images/{view.name}.png"
        depth_rel = f"depth/{view.name}.png"
        save_image_png(scene_dir / image_rel, view.image)
        save_depth_png(scene_dir / depth_rel, view.depth)
        frames.append({
            "name": view.name,
            "image": image_rel,
            "depth": depth_rel,
            "intrinsics": [float(x) for x in view.camera.intrinsics.ravel()],
            "pose": [float(x) for x in view.camera.pose.ravel()],
            "width": view.camera.width,
            "height": view.camera.height,
        })
    with open(scene_dir / "scene.json", "w") as f:
        json.dump({"frames": frames}, f, indent=2)
        f.write("\n")


def load_scene(scene_dir, near=0.01, far=100.0):
    """Load a scene directory into a list of View objects."""
    scene_dir = Path(scene_dir)
    with open(scene_dir / "scene.json") as f:
        meta = json.load(f)
    views = []
    for frame in meta["frames"]:
        camera = camera_from_dict({
            "intrinsics": frame["intrinsics"],
            "pose": frame["pose"],
            "width": frame["width"],
            "height": frame["height"],
            "near": near,
            "far": far,
        })
        views.append(View(
            name=frame["name"],
            image=load_image_png(scene_dir / frame["image"]),
            depth=load_depth_png(scene_dir / frame["depth"]),
            camera=camera,
        ))
    return views
