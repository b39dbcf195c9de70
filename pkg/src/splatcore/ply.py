"""Binary PLY interchange for Gaussian clouds.

Layout is the one common splat viewers expect: a single little-endian
`vertex` element with float32 properties in the order

    x y z nx ny nz f_dc_0..2 [f_rest_0..3(B-1)-1] opacity scale_0..2 rot_0..3

Normals are written as zeros. Attributes are stored in their raw
encodings: log scales, logit opacity, and the quaternion as-is
(renormalized on read). f_rest is channel-major: all B-1 higher-order
coefficients of the red channel, then green, then blue.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .splat import GaussianCloud, sh_coeff_count

_HEADER_FORMAT = "format binary_little_endian 1.0"


def _property_names(n_coeffs: int):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (n_coeffs - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def write_ply(cloud: GaussianCloud, path, source_frames=None):
    """Write a cloud and its JSON sidecar (``<stem>.meta.json``)."""
    path = Path(path)
    b = sh_coeff_count(cloud.sh_degree)
    names = _property_names(b)
    data = np.zeros((cloud.n, len(names)), dtype="<f4")
    data[:, 0:3] = cloud.means
    data[:, 6:9] = cloud.sh[:, :, 0]
    if b > 1:
        rest = cloud.sh[:, :, 1:].reshape(cloud.n, 3 * (b - 1))
        data[:, 9:9 + 3 * (b - 1)] = rest
    col = 9 + 3 * (b - 1)
    opac = cloud.opacities
    data[:, col] = np.log(opac / (1.0 - opac))
    data[:, col + 1:col + 4] = np.log(cloud.scales)
    data[:, col + 4:col + 8] = cloud.rotations

    header = ["ply", _HEADER_FORMAT, f"element vertex {cloud.n}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())

    meta = {
        "schema_version": 1,
        "sh_degree": cloud.sh_degree,
        "source_frames": list(source_frames) if source_frames is not None else None,
    }
    with open(path.with_suffix(".meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def read_ply(path) -> GaussianCloud:
    """Read a cloud written by `write_ply`, validating the layout."""
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header_lines = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n"):]

    fmt = next((l for l in header_lines if l.startswith("format ")), None)
    if fmt != _HEADER_FORMAT:
        raise ValueError(f"{path}: expected little-endian binary PLY, got {fmt!r}")
    element = next((l for l in header_lines if l.startswith("element ")), None)
    if element is None or element.split()[1] != "vertex":
        raise ValueError(f"{path}: expected a 'vertex' element, got {element!r}")
    n = int(element.split()[2])
    props = []
    for line in header_lines:
        if line.startswith("property "):
            _, ptype, pname = line.split()
            if ptype != "float":
                raise ValueError(f"{path}: property {pname} has type {ptype}, expected float")
            props.append(pname)

    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    if n_rest % 3 != 0:
        raise ValueError(f"{path}: f_rest count {n_rest} is not a multiple of 3")
    b = n_rest // 3 + 1
    degree = int(math.isqrt(b)) - 1
    if sh_coeff_count(degree) != b:
        raise ValueError(f"{path}: {b} SH coefficients is not a full degree")
    expected = _property_names(b)
    if props != expected:
        missing = [p for p in expected if p not in props]
        raise ValueError(f"{path}: unexpected property layout "
                         f"(missing or misordered: {missing or props})")

    itemsize = 4 * len(props)
    if len(body) != n * itemsize:
        raise ValueError(f"{path}: body has {len(body)} bytes, expected {n * itemsize}")
    data = np.frombuffer(body, dtype="<f4").reshape(n, len(props)).astype(np.float64)

    col = 9 + 3 * (b - 1)
    sh = np.zeros((n, 3, b))
    sh[:, :, 0] = data[:, 6:9]
    if b > 1:
        sh[:, :, 1:] = data[:, 9:col].reshape(n, 3, b - 1)
    rot = data[:, col + 4:col + 8]
    norms = np.linalg.norm(rot, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError(f"{path}: zero-norm rotation quaternion")
    opacity = 1.0 / (1.0 + np.exp(-data[:, col]))
    return GaussianCloud(
        means=data[:, 0:3],
        rotations=rot / norms[:, None],
        scales=np.exp(data[:, col + 1:col + 4]),
        opacities=opacity,
        sh=sh,
        sh_degree=degree,
    )
