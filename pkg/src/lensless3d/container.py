"""On-disk array container: a JSON manifest plus a raw little-endian float32 payload.

``name.json`` holds the manifest; the payload sits next to it in ``name.f32``
(the manifest records the payload's file name). PNG export is a lossy 8-bit
view for humans and is never read back.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import SystemGeometry

__all__ = [
    "ContainerError",
    "SEMANTICS",
    "ArrayContainer",
    "write_container",
    "read_container",
    "payload_path",
    "write_png",
]

SEMANTICS = ("psf_stack", "sensor_image", "volume", "heightmap")
_NDIM = {"psf_stack": 3, "sensor_image": 2, "volume": 3, "heightmap": 2}
_DTYPE = np.dtype("<f4")


class ContainerError(ValueError):
    pass


@dataclass
class ArrayContainer:
    data: np.ndarray
    semantic: str
    units: str = ""
    depth_planes: list[float] | None = None
    geometry: SystemGeometry | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.semantic not in SEMANTICS:
            raise ContainerError(f"unknown semantic {self.semantic!r}; expected one of {SEMANTICS}")
        data = np.asarray(self.data)
        if data.ndim != _NDIM[self.semantic]:
            raise ContainerError(
                f"{self.semantic} must be {_NDIM[self.semantic]}-dimensional, got shape {data.shape}"
            )
        if self.semantic == "psf_stack":
            if self.depth_planes is None or len(self.depth_planes) != data.shape[0]:
                raise ContainerError("psf_stack needs one depth plane per slice")
        if self.depth_planes is not None:
            self.depth_planes = [float(z) for z in self.depth_planes]

    def manifest(self, payload_name: str) -> dict:
        out = {
            "dtype": "f32",
            "shape": [int(n) for n in np.shape(self.data)],
            "order": "row-major",
            "endianness": "little",
            "semantic": self.semantic,
            "units": self.units,
            "payload": payload_name,
        }
        if self.depth_planes is not None:
            out["depth_planes"] = self.depth_planes
        if self.geometry is not None:
            out["geometry"] = self.geometry.to_dict()
        if self.extra:
            out["extra"] = self.extra
        return out


def payload_path(manifest_path) -> Path:
    p = Path(manifest_path)
    return p.with_suffix(".f32")


def write_container(path, container: ArrayContainer) -> Path:
    """Write ``path`` (manifest) and its ``.f32`` sibling; returns the manifest path."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    data = np.ascontiguousarray(container.data, dtype=_DTYPE)
    if not np.all(np.isfinite(data)):
        raise ContainerError("refusing to write non-finite values")
    raw = payload_path(path)
    manifest = container.manifest(raw.name)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = raw.with_suffix(".f32.tmp")
    tmp.write_bytes(data.tobytes(order="C"))
    os.replace(tmp, raw)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_container(path, expect: str | None = None) -> ArrayContainer:
    """Load and validate a container; ``expect`` checks the semantic."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{path}: manifest is not valid JSON ({exc})") from exc
    for key in ("dtype", "shape", "order", "endianness", "semantic"):
        if key not in manifest:
            raise ContainerError(f"{path}: manifest is missing '{key}'")
    if manifest["dtype"] != "f32" or manifest["endianness"] != "little":
        raise ContainerError(f"{path}: only little-endian f32 payloads are supported")
    if manifest["order"] != "row-major":
        raise ContainerError(f"{path}: only row-major payloads are supported")
    shape = tuple(int(n) for n in manifest["shape"])
    if any(n < 0 for n in shape):
        raise ContainerError(f"{path}: negative dimension in shape {shape}")
    if expect is not None and manifest["semantic"] != expect:
        raise ContainerError(f"{path}: expected a {expect}, found {manifest['semantic']}")
    raw = path.parent / manifest.get("payload", payload_path(path).name)
    blob = raw.read_bytes()
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(blob) != expected:
        raise ContainerError(
            f"{raw}: payload has {len(blob)} bytes, manifest shape needs {expected}"
        )
    data = np.frombuffer(blob, dtype=_DTYPE).reshape(shape).astype(np.float32)
    geometry = manifest.get("geometry")
    return ArrayContainer(
        data=data,
        semantic=manifest["semantic"],
        units=manifest.get("units", ""),
        depth_planes=manifest.get("depth_planes"),
        geometry=SystemGeometry.from_dict(geometry) if geometry is not None else None,
        extra=manifest.get("extra", {}),
    )


def write_png(path, image) -> None:
    """8-bit grayscale export, scaled so the maximum maps to 255."""
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContainerError("PNG export needs a 2D image")
    peak = float(np.max(img)) if img.size else 0.0
    scaled = np.zeros(img.shape) if peak <= 0 else np.clip(img / peak, 0, 1) * 255.0
    Image.fromarray(np.round(scaled).astype(np.uint8), mode="L").save(path)
