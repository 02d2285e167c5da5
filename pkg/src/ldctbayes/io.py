"""On-disk formats: raw little-endian float32 arrays with a JSON sidecar.

``<stem>.f32`` holds the row-major values and ``<stem>.json`` their
dimensions and metadata. Images may also be exported as 8-bit PNG with the
display window recorded in the sidecar. Weight checkpoints use
``<stem>.bin`` plus a ``<stem>.json`` manifest listing the tensors in order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .network import NetworkSpec, WeightSet
from .projector import FanBeamGeometry, ImageGrid, Sinogram
from .sim import RawCounts

RAW_DTYPE = "<f4"


def write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return json.loads(path.read_text())


def _write_raw(stem: Path, values: np.ndarray, meta: dict) -> dict:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(values, dtype=RAW_DTYPE)
    stem.with_suffix(".f32").write_bytes(arr.tobytes())
    meta = dict(meta, dims=list(arr.shape), dtype=RAW_DTYPE, file=stem.with_suffix(".f32").name)
    write_json(stem.with_suffix(".json"), meta)
    return meta


def _read_raw(stem: Path) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    raw_path = stem.with_suffix(".f32")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing file: {raw_path}")
    arr = np.frombuffer(raw_path.read_bytes(), dtype=meta.get("dtype", RAW_DTYPE))
    return arr.reshape(meta["dims"]).astype(np.float64), meta


def save_image(stem, image: ImageGrid, **meta) -> dict:
    return _write_raw(stem, image.values, dict(meta, kind="image", pixel_size_mm=image.pixel_size_mm))


def load_image(stem) -> tuple[ImageGrid, dict]:
    arr, meta = _read_raw(stem)
    return ImageGrid(arr, meta["pixel_size_mm"]), meta


def save_sinogram(stem, sino: Sinogram | RawCounts, geom: FanBeamGeometry, kind: str = "sinogram",
                  **meta) -> dict:
    return _write_raw(stem, sino.values, dict(meta, kind=kind, geometry=geom.to_dict()))


def load_sinogram(stem) -> tuple[Sinogram | RawCounts, FanBeamGeometry, dict]:
    arr, meta = _read_raw(stem)
    geom = FanBeamGeometry(**meta["geometry"])
    obj = RawCounts(arr) if meta.get("kind") == "raw_counts" else Sinogram(arr)
    return obj, geom, meta


def to_uint8(values: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    if not hi > lo:
        hi = lo + 1.0
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, values: np.ndarray, window: tuple[float, float] | None = None) -> tuple[float, float]:
    """Write an 8-bit grayscale PNG; the window defaults to min/max."""
    values = np.asarray(values)
    if window is None:
        window = (float(values.min()), float(values.max()))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(values, window), mode="L").save(path)
    return (float(window[0]), float(window[1]))


def save_checkpoint(stem, weights: WeightSet, spec: NetworkSpec, **meta) -> dict:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    layers, chunks, offset = [], [], 0
    for name, t in weights.items():
        arr = np.ascontiguousarray(t.data, dtype=RAW_DTYPE)
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    manifest = dict(meta, layers=layers, dtype=RAW_DTYPE, network_spec=spec.to_dict())
    write_json(stem.with_suffix(".json"), manifest)
    return manifest


def load_checkpoint(stem) -> tuple[WeightSet, NetworkSpec, dict]:
    stem = Path(stem)
    manifest = read_json(stem.with_suffix(".json"))
    bin_path = stem.with_suffix(".bin")
    if not bin_path.exists():
        raise FileNotFoundError(f"missing file: {bin_path}")
    flat = np.frombuffer(bin_path.read_bytes(), dtype=manifest["dtype"])
    ws = WeightSet()
    for layer in manifest["layers"]:
        n = int(np.prod(layer["shape"]))
        arr = flat[layer["offset"]:layer["offset"] + n].reshape(layer["shape"]).astype(np.float32)
        ws[layer["name"]] = Tensor(arr, True)
    return ws, NetworkSpec.from_dict(manifest["network_spec"]), manifest
