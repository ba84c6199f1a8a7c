"""File formats: LFT1 binary tensors, per-view PNG directories, checkpoints.

LFT1 layout: magic ``LFT1``, u32 rank, rank * u32 dims, then the tensor as
little-endian float32 in canonical C order.

A light field on disk as images is a directory of ``view_{u}_{v}.png`` files
(8-bit RGB) plus ``meta.json`` holding Nv, H, W and the color space tag.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .lightfield import CodedImage, LightField, SensingTensor

_MAGIC = b"LFT1"


class DatasetError(ValueError):
    """A dataset directory is malformed (missing views, bad meta, shape drift)."""


def write_lft(path, tensor: np.ndarray) -> None:
    """Write a tensor in the LFT1 binary format (float32, little endian)."""
    arr = np.ascontiguousarray(np.asarray(tensor), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_lft(path) -> np.ndarray:
    """Read a tensor written by :func:`write_lft`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(fh.read(4 * count), dtype="<f4", count=count)
        if data.size != count:
            raise ValueError(f"{path}: truncated payload")
    return data.reshape(dims).copy()


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def export_views(lf: LightField, directory) -> None:
    """Write a light field as per-view 8-bit PNGs plus meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for u in range(lf.nv):
        for v in range(lf.nv):
            Image.fromarray(_to_uint8(lf.view(u, v))).save(directory / f"view_{u}_{v}.png")
    meta = {
        "nv": lf.nv,
        "height": lf.height,
        "width": lf.width,
        "color_space": "srgb8",
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))


def read_view_dir(directory) -> LightField:
    """Load a light field from a per-view PNG directory.

    Raises DatasetError naming the missing view file or the malformed field.
    """
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{directory}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        nv, h, w = int(meta["nv"]), int(meta["height"]), int(meta["width"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{directory}: malformed meta.json ({exc})") from exc
    data = np.zeros((h, w, nv, nv, 3), dtype=np.float32)
    for u in range(nv):
        for v in range(nv):
            name = f"view_{u}_{v}.png"
            path = directory / name
            if not path.exists():
                raise DatasetError(f"{directory}: missing view file {name}")
            img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
            if img.shape[:2] != (h, w):
                raise DatasetError(
                    f"{directory}: view {name} has shape {img.shape[:2]}, expected {(h, w)}"
                )
            data[:, :, u, v, :] = img
    return LightField(data)


def save_coded_png(image: CodedImage, path) -> None:
    Image.fromarray(_to_uint8(np.clip(image.data, 0.0, 1.0))).save(path)


def save_view_mosaic(lf: LightField, path, gap: int = 2) -> None:
    """Nv x Nv grid of sub-aperture views as one PNG."""
    h, w, nv = lf.height, lf.width, lf.nv
    canvas = np.ones((nv * h + (nv - 1) * gap, nv * w + (nv - 1) * gap, 3), dtype=np.float32)
    for u in range(nv):
        for v in range(nv):
            r, c = u * (h + gap), v * (w + gap)
            canvas[r : r + h, c : c + w] = lf.view(u, v)
    Image.fromarray(_to_uint8(canvas)).save(path)


_HEAT_STOPS = np.array(
    [
        [0.10, 0.05, 0.35],
        [0.15, 0.45, 0.80],
        [0.20, 0.75, 0.55],
        [0.90, 0.85, 0.20],
        [0.95, 0.30, 0.10],
    ]
)


def false_color(values: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map a 2-D array to RGB, warmer colors for larger values."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if vmin is None else vmin
    hi = float(v.max()) if vmax is None else vmax
    t = np.zeros_like(v) if hi <= lo else np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    pos = t * (len(_HEAT_STOPS) - 1)
    idx = np.minimum(pos.astype(np.int64), len(_HEAT_STOPS) - 2)
    frac = (pos - idx)[..., None]
    return (1 - frac) * _HEAT_STOPS[idx] + frac * _HEAT_STOPS[idx + 1]


def save_disparity_png(disparity, path, vmin=None, vmax=None) -> None:
    data = disparity.data if hasattr(disparity, "data") else np.asarray(disparity)
    Image.fromarray(_to_uint8(false_color(data, vmin, vmax))).save(path)


# ---------------------------------------------------------------------------
# checkpoints and dictionaries
# ---------------------------------------------------------------------------


def _safe_name(key: str) -> str:
    return key.replace(".", "_")


def save_checkpoint(directory, params: dict, state: dict, meta: dict) -> None:
    """Parameter tensors as LFT1 files plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": meta, "params": {}, "state": {}}
    for group, tensors in (("params", params), ("state", state)):
        for key, val in tensors.items():
            fname = f"{group}_{_safe_name(key)}.lft"
            write_lft(directory / fname, val)
            manifest[group][key] = {"file": fname, "shape": list(np.shape(val))}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict, dict, dict]:
    """Returns (params, state, meta) from a checkpoint directory."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if manifest_path.is_file() is False and directory.name == "manifest.json":
        directory = directory.parent
        manifest_path = directory / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    params = {k: read_lft(directory / spec["file"]) for k, spec in manifest["params"].items()}
    state = {k: read_lft(directory / spec["file"]) for k, spec in manifest["state"].items()}
    return params, state, manifest["meta"]


def save_dictionary(directory, dictionary, meta: dict) -> None:
    """Atom matrix as LFT1 plus a JSON sidecar (patch size, nv, atom count, lambda)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_lft(directory / "atoms.lft", dictionary.atoms)
    sidecar = dict(meta)
    sidecar.setdefault("n_atoms", dictionary.n_atoms)
    sidecar.setdefault("patch_dim", dictionary.patch_dim)
    (directory / "dictionary.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_dictionary(directory):
    from .sparse import Dictionary

    directory = Path(directory)
    atoms = read_lft(directory / "atoms.lft").astype(np.float64)
    norms = np.linalg.norm(atoms, axis=0)
    norms[norms == 0] = 1.0
    meta = json.loads((directory / "dictionary.json").read_text())
    return Dictionary(atoms / norms), meta


def save_lightfield(path, lf: LightField) -> None:
    write_lft(path, lf.data)


def load_lightfield(path) -> LightField:
    return LightField(read_lft(path))


def save_sensing_tensor(path, phi: SensingTensor) -> None:
    write_lft(path, phi.weights)


def load_sensing_tensor(path) -> SensingTensor:
    return SensingTensor(read_lft(path))
