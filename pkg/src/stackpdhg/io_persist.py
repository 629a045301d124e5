"""Raw volume files with JSON sidecars, and windowed 16-bit PNG export.

A volume ``name.vol`` holds the values as little-endian IEEE floats with x
(or, for sinograms, the detector bin) varying fastest.  ``name.json``
describes it; see ``docs/formats.md`` for the field list.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .geometry import GridSpec, ImageGrid, ScanGeometry, Sinogram

__all__ = ["VolumeFormatError", "write_volume", "read_volume", "sidecar_path", "export_png",
           "write_json"]

FORMAT = "stackpdhg-volume"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class VolumeFormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_json(path, obj):
    """Deterministic JSON (sorted keys, trailing newline)."""
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_volume(path, img, dtype: str = "float64"):
    """Write an :class:`ImageGrid` or :class:`Sinogram` to ``path`` (.vol)
    plus its sidecar.  ``float32`` output rounds the values."""
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    path = Path(path)
    if isinstance(img, ImageGrid):
        header = {"kind": "image", "dims": list(img.dims), "spacing": list(img.spacing),
                  "origin": list(img.origin), "units": "1/cm"}
    elif isinstance(img, Sinogram):
        header = {"kind": "sinogram", "dims": list(img.values.shape[::-1]),
                  "geometry": img.geometry.to_dict(), "units": "line integral"}
    else:
        raise TypeError("write_volume takes an ImageGrid or a Sinogram")
    header.update(format=FORMAT, version=VERSION, dtype=dtype, byte_order="little",
                  order="x-fastest", file=path.name)
    payload = np.ascontiguousarray(img.values, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    write_json(sidecar_path(path), header)


def read_volume(path):
    """Read a volume written by :func:`write_volume`.  The header and payload
    length are validated before any array is built."""
    path = Path(path)
    side = sidecar_path(path)
    try:
        with open(side) as fh:
            header = json.load(fh)
    except FileNotFoundError:
        raise VolumeFormatError(f"missing sidecar {side}") from None
    except json.JSONDecodeError as err:
        raise VolumeFormatError(f"malformed header {side}: {err}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise VolumeFormatError(f"{side} is not a {FORMAT} header")
    for key in ("kind", "dims", "dtype", "byte_order"):
        if key not in header:
            raise VolumeFormatError(f"header lacks {key!r}")
    if header["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {header['dtype']!r}")
    if header["byte_order"] != "little":
        raise VolumeFormatError("only little-endian payloads are supported")
    dims = header["dims"]
    if not isinstance(dims, list) or not all(isinstance(n, int) and n > 0 for n in dims):
        raise VolumeFormatError(f"bad dims {dims!r}")
    dt = np.dtype(_DTYPES[header["dtype"]])
    expected = int(np.prod(dims)) * dt.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise VolumeFormatError(f"payload is {actual} bytes, header implies {expected}")
    values = np.fromfile(path, dtype=dt).astype(np.float64).reshape(dims[::-1])
    if header["kind"] == "image":
        grid = GridSpec(tuple(dims), tuple(header["spacing"]), tuple(header["origin"]))
        return ImageGrid(grid, values)
    if header["kind"] == "sinogram":
        geom = ScanGeometry.from_dict(header["geometry"])
        if tuple(dims[::-1]) != geom.shape:
            raise VolumeFormatError("sinogram dims disagree with its geometry")
        return Sinogram(geom, values)
    raise VolumeFormatError(f"unknown kind {header['kind']!r}")


def export_png(img: ImageGrid, window, path, slice_axis: str | None = None,
               index: int | None = None):
    """16-bit grayscale PNG, ``lo -> 0`` and ``hi -> 65535`` with clamping.

    Columns follow the faster of the two displayed axes and the top row
    holds the largest coordinate of the slower one (z, or y for a z slice).  3-D images need ``slice_axis`` and
    ``index``.
    """
    from PIL import Image

    lo, hi = (float(v) for v in window)
    if not hi > lo:
        raise ValueError("window needs lo < hi")
    vals = img.values
    if img.grid.ndim == 3:
        if slice_axis is None or index is None:
            raise ValueError("3-D images need a slice axis and index")
        ax = img.grid.array_axis(slice_axis)
        if not 0 <= index < vals.shape[ax]:
            raise IndexError(f"slice {index} out of range along {slice_axis}")
        vals = np.take(vals, index, axis=ax)
    vals = vals[::-1]
    pix = np.rint(np.clip((vals - lo) / (hi - lo), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(np.ascontiguousarray(pix)).save(path, format="PNG")
