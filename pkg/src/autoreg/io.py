"""On-disk formats: ARVF volumes, JSON manifests, checkpoint directories.

ARVF layout (fixed little-endian regardless of host):
  magic 'ARVF' | u32 version=1 | u8 dtype (0=f32, 1=f64, 2=i32) |
  u8 ndim | u8 channels | u8 reserved | ndim x u32 shape |
  raw data, C-order, channel-major (channel index slowest).

Scalar and label fields are stored with channels=1; vector fields carry
channels == ndim. Everything here works on numpy arrays; torch conversion
happens at the call sites.
"""

import json
import os
import struct

import numpy as np

from .exceptions import ContractError, FormatError

MAGIC = b"ARVF"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_CODE_FOR_KIND = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


def save_volume(path, data, kind="scalar"):
    """Write a field to an ARVF file.

    kind: 'scalar' or 'labels' for (d0, ..) arrays, 'vector' for
    (ndim, d0, ..) arrays whose leading axis must equal ndim.
    """
    arr = np.asarray(data)
    if kind == "vector":
        ndim = arr.ndim - 1
        channels = arr.shape[0]
        if channels != ndim:
            raise ContractError(
                "vector field needs channels == ndim, got %d channels for %dd"
                % (channels, ndim))
        spatial = arr.shape[1:]
    elif kind in ("scalar", "labels"):
        ndim = arr.ndim
        channels = 1
        spatial = arr.shape
    else:
        raise ContractError("unknown volume kind %r" % (kind,))
    if ndim not in (2, 3):
        raise ContractError("only 2d/3d volumes supported, got ndim=%d" % ndim)

    if kind == "labels":
        arr = arr.astype("<i4", copy=False)
    elif arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    else:
        arr = arr.astype("<f8", copy=False)
    code = _CODE_FOR_KIND[np.dtype(arr.dtype.newbyteorder("="))]

    header = struct.pack("<4sIBBBB", MAGIC, VERSION, code, ndim, channels, 0)
    header += struct.pack("<%dI" % ndim, *spatial)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def load_volume(path):
    """Read an ARVF file; returns (array, kind).

    Vector fields come back as (ndim, *shape) float arrays, scalars as
    (*shape) floats, labels as (*shape) int32.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError("cannot read volume %s: %s" % (path, exc)) from exc
    if len(blob) < 12:
        raise FormatError("%s: truncated header (%d bytes)" % (path, len(blob)))
    magic, version, code, ndim, channels, _ = struct.unpack_from("<4sIBBBB", blob, 0)
    if magic != MAGIC:
        raise FormatError("%s: bad magic %r" % (path, magic))
    if version != VERSION:
        raise FormatError("%s: unsupported version %d" % (path, version))
    if code not in _DTYPE_CODES:
        raise FormatError("%s: unknown dtype code %d" % (path, code))
    if ndim not in (2, 3):
        raise FormatError("%s: bad ndim %d" % (path, ndim))
    off = 12
    if len(blob) < off + 4 * ndim:
        raise FormatError("%s: truncated shape header" % path)
    shape = struct.unpack_from("<%dI" % ndim, blob, off)
    off += 4 * ndim
    if channels == 1:
        kind = "labels" if code == 2 else "scalar"
        full_shape = shape
    elif channels == ndim:
        kind = "vector"
        full_shape = (channels,) + shape
    else:
        raise FormatError("%s: channels=%d invalid for ndim=%d"
                          % (path, channels, ndim))
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(full_shape))
    expected = off + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError("%s: data length %d, header promises %d bytes"
                          % (path, len(blob), expected))
    arr = np.frombuffer(blob, dtype=dtype, offset=off).reshape(full_shape)
    # frombuffer views are read-only; torch.from_numpy needs writable memory
    return arr.copy(), kind


def dump_json(path, obj):
    """Deterministic JSON writer: sorted keys, repr-exact floats, newline EOF."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError("cannot read %s: %s" % (path, exc)) from exc
    except json.JSONDecodeError as exc:
        raise FormatError("%s is not valid JSON: %s" % (path, exc)) from exc


def save_checkpoint(ckpt_dir, tensors, state):
    """Write a checkpoint directory: manifest.json plus one ARVF per tensor.

    tensors: dict name -> numpy array (saved as scalar/vector-agnostic blobs:
    arrays are stored flat with their shape in the manifest so any rank
    round-trips; the ARVF container itself carries 2d/3d payloads, so tensors
    are packed as 2d (1, n) scalars).
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    index = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        fname = _tensor_filename(name)
        flat = arr.astype("<f8", copy=False).reshape(1, -1)
        save_volume(os.path.join(ckpt_dir, fname), flat, kind="scalar")
        index[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": "autoreg-checkpoint", "version": 1,
                "tensors": index, "state": state}
    dump_json(os.path.join(ckpt_dir, "manifest.json"), manifest)


def load_checkpoint(ckpt_dir):
    """Read a checkpoint directory; returns (tensors dict, state dict)."""
    manifest = load_json(os.path.join(ckpt_dir, "manifest.json"))
    if manifest.get("format") != "autoreg-checkpoint":
        raise FormatError("%s: not a checkpoint manifest" % ckpt_dir)
    tensors = {}
    for name, entry in manifest["tensors"].items():
        fpath = os.path.join(ckpt_dir, entry["file"])
        if not os.path.exists(fpath):
            raise FormatError("checkpoint tensor %s missing file %s"
                              % (name, entry["file"]))
        arr, _ = load_volume(fpath)
        tensors[name] = arr.reshape(entry["shape"])
    return tensors, manifest["state"]


def _tensor_filename(name):
    safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in name)
    return safe + ".arvf"
