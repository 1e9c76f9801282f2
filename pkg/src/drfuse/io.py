"""File formats: DRFT binary tensors, PGM/PPM frames, manifests and checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DRFT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def encode_drft(x) -> bytes:
    arr = _as_numpy(x)
    if arr.dtype not in _CODES:
        raise FormatError(f"DRFT stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank too large for DRFT")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


def decode_drft(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("not a DRFT tensor (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported DRFT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown DRFT dtype code {code}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated DRFT header")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + count * dtype.itemsize:
        raise FormatError("DRFT payload size does not match its header")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, x) -> None:
    Path(path).write_bytes(encode_drft(x))


def load_tensor(path) -> torch.Tensor:
    return torch.from_numpy(decode_drft(Path(path).read_bytes()).copy())


# -- 8-bit netpbm frames ------------------------------------------------------


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img) -> None:
    img = _as_numpy(img)
    if img.ndim != 2:
        raise FormatError("PGM frames are 2-D")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_u8(img).tobytes())


def write_ppm(path, img) -> None:
    """Write an RGB frame; a 2-D frame is replicated into three channels."""
    img = _as_numpy(img)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise FormatError("PPM frames are HxWx3")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + _to_u8(img).tobytes())


def _read_netpbm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode())
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError("only 8-bit netpbm is supported")
    return magic, w, h, data[pos + 1 :]


def read_pgm(path) -> np.ndarray:
    magic, w, h, raw = _read_netpbm(path)
    if magic != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    return np.frombuffer(raw[: w * h], dtype=np.uint8).reshape(h, w) / 255.0


def read_ppm(path) -> np.ndarray:
    magic, w, h, raw = _read_netpbm(path)
    if magic != "P6":
        raise FormatError(f"{path}: not a binary PPM")
    return np.frombuffer(raw[: w * h * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0


def read_frame(path) -> np.ndarray:
    """Read a PGM or PPM frame as a 2-D luminance array in [0, 1]."""
    magic, *_ = _read_netpbm(path)
    if magic == "P5":
        return read_pgm(path)
    rgb = read_ppm(path)
    return rgb @ np.array([0.299, 0.587, 0.114])


# -- manifests ----------------------------------------------------------------


def write_manifest(path, entries: dict[str, list[str]], meta: dict[str, str] | None = None) -> None:
    """Manifest text: ``# key = value`` meta lines, then ``kind<TAB>relpath`` rows."""
    lines = [f"# {k} = {v}" for k, v in (meta or {}).items()]
    for kind, paths in entries.items():
        lines.extend(f"{kind}\t{p}" for p in paths)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[dict[str, list[str]], dict[str, str]]:
    entries: dict[str, list[str]] = {}
    meta: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        kind, sep, rel = line.partition("\t")
        if not sep:
            raise FormatError(f"{path}: malformed manifest line {raw!r}")
        entries.setdefault(kind, []).append(rel)
    return entries, meta


# -- checkpoints --------------------------------------------------------------


def save_state_dict(directory, state: dict[str, torch.Tensor], extra: dict[str, str] | None = None) -> None:
    """Directory of DRFT tensors plus ``manifest.txt`` (name, file, shape)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k} = {v}" for k, v in (extra or {}).items()]
    for i, (name, value) in enumerate(state.items()):
        fname = f"t{i:04d}.drft"
        save_tensor(directory / fname, value)
        shape = "x".join(str(s) for s in value.shape) or "scalar"
        lines.append(f"{name}\t{fname}\t{shape}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_state_dict(directory) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    directory = Path(directory)
    mpath = directory / "manifest.txt"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    state, extra = {}, {}
    for raw in mpath.read_text().splitlines():
        if not raw.strip():
            continue
        if raw.startswith("#"):
            key, _, value = raw[1:].partition("=")
            extra[key.strip()] = value.strip()
            continue
        name, fname, shape = raw.split("\t")
        t = load_tensor(directory / fname)
        expected = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        if tuple(t.shape) != expected:
            raise FormatError(f"{name}: shape {tuple(t.shape)} != manifest {expected}")
        state[name] = t
    return state, extra
