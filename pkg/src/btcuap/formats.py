"""Binary tensor files (BTCT), named-tensor archives (BTCA) and text manifests.

BTCT record, all integers little-endian::

    b"BTCT" | u32 version=1 | u32 rank | rank x u32 dims | u8 dtype=0 (f32) | f32 payload

A BTCA archive is ``b"BTCA"`` followed by entries of
``u16 name length | UTF-8 name | BTCT record`` until end of file.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"BTCT"
ARCHIVE_MAGIC = b"BTCA"
VERSION = 1
DTYPE_F32 = 0
MANIFEST_HEADER = "#btc-manifest v1"
KINDS = ("clip", "image")


class FormatError(ValueError):
    """A file does not parse as the expected format."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ManifestError(FormatError):
    pass


# ---------------------------------------------------------------- tensors


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    if arr.ndim > 4:
        raise ValueError(f"rank {arr.ndim} exceeds 4")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    header = TENSOR_MAGIC + struct.pack(f"<II{arr.ndim}IB", VERSION, arr.ndim, *arr.shape, DTYPE_F32)
    return header + arr.astype("<f4", copy=False).tobytes(order="C")


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise TruncatedError(f"short {what}: expected {n} bytes, got {len(data)}")
    return data


def read_tensor_record(buf) -> np.ndarray:
    magic = buf.read(4)
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic: expected {TENSOR_MAGIC!r}, got {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version: {version} (field 'version', expected {VERSION})")
    (rank,) = struct.unpack("<I", _read_exact(buf, 4, "rank"))
    if rank > 4:
        raise FormatError(f"bad rank: {rank} (field 'rank', max 4)")
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, "dims"))
    (dtype,) = struct.unpack("<B", _read_exact(buf, 1, "dtype"))
    if dtype != DTYPE_F32:
        raise FormatError(f"bad dtype: {dtype} (field 'dtype', expected {DTYPE_F32})")
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(buf, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = read_tensor_record(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return arr


def serialize_tensor(t, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def deserialize_tensor(path) -> np.ndarray:
    try:
        return decode_tensor(Path(path).read_bytes())
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


# ---------------------------------------------------------------- archives


def encode_archive(tensors: dict) -> bytes:
    parts = [ARCHIVE_MAGIC]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw + encode_tensor(t))
    return b"".join(parts)


def decode_archive(data: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != ARCHIVE_MAGIC:
        raise BadMagicError(f"bad magic: expected {ARCHIVE_MAGIC!r}, got {magic!r}")
    out: dict[str, np.ndarray] = {}
    while True:
        head = buf.read(2)
        if not head:
            return out
        if len(head) != 2:
            raise TruncatedError("short name length")
        (n,) = struct.unpack("<H", head)
        try:
            name = _read_exact(buf, n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        try:
            out[name] = read_tensor_record(buf)
        except FormatError as exc:
            raise type(exc)(f"tensor {name!r}: {exc}") from None


def write_archive(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_archive(tensors))


def read_archive(path) -> dict[str, np.ndarray]:
    try:
        return decode_archive(Path(path).read_bytes())
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    path: str
    label: int
    kind: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    seed: int | None = None
    params: dict[str, str] = field(default_factory=dict)

    def of_kind(self, kind: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.kind == kind]

    @property
    def class_count(self) -> int:
        return max(e.label for e in self.entries) + 1

    def load_clips(self):
        from .data import load_clip

        for e in self.of_kind("clip"):
            yield load_clip(self.root / e.path, e.label)

    def load_images(self) -> list[np.ndarray]:
        return [deserialize_tensor(self.root / e.path) for e in self.of_kind("image")]


def format_manifest(manifest: DatasetManifest) -> str:
    lines = [MANIFEST_HEADER]
    if manifest.seed is not None:
        lines.append(f"# seed = {manifest.seed}")
    for key, value in manifest.params.items():
        lines.append(f"# {key} = {value}")
    for e in manifest.entries:
        lines.append(f"{e.path}\t{e.label}\t{e.kind}")
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


def parse_manifest(text: str, root: Path) -> DatasetManifest:
    lines = text.split("\n")
    if not lines or lines[0].rstrip("\r") != MANIFEST_HEADER:
        raise ManifestError(f"line 1: expected header {MANIFEST_HEADER!r}")
    entries: list[ManifestEntry] = []
    seed = None
    params: dict[str, str] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                key, value = key.strip(), value.strip()
                if key == "seed":
                    try:
                        seed = int(value)
                    except ValueError:
                        raise ManifestError(f"line {lineno}: seed {value!r} is not an integer") from None
                else:
                    params[key] = value
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        rel, label, kind = fields
        try:
            label_i = int(label)
        except ValueError:
            raise ManifestError(f"line {lineno}: label {label!r} is not an integer") from None
        if label_i < 0:
            raise ManifestError(f"line {lineno}: negative label {label_i}")
        if kind not in KINDS:
            raise ManifestError(f"line {lineno}: kind {kind!r} not in {KINDS}")
        if not rel:
            raise ManifestError(f"line {lineno}: empty path")
        entries.append(ManifestEntry(rel, label_i, kind))
    if not entries:
        raise ManifestError("empty dataset")
    return DatasetManifest(Path(root), entries, seed, params)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError:
        raise ManifestError(f"{path}: not UTF-8 text") from None
    manifest = parse_manifest(text, path.parent)
    if check_files:
        missing = [e.path for e in manifest.entries if not (manifest.root / e.path).is_file()]
        if missing:
            shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
            raise ManifestError(f"{path}: {len(missing)} listed file(s) missing: {shown}")
    return manifest
