import hashlib
import os
import struct
import tempfile
import zlib
from pathlib import Path

from .errors import CorruptionError, VersionError


def atomic_write_bytes(path, data: bytes, fsync: bool = True) -> None:
    """Write via a temp file in the same directory and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            if fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def check_container(data: bytes, magic: bytes, version: int, path) -> None:
    """Validate magic, version, and the trailing CRC32 of a model file."""
    if len(data) < 8 or data[:4] != magic:
        raise VersionError(f"{path}: not a {magic.decode()} file (bad magic header)")
    (found,) = struct.unpack_from("<I", data, 4)
    if found != version:
        raise VersionError(f"{path}: unsupported {magic.decode()} version {found} (expected {version})")
    if len(data) < 12:
        raise CorruptionError(f"{path}: truncated file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptionError(f"{path}: checksum mismatch (truncated or corrupted file)")
