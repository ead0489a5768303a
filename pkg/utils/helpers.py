"""
Helper Functions and Utilities
"""
import hashlib
import os
import tempfile
from pathlib import Path
from typing import List, Union

PathLike = Union[str, Path]


def ensure_directory(directory: PathLike) -> Path:
    """
    Ensure directory exists, create if not

    Args:
        directory: Directory path

    Returns:
        The directory as a Path
    """
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Write a file through a temporary sibling and rename it into place

    Readers never observe a half-written artifact.

    Args:
        path: Destination path
        data: File contents

    Returns:
        The destination path
    """
    path = Path(path)
    ensure_directory(path.parent)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Text variant of atomic_write_bytes (UTF-8, LF line endings)"""
    return atomic_write_bytes(path, text.encode('utf-8'))


def file_sha256(path: PathLike, chunk_size: int = 1 << 20) -> str:
    """
    Content hash of a file, used for provenance in stage reports

    Args:
        path: File to hash
        chunk_size: Read size in bytes

    Returns:
        Hex digest
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def parse_float_list(text: str) -> List[float]:
    """
    Parse a comma separated list such as "50,20,8"

    Args:
        text: Comma separated numbers

    Returns:
        List of floats
    """
    items = [item.strip() for item in text.split(',')]
    if not items or any(not item for item in items):
        raise ValueError(f"expected a comma separated list of numbers, got {text!r}")
    return [float(item) for item in items]


def print_separator(char: str = '=', length: int = 70) -> None:
    """Print a separator line"""
    print(char * length)


def print_section_header(title: str) -> None:
    """Print formatted section header"""
    print_separator()
    print(f"  {title}")
    print_separator()
