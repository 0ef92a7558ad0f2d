import hashlib
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Tuple, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, target)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Wrote {len(payload)} bytes to {target}")
    return target


def atomic_write_all(payloads: Dict[PathLike, bytes]) -> List[Path]:
    """Stage every payload in a temp file, then rename them all into place.

    Nothing is renamed unless every payload was staged.
    """
    staged: List[Tuple[str, Path]] = []
    try:
        for path, payload in payloads.items():
            target = Path(path)
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
            staged.append((tmp_name, target))
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
                f.flush()
                os.fsync(f.fileno())
    except Exception:
        for tmp_name, _ in staged:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
        raise
    for tmp_name, target in staged:
        os.replace(tmp_name, target)
    return [target for _, target in staged]


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def sha256_of(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
