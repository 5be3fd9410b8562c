"""Output helpers shared by the command-line subcommands."""

import hashlib
import logging
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd
import yaml

import config
from src.errors import IoError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.yaml"


def file_digest(path: Union[str, Path]) -> str:
    """SHA-256 of a file, or of every file under a directory in sorted order."""
    path = Path(path)
    digest = hashlib.sha256()
    try:
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for item in files:
            if path.is_dir():
                digest.update(str(item.relative_to(path)).encode("utf-8"))
            with item.open("rb") as handle:
                for block in iter(lambda: handle.read(1 << 20), b""):
                    digest.update(block)
    except OSError as exc:
        raise IoError(f"cannot read {path} for hashing: {exc}") from exc
    return digest.hexdigest()


def _plain(value):
    # yaml.safe_dump only takes builtin types
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


def write_manifest(
    out_dir: Union[str, Path],
    command: str,
    flags: Mapping,
    seed: Optional[int] = None,
    inputs: Iterable[Union[str, Path]] = (),
) -> Path:
    """
    Write manifest.yaml with everything needed to rerun the command.

    No timestamps are recorded, so identical reruns produce identical files.
    """
    out_dir = Path(out_dir)
    manifest: Dict = {
        "command": command,
        "version": config.VERSION,
        "seed": None if seed is None else int(seed),
        "flags": _plain(dict(sorted(flags.items()))),
        "inputs": {str(p): file_digest(p) for p in inputs if p is not None},
    }
    path = out_dir / MANIFEST_FILE
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with path.open("w") as handle:
            yaml.safe_dump(manifest, handle, sort_keys=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_manifest(path: Union[str, Path]) -> Dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    try:
        with path.open() as handle:
            return yaml.safe_load(handle) or {}
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """TSV with 17 significant digits and NA for missing values."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(
            path,
            sep="\t",
            index=False,
            na_rep=config.MISSING_TOKEN,
            float_format=config.FLOAT_FORMAT,
        )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    logger.info("Wrote %s (%d rows)", path, len(frame))
    return path
