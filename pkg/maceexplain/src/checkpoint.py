"""
Archive format shared by MACE checkpoints, toy black boxes and dataset caches.

An archive is a zip file holding one ``manifest.json`` entry (structured
text header) and one ``.npy`` entry per named array. Entries are written in
sorted order with a fixed timestamp, so equal content gives equal bytes.
"""
import io
import json
import os
import zipfile
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from maceexplain.src.errors import CheckpointError

MANIFEST_NAME = "manifest.json"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _write_entry(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    archive.writestr(info, data)


def save_archive(
    path: str,
    arrays: Mapping[str, np.ndarray],
    manifest: Mapping[str, Any],
) -> None:
    """
    Writes named arrays and a manifest into an archive.

    Args:
        path: Target file path; parent directories are created
        arrays: Mapping from stable array names to arrays
        manifest: JSON-serializable metadata

    Raises:
        CheckpointError: If the file cannot be written
    """
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        with zipfile.ZipFile(path, "w") as archive:
            header = json.dumps(manifest, indent=2, sort_keys=True)
            _write_entry(archive, MANIFEST_NAME, header.encode("utf-8"))
            for name in sorted(arrays):
                buffer = io.BytesIO()
                np.lib.format.write_array(
                    buffer,
                    np.ascontiguousarray(arrays[name]),
                    allow_pickle=False,
                )
                _write_entry(archive, f"{name}.npy", buffer.getvalue())
    except OSError as e:
        raise CheckpointError(f"Could not write archive {path}: {e}")


def load_archive(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Reads an archive written by save_archive.

    Returns:
        Tuple of (arrays by name, manifest)

    Raises:
        CheckpointError: If the file is missing or malformed
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as archive:
            names = archive.namelist()
            if MANIFEST_NAME not in names:
                raise CheckpointError(f"Archive {path} has no manifest")
            manifest = json.loads(archive.read(MANIFEST_NAME).decode("utf-8"))
            arrays = {}
            for name in names:
                if not name.endswith(".npy"):
                    continue
                data = io.BytesIO(archive.read(name))
                arrays[name[:-4]] = np.lib.format.read_array(
                    data, allow_pickle=False
                )
    except (zipfile.BadZipFile, json.JSONDecodeError, ValueError) as e:
        raise CheckpointError(f"Malformed archive {path}: {e}")
    return arrays, manifest
