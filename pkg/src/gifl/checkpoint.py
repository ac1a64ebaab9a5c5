"""Named-array checkpoint archive.

The archive is a zip of ``.npy`` members plus a ``header.json`` member, so it
can also be opened with :func:`numpy.load`. Member order is sorted and every
zip timestamp is pinned, which makes the bytes a pure function of the content.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from gifl.errors import FormatError, VersionError

HEADER = "header.json"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_archive(path, arrays: Mapping[str, np.ndarray], header: Mapping) -> None:
    """Write arrays and a JSON header; identical inputs give identical bytes."""
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["shapes"] = {k: list(np.shape(v)) for k, v in sorted(arrays.items())}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(HEADER, date_time=_EPOCH)
        zf.writestr(info, json.dumps(head, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), buf.getvalue())


def load_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"{path} is not a checkpoint archive") from exc
    with zf:
        names = zf.namelist()
        if HEADER not in names:
            raise FormatError(f"{path} has no {HEADER}")
        header = json.loads(zf.read(HEADER))
        arrays = {}
        for member in names:
            if member == HEADER:
                continue
            with zf.open(member) as fh:
                arrays[member[: -len(".npy")]] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"archive format {header.get('format_version')} != {FORMAT_VERSION}")
    return arrays, header


def check_compatible(header: Mapping, config: Mapping) -> None:
    """Raise VersionError when a checkpoint was written for another config."""
    expected = header.get("config_hash")
    got = config_hash(config)
    if expected != got:
        raise VersionError(f"checkpoint config hash {expected} does not match config hash {got}")
