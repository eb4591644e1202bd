"""Byte-reproducible file writers."""
from __future__ import annotations

import io
import os
import zipfile
from pathlib import Path

import numpy as np

# np.savez stamps members with the wall clock; a fixed stamp keeps reruns identical
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_npz(path, arrays: dict) -> None:
    """Write ``arrays`` as an uncompressed ``.npz`` loadable by ``np.load``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


def write_text(path, text: str) -> None:
    """Atomic text write (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
