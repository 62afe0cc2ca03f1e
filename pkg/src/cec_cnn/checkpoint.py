"""Checkpoint persistence: a text manifest plus one little-endian float32 blob.

Layout for a checkpoint stem ``run/model``::

    run/model.manifest   header lines ("key value") then one line per tensor:
                         "tensor <name> <d0,d1,...> <byte offset> <byte length>"
    run/model.bin        raw float32 ('<f4') data, tensors back to back
    run/model.arch.ini   the ArchitectureSpec the weights belong to
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .arch import ArchitectureSpec, Model, build_network

FORMAT = "float32-le"
_DTYPE = np.dtype("<f4")


class SpecHashMismatch(ValueError):
    pass


def _paths(stem) -> Tuple[Path, Path, Path]:
    stem = Path(stem)
    return (stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin"),
            stem.with_name(stem.name + ".arch.ini"))


def save_checkpoint(model: Model, stem, meta: Optional[Dict[str, str]] = None) -> Path:
    manifest, blob, arch = _paths(stem)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# cec_cnn checkpoint", f"format {FORMAT}", f"blob {blob.name}",
             f"spec_hash {model.spec.spec_hash()}",
             f"bn_batches {min((bn.num_batches_tracked for bn in model.batchnorms()), default=0)}"]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k} {v}")
    offset = 0
    with open(blob, "wb") as fh:
        for name, arr in model.state():
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            fh.write(raw)
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"tensor {name} {shape} {offset} {len(raw)}")
            offset += len(raw)
    manifest.write_text("\n".join(lines) + "\n")
    arch.write_text(model.spec.to_ini())
    return manifest


def read_manifest(stem) -> Tuple[Dict[str, str], Dict[str, Tuple[Tuple[int, ...], int, int]]]:
    manifest, _, _ = _paths(stem)
    header: Dict[str, str] = {}
    entries: Dict[str, Tuple[Tuple[int, ...], int, int]] = {}
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("tensor "):
            _, name, shape, off, length = line.split()
            dims = tuple(int(d) for d in shape.split(",") if d)
            entries[name] = (dims, int(off), int(length))
        else:
            key, _, value = line.partition(" ")
            header[key] = value
    return header, entries


def load_checkpoint(stem, spec: Optional[ArchitectureSpec] = None) -> Model:
    """Rebuild the model recorded at ``stem`` and load its weights.

    When ``spec`` is given it must hash to the value recorded in the manifest.
    """
    manifest, blob, arch = _paths(stem)
    header, entries = read_manifest(stem)
    if header.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    stored = ArchitectureSpec.from_ini(arch.read_text())
    recorded = header.get("spec_hash")
    if stored.spec_hash() != recorded:
        raise SpecHashMismatch(f"{arch} does not match the manifest's spec hash {recorded}")
    if spec is not None and spec.spec_hash() != recorded:
        raise SpecHashMismatch(f"architecture hash {spec.spec_hash()} differs from checkpoint {recorded}")
    model = build_network(stored, seed=0)
    data = blob.read_bytes()
    state = dict(model.state())
    if set(state) != set(entries):
        missing = sorted(set(state) ^ set(entries))
        raise ValueError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for name, target in state.items():
        dims, off, length = entries[name]
        if tuple(target.shape) != dims:
            raise ValueError(f"{name}: checkpoint shape {dims}, model shape {target.shape}")
        target[...] = np.frombuffer(data, dtype=_DTYPE, count=length // 4, offset=off).reshape(dims)
    for bn in model.batchnorms():
        bn.num_batches_tracked = int(header.get("bn_batches", "0"))
    return model
