"""TPD1 binary tensors, dataset directories and model files.

TPD1 layout (all integers little-endian)::

    b"TPD1" | u8 order N | N x u32 dims | mask bits | N-d float64 values

The mask is packed one bit per entry in linear order (mode-1 fastest),
least-significant bit first, padded with zero bits to a whole byte.  Values
are written for every position; unobserved positions are written as 0.0.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import MaskedTensor

MAGIC = b"TPD1"


def encode_tpd1(t: MaskedTensor) -> bytes:
    dims = t.shape
    if len(dims) > 255:
        raise ValueError("tensor order does not fit in one byte")
    header = MAGIC + struct.pack(f"<B{len(dims)}I", len(dims), *dims)
    bits = np.packbits(t.mask.ravel(order="F"), bitorder="little")
    values = np.where(t.mask, t.values, 0.0).ravel(order="F").astype("<f8")
    return header + bits.tobytes() + values.tobytes()


def decode_tpd1(data: bytes) -> MaskedTensor:
    if data[:4] != MAGIC:
        raise ValueError("not a TPD1 stream (bad magic)")
    order = data[4]
    pos = 5
    dims = struct.unpack_from(f"<{order}I", data, pos)
    pos += 4 * order
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = (count + 7) // 8
    expected = pos + nbytes + 8 * count
    if len(data) != expected:
        raise ValueError(f"TPD1 payload has {len(data)} bytes, expected {expected}")
    bits = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos)
    mask = np.unpackbits(bits, count=count, bitorder="little").astype(bool)
    values = np.frombuffer(data, dtype="<f8", count=count, offset=pos + nbytes)
    return MaskedTensor(values.reshape(dims, order="F").astype(float),
                        mask.reshape(dims, order="F"))


def write_tpd1(path, t: MaskedTensor | np.ndarray) -> None:
    if not isinstance(t, MaskedTensor):
        t = MaskedTensor.full(t)
    Path(path).write_bytes(encode_tpd1(t))


def read_tpd1(path) -> MaskedTensor:
    return decode_tpd1(Path(path).read_bytes())


# --- dataset directories ---------------------------------------------------

def save_dataset(directory, assets, manifest: dict) -> Path:
    """Write ``manifest.json``, ``asset_<m>.tpd1`` and ``ttf.csv``.

    `assets` is a sequence of :class:`~tdr.prognostics.AssetStream`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m, a in enumerate(assets):
        write_tpd1(directory / f"asset_{m}.tpd1", MaskedTensor(a.images, a.mask))
    with open(directory / "ttf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["asset_id", "ttf"])
        for m, a in enumerate(assets):
            w.writerow([m, "" if a.ttf is None else repr(float(a.ttf))])
    manifest = dict(manifest)
    manifest["asset_count"] = len(assets)
    if assets:
        manifest.setdefault("dims", [int(d) for d in assets[0].images.shape[:2]])
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory):
    """Return ``(assets, manifest)`` from a dataset directory."""
    from .prognostics import AssetStream

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    ttf = {}
    with open(directory / "ttf.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            ttf[int(row["asset_id"])] = float(row["ttf"]) if row["ttf"] else None
    assets = []
    for m in range(int(manifest["asset_count"])):
        t = read_tpd1(directory / f"asset_{m}.tpd1")
        assets.append(AssetStream(t.values, t.mask, ttf.get(m)))
    return assets, manifest


# --- models ------------------------------------------------------------------

def lls_to_dict(model) -> dict:
    return {
        "family": model.family.name,
        "gamma0": float(model.gamma0),
        "gamma1": [float(g) for g in model.gamma1],
        "sigma": float(model.sigma),
    }


def lls_from_dict(d: dict):
    from .lls import Family, LlsModel

    return LlsModel(Family.parse(d["family"]), float(d["gamma0"]),
                    np.asarray(d["gamma1"], dtype=float), float(d["sigma"]))


def save_model(directory, model) -> Path:
    """Write a :class:`~tdr.prognostics.PrognosticModel` as JSON + TPD1 factors."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, u in enumerate(model.factors, start=1):
        name = f"U{n}.tpd1"
        write_tpd1(directory / name, u)
        paths.append(name)
    doc = {
        "subspace": list(model.subspace),
        "alpha_used": model.alpha_used,
        "family": model.family.name,
        "lls": lls_to_dict(model.lls),
        "factors": paths,
    }
    (directory / "model.json").write_text(json.dumps(doc, indent=2))
    return directory / "model.json"


def load_model(path):
    from .lls import Family
    from .prognostics import PrognosticModel

    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    doc = json.loads(path.read_text())
    factors = tuple(read_tpd1(path.parent / p).values for p in doc["factors"])
    return PrognosticModel(
        factors=factors,
        lls=lls_from_dict(doc["lls"]),
        subspace=tuple(int(p) for p in doc["subspace"]),
        alpha_used=float(doc["alpha_used"]),
        family=Family.parse(doc["family"]),
    )
