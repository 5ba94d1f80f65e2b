"""Binary snapshots of fields, trajectories and sample streams.

Layout::

    b"FRP4SNAP" | uint16 version | uint32 header length | orjson header
    | little-endian f64 payload (arrays in header order) | sha256 of all preceding bytes

Complex arrays are stored as two real arrays ``name:re`` / ``name:im``.
"""

import hashlib
import logging
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import orjson

from models.diagrams import Line, Monomial, Poly
from models.errors import SnapshotError
from models.flow import CumulantTrajectory, KernelTrajectory
from models.lattice import Field, LatticeSpec, MassFracParams
from models.report import SnapshotHeader, SnapshotKind
from models.simulation import SampleStream

logger = logging.getLogger(__name__)

MAGIC = b"FRP4SNAP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")
_DIGEST = 32

Snapshot = Field | KernelTrajectory | CumulantTrajectory | SampleStream


# --- symbolic components ------------------------------------------------------------------


def _encode_monomial(mono: Monomial) -> list:
    return [mono.n_psi, mono.n_xi, [[line.op, _encode_monomial(line.body)] for line in mono.lines]]


def _decode_monomial(data: list) -> Monomial:
    n_psi, n_xi, lines = data
    return Monomial(n_psi, n_xi, tuple(Line(op, _decode_monomial(body)) for op, body in lines))


def encode_poly(poly: Poly) -> list:
    return [[_encode_monomial(m), c] for m, c in sorted(poly.terms.items())]


def decode_poly(data: list) -> Poly:
    return Poly({_decode_monomial(m): float(c) for m, c in data})


# --- raw container ------------------------------------------------------------------------


def _split_complex(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, array in arrays.items():
        if np.iscomplexobj(array):
            out[f"{name}:re"], out[f"{name}:im"] = array.real, array.imag
        else:
            out[name] = np.asarray(array, dtype=float)
    return out


def _join_complex(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, array in arrays.items():
        if name.endswith(":im"):
            continue
        if name.endswith(":re"):
            base = name[:-3]
            joined = np.empty(array.shape, dtype=complex)
            joined.real, joined.imag = array, arrays[f"{base}:im"]
            out[base] = joined
        else:
            out[name] = array
    return out


def write_raw(
    path: Path,
    kind: SnapshotKind,
    lattice: LatticeSpec,
    arrays: dict[str, np.ndarray],
    meta: dict[str, Any],
) -> Path:
    """Write one snapshot atomically (temp file, then rename)."""
    arrays = _split_complex(arrays)
    header = SnapshotHeader(
        kind=kind,
        version=FORMAT_VERSION,
        lattice=lattice,
        arrays={name: list(a.shape) for name, a in arrays.items()},
        meta=meta,
    )
    header_bytes = orjson.dumps(header.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)
    body = b"".join(
        [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)), header_bytes]
        + [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values()]
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)
    logger.info("snapshot written: %s (%s, %d bytes)", path, kind, len(body) + _DIGEST)
    return path


def read_raw(path: Path) -> tuple[SnapshotHeader, dict[str, np.ndarray]]:
    """Read and verify a snapshot; nothing is built unless every check passes.

    Raises:
        SnapshotError: bad magic, unsupported version, truncation or checksum mismatch
    """
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size + _DIGEST:
        raise SnapshotError(f"{path}: truncated ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotError(f"{path}: not a snapshot (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise SnapshotError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise SnapshotError(f"{path}: checksum mismatch (truncated or corrupted)")

    start = _PREFIX.size + header_len
    try:
        header = SnapshotHeader.model_validate(orjson.loads(body[_PREFIX.size:start]))
    except ValueError as exc:
        raise SnapshotError(f"{path}: unreadable header ({exc})") from exc
    sizes = {name: int(np.prod(shape)) for name, shape in header.arrays.items()}
    if len(body) - start != 8 * sum(sizes.values()):
        raise SnapshotError(f"{path}: payload length does not match the header")

    arrays = {}
    offset = start
    for name, shape in header.arrays.items():
        flat = np.frombuffer(body, dtype="<f8", count=sizes[name], offset=offset)
        arrays[name] = flat.reshape(shape).astype(float)
        offset += 8 * sizes[name]
    return header, _join_complex(arrays)


# --- typed snapshots ----------------------------------------------------------------------


def persist_snapshot(obj: Snapshot, path: Path | str) -> Path:
    """Persist a field, kernel or cumulant trajectory, or sample stream.

    Args:
        obj: Object to write
        path: Destination file

    Returns:
        The written path
    """
    path = Path(path)
    if isinstance(obj, Field):
        return write_raw(path, "field", obj.lattice, {"values": obj.values}, {"kind": obj.kind})
    if isinstance(obj, KernelTrajectory):
        arrays = {"sigmas": obj.sigmas}
        if obj.g_small is not None:
            arrays["g_small"] = obj.g_small
        meta = {
            "mass": obj.mass.model_dump(),
            "lam": obj.lam,
            "r_bar": obj.r_bar,
            "counterterms": {str(k): v for k, v in obj.counterterms.items()},
            "ell_bar": obj.ell_bar,
            "integrator": obj.integrator,
            "box_overflow": obj.box_overflow,
            "components": {f"{e},{k}": encode_poly(p) for (e, k), p in obj.components.items()},
        }
        return write_raw(path, "kernel-trajectory", obj.lattice, arrays, meta)
    if isinstance(obj, CumulantTrajectory):
        arrays = {"sigmas": obj.sigmas, "line_symbol": obj.line_symbol}
        arrays.update({f"local_means/{ell}": v for ell, v in obj.local_means.items()})
        arrays.update({f"mean_symbols/{ell}": v for ell, v in obj.mean_symbols.items()})
        meta = {
            "mass": obj.mass.model_dump(),
            "lam": obj.lam,
            "r_bar": obj.r_bar,
            "ell_bar": obj.ell_bar,
            "counterterms": {str(k): v for k, v in obj.counterterms.items()},
            "parity_zero_blocks": obj.parity_zero_blocks,
            "per_octave": obj.per_octave,
            "components": obj.components,
            "box_overflow": obj.box_overflow,
        }
        return write_raw(path, "cumulant-trajectory", obj.lattice, arrays, meta)
    if isinstance(obj, SampleStream):
        arrays = {"values": obj.values}
        arrays.update({f"observables/{name}": v for name, v in obj.observables.items()})
        meta = {"seed": obj.seed, "stream_id": obj.stream_id, "normalization": obj.normalization}
        return write_raw(path, "sample-stream", obj.lattice, arrays, meta)
    raise TypeError(f"cannot snapshot {type(obj).__name__}")


def _group(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def load_snapshot(path: Path | str, expect: SnapshotKind | None = None) -> Snapshot:
    """Load a snapshot written by ``persist_snapshot``.

    Raises:
        SnapshotError: verification failed, or the kind differs from ``expect``
    """
    header, arrays = read_raw(Path(path))
    if expect is not None and header.kind != expect:
        raise SnapshotError(f"{path}: holds a {header.kind} snapshot, expected {expect}")
    meta, lat = header.meta, header.lattice
    if header.kind == "field":
        return Field(lattice=lat, values=arrays["values"], kind=meta["kind"])
    if header.kind == "kernel-trajectory":
        return KernelTrajectory(
            lattice=lat,
            mass=MassFracParams(**meta["mass"]),
            lam=meta["lam"],
            r_bar=meta["r_bar"],
            counterterms={int(k): v for k, v in meta["counterterms"].items()},
            ell_bar=meta["ell_bar"],
            components={
                tuple(int(p) for p in key.split(",")): decode_poly(poly)
                for key, poly in meta["components"].items()
            },
            sigmas=arrays["sigmas"],
            g_small=arrays.get("g_small"),
            integrator=meta["integrator"],
            box_overflow=meta["box_overflow"],
        )
    if header.kind == "cumulant-trajectory":
        return CumulantTrajectory(
            lattice=lat,
            mass=MassFracParams(**meta["mass"]),
            lam=meta["lam"],
            r_bar=meta["r_bar"],
            ell_bar=meta["ell_bar"],
            sigmas=arrays["sigmas"],
            counterterms={int(k): v for k, v in meta["counterterms"].items()},
            local_means={int(k): v for k, v in _group(arrays, "local_means").items()},
            mean_symbols={int(k): v for k, v in _group(arrays, "mean_symbols").items()},
            line_symbol=arrays["line_symbol"],
            parity_zero_blocks=meta["parity_zero_blocks"],
            per_octave=meta["per_octave"],
            components=meta["components"],
            box_overflow=meta["box_overflow"],
        )
    return SampleStream(
        lattice=lat,
        values=arrays["values"],
        observables=_group(arrays, "observables"),
        seed=meta["seed"],
        stream_id=meta["stream_id"],
        normalization=meta["normalization"],
    )
