"""On-disk formats: field snapshots, kernel tables, CSV tables and run manifests."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SIGN_CONVENTION, __version__
from .spectral_core import Grid, SpectralField

SNAPSHOT_MAGIC = b"MSQG"
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = struct.Struct("<4sIIId")
KERNEL_MAGIC = b"MSQK"
KERNEL_HEADER = struct.Struct("<4siidII")
KERNEL_RECORD = struct.Struct("<4i8d")
NO_QHAT = -(2**31)

_RANK_COMPONENTS = {"scalar": 1, "vector": 2, "tensor": 4}
_RANK_NAMES = {v: k for k, v in _RANK_COMPONENTS.items()}


# ---------------------------------------------------------------------------
# Field snapshots


def snapshot_bytes(field_: SpectralField) -> bytes:
    """Header (magic, version, n, rank, delta) then complex128 coefficients in FFT order."""
    comps = _RANK_COMPONENTS[field_.rank]
    head = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, field_.grid.n, comps, field_.delta)
    data = np.ascontiguousarray(field_.coeffs.reshape(comps, field_.grid.n, field_.grid.n), dtype="<c16")
    return head + data.tobytes()


def parse_snapshot(data: bytes) -> SpectralField:
    if len(data) < SNAPSHOT_HEADER.size:
        raise ValueError("snapshot too short")
    magic, version, n, comps, delta = SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not an MSQG snapshot")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    if comps not in _RANK_NAMES:
        raise ValueError(f"bad component count {comps}")
    expected = SNAPSHOT_HEADER.size + comps * n * n * 16
    if len(data) != expected:
        raise ValueError(f"snapshot payload has {len(data)} bytes, expected {expected}")
    coeffs = np.frombuffer(data, dtype="<c16", offset=SNAPSHOT_HEADER.size).reshape(comps, n, n)
    rank = _RANK_NAMES[comps]
    shape = {"scalar": (n, n), "vector": (2, n, n), "tensor": (2, 2, n, n)}[rank]
    return SpectralField(Grid(n), coeffs.reshape(shape).astype(complex), rank, True, delta)


def write_snapshot(path: str | Path, field_: SpectralField) -> None:
    Path(path).write_bytes(snapshot_bytes(field_))


def read_snapshot(path: str | Path) -> SpectralField:
    return parse_snapshot(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Kernel tables


@dataclass
class KernelFile:
    q: int
    qhat: int | None
    delta: float
    n: int
    sigma_order: int
    zeta: np.ndarray
    eta: np.ndarray
    samples: np.ndarray


def kernel_bytes(table) -> bytes:
    """Header (magic, q, qhat, delta, n, sigma_order) then one record per sample.

    A record holds zeta and eta as four int32 values followed by the 2x2 complex
    matrix as eight float64 values (row-major, real/imag interleaved).
    """
    qhat = NO_QHAT if table.qhat is None else table.qhat
    out = bytearray(KERNEL_HEADER.pack(KERNEL_MAGIC, table.q, qhat, table.delta, table.n, table.sigma_order))
    for z, e, s in zip(table.zeta, table.eta, table.samples):
        flat = np.asarray(s, dtype=complex).reshape(4)
        parts = [v for c in flat for v in (c.real, c.imag)]
        out += KERNEL_RECORD.pack(int(z[0]), int(z[1]), int(e[0]), int(e[1]), *parts)
    return bytes(out)


def parse_kernel(data: bytes) -> KernelFile:
    if data[:4] != KERNEL_MAGIC:
        raise ValueError("not an MSQK kernel table")
    _, q, qhat, delta, n, order = KERNEL_HEADER.unpack_from(data)
    body = len(data) - KERNEL_HEADER.size
    if body % KERNEL_RECORD.size:
        raise ValueError("kernel table body is not a whole number of records")
    count = body // KERNEL_RECORD.size
    zeta = np.zeros((count, 2), dtype=np.int64)
    eta = np.zeros((count, 2), dtype=np.int64)
    samples = np.zeros((count, 2, 2), dtype=complex)
    for i, rec in enumerate(KERNEL_RECORD.iter_unpack(data[KERNEL_HEADER.size :])):
        zeta[i] = rec[0:2]
        eta[i] = rec[2:4]
        vals = np.array(rec[4:])
        samples[i] = (vals[0::2] + 1j * vals[1::2]).reshape(2, 2)
    return KernelFile(q, None if qhat == NO_QHAT else qhat, delta, n, order, zeta, eta, samples)


# ---------------------------------------------------------------------------
# CSV and manifests


def format_value(v) -> str:
    """Shortest round-tripping text for floats so reruns are byte-identical."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest(subcommand: str, config: dict, outputs: list[str], status: str, detail: str = "") -> dict:
    return {
        "tool": "msqg-lab",
        "version": __version__,
        "subcommand": subcommand,
        "sign_convention": SIGN_CONVENTION,
        "config": config,
        "outputs": sorted(outputs),
        "status": status,
        "detail": detail,
    }


def write_manifest(path: str | Path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
