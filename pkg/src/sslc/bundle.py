"""On-disk bundles: weights, activations, calibration norms, compressed layers.

Every bundle is a directory holding ``manifest.json`` and little-endian binary
blobs. Manifests are written with sorted keys and no timestamps, so identical
inputs give byte-identical bundles.

Weight and activation bundles share one layout. Weight tensors are
``rows = output channels, cols = input channels``. Activation tensors are
stored sample-major, ``rows = samples, cols = input channels``, so they can be
streamed in row chunks.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lowrank import LowRankFactors
from .matrix import ColumnScaling, SparseMatrix
from .optimizer import FORMAT_VERSION, CompressedLayer, CompressionPlan, ConvergenceTrace

MANIFEST = "manifest.json"
F32 = np.dtype("<f4")
U32 = np.dtype("<u4")
U64 = np.dtype("<u8")


class BundleError(ValueError):
    """A bundle is malformed or does not match its counterpart."""


def atomic_write_bytes(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_manifest(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: invalid manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def blob_name(name: str, suffix: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{safe}.{hashlib.sha256(name.encode()).hexdigest()[:8]}.{suffix}"


def _f32_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype=F32).tobytes()


# ---------------------------------------------------------------- weights


@dataclass(frozen=True)
class TensorEntry:
    name: str
    rows: int
    cols: int
    blob_path: str
    bias_path: str | None = None


class WeightBundle:
    """Named row-major f32 matrices with optional bias vectors."""

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.kind = manifest.get("kind", "weights")
        self.entries: dict[str, TensorEntry] = {}
        for t in manifest["tensors"]:
            if t.get("dtype", "f32le") != "f32le":
                raise BundleError(f"tensor {t['name']}: unsupported dtype {t['dtype']}")
            if t["name"] in self.entries:
                raise BundleError(f"duplicate tensor name {t['name']!r}")
            entry = TensorEntry(t["name"], int(t["rows"]), int(t["cols"]), t["blob_path"], t.get("bias_path"))
            size = (self.root / entry.blob_path).stat().st_size
            if size != entry.rows * entry.cols * 4:
                raise BundleError(
                    f"tensor {entry.name}: blob has {size} bytes, expected {entry.rows * entry.cols * 4}"
                )
            self.entries[entry.name] = entry

    @classmethod
    def open(cls, root) -> "WeightBundle":
        return cls(root, read_manifest(root))

    def names(self) -> list[str]:
        return sorted(self.entries)

    def load(self, name: str) -> np.ndarray:
        e = self.entries[name]
        data = np.fromfile(self.root / e.blob_path, dtype=F32)
        return data.astype(np.float64).reshape(e.rows, e.cols)

    def load_bias(self, name: str) -> np.ndarray | None:
        e = self.entries[name]
        if e.bias_path is None:
            return None
        bias = np.fromfile(self.root / e.bias_path, dtype=F32).astype(np.float64)
        if bias.size != e.rows:
            raise BundleError(f"tensor {name}: bias has {bias.size} entries, expected {e.rows}")
        return bias

    def iter_row_chunks(self, name: str, chunk_rows: int):
        """Yield float64 row blocks without reading the whole blob."""
        e = self.entries[name]
        with open(self.root / e.blob_path, "rb") as f:
            remaining = e.rows
            while remaining > 0:
                take = min(chunk_rows, remaining)
                block = np.fromfile(f, dtype=F32, count=take * e.cols)
                if block.size != take * e.cols:
                    raise BundleError(f"tensor {name}: blob truncated")
                yield block.astype(np.float64).reshape(take, e.cols)
                remaining -= take


def write_weight_bundle(root, tensors: dict, biases: dict | None = None, kind: str = "weights"):
    """Write ``{name: matrix}`` (and optional ``{name: bias}``) as a bundle."""
    root = Path(root)
    biases = biases or {}
    entries = []
    for name in sorted(tensors):
        mat = np.asarray(tensors[name])
        if mat.ndim != 2:
            raise BundleError(f"tensor {name} must be 2-D")
        entry = {
            "name": name,
            "rows": int(mat.shape[0]),
            "cols": int(mat.shape[1]),
            "dtype": "f32le",
            "blob_path": blob_name(name, "f32"),
        }
        atomic_write_bytes(root / entry["blob_path"], _f32_bytes(mat))
        if biases.get(name) is not None:
            entry["bias_path"] = blob_name(name, "bias.f32")
            atomic_write_bytes(root / entry["bias_path"], _f32_bytes(biases[name]))
        entries.append(entry)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "tensors": entries}
    atomic_write_bytes(root / MANIFEST, dump_manifest(manifest))
    return root


# ------------------------------------------------------------ calibration


@dataclass(frozen=True)
class CalibrationEntry:
    name: str
    norms: np.ndarray  # pre-clamp, float64 view of the stored f32 values
    samples: int
    source_hash: str

    def scaling(self, epsilon: float) -> ColumnScaling:
        return ColumnScaling(self.norms, epsilon)


def write_calibration(root, entries: list[CalibrationEntry]):
    root = Path(root)
    items = []
    for e in sorted(entries, key=lambda e: e.name):
        path = blob_name(e.name, "norms.f32")
        atomic_write_bytes(root / path, _f32_bytes(e.norms))
        items.append(
            {
                "name": e.name,
                "channels": int(e.norms.size),
                "samples": int(e.samples),
                "source_hash": e.source_hash,
                "norms_path": path,
            }
        )
    manifest = {"format_version": FORMAT_VERSION, "kind": "calibration", "tensors": items}
    atomic_write_bytes(root / MANIFEST, dump_manifest(manifest))
    return root


def read_calibration(root) -> dict[str, CalibrationEntry]:
    root = Path(root)
    manifest = read_manifest(root)
    if manifest.get("kind") != "calibration":
        raise BundleError(f"{root} is not a calibration bundle")
    out = {}
    for t in manifest["tensors"]:
        norms = np.fromfile(root / t["norms_path"], dtype=F32).astype(np.float64)
        if norms.size != t["channels"]:
            raise BundleError(f"calibration {t['name']}: {norms.size} norms, expected {t['channels']}")
        if not np.all(np.isfinite(norms)) or np.any(norms < 0):
            raise BundleError(f"calibration {t['name']}: norms must be finite and non-negative")
        out[t["name"]] = CalibrationEntry(t["name"], norms, int(t["samples"]), t["source_hash"])
    return out


# ------------------------------------------------------------- compressed


def _layer_sections(layer: CompressedLayer) -> list[tuple[str, bytes]]:
    sections = [
        ("row_offsets", np.ascontiguousarray(layer.s.row_offsets, dtype=U64).tobytes()),
        ("col_indices", np.ascontiguousarray(layer.s.col_indices, dtype=U32).tobytes()),
        ("values", _f32_bytes(layer.s.values)),
        ("u", _f32_bytes(layer.factors.u)),
        ("v", _f32_bytes(layer.factors.v)),
    ]
    if layer.bias is not None:
        sections.append(("bias", _f32_bytes(layer.bias)))
    return sections


def layer_record(name: str, layer: CompressedLayer, tensor_seed: int) -> dict:
    m, n = layer.shape
    return {
        "name": name,
        "shape": [m, n],
        "rank": layer.rank,
        "nnz": layer.s.nnz,
        "density": layer.s.nnz / (m * n),
        "parameter_fraction": layer.parameter_fraction(),
        "preserve_fraction": layer.plan.preserve_fraction,
        "preserve_count": layer.preserve_count,
        "seed": tensor_seed,
        "iterations": layer.trace.iterations,
        "plan": layer.plan.to_dict(),
        "final_losses": {
            "scaled_loss": layer.scaled_loss,
            "initial_loss": layer.trace.initial_loss,
            "one_shot_loss": layer.trace.one_shot_loss,
        },
        "trace": layer.trace.to_dict(),
    }


def write_compressed_bundle(root, layers: dict, seeds: dict, provenance: dict | None = None):
    """Write ``{name: CompressedLayer}``; ``seeds`` holds each tensor's derived seed."""
    root = Path(root)
    records = []
    for name in sorted(layers):
        layer = layers[name]
        record = layer_record(name, layer, seeds[name])
        offset = 0
        chunks = []
        record["sections"] = {}
        for key, data in _layer_sections(layer):
            record["sections"][key] = [offset, len(data)]
            chunks.append(data)
            offset += len(data)
        record["file"] = blob_name(name, "sslc")
        atomic_write_bytes(root / record["file"], b"".join(chunks))
        records.append(record)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "compressed",
        "provenance": provenance or {},
        "tensors": records,
    }
    atomic_write_bytes(root / MANIFEST, dump_manifest(manifest))
    return root


def read_compressed_bundle(root) -> tuple[dict[str, CompressedLayer], dict]:
    """Return ``({name: CompressedLayer}, manifest)``; arrays come back as float64."""
    root = Path(root)
    manifest = read_manifest(root)
    if manifest.get("kind") != "compressed":
        raise BundleError(f"{root} is not a compressed bundle")
    layers = {}
    for rec in manifest["tensors"]:
        raw = (root / rec["file"]).read_bytes()
        m, n = rec["shape"]
        r = rec["rank"]

        def section(key, dtype):
            start, length = rec["sections"][key]
            if start + length > len(raw):
                raise BundleError(f"tensor {rec['name']}: section {key} out of range")
            return np.frombuffer(raw, dtype=dtype, count=length // dtype.itemsize, offset=start)

        offsets = section("row_offsets", U64).astype(np.int64)
        s = SparseMatrix(
            m, n, offsets,
            section("col_indices", U32).astype(np.int64),
            section("values", F32).astype(np.float64),
        )
        factors = LowRankFactors(
            section("u", F32).astype(np.float64).reshape(m, r),
            section("v", F32).astype(np.float64).reshape(n, r),
        )
        bias = section("bias", F32).astype(np.float64) if "bias" in rec["sections"] else None
        layers[rec["name"]] = CompressedLayer(
            s=s,
            factors=factors,
            bias=bias,
            plan=CompressionPlan(**rec["plan"]),
            trace=ConvergenceTrace.from_dict(rec["trace"]),
            scaled_loss=rec["final_losses"]["scaled_loss"],
            preserve_count=rec["preserve_count"],
        )
    return layers, manifest
