"""Attention saliency over dumped tensors for the three information paths.

Works on externally produced attention activations and their loss
gradients; nothing here runs a model.  A path score is the masked
Frobenius inner product alpha * sum(A * G * M).  There is no absolute
value anywhere: the score is bilinear in A and G, so path scores over
disjoint masks add exactly.  Inputs are 32-bit on disk and upcast to
64-bit before any multiplication.

Container layout, in order and without padding: magic "STNS", one
version byte, unsigned 32-bit rank, rank unsigned 64-bit dims, then the
payload as little-endian 32-bit reals in row-major order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from . import jsonl
from .errors import ConfigurationError, TensorFormatError

MAGIC = b"STNS"
VERSION = 1
MAX_RANK = 8

PATHS = ("reasoning_to_answer", "reasoning_to_terminator", "terminator_to_answer")


@dataclass(frozen=True, eq=False)
class TensorBlob:
    """A dumped tensor: dims plus row-major 32-bit data."""

    dims: tuple[int, ...]
    data: np.ndarray

    def validate(self) -> None:
        rank = len(self.dims)
        if not 1 <= rank <= MAX_RANK:
            raise TensorFormatError(f"rank must be 1..{MAX_RANK}, got {rank}")
        if any(d < 1 for d in self.dims):
            raise TensorFormatError(f"dims must be positive, got {self.dims}")
        if self.data.dtype != np.float32:
            raise TensorFormatError(f"data must be float32, got {self.data.dtype}")
        if self.data.shape != self.dims:
            raise TensorFormatError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        if not np.isfinite(self.data).all():
            flat = int(np.flatnonzero(~np.isfinite(self.data.reshape(-1)))[0])
            raise TensorFormatError(f"non-finite value at element {flat}")


def save_tensor(tensor, path: str) -> None:
    """Write an array or TensorBlob in the container format."""
    arr = np.ascontiguousarray(
        tensor.data if isinstance(tensor, TensorBlob) else tensor, dtype="<f4"
    )
    blob = TensorBlob(dims=arr.shape, data=arr.astype(np.float32, copy=False))
    blob.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(arr.shape)))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(arr.tobytes())


def load_tensor(path: str) -> TensorBlob:
    """Read and validate a container file; errors carry the byte offset."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise TensorFormatError(
            f"{path}: bad magic {raw[:4]!r} at offset 0, expected {MAGIC!r}"
        )
    if len(raw) < 9:
        raise TensorFormatError(f"{path}: header truncated at offset {len(raw)}")
    version = raw[4]
    if version != VERSION:
        raise TensorFormatError(
            f"{path}: unsupported version {version} at offset 4"
        )
    (rank,) = struct.unpack_from("<I", raw, 5)
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"{path}: rank {rank} out of range at offset 5")
    dims_end = 9 + 8 * rank
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: dims truncated at offset {len(raw)}")
    dims = struct.unpack_from(f"<{rank}Q", raw, 9)
    count = 1
    for i, dim in enumerate(dims):
        if dim == 0:
            raise TensorFormatError(f"{path}: zero dim at offset {9 + 8 * i}")
        count *= dim
    expected = count * 4
    actual = len(raw) - dims_end
    if actual != expected:
        raise TensorFormatError(
            f"{path}: payload of {actual} bytes at offset {dims_end},"
            f" expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=dims_end).reshape(dims)
    finite = np.isfinite(data)
    if not finite.all():
        flat = int(np.flatnonzero(~finite.reshape(-1))[0])
        raise TensorFormatError(
            f"{path}: non-finite value at offset {dims_end + 4 * flat}"
        )
    blob = TensorBlob(dims=tuple(int(d) for d in dims), data=data.astype(np.float32))
    blob.validate()
    return blob


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Binary (query, key) mask selecting one information path."""

    name: str
    boundaries: tuple[int, int, int, int]
    matrix: np.ndarray

    def validate(self) -> None:
        if self.name not in PATHS:
            raise ConfigurationError(f"unknown path {self.name!r}")
        if np.triu(self.matrix, k=1).any():
            raise ConfigurationError(f"mask {self.name} breaks causality")


def build_masks(
    boundaries: tuple[int, int, int, int], length: int | None = None
) -> tuple[RegionMask, RegionMask, RegionMask]:
    """Masks for the three paths between reasoning, terminator, and answer.

    boundaries = (reasoning start, terminator position, answer start,
    sequence end); the terminator is the single position between the
    reasoning span and the answer span.  Masks are (length, length) with
    length defaulting to the sequence end.
    """
    p, r, s, end = boundaries
    if not (0 <= p < r < s <= end):
        raise ConfigurationError(
            "boundaries must satisfy reasoning start < terminator"
            f" < answer start <= sequence end, got {boundaries}"
        )
    n = end if length is None else length
    if n < end:
        raise ConfigurationError(f"mask length {n} cannot hold sequence end {end}")

    def blank():
        return np.zeros((n, n), dtype=np.uint8)

    reasoning_to_answer = blank()
    reasoning_to_answer[s:end, p:r] = 1
    reasoning_to_terminator = blank()
    reasoning_to_terminator[r, p:r] = 1
    terminator_to_answer = blank()
    terminator_to_answer[s:end, r] = 1
    out = (
        RegionMask("reasoning_to_answer", boundaries, reasoning_to_answer),
        RegionMask("reasoning_to_terminator", boundaries, reasoning_to_terminator),
        RegionMask("terminator_to_answer", boundaries, terminator_to_answer),
    )
    for mask in out:
        mask.validate()
    return out


def _as_matrix(value, what: str) -> np.ndarray:
    arr = value.data if isinstance(value, TensorBlob) else np.asarray(value)
    if arr.ndim != 2:
        raise TensorFormatError(f"{what} must be 2-D, got rank {arr.ndim}")
    return arr


def saliency_score(attention, gradient, mask, *, alpha: float = 1.0) -> float:
    """alpha * sum over the masked region of attention * gradient.

    Signed by design: no absolute value, so the score is bilinear and
    adds across disjoint masks.
    """
    a = _as_matrix(attention, "attention")
    g = _as_matrix(gradient, "gradient")
    m = mask.matrix if isinstance(mask, RegionMask) else np.asarray(mask)
    if not (a.shape == g.shape == m.shape):
        raise TensorFormatError(
            f"shape mismatch: attention {a.shape}, gradient {g.shape}, mask {m.shape}"
        )
    # upcast first; products of float32 pairs lose bits before the sum
    prod = a.astype(np.float64) * g.astype(np.float64) * m.astype(np.float64)
    return alpha * float(prod.sum())


@dataclass(frozen=True, eq=False)
class SaliencyReport:
    """Per-layer and per-head path scores with the scoring convention."""

    boundaries: tuple[int, int, int, int]
    alpha: float
    paths: tuple[str, ...]
    head_scores: np.ndarray = field(repr=False)  # (layers, heads, paths)
    layer_scores: np.ndarray = field(repr=False)  # (layers, paths)


def saliency_report(attention, gradient, boundaries, *, alpha: float = 1.0) -> SaliencyReport:
    """Score every (layer, head) slice along the three paths.

    attention and gradient are (layers, heads, query, key) with a square
    attention plane whose side equals the sequence end.
    """
    a = attention.data if isinstance(attention, TensorBlob) else np.asarray(attention)
    g = gradient.data if isinstance(gradient, TensorBlob) else np.asarray(gradient)
    if a.ndim != 4 or g.ndim != 4:
        raise TensorFormatError(
            f"expected (layers, heads, query, key), got ranks {a.ndim} and {g.ndim}"
        )
    if a.shape != g.shape:
        raise TensorFormatError(
            f"attention {a.shape} and gradient {g.shape} differ"
        )
    layers, heads, q_len, k_len = a.shape
    if q_len != k_len:
        raise TensorFormatError(f"attention plane must be square, got {q_len}x{k_len}")
    end = boundaries[3]
    if end != q_len:
        raise ConfigurationError(
            f"sequence end {end} does not match attention length {q_len}"
        )
    masks = build_masks(boundaries)
    prod = a.astype(np.float64) * g.astype(np.float64)
    head_scores = np.empty((layers, heads, len(masks)))
    for idx, mask in enumerate(masks):
        head_scores[:, :, idx] = alpha * np.tensordot(
            prod, mask.matrix.astype(np.float64), axes=([2, 3], [0, 1])
        )
    return SaliencyReport(
        boundaries=tuple(boundaries),
        alpha=alpha,
        paths=tuple(m.name for m in masks),
        head_scores=head_scores,
        layer_scores=head_scores.sum(axis=1),
    )


def report_to_obj(report: SaliencyReport) -> dict:
    layers, heads, _ = report.head_scores.shape
    return {
        "boundaries": list(report.boundaries),
        "alpha": report.alpha,
        "paths": list(report.paths),
        "layers": layers,
        "heads": heads,
        "layer_scores": [
            {path: report.layer_scores[layer, i] for i, path in enumerate(report.paths)}
            for layer in range(layers)
        ],
        "head_scores": [
            [
                {path: report.head_scores[layer, head, i] for i, path in enumerate(report.paths)}
                for head in range(heads)
            ]
            for layer in range(layers)
        ],
    }


def report_curves_to_csv(report: SaliencyReport, path: str) -> None:
    """Per-layer path curves; head column empty on the head-summed rows."""
    layers, heads, _ = report.head_scores.shape
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "head", "path", "score"])
        for layer in range(layers):
            for i, name in enumerate(report.paths):
                writer.writerow(
                    [layer, "", name, jsonl.format_float(float(report.layer_scores[layer, i]))]
                )
            for head in range(heads):
                for i, name in enumerate(report.paths):
                    writer.writerow(
                        [
                            layer,
                            head,
                            name,
                            jsonl.format_float(float(report.head_scores[layer, head, i])),
                        ]
                    )
