"""Prototype assignment, nearest-patch retrieval, and enrichment tables.

After clustering-based pretraining the prototype matrix is a set of unit
vectors; patches are assigned to prototypes post hoc by cosine score.
Note this uses a plain softmax per embedding, not the balanced batch
assignment used inside the training loop, whose batch composition is
not recoverable afterwards.

Embedding export format (little-endian throughout): two u32 words
(row count, embedding width m), then per row a u16 byte length, the
UTF-8 patch reference, and m float64 values.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_HEADER = struct.Struct("<II")
_REF_LEN = struct.Struct("<H")


@dataclass
class PrototypeAssignment:
    """Soft distribution over prototypes per embedding, plus its argmax."""

    soft: np.ndarray  # (n, P) rows sum to 1
    discrete: np.ndarray  # (n,) lowest-index argmax

    @property
    def n_prototypes(self) -> int:
        return self.soft.shape[1]


@dataclass
class EnrichmentTable:
    """Prototype-by-class composition of an assigned, labeled corpus."""

    classes: list[str]
    counts: np.ndarray  # (P, C) raw tallies
    class_proportions: np.ndarray  # (C, P): each class spread over prototypes
    prototype_proportions: np.ndarray  # (P, C): each prototype over classes


def _check_unit_rows(name: str, arr: np.ndarray) -> None:
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"{name} rows must be unit-normalized")


def normalize_rows(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot normalize a zero embedding")
    return arr / norms


def assign(
    embeddings: np.ndarray, prototypes: np.ndarray, temperature: float = 0.1
) -> PrototypeAssignment:
    """Softmax of cosine scores over prototypes; argmax breaks ties low."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if embeddings.ndim != 2 or prototypes.ndim != 2:
        raise ValueError("embeddings and prototypes must be 2-d")
    if embeddings.shape[1] != prototypes.shape[1]:
        raise ValueError(
            f"embedding width {embeddings.shape[1]} != prototype width {prototypes.shape[1]}"
        )
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_unit_rows("embedding", embeddings)
    _check_unit_rows("prototype", prototypes)
    logits = embeddings @ prototypes.T / temperature
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft = shifted / shifted.sum(axis=1, keepdims=True)
    return PrototypeAssignment(soft=soft, discrete=np.argmax(soft, axis=1))


def nearest_patches(
    prototypes: np.ndarray,
    index: int,
    embeddings: np.ndarray,
    refs: list[str],
    k: int,
) -> list[tuple[str, float]]:
    """The k corpus patches closest to one prototype in Euclidean distance.

    Ordered nearest first; exact distance ties keep the lower corpus index.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if embeddings.shape[0] == 0:
        raise DataError("empty patch corpus")
    if len(refs) != embeddings.shape[0]:
        raise ValueError("one ref per embedding required")
    if not 0 <= index < prototypes.shape[0]:
        raise ValueError(f"prototype index {index} out of range")
    if k < 1:
        raise ValueError("k must be positive")
    if k > embeddings.shape[0]:
        raise DataError(f"k={k} exceeds corpus size {embeddings.shape[0]}")
    distances = np.linalg.norm(embeddings - prototypes[index], axis=1)
    order = np.argsort(distances, kind="stable")[:k]
    return [(refs[i], float(distances[i])) for i in order]


def enrichment(assignments: PrototypeAssignment, labels: list[str]) -> EnrichmentTable:
    """Tally discrete assignments against class labels, both ways round.

    class_proportions answers "where does this class live?" (rows sum
    to 1); prototype_proportions answers "what does this prototype
    hold?" (rows sum to 1 except for prototypes that caught nothing,
    which stay all zero).
    """
    discrete = assignments.discrete
    if len(labels) != discrete.shape[0]:
        raise ValueError("one label per assignment required")
    classes = sorted(set(labels))
    n_protos = assignments.n_prototypes
    counts = np.zeros((n_protos, len(classes)), dtype=np.int64)
    class_index = {c: j for j, c in enumerate(classes)}
    for proto, label in zip(discrete, labels):
        counts[proto, class_index[label]] += 1

    class_totals = counts.sum(axis=0)
    class_proportions = (counts / class_totals).T
    proto_totals = counts.sum(axis=1, keepdims=True)
    prototype_proportions = np.divide(
        counts, proto_totals, out=np.zeros(counts.shape), where=proto_totals > 0
    )
    return EnrichmentTable(classes, counts, class_proportions, prototype_proportions)


def table_to_tsv(
    row_names: list[str], col_names: list[str], matrix: np.ndarray, corner: str = ""
) -> str:
    """Generic delimited table with row and column headers."""
    matrix = np.asarray(matrix)
    lines = [corner + "\t" + "\t".join(col_names)]
    for name, row in zip(row_names, matrix):
        cells = "\t".join(
            str(int(v)) if matrix.dtype.kind == "i" else format(v, ".6f") for v in row
        )
        lines.append(f"{name}\t{cells}")
    return "\n".join(lines) + "\n"


def write_embeddings(
    path: str | os.PathLike, refs: list[str], embeddings: np.ndarray
) -> None:
    """Binary corpus export for external projection tools."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or len(refs) != embeddings.shape[0]:
        raise ValueError("one ref per embedding row required")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(embeddings.shape[0], embeddings.shape[1]))
        for ref, row in zip(refs, embeddings):
            encoded = ref.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"ref too long: {ref[:40]}...")
            fh.write(_REF_LEN.pack(len(encoded)))
            fh.write(encoded)
            fh.write(row.astype("<f8").tobytes())


def read_embeddings(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) < _HEADER.size:
        raise DataError(f"{path}: truncated embedding file")
    count, width = _HEADER.unpack_from(payload)
    offset = _HEADER.size
    refs: list[str] = []
    rows = np.empty((count, width))
    for i in range(count):
        if offset + _REF_LEN.size > len(payload):
            raise DataError(f"{path}: truncated at row {i}")
        (ref_len,) = _REF_LEN.unpack_from(payload, offset)
        offset += _REF_LEN.size
        end = offset + ref_len + width * 8
        if end > len(payload):
            raise DataError(f"{path}: truncated at row {i}")
        refs.append(payload[offset : offset + ref_len].decode("utf-8"))
        offset += ref_len
        rows[i] = np.frombuffer(payload, dtype="<f8", count=width, offset=offset)
        offset += width * 8
    if offset != len(payload):
        raise DataError(f"{path}: {len(payload) - offset} trailing bytes")
    return refs, rows
