"""Hamming-space retrieval: code binarization, bit-packed linear scan and
the mAP / precision@K / precision-recall evaluation protocol."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import FormatError, MODALITY_CODES, MODALITY_NAMES

CODE_MAGIC = b"ZSCB"
CODE_VERSION = 1

# interpolated precision is reported at the standard 11 recall levels
RECALL_LEVELS = np.linspace(0.0, 1.0, 11)

_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)


@dataclass
class CodeMatrix:
    """Bit-packed binary codes (LSB-first within each byte) with labels."""

    codes: np.ndarray   # [N, ceil(M/8)] uint8
    labels: np.ndarray  # [N] uint32
    n_bits: int
    modality: str = "image"

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.codes.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.codes.shape[0]} codes but {self.labels.shape[0]} labels"
            )
        if self.codes.shape[1] != (self.n_bits + 7) // 8:
            raise ValueError(
                f"code width {self.codes.shape[1]} bytes does not hold "
                f"{self.n_bits} bits"
            )
        if self.modality not in MODALITY_CODES:
            raise ValueError(f"unknown modality {self.modality!r}")

    def __len__(self):
        return self.codes.shape[0]

    def bits(self):
        return np.unpackbits(self.codes, axis=1, bitorder="little", count=self.n_bits)


def pack_bits(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    return np.packbits(bits, axis=-1, bitorder="little")


def binarize(soft_codes, labels, modality="image"):
    """Threshold soft codes at 0.5 (the boundary itself maps to bit 1)."""
    soft = np.asarray(soft_codes, dtype=np.float64)
    if soft.ndim != 2:
        raise ValueError(f"soft codes must be [N, M], got shape {soft.shape}")
    if np.any(soft < 0.0) or np.any(soft > 1.0):
        raise ValueError("soft codes must lie in [0, 1]")
    bits = (soft >= 0.5).astype(np.uint8)
    return CodeMatrix(
        codes=pack_bits(bits),
        labels=np.asarray(labels, dtype=np.uint32),
        n_bits=soft.shape[1],
        modality=modality,
    )


def _packed_distances(query_row, codes):
    """Hamming distances of one packed query against all packed codes."""
    return _POPCOUNT[np.bitwise_xor(codes, query_row[None, :])].sum(
        axis=1, dtype=np.int64
    )


def hamming_rank(query_bits, gallery):
    """Gallery indices by ascending Hamming distance to the query bits,
    ties broken by ascending index."""
    query_bits = np.asarray(query_bits, dtype=np.uint8)
    if query_bits.ndim != 1 or query_bits.shape[0] != gallery.n_bits:
        raise ValueError(
            f"query has {query_bits.shape} bits, gallery codes have "
            f"{gallery.n_bits}"
        )
    dist = _packed_distances(pack_bits(query_bits), gallery.codes)
    return np.argsort(dist, kind="stable")


def average_precision(ranked_labels, query_label):
    """AP over a fully ranked gallery; relevance is label equality."""
    hits = 0
    total = 0.0
    for rank, label in enumerate(ranked_labels, start=1):
        if label == query_label:
            hits += 1
            total += hits / rank
    if hits == 0:
        raise ValueError("query has no relevant gallery item")
    return total / hits


@dataclass
class RetrievalReport:
    map_all: float
    precision_at: dict                 # K -> mean precision
    pr_curve: list                     # (recall level, interpolated precision)
    per_query_ap: np.ndarray
    excluded_queries: int = 0
    pr_raw: list = field(default_factory=list)  # (mean recall@n, mean precision@n)


def _query_metrics(rel, ks, n_gallery):
    """AP, precision@K, interpolated P-R and raw P-R rows for one query."""
    r_total = int(rel.sum())
    ranks = np.arange(1, n_gallery + 1, dtype=np.float64)
    cum = np.cumsum(rel, dtype=np.float64)
    prec_at = cum / ranks
    recall_at = cum / r_total

    hits = 0
    ap = 0.0
    for rank0 in np.flatnonzero(rel):
        hits += 1
        ap += hits / (rank0 + 1.0)
    ap /= r_total

    p_ks = {k: float(rel[: min(k, n_gallery)].sum()) / k for k in ks}
    interp = np.maximum.accumulate(prec_at[::-1])[::-1]
    levels = np.array(
        [interp[np.searchsorted(recall_at, level)] if level > 0 else interp[0]
         for level in RECALL_LEVELS]
    )
    return ap, p_ks, levels, prec_at, recall_at


def evaluate(queries, gallery, ks=(1, 10, 100)):
    """Rank the gallery for every query and aggregate retrieval metrics.

    Queries without a single relevant gallery item are excluded from the
    averages and surfaced through ``excluded_queries``.
    """
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    if len(queries) == 0:
        raise ValueError("no queries")
    if queries.n_bits != gallery.n_bits:
        raise ValueError(
            f"code length mismatch: queries {queries.n_bits} bits, "
            f"gallery {gallery.n_bits} bits"
        )
    ks = sorted(set(int(k) for k in ks))
    n = len(gallery)
    aps = []
    p_sum = {k: 0.0 for k in ks}
    level_sum = np.zeros(RECALL_LEVELS.size)
    raw_prec_sum = np.zeros(n)
    raw_rec_sum = np.zeros(n)
    excluded = 0
    for qi in range(len(queries)):
        dist = _packed_distances(queries.codes[qi], gallery.codes)
        order = np.argsort(dist, kind="stable")
        rel = gallery.labels[order] == queries.labels[qi]
        if not rel.any():
            excluded += 1
            continue
        ap, p_ks, levels, prec_at, recall_at = _query_metrics(rel, ks, n)
        aps.append(ap)
        for k in ks:
            p_sum[k] += p_ks[k]
        level_sum += levels
        raw_prec_sum += prec_at
        raw_rec_sum += recall_at
    if not aps:
        raise ValueError("every query lacked relevant gallery items")
    per_query_ap = np.array(aps)
    n_eval = len(aps)
    return RetrievalReport(
        map_all=float(np.mean(per_query_ap)),
        precision_at={k: p_sum[k] / n_eval for k in ks},
        pr_curve=list(zip(RECALL_LEVELS.tolist(), (level_sum / n_eval).tolist())),
        per_query_ap=per_query_ap,
        excluded_queries=excluded,
        pr_raw=list(zip((raw_rec_sum / n_eval).tolist(),
                        (raw_prec_sum / n_eval).tolist())),
    )


def format_report(report):
    lines = [
        f"mAP@all\t{report.map_all!r}",
        f"queries\t{len(report.per_query_ap)}",
        f"excluded_queries\t{report.excluded_queries}",
    ]
    for k in sorted(report.precision_at):
        lines.append(f"precision@{k}\t{report.precision_at[k]!r}")
    return "\n".join(lines) + "\n"


def write_pr_dump(report, path, include_raw=True):
    """Tab-separated P-R points: interpolated 11-level curve plus the raw
    per-rank averages when requested."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("kind\trecall\tprecision\n")
        for recall, precision in report.pr_curve:
            f.write(f"interp\t{recall!r}\t{precision!r}\n")
        if include_raw:
            for recall, precision in report.pr_raw:
                f.write(f"raw\t{recall!r}\t{precision!r}\n")


# ---------------------------------------------------------------------------
# code file format


def save_codes(code_matrix, path):
    with open(path, "wb") as f:
        f.write(CODE_MAGIC)
        f.write(struct.pack(
            "<HQIB", CODE_VERSION, len(code_matrix), code_matrix.n_bits,
            MODALITY_CODES[code_matrix.modality],
        ))
        for label, row in zip(code_matrix.labels, code_matrix.codes):
            f.write(struct.pack("<I", int(label)))
            f.write(row.tobytes())
        for label in code_matrix.labels:
            f.write(struct.pack("<I", int(label)))


def load_codes(path):
    with open(path, "rb") as f:
        magic = _read(f, 4)
        if magic != CODE_MAGIC:
            raise FormatError(f"bad code file magic {magic!r}")
        version, count, n_bits, mod_code = struct.unpack("<HQIB", _read(f, 15))
        if version != CODE_VERSION:
            raise FormatError(f"unsupported code file version {version}")
        if mod_code not in MODALITY_NAMES:
            raise FormatError(f"unknown modality code {mod_code}")
        n_bytes = (n_bits + 7) // 8
        labels = np.empty(count, dtype=np.uint32)
        codes = np.empty((count, n_bytes), dtype=np.uint8)
        for i in range(count):
            (labels[i],) = struct.unpack("<I", _read(f, 4))
            codes[i] = np.frombuffer(_read(f, n_bytes), dtype=np.uint8)
        trailer = np.frombuffer(_read(f, 4 * count), dtype="<u4")
        if f.read(1):
            raise FormatError("unexpected trailing bytes in code file")
    if not np.array_equal(trailer, labels):
        raise FormatError("label trailer does not match records (corrupt file)")
    return CodeMatrix(
        codes=codes, labels=labels, n_bits=int(n_bits),
        modality=MODALITY_NAMES[mod_code],
    )


def _read(f, n):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated code file at offset {f.tell() - len(data)}")
    return data
