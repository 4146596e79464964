"""Retrieval quality and quantization health metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, ParameterError


@dataclass
class EvalRecord:
    query_id: str
    relevant: set[str]
    retrieved: list[str]


def _check_k(k: int) -> None:
    if k < 1:
        raise ParameterError(f"k={k} must be >= 1")


def precision_at_k(records: list[EvalRecord], k: int) -> float:
    """Mean fraction of the top k that is relevant. Denominator is always k."""
    _check_k(k)
    if not records:
        raise ParameterError("no evaluation records")
    hits = [len(set(r.retrieved[:k]) & r.relevant) / k for r in records]
    return float(np.mean(hits))


def recall_at_k(records: list[EvalRecord], k: int) -> float:
    """Mean fraction of relevant items found in the top k.

    Records with an empty relevant set are skipped; count them via
    skipped_records if the caller wants to report it.
    """
    _check_k(k)
    if not records:
        raise ParameterError("no evaluation records")
    scored = [
        len(set(r.retrieved[:k]) & r.relevant) / len(r.relevant)
        for r in records
        if r.relevant
    ]
    if not scored:
        raise ParameterError("recall undefined: every record has an empty relevant set")
    return float(np.mean(scored))


def skipped_records(records: list[EvalRecord]) -> int:
    """How many records recall_at_k ignores (empty relevant sets)."""
    return sum(1 for r in records if not r.relevant)


def mean_distortion(layer, embeddings, chunk: int = 8192) -> float:
    """Mean ||quantize(x) - x||^2 over the rows of `embeddings`."""
    emb = np.asarray(embeddings)
    if emb.ndim != 2:
        raise DegenerateInput(f"embeddings must be (n, d), got {emb.shape}")
    if emb.shape[0] == 0:
        raise DegenerateInput("mean_distortion of an empty set")
    total = 0.0
    for lo in range(0, emb.shape[0], chunk):
        rows = emb[lo : lo + chunk]
        quantized = layer.full_quantize(rows)[0]
        diff = quantized - rows.astype(np.float64)
        total += float(np.einsum("ij,ij->", diff, diff))
    return total / emb.shape[0]


def coarse_utilization(index) -> tuple[int, int]:
    """(used, total): nonempty inverted lists out of all coarse cells."""
    used = sum(1 for members in index.lists if len(members) > 0)
    return used, index.n_cells


def evaluate_all(records: list[EvalRecord], ks: list[int]) -> dict:
    """Flat metrics record: precision and recall at each k, plus skip count."""
    out: dict = {"n_records": len(records), "n_skipped_empty": skipped_records(records)}
    for k in ks:
        out[f"p@{k}"] = precision_at_k(records, k)
        out[f"r@{k}"] = recall_at_k(records, k)
    return out
