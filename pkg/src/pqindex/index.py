"""Serving-side embedding index: build, ADC search, offline baseline, file IO.

File format, all little-endian, in this order:

    magic   4 bytes  "POEM"
    u32     version (currently 1)
    u32     d, D, K, J, n_items
    f32     rotation, d*d row-major (identity when rotation was disabled)
    f32     coarse codebook, J*d
    f32     pq codebooks, D*K*(d/D)
    items   n_items records: u32 coarse code, D u8 pq codes
    vocab   n_items records: u16 byte length, UTF-8 item id

Inverted lists are not stored; they are rebuilt at load time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kmeans
from .core import unit
from .errors import DimensionMismatch, IndexCorruption, ParameterError
from .quantizer import QuantizerLayer
from .rotation import RotationMatrix, steepest_update

MAGIC = b"POEM"
VERSION = 1


@dataclass
class SearchParams:
    k: int = 10
    nprobe: int = 16

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"k={self.k} must be >= 1")
        if self.nprobe < 1:
            raise ParameterError(f"nprobe={self.nprobe} must be >= 1")


@dataclass
class EmbeddingIndex:
    rotation: np.ndarray  # (d, d) float32
    coarse: np.ndarray  # (J, d) float32
    pq: np.ndarray  # (D, K, d/D) float32
    coarse_codes: np.ndarray  # (n,) uint32
    pq_codes: np.ndarray  # (n, D) uint8
    ids: list[str]
    lists: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lists:
            self.lists = _invert(self.coarse_codes, self.coarse.shape[0])

    @property
    def d(self) -> int:
        return self.coarse.shape[1]

    @property
    def n_cells(self) -> int:
        return self.coarse.shape[0]

    @property
    def n_subspaces(self) -> int:
        return self.pq.shape[0]

    @property
    def n_codewords(self) -> int:
        return self.pq.shape[1]

    @property
    def n_items(self) -> int:
        return self.coarse_codes.shape[0]

    def reconstruct(self, ordinal: int) -> np.ndarray:
        """Decoded embedding for one item, rotation undone, float64."""
        sub = self.d // self.n_subspaces
        recon = self.coarse.astype(np.float64)[self.coarse_codes[ordinal]].copy()
        for j in range(self.n_subspaces):
            recon[j * sub : (j + 1) * sub] += self.pq[j].astype(np.float64)[
                self.pq_codes[ordinal, j]
            ]
        return recon @ self.rotation.astype(np.float64)


def _invert(coarse_codes: np.ndarray, n_cells: int) -> list[np.ndarray]:
    order = np.argsort(coarse_codes, kind="stable")
    sorted_codes = coarse_codes[order]
    bounds = np.searchsorted(sorted_codes, np.arange(n_cells + 1))
    return [order[bounds[c] : bounds[c + 1]] for c in range(n_cells)]


def _fast_encode(
    embeddings: np.ndarray,
    rotation32: np.ndarray | None,
    coarse: np.ndarray,
    pq: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bulk encode: rotate, assign cells, quantize residuals. No clustering."""
    emb = np.ascontiguousarray(embeddings, dtype=np.float32)
    xr = emb @ rotation32.T if rotation32 is not None else emb
    cc = kmeans.nearest_many(xr, coarse)
    y = xr - coarse[cc]
    n_sub, _, sub = pq.shape
    pc = np.empty((emb.shape[0], n_sub), dtype=np.uint8)
    for j in range(n_sub):
        pc[:, j] = kmeans.nearest_many(y[:, j * sub : (j + 1) * sub], pq[j])
    return xr, cc.astype(np.uint32), pc


def build(item_embeddings: np.ndarray, item_ids: list[str], layer: QuantizerLayer) -> EmbeddingIndex:
    """Encode every item through the trained layer. Pure encoding: no k-means."""
    emb = np.asarray(item_embeddings)
    if emb.ndim != 2 or emb.shape[1] != layer.d:
        raise DimensionMismatch(f"embeddings {emb.shape} do not match layer d={layer.d}")
    if emb.shape[0] != len(item_ids):
        raise ParameterError(f"{emb.shape[0]} embeddings vs {len(item_ids)} ids")
    if emb.shape[0] == 0:
        raise ParameterError("cannot build an empty index")
    if layer.rotation_enabled and layer.rotation.factors:
        rot32 = layer.rotation.dense.astype(np.float32)
    else:
        rot32 = None
    _, cc, pc = _fast_encode(emb, rot32, layer.coarse, layer.pq)
    rotation = rot32 if rot32 is not None else np.eye(layer.d, dtype=np.float32)
    return EmbeddingIndex(
        rotation=rotation,
        coarse=layer.coarse.copy(),
        pq=layer.pq.copy(),
        coarse_codes=cc,
        pq_codes=pc,
        ids=list(item_ids),
    )


def search(index: EmbeddingIndex, query_emb, params: SearchParams) -> list[tuple[str, float]]:
    """Top-k items by asymmetric distance computation.

    The query is normalized and rotated once; per probed cell, item scores
    are the cell's base score plus D lookup-table entries, which equals the
    dot product of the normalized query with the reconstructed item. Ties
    break toward the lower item ordinal.
    """
    if params.nprobe > index.n_cells:
        raise ParameterError(f"nprobe={params.nprobe} exceeds J={index.n_cells}")
    q = np.asarray(query_emb, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.d:
        raise DimensionMismatch(f"query shape {q.shape}, index d={index.d}")
    qhat = unit(q)
    qr = index.rotation.astype(np.float64) @ qhat
    cell_scores = index.coarse.astype(np.float64) @ qr
    probe = np.argsort(-cell_scores, kind="stable")[: params.nprobe]

    sub = index.d // index.n_subspaces
    lut = np.empty((index.n_subspaces, index.n_codewords), dtype=np.float64)
    for j in range(index.n_subspaces):
        lut[j] = index.pq[j].astype(np.float64) @ qr[j * sub : (j + 1) * sub]

    cand_ords: list[np.ndarray] = []
    cand_scores: list[np.ndarray] = []
    cols = np.arange(index.n_subspaces)
    for c in probe:
        members = index.lists[c]
        if members.size == 0:
            continue
        codes = index.pq_codes[members]
        scores = cell_scores[c] + lut[cols, codes].sum(axis=1)
        cand_ords.append(members)
        cand_scores.append(scores)
    if not cand_ords:
        return []
    ords = np.concatenate(cand_ords)
    scores = np.concatenate(cand_scores)
    top = np.lexsort((ords, -scores))[: params.k]
    return [(index.ids[int(ords[t])], float(scores[t])) for t in top]


def offline_build(
    item_embeddings: np.ndarray,
    item_ids: list[str],
    n_cells: int,
    n_codewords: int,
    n_subspaces: int,
    rng: np.random.Generator,
    use_rotation: bool = False,
    kmeans_iters: int = 20,
    rotation_rounds: int = 4,
    sweep_updates: int = 16,
) -> EmbeddingIndex:
    """Post-hoc baseline: cluster frozen embeddings, optionally learn a rotation.

    Without rotation this is plain IVF-PQ fitting (coarse k-means, then
    per-subspace k-means on residuals). With rotation it alternates
    re-clustering with sweeps of steepest-descent rotation updates over the
    full set, then re-fits codebooks under the final rotation.
    """
    emb = np.asarray(item_embeddings)
    if emb.ndim != 2:
        raise DimensionMismatch(f"embeddings must be (n, d), got {emb.shape}")
    n, d = emb.shape
    if n_subspaces < 1 or d % n_subspaces != 0:
        raise ParameterError(f"D={n_subspaces} does not divide d={d}")
    if n < n_cells or n < n_codewords:
        raise ParameterError(
            f"need >= max(J, K) items, got n={n}, J={n_cells}, K={n_codewords}"
        )

    rot = RotationMatrix(d)
    emb32 = np.ascontiguousarray(emb, dtype=np.float32)

    def fit_codebooks(rot32: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        xr = emb32 @ rot32.T if rot32 is not None else emb32
        coarse_fit = kmeans.kmeans_fit(xr, n_cells, rng, iters=kmeans_iters)
        resid = xr.astype(np.float64) - coarse_fit.centroids.astype(np.float64)[
            coarse_fit.assignments
        ]
        sub = d // n_subspaces
        pq = np.empty((n_subspaces, n_codewords, sub), dtype=np.float32)
        for j in range(n_subspaces):
            fit = kmeans.kmeans_fit(
                resid[:, j * sub : (j + 1) * sub], n_codewords, rng, iters=kmeans_iters
            )
            pq[j] = fit.centroids
        return coarse_fit.centroids, pq

    if not use_rotation:
        coarse, pq = fit_codebooks(None)
    else:
        coarse, pq = None, None
        for _ in range(rotation_rounds):
            rot32 = rot.dense.astype(np.float32)
            coarse, pq = fit_codebooks(rot32)
            for _ in range(sweep_updates):
                rot32 = rot.dense.astype(np.float32)
                xr, cc, pc = _fast_encode(emb32, rot32, coarse, pq)
                recon = coarse.astype(np.float64)[cc]
                sub = d // n_subspaces
                for j in range(n_subspaces):
                    recon[:, j * sub : (j + 1) * sub] += pq[j].astype(np.float64)[pc[:, j]]
                err = recon - xr.astype(np.float64)
                steepest_update(rot, xr.astype(np.float64), err, rng)
        coarse, pq = fit_codebooks(rot.dense.astype(np.float32))

    layer = QuantizerLayer(
        coarse, pq, rotation=rot, rotation_enabled=use_rotation
    )
    return build(emb32, item_ids, layer)


# -- serialization ---------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise IndexCorruption(
                f"truncated index: needed {n} bytes for {what}", offset=self.off
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def f32_array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save(index: EmbeddingIndex, path: str) -> None:
    """Write the index to `path` in the binary format above."""
    n = index.n_items
    if len(index.ids) != n:
        raise ParameterError(f"{len(index.ids)} ids for {n} items")
    parts = [
        MAGIC,
        struct.pack(
            "<IIIIII",
            VERSION,
            index.d,
            index.n_subspaces,
            index.n_codewords,
            index.n_cells,
            n,
        ),
        np.ascontiguousarray(index.rotation, dtype="<f4").tobytes(),
        np.ascontiguousarray(index.coarse, dtype="<f4").tobytes(),
        np.ascontiguousarray(index.pq, dtype="<f4").tobytes(),
    ]
    item_dtype = np.dtype([("coarse", "<u4"), ("pq", "u1", (index.n_subspaces,))])
    items = np.empty(n, dtype=item_dtype)
    items["coarse"] = index.coarse_codes
    items["pq"] = index.pq_codes
    parts.append(items.tobytes())
    vocab = bytearray()
    for item_id in index.ids:
        raw = item_id.encode("utf-8")
        if not (1 <= len(raw) <= 0xFFFF):
            raise ParameterError(f"item id length {len(raw)} outside [1, 65535]")
        vocab += struct.pack("<H", len(raw))
        vocab += raw
    parts.append(bytes(vocab))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load(path: str) -> EmbeddingIndex:
    """Read and validate an index file. Raises IndexCorruption on bad bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise IndexCorruption(f"bad magic {magic!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise IndexCorruption(f"unsupported version {version}", offset=4)
    header_off = r.off
    d = r.u32("d")
    n_sub = r.u32("D")
    k = r.u32("K")
    j = r.u32("J")
    n = r.u32("n_items")
    if d < 1 or n_sub < 1 or d % n_sub != 0 or not (1 <= k <= 256) or j < 1:
        raise IndexCorruption(
            f"inconsistent header d={d} D={n_sub} K={k} J={j}", offset=header_off
        )
    rotation = r.f32_array((d, d), "rotation")
    coarse = r.f32_array((j, d), "coarse codebook")
    pq = r.f32_array((n_sub, k, d // n_sub), "pq codebooks")

    items_off = r.off
    item_dtype = np.dtype([("coarse", "<u4"), ("pq", "u1", (n_sub,))])
    raw = r.take(item_dtype.itemsize * n, "item codes")
    items = np.frombuffer(raw, dtype=item_dtype)
    coarse_codes = items["coarse"].copy()
    pq_codes = items["pq"].copy().reshape(n, n_sub)
    if n and coarse_codes.max() >= j:
        raise IndexCorruption("coarse code out of range", offset=items_off)
    if n and pq_codes.max() >= k:
        raise IndexCorruption("pq code out of range", offset=items_off)

    ids = []
    for _ in range(n):
        id_off = r.off
        length = r.u16("id length")
        if length == 0:
            raise IndexCorruption("empty item id", offset=id_off)
        raw_id = r.take(length, "item id")
        try:
            ids.append(raw_id.decode("utf-8"))
        except UnicodeDecodeError:
            raise IndexCorruption("item id is not valid UTF-8", offset=id_off) from None
    if r.off != len(data):
        raise IndexCorruption(
            f"{len(data) - r.off} trailing bytes after vocab", offset=r.off
        )
    return EmbeddingIndex(
        rotation=rotation,
        coarse=coarse,
        pq=pq,
        coarse_codes=coarse_codes,
        pq_codes=pq_codes,
        ids=ids,
    )
