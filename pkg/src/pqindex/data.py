"""Interaction data: TSV ingestion and a synthetic blob generator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import subrng
from .errors import DatasetError

MAX_ID_BYTES = 256


@dataclass
class PairData:
    """Positive pairs as ordinals, with the vocab tables that define them."""

    query_ids: list[str]
    item_ids: list[str]
    pairs: np.ndarray  # (N, 2) int64 of (query ordinal, item ordinal)
    malformed: int = 0
    query_ord: dict[str, int] = field(default_factory=dict)
    item_ord: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.query_ord:
            self.query_ord = {q: i for i, q in enumerate(self.query_ids)}
        if not self.item_ord:
            self.item_ord = {s: i for i, s in enumerate(self.item_ids)}

    @property
    def n_queries(self) -> int:
        return len(self.query_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


def _valid_id(token: str) -> bool:
    return 0 < len(token.encode("utf-8")) <= MAX_ID_BYTES


def pairs_to_data(string_pairs: list[tuple[str, str]], malformed: int = 0) -> PairData:
    """Assign first-appearance ordinals to a list of (query_id, item_id) pairs."""
    if not string_pairs:
        raise DatasetError("no valid pairs")
    query_ord: dict[str, int] = {}
    item_ord: dict[str, int] = {}
    rows = np.empty((len(string_pairs), 2), dtype=np.int64)
    for n, (q, s) in enumerate(string_pairs):
        if q not in query_ord:
            query_ord[q] = len(query_ord)
        if s not in item_ord:
            item_ord[s] = len(item_ord)
        rows[n, 0] = query_ord[q]
        rows[n, 1] = item_ord[s]
    return PairData(
        query_ids=list(query_ord),
        item_ids=list(item_ord),
        pairs=rows,
        malformed=malformed,
        query_ord=query_ord,
        item_ord=item_ord,
    )


def ingest(path: str) -> PairData:
    """Read a TSV of query_id TAB item_id lines.

    '#' lines and blank lines are skipped. Malformed lines (wrong field
    count, empty or oversized ids) are counted, not fatal; a file with zero
    valid lines is an error. Ordinals follow first appearance, duplicates
    are kept.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read dataset {path}: {e}") from e
    pairs: list[tuple[str, str]] = []
    malformed = 0
    for line in lines:
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not _valid_id(fields[0]) or not _valid_id(fields[1]):
            malformed += 1
            continue
        pairs.append((fields[0], fields[1]))
    if not pairs:
        raise DatasetError(f"no valid pairs in {path} ({malformed} malformed lines)")
    return pairs_to_data(pairs, malformed=malformed)


def write_pairs(path: str, string_pairs: list[tuple[str, str]], comment: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for q, s in string_pairs:
            fh.write(f"{q}\t{s}\n")


# -- synthetic blobs -------------------------------------------------------


@dataclass
class BlobConfig:
    """Clustered interaction data with controllable within-cluster structure.

    Items and queries get latent positions around their cluster center;
    pairs link a query to items of its own cluster, preferring latent
    neighbors when affinity_temp is finite. Smaller affinity_temp makes the
    within-cluster ranking problem sharper; affinity_temp <= 0 pairs
    uniformly inside the cluster.
    """

    n_clusters: int = 50
    n_items: int = 10_000
    n_queries: int = 2_000
    n_train_pairs: int = 100_000
    n_eval_pairs: int = 10_000
    latent_dim: int = 16
    cluster_std: float = 0.35
    affinity_temp: float = 0.5
    seed: int = 0


@dataclass
class BlobData:
    train: PairData
    eval_pairs: list[tuple[str, str]]  # held out, vocab-consistent with train


def _sample_pairs(
    rng: np.random.Generator,
    n_pairs: int,
    n_queries: int,
    query_cluster: np.ndarray,
    cluster_members: list[np.ndarray],
    weights: list[np.ndarray],
) -> list[tuple[int, int]]:
    q_draws = rng.integers(0, n_queries, size=n_pairs)
    counts = np.bincount(q_draws, minlength=n_queries)
    out: list[tuple[int, int]] = []
    for q in range(n_queries):
        m = counts[q]
        if m == 0:
            continue
        members = cluster_members[query_cluster[q]]
        picks = rng.choice(members, size=m, p=weights[q])
        out.extend((q, int(i)) for i in picks)
    return out


def generate_blobs(cfg: BlobConfig) -> BlobData:
    """Deterministic clustered dataset; relevance is same-cluster pairing."""
    if cfg.n_clusters < 1 or cfg.n_items < cfg.n_clusters or cfg.n_queries < 1:
        raise DatasetError("blob config needs n_items >= n_clusters >= 1 and queries")
    rng = subrng(cfg.seed, "blobgen")
    centers = rng.normal(0.0, 1.0, size=(cfg.n_clusters, cfg.latent_dim))
    item_cluster = np.arange(cfg.n_items) % cfg.n_clusters
    query_cluster = np.arange(cfg.n_queries) % cfg.n_clusters
    item_latent = centers[item_cluster] + cfg.cluster_std * rng.normal(
        0.0, 1.0, size=(cfg.n_items, cfg.latent_dim)
    )
    query_latent = centers[query_cluster] + cfg.cluster_std * rng.normal(
        0.0, 1.0, size=(cfg.n_queries, cfg.latent_dim)
    )
    cluster_members = [np.flatnonzero(item_cluster == c) for c in range(cfg.n_clusters)]

    weights: list[np.ndarray] = []
    for q in range(cfg.n_queries):
        members = cluster_members[query_cluster[q]]
        if cfg.affinity_temp <= 0:
            w = np.full(members.size, 1.0 / members.size)
        else:
            diff = item_latent[members] - query_latent[q]
            d2 = np.einsum("ij,ij->i", diff, diff)
            logits = -d2 / (2.0 * cfg.affinity_temp**2)
            logits -= logits.max()
            w = np.exp(logits)
            w /= w.sum()
        weights.append(w)

    train_ord = _sample_pairs(
        rng, cfg.n_train_pairs, cfg.n_queries, query_cluster, cluster_members, weights
    )
    eval_ord = _sample_pairs(
        rng, cfg.n_eval_pairs, cfg.n_queries, query_cluster, cluster_members, weights
    )

    qid = [f"q{q:06d}" for q in range(cfg.n_queries)]
    iid = [f"i{s:06d}" for s in range(cfg.n_items)]
    train_pairs = [(qid[q], iid[s]) for q, s in train_ord]
    train = pairs_to_data(train_pairs)
    seen = set(train_ord)
    eval_pairs = [
        (qid[q], iid[s])
        for q, s in eval_ord
        if (q, s) not in seen and qid[q] in train.query_ord and iid[s] in train.item_ord
    ]
    return BlobData(train=train, eval_pairs=eval_pairs)
