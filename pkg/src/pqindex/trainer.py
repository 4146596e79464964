"""Two-tower training with in-batch hinge loss and the quantization layer in the loop."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .core import Adagrad, cosine, subrng
from .errors import DatasetError, DegenerateInput, ParameterError, StateError
from .quantizer import QuantizerLayer
from .rotation import RotationConfig, steepest_update

INIT_SCALE = 0.05


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    warm_steps=None means 20% of total_steps. The warm phase trains the raw
    towers; at the boundary the quantization layer is initialized and the
    joint phase runs the item side through it with the distortion
    regularizer attached.
    """

    d: int = 64
    n_cells: int = 256  # coarse cells (J)
    n_codewords: int = 16  # per-subspace codewords (K), <= 256
    n_subspaces: int = 8  # PQ subspaces (D), must divide d
    margin: float = 0.1
    learning_rate: float = 0.01
    batch_size: int = 1024
    total_steps: int = 5000
    warm_steps: int | None = None
    reg_weight: float = 0.1
    rotation_period: int = 100
    rotation_enabled: bool = True
    kmeans_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise ParameterError(f"d={self.d} must be >= 2")
        if self.n_subspaces < 1 or self.d % self.n_subspaces != 0:
            raise ParameterError(f"D={self.n_subspaces} must divide d={self.d}")
        if not (1 <= self.n_codewords <= 256):
            raise ParameterError(f"K={self.n_codewords} must be in [1, 256]")
        if self.n_cells < 1:
            raise ParameterError(f"J={self.n_cells} must be >= 1")
        if self.margin <= 0:
            raise ParameterError(f"margin={self.margin} must be > 0")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate={self.learning_rate} must be > 0")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 for in-batch negatives")
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")
        if self.warm_steps is None:
            self.warm_steps = self.total_steps // 5
        if not (0 <= self.warm_steps < self.total_steps):
            raise ParameterError(
                f"warm_steps={self.warm_steps} must be in [0, total_steps)"
            )
        if self.rotation_period < 1:
            raise ParameterError("rotation_period must be >= 1")
        if self.reg_weight < 0:
            raise ParameterError("reg_weight must be >= 0")


class TwoTowerModel:
    """Query and item embedding tables with their Adagrad state."""

    def __init__(self, n_queries: int, n_items: int, cfg: TrainConfig, rng: np.random.Generator):
        if n_queries < 1 or n_items < 1:
            raise ParameterError("need at least one query and one item")
        self.query_table = rng.uniform(
            -INIT_SCALE, INIT_SCALE, size=(n_queries, cfg.d)
        ).astype(np.float32)
        self.item_table = rng.uniform(
            -INIT_SCALE, INIT_SCALE, size=(n_items, cfg.d)
        ).astype(np.float32)
        self.query_opt = Adagrad(self.query_table.shape, lr=cfg.learning_rate)
        self.item_opt = Adagrad(self.item_table.shape, lr=cfg.learning_rate)

    @property
    def d(self) -> int:
        return self.query_table.shape[1]

    def snapshot(self) -> "TwoTowerModel":
        """Deep copy, used by compare to branch from a shared warm trunk."""
        other = copy.copy(self)
        other.query_table = self.query_table.copy()
        other.item_table = self.item_table.copy()
        other.query_opt = self.query_opt.clone()
        other.item_opt = self.item_opt.clone()
        return other


class LayerOptim:
    """Adagrad state for the layer's codebooks."""

    def __init__(self, layer: QuantizerLayer, lr: float):
        self.coarse_opt = Adagrad(layer.coarse.shape, lr=lr)
        self.pq_opt = Adagrad(layer.pq.shape, lr=lr)


def score(query_emb, item_emb) -> float:
    """Relevance of one query/item pair: cosine similarity."""
    return cosine(query_emb, item_emb)


def hinge_loss_inbatch(scores: np.ndarray, margin: float) -> tuple[float, np.ndarray]:
    """In-batch hinge loss and its gradient with respect to the score matrix.

    scores[i, i] is the positive pair for row i; every other column is a
    negative. Loss is the mean over the B(B-1) ordered pairs of
    max(0, margin - s_ii + s_ij).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ParameterError(f"scores must be square, got {s.shape}")
    b = s.shape[0]
    if b < 2:
        raise ParameterError("in-batch hinge needs batch size >= 2")
    diag = np.diagonal(s)
    viol = margin - diag[:, None] + s
    np.fill_diagonal(viol, 0.0)
    active = viol > 0.0
    denom = b * (b - 1)
    loss = float(viol[active].sum() / denom)
    dscores = active.astype(np.float64) / denom
    np.fill_diagonal(dscores, -active.sum(axis=1) / denom)
    return loss, dscores


def _normalize_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms == 0.0):
        raise DegenerateInput(f"zero-norm {what} embedding in batch")
    return x / norms[:, None], norms


def batch_gradients(
    q_embs: np.ndarray, item_embs: np.ndarray, margin: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Hinge loss over a batch and its gradients on the raw embeddings.

    item_embs is whatever the item tower emitted for scoring; under the
    straight-through estimator the returned item gradient is applied to the
    pre-quantization embedding unchanged.

    Returns (loss, grad_queries, grad_items), gradients in float64.
    """
    q = np.asarray(q_embs, dtype=np.float64)
    e = np.asarray(item_embs, dtype=np.float64)
    if q.shape != e.shape:
        raise ParameterError(f"batch shapes differ: {q.shape} vs {e.shape}")
    if q.shape[0] == 0:
        raise DegenerateInput("empty batch")
    qn, qnorm = _normalize_rows(q, "query")
    en, enorm = _normalize_rows(e, "item")
    scores = qn @ en.T
    loss, dscores = hinge_loss_inbatch(scores, margin)
    dqn = dscores @ en
    den = dscores.T @ qn
    # gradient through x/||x||: (g - (g.xhat) xhat) / ||x||
    gq = (dqn - np.einsum("ij,ij->i", dqn, qn)[:, None] * qn) / qnorm[:, None]
    ge = (den - np.einsum("ij,ij->i", den, en)[:, None] * en) / enorm[:, None]
    return loss, gq, ge


def train_step(
    model: TwoTowerModel,
    batch: np.ndarray,
    cfg: TrainConfig,
    phase: str,
    layer: QuantizerLayer | None = None,
    layer_opt: LayerOptim | None = None,
    rot_rng: np.random.Generator | None = None,
    do_rotation: bool = False,
    collect_grads: bool = False,
) -> dict:
    """One SGD step. In the joint phase the item side is quantized before
    scoring (straight-through backward) and the codebooks get regularizer
    gradients.

    Returns the step's metrics.
    """
    if phase not in ("warm", "joint"):
        raise ParameterError(f"phase must be 'warm' or 'joint', got {phase!r}")
    if phase == "joint" and layer is None:
        raise StateError("joint phase requires the quantization layer")
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != 2:
        raise ParameterError(f"batch must be (B, 2) id pairs, got {batch.shape}")
    if batch.shape[0] < 2:
        raise DegenerateInput("train_step needs batch size >= 2")
    q_ids = batch[:, 0]
    i_ids = batch[:, 1]
    q_rows = model.query_table[q_ids].astype(np.float64)
    raw_items = model.item_table[i_ids]

    metrics: dict = {"phase": phase}
    if phase == "warm":
        emitted = raw_items.astype(np.float64)
        reg = None
    else:
        reg = layer.reg_loss_and_grads(raw_items)
        emitted = layer.rotate_back(reg.recon)

    loss, gq, ge = batch_gradients(q_rows, emitted, cfg.margin)
    metrics["hinge_loss"] = loss

    model.query_opt.step_rows(model.query_table, gq, q_ids)
    # straight-through: the scoring gradient lands on the raw item rows
    model.item_opt.step_rows(model.item_table, ge, i_ids)

    if reg is not None:
        b = batch.shape[0]
        mean_dist = reg.loss_sum / b
        metrics["reg_loss"] = cfg.reg_weight * mean_dist
        metrics["mean_distortion"] = mean_dist
        metrics["coarse_utilization"] = (
            float(np.unique(reg.coarse_codes).size) / layer.n_cells
        )
        if cfg.reg_weight > 0.0 and layer_opt is not None:
            scale = cfg.reg_weight / b
            layer_opt.coarse_opt.step(layer.coarse, reg.coarse_grad * scale)
            layer_opt.pq_opt.step(layer.pq, reg.pq_grad * scale)
        if do_rotation and layer.rotation_enabled:
            if rot_rng is None:
                raise ParameterError("rotation update requested without an RNG")
            rot = steepest_update(layer.rotation, reg.xr, reg.err, rot_rng)
            metrics["rotation"] = {
                "pair": rot["pair"],
                "theta": rot["theta"],
                "distortion_drop": rot["before"] - rot["after"],
            }
    else:
        metrics["reg_loss"] = 0.0
        metrics["mean_distortion"] = 0.0
        metrics["coarse_utilization"] = 0.0

    if collect_grads:
        metrics["grad_queries"] = gq
        metrics["grad_items"] = ge
        metrics["emitted_items"] = emitted
    return metrics


@dataclass
class TrainResult:
    model: TwoTowerModel
    layer: QuantizerLayer | None
    log: list[dict] = field(default_factory=list)


def run_phase(
    model: TwoTowerModel,
    pairs: np.ndarray,
    cfg: TrainConfig,
    n_steps: int,
    batch_rng: np.random.Generator,
    layer: QuantizerLayer | None = None,
    layer_opt: LayerOptim | None = None,
    rot_rng: np.random.Generator | None = None,
    log: list[dict] | None = None,
    step_offset: int = 0,
) -> list[dict]:
    """Run n_steps of one phase, appending per-step records to the log."""
    if log is None:
        log = []
    n_pairs = pairs.shape[0]
    if n_pairs == 0:
        raise DegenerateInput("no training pairs")
    for i in range(n_steps):
        idx = batch_rng.integers(0, n_pairs, size=cfg.batch_size)
        do_rot = (
            layer is not None
            and cfg.rotation_enabled
            and (i + 1) % cfg.rotation_period == 0
        )
        m = train_step(
            model,
            pairs[idx],
            cfg,
            phase="warm" if layer is None else "joint",
            layer=layer,
            layer_opt=layer_opt,
            rot_rng=rot_rng,
            do_rotation=do_rot,
        )
        m["step"] = step_offset + i + 1
        log.append(m)
    return log


def make_layer(
    model: TwoTowerModel,
    cfg: TrainConfig,
    cold_start: bool,
    kmeans_rng: np.random.Generator,
    cold_rng: np.random.Generator,
) -> QuantizerLayer:
    """Build the quantization layer at the warm/joint boundary."""
    if cold_start:
        return QuantizerLayer.cold_start(
            cfg.d,
            cfg.n_cells,
            cfg.n_codewords,
            cfg.n_subspaces,
            cold_rng,
            reg_weight=cfg.reg_weight,
            rotation_enabled=cfg.rotation_enabled,
        )
    return QuantizerLayer.warm_start(
        model.item_table,
        cfg.n_cells,
        cfg.n_codewords,
        cfg.n_subspaces,
        kmeans_rng,
        reg_weight=cfg.reg_weight,
        rotation_enabled=cfg.rotation_enabled,
        kmeans_iters=cfg.kmeans_iters,
    )


def _checked_pairs(dataset) -> np.ndarray:
    pairs = np.asarray(dataset.pairs)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] == 0:
        raise DatasetError(f"pairs must be a nonempty (N, 2) array, got {pairs.shape}")
    if pairs.min() < 0 or pairs[:, 0].max() >= dataset.n_queries or pairs[:, 1].max() >= dataset.n_items:
        raise DatasetError("pair ordinals fall outside the vocab tables")
    return pairs


def run_plain_training(dataset, cfg: TrainConfig) -> TrainResult:
    """Train the towers alone for total_steps, no quantization layer.

    Same RNG fan-out as run_training, so the first warm_steps batches
    coincide with a joint run at the same seed.
    """
    pairs = _checked_pairs(dataset)
    model = TwoTowerModel(
        dataset.n_queries, dataset.n_items, cfg, subrng(cfg.seed, "init")
    )
    log = run_phase(model, pairs, cfg, cfg.total_steps, subrng(cfg.seed, "batches"))
    return TrainResult(model=model, layer=None, log=log)


def run_training(dataset, cfg: TrainConfig, cold_start: bool = False) -> TrainResult:
    """Full schedule: warm phase, layer init at the boundary, joint phase.

    `dataset` needs n_queries, n_items and a (N, 2) pairs array of
    (query ordinal, item ordinal). All randomness fans out from cfg.seed.
    """
    pairs = _checked_pairs(dataset)
    model = TwoTowerModel(
        dataset.n_queries, dataset.n_items, cfg, subrng(cfg.seed, "init")
    )
    batch_rng = subrng(cfg.seed, "batches")
    log: list[dict] = []
    run_phase(model, pairs, cfg, cfg.warm_steps, batch_rng, log=log)
    layer = make_layer(
        model, cfg, cold_start, subrng(cfg.seed, "warmstart"), subrng(cfg.seed, "coldstart")
    )
    layer_opt = LayerOptim(layer, cfg.learning_rate)
    run_phase(
        model,
        pairs,
        cfg,
        cfg.total_steps - cfg.warm_steps,
        batch_rng,
        layer=layer,
        layer_opt=layer_opt,
        rot_rng=subrng(cfg.seed, "rotation"),
        log=log,
        step_offset=cfg.warm_steps,
    )
    return TrainResult(model=model, layer=layer, log=log)
