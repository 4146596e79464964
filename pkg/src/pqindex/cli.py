"""Command line pipeline: generate data, train, search, evaluate, compare.

Configuration is a flat key=value file (keys spelled like the long flags,
without the leading dashes); explicit command line flags win over the file,
the file wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from .core import subrng
from .data import BlobConfig, generate_blobs, ingest, write_pairs
from .errors import (
    DatasetError,
    DegenerateInput,
    DimensionMismatch,
    IndexCorruption,
    ParameterError,
    StateError,
)
from .evaluate import EvalRecord, evaluate_all
from .index import SearchParams, build, load, offline_build, save, search
from .trainer import (
    LayerOptim,
    TrainConfig,
    TwoTowerModel,
    make_layer,
    run_phase,
    run_plain_training,
    run_training,
)

# config-file key, TrainConfig field, cast
_TRAIN_KEYS = [
    ("d", "d", int),
    ("J", "n_cells", int),
    ("K", "n_codewords", int),
    ("D", "n_subspaces", int),
    ("steps", "total_steps", int),
    ("warm-steps", "warm_steps", int),
    ("margin", "margin", float),
    ("lr", "learning_rate", float),
    ("batch", "batch_size", int),
    ("lambda", "reg_weight", float),
    ("rotation-period", "rotation_period", int),
    ("kmeans-iters", "kmeans_iters", int),
    ("seed", "seed", int),
]
_PATH_KEYS = ["data", "eval-data", "index", "log", "out"]
_BOOL_KEYS = ["no-rotation", "cold-start", "offline-baseline"]
_LIST_KEYS = ["k", "nprobe"]
_KNOWN_KEYS = (
    {k for k, _, _ in _TRAIN_KEYS}
    | set(_PATH_KEYS)
    | set(_BOOL_KEYS)
    | set(_LIST_KEYS)
)

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def read_config(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ParameterError(f"cannot read config {path}: {e}") from e
    out: dict[str, str] = {}
    for ln, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParameterError(f"{path}:{ln}: expected key=value, got {stripped!r}")
        key, _, val = stripped.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ParameterError(f"{path}:{ln}: unknown config key {key!r}")
        out[key] = val.strip()
    return out


def _cast(key: str, raw: str, cast):
    try:
        return cast(raw)
    except ValueError as e:
        raise ParameterError(f"config key {key}={raw!r}: {e}") from e


def _parse_bool(key: str, raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.lower()]
    except KeyError:
        raise ParameterError(f"config key {key}={raw!r} is not a boolean") from None


def _parse_int_list(key: str, raw: str) -> list[int]:
    try:
        vals = [int(tok) for tok in raw.split(",") if tok.strip() != ""]
    except ValueError as e:
        raise ParameterError(f"{key}={raw!r}: {e}") from e
    if not vals or any(v < 1 for v in vals):
        raise ParameterError(f"{key}={raw!r} must be positive integers")
    return vals


@dataclass
class RunConfig:
    """Everything a command needs: hyperparameters, paths, mode flags."""

    train: TrainConfig
    data: str | None
    eval_data: str | None
    index: str | None
    log: str | None
    out: str | None
    k_list: list[int]
    nprobe_list: list[int]
    cold_start: bool
    offline_baseline: bool


def resolve(args: argparse.Namespace) -> RunConfig:
    filecfg = read_config(args.config) if getattr(args, "config", None) else {}

    kwargs = {}
    for key, fld, cast in _TRAIN_KEYS:
        v = getattr(args, fld, None)
        if v is None and key in filecfg:
            v = _cast(key, filecfg[key], cast)
        if v is not None:
            kwargs[fld] = v

    def flag(key: str, attr: str) -> bool:
        v = getattr(args, attr, None)
        if v is None and key in filecfg:
            v = _parse_bool(key, filecfg[key])
        return bool(v)

    def path(key: str, attr: str) -> str | None:
        v = getattr(args, attr, None)
        if v is None and key in filecfg:
            v = filecfg[key]
        return v

    def int_list(key: str, attr: str, default: list[int]) -> list[int]:
        v = getattr(args, attr, None)
        if v is None and key in filecfg:
            v = filecfg[key]
        if v is None:
            return list(default)
        return _parse_int_list(key, str(v))

    kwargs["rotation_enabled"] = not flag("no-rotation", "no_rotation")
    return RunConfig(
        train=TrainConfig(**kwargs),
        data=path("data", "data"),
        eval_data=path("eval-data", "eval_data"),
        index=path("index", "index"),
        log=path("log", "log"),
        out=path("out", "out"),
        k_list=int_list("k", "k", [10, 100]),
        nprobe_list=int_list("nprobe", "nprobe", [16]),
        cold_start=flag("cold-start", "cold_start"),
        offline_baseline=flag("offline-baseline", "offline_baseline"),
    )


def _require(value, name: str):
    if not value:
        raise ParameterError(f"{name} is required")
    return value


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=_jsonable)
        fh.write("\n")


def _sidecar_path(index_path: str) -> str:
    return index_path + ".queries.npz"


def _save_queries(index_path: str, query_ids: list[str], query_table: np.ndarray) -> None:
    np.savez(
        _sidecar_path(index_path),
        ids=np.asarray(query_ids, dtype=np.str_),
        table=np.ascontiguousarray(query_table, dtype=np.float32),
    )


def _load_queries(index_path: str) -> tuple[dict[str, int], np.ndarray]:
    path = _sidecar_path(index_path)
    try:
        with np.load(path) as data:
            ids = [str(s) for s in data["ids"]]
            table = np.asarray(data["table"], dtype=np.float32)
    except OSError as e:
        raise ParameterError(
            f"no query embeddings found at {path} (train writes them next to the index)"
        ) from e
    return {q: i for i, q in enumerate(ids)}, table


def _write_log(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=_jsonable) + "\n")


def _check_written_index(path: str, cfg: TrainConfig, n_items: int) -> None:
    """Reload the file just written and verify the header matches the run."""
    idx = load(path)
    got = (idx.d, idx.n_subspaces, idx.n_codewords, idx.n_cells, idx.n_items)
    want = (cfg.d, cfg.n_subspaces, cfg.n_codewords, cfg.n_cells, n_items)
    if got != want:
        raise StateError(f"written index header {got} does not match run config {want}")


def _eval_sets(eval_data) -> dict[str, set[str]]:
    """Group held-out pairs into per-query relevant sets, first-appearance order."""
    sets: dict[str, set[str]] = {}
    for q_ord, i_ord in eval_data.pairs:
        q = eval_data.query_ids[q_ord]
        sets.setdefault(q, set()).add(eval_data.item_ids[i_ord])
    return sets


def _eval_index(
    index,
    query_ord: dict[str, int],
    query_table: np.ndarray,
    sets: dict[str, set[str]],
    k_list: list[int],
    nprobe: int,
) -> dict:
    k_max = max(k_list)
    k_eff = min(k_max, index.n_items)
    params = SearchParams(k=k_eff, nprobe=min(nprobe, index.n_cells))
    records = []
    unknown = 0
    for qid, rel in sets.items():
        row = query_ord.get(qid)
        if row is None:
            unknown += 1
            continue
        hits = search(index, query_table[row], params)
        records.append(EvalRecord(qid, rel, [iid for iid, _ in hits]))
    if not records:
        raise DatasetError("no evaluable queries: none appear in the trained vocab")
    report = evaluate_all(records, k_list)
    report["nprobe"] = params.nprobe
    report["unknown_queries"] = unknown
    return report


def _print_kv(prefix: str, report: dict, skip: tuple[str, ...] = ()) -> None:
    for key, val in report.items():
        if key in skip:
            continue
        if isinstance(val, float):
            print(f"{prefix}{key}={val:.6f}")
        else:
            print(f"{prefix}{key}={val}")


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = BlobConfig(
        n_clusters=args.clusters,
        n_items=args.items,
        n_queries=args.queries,
        n_train_pairs=args.train_pairs,
        n_eval_pairs=args.eval_pairs,
        latent_dim=args.latent_dim,
        cluster_std=args.cluster_std,
        affinity_temp=args.affinity_temp,
        seed=args.seed,
    )
    blob = generate_blobs(cfg)
    train_pairs = [
        (blob.train.query_ids[q], blob.train.item_ids[s]) for q, s in blob.train.pairs
    ]
    stamp = f"blobs clusters={cfg.n_clusters} seed={cfg.seed}"
    write_pairs(args.out_train, train_pairs, comment=f"train {stamp}")
    write_pairs(args.out_eval, blob.eval_pairs, comment=f"eval {stamp}")
    print(f"train_pairs={len(train_pairs)}")
    print(f"eval_pairs={len(blob.eval_pairs)}")
    print(f"queries={blob.train.n_queries}")
    print(f"items={blob.train.n_items}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    rc = resolve(args)
    _require(rc.data, "--data")
    _require(rc.index, "--index")
    dataset = ingest(rc.data)
    if dataset.malformed:
        print(f"warning: skipped {dataset.malformed} malformed lines", file=sys.stderr)
    cfg = rc.train
    t0 = time.perf_counter()
    if rc.offline_baseline:
        result = run_plain_training(dataset, cfg)
        index = offline_build(
            result.model.item_table,
            dataset.item_ids,
            cfg.n_cells,
            cfg.n_codewords,
            cfg.n_subspaces,
            subrng(cfg.seed, "offline"),
            use_rotation=cfg.rotation_enabled,
            kmeans_iters=cfg.kmeans_iters,
        )
    else:
        result = run_training(dataset, cfg, cold_start=rc.cold_start)
        index = build(result.model.item_table, dataset.item_ids, result.layer)
    elapsed = time.perf_counter() - t0

    save(index, rc.index)
    _save_queries(rc.index, dataset.query_ids, result.model.query_table)
    _write_log(rc.log or rc.index + ".log.jsonl", result.log)
    _check_written_index(rc.index, cfg, dataset.n_items)

    last = result.log[-1]
    print(f"pairs={dataset.pairs.shape[0]}")
    print(f"queries={dataset.n_queries}")
    print(f"items={dataset.n_items}")
    print(f"final_hinge_loss={last['hinge_loss']:.6f}")
    print(f"final_mean_distortion={last['mean_distortion']:.6f}")
    print(f"train_seconds={elapsed:.2f}")
    print(f"index={rc.index}")
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    index = load(_require(args.index, "--index"))
    if args.query_id is not None:
        query_ord, table = _load_queries(args.index)
        row = query_ord.get(args.query_id)
        if row is None:
            raise ParameterError(f"unknown query id {args.query_id!r}")
        q = table[row]
    elif args.vector is not None:
        try:
            q = np.array([float(t) for t in args.vector.split(",")], dtype=np.float32)
        except ValueError as e:
            raise ParameterError(f"bad --vector: {e}") from e
    else:
        raise ParameterError("need --query-id or --vector")

    k = args.k
    if k > index.n_items:
        print(
            f"warning: k={k} exceeds n_items={index.n_items}, returning all items",
            file=sys.stderr,
        )
        k = index.n_items
    nprobe = args.nprobe
    if nprobe > index.n_cells:
        print(
            f"warning: nprobe={nprobe} exceeds J={index.n_cells}, probing all cells",
            file=sys.stderr,
        )
        nprobe = index.n_cells
    hits = search(index, q, SearchParams(k=k, nprobe=nprobe))
    for rank, (iid, s) in enumerate(hits, 1):
        print(f"{rank}\t{iid}\t{s:.6f}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    rc = resolve(args)
    index = load(_require(rc.index, "--index"))
    eval_data = ingest(_require(rc.eval_data, "--eval-data"))
    if eval_data.malformed:
        print(f"warning: skipped {eval_data.malformed} malformed lines", file=sys.stderr)
    query_ord, table = _load_queries(rc.index)
    sets = _eval_sets(eval_data)
    grid = []
    for nprobe in rc.nprobe_list:
        report = _eval_index(index, query_ord, table, sets, rc.k_list, nprobe)
        grid.append(report)
        _print_kv(f"nprobe={report['nprobe']} ", report, skip=("nprobe",))
    if rc.out:
        _write_json(rc.out, {"index": rc.index, "grid": grid})
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    """Branch a shared warm trunk into joint training vs post-hoc indexing.

    Both branches consume identically seeded batch streams, so the only
    difference is whether the quantization layer is in the training loop.
    """
    rc = resolve(args)
    cfg = rc.train
    dataset = ingest(_require(rc.data, "--data"))
    eval_data = ingest(_require(rc.eval_data, "--eval-data"))
    sets = _eval_sets(eval_data)

    model = TwoTowerModel(
        dataset.n_queries, dataset.n_items, cfg, subrng(cfg.seed, "init")
    )
    run_phase(model, dataset.pairs, cfg, cfg.warm_steps, subrng(cfg.seed, "batches"))
    rest = cfg.total_steps - cfg.warm_steps

    joint = model.snapshot()
    layer = make_layer(
        joint, cfg, rc.cold_start, subrng(cfg.seed, "warmstart"), subrng(cfg.seed, "coldstart")
    )
    run_phase(
        joint,
        dataset.pairs,
        cfg,
        rest,
        subrng(cfg.seed, "branch-batches"),
        layer=layer,
        layer_opt=LayerOptim(layer, cfg.learning_rate),
        rot_rng=subrng(cfg.seed, "rotation"),
        step_offset=cfg.warm_steps,
    )
    t0 = time.perf_counter()
    joint_index = build(joint.item_table, dataset.item_ids, layer)
    joint_build_s = time.perf_counter() - t0

    plain = model.snapshot()
    run_phase(
        plain,
        dataset.pairs,
        cfg,
        rest,
        subrng(cfg.seed, "branch-batches"),
        step_offset=cfg.warm_steps,
    )
    t0 = time.perf_counter()
    offline_index = offline_build(
        plain.item_table,
        dataset.item_ids,
        cfg.n_cells,
        cfg.n_codewords,
        cfg.n_subspaces,
        subrng(cfg.seed, "offline"),
        use_rotation=cfg.rotation_enabled,
        kmeans_iters=cfg.kmeans_iters,
    )
    offline_build_s = time.perf_counter() - t0

    nprobe = rc.nprobe_list[0]
    joint_rep = _eval_index(
        joint_index, dataset.query_ord, joint.query_table, sets, rc.k_list, nprobe
    )
    offline_rep = _eval_index(
        offline_index, dataset.query_ord, plain.query_table, sets, rc.k_list, nprobe
    )
    delta = {
        key: joint_rep[key] - offline_rep[key]
        for key in joint_rep
        if key.startswith(("p@", "r@"))
    }
    _print_kv("joint.", joint_rep)
    _print_kv("offline.", offline_rep)
    _print_kv("delta.", delta)
    print(f"build.joint_seconds={joint_build_s:.3f}")
    print(f"build.offline_seconds={offline_build_s:.3f}")
    if rc.out:
        _write_json(
            rc.out,
            {
                "config": asdict(cfg),
                "joint": joint_rep,
                "offline": offline_rep,
                "delta": delta,
                "build_seconds": {
                    "joint": joint_build_s,
                    "offline": offline_build_s,
                },
            },
        )
    return 0


# -- argument parsing ------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--data", default=None)
    p.add_argument("--eval-data", dest="eval_data", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--log", default=None, help="training log path (JSON lines)")
    p.add_argument("--out", default=None, help="machine-readable JSON report path")
    p.add_argument("--d", dest="d", type=int, default=None, help="embedding dim")
    p.add_argument("--J", dest="n_cells", type=int, default=None, help="coarse cells")
    p.add_argument("--K", dest="n_codewords", type=int, default=None, help="codewords per subspace")
    p.add_argument("--D", dest="n_subspaces", type=int, default=None, help="PQ subspaces")
    p.add_argument("--steps", dest="total_steps", type=int, default=None)
    p.add_argument("--warm-steps", dest="warm_steps", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch", dest="batch_size", type=int, default=None)
    p.add_argument("--lambda", dest="reg_weight", type=float, default=None)
    p.add_argument("--rotation-period", dest="rotation_period", type=int, default=None)
    p.add_argument("--kmeans-iters", dest="kmeans_iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", default=None, help="comma-separated cutoffs, default 10,100")
    p.add_argument("--nprobe", default=None, help="comma-separated probe counts, default 16")
    p.add_argument("--no-rotation", dest="no_rotation", action="store_true", default=None)
    p.add_argument("--cold-start", dest="cold_start", action="store_true", default=None)
    p.add_argument("--offline-baseline", dest="offline_baseline", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqindex",
        description="Two-tower retrieval with a trained product-quantization index.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic clustered dataset")
    g.add_argument("--out-train", required=True)
    g.add_argument("--out-eval", required=True)
    g.add_argument("--clusters", type=int, default=50)
    g.add_argument("--items", type=int, default=10_000)
    g.add_argument("--queries", type=int, default=2_000)
    g.add_argument("--train-pairs", type=int, default=100_000)
    g.add_argument("--eval-pairs", type=int, default=10_000)
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--cluster-std", type=float, default=0.35)
    g.add_argument("--affinity-temp", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the towers and write the index")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="query a saved index")
    s.add_argument("--index", required=True)
    s.add_argument("--query-id", dest="query_id", default=None)
    s.add_argument("--vector", default=None, help="comma-separated floats")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--nprobe", type=int, default=16)
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("evaluate", help="precision/recall grid on held-out pairs")
    _add_config_flags(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="joint training vs post-hoc index, same data")
    _add_config_flags(c)
    c.set_defaults(func=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ParameterError,
        DatasetError,
        DimensionMismatch,
        DegenerateInput,
        StateError,
        IndexCorruption,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
