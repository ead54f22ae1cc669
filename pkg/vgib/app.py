import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session

from vgib.database.database import get_db, init_db
from vgib.database.models import RunStatus
from vgib.exceptions import (
    ArchitectureMismatchError,
    CheckpointError,
    ConfigError,
    DatasetError,
    DomainError,
    EvaluationError,
    InvalidTableError,
    NonFiniteError,
    ShapeError,
    VGIBError,
)
from vgib.schemas import CheckpointDocument, RunManifest, ScoreRecord, TrainConfig
from vgib.services.bottleneck_service import NoiseDraws, select_subgraph, vgib_loss
from vgib.services.gnn_service import ExplainerModel, GNNModel
from vgib.services.graph_service import Graph, GraphService, describe_validation_error
from vgib.services.metrics_service import PROPERTIES, MetricsService, read_scores, write_scores
from vgib.services.run_service import RunService
from vgib.services.theory_service import MARGIN_TOLERANCE, TheoryService
from vgib.services.training_service import (
    PREDICT_BATCH_SIZE,
    TrainingService,
    build_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    write_metrics_csv,
)
from vgib.utils import autodiff as ad
from vgib.utils.autodiff import Rng
from vgib.utils.parsers import parse_fractions, parse_k_list, parse_motif

# ==================== Environment & Logging ====================

ENV = os.getenv("VGIB_ENV", "development")
IS_PRODUCTION = ENV == "production"

# Logs go to stderr; stdout and output files carry results only.
logging.basicConfig(level=logging.INFO if IS_PRODUCTION else logging.DEBUG)
logger = logging.getLogger(__name__)

DEFAULT_K_LIST = "0.30:0.05:0.60"
GRADCHECK_FEATURE_DIM = 4

# Subcommands that do not get their own registry row.
UNRECORDED = {"runs", "replay"}


def _default_seed() -> int:
    raw = os.getenv("VGIB_SEED")
    if raw is None or not raw.strip():
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"VGIB_SEED must be a non-negative integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigError(f"VGIB_SEED must be a non-negative integer, got {raw!r}")
    return seed


# ==================== Results & Manifests ====================


@dataclass
class CommandResult:
    """What a subcommand produced; main() turns it into a manifest and a registry row."""

    exit_code: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    manifest_path: Optional[Path] = None
    message: Optional[str] = None


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _artifact_hashes(outputs: Dict[str, str]) -> Dict[str, str]:
    return {path: file_digest(Path(path)) for path in sorted(outputs.values()) if Path(path).is_file()}


def _flag_config(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}


def _sibling(path: str, suffix: str) -> Path:
    return Path(f"{path}{suffix}")


def _write_json(payload: Dict[str, Any], path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot write ({exc.strerror})") from None


def write_manifest(
    result: CommandResult, subcommand: str, argv: Sequence[str], seed: Optional[int], started_at: datetime
) -> Dict[str, str]:
    """Write the run manifest next to the outputs; returns the artifact hashes it records."""
    hashes = _artifact_hashes(result.outputs)
    manifest = RunManifest(
        subcommand=subcommand,
        argv=list(argv),
        config=result.config,
        inputs=result.inputs,
        outputs=result.outputs,
        seed=seed,
        started_at=started_at,
        finished_at=datetime.utcnow(),
        artifact_hashes=hashes,
        summary=result.summary,
        exit_code=result.exit_code,
    )
    _write_json(manifest.model_dump(mode="json"), result.manifest_path)
    logger.debug(f"Wrote manifest {result.manifest_path}")
    return hashes


def _write_rows(path: Optional[str], header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    """CSV to ``path``, or to stdout when no path is given."""
    if path is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot write ({exc.strerror})") from None


# ==================== Shared helpers ====================


def _train_config(args: argparse.Namespace, task: str) -> TrainConfig:
    try:
        return TrainConfig(
            mode=args.mode,
            backbone=args.backbone,
            layers=args.layers,
            hidden_dim=args.hidden_dim,
            readout=args.readout,
            beta=args.beta,
            temperature=args.temperature,
            learning_rate=args.lr,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            aux_weight=args.aux_weight,
            task=task,
            gates=not args.no_gates,
            split=parse_fractions(args.split),
            record_wall_time=args.record_wall_time,
        )
    except ValidationError as exc:
        raise ConfigError(f"invalid training options: {describe_validation_error(exc)}") from None


def _split_selection(graphs: Sequence[Graph], config: TrainConfig, split: str) -> List[int]:
    """Dataset indices of the requested split, recomputed from the checkpoint's seeded split."""
    if split == "all":
        return list(range(len(graphs)))
    train, val, test = GraphService.split_indices(graphs, config.split, config.seed)
    return [int(i) for i in {"train": train, "val": val, "test": test}[split]]


def _check_feature_dim(graphs: Sequence[Graph], config: TrainConfig) -> None:
    dims = sorted({g.feature_dim for g in graphs})
    if dims != [config.feature_dim]:
        raise ArchitectureMismatchError(
            f"dataset feature dimension {dims} does not match the checkpoint's {config.feature_dim}"
        )


def _classifier(checkpoint: CheckpointDocument):
    """Model whose clean predictions are being explained."""
    model = build_model(checkpoint)
    if isinstance(model, ExplainerModel):
        return model.frozen
    return model


# ==================== Subcommands ====================


def cmd_gen_data(args: argparse.Namespace) -> CommandResult:
    spec = parse_motif(args.motif)
    graphs = GraphService.generate_motif_dataset(
        num_graphs=args.num_graphs,
        base_size_range=(args.base_min, args.base_max),
        motif_kind=spec,
        label_rule=args.label_rule,
        noise_edges=args.noise_edges,
        seed=args.seed,
        feature_dim=args.feature_dim,
    )
    GraphService.write_dataset(graphs, args.out)

    labels = np.bincount([g.label for g in graphs], minlength=2)
    print(f"Wrote {len(graphs)} graphs to {args.out} (labels: {labels[0]} negative, {labels[1]} positive)")
    return CommandResult(
        config=_flag_config(args),
        outputs={"dataset": args.out},
        summary={"num_graphs": len(graphs), "label_counts": [int(c) for c in labels]},
        manifest_path=_sibling(args.out, ".manifest.json"),
    )


def cmd_train(args: argparse.Namespace) -> CommandResult:
    graphs = GraphService.read_dataset(args.data)
    config = _train_config(args, graphs[0].task)
    splits = GraphService.split_dataset(graphs, config.split, config.seed)

    inputs = {"data": args.data}
    if config.mode == "explain":
        inputs["frozen_checkpoint"] = args.frozen_checkpoint
        result = TrainingService.train_posthoc(load_checkpoint(args.frozen_checkpoint), splits, config)
    else:
        result = TrainingService.train(splits, config)

    out_dir = Path(args.out_dir)
    checkpoint_path = out_dir / "checkpoint.json"
    metrics_path = out_dir / "metrics.csv"
    save_checkpoint(result.checkpoint, checkpoint_path)
    write_metrics_csv(result.metrics, metrics_path)

    summary = {
        "best_epoch": result.best_epoch,
        "val_loss": result.checkpoint.val_loss,
        "test_accuracy": result.test_accuracy,
        "epochs": len(result.metrics),
    }
    accuracy = "n/a" if result.test_accuracy is None else f"{result.test_accuracy:.4f}"
    print(f"Best epoch {result.best_epoch}, validation loss {result.checkpoint.val_loss:.6f}, test accuracy {accuracy}")
    return CommandResult(
        config=result.checkpoint.config.model_dump(mode="json"),
        inputs=inputs,
        outputs={"checkpoint": str(checkpoint_path), "metrics": str(metrics_path)},
        summary=summary,
        manifest_path=out_dir / "manifest.json",
    )


def cmd_explain(args: argparse.Namespace) -> CommandResult:
    checkpoint = load_checkpoint(args.checkpoint)
    model = build_model(checkpoint)
    if isinstance(model, GNNModel) and model.probability is None:
        raise CheckpointError(f"{args.checkpoint}: classifier was trained without gates and has no node scores")

    graphs = GraphService.read_dataset(args.data)
    _check_feature_dim(graphs, model.config)
    selected = _split_selection(graphs, checkpoint.config, args.split)

    records: List[ScoreRecord] = []
    empty = 0
    for start in range(0, len(selected), PREDICT_BATCH_SIZE):
        chunk = selected[start:start + PREDICT_BATCH_SIZE]
        batch = GraphService.make_batch([graphs[i] for i in chunk])
        p = model.node_probabilities(batch)
        for index, graph, offset in zip(chunk, batch.graphs, batch.offsets):
            scores = p[offset:offset + graph.num_nodes]
            selection = select_subgraph(graph, scores)
            empty += selection.empty
            records.append(ScoreRecord(
                graph_index=index,
                p=[float(v) for v in scores],
                selected_nodes=list(selection.nodes),
                empty=selection.empty,
            ))
    write_scores(records, args.out)

    print(f"Scored {len(records)} graphs ({empty} with an empty selection) into {args.out}")
    return CommandResult(
        config=_flag_config(args),
        inputs={"checkpoint": args.checkpoint, "data": args.data},
        outputs={"scores": args.out},
        summary={"graphs": len(records), "empty_selections": empty},
        manifest_path=_sibling(args.out, ".manifest.json"),
    )


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    k_list = parse_k_list(args.k_list)
    checkpoint = load_checkpoint(args.checkpoint)
    classifier = _classifier(checkpoint)
    graphs = GraphService.read_dataset(args.data)
    _check_feature_dim(graphs, classifier.config)
    selected = _split_selection(graphs, checkpoint.config, args.split)

    scores = read_scores(args.scores)
    unknown = sorted(i for i in scores if i >= len(graphs))
    if unknown:
        raise DatasetError(f"scores refer to graphs {unknown} beyond the {len(graphs)} in {args.data}", args.scores)
    missing = [i for i in selected if i not in scores]
    if missing:
        raise EvaluationError(f"no scores for graphs {missing}")

    chosen = [graphs[i] for i in selected]
    node_scores = [scores[i].p for i in selected]

    def predictor(batch_graphs: Sequence[Graph]) -> np.ndarray:
        return predict(classifier, list(batch_graphs))

    reports = MetricsService.sparsity_sweep(predictor, chosen, node_scores, k_list)
    MetricsService.write_fidelity_csv(reports, args.out)

    summary: Dict[str, Any] = {
        "fidelity": [r.model_dump(exclude={"records"}) for r in reports],
    }
    masks = [g.motif_mask for g in chosen]
    if any(m is not None for m in masks):
        try:
            summary["motif_recovery"] = MetricsService.motif_recovery(node_scores, masks).model_dump()
        except EvaluationError as exc:
            logger.warning(f"Skipping motif recovery: {exc}")
    for name in args.property or []:
        divergence = MetricsService.property_divergence(
            PROPERTIES[name], chosen, [scores[i].selected_nodes for i in selected], name
        )
        summary.setdefault("property_divergence", []).append(divergence.model_dump())
    if args.random_baselines:
        summary["random_baselines"] = [
            MetricsService.random_baseline(predictor, chosen, k, args.random_baselines, args.seed) for k in k_list
        ]

    summary_path = Path(args.out).with_suffix(".summary.json")
    _write_json(summary, summary_path)
    for r in reports:
        print(f"k={r.k:.2f} fidelity+ {r.fidelity_plus:.4f} fidelity- {r.fidelity_minus:.4f}")
    return CommandResult(
        config=_flag_config(args),
        inputs={"checkpoint": args.checkpoint, "scores": args.scores, "data": args.data},
        outputs={"fidelity": args.out, "summary": str(summary_path)},
        summary={"k_values": len(reports)},
        manifest_path=_sibling(args.out, ".manifest.json"),
    )


def cmd_check_theory(args: argparse.Namespace) -> CommandResult:
    rows = TheoryService.run_trials(args.trials, args.seed)
    columns = ["trial", "lemma1_margin", "thm1_margin_a", "thm1_margin_b"]
    _write_rows(args.out, columns, [[r["trial"]] + [repr(r[c]) for c in columns[1:]] for r in rows])

    worst_row, worst_column = min(
        ((r, c) for r in rows for c in columns[1:]), key=lambda rc: rc[0][rc[1]]
    )
    worst = worst_row[worst_column]
    result = CommandResult(
        config=_flag_config(args),
        outputs={"margins": args.out} if args.out else {},
        summary={"trials": len(rows), "worst_margin": worst, "worst_trial": worst_row["trial"]},
        manifest_path=_sibling(args.out, ".manifest.json") if args.out else None,
    )
    if worst < -MARGIN_TOLERANCE:
        result.exit_code = 1
        result.message = f"{worst_column} = {worst!r} in trial {worst_row['trial']}"
        print(f"FAILED: {result.message}", file=sys.stderr)
    else:
        print(f"All {len(rows)} trials passed (smallest margin {worst:.3e})", file=sys.stderr)
    return result


def random_check_graph(rng: Rng, feature_dim: int = GRADCHECK_FEATURE_DIM) -> Graph:
    """Random connected 4 to 8 node graph with Gaussian features."""
    n = int(rng.integers(4, 8))
    edges = {(int(rng.integers(0, i - 1)), i) for i in range(1, n)}
    for _ in range(int(rng.integers(0, n // 2))):
        u, v = sorted(int(x) for x in rng.integers(0, n - 1, size=2))
        if u != v:
            edges.add((u, v))
    return Graph(n, tuple(sorted(edges)), rng.normal((n, feature_dim)), int(rng.integers(0, 1)))


def cmd_gradcheck(args: argparse.Namespace) -> CommandResult:
    if args.graphs < 1:
        raise ConfigError(f"--graphs must be positive, got {args.graphs}")
    rng = Rng(args.seed)
    rows = []
    failures = []
    for index in range(args.graphs):
        backbone = args.backbone if args.backbone != "both" else ("gcn", "gin")[index % 2]
        graph = random_check_graph(rng)
        config = TrainConfig(
            backbone=backbone,
            hidden_dim=args.hidden_dim,
            feature_dim=GRADCHECK_FEATURE_DIM,
            num_outputs=2,
            seed=args.seed,
        )
        model = GNNModel.build(config, rng)
        batch = GraphService.make_batch([graph])
        draws = NoiseDraws.sample(rng, batch.num_nodes, config.hidden_dim)

        def objective():
            return vgib_loss(model, batch, config.beta, config.temperature, draws=draws).total

        report = ad.gradient_check(objective, model.named_parameters(), args.step, args.tolerance)
        rows.append([index, repr(report.max_error), report.worst_parameter])
        if not report.passed:
            failures.append((index, report))
        logger.debug(f"Graph {index} ({backbone}, {graph.num_nodes} nodes): max relative error {report.max_error:.3e}")

    _write_rows(args.out, ["graph", "max_rel_error", "worst_parameter"], rows)
    worst = max(float(r[1]) for r in rows)
    result = CommandResult(
        config=_flag_config(args),
        outputs={"errors": args.out} if args.out else {},
        summary={"graphs": len(rows), "max_rel_error": worst, "failures": len(failures)},
        manifest_path=_sibling(args.out, ".manifest.json") if args.out else None,
    )
    if failures:
        index, report = max(failures, key=lambda f: f[1].max_error)
        analytic, numeric = report.details[report.worst_parameter]
        result.exit_code = 1
        result.message = (
            f"graph {index}: {report.worst_parameter} relative error {report.max_error:.3e} "
            f"(backward {analytic!r}, finite difference {numeric!r})"
        )
        print(f"FAILED: {result.message}", file=sys.stderr)
    else:
        print(f"All {len(rows)} graphs passed (max relative error {worst:.3e})", file=sys.stderr)
    return result


def cmd_crossval(args: argparse.Namespace) -> CommandResult:
    graphs = GraphService.read_dataset(args.data)
    config = _train_config(args, graphs[0].task)
    if config.mode == "explain":
        raise ConfigError("crossval trains classifiers; explain mode is not supported")
    result = TrainingService.cross_validate(graphs, config, args.folds)
    _write_rows(args.out, ["fold", "accuracy", "best_epoch"], [[f.fold, repr(f.accuracy), f.best_epoch] for f in result.folds])

    print(f"{len(result.folds)}-fold accuracy {result.mean:.4f} ± {result.std:.4f}")
    return CommandResult(
        config=config.model_dump(mode="json"),
        inputs={"data": args.data},
        outputs={"folds": args.out},
        summary={"folds": len(result.folds), "mean": result.mean, "std": result.std},
        manifest_path=_sibling(args.out, ".manifest.json"),
    )


def cmd_runs(args: argparse.Namespace) -> CommandResult:
    if args.delete is not None:
        with _registry() as db:
            if not RunService.delete_run(db, args.delete):
                raise ConfigError(f"no recorded run with id {args.delete}")
        logger.info(f"Deleted run {args.delete}")
        return CommandResult(summary={"deleted": args.delete})

    with _registry() as db:
        runs = RunService.list_runs(
            db,
            status=RunStatus(args.status) if args.status else None,
            subcommand=args.subcommand,
            sort_by=args.sort_by,
            limit=args.limit,
        )
        rows = [
            [
                run.id,
                run.subcommand,
                run.status.value,
                "" if run.exit_code is None else run.exit_code,
                run.started_at.isoformat(timespec="seconds"),
                len(run.artifacts),
            ]
            for run in runs
        ]
    _write_rows(None, ["id", "subcommand", "status", "exit_code", "started_at", "artifacts"], rows)
    return CommandResult(summary={"runs": len(rows)})


def cmd_replay(args: argparse.Namespace) -> CommandResult:
    path = Path(args.manifest)
    try:
        manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read manifest ({exc.strerror})") from None
    except ValidationError as exc:
        raise ConfigError(f"{path}: {describe_validation_error(exc)}") from None
    if not manifest.argv or manifest.argv[0] in UNRECORDED:
        raise ConfigError(f"{path}: manifest does not record a replayable command")

    logger.info(f"Replaying {' '.join(manifest.argv)}")
    return CommandResult(exit_code=main(manifest.argv))


# ==================== Argument Parsing ====================


def _add_model_flags(parser: argparse.ArgumentParser, seed: int) -> None:
    parser.add_argument("--data", required=True, help="JSON-lines dataset")
    parser.add_argument("--mode", choices=["interpret", "explain", "classify"], default="interpret")
    parser.add_argument("--backbone", choices=["gcn", "gin"], default="gcn")
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--hidden-dim", type=int, default=16)
    parser.add_argument("--readout", choices=["mean", "sum"], default="sum")
    parser.add_argument("--beta", type=float, default=0.1)
    parser.add_argument("--temperature", type=float, default=1.0)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--aux-weight", type=float, default=1.0)
    parser.add_argument("--split", default="0.85,0.05,0.10", help="train,val,test fractions")
    parser.add_argument("--no-gates", action="store_true", help="plain classifier (classify mode only)")
    parser.add_argument("--record-wall-time", action="store_true")
    parser.add_argument("--seed", type=int, default=seed)


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    parser = argparse.ArgumentParser(prog="vgib", description="Subgraph recognition with a noise-injection bottleneck.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a planted-motif dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-graphs", type=int, default=1000)
    p.add_argument("--motif", default="triangle", help="triangle, house or cycle:k")
    p.add_argument("--base-min", type=int, default=10)
    p.add_argument("--base-max", type=int, default=16)
    p.add_argument("--noise-edges", type=int, default=2)
    p.add_argument("--label-rule", choices=["alternate", "random"], default="alternate")
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_model_flags(p, seed)
    p.add_argument("--frozen-checkpoint", help="plain classifier to explain (explain mode)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="write node scores and selected subgraphs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="fidelity, motif recovery and property divergence")
    p.add_argument("--checkpoint", required=True, help="classifier, or an explainer checkpoint holding one")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k-list", default=DEFAULT_K_LIST, help="start:step:stop or comma list")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.add_argument("--property", action="append", choices=sorted(PROPERTIES))
    p.add_argument("--random-baselines", type=int, default=0)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-theory", help="exact information checks on random tables")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_theory)

    p = sub.add_parser("gradcheck", help="compare backward() with finite differences")
    p.add_argument("--graphs", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--backbone", choices=["gcn", "gin", "both"], default="both")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("crossval", help="k-fold test accuracy")
    _add_model_flags(p, seed)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("runs", help="list recorded runs")
    p.add_argument("--status", choices=[s.value for s in RunStatus])
    p.add_argument("--subcommand")
    p.add_argument("--sort-by", choices=["started_at", "subcommand"], default="started_at")
    p.add_argument("--limit", type=int)
    p.add_argument("--delete", type=int, metavar="RUN_ID", help="delete one run and its artifact rows")
    p.set_defaults(func=cmd_runs)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_replay)

    return parser


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.mode == "explain" and not args.frozen_checkpoint:
        parser.error("--mode explain requires --frozen-checkpoint")
    return args


# ==================== Exception Handlers ====================


VALIDATION_ERRORS = (
    DatasetError,
    ConfigError,
    CheckpointError,
    ShapeError,
    DomainError,
    EvaluationError,
    InvalidTableError,
)


def handle_validation_error(exc: Exception) -> int:
    """Bad input or options: one-line message, exit 2."""
    logger.debug(f"Rejected: {exc!r}")
    print(f"error: {exc}", file=sys.stderr)
    return 2


def handle_non_finite(exc: NonFiniteError) -> int:
    logger.error(f"Training diverged: {exc}")
    print(f"error: {exc}", file=sys.stderr)
    return 1


def handle_unexpected(exc: Exception) -> int:
    logger.error("Unhandled exception", exc_info=True)
    print(f"error: {exc}" if not IS_PRODUCTION else "error: an internal error occurred", file=sys.stderr)
    return 1


EXCEPTION_HANDLERS: List[tuple] = [
    (VALIDATION_ERRORS, handle_validation_error),
    ((NonFiniteError,), handle_non_finite),
    ((Exception,), handle_unexpected),
]


def _handle(exc: Exception) -> int:
    for families, handler in EXCEPTION_HANDLERS:
        if isinstance(exc, families):
            return handler(exc)
    return handle_unexpected(exc)


# ==================== Run Registry ====================


def _status_for(exit_code: int) -> RunStatus:
    return {0: RunStatus.succeeded, 2: RunStatus.rejected}.get(exit_code, RunStatus.failed)


@contextmanager
def _registry() -> Iterator[Session]:
    init_db()
    sessions = get_db()
    try:
        yield next(sessions)
    finally:
        sessions.close()


def _registry_call(action: Callable, *args, **kwargs):
    """Registry failures never change a command's outcome."""
    try:
        with _registry() as db:
            return action(db, *args, **kwargs)
    except SQLAlchemyError as exc:
        logger.warning(f"Run registry unavailable: {exc}")
        return None


# ==================== Entry Point ====================


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else (0 if exc.code is None else 2)
    except VGIBError as exc:
        return handle_validation_error(exc)

    started_at = datetime.utcnow()
    seed = getattr(args, "seed", None)
    record = args.command not in UNRECORDED
    run_id = None
    if record:
        run = _registry_call(RunService.start_run, args.command, argv, _flag_config(args), seed)
        run_id = run.id if run is not None else None
    logger.info(f"Running {args.command} (env {ENV}, seed {seed})")

    hashes: Dict[str, str] = {}
    result: Optional[CommandResult] = None
    try:
        result = args.func(args)
        if result.manifest_path is not None:
            hashes = write_manifest(result, args.command, argv, seed, started_at)
        exit_code = result.exit_code
        message = result.message
    except Exception as exc:
        exit_code = _handle(exc)
        message = str(exc)

    if run_id is not None:
        _registry_call(
            RunService.finish_run,
            run_id,
            _status_for(exit_code),
            exit_code,
            artifacts=hashes,
            summary=result.summary if result is not None else None,
            message=message,
        )
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
