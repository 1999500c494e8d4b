"""Seeded multi-run experiments and their on-disk outputs."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, to_pairs, with_federation
from .data import (
    ClientSplit,
    LabeledDataset,
    generate_synthetic,
    load_csv,
    partition_dirichlet,
    partition_pathological,
    split_train_test,
)
from .errors import FedBiasError
from .federation import FederationResult, RoundRecord, ServerState, ClientState, keyed_rng, run_federation
from .metrics import bias_diagnostic, evaluate_global, evaluate_personalized, export_representations

log = logging.getLogger(__name__)

RESULTS_HEADER = ("seed", "iteration", "algorithm", "global_acc", "personalized_acc", "train_loss", "fisher_ratio")

# keys for partition / split streams; federation uses 0..4
_PARTITION, _SPLIT = 100, 101


@dataclass
class ResultsRow:
    seed: int
    iteration: int
    algorithm: str
    global_accuracy: float
    personalized_accuracy: float
    mean_train_loss: float
    mean_fisher_ratio: float


@dataclass
class SeedRun:
    seed: int
    rows: list[ResultsRow]
    result: FederationResult


def load_dataset(config: ExperimentConfig, seed: int) -> LabeledDataset:
    if config.dataset == "csv":
        return load_csv(config.csv_path, header=config.csv_header)
    return generate_synthetic(config.num_classes, config.dim, config.samples_per_class, config.separation, seed)


def make_splits(config: ExperimentConfig, dataset: LabeledDataset, seed: int) -> list[ClientSplit]:
    n = config.federation.num_clients
    rng = keyed_rng(seed, _PARTITION)
    if config.partition == "dirichlet":
        parts = partition_dirichlet(dataset, n, config.beta, rng)
    else:
        parts = partition_pathological(dataset, n, config.labels_per_client, rng)
    return [split_train_test(p, keyed_rng(seed, _SPLIT, i), config.train_fraction) for i, p in enumerate(parts)]


def run_seed(config: ExperimentConfig, seed: int, rows: list[ResultsRow] | None = None) -> SeedRun:
    """Partition, split and federate with ``seed``; one results row per iteration.

    Rows are appended to ``rows`` as they are produced so a caller can flush
    them if a later iteration fails.
    """
    rows = [] if rows is None else rows
    fed = dataclasses.replace(config.federation, seed=seed)
    splits = make_splits(config, load_dataset(config, seed), seed)

    def record(rec: RoundRecord, server: ServerState, clients: list[ClientState]) -> None:
        loss = sum(rec.weights[cid] * rec.train_loss[cid] for cid in rec.participants)
        rows.append(
            ResultsRow(
                seed=seed,
                iteration=rec.iteration,
                algorithm=fed.algorithm,
                global_accuracy=evaluate_global(clients, server.model).weighted_mean_accuracy,
                personalized_accuracy=evaluate_personalized(clients, server.model).weighted_mean_accuracy,
                mean_train_loss=loss,
                mean_fisher_ratio=bias_diagnostic(clients, server.model).mean_fisher_ratio,
            )
        )

    result = run_federation(fed, splits, on_round=record)
    return SeedRun(seed, rows, result)


def write_results(rows: Sequence[ResultsRow], path: str | Path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RESULTS_HEADER)
            for r in rows:
                writer.writerow([
                    r.seed, r.iteration, r.algorithm,
                    f"{r.global_accuracy:.6f}", f"{r.personalized_accuracy:.6f}",
                    f"{r.mean_train_loss:.6f}", f"{r.mean_fisher_ratio:.6f}",
                ])
    except OSError as exc:
        raise FedBiasError(f"cannot write results to {path}: {exc.strerror}") from exc


def read_results(path: str | Path) -> list[ResultsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != RESULTS_HEADER:
            raise FedBiasError(f"unexpected results header {header}")
        return [
            ResultsRow(int(s), int(t), a, float(g), float(p), float(l), float(f))
            for s, t, a, g, p, l, f in reader
        ]


def _summary(config: ExperimentConfig, runs: Sequence[SeedRun]) -> dict:
    out = {"config": {k: list(v) if isinstance(v, tuple) else v for k, v in to_pairs(config).items()}, "runs": []}
    for run in runs:
        last = run.rows[-1]
        server = run.result.server
        entry = {
            "seed": run.seed,
            "iterations": server.iteration,
            "global_acc": last.global_accuracy,
            "personalized_acc": last.personalized_accuracy,
            "fisher_ratio": last.mean_fisher_ratio,
            "model_digest": server.model.digest(),
        }
        if server.global_mean is not None:
            entry["global_mean"] = server.global_mean.value.tolist()
            entry["prbm_norms"] = {
                c.id: float(np.linalg.norm(c.prbm.bias)) for c in run.result.clients if c.prbm is not None
            }
        out["runs"].append(entry)
    return out


def run_experiment(config: ExperimentConfig) -> list[ResultsRow]:
    """Run ``repeat`` seeds and write ``results.csv`` and ``summary.json`` to ``out_dir``.

    Seeds are ``seed, seed + 1, ...``. On failure the rows produced so far
    are still written before the error propagates.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[ResultsRow] = []
    runs: list[SeedRun] = []
    base = config.federation.seed
    try:
        for r in range(config.repeat):
            seed = base + r
            try:
                run = run_seed(config, seed, rows)
            except FedBiasError as exc:
                raise type(exc)(f"seed {seed}: {exc}") from exc
            runs.append(run)
            if config.export_reps:
                res = run.result
                export_representations(res.clients, res.server.model, out / f"representations_seed{seed}.csv")
            log.info("seed %d done: personalized %.4f", seed, run.rows[-1].personalized_accuracy)
    finally:
        write_results(rows, out / "results.csv")
    (out / "summary.json").write_text(json.dumps(_summary(config, runs), indent=2, sort_keys=True) + "\n")
    return rows


def run_sweep(config: ExperimentConfig, param: str, grid: Sequence[float]) -> list[tuple[float, float, float]]:
    """Run the experiment once per grid value under ``out_dir/<param>_<value>``.

    Returns ``(value, mean final global acc, mean final personalized acc)``
    and writes the same table to ``out_dir/sweep_<param>.csv``.
    """
    table = []
    for value in grid:
        sub = with_federation(config, **{param: float(value)})
        sub = dataclasses.replace(sub, out_dir=str(Path(config.out_dir) / f"{param}_{value}"))
        rows = run_experiment(sub)
        final = [r for r in rows if r.iteration == sub.federation.iterations]
        table.append((
            float(value),
            float(np.mean([r.global_accuracy for r in final])),
            float(np.mean([r.personalized_accuracy for r in final])),
        ))
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(config.out_dir) / f"sweep_{param}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([param, "global_acc", "personalized_acc"])
        for value, g, p in table:
            writer.writerow([value, f"{g:.6f}", f"{p:.6f}"])
    return table
