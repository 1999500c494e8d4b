"""Accuracy evaluation, representation-bias diagnostics and representation export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, FedBiasError, ShapeError
from .federation import ClientState
from .nn import Model, cross_entropy, forward_features, forward_logits

VAR_FLOOR = 1e-12


@dataclass
class EvaluationReport:
    per_client_accuracy: dict[int, float]
    weighted_mean_accuracy: float
    mean_test_loss: float


@dataclass
class BiasDiagnostic:
    fisher_ratio_per_client: dict[int, float]
    mean_fisher_ratio: float


def _client_model(client: ClientState, model: Model, personalized: bool):
    if not personalized:
        return model, None
    own = client.local_model if client.local_model is not None else model
    bias = client.prbm.bias if client.prbm is not None else None
    return own, bias


def _evaluate(clients: Sequence[ClientState], model: Model, personalized: bool) -> EvaluationReport:
    acc, correct_total, n_total, loss_total = {}, 0, 0, 0.0
    for client in clients:
        test = client.split.test
        if len(test) == 0:
            raise DataError(f"client {client.id} has an empty test set")
        m, bias = _client_model(client, model, personalized)
        z = forward_features(m.extractor, test.features)
        if bias is not None:
            z = z + bias
        logits = forward_logits(m.classifier, z)
        correct = int(np.sum(logits.argmax(axis=1) == test.labels))
        acc[client.id] = correct / len(test)
        correct_total += correct
        n_total += len(test)
        loss_total += cross_entropy(logits, test.labels) * len(test)
    if not n_total:
        raise DataError("no clients to evaluate")
    return EvaluationReport(acc, correct_total / n_total, loss_total / n_total)


def evaluate_personalized(clients: Sequence[ClientState], model: Model) -> EvaluationReport:
    """Each client's own model on its own test set, weighted by test size.

    A client's model is the global model plus its personalized bias when it has
    one, or its private model under local-only training.
    """
    return _evaluate(clients, model, personalized=True)


def evaluate_global(clients: Sequence[ClientState], model: Model) -> EvaluationReport:
    return _evaluate(clients, model, personalized=False)


def fisher_ratio(reps_a, reps_b) -> float:
    """Maximum over dimensions of ``(mean_a - mean_b)^2 / (var_a + var_b)``.

    Population variances; the denominator is floored at ``VAR_FLOOR``.
    """
    a = np.asarray(reps_a, dtype=np.float64)
    b = np.asarray(reps_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("fisher_ratio needs two non-empty 2-D sets")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    gap = (a.mean(axis=0) - b.mean(axis=0)) ** 2
    spread = np.maximum(a.var(axis=0) + b.var(axis=0), VAR_FLOOR)
    return float(np.max(gap / spread))


def bias_diagnostic(clients: Sequence[ClientState], model: Model) -> BiasDiagnostic:
    """Fisher ratio between each client's extractor outputs and the pooled outputs.

    Uses training sets and the extractor only (no personalized bias).
    """
    reps = {c.id: forward_features(model.extractor, c.split.train.features) for c in clients}
    pooled = np.concatenate(list(reps.values()))
    per = {cid: fisher_ratio(r, pooled) for cid, r in reps.items()}
    return BiasDiagnostic(per, float(np.mean(list(per.values()))))


def export_representations(clients: Sequence[ClientState], model: Model, path: str | Path) -> int:
    """Write ``client_id,label,level,f0..f{K-1}`` rows for every training sample.

    Level ``zg`` is the extractor output; level ``z`` (clients with a
    personalized bias only) is ``zg`` plus that bias. Returns the row count.
    """
    k = model.rep_dim
    rows = 0
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["client_id", "label", "level", *[f"f{j}" for j in range(k)]])
            for client in clients:
                train = client.split.train
                zg = forward_features(model.extractor, train.features)
                levels = [("zg", zg)]
                if client.prbm is not None:
                    levels.append(("z", zg + client.prbm.bias))
                for level, values in levels:
                    for label, row in zip(train.labels, values):
                        writer.writerow([client.id, int(label), level, *(repr(float(v)) for v in row)])
                        rows += 1
    except OSError as exc:
        raise FedBiasError(f"cannot write representations to {path}: {exc}") from exc
    return rows


def read_representations(path: str | Path) -> list[tuple[int, int, str, np.ndarray]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(r[0]), int(r[1]), r[2], np.array([float(v) for v in r[3:]])) for r in reader]
