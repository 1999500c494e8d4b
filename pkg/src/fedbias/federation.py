"""Federated training loop: FedAvg, FedAvg with DBE, FedProx and local-only training."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ClientSplit
from .dbe import (
    GlobalMean,
    PrbmState,
    RunningMean,
    aggregate_global_mean,
    compute_client_mean,
    perturb_client_mean,
    update_running_mean,
)
from .errors import ConfigError, FedBiasError, ShapeError
from .nn import LossBreakdown, Model, MRContext, backward, init_model, sgd_update

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedavg_dbe", "fedprox", "local")

# stream tags for keyed generators
_MODEL, _INIT, _TRAIN, _SAMPLE, _PRIVACY = range(5)


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; order of use elsewhere does not matter."""
    return np.random.default_rng([seed, *key])


@dataclass
class FederationConfig:
    num_clients: int
    iterations: int
    algorithm: str = "fedavg_dbe"
    join_ratio: float = 1.0
    local_epochs: int = 1
    learning_rate: float = 0.05
    batch_size: int = 10
    kappa: float = 50.0
    momentum: float = 1.0
    prox_weight: float = 0.0
    hidden: tuple[int, ...] = (64,)
    split: int | None = None  # extractor depth; None = last hidden layer
    freeze_prbm: bool = False
    privacy: bool = False
    noise_scale: float = 0.05
    noise_coef: float = 0.2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            ("num_clients", self.num_clients >= 1, "must be >= 1"),
            ("iterations", self.iterations >= 1, "must be >= 1"),
            ("algorithm", self.algorithm in ALGORITHMS, f"must be one of {', '.join(ALGORITHMS)}"),
            ("join_ratio", 0 < self.join_ratio <= 1, "must be in (0, 1]"),
            ("local_epochs", self.local_epochs >= 1, "must be >= 1"),
            ("learning_rate", self.learning_rate >= 0 and math.isfinite(self.learning_rate), "must be >= 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("kappa", self.kappa >= 0, "must be >= 0"),
            ("momentum", 0 <= self.momentum <= 1, "must be in [0, 1]"),
            ("prox_weight", self.prox_weight >= 0, "must be >= 0"),
            ("hidden", len(self.hidden) >= 1 and min(self.hidden) >= 1, "need >= 1 positive width"),
            ("split", self.split is None or 1 <= self.split <= len(self.hidden), "out of range"),
            ("noise_scale", self.noise_scale >= 0, "must be >= 0"),
            ("noise_coef", 0 <= self.noise_coef <= 1, "must be in [0, 1]"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("workers", self.workers >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, key=key)

    @property
    def uses_dbe(self) -> bool:
        return self.algorithm == "fedavg_dbe"


@dataclass
class ClientState:
    id: int
    split: ClientSplit
    prbm: PrbmState | None = None
    running: RunningMean | None = None
    local_model: Model | None = None  # only kept for local-only training

    @property
    def n_train(self) -> int:
        return len(self.split.train)


@dataclass
class ServerState:
    model: Model
    global_mean: GlobalMean | None = None
    iteration: int = 0


@dataclass
class RoundRecord:
    iteration: int
    participants: list[int]
    train_loss: dict[int, float]
    digest: str
    weights: dict[int, float] = field(default_factory=dict)


@dataclass
class LocalUpdate:
    client_id: int
    model: Model
    n: int
    mean_loss: float


@dataclass
class FederationResult:
    history: list[RoundRecord]
    server: ServerState
    clients: list[ClientState]


BatchHook = Callable[[int, int, int, ClientState, LossBreakdown], None]
"""Called after each local step as ``hook(iteration, client_id, step, client, loss)``."""


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    count = max(1, n // batch_size)
    for k in range(count):
        yield order[k * batch_size : (k + 1) * batch_size]


def _train_plain(model: Model, data, lr: float, batch_size: int, epochs: int, rng) -> float:
    losses = []
    for _ in range(epochs):
        for idx in _batches(len(data), batch_size, rng):
            grads, loss = backward(model.extractor, model.classifier, data.features[idx], data.labels[idx])
            if lr > 0:
                sgd_update(model, grads, lr)
            losses.append(loss.total)
    return float(np.mean(losses))


def initialization_period(
    clients: Sequence[ClientState], init: Model, config: FederationConfig
) -> GlobalMean:
    """One plain epoch per client, then the sample-weighted mean of client feature means.

    The trained copies are thrown away; ``init`` is left untouched.
    """
    if not clients:
        raise ConfigError("no clients", key="clients")
    means = []
    for client in clients:
        model = init.copy()
        try:
            _train_plain(
                model, client.split.train, config.learning_rate, config.batch_size, 1,
                keyed_rng(config.seed, _INIT, client.id),
            )
            mean = compute_client_mean(model.extractor, client.split.train.features)
        except FedBiasError as exc:
            raise type(exc)(f"warm-up, client {client.id}: {exc}") from exc
        if config.privacy:
            mean = perturb_client_mean(
                mean, config.noise_scale, config.noise_coef, keyed_rng(config.seed, _PRIVACY, client.id)
            )
        means.append((mean, client.n_train))
    return aggregate_global_mean(means)


def sample_clients(num_clients: int, join_ratio: float, rng: np.random.Generator) -> list[int]:
    if not 0 < join_ratio <= 1:
        raise ConfigError("must be in (0, 1]", key="join_ratio")
    k = max(1, math.floor(join_ratio * num_clients + 0.5))
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


def local_train(
    client: ClientState,
    global_model: Model,
    config: FederationConfig,
    iteration: int,
    global_mean: GlobalMean | None = None,
    on_batch: BatchHook | None = None,
) -> LocalUpdate:
    """Run ``local_epochs`` of SGD for one client and return its new parameters.

    The client's personalized bias (DBE) or private model (local-only) is
    updated in place on ``client``.
    """
    train = client.split.train
    if len(train) == 0:
        raise FedBiasError(f"client {client.id} has no training data")
    if config.algorithm == "local":
        if client.local_model is None:
            client.local_model = global_model.copy()
        model = client.local_model
    else:
        model = global_model.copy()
    dbe = config.uses_dbe
    if dbe:
        if global_mean is None or client.prbm is None:
            raise ConfigError("DBE training needs a global mean and a client bias", key="algorithm")
        client.running = RunningMean.empty(model.rep_dim)
    anchor = list(global_model.arrays()) if config.algorithm == "fedprox" else None

    rng = keyed_rng(config.seed, _TRAIN, client.id, iteration)
    losses = []
    step = 0
    for _ in range(config.local_epochs):
        for idx in _batches(len(train), config.batch_size, rng):
            xb, yb = train.features[idx], train.labels[idx]
            if dbe:
                mr = MRContext(
                    client.running.value if client.running.initialized else None,
                    global_mean.value, config.kappa, config.momentum,
                )
                grads, loss = backward(model.extractor, model.classifier, xb, yb, client.prbm.bias, mr)
                client.running = update_running_mean(client.running, loss.feature_mean, config.momentum)
            else:
                grads, loss = backward(model.extractor, model.classifier, xb, yb)
            if anchor is not None and config.prox_weight > 0:
                prox = 0.0
                for g, p, p0 in zip(grads.arrays(), model.arrays(), anchor):
                    g += config.prox_weight * (p - p0)
                    prox += float(np.sum((p - p0) ** 2))
                loss.total += 0.5 * config.prox_weight * prox
            if config.learning_rate > 0:
                trainable_bias = client.prbm.bias if dbe and not config.freeze_prbm else None
                sgd_update(model, grads, config.learning_rate, prbm=trainable_bias)
            losses.append(loss.total)
            if on_batch is not None:
                on_batch(iteration, client.id, step, client, loss)
            step += 1
    return LocalUpdate(client.id, model, client.n_train, float(np.mean(losses)))


def aggregation_weights(counts: Sequence[int]) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    return c / c.sum()


def server_aggregate(updates: Sequence[tuple[Model, int]]) -> Model:
    """Parameter-wise average of client models weighted by training-set size."""
    if not updates:
        raise ConfigError("no updates to aggregate", key="updates")
    weights = aggregation_weights([n for _, n in updates])
    out = updates[0][0].copy()
    target = list(out.arrays())
    for arr in target:
        arr[...] = 0.0
    for (model, _), w in zip(updates, weights):
        arrays = list(model.arrays())
        if len(arrays) != len(target):
            raise ShapeError("client models differ in structure")
        for dst, src in zip(target, arrays):
            if dst.shape != src.shape:
                raise ShapeError(f"parameter shape {src.shape} != {dst.shape}")
            dst += w * src
    return out


RoundHook = Callable[[RoundRecord, ServerState, list[ClientState]], None]


def run_federation(
    config: FederationConfig,
    splits: Sequence[ClientSplit],
    init: Model | None = None,
    on_round: RoundHook | None = None,
    on_batch: BatchHook | None = None,
) -> FederationResult:
    """Run the full protocol: optional DBE initialization, then ``iterations`` rounds."""
    if len(splits) != config.num_clients:
        raise ConfigError(f"got {len(splits)} client splits for {config.num_clients} clients", key="num_clients")
    clients = [ClientState(i, s) for i, s in enumerate(splits)]
    first = splits[0].train
    if init is None:
        init = init_model(first.dim, config.hidden, first.num_classes, keyed_rng(config.seed, _MODEL), config.split)
    server = ServerState(init.copy())

    if config.uses_dbe:
        server.global_mean = initialization_period(clients, init, config)
        for c in clients:
            c.prbm = PrbmState.zeros(init.rep_dim)

    history: list[RoundRecord] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for t in range(1, config.iterations + 1):
            participants = sample_clients(config.num_clients, config.join_ratio, keyed_rng(config.seed, _SAMPLE, t))

            def train_one(cid: int, t=t) -> LocalUpdate:
                try:
                    return local_train(clients[cid], server.model, config, t, server.global_mean, on_batch)
                except FedBiasError as exc:
                    raise type(exc)(f"iteration {t}, client {cid}: {exc}") from exc

            if pool is None:
                updates = [train_one(cid) for cid in participants]
            else:
                updates = list(pool.map(train_one, participants))

            weights = aggregation_weights([u.n for u in updates])
            if config.algorithm != "local":
                server.model = server_aggregate([(u.model, u.n) for u in updates])
            server.iteration = t
            record = RoundRecord(
                iteration=t,
                participants=participants,
                train_loss={u.client_id: u.mean_loss for u in updates},
                digest=server.model.digest(),
                weights={u.client_id: float(w) for u, w in zip(updates, weights)},
            )
            history.append(record)
            log.debug("round %d: loss %.4f", t, np.mean(list(record.train_loss.values())))
            if on_round is not None:
                on_round(record, server, clients)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationResult(history, server, clients)
