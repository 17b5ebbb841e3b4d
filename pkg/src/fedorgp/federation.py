"""Round orchestration: client sampling, prototype broadcast, parallel local
training, server prototype update and per-round bookkeeping."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .client import ClientState, evaluate, extract_prototypes, full_objective, local_train
from .data import (
    Dataset,
    PartitionPlan,
    generate_synthetic,
    load_idx,
    partition_dirichlet,
    partition_pathological,
    split_train_test,
)
from .errors import ConfigError, ShapeError
from .numeric import MlpSpec, init_model
from .prototypes import (
    ClientPrototypeSet,
    GlobalPrototypeBank,
    OrLossConfig,
    ServerTrace,
    publish,
    train_global_prototypes,
    weighted_average_aggregate,
)

ORGP = "orgp"
WEIGHTED_AVERAGE = "weighted_average"
_STRATEGY_ALIASES = {
    "orgp": ORGP, "fedorgp": ORGP,
    "weighted_average": WEIGHTED_AVERAGE, "weightedaverage": WEIGHTED_AVERAGE, "wa": WEIGHTED_AVERAGE,
}

# spawn-key tags for independent random streams derived from the master seed
_DATA, _PARTITION, _SPLIT, _INIT, _TRAIN, _BANK, _SAMPLING, _SERVER = range(1, 9)


def canonical_strategy(name: str) -> str:
    key = str(name).lower().replace("-", "_")
    if key not in _STRATEGY_ALIASES:
        key = key.replace("_", "")
    try:
        return _STRATEGY_ALIASES[key]
    except KeyError:
        raise ConfigError(f"strategy: unknown server strategy {name!r}") from None


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag, index)))


def derived_seed(seed: int, tag: int, index: int = 0) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(tag, index)).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    clients: int = 20
    join_ratio: float = 1.0
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    lambda_c: float = 100.0
    lambda_s: float = 1.0
    gamma: float = 10.0
    server_batch_size: int = 32
    server_epochs: int = 1
    server_lr: float = 0.01
    feature_dim: int = 64
    strategy: str = ORGP
    seed: int = 0
    # data source
    dataset: str = "synthetic"
    n_classes: int = 10
    input_dim: int = 32
    n_per_class: int = 200
    spread: float = 0.35
    images_path: str = ""
    labels_path: str = ""
    # partitioning
    partition: str = "pathological"
    classes_per_client: int = 2
    alpha: float = 0.05
    train_ratio: float = 0.75
    min_client_samples: int = 4
    # heterogeneous extractors: hidden widths per group, cycled over client ids
    model_groups: tuple = ((64,), (128,), (64, 64), (128, 128))
    # diagnostics
    epsilon: float = 1.0
    probe_client: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", canonical_strategy(self.strategy))
        groups = tuple(tuple(int(w) for w in g) for g in self.model_groups)
        object.__setattr__(self, "model_groups", groups)
        self.validate()

    def validate(self) -> None:
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(f"{name}: {msg}")

        need(self.clients >= 1, "clients", "must be >= 1")
        need(0 < self.join_ratio <= 1, "join_ratio", "must lie in (0, 1]")
        need(math.ceil(self.join_ratio * self.clients) >= 1, "join_ratio", "samples no client")
        for name in ("rounds", "local_epochs", "batch_size", "server_batch_size", "server_epochs"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.server_lr > 0, "server_lr", "must be > 0")
        for name in ("lambda_c", "lambda_s", "gamma"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        need(self.feature_dim >= 2, "feature_dim", "must be >= 2")
        need(self.dataset in ("synthetic", "idx"), "dataset", "must be 'synthetic' or 'idx'")
        if self.dataset == "synthetic":
            need(self.n_classes >= 2, "n_classes", "must be >= 2")
            need(self.input_dim >= 2, "input_dim", "must be >= 2")
            need(self.n_per_class >= 2, "n_per_class", "must be >= 2")
            need(self.spread > 0, "spread", "must be > 0")
        else:
            need(bool(self.images_path) and bool(self.labels_path), "images_path",
                 "idx datasets need images_path and labels_path")
        need(self.partition in ("pathological", "dirichlet"), "partition",
             "must be 'pathological' or 'dirichlet'")
        need(self.classes_per_client >= 1, "classes_per_client", "must be >= 1")
        need(self.alpha > 0, "alpha", "must be > 0")
        need(0 < self.train_ratio < 1, "train_ratio", "must lie in (0, 1)")
        need(len(self.model_groups) >= 1, "model_groups", "needs at least one group")
        need(all(w >= 1 for g in self.model_groups for w in g), "model_groups", "widths must be >= 1")
        need(self.epsilon > 0, "epsilon", "must be > 0")
        need(0 <= self.probe_client < self.clients, "probe_client", "must index a client")
        need(self.workers >= 1, "workers", "must be >= 1")

    @property
    def n_sampled(self) -> int:
        return math.ceil(self.join_ratio * self.clients)

    @property
    def server(self) -> OrLossConfig:
        return OrLossConfig(self.lambda_s, self.gamma, self.server_batch_size, self.server_epochs, self.server_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_groups"] = [list(g) for g in self.model_groups]
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ProbeData:
    client_id: int
    start_loss: float
    end_loss: float
    grad_sq_sum: float
    steps: int


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    train_loss: dict[int, float]
    grad_sq_sum: dict[int, float]
    steps: dict[int, int]
    skipped_alignment: dict[int, int]
    test_acc: list[float]
    global_objective: float
    server: Optional[ServerTrace]
    probe: Optional[ProbeData]
    wall_clock: float = 0.0

    @property
    def mean_test_acc(self) -> float:
        return float(np.mean(self.test_acc))

    @property
    def mean_train_loss(self) -> float:
        return float(np.mean([self.train_loss[k] for k in self.sampled]))

    @property
    def mean_grad_sq_sum(self) -> float:
        return float(np.mean([self.grad_sq_sum[k] for k in self.sampled]))


@dataclass
class World:
    cfg: ExperimentConfig
    dataset: Dataset
    plan: PartitionPlan
    clients: list[ClientState]
    bank: GlobalPrototypeBank
    published: dict[int, np.ndarray]
    sampling_rng: np.random.Generator
    server_rng: np.random.Generator
    round: int = 0
    last_sets: list[ClientPrototypeSet] = field(default_factory=list)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    records: list[RoundRecord]
    world: Optional[World] = None

    @property
    def best_accuracy(self) -> float:
        return max((r.mean_test_acc for r in self.records), default=float("nan"))

    @property
    def best_round(self) -> int:
        accs = [r.mean_test_acc for r in self.records]
        return self.records[int(np.argmax(accs))].round if accs else 0


def global_objective(client_losses, sizes) -> float:
    """Dataset-size weighted sum of client losses."""
    losses = np.asarray(client_losses, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if losses.shape != sizes.shape or losses.ndim != 1:
        raise ShapeError(f"{losses.shape[0] if losses.ndim else 0} losses for {sizes.shape} sizes")
    if np.any(sizes <= 0):
        raise ValueError("client sizes must be positive")
    return float(np.dot(sizes / sizes.sum(), losses))


def sample_clients(n_clients: int, join_ratio: float, rng: np.random.Generator) -> list[int]:
    k = math.ceil(join_ratio * n_clients)
    if k >= n_clients:
        return list(range(n_clients))
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "synthetic":
        return generate_synthetic(cfg.n_classes, cfg.input_dim, cfg.n_per_class, cfg.spread,
                                  derived_seed(cfg.seed, _DATA))
    return load_idx(cfg.images_path, cfg.labels_path)


def make_plan(cfg: ExperimentConfig, ds: Dataset) -> PartitionPlan:
    pseed = derived_seed(cfg.seed, _PARTITION)
    if cfg.partition == "pathological":
        plan = partition_pathological(ds, cfg.clients, cfg.classes_per_client, pseed)
    else:
        plan = partition_dirichlet(ds, cfg.clients, cfg.alpha, pseed, min_samples=cfg.min_client_samples)
    return split_train_test(plan, ds.labels, cfg.train_ratio, derived_seed(cfg.seed, _SPLIT))


def model_spec_for(cfg: ExperimentConfig, client_id: int, input_dim: int, n_classes: int) -> MlpSpec:
    hidden = cfg.model_groups[client_id % len(cfg.model_groups)]
    return MlpSpec((input_dim, *hidden, cfg.feature_dim), n_classes)


def _freeze(published):
    out = {}
    for c, v in published.items():
        a = np.array(v, dtype=np.float64)
        a.flags.writeable = False
        out[int(c)] = a
    return out


def build_world(cfg: ExperimentConfig, dataset: Optional[Dataset] = None) -> World:
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.n_classes < 2:
        raise ConfigError("n_classes: dataset has fewer than two classes")
    plan = make_plan(cfg, ds)
    clients = []
    for k in range(cfg.clients):
        spec = model_spec_for(cfg, k, ds.dim, ds.n_classes)
        clients.append(ClientState(
            client_id=k,
            model=init_model(spec, stream(cfg.seed, _INIT, k)),
            x_train=ds.features[plan.train[k]], y_train=ds.labels[plan.train[k]],
            x_test=ds.features[plan.test[k]], y_test=ds.labels[plan.test[k]],
            lambda_c=cfg.lambda_c, epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=cfg.lr,
            rng=stream(cfg.seed, _TRAIN, k),
        ))
    bank = GlobalPrototypeBank.initialize(ds.n_classes, cfg.feature_dim, stream(cfg.seed, _BANK))
    published = publish(bank) if cfg.strategy == ORGP else {}
    return World(cfg, ds, plan, clients, bank, _freeze(published),
                 stream(cfg.seed, _SAMPLING), stream(cfg.seed, _SERVER))


def _client_task(state: ClientState, published):
    state, trace = local_train(state, published)
    return trace, extract_prototypes(state)


def run_round(world: World, strategy: Optional[str] = None) -> RoundRecord:
    cfg = world.cfg
    strategy = canonical_strategy(strategy or cfg.strategy)
    t0 = time.perf_counter()
    world.round += 1
    sampled = sample_clients(cfg.clients, cfg.join_ratio, world.sampling_rng)
    published = world.published
    probe_state = world.clients[cfg.probe_client] if cfg.probe_client in sampled else None
    probe_start = full_objective(probe_state, published)[0] if probe_state is not None else None

    states = [world.clients[k] for k in sampled]
    if cfg.workers > 1 and len(states) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda s: _client_task(s, published), states))
    else:
        results = [_client_task(s, published) for s in states]
    traces = {k: tr for k, (tr, _) in zip(sampled, results)}
    sets = [ps for _, ps in results]

    server_trace = None
    if strategy == ORGP:
        world.bank, server_trace = train_global_prototypes(world.bank, sets, cfg.server, world.server_rng)
        new_published = publish(world.bank)
    else:
        new_published = weighted_average_aggregate(sets)
    world.published = _freeze(new_published)
    world.last_sets = sets

    probe = None
    if probe_state is not None:
        tr = traces[cfg.probe_client]
        probe = ProbeData(cfg.probe_client, probe_start, full_objective(probe_state, world.published)[0],
                          tr.grad_sq_sum, tr.steps)

    losses = [full_objective(c, published)[0] for c in world.clients]
    objective = global_objective(losses, [c.n_train for c in world.clients])
    return RoundRecord(
        round=world.round,
        sampled=sampled,
        train_loss={k: float(np.mean(tr.loss)) for k, tr in traces.items()},
        grad_sq_sum={k: tr.grad_sq_sum for k, tr in traces.items()},
        steps={k: tr.steps for k, tr in traces.items()},
        skipped_alignment={k: tr.skipped_alignment for k, tr in traces.items()},
        test_acc=[evaluate(c) for c in world.clients],
        global_objective=objective,
        server=server_trace,
        probe=probe,
        wall_clock=time.perf_counter() - t0,
    )


def run_experiment(cfg: ExperimentConfig, dataset: Optional[Dataset] = None, keep_world: bool = True,
                   progress=None) -> ExperimentReport:
    cfg.validate()
    world = build_world(cfg, dataset)
    records = []
    for _ in range(cfg.rounds):
        records.append(run_round(world))
        if progress is not None:
            progress(records[-1])
    return ExperimentReport(cfg, records, world if keep_world else None)
