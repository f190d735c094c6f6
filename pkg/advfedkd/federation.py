"""Federated simulation: Dirichlet label-skew partitioning, local updates,
size-weighted aggregation and communication accounting.

One round:
    broadcast the global snapshot -> every client runs ``local_update`` ->
    ``aggregate`` weighted by shard size -> optional evaluation.
Clients of a round only read the shared snapshot, so they may run in worker
threads; results are always combined in client-index order.
"""

from __future__ import annotations
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .attacks import MNIST_BUDGET, AdvBudget, AttackSpec, pgd_attack
from .data import Dataset
from .distill import (
    LossBreakdown,
    LossWeights,
    akd_loss,
    alg_loss,
    plain_kd_terms,
    total_loss,
    vkd_loss,
)
from .exceptions import AggregationError, DivergenceError, EmptyDatasetError, PartitionError
from .metrics import evaluate_clean, evaluate_robust
from .mixture import MixConfig, MixedBatch, mix_batch, sample_lambda, sample_permutation
from .models import ModelParams, ModelSpec, Teacher, cross_entropy_loss_fn, forward, init_params, param_count
from .tensor import add, backward, cross_entropy
from .utils import derive_seed

logger = logging.getLogger(__name__)

METHODS = ("fedavg", "fedpgd", "vkd", "akd", "pm_afl", "pm_afl_pp")
TEACHER_METHODS = ("vkd", "akd", "pm_afl", "pm_afl_pp")
MIXUP_METHODS = ("vkd", "akd", "pm_afl_pp")


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 5
    concentration: float = 0.1
    seed: int = 0
    min_shard_size: int = 10
    max_retries: int = 100

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.concentration > 0:
            raise ValueError(f"concentration must be > 0, got {self.concentration}")
        if self.min_shard_size < 1:
            raise ValueError(f"min_shard_size must be >= 1, got {self.min_shard_size}")
        if self.max_retries < 1:
            raise ValueError(f"max_retries must be >= 1, got {self.max_retries}")


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    indices: np.ndarray  # sorted global example ids
    seed: int

    @property
    def size(self) -> int:
        return int(self.indices.size)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions``."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def dirichlet_partition(labels: Sequence[int], config: PartitionConfig) -> List[ClientShard]:
    """Split example ids among clients with per-class Dir(a) proportions.

    The whole proportion matrix is redrawn until every shard holds at least
    ``min_shard_size`` examples, at most ``max_retries`` times.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyDatasetError("cannot partition an empty label set")
    n_clients = config.num_clients
    rng = np.random.default_rng(config.seed)

    if n_clients == 1:
        if labels.size < config.min_shard_size:
            raise PartitionError(f"{labels.size} examples < min_shard_size {config.min_shard_size}")
        assignment = [np.arange(labels.size)]
    else:
        classes = np.unique(labels)
        by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
        for attempt in range(config.max_retries):
            props = rng.dirichlet(np.full(n_clients, config.concentration), size=len(classes))
            if not np.all(np.isfinite(props)):
                continue
            parts: List[List[np.ndarray]] = [[] for _ in range(n_clients)]
            for row, idx in zip(props, by_class):
                counts = _largest_remainder(row / row.sum(), idx.size)
                for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                    parts[client].append(chunk)
            assignment = [np.concatenate(p) for p in parts]
            if min(a.size for a in assignment) >= config.min_shard_size:
                logger.debug("dirichlet partition accepted after %d draw(s)", attempt + 1)
                break
        else:
            raise PartitionError(
                f"no partition with every shard >= {config.min_shard_size} after "
                f"{config.max_retries} draws ({labels.size} examples, {n_clients} clients, a={config.concentration})"
            )

    return [
        ClientShard(client_id=i, indices=np.sort(idx).astype(np.int64), seed=derive_seed(config.seed, i))
        for i, idx in enumerate(assignment)
    ]


@dataclass(frozen=True)
class FedConfig:
    student_spec: ModelSpec
    method: str = "pm_afl_pp"
    rounds: int = 30
    local_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 0.05
    budget: AdvBudget = MNIST_BUDGET
    mix: MixConfig = MixConfig()
    weights: LossWeights = LossWeights()
    alignment: Optional[bool] = None
    eval_attacks: Tuple[AttackSpec, ...] = ()
    eval_every: int = 5
    eval_batch_size: int = 500
    init_seed: int = 0
    eval_seed: int = 0
    threads: int = 1
    teacher_cache: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}', expected one of {METHODS}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        for name in ("local_epochs", "batch_size", "eval_every", "eval_batch_size", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")

    @property
    def needs_teacher(self) -> bool:
        return self.method in TEACHER_METHODS

    @property
    def uses_alignment(self) -> bool:
        """ALG is on for pm_afl_pp unless switched off; opt-in for other distillation methods."""
        if self.method not in TEACHER_METHODS:
            return False
        return self.method == "pm_afl_pp" if self.alignment is None else bool(self.alignment)

    @property
    def needs_adversarial(self) -> bool:
        return self.method in ("fedpgd", "akd", "pm_afl", "pm_afl_pp") or self.uses_alignment


@dataclass(frozen=True)
class LocalResult:
    params: ModelParams
    breakdown: LossBreakdown  # mean over this client's batches
    num_batches: int


def communication_cost(spec: ModelSpec, num_clients: int) -> int:
    """Scalars moved per round: every client downloads and uploads one student."""
    return 2 * num_clients * param_count(spec)


def _batch_objective(
    cfg: FedConfig,
    teacher: Optional[Teacher],
    global_params: ModelParams,
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    ids: np.ndarray,
    rng: np.random.Generator,
) -> Callable[[Mapping], LossBreakdown]:
    """Draw this batch's AEs and mixing pair, and return the loss over student leaves."""
    method, temperature = cfg.method, cfg.weights.temperature
    x_adv = pgd_attack(cross_entropy_loss_fn(params), x, y, cfg.budget, rng) if cfg.needs_adversarial else None
    clean_mix = adv_mix = None
    if method in MIXUP_METHODS:
        lam = sample_lambda(cfg.mix, rng)
        perm = sample_permutation(x.shape[0], rng)
        clean_mix = MixedBatch(mix_batch(x, perm, lam), perm, lam)
        if x_adv is not None:
            adv_mix = MixedBatch(mix_batch(x_adv, perm, lam), perm, lam)

    def objective(w) -> LossBreakdown:
        if method == "fedavg":
            return LossBreakdown.single(cross_entropy(forward(w, x), y))
        if method == "fedpgd":
            return LossBreakdown.single(cross_entropy(forward(w, x_adv), y))
        alg = alg_loss(w, global_params, x, x_adv) if cfg.uses_alignment else None
        if method == "pm_afl":
            clean, robust = plain_kd_terms(teacher, w, x, x_adv, temperature, ids)
            return total_loss(cfg.weights, clean, robust, 0.0 if alg is None else alg)
        if method == "pm_afl_pp":
            vkd = vkd_loss(teacher, w, x, clean_mix, temperature, ids)
            akd = akd_loss(teacher, w, x, x_adv, adv_mix, temperature, ids)
            return total_loss(cfg.weights, vkd, akd, 0.0 if alg is None else alg)
        # single-term ablations
        term = (vkd_loss(teacher, w, x, clean_mix, temperature, ids) if method == "vkd"
                else akd_loss(teacher, w, x, x_adv, adv_mix, temperature, ids))
        objective_t = term if alg is None else add(term, alg)
        return LossBreakdown(
            vkd=term.item() if method == "vkd" else 0.0,
            akd=term.item() if method == "akd" else 0.0,
            alg=0.0 if alg is None else alg.item(),
            total=objective_t.item(),
            objective=objective_t,
        )

    return objective


def _sgd_step(params: ModelParams, objective, learning_rate: float, coords: Dict[str, int]):
    leaves = params.leaves()
    breakdown = objective(leaves)
    if not np.isfinite(breakdown.total):
        raise DivergenceError("non-finite training loss", **coords)
    grads = backward(breakdown.objective, wrt=leaves.values())
    new = params.sgd_step({n: grads[t] for n, t in leaves.items()}, learning_rate)
    if not new.is_finite():
        raise DivergenceError("non-finite parameters after SGD step", **coords)
    return new, replace(breakdown, objective=None)


def _train_epochs(
    params: ModelParams,
    global_params: ModelParams,
    indices: np.ndarray,
    train_set: Dataset,
    teacher: Optional[Teacher],
    cfg: FedConfig,
    rng: np.random.Generator,
    epochs: int,
    round_index: Optional[int] = None,
    client_id: Optional[int] = None,
) -> Tuple[ModelParams, List[LossBreakdown]]:
    if cfg.needs_teacher and teacher is None:
        raise ValueError(f"method '{cfg.method}' needs a teacher")
    history: List[LossBreakdown] = []
    for epoch in range(epochs):
        order = rng.permutation(indices)
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            ids = order[start:start + cfg.batch_size]
            x, y = train_set.features[ids], train_set.labels[ids]
            objective = _batch_objective(cfg, teacher, global_params, params, x, y, ids, rng)
            coords = {"round": round_index, "client": client_id, "epoch": epoch, "batch": b}
            params, breakdown = _sgd_step(params, objective, cfg.learning_rate, coords)
            history.append(breakdown)
    return params, history


def local_update(
    global_params: ModelParams,
    shard: ClientShard,
    teacher: Optional[Teacher],
    config: FedConfig,
    train_set: Dataset,
    rng: Optional[np.random.Generator] = None,
    round_index: Optional[int] = None,
) -> LocalResult:
    """``local_epochs`` passes of SGD over one shard, starting from the broadcast.

    The broadcast snapshot doubles as the frozen ALG reference for the whole
    update. ``rng`` is the client's persistent stream; a fresh one is seeded
    from the shard when omitted.
    """
    rng = rng if rng is not None else np.random.default_rng(shard.seed)
    params, history = _train_epochs(
        global_params, global_params, shard.indices, train_set, teacher, config, rng,
        config.local_epochs, round_index, shard.client_id,
    )
    return LocalResult(params=params, breakdown=LossBreakdown.mean(history), num_batches=len(history))


def aggregate(param_list: Sequence[ModelParams], sizes: Sequence[float]) -> ModelParams:
    """Size-weighted average, summed in list order: sum_i (D_i / sum D) * w_i."""
    if not param_list:
        raise AggregationError("nothing to aggregate")
    if len(param_list) != len(sizes):
        raise AggregationError(f"{len(param_list)} models but {len(sizes)} sizes")
    spec = param_list[0].spec
    for i, p in enumerate(param_list):
        if p.spec != spec:
            raise AggregationError(f"client {i} has spec {p.spec.layer_dims}, expected {spec.layer_dims}")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise AggregationError(f"client sizes must be positive, got {sizes.tolist()}")
    weights = sizes / sizes.sum()
    out = {}
    for name in spec.param_shapes():
        acc = weights[0] * param_list[0][name]
        for w, p in zip(weights[1:], param_list[1:]):
            acc = acc + w * p[name]
        out[name] = acc
    return ModelParams(spec, out)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    client_losses: Tuple[LossBreakdown, ...]
    comm_params: int
    cumulative_comm_params: int
    clean_accuracy: Optional[float] = None
    robust_accuracies: Dict[str, float] = field(default_factory=dict)
    average_robust: Optional[float] = None

    @property
    def evaluated(self) -> bool:
        return self.clean_accuracy is not None

    @property
    def mean_loss(self) -> LossBreakdown:
        return LossBreakdown.mean(self.client_losses)


@dataclass
class RunHistory:
    records: List[RoundRecord]
    final_params: ModelParams
    shards: List[ClientShard]

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def prepare_teacher(teacher: Optional[Teacher], config: FedConfig, train_set: Dataset) -> Optional[Teacher]:
    """Teacher view used during training: distillation temperature, optional cache over the train ids."""
    if teacher is None or not config.needs_teacher:
        return teacher
    view = teacher.with_temperature(config.weights.temperature)
    if config.teacher_cache:
        view = view.with_cache(train_set.features, np.arange(len(train_set)))
    return view


def train_centralized(
    initial: ModelParams,
    train_set: Dataset,
    teacher: Optional[Teacher],
    config: FedConfig,
    epochs: int,
    seed: int,
) -> ModelParams:
    """Single-party reference: ``epochs`` passes over the whole train set with one RNG stream."""
    view = prepare_teacher(teacher, config, train_set)
    params, _ = _train_epochs(
        initial, initial, np.arange(len(train_set)), train_set, view, config,
        np.random.default_rng(seed), epochs,
    )
    return params


def run_rounds(
    train_set: Dataset,
    test_set: Dataset,
    fed_config: FedConfig,
    partition_config: PartitionConfig,
    teacher: Optional[Teacher] = None,
    initial: Optional[ModelParams] = None,
    on_record: Optional[Callable[[RoundRecord], None]] = None,
) -> RunHistory:
    """Full-participation federated training for ``fed_config.rounds`` rounds."""
    cfg = fed_config
    if cfg.needs_teacher and teacher is None:
        raise ValueError(f"method '{cfg.method}' needs a teacher")
    shards = dirichlet_partition(train_set.labels, partition_config)
    sizes = [s.size for s in shards]
    global_params = initial if initial is not None else init_params(cfg.student_spec, cfg.init_seed)
    view = prepare_teacher(teacher, cfg, train_set)
    rngs = [np.random.default_rng(s.seed) for s in shards]
    per_round = communication_cost(global_params.spec, len(shards))
    logger.info(
        "%s: %d clients (sizes %s), %d rounds, %d params/round",
        cfg.method, len(shards), sizes, cfg.rounds, per_round,
    )

    records: List[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            snapshot = global_params
            jobs = [
                (lambda s=s, r=r: local_update(snapshot, s, view, cfg, train_set, rng=r, round_index=t))
                for s, r in zip(shards, rngs)
            ]
            results = list(pool.map(lambda job: job(), jobs)) if pool else [job() for job in jobs]
            global_params = aggregate([r.params for r in results], sizes)

            record = RoundRecord(
                round=t,
                client_losses=tuple(r.breakdown for r in results),
                comm_params=per_round,
                cumulative_comm_params=per_round * t,
            )
            if t % cfg.eval_every == 0 or t == cfg.rounds:
                record = _evaluate_round(record, global_params, test_set, cfg)
            records.append(record)
            _log_round(record)
            if on_record is not None:
                on_record(record)
    except Exception:
        logger.error("run aborted after %d completed round(s)", len(records))
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    return RunHistory(records=records, final_params=global_params, shards=shards)


def _evaluate_round(record: RoundRecord, params: ModelParams, test_set: Dataset, cfg: FedConfig) -> RoundRecord:
    clean = evaluate_clean(params, test_set)
    if not cfg.eval_attacks:
        return replace(record, clean_accuracy=clean)
    report = evaluate_robust(
        params, test_set, cfg.eval_attacks,
        seed=derive_seed(cfg.eval_seed, record.round), batch_size=cfg.eval_batch_size,
    )
    return replace(record, clean_accuracy=clean, robust_accuracies=dict(report.per_attack),
                   average_robust=report.average)


def _log_round(record: RoundRecord) -> None:
    loss = record.mean_loss
    if record.evaluated:
        robust = "n/a" if record.average_robust is None else f"{record.average_robust:.2f}"
        logger.info(
            "round %d  loss %.4f  clean %.2f  avg robust %s  comm %d",
            record.round, loss.total, record.clean_accuracy, robust, record.cumulative_comm_params,
        )
    else:
        logger.info("round %d  loss %.4f  comm %d", record.round, loss.total, record.cumulative_comm_params)
    for i, b in enumerate(record.client_losses):
        logger.debug("round %d client %d  %s", record.round, i, b.as_dict())
