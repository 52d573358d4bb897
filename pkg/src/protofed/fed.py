"""Federated round protocol: broadcast, local updates, payload wire format,
weighted aggregation, and the variant grid.

Clients exchange only the adapter group and the prototype/head group; the
frozen backbone never leaves a client.  Every source of randomness is a
deterministic function of (master seed, client id, epoch counter), so runs
are reproducible regardless of how many workers execute clients in
parallel.
"""

from __future__ import annotations

import csv
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .data import SiteDataset, balanced_batches, split_train_val
from .errors import ConfigurationError, NumericError, ProtocolError
from .loss import LossWeights, local_loss, range_penalty
from .model import ModelConfig, ParamGroups, PrototypeModel
from .tensor import Tensor, no_grad

_PAYLOAD_MAGIC = b"PFPL"
_PAYLOAD_VERSION = 1
_FLAG_ALPHA = 1
_FLAG_PHI = 2

METRICS_HEADER = ("round", "client", "ce", "clst", "sep", "l1", "adapter_l2",
                  "prox", "total", "train_acc", "val_acc", "test_acc", "payload_bytes")

# variant name -> (communicate_adapters, communicate_prototypes, use_prox)
VARIANTS = {
    "fedavg": (True, True, False),
    "fedprox": (True, True, True),
    "adapters_noprox": (True, False, False),
    "adapters_prox": (True, False, True),
    "protos_only": (False, True, False),
    "protofed": (True, True, True),
}
DEFAULT_GRID = tuple(VARIANTS)


@dataclass
class FedConfig:
    num_clients: int = 4
    rounds: int = 50
    local_epochs: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 16
    optimizer: str = "adam"
    master_seed: int = 42
    communicate_adapters: bool = True
    communicate_prototypes: bool = True
    communicate_head: bool = True
    use_prox: bool = True
    allow_partial: bool = False
    reset_optimizer_each_round: bool = False
    eval_batch: int = 256

    def validate(self):
        if self.num_clients < 1:
            raise ConfigurationError("need at least one client")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ConfigurationError("local epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer '{self.optimizer}'")
        if not (self.communicate_adapters or self.communicate_prototypes):
            raise ConfigurationError("at least one communicate_* switch must be on")


@dataclass
class WarmupConfig:
    steps: int = 300
    learning_rate: float = 2e-3
    batch_size: int = 16
    range_weight: float = 2.0  # keeps warmup features on the prototype scale
    range_limit: float = 1.0   # activation level the penalty caps toward
    jitter: int = 8  # random per-batch translation, pixels; breaks the
    #                  off-center prototype niches that sub-tile pooling allows


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, tensors):
        for t in tensors:
            if t.trainable and t.grad is not None:
                t.data -= self.lr * t.grad

    def reset(self):
        pass


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, tensors):
        for t in tensors:
            if not t.trainable or t.grad is None:
                continue
            m, v, k = self.state.get(id(t), (np.zeros_like(t.data), np.zeros_like(t.data), 0))
            k += 1
            m = self.beta1 * m + (1.0 - self.beta1) * t.grad
            v = self.beta2 * v + (1.0 - self.beta2) * t.grad * t.grad
            mhat = m / (1.0 - self.beta1**k)
            vhat = v / (1.0 - self.beta2**k)
            t.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.state[id(t)] = (m, v, k)

    def reset(self):
        self.state.clear()


def make_optimizer(name: str, lr: float):
    return Adam(lr) if name == "adam" else Sgd(lr)


@dataclass
class ClientState:
    client_id: int
    train: SiteDataset
    val: SiteDataset
    model: PrototypeModel
    optimizer: object
    epoch_counter: int = 0

    @property
    def num_samples(self) -> int:
        return len(self.train)


@dataclass
class GlobalState:
    alpha: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    round_index: int = 0


@dataclass
class RoundPayload:
    client_id: int
    round_index: int
    num_samples: int
    alpha: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    byte_length: int = 0


def communicated_subsets(params: ParamGroups, cfg: FedConfig
                         ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Copies of the parameter arrays the variant switches put on the wire."""
    alpha = params.arrays("alpha") if cfg.communicate_adapters else {}
    phi = {}
    if cfg.communicate_prototypes:
        phi = params.arrays("phi")
        if not cfg.communicate_head:
            phi.pop("head", None)
    return alpha, phi


def initial_global_state(model: PrototypeModel, cfg: FedConfig) -> GlobalState:
    alpha, phi = communicated_subsets(model.params, cfg)
    return GlobalState(alpha=alpha, phi=phi, round_index=0)


def broadcast(global_state: GlobalState, clients: list[ClientState]):
    """Overwrite each client's communicated groups with the global values."""
    for client in clients:
        params = client.model.params
        for name, arr in global_state.alpha.items():
            t = params.alpha.get(name)
            if t is None or t.data.shape != arr.shape:
                raise ProtocolError(f"broadcast: client {client.client_id} cannot take '{name}'")
            np.copyto(t.data, arr)
        for name, arr in global_state.phi.items():
            t = params.phi.get(name)
            if t is None or t.data.shape != arr.shape:
                raise ProtocolError(f"broadcast: client {client.client_id} cannot take '{name}'")
            np.copyto(t.data, arr)


def _epoch_seed(master_seed: int, client_id: int, epoch_counter: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, client_id, epoch_counter, 0xE90C])


def _run_epoch(client: ClientState, cfg: FedConfig, weights: LossWeights,
               alpha_global: dict[str, np.ndarray], phi_global: dict[str, np.ndarray],
               sums: np.ndarray, counters: np.ndarray):
    """One pass over the client's class-balanced sampler, updating in place."""
    model = client.model
    dtype = model.config.dtype
    seed = _epoch_seed(cfg.master_seed, client.client_id, client.epoch_counter)
    trainables = model.params.trainable()
    for bi, idx in enumerate(balanced_batches(client.train, cfg.batch_size, seed,
                                              num_classes=model.config.num_classes)):
        x = Tensor(client.train.images[idx].astype(dtype, copy=False))
        labels = client.train.labels[idx]
        logits, dmaps, _ = model.forward(x)
        total, bd = local_loss(logits, dmaps, labels, model.params, model.proto_layer,
                               model.head, weights, alpha_global=alpha_global,
                               phi_global=phi_global)
        if not math.isfinite(bd.total):
            raise NumericError(
                f"client {client.client_id}: non-finite loss {bd.total} at "
                f"epoch {client.epoch_counter}, batch {bi}"
            )
        for t in trainables:
            t.zero_grad()
        total.backward()
        client.optimizer.step(trainables)
        sums += np.asarray(bd.as_tuple())
        counters[0] += 1
        counters[1] += int((np.argmax(logits.data, axis=1) == labels).sum())
        counters[2] += len(labels)
    client.epoch_counter += 1


def local_update(client: ClientState, global_state: GlobalState, cfg: FedConfig,
                 weights: LossWeights) -> tuple[RoundPayload, dict]:
    """Run E local epochs and package the communicated parameter subset."""
    if len(client.train) < 1:
        raise ConfigurationError(f"client {client.client_id} has no training data")
    if cfg.reset_optimizer_each_round:
        client.optimizer.reset()
    ag = global_state.alpha if (cfg.use_prox and cfg.communicate_adapters) else {}
    pg = global_state.phi if (cfg.use_prox and cfg.communicate_prototypes) else {}
    sums = np.zeros(len(METRICS_HEADER) - 6, dtype=np.float64)  # the 7 loss fields
    counters = np.zeros(3, dtype=np.int64)  # batches, correct, seen
    for _ in range(cfg.local_epochs):
        _run_epoch(client, cfg, weights, ag, pg, sums, counters)
    alpha, phi = communicated_subsets(client.model.params, cfg)
    payload = RoundPayload(
        client_id=client.client_id,
        round_index=global_state.round_index + 1,
        num_samples=client.num_samples,
        alpha=alpha,
        phi=phi,
    )
    nb = max(int(counters[0]), 1)
    metrics = {name: sums[i] / nb for i, name in enumerate(
        ("ce", "clst", "sep", "l1", "adapter_l2", "prox", "total"))}
    metrics["train_acc"] = counters[1] / max(int(counters[2]), 1)
    return payload, metrics


def aggregate(payloads: list[RoundPayload], allow_partial: bool = False,
              expected_clients: int | None = None) -> GlobalState:
    """Sample-count-weighted average of the communicated groups.

    Accumulates in ascending client-id order using the anchored form
    t0 + sum_i w_i (t_i - t0), which is algebraically the convex combination
    and leaves identical inputs exactly unchanged.
    """
    if not payloads:
        raise ProtocolError("aggregate: no payloads")
    payloads = sorted(payloads, key=lambda p: p.client_id)
    if expected_clients is not None and len(payloads) != expected_clients:
        if not allow_partial:
            got = [p.client_id for p in payloads]
            raise ProtocolError(
                f"aggregate: got {len(payloads)} of {expected_clients} payloads (ids {got})"
            )
    rounds = {p.round_index for p in payloads}
    if len(rounds) != 1:
        raise ProtocolError(f"aggregate: payloads span rounds {sorted(rounds)}")
    first = payloads[0]
    for p in payloads[1:]:
        for gname in ("alpha", "phi"):
            a, b = getattr(first, gname), getattr(p, gname)
            if set(a) != set(b) or any(a[k].shape != b[k].shape for k in a):
                raise ProtocolError(
                    f"aggregate: payload from client {p.client_id} has mismatched '{gname}' group"
                )
    total = sum(p.num_samples for p in payloads)
    weights = [p.num_samples / total for p in payloads]

    def combine(group_name: str) -> dict[str, np.ndarray]:
        anchor = getattr(first, group_name)
        out = {k: v.copy() for k, v in anchor.items()}
        for p, w in zip(payloads[1:], weights[1:]):
            for k, v in getattr(p, group_name).items():
                out[k] += w * (v - anchor[k])
        return out

    return GlobalState(alpha=combine("alpha"), phi=combine("phi"),
                       round_index=first.round_index)


def aggregation_weights(sizes: list[int]) -> list[float]:
    total = sum(sizes)
    return [s / total for s in sizes]


# ---------------------------------------------------------------------------
# payload wire format
# ---------------------------------------------------------------------------


def serialize_payload(payload: RoundPayload) -> bytes:
    buf = bytearray()
    buf += _PAYLOAD_MAGIC
    flags = (_FLAG_ALPHA if payload.alpha else 0) | (_FLAG_PHI if payload.phi else 0)
    buf += struct.pack("<HIIQB", _PAYLOAD_VERSION, payload.client_id,
                       payload.round_index, payload.num_samples, flags)
    for group in (payload.alpha, payload.phi):
        if not group:
            continue
        buf += struct.pack("<I", len(group))
        for name, arr in group.items():
            M._write_record(buf, name, arr)
    payload.byte_length = len(buf)
    return bytes(buf)


def deserialize_payload(data: bytes) -> RoundPayload:
    if data[:4] != _PAYLOAD_MAGIC:
        raise ProtocolError(f"bad payload magic at offset 0: {data[:4]!r}")
    try:
        version, client_id, round_index, num_samples, flags = struct.unpack_from("<HIIQB", data, 4)
    except struct.error:
        raise ProtocolError(f"truncated payload header (length {len(data)})")
    if version != _PAYLOAD_VERSION:
        raise ProtocolError(f"unsupported payload version {version}")
    offset = 4 + struct.calcsize("<HIIQB")
    groups: list[dict[str, np.ndarray]] = []
    for flag in (_FLAG_ALPHA, _FLAG_PHI):
        if not flags & flag:
            groups.append({})
            continue
        if offset + 4 > len(data):
            raise ProtocolError(f"truncated payload group count at offset {offset}")
        (n,) = struct.unpack_from("<I", data, offset)
        offset += 4
        group: dict[str, np.ndarray] = {}
        for _ in range(n):
            name, arr, offset = M._read_record(data, offset)
            group[name] = arr
        groups.append(group)
    if offset != len(data):
        raise ProtocolError(f"{len(data) - offset} trailing bytes after payload")
    return RoundPayload(client_id=client_id, round_index=round_index,
                        num_samples=num_samples, alpha=groups[0], phi=groups[1],
                        byte_length=len(data))


# ---------------------------------------------------------------------------
# evaluation and warmup
# ---------------------------------------------------------------------------


def evaluate_accuracy(model: PrototypeModel, ds: SiteDataset, batch: int = 256) -> float:
    dtype = model.config.dtype
    correct = 0
    with no_grad():
        for start in range(0, len(ds), batch):
            chunk = slice(start, start + batch)
            logits, _, _ = model.forward(Tensor(ds.images[chunk].astype(dtype, copy=False)))
            correct += int((np.argmax(logits.data, axis=1) == ds.labels[chunk]).sum())
    return correct / len(ds)


def build_initial_model(model_cfg: ModelConfig, master_seed: int,
                        weights: LossWeights | None = None,
                        warmup_cfg: WarmupConfig | None = None,
                        pretrain_site: SiteDataset | None = None) -> PrototypeModel:
    """Fresh model; in warmup mode, centrally pretrain backbone + prototypes
    on the disjoint pretraining split, then freeze the backbone."""
    model = PrototypeModel(model_cfg, seed=master_seed)
    if model_cfg.backbone.freeze_mode != "warmup-pretrained":
        return model
    if pretrain_site is None:
        raise ConfigurationError("warmup-pretrained freeze mode needs a pretraining dataset")
    warmup_cfg = warmup_cfg or WarmupConfig()
    weights = weights or LossWeights()
    # adapters stay untouched during warmup: no proximal/adapter terms either
    wweights = replace(weights, beta=0.0, mu1=0.0, mu2=0.0)
    optimizer = Adam(warmup_cfg.learning_rate)
    trainables = list(model.params.omega.values()) + list(model.params.phi.values())
    dtype = model_cfg.dtype
    step = 0
    epoch = 0
    while step < warmup_cfg.steps:
        seed = np.random.SeedSequence([master_seed, epoch, 0x77A2])
        jit_rng = np.random.default_rng(np.random.SeedSequence([master_seed, epoch, 0x71773]))
        for idx in balanced_batches(pretrain_site, warmup_cfg.batch_size, seed,
                                    num_classes=model_cfg.num_classes):
            if step >= warmup_cfg.steps:
                break
            batch = pretrain_site.images[idx].astype(dtype, copy=False)
            if warmup_cfg.jitter > 0:
                j = warmup_cfg.jitter
                dy, dx = int(jit_rng.integers(-j, j + 1)), int(jit_rng.integers(-j, j + 1))
                batch = np.roll(batch, (dy, dx), axis=(2, 3))
            x = Tensor(batch)
            labels = pretrain_site.labels[idx]
            z = model.backbone_forward(x, use_adapters=False)
            dmaps, scores = model.prototype_similarities(z)
            logits = M.head_logits(scores, model.head)
            total, bd = local_loss(logits, dmaps, labels, model.params,
                                   model.proto_layer, model.head, wweights)
            if warmup_cfg.range_weight > 0:
                total = _add_scaled(total, range_penalty(z, warmup_cfg.range_limit),
                                    warmup_cfg.range_weight)
            if not math.isfinite(float(total.data)):
                raise NumericError(f"warmup: non-finite loss at step {step}")
            for t in trainables:
                t.zero_grad()
            total.backward()
            optimizer.step(trainables)
            step += 1
        epoch += 1
    model.freeze_backbone()
    return model


def _add_scaled(a: Tensor, b: Tensor, c: float) -> Tensor:
    out = np.asarray(float(a.data) + c * float(b.data))

    def backward(g: np.ndarray):
        if a.requires_grad:
            a.accumulate(np.asarray(float(g)))
        if b.requires_grad:
            b.accumulate(np.asarray(c * float(g)))

    from .tensor import _make
    return _make(out, (a, b), backward)


def make_clients(base_model: PrototypeModel, cfg: FedConfig,
                 train_sites: list[SiteDataset]) -> list[ClientState]:
    clients = []
    for i, site in enumerate(train_sites):
        tr, va = split_train_val(site, 0.8, seed=int(
            np.random.SeedSequence([cfg.master_seed, i, 0x5B11]).generate_state(1)[0]))
        clients.append(ClientState(
            client_id=i, train=tr, val=va, model=base_model.clone(),
            optimizer=make_optimizer(cfg.optimizer, cfg.learning_rate),
        ))
    return clients


def alpha_alignment(client: ClientState, global_state: GlobalState) -> float:
    """L2 distance between the client's adapters and the last broadcast ones."""
    sq = 0.0
    for name, arr in global_state.alpha.items():
        diff = client.model.params.alpha[name].data - arr
        sq += float(np.sum(diff * diff))
    return math.sqrt(sq)


# ---------------------------------------------------------------------------
# the round loop
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    rows: list[dict] = field(default_factory=list)
    alignment: list[dict] = field(default_factory=list)  # round, client, alpha_l2
    final_test_acc: dict[int, float] = field(default_factory=dict)
    avg_test_acc: float = 0.0
    payload_bytes: int = 0
    checkpoint_bytes: int = 0
    wall_seconds: float = 0.0
    out_dir: Path | None = None

    @property
    def payload_ratio(self) -> float:
        return self.payload_bytes / self.checkpoint_bytes if self.checkpoint_bytes else 0.0


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _metrics_row(round_index: int, client_id: int, losses: dict | None,
                 val_acc: float, test_acc: float, payload_bytes: int | None) -> dict:
    row = {k: "" for k in METRICS_HEADER}
    row["round"] = str(round_index)
    row["client"] = str(client_id)
    if losses is not None:
        for k in ("ce", "clst", "sep", "l1", "adapter_l2", "prox", "total", "train_acc"):
            row[k] = _fmt(losses[k])
    row["val_acc"] = _fmt(val_acc)
    row["test_acc"] = _fmt(test_acc)
    row["payload_bytes"] = "" if payload_bytes is None else str(payload_bytes)
    return row


def run_federation(model_cfg: ModelConfig, fed_cfg: FedConfig, weights: LossWeights,
                   train_sites: list[SiteDataset], test_site: SiteDataset,
                   pretrain_site: SiteDataset | None = None,
                   warmup_cfg: WarmupConfig | None = None,
                   initial_model: PrototypeModel | None = None,
                   out_dir=None, workers: int = 1,
                   dump_payloads: bool = False) -> RunReport:
    """Full protocol: for each round broadcast, locally update every client,
    aggregate; evaluates per-client personal models on the held-out site.

    Writes metrics.csv incrementally plus final checkpoints when ``out_dir``
    is given.  Results are independent of ``workers``.
    """
    fed_cfg.validate()
    model_cfg.validate()
    weights.validate()
    if len(train_sites) != fed_cfg.num_clients:
        raise ConfigurationError(
            f"config says {fed_cfg.num_clients} clients but {len(train_sites)} sites given"
        )
    start = time.perf_counter()
    if initial_model is None:
        initial_model = build_initial_model(model_cfg, fed_cfg.master_seed, weights,
                                            warmup_cfg, pretrain_site)
    clients = make_clients(initial_model, fed_cfg, train_sites)
    global_state = initial_global_state(initial_model, fed_cfg)

    report = RunReport()
    out_path = Path(out_dir) if out_dir is not None else None
    payload_dir = None
    csv_file = None
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_path / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=METRICS_HEADER)
        writer.writeheader()
        if dump_payloads:
            payload_dir = out_path / "payloads"
            payload_dir.mkdir(exist_ok=True)

    def emit(row: dict):
        report.rows.append(row)
        if writer is not None:
            writer.writerow(row)
            csv_file.flush()

    def eval_client(client: ClientState) -> tuple[float, float]:
        val = evaluate_accuracy(client.model, client.val, fed_cfg.eval_batch)
        test = evaluate_accuracy(client.model, test_site, fed_cfg.eval_batch)
        return val, test

    pool = ThreadPoolExecutor(max_workers=max(1, workers)) if workers > 1 else None

    def run_tasks(fn):
        if pool is None:
            return [fn(c) for c in clients]
        return list(pool.map(fn, clients))

    try:
        # round 0: evaluation of the initial parameters only
        for client, (val, test) in zip(clients, run_tasks(eval_client)):
            emit(_metrics_row(0, client.client_id, None, val, test, None))

        for r in range(1, fed_cfg.rounds + 1):
            broadcast(global_state, clients)

            def round_task(client: ClientState):
                payload, metrics = local_update(client, global_state, fed_cfg, weights)
                raw = serialize_payload(payload)
                align = alpha_alignment(client, global_state)
                val, test = eval_client(client)
                return payload, raw, metrics, align, val, test

            results = run_tasks(round_task)
            payloads = []
            for client, (payload, raw, metrics, align, val, test) in zip(clients, results):
                received = deserialize_payload(raw)  # the wire is the medium
                payloads.append(received)
                if payload_dir is not None:
                    (payload_dir / f"round_{r:04d}_client_{client.client_id}.bin").write_bytes(raw)
                emit(_metrics_row(r, client.client_id, metrics, val, test, len(raw)))
                report.alignment.append(
                    {"round": r, "client": client.client_id, "alpha_l2": align})
                report.payload_bytes = len(raw)
            global_state = aggregate(payloads, allow_partial=fed_cfg.allow_partial,
                                     expected_clients=fed_cfg.num_clients)
    finally:
        if pool is not None:
            pool.shutdown()
        if csv_file is not None:
            csv_file.close()

    for client in clients:
        last = [row for row in report.rows if row["client"] == str(client.client_id)][-1]
        report.final_test_acc[client.client_id] = float(last["test_acc"])
    report.avg_test_acc = float(np.mean(list(report.final_test_acc.values())))
    report.checkpoint_bytes = len(M.serialize_groups(clients[0].model.params))
    report.wall_seconds = time.perf_counter() - start
    report.out_dir = out_path

    if out_path is not None:
        ckpt_dir = out_path / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        global_model = clients[0].model.clone()
        for name, arr in global_state.alpha.items():
            np.copyto(global_model.params.alpha[name].data, arr)
        for name, arr in global_state.phi.items():
            np.copyto(global_model.params.phi[name].data, arr)
        M.save_checkpoint(ckpt_dir / "global.ckpt", global_model.params)
        for client in clients:
            M.save_checkpoint(ckpt_dir / f"client_{client.client_id}.ckpt",
                              client.model.params)
    return report


def train_centralized(base_model: PrototypeModel, fed_cfg: FedConfig, weights: LossWeights,
                      site: SiteDataset, total_epochs: int) -> ClientState:
    """Plain single-model training loop used as the N=1 protocol oracle."""
    cfg = replace(fed_cfg, num_clients=1, use_prox=False)
    client = make_clients(base_model, cfg, [site])[0]
    sums = np.zeros(7)
    counters = np.zeros(3, dtype=np.int64)
    for _ in range(total_epochs):
        _run_epoch(client, cfg, weights, {}, {}, sums, counters)
    return client


def compare_variants(model_cfg: ModelConfig, fed_cfg: FedConfig, weights: LossWeights,
                     train_sites: list[SiteDataset], test_site: SiteDataset,
                     pretrain_site: SiteDataset | None = None,
                     warmup_cfg: WarmupConfig | None = None,
                     variants: tuple[str, ...] = DEFAULT_GRID,
                     out_dir=None, workers: int = 1) -> list[dict]:
    """Run each algorithm variant on identical seeds/partitions; one row per
    variant with per-client and average held-out accuracy."""
    if len(variants) < 1:
        raise ConfigurationError("variant grid is empty")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigurationError(f"unknown variant(s) {unknown}; choose from {sorted(VARIANTS)}")
    base_model = build_initial_model(model_cfg, fed_cfg.master_seed, weights,
                                     warmup_cfg, pretrain_site)
    out_path = Path(out_dir) if out_dir is not None else None
    rows = []
    for name in variants:
        ca, cp, prox = VARIANTS[name]
        cfg = replace(fed_cfg, communicate_adapters=ca, communicate_prototypes=cp,
                      use_prox=prox)
        run_out = out_path / name if out_path is not None else None
        report = run_federation(model_cfg, cfg, weights, train_sites, test_site,
                                initial_model=base_model, out_dir=run_out,
                                workers=workers)
        row = {"variant": name}
        for cid in sorted(report.final_test_acc):
            row[f"client_{cid}"] = report.final_test_acc[cid]
        row["avg"] = report.avg_test_acc
        row["payload_bytes"] = report.payload_bytes
        row["payload_ratio"] = report.payload_ratio
        rows.append(row)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        fields = list(rows[0])
        with open(out_path / "variants.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            for row in rows:
                w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows
