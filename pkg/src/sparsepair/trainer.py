"""Small embedding model, Adam with coupled weight decay, warmup, training loop."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import ClassifierHead, PositiveRule, TripletConfig, identity_loss, triplet_bh_loss
from .batchkit import EmbeddingBatch, PKSampler
from .errors import FormatError, ShapeMismatch
from .evalkit import evaluate
from .numerics import l2_normalize, normalize_backward
from .sploss import SPConfig, SPVariant, sp_loss

log = logging.getLogger(__name__)

LOSS_KINDS = ("sph", "splh", "adasp", "triplet", "ep")
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
WARMUP_START_FACTOR = 0.01

_SP_KINDS = {"sph": SPVariant.Hard, "splh": SPVariant.LeastHard, "adasp": SPVariant.Adaptive}


def derive_seed(seed: int, tag: str) -> int:
    """Stage seed: run seed plus a stable hash of the stage tag."""
    h = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return (int(seed) + h) % (2**32)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_K: int = 4
    batch_N: int = 8
    lr_base: float = 3.5e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 5e-4
    tau: float = 0.04
    lam: float = 0.1
    loss_kind: str = "adasp"
    use_identity: bool = True
    seed: int = 0
    embed_dim: int = 16
    model: str = "linear"
    hidden: int = 32
    margin: float = 0.3

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_K < 1 or self.batch_N < 1:
            raise ValueError("batch_K and batch_N must be >= 1")
        if self.lr_base < 0:
            raise ValueError("lr_base must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.model not in ("linear", "mlp"):
            raise ValueError("model must be 'linear' or 'mlp'")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).digest()

    def metric_config(self):
        if self.loss_kind in _SP_KINDS:
            return SPConfig(self.tau, _SP_KINDS[self.loss_kind])
        rule = PositiveRule.Hardest if self.loss_kind == "triplet" else PositiveRule.Easiest
        return TripletConfig(self.margin, rule)


# ---------------------------------------------------------------------------
# model


def init_model(in_dim: int, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    if cfg.model == "linear":
        return {"W": rng.standard_normal((in_dim, cfg.embed_dim)) / np.sqrt(in_dim)}
    return {
        "W1": rng.standard_normal((in_dim, cfg.hidden)) / np.sqrt(in_dim),
        "b1": np.zeros(cfg.hidden),
        "W2": rng.standard_normal((cfg.hidden, cfg.embed_dim)) / np.sqrt(cfg.hidden),
    }


def forward(params: dict, x: np.ndarray):
    if "W" in params:
        return x @ params["W"], None
    h = np.tanh(x @ params["W1"] + params["b1"])
    return h @ params["W2"], h


def backward(params: dict, x: np.ndarray, cache, grad_out: np.ndarray) -> dict:
    if "W" in params:
        return {"W": x.T @ grad_out}
    h = cache
    dh = (grad_out @ params["W2"].T) * (1.0 - h * h)
    return {"W1": x.T @ dh, "b1": dh.sum(axis=0), "W2": h.T @ grad_out}


def embed(params: dict, x: np.ndarray) -> np.ndarray:
    return l2_normalize(forward(params, np.asarray(x, dtype=np.float64))[0])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One Adam update; weight decay is added to the gradient as an L2 term.

    Returns new ``(params, state)``; inputs are not modified.
    """
    if set(params) != set(grads):
        raise ShapeMismatch(f"param keys {sorted(params)} vs grad keys {sorted(grads)}")
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeMismatch(f"{k}: grad {g.shape} vs param {np.shape(p)}")
        g = g + weight_decay * p
        m = BETA1 * state.m.get(k, np.zeros_like(p)) + (1.0 - BETA1) * g
        v = BETA2 * state.v.get(k, np.zeros_like(p)) + (1.0 - BETA2) * g * g
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_base/100 to lr_base, then constant."""
    warm = cfg.warmup_fraction * total_steps
    if warm <= 0 or step >= warm:
        return cfg.lr_base
    start = cfg.lr_base * WARMUP_START_FACTOR
    return start + (cfg.lr_base - start) * step / warm


# ---------------------------------------------------------------------------
# objective


@dataclass
class BatchObjective:
    total: float
    identity: float
    metric: float
    grads: dict


def batch_objective(params: dict, x: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                    class_index: dict | None = None, fixed_alpha=None) -> BatchObjective:
    """Loss and gradients for one batch through normalization and the model.

    ``params`` holds the model weights and, with identity loss, ``head_W`` and
    ``head_b``. The metric is always evaluated; with identity enabled the
    total is ``identity + lam * metric``, otherwise just the metric.
    """
    w, cache = forward(params, x)
    z = l2_normalize(w)
    batch = EmbeddingBatch(z, labels, cfg.batch_K, cfg.batch_N)
    metric_cfg = cfg.metric_config()
    if isinstance(metric_cfg, SPConfig):
        met = sp_loss(batch, metric_cfg, fixed_alpha=fixed_alpha)
    else:
        met = triplet_bh_loss(batch, metric_cfg)

    grads = {}
    if cfg.use_identity:
        head = ClassifierHead(params["head_W"], params["head_b"])
        targets = labels if class_index is None else np.array([class_index[int(c)] for c in labels])
        ident = identity_loss(z, targets, head)
        grad_z = ident.grad_features + cfg.lam * met.grad
        total = ident.value + cfg.lam * met.value
        id_value = ident.value
        grads["head_W"], grads["head_b"] = ident.grad_weights, ident.grad_bias
    else:
        grad_z = met.grad
        total = met.value
        id_value = 0.0
    model_params = {k: v for k, v in params.items() if not k.startswith("head_")}
    grads.update(backward(model_params, x, cache, normalize_backward(w, grad_z)))
    return BatchObjective(total, id_value, met.value, grads)


# ---------------------------------------------------------------------------
# checkpoints

CK_MAGIC = b"SPCK1"


@dataclass
class Checkpoint:
    params: dict
    adam: AdamState
    epoch: int
    config_hash: bytes


def save_checkpoint(ck: Checkpoint, path) -> None:
    """SPCK1: magic, u32 epoch, u32 adam step, 32-byte config hash, u32 count,
    then per array: u16 name length, name, u32 ndim, u32 dims, float64 data.
    Arrays are params, then ``m:<name>`` and ``v:<name>`` moments.
    """
    arrays = dict(ck.params)
    arrays.update({f"m:{k}": v for k, v in ck.adam.m.items()})
    arrays.update({f"v:{k}": v for k, v in ck.adam.v.items()})
    out = [CK_MAGIC, struct.pack("<II", ck.epoch, ck.adam.t), ck.config_hash, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        key = name.encode()
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    try:
        if data[:5] != CK_MAGIC:
            raise FormatError(f"bad magic {data[:5]!r}")
        epoch, t = struct.unpack_from("<II", data, 5)
        off = 13
        digest = data[off:off + 32]
        if len(digest) != 32:
            raise FormatError("truncated config hash")
        off += 32
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(data):
                raise FormatError(f"truncated array {name}")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
        if off != len(data):
            raise FormatError("trailing bytes after last array")
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    params = {k: v for k, v in arrays.items() if ":" not in k}
    m = {k[2:]: v for k, v in arrays.items() if k.startswith("m:")}
    v = {k[2:]: v for k, v in arrays.items() if k.startswith("v:")}
    return Checkpoint(params, AdamState(t, m, v), epoch, digest)


# ---------------------------------------------------------------------------
# training loop

METRICS_HEADER = ("epoch", "loss_total", "loss_id", "loss_metric", "mAP", "cmc1", "cmc5")


@dataclass
class EpochLog:
    epoch: int
    loss_total: float
    loss_id: float
    loss_metric: float
    map: float
    cmc1: float
    cmc5: float


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.epoch] + [repr(float(x)) for x in (r.loss_total, r.loss_id, r.loss_metric, r.map, r.cmc1, r.cmc5)])
    return buf.getvalue()


def train(dataset, cfg: TrainConfig, eval_dataset=None, eval_every: int = 1, init_params: dict | None = None):
    """Train on ``dataset``; returns ``(Checkpoint, [EpochLog, ...])``.

    Retrieval metrics are computed on ``eval_dataset`` (default: the training
    set, query = gallery with self-matches excluded) every ``eval_every``
    epochs and always after the last one; other epochs repeat the last value.
    """
    cfg.validate()
    points = np.asarray(dataset.points, dtype=np.float64)
    labels = np.asarray(dataset.labels).astype(np.int64)
    classes = np.unique(labels)
    class_index = {int(c): i for i, c in enumerate(classes)}
    target = eval_dataset if eval_dataset is not None else dataset

    init_rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
    params = dict(init_params) if init_params is not None else init_model(points.shape[1], cfg, init_rng)
    if cfg.use_identity and "head_W" not in params:
        head = ClassifierHead.init(classes.size, cfg.embed_dim, init_rng)
        params["head_W"], params["head_b"] = head.weights, head.bias
    sampler = PKSampler(labels, cfg.batch_K, cfg.batch_N, seed=derive_seed(cfg.seed, "sampler"))

    state = AdamState()
    step = 0
    total_steps = None
    rows: list[EpochLog] = []
    last_eval = (float("nan"),) * 3
    for epoch in range(1, cfg.epochs + 1):
        batches = list(sampler.epoch())
        if total_steps is None:
            total_steps = max(1, len(batches) * cfg.epochs)
        sums = np.zeros(3)
        for idx in batches:
            obj = batch_objective(params, points[idx], labels[idx], cfg, class_index)
            lr = lr_schedule(step, total_steps, cfg)
            params, state = adam_step(params, obj.grads, state, lr, cfg.weight_decay)
            sums += (obj.total, obj.identity, obj.metric)
            step += 1
        means = sums / max(len(batches), 1)
        if epoch == cfg.epochs or (eval_every and epoch % eval_every == 0):
            z = embed(params, target.points)
            met = evaluate(z, z, target.labels, target.labels, ks=(1, 5), same_set=True)
            last_eval = (met.map, met.cmc_at(1), met.cmc_at(5))
        rows.append(EpochLog(epoch, *(float(x) for x in means), *(float(x) for x in last_eval)))
        log.info("epoch %d loss=%.5f mAP=%.4f cmc1=%.4f", epoch, means[0], last_eval[0], last_eval[1])
    return Checkpoint(params, state, cfg.epochs, cfg.digest()), rows
