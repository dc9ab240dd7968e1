"""Sample-weighted KD losses and the per-round student training loop.

Strategies: ``A`` trains on hard labels only, ``B`` distils the prediction
layer (soft cross-entropy), ``C`` is two-stage KD, interleaved per
mini-batch: a hidden-state/attention MSE step followed by a prediction step,
each with its own forward and backward pass.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import Checkpoint, ConfigError, EncoderModel, ForwardTrace
from .tensor import Tensor

STRATEGIES = ("A", "B", "C")
OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    kd: str = "A"
    temperature: float = 1.0
    lr_schedule: str = "constant"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        errs = []
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            errs.append("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            errs.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.kd not in STRATEGIES:
            errs.append(f"kd must be one of {STRATEGIES} (D is not implemented)")
        if not self.temperature > 0:
            errs.append("temperature must be > 0")
        if self.lr_schedule not in ("constant", "linear"):
            errs.append("lr_schedule must be 'constant' or 'linear'")
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        return cls(**known)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def normalized_weights(sample_weights, batch: int) -> np.ndarray:
    """Batch weights rescaled to sum to one (uniform when ``None``)."""
    if sample_weights is None:
        return np.full(batch, 1.0 / batch)
    w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
    if w.shape != (batch,):
        raise T.ShapeError("sample_weights", w.shape, (batch,))
    if (w < 0).any():
        raise ValueError("sample weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("sample weights of a batch must not all be zero")
    return w / total


def _weighted_sum(per_sample: Tensor, wbar: np.ndarray) -> Tensor:
    return (per_sample * Tensor(wbar)).sum()


def _per_sample_mse(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    sq = diff * diff
    return sq.reshape(sq.shape[0], -1).mean(axis=1)


def hidden_projection(student_dim: int, teacher_dim: int, seed: int = 0) -> np.ndarray:
    """Frozen random map from student width to teacher width (columns ~ N(0, 1/student_dim))."""
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((student_dim, teacher_dim)) / math.sqrt(student_dim)).astype(T.default_dtype())


def loss_trm(teacher: ForwardTrace, student: ForwardTrace, sample_weights=None, projection=None) -> Tensor:
    """Sum over hidden states of MSE(H_T, H_S) plus sum over layers of MSE(A_T, A_S).

    Each MSE is computed per sample and combined with the batch-normalized
    sample weights.  When widths differ, ``projection`` maps student hidden
    states to the teacher width.
    """
    if len(teacher.hidden_states) != len(student.hidden_states) or len(teacher.attentions) != len(student.attentions):
        raise T.ShapeError("loss_trm", (len(teacher.hidden_states), len(teacher.attentions)),
                           (len(student.hidden_states), len(student.attentions)), detail="layer counts differ")
    batch = student.logits.shape[0]
    wbar = normalized_weights(sample_weights, batch)
    proj = None if projection is None else Tensor(projection)
    total = None
    for ht, hs in zip(teacher.hidden_states, student.hidden_states):
        if hs.shape[-1] != ht.shape[-1]:
            if proj is None or proj.shape != (hs.shape[-1], ht.shape[-1]):
                raise T.ShapeError("loss_trm", ht.shape, hs.shape, detail="hidden widths differ and no projection given")
            hs = hs @ proj
        if hs.shape != ht.shape:
            raise T.ShapeError("loss_trm", ht.shape, hs.shape)
        term = _weighted_sum(_per_sample_mse(ht.detach(), hs), wbar)
        total = term if total is None else total + term
    for at, as_ in zip(teacher.attentions, student.attentions):
        if at.shape != as_.shape:
            raise T.ShapeError("loss_trm", at.shape, as_.shape, detail="attention shapes differ")
        total = total + _weighted_sum(_per_sample_mse(at.detach(), as_), wbar)
    return total


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def soft_cross_entropy_per_sample(teacher_logits, student_logits, temperature: float = 1.0) -> Tensor:
    tl = _as_tensor(teacher_logits).data
    s = _as_tensor(student_logits)
    if tl.shape != s.shape:
        raise T.ShapeError("loss_pred", tl.shape, s.shape)
    z = tl / temperature
    z = z - z.max(axis=-1, keepdims=True)
    pt = np.exp(z)
    pt /= pt.sum(axis=-1, keepdims=True)
    logp = T.log_softmax(s * (1.0 / temperature), axis=-1)
    return -(logp * Tensor(pt)).sum(axis=-1)


def loss_pred(teacher_logits, student_logits, sample_weights=None, temperature: float = 1.0) -> Tensor:
    """Soft cross-entropy ``-sum_k softmax(P_T/t)_k log softmax(P_S/t)_k``, weighted over the batch."""
    per = soft_cross_entropy_per_sample(teacher_logits, student_logits, temperature)
    return _weighted_sum(per, normalized_weights(sample_weights, per.shape[0]))


def cross_entropy_per_sample(logits, labels) -> Tensor:
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise T.ShapeError("hard_label_loss", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = int(np.argmax((labels < 0) | (labels >= K)))
        raise ValueError(f"label {labels[bad]} at index {bad} outside [0, {K})")
    onehot = np.zeros(logits.shape, dtype=T.default_dtype())
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(T.log_softmax(logits, axis=-1) * Tensor(onehot)).sum(axis=-1)


def hard_label_loss(student_logits, labels, sample_weights=None) -> Tensor:
    """Cross-entropy against labels, weighted with batch-normalized sample weights."""
    per = cross_entropy_per_sample(student_logits, labels)
    return _weighted_sum(per, normalized_weights(sample_weights, per.shape[0]))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGDMomentum:
    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.momentum
            b += p.grad
            p.data -= (self.lr * b).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.betas, cfg.adam_eps)
    return SGDMomentum(params, cfg.learning_rate, cfg.momentum)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    strategy: str
    steps: int = 0
    backward_passes: int = 0
    wall_clock: float = 0.0
    final_loss: float = float("nan")
    log: list = field(default_factory=list)

    @property
    def backward_per_step(self) -> float:
        return self.backward_passes / self.steps if self.steps else 0.0

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _lookup_weights(sample_weights, slots: np.ndarray):
    if sample_weights is None:
        return None
    w = getattr(sample_weights, "weights", sample_weights)
    return np.asarray(w, dtype=np.float64)[slots]


def train_student(init, teacher: EncoderModel | None, data, sample_weights, cfg: TrainConfig,
                  projection=None, log_every: int = 1) -> tuple[Checkpoint, TrainReport]:
    """Fine-tune a copy of ``init`` on ``data`` under ``cfg.kd``.

    ``sample_weights`` (a SampleWeights, an array indexed by weight slot, or
    ``None`` for uniform) multiplies every per-example loss.  Returns the
    fine-tuned checkpoint and a report with step, backward-pass and
    wall-clock counts plus a per-step loss log.
    """
    cfg.validate()
    if cfg.kd == "A" and teacher is not None:
        raise ConfigError(["strategy A trains without a teacher; got one"])
    if cfg.kd in ("B", "C") and teacher is None:
        raise ConfigError([f"strategy {cfg.kd} requires a teacher"])
    ckpt = init if isinstance(init, Checkpoint) else init.to_checkpoint()
    student = EncoderModel.from_checkpoint(ckpt, requires_grad=True)
    if teacher is not None:
        if cfg.kd == "C" and projection is None and teacher.config.hidden_dim != student.config.hidden_dim:
            projection = hidden_projection(student.config.hidden_dim, teacher.config.hidden_dim, cfg.seed)
        if teacher.config.num_classes != student.config.num_classes:
            raise ConfigError(["teacher and student disagree on num_classes"])

    opt = make_optimizer(student.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    m = len(data)
    n_batches = max(1, math.ceil(m / cfg.batch_size))
    total_steps = cfg.epochs * n_batches
    report = TrainReport(cfg.kd)
    start_bw = T.backward_count()
    t0 = time.perf_counter()

    def update(loss: Tensor) -> None:
        opt.zero_grad()
        T.backprop(loss)
        opt.step()

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            if cfg.lr_schedule == "linear":
                opt.lr = cfg.learning_rate * (1.0 - step / total_steps)
            ids, mask = data.ids[idx], data.mask[idx]
            w = _lookup_weights(sample_weights, data.slots[idx])
            phases = []
            if cfg.kd == "A":
                out = student.forward(ids, mask)
                loss = hard_label_loss(out.logits, data.labels[idx], w)
                update(loss)
                phases.append(("hard", loss.item()))
            else:
                with T.no_grad():
                    t_out = teacher.forward(ids, mask)
                if cfg.kd == "C":
                    out = student.forward(ids, mask)
                    loss = loss_trm(t_out, out, w, projection)
                    update(loss)
                    phases.append(("trm", loss.item()))
                out = student.forward(ids, mask)
                loss = loss_pred(t_out.logits.data, out.logits, w, cfg.temperature)
                update(loss)
                phases.append(("pred", loss.item()))
            step += 1
            if log_every and step % log_every == 0:
                now = time.perf_counter() - t0
                for phase, val in phases:
                    report.log.append({"step": step, "epoch": epoch, "phase": phase, "loss": val,
                                       "wall_clock": now})
            report.final_loss = phases[-1][1]
    report.steps = step
    report.backward_passes = T.backward_count() - start_bw
    report.wall_clock = time.perf_counter() - t0
    return student.to_checkpoint(), report
