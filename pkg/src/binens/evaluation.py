"""Accuracy/MCC, noise-robustness harness and closed-form FLOPs / model-size accounting."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .model import EncoderConfig, quant_preset
from .quant import FULL_PRECISION, UNIFORM4

MIB = 2 ** 20
DEFAULT_NOISE_VARIANCE = 0.01
DEFAULT_ROUNDS = 10

# full-precision op counts per element (documented convention, not measured)
FLOPS_PER_ELEM = {"layernorm": 7, "softmax": 5, "gelu": 8, "residual": 1, "bias": 1, "scale": 1}


@dataclass
class MetricsReport:
    accuracy: float
    confusion: list
    matthews: float | None = None

    @property
    def total(self) -> int:
        return int(np.sum(self.confusion))

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy_and_confusion(predictions, labels, num_classes: int | None = None) -> MetricsReport:
    """Accuracy, K x K confusion (rows = true class) and, for K = 2, Matthews correlation."""
    pred = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {y.shape}")
    if y.size == 0:
        raise ValueError("cannot score an empty prediction set")
    K = num_classes or int(max(pred.max(), y.max()) + 1)
    K = max(K, 2)
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    acc = float(np.trace(conf)) / float(y.size)
    mcc = None
    if K == 2:
        tn, fp, fn, tp = (int(v) for v in conf.ravel())
        denom = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        mcc = 0.0 if denom == 0 else (tp * tn - fp * fn) / denom
    return MetricsReport(acc, conf.tolist(), mcc)


def population_std(values) -> tuple[float, float]:
    """Two-pass mean and population standard deviation."""
    v = [float(x) for x in values]
    if not v:
        raise ValueError("no values")
    if max(v) == min(v):
        return v[0], 0.0
    mean = math.fsum(v) / len(v)
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in v) / len(v))


@dataclass
class RobustnessReport:
    accuracies: list
    mean: float
    std: float
    noise_variance: float
    rounds: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def robustness_eval(model, data, variance: float = DEFAULT_NOISE_VARIANCE, rounds: int = DEFAULT_ROUNDS,
                    seed: int = 0, threads: int = 1) -> RobustnessReport:
    """Accuracy under Gaussian noise at the embedding output, repeated ``rounds`` times.

    Round ``r`` (1-based) draws its noise from ``default_rng(seed + r)``;
    ``model`` is an EncoderModel or an EnsembleModel (members share the
    round's generator in member order).
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if variance < 0:
        raise ValueError("variance must be >= 0")
    labels = np.asarray(data.labels)

    def one(r: int) -> float:
        rng = np.random.default_rng(seed + r)
        pred = model.predict(data, noise_variance=variance, rng=rng)
        return float(np.mean(pred == labels))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(one, range(1, rounds + 1)))
    else:
        accs = [one(r) for r in range(1, rounds + 1)]
    mean, std = population_std(accs)
    return RobustnessReport(accs, mean, std, float(variance), rounds, seed)


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


@dataclass
class CostEntry:
    name: str
    bits_w: int
    bits_a: int
    macs: int
    effective_flops: float


@dataclass
class SizeEntry:
    name: str
    count: int
    bits: int
    nbytes: int


@dataclass
class CostReport:
    model_size_bytes: int
    flops: float
    breakdown: list
    size_breakdown: list
    ensemble_size: int = 1
    seq_len: int = 128
    legend: str = ("flops counts 2 per MAC scaled by bits_w*bits_a/64 for <=8-bit operands; "
                   "flops_parallel = flops / N: members run concurrently")
    member_size_bytes: int = 0
    member_flops: float = 0.0

    @property
    def size_mb(self) -> float:
        return self.model_size_bytes / MIB

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def gflops_parallel(self) -> float:
        return self.flops / self.ensemble_size / 1e9

    def notation(self) -> str:
        """FLOPs in the ``total/N`` form of the comparison table, e.g. ``3.0/2``."""
        if self.ensemble_size == 1:
            return f"{self.gflops:.1f}"
        return f"{self.gflops:.1f}/{self.ensemble_size}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(size_mb=self.size_mb, gflops=self.gflops, gflops_parallel=self.gflops_parallel,
                 notation=self.notation())
        return d

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "bits_w", "bits_a", "macs", "effective_flops"])
            for e in self.breakdown:
                w.writerow([e.name, e.bits_w, e.bits_a, e.macs, repr(e.effective_flops)])


def cost_factor(bits_w: int, bits_a: int) -> float:
    """Relative cost of one MAC: ``bits_w * bits_a / 64`` when both operands are <= 8 bits."""
    if bits_w <= 8 and bits_a <= 8:
        return bits_w * bits_a / 64.0
    return 1.0


def bert_base_config(quant: str | dict = "fp", num_classes: int = 2) -> EncoderConfig:
    q = quant_preset(quant) if isinstance(quant, str) else quant
    return EncoderConfig(vocab_size=30522, max_seq_len=512, hidden_dim=768, num_layers=12, num_heads=12,
                         ffn_dim=3072, num_classes=num_classes, quant=q)


def flops_model_size(config: EncoderConfig, ensemble_size: int = 1, seq_len: int = 128) -> CostReport:
    """Analytic size (bits of every stored parameter) and FLOPs of one forward pass.

    Pure function of the config; no model is instantiated.
    """
    if ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    cfg = config
    d, f, L, V, H, K = (cfg.hidden_dim, cfg.ffn_dim, cfg.num_layers, cfg.vocab_size, cfg.num_heads,
                        cfg.num_classes)
    S = seq_len
    q = cfg.quant
    copies = lambda g: 2 if cfg.split and q[g].kind != FULL_PRECISION else 1
    wbits = lambda g: q[g].bits
    abits = 4 if q["activation"].kind == UNIFORM4 else 32

    sizes = [
        SizeEntry("embed.word", copies("embedding") * V * d, wbits("embedding"), 0),
        SizeEntry("embed.pos", cfg.max_seq_len * d, 32, 0),
        SizeEntry("attention.weights", copies("attention") * L * 4 * d * d, wbits("attention"), 0),
        SizeEntry("ffn.weights", copies("ffn") * L * 2 * d * f, wbits("ffn"), 0),
        SizeEntry("biases", L * (4 * d + f + d), 32, 0),
        SizeEntry("layernorm", 2 * d + L * 4 * d, 32, 0),
        SizeEntry("head", d * K + K, 32, 0),
    ]
    for s in sizes:
        s.nbytes = math.ceil(s.count * s.bits / 8)
    member_bytes = sum(s.nbytes for s in sizes)

    entries = []

    def mm(name, macs, bw, ba):
        entries.append(CostEntry(name, bw, ba, int(macs), 2.0 * macs * cost_factor(bw, ba)))

    def fp(name, ops):
        entries.append(CostEntry(name, 32, 32, 0, float(ops)))

    fp("embed.add+layernorm", S * d * (1 + FLOPS_PER_ELEM["layernorm"]))
    for l in range(L):
        p = f"layers.{l}."
        bw_att = wbits("attention")
        for proj in ("q", "k", "v"):
            mm(p + f"attn.{proj}", copies("attention") * S * d * d, bw_att, abits)
        mm(p + "attn.scores", S * S * d, abits, abits)
        mm(p + "attn.context", S * S * d, abits, abits)
        mm(p + "attn.o", copies("attention") * S * d * d, bw_att, abits)
        fp(p + "attn.softmax+scale", H * S * S * (FLOPS_PER_ELEM["softmax"] + FLOPS_PER_ELEM["scale"]))
        fp(p + "attn.bias+residual+layernorm",
           S * d * (4 * FLOPS_PER_ELEM["bias"] + FLOPS_PER_ELEM["residual"] + FLOPS_PER_ELEM["layernorm"]))
        mm(p + "ffn.in", copies("ffn") * S * d * f, wbits("ffn"), abits)
        fp(p + "ffn.bias+gelu", S * f * (FLOPS_PER_ELEM["bias"] + FLOPS_PER_ELEM["gelu"]))
        mm(p + "ffn.out", copies("ffn") * S * f * d, wbits("ffn"), abits)
        fp(p + "ffn.bias+residual+layernorm",
           S * d * (FLOPS_PER_ELEM["bias"] + FLOPS_PER_ELEM["residual"] + FLOPS_PER_ELEM["layernorm"]))
    fp("pool", S * d)
    mm("head", d * K, 32, 32)
    member_flops = math.fsum(e.effective_flops for e in entries)

    N = ensemble_size
    if N > 1:
        entries = [CostEntry(f"member{i}." + e.name, e.bits_w, e.bits_a, e.macs, e.effective_flops)
                   for i in range(N) for e in entries]
        sizes = [SizeEntry(f"member{i}." + s.name, s.count, s.bits, s.nbytes) for i in range(N) for s in sizes]
    return CostReport(
        model_size_bytes=sum(s.nbytes for s in sizes),
        flops=math.fsum(e.effective_flops for e in entries),
        breakdown=entries, size_breakdown=sizes, ensemble_size=N, seq_len=S,
        member_size_bytes=member_bytes, member_flops=member_flops,
    )


def write_report(report, path) -> None:
    """One canonical JSON document per report."""
    d = report.to_dict() if hasattr(report, "to_dict") else report
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
