"""Stage functions of the end-to-end run: teacher, ternary distillation + split, boosting.

The CLI and the acceptance checks both drive these; each stage is a pure
function of its inputs and seeds.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Encoded, encode, make_synthetic_task, load_tsv, VOCAB_SIZE
from .distill import TrainConfig, TrainReport, train_student
from .ensemble import EnsembleModel, RoundRecord, adaboost_train
from .model import (CHECKPOINT_MAGIC, Checkpoint, ConfigError, EncoderConfig, EncoderModel, build_encoder,
                    load_checkpoint, quant_preset, requantize, save_checkpoint, split_model)

log = logging.getLogger(__name__)

TWS_TOLERANCE = 1e-5

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "data": {"kind": "majority-byte", "m": 2000, "dev_m": 500, "num_classes": 2, "noise_rate": 0.1,
             "length": 24, "train_path": None, "dev_path": None},
    "model": {"max_seq_len": 24, "hidden_dim": 32, "num_layers": 2, "num_heads": 2, "ffn_dim": 64},
    "teacher": {"epochs": 4, "batch_size": 32, "learning_rate": 2e-3, "optimizer": "adam"},
    "ternary": {"epochs": 2, "batch_size": 32, "learning_rate": 1e-3, "optimizer": "adam", "kd": "C"},
    "boost": {"ensemble_size": 2, "kd": "A", "epochs": 2, "batch_size": 32, "learning_rate": 1e-3,
              "optimizer": "adam", "temperature": 1.0, "max_retries": 2, "vote": "soft"},
    "robustness": {"noise_variance": 0.01, "rounds": 10},
    "cost": {"preset": "bert-base", "seq_len": 128},
}

# Harder variant of the desk task (4 classes, longer texts, narrow model, short
# schedules).  Single binary students stay well below the label-noise ceiling
# here, which leaves room for a second boosted member to matter.
UNDERFIT_OVERRIDES = {
    "data": {"kind": "majority-byte", "num_classes": 4, "length": 48},
    "model": {"max_seq_len": 48, "hidden_dim": 16, "ffn_dim": 32},
    "teacher": {"epochs": 2},
    "ternary": {"epochs": 1},
    "boost": {"epochs": 1},
}
PRESETS = {"desk": {}, "desk-underfit": UNDERFIT_OVERRIDES}


def merge_config(base: dict, override: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(user: dict | None) -> dict:
    cfg = merge_config(DEFAULT_CONFIG, user)
    errs = []
    unknown = set(user or {}) - set(DEFAULT_CONFIG)
    if unknown:
        errs.append(f"unknown config sections {sorted(unknown)}")
    if cfg["boost"]["ensemble_size"] < 1:
        errs.append("boost.ensemble_size must be >= 1")
    if cfg["boost"].get("vote") not in ("hard", "soft"):
        errs.append("boost.vote must be hard or soft")
    if cfg["boost"]["kd"] not in ("A", "B", "C"):
        errs.append("boost.kd must be A, B or C")
    if errs:
        raise ConfigError(errs)
    return cfg


@dataclass
class TaskData:
    train: Encoded
    dev: Encoded
    num_classes: int
    meta: dict = field(default_factory=dict)


def load_task(cfg: dict) -> TaskData:
    d = cfg["data"]
    S = cfg["model"]["max_seq_len"]
    if d.get("train_path"):
        train_ds = load_tsv(d["train_path"], "train", d.get("num_classes"))
        dev_ds = load_tsv(d["dev_path"], "dev", train_ds.num_classes) if d.get("dev_path") else train_ds
        K = train_ds.num_classes
        meta = {"train_path": d["train_path"], "dev_path": d.get("dev_path")}
    else:
        seed = cfg["seed"]
        train_ds = make_synthetic_task(d["kind"], d["m"], d["num_classes"], seed, d["noise_rate"], d["length"])
        dev_ds = make_synthetic_task(d["kind"], d["dev_m"], d["num_classes"], seed + 10_000, d["noise_rate"],
                                     d["length"], split="dev")
        K = d["num_classes"]
        meta = dict(train_ds.meta)
    return TaskData(encode(train_ds, S), encode(dev_ds, S), K, meta)


def encoder_config(cfg: dict, num_classes: int, quant="fp") -> EncoderConfig:
    m = cfg["model"]
    return EncoderConfig(vocab_size=VOCAB_SIZE, max_seq_len=m["max_seq_len"], hidden_dim=m["hidden_dim"],
                         num_layers=m["num_layers"], num_heads=m["num_heads"], ffn_dim=m["ffn_dim"],
                         num_classes=num_classes, quant=quant_preset(quant) if isinstance(quant, str) else quant,
                         seed=cfg["seed"]).validate()


def train_config(section: dict, seed: int, kd: str = "A") -> TrainConfig:
    d = dict(section)
    d.setdefault("kd", kd)
    d["seed"] = seed
    return TrainConfig.from_dict(d).validate()


def accuracy(model, data: Encoded) -> float:
    return float(np.mean(model.predict(data) == data.labels))


def train_teacher(cfg: dict, task: TaskData) -> tuple[Checkpoint, TrainReport]:
    """Full-precision teacher trained on hard labels."""
    init = build_encoder(encoder_config(cfg, task.num_classes, "fp"))
    return train_student(init, None, task.train, None, train_config(cfg["teacher"], cfg["seed"], "A"))


class SplitMismatch(AssertionError):
    pass


def distill_and_split(cfg: dict, teacher_ckpt: Checkpoint, task: TaskData):
    """Ternary student initialized from the teacher and distilled from it, then split.

    Refuses (SplitMismatch) when split-model logits differ from the ternary
    model's by more than 1e-5 on the dev set.
    """
    expected = encoder_config(cfg, task.num_classes, "fp")
    tc = teacher_ckpt.config
    diffs = [k for k in ("vocab_size", "max_seq_len", "hidden_dim", "num_layers", "num_heads", "ffn_dim",
                         "num_classes") if getattr(tc, k) != getattr(expected, k)]
    if diffs:
        raise ConfigError([f"teacher config mismatch on {diffs}"])
    teacher = EncoderModel.from_checkpoint(teacher_ckpt, requires_grad=False)
    ternary_init = requantize(teacher, quant_preset("2-2-4"))
    tcfg = train_config(cfg["ternary"], cfg["seed"] + 1, "C")
    ternary_ckpt, report = train_student(ternary_init, teacher if tcfg.kd != "A" else None, task.train, None, tcfg)
    ternary = EncoderModel.from_checkpoint(ternary_ckpt, requires_grad=False)
    split = split_model(ternary)
    gap = tws_gap(ternary, split, task.dev)
    if not gap <= TWS_TOLERANCE:
        raise SplitMismatch(f"split model deviates from ternary model by {gap:.3e} > {TWS_TOLERANCE}")
    return ternary_ckpt, split.to_checkpoint(), report, gap


def tws_gap(ternary: EncoderModel, split: EncoderModel, data: Encoded) -> float:
    return float(np.abs(ternary.logits(data.ids, data.mask) - split.logits(data.ids, data.mask)).max())


@dataclass
class BoostResult:
    ensemble: EnsembleModel
    reports: list
    wall_clock: float


def boost(cfg: dict, split_ckpt: Checkpoint, task: TaskData, teacher: EncoderModel | None = None,
          ensemble_size: int | None = None, kd: str | None = None) -> BoostResult:
    """AdaBoost over binary students, each a fresh copy of the split checkpoint."""
    b = cfg["boost"]
    N = ensemble_size or b["ensemble_size"]
    kd = kd or b["kd"]
    if kd == "A":
        teacher = None
    elif teacher is None:
        raise ConfigError([f"strategy {kd} requires a teacher"])
    reports = []

    def fit(rnd: int, attempt: int, D):
        tcfg = train_config(b, member_seed(cfg["seed"], rnd, attempt), kd)
        ckpt, rep = train_student(split_ckpt, teacher, task.train, D, tcfg)
        reports.append({"round": rnd, "attempt": attempt, "steps": rep.steps,
                        "backward_passes": rep.backward_passes, "wall_clock": rep.wall_clock,
                        "final_loss": rep.final_loss})
        return EncoderModel.from_checkpoint(ckpt, requires_grad=False)

    t0 = time.perf_counter()
    ens = adaboost_train(fit, lambda mdl: mdl.predict(task.train), task.train.labels, N, task.num_classes,
                         b.get("max_retries"), b.get("vote", "hard"))
    return BoostResult(ens, reports, time.perf_counter() - t0)


def member_seed(seed: int, rnd: int, attempt: int = 0) -> int:
    return seed * 1000 + rnd + 100 * attempt


def single_student(cfg: dict, split_ckpt: Checkpoint, task: TaskData, teacher=None, kd: str | None = None):
    """The non-ensembled baseline: one binary student fine-tuned under uniform weights."""
    kd = kd or cfg["boost"]["kd"]
    tcfg = train_config(cfg["boost"], member_seed(cfg["seed"], 1), kd)
    ckpt, rep = train_student(split_ckpt, teacher if kd != "A" else None, task.train, None, tcfg)
    return EncoderModel.from_checkpoint(ckpt, requires_grad=False), rep


# ---------------------------------------------------------------------------
# ensemble persistence
# ---------------------------------------------------------------------------

ENSEMBLE_FORMAT = "binens-ensemble/1"


def atomic_write_json(obj, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def save_ensemble(E: EnsembleModel, out_dir, prefix: str = "member", extra: dict | None = None) -> tuple[str, list]:
    """Member checkpoints plus a JSON manifest (paths relative to the manifest)."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, (member, _) in enumerate(E.members, start=1):
        name = f"{prefix}{i}.ckpt"
        save_checkpoint(member.to_checkpoint(), os.path.join(out_dir, name))
        paths.append(name)
    doc = {
        "format": ENSEMBLE_FORMAT,
        "num_classes": E.num_classes,
        "vote": E.vote,
        "members": [{"checkpoint": p, "alpha": a} for p, (_, a) in zip(paths, E.members)],
        "rounds": [r.__dict__ for r in E.diagnostics],
    }
    doc.update(extra or {})
    manifest = os.path.join(out_dir, "ensemble.json")
    atomic_write_json(doc, manifest)
    return manifest, [os.path.join(out_dir, p) for p in paths]


def load_ensemble(path) -> EnsembleModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != ENSEMBLE_FORMAT:
        raise ValueError(f"{path}: not an ensemble manifest")
    base = os.path.dirname(os.path.abspath(path))
    members = [(EncoderModel.from_checkpoint(load_checkpoint(os.path.join(base, m["checkpoint"])),
                                             requires_grad=False), float(m["alpha"])) for m in doc["members"]]
    rounds = [RoundRecord(**r) for r in doc.get("rounds", [])]
    return EnsembleModel(members, int(doc["num_classes"]), rounds, doc.get("vote", "hard"))


def load_model(path):
    """A single checkpoint or an ensemble manifest, by content."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == CHECKPOINT_MAGIC:
        return EncoderModel.from_checkpoint(load_checkpoint(path), requires_grad=False)
    return load_ensemble(path)
