"""Command-line driver.

    binens train-teacher | distill-split | boost | eval | robustness | cost | pipeline

Every command writes its outputs under ``--out`` and finishes by atomically
writing ``manifest.json`` (command, resolved config, seeds, inputs, outputs,
version, per-stage wall-clock).  A failing stage leaves earlier outputs in
place and writes no manifest.

Exit codes: 0 success, 2 config/input error, 3 degenerate training,
4 internal assertion failure (e.g. the split-equivalence check).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from . import __version__
from . import pipeline as P
from .data import DatasetError
from .distill import TrainReport
from .ensemble import DegenerateTrainingError, EnsembleModel
from .evaluation import (DEFAULT_NOISE_VARIANCE, DEFAULT_ROUNDS, accuracy_and_confusion, bert_base_config,
                         flops_model_size, robustness_eval)
from .model import ConfigError, EncoderModel, load_checkpoint, save_checkpoint

log = logging.getLogger("binens")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE, EXIT_ASSERTION = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
MANIFEST_NAME = "manifest.json"


def artifact_version() -> str:
    """``v<package version>`` plus ``-g<commit>`` when run from a git checkout."""
    v = f"v{__version__}"
    try:
        sha = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if sha.returncode == 0 and sha.stdout.strip():
            v += f"-g{sha.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return v


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    outputs: list
    version: str
    stages: dict = field(default_factory=dict)      # stage name -> wall-clock seconds
    results: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def write(self, path) -> None:
        P.atomic_write_json(self.to_dict(), path)

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class StageFailed(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class Run:
    """Collects outputs and stage timings for one command."""

    def __init__(self, command: str, cfg: dict, out_dir: str):
        self.command = command
        self.cfg = cfg
        self.out = out_dir
        self.outputs: list[str] = []
        self.inputs: dict = {}
        self.seeds: dict = {"experiment": cfg["seed"]}
        self.stages: dict = {}
        self.results: dict = {}
        os.makedirs(out_dir, exist_ok=True)

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def produced(self, *paths) -> None:
        for p in paths:
            if p not in self.outputs:
                self.outputs.append(p)

    @contextlib.contextmanager
    def stage(self, name: str):
        log.info("stage %s: start", name)
        t0 = time.perf_counter()
        try:
            yield
        except StageFailed:
            raise
        except Exception as exc:
            raise StageFailed(name, exc) from exc
        self.stages[name] = time.perf_counter() - t0
        log.info("stage %s: done in %.2fs", name, self.stages[name])

    def finish(self) -> RunManifest:
        m = RunManifest(self.command, self.cfg, self.seeds, self.inputs, sorted(self.outputs), artifact_version(),
                        self.stages, self.results)
        m.write(self.path(MANIFEST_NAME))
        return m


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(args) -> dict:
    user = {}
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config not found: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError([f"{args.config}: top level must be a mapping"])
    preset = user.pop("preset", None) or getattr(args, "preset", None) or "desk"
    if preset not in P.PRESETS:
        raise ConfigError([f"unknown preset {preset!r}; expected one of {sorted(P.PRESETS)}"])
    cfg = P.resolve_config(P.merge_config(P.PRESETS[preset], user))
    cfg["preset"] = preset
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "kd", None):
        cfg["boost"]["kd"] = args.kd
    if getattr(args, "ensemble_size", None) is not None:
        cfg["boost"]["ensemble_size"] = args.ensemble_size
    if getattr(args, "noise_variance", None) is not None:
        cfg["robustness"]["noise_variance"] = args.noise_variance
    if getattr(args, "rounds", None) is not None:
        cfg["robustness"]["rounds"] = args.rounds
    cfg["threads"] = args.threads
    errs = []
    if cfg["boost"]["ensemble_size"] < 1:
        errs.append("ensemble size must be >= 1")
    if cfg["robustness"]["noise_variance"] < 0:
        errs.append("noise variance must be >= 0")
    if cfg["robustness"]["rounds"] < 1:
        errs.append("rounds must be >= 1")
    if args.threads < 1:
        errs.append("threads must be >= 1")
    if errs:
        raise ConfigError(errs)
    return cfg


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------


def write_csv(path, header, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def write_chart(path, draw) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        draw(ax)
        fig.tight_layout()
        tmp = f"{path}.tmp"
        fig.savefig(tmp, format="png", dpi=100, metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)


def _save_train(run: Run, name: str, ckpt, report: TrainReport) -> str:
    path = run.path(f"{name}.ckpt")
    save_checkpoint(ckpt, path)
    report.write_log(run.path(f"{name}_train.jsonl"))
    run.produced(path, run.path(f"{name}_train.jsonl"))
    return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_teacher(run: Run, task) -> tuple[str, EncoderModel]:
    with run.stage("train-teacher"):
        ckpt, rep = P.train_teacher(run.cfg, task)
        path = _save_train(run, "teacher", ckpt, rep)
        teacher = EncoderModel.from_checkpoint(ckpt, requires_grad=False)
        run.seeds["teacher"] = run.cfg["seed"]
        run.results["teacher_dev_accuracy"] = P.accuracy(teacher, task.dev)
    return path, teacher


def stage_distill_split(run: Run, task, teacher_path: str) -> str:
    with run.stage("distill-split"):
        teacher_ckpt = load_checkpoint(teacher_path)
        tern, split, rep, gap = P.distill_and_split(run.cfg, teacher_ckpt, task)
        _save_train(run, "ternary", tern, rep)
        split_path = run.path("split.ckpt")
        save_checkpoint(split, split_path)
        run.produced(split_path)
        run.seeds["ternary"] = run.cfg["seed"] + 1
        run.results["ternary_dev_accuracy"] = P.accuracy(EncoderModel.from_checkpoint(tern), task.dev)
        run.results["split_max_logit_gap"] = gap
    return split_path


def stage_boost(run: Run, task, split_path: str, teacher_path: str | None) -> tuple[str, EnsembleModel]:
    with run.stage("boost"):
        b = run.cfg["boost"]
        teacher = None
        if b["kd"] != "A":
            if not teacher_path:
                raise ConfigError([f"strategy {b['kd']} needs --teacher"])
            teacher = EncoderModel.from_checkpoint(load_checkpoint(teacher_path), requires_grad=False)
        res = P.boost(run.cfg, load_checkpoint(split_path), task, teacher)
        E = res.ensemble
        timing = {(r["round"], r["attempt"]): r for r in res.reports}
        rounds = []
        for rec in E.diagnostics:
            rep = timing.get((rec.round, rec.attempt), {})
            rounds.append({"round": rec.round, "attempt": rec.attempt, "error": rec.error, "alpha": rec.alpha,
                           "accepted": rec.accepted, "note": rec.note, "wall_clock": rep.get("wall_clock"),
                           "backward_passes": rep.get("backward_passes"), "steps": rep.get("steps")})
        manifest, members = P.save_ensemble(E, run.path("ensemble"), extra={"kd": b["kd"], "round_stats": rounds})
        run.produced(manifest, *members)
        write_csv(run.path("boost_rounds.csv"), ["round", "attempt", "error", "alpha", "accepted"],
                  [[r["round"], r["attempt"], repr(r["error"]), repr(r["alpha"]), r["accepted"]] for r in rounds])

        def draw(ax):
            acc = [r for r in rounds if r["accepted"]]
            x = [r["round"] for r in acc]
            ax.plot(x, [r["error"] for r in acc], "o-", label="weighted error e_i")
            ax.plot(x, [r["alpha"] for r in acc], "s--", label="member weight alpha_i")
            ax.set_xlabel("boosting round")
            ax.set_xticks(x)
            ax.legend()
            ax.set_title(f"boosting rounds (strategy {b['kd']})")

        write_chart(run.path("boost_rounds.png"), draw)
        run.produced(run.path("boost_rounds.csv"), run.path("boost_rounds.png"))
        run.seeds["members"] = [P.member_seed(run.cfg["seed"], r["round"], r["attempt"]) for r in rounds]
        run.results["rounds"] = rounds
        run.results["ensemble_train_accuracy"] = float(np.mean(E.predict(task.train) == task.train.labels))
    return manifest, E


def stage_eval(run: Run, task, model, name: str = "eval") -> dict:
    with run.stage(name):
        pred = model.predict(task.dev)
        rep = accuracy_and_confusion(pred, task.dev.labels, task.num_classes)
        out = {"accuracy": rep.accuracy, "confusion": rep.confusion, "matthews": rep.matthews,
               "examples": rep.total}
        if isinstance(model, EnsembleModel):
            out["member_accuracies"] = [P.accuracy(m, task.dev) for m, _ in model.members]
            out["alphas"] = model.alphas.tolist()
        P.atomic_write_json(out, run.path(f"{name}.json"))
        K = task.num_classes
        write_csv(run.path(f"{name}_confusion.csv"), ["true"] + [f"pred_{k}" for k in range(K)],
                  [[k] + rep.confusion[k] for k in range(K)])

        def draw(ax):
            ax.imshow(np.array(rep.confusion), cmap="Blues")
            for i in range(K):
                for j in range(K):
                    ax.text(j, i, str(rep.confusion[i][j]), ha="center", va="center")
            ax.set_xlabel("predicted class")
            ax.set_ylabel("true class")
            ax.set_title(f"dev accuracy {rep.accuracy:.3f}")

        write_chart(run.path(f"{name}_confusion.png"), draw)
        run.produced(run.path(f"{name}.json"), run.path(f"{name}_confusion.csv"), run.path(f"{name}_confusion.png"))
        run.results[name] = out
    return out


def stage_robustness(run: Run, task, models: dict) -> dict:
    r = run.cfg["robustness"]
    with run.stage("robustness"):
        reports = {label: robustness_eval(m, task.dev, r["noise_variance"], r["rounds"], run.cfg["seed"],
                                          run.cfg["threads"])
                   for label, m in models.items()}
        out = {label: rep.to_dict() for label, rep in reports.items()}
        P.atomic_write_json(out, run.path("robustness.json"))
        labels = list(reports)
        write_csv(run.path("robustness.csv"), ["round"] + labels,
                  [[i + 1] + [repr(reports[l].accuracies[i]) for l in labels] for i in range(r["rounds"])])

        def draw(ax):
            for l in labels:
                rep = reports[l]
                ax.plot(range(1, rep.rounds + 1), rep.accuracies, "o-", label=f"{l} (std {rep.std:.4f})")
            ax.set_xlabel("noise round")
            ax.set_ylabel("dev accuracy")
            ax.set_title(f"Gaussian embedding noise, variance {r['noise_variance']}")
            ax.legend()

        write_chart(run.path("robustness.png"), draw)
        run.produced(run.path("robustness.json"), run.path("robustness.csv"), run.path("robustness.png"))
        run.seeds["robustness"] = [run.cfg["seed"] + i for i in range(1, r["rounds"] + 1)]
        run.results["robustness"] = {l: {"mean": rep.mean, "std": rep.std} for l, rep in reports.items()}
    return out


def cost_rows(cfg: dict, quant: str, N: int, preset: str, num_classes: int = 2) -> list:
    if preset == "bert-base":
        base = lambda q: bert_base_config(q, num_classes)
    else:
        base = lambda q: P.encoder_config(cfg, num_classes, q)
    seq = cfg["cost"]["seq_len"] if preset == "bert-base" else cfg["model"]["max_seq_len"]
    rows = [("full-precision", "fp", 1), (quant, quant, 1)]
    if N > 1:
        rows.append((f"{quant} x{N}", quant, N))
    return [(label, flops_model_size(base(q), n, seq)) for label, q, n in rows]


def stage_cost(run: Run, quant: str = "1-1-4", preset: str | None = None, num_classes: int = 2) -> list:
    preset = preset or run.cfg["cost"]["preset"]
    N = run.cfg["boost"]["ensemble_size"]
    with run.stage("cost"):
        rows = cost_rows(run.cfg, quant, N, preset, num_classes)
        doc = {"preset": preset, "legend": rows[0][1].legend,
               "rows": [{"label": l, "ensemble_size": c.ensemble_size, "size_mb": c.size_mb, "gflops": c.gflops,
                         "gflops_parallel": c.gflops_parallel, "notation": c.notation(),
                         "model_size_bytes": c.model_size_bytes, "flops": c.flops} for l, c in rows]}
        P.atomic_write_json(doc, run.path("cost.json"))
        write_csv(run.path("cost.csv"),
                  ["label", "ensemble_size", "size_mb", "gflops", "gflops_parallel", "notation"],
                  [[l, c.ensemble_size, f"{c.size_mb:.4f}", f"{c.gflops:.4f}", f"{c.gflops_parallel:.4f}",
                    c.notation()] for l, c in rows])
        rows[-1][1].write_csv(run.path("cost_breakdown.csv"))

        def draw(ax):
            x = np.arange(len(rows))
            ax.bar(x - 0.2, [c.size_mb for _, c in rows], 0.4, label="size (MB)")
            ax2 = ax.twinx()
            ax2.bar(x + 0.2, [c.gflops for _, c in rows], 0.4, color="tab:orange", label="GFLOPs")
            ax.set_xticks(x)
            ax.set_xticklabels([l for l, _ in rows])
            ax.set_ylabel("model size (MB)")
            ax2.set_ylabel("GFLOPs")
            ax.set_title(f"cost accounting ({preset})")

        write_chart(run.path("cost.png"), draw)
        run.produced(run.path("cost.json"), run.path("cost.csv"), run.path("cost_breakdown.csv"),
                     run.path("cost.png"))
        run.results["cost"] = doc["rows"]
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _task(run: Run):
    with run.stage("load-data"):
        task = P.load_task(run.cfg)
        d = run.cfg["data"]
        run.inputs["data"] = ({"train": d["train_path"], "dev": d["dev_path"]} if d.get("train_path")
                              else {"synthetic": task.meta})
    return task


def cmd_train_teacher(args, run: Run) -> None:
    task = _task(run)
    stage_teacher(run, task)


def cmd_distill_split(args, run: Run) -> None:
    run.inputs["teacher"] = args.teacher
    task = _task(run)
    stage_distill_split(run, task, args.teacher)


def cmd_boost(args, run: Run) -> None:
    run.inputs.update(split=args.split, teacher=args.teacher)
    task = _task(run)
    stage_boost(run, task, args.split, args.teacher)


def _load(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"model not found: {path}")
    return P.load_model(path)


def cmd_eval(args, run: Run) -> None:
    run.inputs["model"] = args.model
    task = _task(run)
    stage_eval(run, task, _load(args.model))


def cmd_robustness(args, run: Run) -> None:
    run.inputs["model"] = args.model
    models = {"model": _load(args.model)}
    if args.compare:
        run.inputs["compare"] = args.compare
        models["compare"] = _load(args.compare)
    task = _task(run)
    stage_robustness(run, task, models)


def cmd_cost(args, run: Run) -> None:
    stage_cost(run, args.quant, args.preset_cost)


def cmd_pipeline(args, run: Run) -> None:
    task = _task(run)
    teacher_path, _ = stage_teacher(run, task)
    split_path = stage_distill_split(run, task, teacher_path)
    _, E = stage_boost(run, task, split_path, teacher_path)
    stage_eval(run, task, E)
    stage_robustness(run, task, {"ensemble": E, "member1": E.members[0][0]})
    stage_cost(run, "1-1-4", num_classes=task.num_classes)


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill-split": cmd_distill_split,
    "boost": cmd_boost,
    "eval": cmd_eval,
    "robustness": cmd_robustness,
    "cost": cmd_cost,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (nested sections; see README)")
    common.add_argument("--preset", choices=sorted(P.PRESETS), help="named base config (default: desk)")
    common.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="evaluation threads (default 1)")
    common.add_argument("--out", default="binens_out", help="output directory")
    common.add_argument("--kd", choices=("A", "B", "C"), help="KD strategy for boosted members")
    common.add_argument("--ensemble-size", type=int, dest="ensemble_size", help="number of boosted members N")
    common.add_argument("--noise-variance", type=float, dest="noise_variance",
                        help=f"robustness noise variance (default {DEFAULT_NOISE_VARIANCE})")
    common.add_argument("--rounds", type=int, help=f"robustness rounds (default {DEFAULT_ROUNDS})")

    parser = argparse.ArgumentParser(prog="binens", description="Boosted binary transformer classifiers.")
    parser.add_argument("--version", action="version", version=f"binens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="train the full-precision teacher")
    p = sub.add_parser("distill-split", parents=[common], help="distil a ternary student and split it")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p = sub.add_parser("boost", parents=[common], help="AdaBoost binary students from a split checkpoint")
    p.add_argument("--split", required=True, help="split binary checkpoint")
    p.add_argument("--teacher", help="teacher checkpoint (strategies B and C)")
    p = sub.add_parser("eval", parents=[common], help="dev accuracy, confusion and MCC")
    p.add_argument("--model", required=True, help="checkpoint or ensemble.json")
    p = sub.add_parser("robustness", parents=[common], help="accuracy under embedding noise")
    p.add_argument("--model", required=True, help="checkpoint or ensemble.json")
    p.add_argument("--compare", help="second model reported alongside")
    p = sub.add_parser("cost", parents=[common], help="closed-form FLOPs and model size")
    p.add_argument("--quant", default="1-1-4", choices=("1-1-4", "2-2-4"), help="quantized row (default 1-1-4)")
    p.add_argument("--geometry", dest="preset_cost", choices=("bert-base", "desk"),
                   help="model geometry (default: cost.preset from config, bert-base)")
    sub.add_parser("pipeline", parents=[common], help="teacher, split, boost, eval, robustness, cost")
    return parser


def setup_logging() -> None:
    level = os.environ.get("BINENS_LOG", "warning").lower()
    if level not in LOG_LEVELS:
        raise ConfigError([f"BINENS_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}"])
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DegenerateTrainingError):
        return EXIT_DEGENERATE
    if isinstance(exc, AssertionError):
        return EXIT_ASSERTION
    if isinstance(exc, (ConfigError, DatasetError, FileNotFoundError, yaml.YAMLError, ValueError, OSError)):
        return EXIT_INPUT
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        cfg = load_config(args)
        run = Run(args.command, cfg, args.out)
        COMMANDS[args.command](args, run)
        manifest = run.finish()
    except StageFailed as exc:
        print(f"binens {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(exc.cause)
    except Exception as exc:  # config and input errors before any stage starts
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"binens {args.command}: {exc}", file=sys.stderr)
        return code
    print(json.dumps({"command": manifest.command, "manifest": run.path(MANIFEST_NAME),
                      "stages": {k: round(v, 3) for k, v in manifest.stages.items()}}, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
