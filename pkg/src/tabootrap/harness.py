"""Metric tables, end-to-end experiments and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AdversarialBatch, AttackConfig, run_attack
from .checkpoint import load_checkpoint, load_key, save_checkpoint
from .data import Dataset, load_mnist, split_validation
from .taboo import detect, make_key_f1, make_key_f2, make_key_f3, profile
from .training import TrainConfig, evaluate_clean, taboo_retrain

log = logging.getLogger(__name__)

CSV_COLUMNS = ["attack", "theta", "A", "D", "AD", "FPR", "n_fooled", "n_correct", "n_clean"]


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"experiment failed during {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class EvalMetrics:
    attack: str
    theta: str
    n_total: int
    n_correct: int
    n_fooled: int
    n_detected_correct: int
    n_detected_fooled: int
    n_clean: int
    n_clean_detected: int
    n_degenerate: int = 0
    n_adv_correct: int = 0

    @property
    def A(self) -> float:
        return self.n_adv_correct / self.n_total if self.n_total else float("nan")

    @property
    def D(self) -> float | None:
        """Detection rate among samples that fooled the model; None when none did."""
        return self.n_detected_fooled / self.n_fooled if self.n_fooled else None

    @property
    def AD(self) -> float | None:
        return self.n_detected_correct / self.n_correct if self.n_correct else None

    @property
    def FPR(self) -> float:
        return self.n_clean_detected / self.n_clean if self.n_clean else float("nan")

    def row(self) -> list[str]:
        def fmt(v):
            return "NA" if v is None else f"{v:.4f}"

        return [
            self.attack,
            self.theta,
            fmt(self.A),
            fmt(self.D),
            fmt(self.AD),
            fmt(self.FPR),
            str(self.n_fooled),
            str(self.n_correct),
            str(self.n_clean),
        ]


def count_metrics(attack, theta, labels, predictions, detected, clean_detected, degenerate=None):
    """Tally a metrics row from per-sample arrays.

    Degenerate samples count towards A but are left out of the D and AD
    denominators.
    """
    labels = np.asarray(labels)
    correct = np.asarray(predictions) == labels
    detected = np.asarray(detected, dtype=bool)
    keep = np.ones(len(labels), dtype=bool) if degenerate is None else ~np.asarray(degenerate, dtype=bool)
    clean_detected = np.asarray(clean_detected, dtype=bool)
    return EvalMetrics(
        attack=attack,
        theta=theta,
        n_total=len(labels),
        n_correct=int((correct & keep).sum()),
        n_fooled=int((~correct & keep).sum()),
        n_detected_correct=int((correct & keep & detected).sum()),
        n_detected_fooled=int((~correct & keep & detected).sum()),
        n_clean=len(clean_detected),
        n_clean_detected=int(clean_detected.sum()),
        n_degenerate=int((~keep).sum()),
        n_adv_correct=int(correct.sum()),
    )


def evaluate(model, key, clean: Dataset, adversarial: list[AdversarialBatch]) -> list[EvalMetrics]:
    """One clean row followed by one row per adversarial batch.

    ``key=None`` evaluates the undefended model: nothing is ever flagged.
    """

    def flags_for(images):
        if key is None:
            return np.zeros(len(images), dtype=bool)
        return detect(model, images, key).verdicts

    clean_flags = flags_for(clean.images)
    rows = [count_metrics("clean", "", clean.labels, model.predict(clean.images), clean_flags, clean_flags)]
    for batch in adversarial:
        flags = flags_for(batch.perturbed)
        rows.append(
            count_metrics(
                batch.config.method,
                batch.config.theta,
                batch.labels,
                batch.pred_adv,
                flags,
                clean_flags,
                batch.degenerate,
            )
        )
    return rows


def metrics_csv(rows: list[EvalMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentSpec:
    data_dir: str
    checkpoint: str
    out: str
    key: str | None = None
    percentile: float = 1.0
    attacks: list[AttackConfig] = field(default_factory=list)
    subset: int | None = 1000
    seed: int = 0
    retrain: bool = False
    validation: int = 5000
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = [asdict(a) for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["attacks"] = [AttackConfig(**a) for a in d.get("attacks", [])]
        d["train"] = TrainConfig(**d.get("train", {}))
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_manifest(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text())["spec"])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_splits(data_dir, validation: int, seed: int):
    """(train, validation, test) with a seeded hold-out carved from the training split."""
    full = load_mnist(data_dir, "train")
    size = min(validation, len(full) // 10)
    train, val = split_validation(full, size, seed)
    return train, val, load_mnist(data_dir, "test")


def resolve_key(spec_key, stored_key, num_layers: int, percentile: float):
    """Key named by an experiment: "none", "f1"/"f2"/"f3", a key file, or the stored one."""
    if spec_key == "none":
        return None
    if spec_key is None:
        if stored_key is None:
            raise ValueError("no key given and the checkpoint carries none")
        return stored_key
    if spec_key == "f1":
        return make_key_f1(num_layers, percentile)
    if spec_key == "f2":
        return make_key_f2()
    if spec_key == "f3":
        return make_key_f3(num_layers)
    return load_key(spec_key)


def run_experiment(spec: ExperimentSpec) -> Path:
    """Profile/bind/retrain as requested, attack, evaluate, and write the report.

    Produces ``metrics.csv`` and ``manifest.json`` in ``spec.out`` (plus
    ``train_log.csv`` and ``defended.ttrp`` when retraining).  On failure no
    partial output directory is left behind.
    """
    out = Path(spec.out)
    staging = out.with_name(out.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    stage = "setup"
    manifest = {"version": __version__, "spec": spec.to_dict()}
    try:
        stage = "load checkpoint"
        ckpt = load_checkpoint(spec.checkpoint)
        model = ckpt.model
        manifest["checkpoint_sha256"] = sha256_file(spec.checkpoint)

        stage = "load data"
        train, val, test = load_splits(spec.data_dir, spec.validation, spec.seed)

        stage = "resolve key"
        key = resolve_key(spec.key, ckpt.key, model.num_instrumentation_points, spec.percentile)
        if key is not None and not key.bound:
            stage = "profile"
            key = key.bind(profile(model, train.images))

        if spec.retrain:
            stage = "retrain"
            if key is None:
                raise ValueError("retraining needs a key")
            base_acc, _ = evaluate_clean(model, val)
            result = taboo_retrain(model, train, val, key, spec.train, baseline_accuracy=base_acc)
            model = result.model
            (staging / "train_log.csv").write_text(result.log.to_csv())
            save_checkpoint(model, staging / "defended.ttrp", key, getattr(key, "thresholds", None))
            manifest["retrain"] = {
                "converged": result.converged,
                "best_epoch": result.best_epoch,
                "validation_accuracy": result.accuracy,
                "validation_fpr": result.fpr,
            }

        stage = "attack"
        evalset = test.sample(spec.subset, spec.seed)
        batches = [run_attack(model, evalset.images, evalset.labels, a, spec.seed) for a in spec.attacks]

        stage = "evaluate"
        rows = evaluate(model, key, evalset, batches)
        manifest["degenerate"] = {f"{r.attack}:{r.theta}": r.n_degenerate for r in rows[1:]}
        (staging / "metrics.csv").write_text(metrics_csv(rows))
        (staging / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except Exception as exc:
        shutil.rmtree(staging, ignore_errors=True)
        raise ExperimentError(stage, exc) from exc
    if out.exists():
        shutil.rmtree(out)
    staging.rename(out)
    return out


# ---------------------------------------------------------------------------
# key diversity

DIVERSITY_ATTACKS = (
    AttackConfig("fgsm", eps=0.4),
    AttackConfig("pgd", eps=0.07, step=0.07 / 4, iters=5),
    AttackConfig("deepfool", iters=5),
)


@dataclass
class KeyDiversityResult:
    keys: list[str]
    attacks: list[AttackConfig]
    detection: np.ndarray  # (attacks, keys), D per cell; NaN when nothing fooled the model
    accuracy: list[float]
    fpr: list[float]
    converged: list[bool]
    rows: dict[str, list[EvalMetrics]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "theta", *self.keys])
        for a, vals in zip(self.attacks, self.detection):
            w.writerow([a.method, a.theta, *("NA" if np.isnan(v) else f"{v:.4f}" for v in vals)])
        w.writerow(["accuracy", "", *(f"{v:.4f}" for v in self.accuracy)])
        w.writerow(["fpr", "", *(f"{v:.4f}" for v in self.fpr)])
        return buf.getvalue()


def key_diversity_experiment(
    baseline,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    cfg: TrainConfig,
    subset: int | None = 1000,
    seed: int = 0,
    attacks=DIVERSITY_ATTACKS,
    percentile: float = 1.0,
    retrained: dict | None = None,
) -> KeyDiversityResult:
    """Retrain one model per key family and tabulate detection against each attack.

    ``retrained`` maps a key name ("f1", "f2", "f3") to an existing
    ``(key, RetrainResult)`` pair, which is used instead of retraining.
    """
    retrained = retrained or {}
    layers = baseline.num_instrumentation_points
    base_acc, _ = evaluate_clean(baseline, val)
    keys = {}
    for name, make in (
        ("f1", lambda: make_key_f1(layers, percentile, profile(baseline, train.images))),
        ("f2", make_key_f2),
        ("f3", lambda: make_key_f3(layers)),
    ):
        keys[name] = retrained[name][0] if name in retrained else make()
    evalset = test.sample(subset, seed)
    det = np.full((len(attacks), len(keys)), np.nan)
    accs, fprs, conv, rows = [], [], [], {}
    for j, (name, key) in enumerate(keys.items()):
        if name in retrained:
            res = retrained[name][1]
        else:
            log.info("key diversity: retraining under %s", name)
            res = taboo_retrain(baseline, train, val, key, cfg, baseline_accuracy=base_acc)
        model = res.model
        batches = [run_attack(model, evalset.images, evalset.labels, a, seed) for a in attacks]
        table = evaluate(model, key, evalset, batches)
        rows[name] = table
        acc, fpr = evaluate_clean(model, test, key)
        accs.append(acc)
        fprs.append(fpr)
        conv.append(res.converged)
        for i, r in enumerate(table[1:]):
            det[i, j] = np.nan if r.D is None else r.D
    return KeyDiversityResult(list(keys), list(attacks), det, accs, fprs, conv, rows)
