"""Patient-level cross-validation experiments and result-vector metrics.

Five experiment designs cover the two anatomical sides: within-side
leave-one-patient-out for each, the two cross-side transfer runs, and a
joint LOPO over the pooled patients. Every fold trains from scratch,
evaluates its held-out frames, and contributes records to one
concatenated result vector; accuracy, precision, recall and ROC AUC are
computed over that vector, never per fold.

Splits are at patient granularity throughout so that frames from one
sequence can never appear on both sides of a fold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import DOMAIN_SIDE, DOMAIN_OC, DOMAIN_VC, Dataset
from .errors import ConfigError, ExperimentError, MetricsError
from .frame import CLASS_INDEX, LABEL_CARCINOMA, LABELS
from .patches import (
    PpfConfig,
    classify_frame,
    save_ppf_model,
    train_ppf,
)
from .wholeimage import (
    WholeImageConfig,
    predict_batch,
    prepare_model_input,
    save_image_model,
    train_image,
)
from .patches import METHOD_NAME as METHOD_PPF
from .wholeimage import METHOD_NAME as METHOD_IMAGE

log = logging.getLogger(__name__)

EXPERIMENT_OC = "OC"
EXPERIMENT_VC = "VC"
EXPERIMENT_OC_TO_VC = "OC-to-VC"
EXPERIMENT_VC_TO_OC = "VC-to-OC"
EXPERIMENT_JOINT = "OC+VC"
EXPERIMENTS = (
    EXPERIMENT_OC,
    EXPERIMENT_VC,
    EXPERIMENT_OC_TO_VC,
    EXPERIMENT_VC_TO_OC,
    EXPERIMENT_JOINT,
)
# short command-line spellings
EXPERIMENT_ALIASES = {
    "oc": EXPERIMENT_OC,
    "vc": EXPERIMENT_VC,
    "oc2vc": EXPERIMENT_OC_TO_VC,
    "vc2oc": EXPERIMENT_VC_TO_OC,
    "joint": EXPERIMENT_JOINT,
}
METHODS = (METHOD_PPF, METHOD_IMAGE)

# Hyperparameters sized for the bundled synthetic datasets (128 px frames,
# a handful of patients). Full-resolution clinical runs should pass explicit
# configs built from the pipeline defaults instead.
DESK_PPF_CONFIG = PpfConfig(
    patch_size=32, stride=20, conv_channels=(6, 12), fc_width=24, batch_size=128
)
DESK_IMAGE_CONFIG = WholeImageConfig(
    input_size=128,
    stem_channels=(4, 8, 16, 32),
    head_lr=3e-3,
    stem_lr_multiplier=1.0,
    batch_size=4,
    steps_per_epoch=50,
)


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class Fold:
    """One train/test split at patient granularity."""

    fold_id: int
    train_patients: tuple
    test_patients: tuple

    def __post_init__(self):
        train, test = set(self.train_patients), set(self.test_patients)
        if not train or not test:
            raise ConfigError(f"fold {self.fold_id}: empty train or test side")
        if train & test:
            raise ConfigError(
                f"fold {self.fold_id}: patients on both sides: {sorted(train & test)}"
            )


@dataclass(frozen=True)
class ExperimentPlan:
    experiment_id: str
    method: str
    folds: tuple

    def __post_init__(self):
        if self.experiment_id not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment_id!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.folds:
            raise ConfigError("plan has no folds")
        if [f.fold_id for f in self.folds] != list(range(len(self.folds))):
            raise ConfigError("fold ids must be consecutive from 0")


def make_lopo_plan(patients) -> list:
    """One fold per patient, each trained on all the others.

    Fold order follows sorted patient id so plans are reproducible
    regardless of how the caller enumerated patients.
    """
    patients = sorted(set(patients))
    if len(patients) < 3:
        raise ConfigError(f"leave-one-patient-out needs >= 3 patients, got {len(patients)}")
    return [
        Fold(i, tuple(q for q in patients if q != p), (p,))
        for i, p in enumerate(patients)
    ]


def make_transfer_plan(train_patients, test_patients) -> list:
    """Single fold: train on one patient set, test on a disjoint one."""
    return [Fold(0, tuple(sorted(set(train_patients))), tuple(sorted(set(test_patients))))]


def side_patients(dataset: Dataset, side: str) -> list:
    """Patients whose domain maps onto the given anatomical side."""
    if side not in (DOMAIN_OC, DOMAIN_VC):
        raise ConfigError(f"unknown side {side!r}")
    out = []
    for rec in dataset.manifest.records:
        if DOMAIN_SIDE[rec.domain] == side and rec.patient_id not in out:
            out.append(rec.patient_id)
    return sorted(out)


def make_experiment_plan(experiment_id: str, dataset: Dataset, method: str) -> ExperimentPlan:
    experiment_id = EXPERIMENT_ALIASES.get(experiment_id, experiment_id)
    if experiment_id not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment_id!r}")
    oc = side_patients(dataset, DOMAIN_OC)
    vc = side_patients(dataset, DOMAIN_VC)
    if experiment_id == EXPERIMENT_OC:
        folds = make_lopo_plan(oc)
    elif experiment_id == EXPERIMENT_VC:
        folds = make_lopo_plan(vc)
    elif experiment_id == EXPERIMENT_JOINT:
        folds = make_lopo_plan(oc + vc)
    elif experiment_id == EXPERIMENT_OC_TO_VC:
        if not oc or not vc:
            raise ConfigError("transfer experiment needs patients on both sides")
        folds = make_transfer_plan(oc, vc)
    else:
        if not oc or not vc:
            raise ConfigError("transfer experiment needs patients on both sides")
        folds = make_transfer_plan(vc, oc)
    return ExperimentPlan(experiment_id, method, tuple(folds))


# ---------------------------------------------------------------------------
# result vectors


@dataclass(frozen=True)
class ResultRecord:
    frame_id: str
    patient_id: str
    true_label: str
    p_carcinoma: float
    fold_id: int


RESULT_COLUMNS = ("frame_id", "patient_id", "true_label", "p_carcinoma", "fold_id")


@dataclass(frozen=True)
class ResultVector:
    records: tuple

    def __post_init__(self):
        ids = [r.frame_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ExperimentError(f"frames recorded more than once: {dupes}")
        for r in self.records:
            if r.true_label not in LABELS:
                raise ExperimentError(f"frame {r.frame_id}: unknown label {r.true_label!r}")
            if not 0.0 <= r.p_carcinoma <= 1.0:
                raise ExperimentError(f"frame {r.frame_id}: probability {r.p_carcinoma} out of range")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def scores(self) -> np.ndarray:
        return np.array([r.p_carcinoma for r in self.records], dtype=np.float64)

    def labels01(self) -> np.ndarray:
        """1 for carcinoma (the positive class), 0 for clinically normal."""
        return np.array(
            [CLASS_INDEX[r.true_label] for r in self.records], dtype=np.int64
        )

    def patients(self) -> list:
        return sorted({r.patient_id for r in self.records})


def save_result_vector(path, rv: ResultVector) -> None:
    lines = ["\t".join(RESULT_COLUMNS)]
    for r in rv.records:
        lines.append(
            "\t".join([r.frame_id, r.patient_id, r.true_label, repr(float(r.p_carcinoma)), str(r.fold_id)])
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_result_vector(path) -> ResultVector:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != RESULT_COLUMNS:
        raise ExperimentError(f"{path}: not a result vector file")
    records = []
    for ln in lines[1:]:
        fid, pid, label, p, fold = ln.split("\t")
        records.append(ResultRecord(fid, pid, label, float(p), int(fold)))
    return ResultVector(tuple(records))


# ---------------------------------------------------------------------------
# running experiments


@dataclass(frozen=True)
class FoldOutcome:
    fold_id: int
    test_patients: tuple
    n_test_frames: int
    train_log: dict


@dataclass(frozen=True)
class ExperimentOutcome:
    plan: ExperimentPlan
    seed: int
    result_vector: ResultVector
    fold_outcomes: tuple


def _check_fold_pools(fold: Fold, train_frames, test_frames):
    if not train_frames or not test_frames:
        raise ExperimentError(f"fold {fold.fold_id}: empty train or test frame pool")
    train_pats = {f.patient_id for f in train_frames}
    test_pats = {f.patient_id for f in test_frames}
    if train_pats & test_pats:
        raise ExperimentError(f"fold {fold.fold_id}: patient leakage {sorted(train_pats & test_pats)}")
    if len({f.label for f in train_frames}) < 2:
        raise ExperimentError(
            f"fold {fold.fold_id}: training pool holds a single class; "
            f"cannot fit a classifier (patients {sorted(train_pats)})"
        )


def _run_fold_ppf(fold, train_frames, test_frames, config, rng):
    model, tlog = train_ppf(train_frames, config, rng)
    records = [
        ResultRecord(f.frame_id, f.patient_id, f.label,
                     classify_frame(model, f, config).p_carcinoma, fold.fold_id)
        for f in test_frames
    ]
    return model, tlog.to_dict(), records


def _run_fold_image(fold, train_frames, test_frames, config, rng):
    model, tlog = train_image(train_frames, config, rng)
    if not set(tlog.val_patients) <= set(fold.train_patients):
        raise ExperimentError(
            f"fold {fold.fold_id}: validation patients {tlog.val_patients} leak outside the training side"
        )
    prepared = [prepare_model_input(f, config.input_size) for f in test_frames]
    probs = predict_batch(model, prepared)[:, CLASS_INDEX[LABEL_CARCINOMA]]
    records = [
        ResultRecord(f.frame_id, f.patient_id, f.label, float(p), fold.fold_id)
        for f, p in zip(test_frames, probs)
    ]
    return model, tlog.to_dict(), records


def run_experiment(
    plan: ExperimentPlan,
    dataset: Dataset,
    seed: int,
    ppf_config: PpfConfig | None = None,
    image_config: WholeImageConfig | None = None,
    fold_dir: Path | None = None,
) -> ExperimentOutcome:
    """Train and evaluate every fold of a plan, concatenating the results.

    Each fold draws its generator from ``SeedSequence([seed, fold_id])`` so
    folds are independently reproducible and reordering them cannot change
    any fold's outcome. When ``fold_dir`` is given, each fold persists its
    checkpoint and training log under ``fold-<k>/``.
    """
    ppf_config = ppf_config or DESK_PPF_CONFIG
    image_config = image_config or DESK_IMAGE_CONFIG
    records: list = []
    outcomes = []
    for fold in plan.folds:
        train_frames = [f for p in fold.train_patients for f in dataset.frames(patient=p)]
        test_frames = [f for p in fold.test_patients for f in dataset.frames(patient=p)]
        _check_fold_pools(fold, train_frames, test_frames)
        rng = np.random.default_rng(np.random.SeedSequence([seed, fold.fold_id]))
        if plan.method == METHOD_PPF:
            model, tlog, fold_records = _run_fold_ppf(fold, train_frames, test_frames, ppf_config, rng)
        else:
            model, tlog, fold_records = _run_fold_image(fold, train_frames, test_frames, image_config, rng)
        records.extend(fold_records)
        outcomes.append(FoldOutcome(fold.fold_id, fold.test_patients, len(fold_records), tlog))
        if fold_dir is not None:
            d = Path(fold_dir) / f"fold-{fold.fold_id:02d}"
            d.mkdir(parents=True, exist_ok=True)
            meta = {"experiment": plan.experiment_id, "fold": fold.fold_id}
            if plan.method == METHOD_PPF:
                save_ppf_model(d / "model.ckpt", model, ppf_config, seed=seed, extra=meta)
            else:
                save_image_model(d / "model.ckpt", model, meta={**meta, "seed": seed})
            (d / "train_log.json").write_text(json.dumps(tlog, indent=2, sort_keys=True) + "\n")
        log.info(
            "%s/%s fold %d: trained on %d frames, evaluated %d",
            plan.experiment_id, plan.method, fold.fold_id, len(train_frames), len(fold_records),
        )
    rv = ResultVector(tuple(records))
    expected = {f.frame_id for fold in plan.folds for f in _fold_test_frames(dataset, fold)}
    got = {r.frame_id for r in rv.records}
    if got != expected:
        raise ExperimentError(
            f"result vector does not cover the test side exactly once "
            f"(missing {sorted(expected - got)}, extra {sorted(got - expected)})"
        )
    return ExperimentOutcome(plan, seed, rv, tuple(outcomes))


def _fold_test_frames(dataset, fold):
    return [f for p in fold.test_patients for f in dataset.frames(patient=p)]


# ---------------------------------------------------------------------------
# metrics


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_auc(scores, labels01) -> float:
    """Rank-based ROC AUC: the fraction of positive/negative pairs ranked
    correctly, ties credited 0.5. Equals the trapezoidal ROC area."""
    scores = np.asarray(scores, dtype=np.float64)
    labels01 = np.asarray(labels01)
    n_pos = int((labels01 == 1).sum())
    n_neg = int((labels01 == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC undefined: result vector holds a single class")
    ranks = _average_ranks(scores)
    u = ranks[labels01 == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels01):
    """ROC points swept over the distinct scores, highest threshold first.

    Returns (fpr, tpr, thresholds); the leading point is (0, 0) at an
    unattainable threshold above the largest score. Tied scores move as a
    block, which the trapezoid then credits at 0.5 per tied pair.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels01 = np.asarray(labels01)
    n_pos = int((labels01 == 1).sum())
    n_neg = int((labels01 == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC undefined: result vector holds a single class")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (labels01[order] == 1).astype(np.float64)
    distinct = np.r_[np.flatnonzero(np.diff(sorted_scores)), scores.size - 1]
    tp = np.cumsum(sorted_pos)[distinct]
    fp = (distinct + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thresholds = np.r_[np.inf, sorted_scores[distinct]]
    return fpr, tpr, thresholds


@dataclass(frozen=True)
class MetricsReport:
    n: int
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    roc_auc: float
    threshold: float
    per_patient: dict  # patient id -> {"n", "correct", "accuracy"}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_patient"] = {k: dict(v) for k, v in sorted(self.per_patient.items())}
        return d


def compute_metrics(rv: ResultVector, threshold: float = 0.5) -> MetricsReport:
    """Threshold the concatenated result vector and report Table-style
    metrics. Carcinoma is the positive class; a probability exactly at the
    threshold counts as positive (recall-favoring). Precision is defined as
    0 when nothing was predicted positive.
    """
    if len(rv) == 0:
        raise MetricsError("empty result vector")
    y = rv.labels01()
    p = rv.scores()
    if len(set(y.tolist())) < 2:
        raise MetricsError("metrics undefined: result vector holds a single class")
    pred = p >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    n = len(rv)
    precision = tp / (tp + fp) if tp + fp else 0.0
    per_patient = {}
    for r in rv.records:
        correct = int((r.p_carcinoma >= threshold) == (r.true_label == LABEL_CARCINOMA))
        slot = per_patient.setdefault(r.patient_id, {"n": 0, "correct": 0})
        slot["n"] += 1
        slot["correct"] += correct
    for slot in per_patient.values():
        slot["accuracy"] = slot["correct"] / slot["n"]
    return MetricsReport(
        n=n,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        accuracy=(tp + tn) / n,
        precision=float(precision),
        recall=tp / (tp + fn),
        roc_auc=mann_whitney_auc(p, y),
        threshold=float(threshold),
        per_patient=per_patient,
    )


HIST_BINS = 20


@dataclass(frozen=True)
class PatientReport:
    rows: tuple  # (patient_id, n, correct, accuracy), sorted by patient id
    hist_edges: np.ndarray
    hist_normal: np.ndarray  # carcinoma-probability counts of truly normal frames
    hist_carcinoma: np.ndarray


def per_patient_report(rv: ResultVector, threshold: float = 0.5) -> PatientReport:
    """Per-patient accuracy plus per-class probability histograms."""
    if len(rv) == 0:
        raise MetricsError("empty result vector")
    acc: dict = {}
    for r in rv.records:
        correct = int((r.p_carcinoma >= threshold) == (r.true_label == LABEL_CARCINOMA))
        slot = acc.setdefault(r.patient_id, [0, 0])
        slot[0] += 1
        slot[1] += correct
    rows = tuple(
        (pid, n, c, c / n) for pid, (n, c) in sorted(acc.items())
    )
    y = rv.labels01()
    p = rv.scores()
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    hist_normal, _ = np.histogram(p[y == 0], bins=edges)
    hist_carcinoma, _ = np.histogram(p[y == 1], bins=edges)
    return PatientReport(rows, edges, hist_normal, hist_carcinoma)


# ---------------------------------------------------------------------------
# persisted runs


LOCK_NAME = "run.lock"


def run_dir_name(experiment_id: str, method: str, seed: int) -> str:
    return f"{experiment_id}_{method}_seed{seed}"


@dataclass(frozen=True)
class RunResult:
    run_dir: Path
    outcome: ExperimentOutcome
    metrics: MetricsReport


def execute_run(
    dataset: Dataset,
    experiment_id: str,
    method: str,
    seed: int,
    out_root,
    threshold: float = 0.5,
    ppf_config: PpfConfig | None = None,
    image_config: WholeImageConfig | None = None,
    dataset_path=None,
) -> RunResult:
    """Run one experiment end to end and persist it under a run directory.

    Layout: config.json (frozen effective configuration + version),
    result_vector.tsv, metrics.json, folds/fold-<k>/{model.ckpt,
    train_log.json}. An existing run directory is never overwritten, and a
    lock file keeps two concurrent runs out of the same directory.
    """
    plan = make_experiment_plan(experiment_id, dataset, method)
    run_dir = Path(out_root) / run_dir_name(plan.experiment_id, plan.method, seed)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise ExperimentError(f"refusing to overwrite existing run directory {run_dir}")
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        lock.touch(exist_ok=False)
    except FileExistsError:
        raise ExperimentError(f"run directory {run_dir} is locked by another run") from None
    try:
        ppf_config = ppf_config or DESK_PPF_CONFIG
        image_config = image_config or DESK_IMAGE_CONFIG
        config = {
            "experiment": plan.experiment_id,
            "method": plan.method,
            "seed": int(seed),
            "threshold": float(threshold),
            "version": __version__,
            "dataset": str(dataset_path) if dataset_path is not None else None,
            "ppf_config": asdict(ppf_config),
            "image_config": asdict(image_config),
            "folds": [
                {"fold_id": f.fold_id, "train": list(f.train_patients), "test": list(f.test_patients)}
                for f in plan.folds
            ],
        }
        (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
        outcome = run_experiment(
            plan, dataset, seed,
            ppf_config=ppf_config, image_config=image_config,
            fold_dir=run_dir / "folds",
        )
        save_result_vector(run_dir / "result_vector.tsv", outcome.result_vector)
        metrics = compute_metrics(outcome.result_vector, threshold)
        (run_dir / "metrics.json").write_text(
            json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"
        )
        return RunResult(run_dir, outcome, metrics)
    finally:
        lock.unlink(missing_ok=True)
