"""Whole-image carcinoma classification with FOV-masked pooling and CAMs.

The model is a stack of three sequential nets: a convolutional stem that
downsamples the frame to a small feature map, a 3x3 "neck" conv appended
on top, and a two-class fully connected head applied to the pooled
feature vector. Pooling averages only over feature-map locations inside
the circular field of view (:func:`masked_gap`); applying the same head
to every location individually yields a class activation map whose
masked average reproduces the classification logits exactly (up to
float roundoff), so the map explains the decision rather than
approximating it.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .engine import (
    Adam,
    LayerSpec,
    Network,
    backward,
    backward_from_logits,
    build_network,
    conv,
    cross_entropy_loss,
    fc,
    forward,
    gradient_check_fn,
    relu,
    softmax,
    stable_softmax,
)
from .errors import ConfigError, DataFormatError, GeometryError, NumericError
from .fov import FovMask, circular_extrapolate, compute_fov_mask, resize_bilinear, rotate_image
from .frame import CLASS_INDEX, LABEL_CARCINOMA, Frame, ImageProbability, normalize_raw

logger = logging.getLogger(__name__)

METHOD_NAME = "image"

# redraw budget and the live/dead decision level for the init guard in
# train_image; healthy inits sit around 1e-1, dead ones below 1e-5
DEAD_START_REDRAWS = 20
DEAD_START_FEATURE_PTP = 1e-4
IMAGE_MODEL_KIND = "wholeimage-v1"


class UnpreparedInputWarning(UserWarning):
    """The input does not look like it went through FOV extrapolation."""


# ---------------------------------------------------------------------------
# masked global average pooling


def _as_grid(mask) -> np.ndarray:
    if isinstance(mask, FovMask):
        return mask.grid
    g = np.asarray(mask)
    if g.ndim != 2:
        raise GeometryError(f"mask must be 2-D, got shape {g.shape}")
    return g


def masked_gap(u: np.ndarray, mask) -> np.ndarray:
    """Average feature activations over in-mask locations only.

    ``u`` is (S, S, C) or (N, S, S, C); ``mask`` is an (S, S) binary grid
    (or :class:`FovMask`). Out-of-mask locations contribute nothing: the
    sum runs over masked activations and the divisor is the in-mask
    count, not S*S. With an all-ones mask this reduces to plain average
    pooling bit for bit: the same float64 row-major reduction over the
    same flattened window axis, divided by the same count.
    """
    g = _as_grid(mask)
    u = np.asarray(u)
    squeeze = u.ndim == 3
    if squeeze:
        u = u[None]
    if u.ndim != 4:
        raise GeometryError(f"expected (N, S, S, C) activations, got shape {u.shape}")
    n, h, w, c = u.shape
    if g.shape != (h, w):
        raise GeometryError(f"mask shape {g.shape} does not match feature map {(h, w)}")
    count = int(np.count_nonzero(g))
    if count == 0:
        raise GeometryError("empty mask: no feature-map locations inside the field of view")
    masked = u.astype(np.float64) * (g != 0).astype(np.float64)[None, :, :, None]
    flat = np.ascontiguousarray(masked.transpose(0, 3, 1, 2)).reshape(n, c, h * w)
    v = (flat.sum(axis=-1) / count).astype(u.dtype)
    return v[0] if squeeze else v


def masked_gap_backward(dv: np.ndarray, mask) -> np.ndarray:
    """Gradient of :func:`masked_gap` w.r.t. the activations.

    dv is (C,) or (N, C); the result spreads dv/count uniformly over
    in-mask locations and is exactly zero (not merely small) outside.
    """
    g = _as_grid(mask)
    dv = np.asarray(dv)
    squeeze = dv.ndim == 1
    if squeeze:
        dv = dv[None]
    count = int(np.count_nonzero(g))
    if count == 0:
        raise GeometryError("empty mask: no feature-map locations inside the field of view")
    scale = dv / np.asarray(count, dtype=dv.dtype)
    du = (g != 0).astype(dv.dtype)[None, :, :, None] * scale[:, None, None, :]
    return du[0] if squeeze else du


# ---------------------------------------------------------------------------
# model assembly


@dataclass(frozen=True)
class StemContract:
    """Shape agreement between a feature stem and the pooled head."""

    input_size: int
    out_spatial: int
    out_channels: int


def build_stem_specs(input_size: int = 272, channels=(8, 16, 32, 64)):
    """Stride-2 conv/ReLU blocks halving the map once per stage.

    The default turns a 272x272 single-channel input into a 17x17x64
    feature map. Returns ``(specs, contract)``.
    """
    channels = tuple(int(c) for c in channels)
    if not channels or any(c <= 0 for c in channels):
        raise ConfigError(f"stem channels must be positive, got {channels}")
    factor = 2 ** len(channels)
    if input_size <= 0 or input_size % factor != 0:
        raise ConfigError(f"input size {input_size} is not divisible by the stem downsampling factor {factor}")
    specs = []
    for c in channels:
        specs.append(conv(c, kernel=3, stride=2, padding=1))
        specs.append(relu())
    contract = StemContract(input_size, input_size // factor, channels[-1])
    return tuple(specs), contract


@dataclass(frozen=True)
class WholeImageConfig:
    input_size: int = 272
    stem_channels: tuple = (8, 16, 32, 64)
    head_lr: float = 1e-4
    stem_lr_multiplier: float = 1e-2
    batch_size: int = 8
    min_epochs: int = 2
    max_epochs: int = 10
    # optimizer steps per epoch; None = one pass over the balanced pool.
    # An epoch is a validation-checkpoint interval, so on small datasets a
    # fixed step budget keeps the per-checkpoint learning comparable to
    # training on thousands of frames without lifting the 10-epoch cap.
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.min_epochs < 2:
            raise ConfigError("training must run at least 2 epochs to have a validation baseline")
        if self.max_epochs < self.min_epochs or self.max_epochs > 10:
            raise ConfigError(f"max_epochs must lie in [{self.min_epochs}, 10], got {self.max_epochs}")
        if self.head_lr <= 0 or self.stem_lr_multiplier <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch size must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            raise ConfigError("steps_per_epoch must be positive when set")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        return d


@dataclass
class WholeImageModel:
    stem: Network
    neck: Network
    head: Network
    contract: StemContract

    _PARTS = ("stem", "neck", "head")

    def part(self, name: str) -> Network:
        return getattr(self, name)

    def params(self) -> dict:
        """Single flat view of all parameters, prefixed by part name.

        The arrays are the live ones the nets use, so optimizer updates
        through this dict train the model in place.
        """
        merged = {}
        for part in self._PARTS:
            for k, v in self.part(part).params.items():
                merged[f"{part}.{k}"] = v
        return merged

    def param_count(self) -> int:
        return sum(self.part(p).param_count() for p in self._PARTS)

    def copy(self, dtype=None) -> "WholeImageModel":
        return WholeImageModel(self.stem.copy(dtype), self.neck.copy(dtype), self.head.copy(dtype), self.contract)

    def feature_mask(self, input_radius: float) -> FovMask:
        """FOV mask at feature-map resolution for a given input-scale radius."""
        s = self.contract.out_spatial
        radius = float(input_radius) * s / self.contract.input_size
        return compute_fov_mask(s, s, radius)


def build_image_model(config: WholeImageConfig, rng: np.random.Generator, stem_source: Network | None = None) -> WholeImageModel:
    """Assemble stem + neck + head; fresh He-normal weights throughout.

    ``stem_source`` substitutes previously trained stem weights (e.g.
    from a checkpoint); its layer stack must match the configured stem.
    """
    stem_specs, contract = build_stem_specs(config.input_size, config.stem_channels)
    stem = build_network(stem_specs, (config.input_size, config.input_size, 1), rng)
    if stem_source is not None:
        if tuple(s.kind for s in stem_source.specs) != tuple(s.kind for s in stem.specs):
            raise ConfigError("stem checkpoint layer stack does not match the configured stem")
        for name, p in stem.params.items():
            src = stem_source.params.get(name)
            if src is None or src.shape != p.shape:
                raise ConfigError(f"stem checkpoint parameter {name} missing or mismatched")
            p[...] = src
    c = contract.out_channels
    neck = build_network((conv(c, kernel=3, stride=1, padding=1), relu()), (contract.out_spatial, contract.out_spatial, c), rng)
    head = build_network((fc(2), softmax()), (c,), rng)
    return WholeImageModel(stem, neck, head, contract)


def save_image_model(path, model: WholeImageModel, meta: dict | None = None) -> None:
    reserved = {"model_kind", "contract", "stem_specs", "neck_specs", "head_specs"}
    meta = dict(meta or {})
    clash = reserved & set(meta)
    if clash:
        raise DataFormatError(f"meta keys collide with model fields: {sorted(clash)}")
    meta["model_kind"] = IMAGE_MODEL_KIND
    meta["contract"] = dataclasses.asdict(model.contract)
    for part in WholeImageModel._PARTS:
        meta[f"{part}_specs"] = [s.to_dict() for s in model.part(part).specs]
    checkpoint.save_checkpoint(path, model.params(), meta)


def load_image_model(path):
    """Returns ``(model, meta)``; byte-faithful inverse of :func:`save_image_model`."""
    tensors, meta = checkpoint.load_checkpoint(path)
    if meta.get("model_kind") != IMAGE_MODEL_KIND:
        raise DataFormatError(f"checkpoint is not a whole-image model: kind={meta.get('model_kind')!r}")
    contract = StemContract(**meta["contract"])
    nets = {}
    shapes = {
        "stem": (contract.input_size, contract.input_size, 1),
        "neck": (contract.out_spatial, contract.out_spatial, contract.out_channels),
        "head": (contract.out_channels,),
    }
    for part in WholeImageModel._PARTS:
        specs = tuple(LayerSpec.from_dict(d) for d in meta[f"{part}_specs"])
        prefix = f"{part}."
        params = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        nets[part] = Network(specs, params, shapes[part])
    return WholeImageModel(nets["stem"], nets["neck"], nets["head"], contract), meta


# ---------------------------------------------------------------------------
# input preparation


@dataclass(frozen=True)
class PreparedInput:
    """A frame after rotation/extrapolation/resize/scaling, ready for the net."""

    x: np.ndarray          # (input_size, input_size, 1) float32
    fov_radius: float      # at network-input scale
    frame_id: str = ""
    patient_id: str = ""
    label: str | None = None


def prepare_model_input(frame: Frame, input_size: int, rng: np.random.Generator | None = None) -> PreparedInput:
    """Rotate (train-time only), mirror-extrapolate, resize, and scale one frame.

    Rotation happens before extrapolation so the corner fill is computed
    from the rotated tissue; passing ``rng`` draws a fresh uniform angle,
    which is how training augments every sample every epoch.
    """
    if rng is not None:
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        rot = rotate_image(frame.raw.astype(np.float64), angle, fill=0.0)
        raw = np.clip(np.rint(rot), 0, np.iinfo(np.uint16).max).astype(np.uint16)
        frame = dataclasses.replace(frame, raw=raw)
    full = circular_extrapolate(frame)
    resized = resize_bilinear(full.raw.astype(np.float64), input_size, input_size)
    x = normalize_raw(resized)[..., None]
    radius = frame.fov_radius * input_size / frame.width
    return PreparedInput(x=x, fov_radius=radius, frame_id=frame.frame_id, patient_id=frame.patient_id, label=frame.label)


def _looks_unprepared(x: np.ndarray, radius: float) -> bool:
    img = x[..., 0]
    h, w = img.shape
    grid = compute_fov_mask(w, h, radius).grid.astype(bool)
    outside = img[~grid]
    if outside.size == 0:
        return False
    inside = img[grid]
    first = outside.flat[0]
    if np.all(outside == first):
        # a constant surround is fine only if the whole image is that constant
        return not np.allclose(inside, first)
    # near-black corners relative to the tissue: raw frame, FOV never filled
    return float(np.abs(outside).mean()) < 0.01 * float(np.abs(inside).mean())


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class CamResult:
    """Per-location class evidence on the feature-map grid."""

    scores: np.ndarray         # (S, S, 2) pre-softmax class scores
    probabilities: np.ndarray  # (S, S, 2) per-location softmax
    mask: np.ndarray           # (S, S) uint8 feature-map FOV mask


@dataclass(frozen=True)
class EvalResult:
    probabilities: np.ndarray  # (2,)
    logits: np.ndarray         # (2,)
    cam: CamResult


def evaluate(model: WholeImageModel, prepared: PreparedInput, warn_unprepared: bool = True) -> EvalResult:
    """One stem pass feeding both outputs.

    Classification pools the neck features over the FOV and applies the
    head; the CAM applies the same head weights at every location. Both
    views come from the same forward activations, which is what makes
    the masked CAM average agree with the classification logits.
    """
    if warn_unprepared and _looks_unprepared(prepared.x, prepared.fov_radius):
        warnings.warn(
            f"frame {prepared.frame_id or '<unnamed>'}: input does not look FOV-extrapolated; "
            "run prepare_model_input() first",
            UnpreparedInputWarning,
            stacklevel=2,
        )
    fmask = model.feature_mask(prepared.fov_radius)
    u1, _ = forward(model.stem, prepared.x[None])
    u2, _ = forward(model.neck, u1)
    v = masked_gap(u2, fmask)                             # (1, C)
    w = model.head.params["L0.w"]
    b = model.head.params["L0.b"]
    logits = (v @ w + b)[0]
    probabilities = stable_softmax(logits)
    cam_scores = (u2[0] @ w + b).astype(np.float32)       # (S, S, 2)
    cam = CamResult(cam_scores, stable_softmax(cam_scores), fmask.grid.copy())
    return EvalResult(probabilities.astype(np.float32), logits.astype(np.float32), cam)


def classify_image(model: WholeImageModel, prepared: PreparedInput, warn_unprepared: bool = True) -> ImageProbability:
    result = evaluate(model, prepared, warn_unprepared=warn_unprepared)
    return ImageProbability(float(result.probabilities[CLASS_INDEX[LABEL_CARCINOMA]]), METHOD_NAME)


def class_activation_map(model: WholeImageModel, prepared: PreparedInput, warn_unprepared: bool = True) -> CamResult:
    return evaluate(model, prepared, warn_unprepared=warn_unprepared).cam


def predict_batch(model: WholeImageModel, prepared_list, warn_unprepared: bool = False) -> np.ndarray:
    """Carcinoma/normal probabilities for many prepared inputs, (N, 2).

    Inputs are grouped by FOV radius so each group shares one mask and
    one stacked forward pass; output order matches input order.
    """
    out = np.empty((len(prepared_list), 2), dtype=np.float32)
    groups: dict = {}
    for i, p in enumerate(prepared_list):
        groups.setdefault(round(float(p.fov_radius), 9), []).append(i)
    w = model.head.params["L0.w"]
    b = model.head.params["L0.b"]
    for radius in sorted(groups):
        idxs = groups[radius]
        if warn_unprepared:
            for i in idxs:
                if _looks_unprepared(prepared_list[i].x, prepared_list[i].fov_radius):
                    warnings.warn(
                        f"frame {prepared_list[i].frame_id or '<unnamed>'}: input does not look FOV-extrapolated",
                        UnpreparedInputWarning,
                        stacklevel=2,
                    )
        fmask = model.feature_mask(radius)
        xb = np.stack([prepared_list[i].x for i in idxs])
        u1, _ = forward(model.stem, xb)
        u2, _ = forward(model.neck, u1)
        v = masked_gap(u2, fmask)
        out[idxs] = stable_softmax(v @ w + b)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainLog:
    epochs: tuple            # per-epoch {"epoch", "train_loss", "val_accuracy"}
    restored_to_epoch: int | None
    val_patients: tuple

    def to_dict(self) -> dict:
        return {
            "epochs": [dict(e) for e in self.epochs],
            "restored_to_epoch": self.restored_to_epoch,
            "val_patients": list(self.val_patients),
        }


def select_validation_patients(frames, n_val: int | None = None):
    """Pick held-out validation patients from a training pool.

    Prefers the patients with the most frames (ties broken by id), but
    skips any choice that would leave either side without both classes.
    Default size: 2 patients, or 1 when that would leave 5 or fewer
    patients to train on.
    """
    counts: dict = {}
    labels: dict = {}
    for f in frames:
        counts[f.patient_id] = counts.get(f.patient_id, 0) + 1
        labels.setdefault(f.patient_id, set()).add(f.label)
    order = sorted(counts, key=lambda p: (-counts[p], p))
    if n_val is None:
        n_val = 2 if len(order) - 2 > 5 else 1
    if n_val <= 0 or n_val >= len(order):
        raise ConfigError(f"cannot hold out {n_val} of {len(order)} patients for validation")
    all_labels = set().union(*labels.values())
    for combo in itertools.combinations(order, n_val):
        val_labels = set().union(*(labels[p] for p in combo))
        fit_labels = set().union(*(labels[p] for p in order if p not in combo))
        if val_labels == all_labels and fit_labels == all_labels:
            chosen = tuple(sorted(combo))
            logger.info("validation patients: %s (%d frames held out)", ", ".join(chosen), sum(counts[p] for p in chosen))
            return chosen
    raise ConfigError("no validation split keeps both classes on both sides")


def _train_radius(prepared) -> float:
    radii = {round(float(p.fov_radius), 9) for p in prepared}
    if len(radii) != 1:
        raise ConfigError(f"mixed FOV radii in one training set: {sorted(radii)}")
    return next(iter(radii))


def _step(model, opt, params, fmask, xb, yb) -> float:
    u1, c1 = forward(model.stem, xb)
    u2, c2 = forward(model.neck, u1)
    v = masked_gap(u2, fmask)
    probs, c3 = forward(model.head, v)
    loss, dlogits = cross_entropy_loss(probs, yb)
    g_head, dv = backward_from_logits(model.head, c3, dlogits)
    du2 = masked_gap_backward(dv, fmask)
    g_neck, du1 = backward(model.neck, c2, du2)
    g_stem, _ = backward(model.stem, c1, du1)
    grads = {f"stem.{k}": g for k, g in g_stem.items()}
    grads.update({f"neck.{k}": g for k, g in g_neck.items()})
    grads.update({f"head.{k}": g for k, g in g_head.items()})
    opt.step(params, grads)
    return loss


def train_image(frames, config: WholeImageConfig, rng: np.random.Generator, val_patients=None, stem_source: Network | None = None, val_metric_fn=None):
    """Train a whole-image model with early stopping on validation accuracy.

    Validation starts at epoch 2; from epoch 3 on, a drop in validation
    accuracy restores the previous epoch's weights bit for bit and stops.
    Ties keep training. ``val_metric_fn(model, epoch) -> float``
    substitutes the metric (the early-stop tests script it).

    Returns ``(model, TrainLog)``.
    """
    frames = list(frames)
    if not frames:
        raise ConfigError("no training frames")
    if val_patients is None:
        val_patients = select_validation_patients(frames)
    val_patients = tuple(sorted(set(val_patients)))
    val_frames = [f for f in frames if f.patient_id in val_patients]
    fit_frames = [f for f in frames if f.patient_id not in val_patients]
    if not val_frames:
        raise ConfigError(f"validation patients {val_patients} have no frames in the training pool")
    if not fit_frames:
        raise ConfigError("all frames fell into the validation split")
    for side, group in (("validation", val_frames), ("fit", fit_frames)):
        if len({f.label for f in group}) < 2:
            raise ConfigError(f"{side} split contains a single class; cannot supervise two-class training")

    val_prepared = [prepare_model_input(f, config.input_size) for f in val_frames]

    # Dead-start guard. Narrow stems on low-contrast inputs occasionally draw
    # an init whose first ReLU stage is negative everywhere; every gradient
    # upstream of the head bias is then exactly zero and training cannot
    # recover. Detect a feature vector that carries no signal and redraw.
    probe = np.stack([p.x for p in val_prepared[: min(8, len(val_prepared))]])
    probe_mask = None
    for attempt in range(DEAD_START_REDRAWS):
        model = build_image_model(config, rng, stem_source=stem_source)
        if probe_mask is None:
            probe_mask = model.feature_mask(val_prepared[0].fov_radius)
        u1, _ = forward(model.stem, probe)
        u2, _ = forward(model.neck, u1)
        v = masked_gap(u2, probe_mask)
        if float(np.ptp(v, axis=0).max()) > DEAD_START_FEATURE_PTP:
            break
    else:
        raise NumericError(
            f"model features stayed constant across {DEAD_START_REDRAWS} re-initializations; "
            "inputs may be degenerate"
        )
    params = model.params()
    param_lrs = {k: config.head_lr * config.stem_lr_multiplier for k in params if k.startswith("stem.")}
    opt = Adam(params, lr=config.head_lr, param_lrs=param_lrs)
    if val_metric_fn is None:
        def val_metric_fn(m, epoch):
            probs = predict_batch(m, val_prepared)
            pred = probs[:, CLASS_INDEX[LABEL_CARCINOMA]] >= 0.5
            truth = np.array([f.label == LABEL_CARCINOMA for f in val_frames])
            return float((pred == truth).mean())

    by_label: dict = {}
    for i, f in enumerate(fit_frames):
        by_label.setdefault(f.label, []).append(i)
    n_minority = min(len(v) for v in by_label.values())

    history = []
    prev_acc = None
    prev_snapshot = None
    restored_to = None
    for epoch in range(1, config.max_epochs + 1):
        # fresh majority undersampling each epoch: every batch is class-balanced
        # in expectation, so the head prior cannot drift toward the larger class
        chosen = sorted(i for idxs in by_label.values()
                        for i in rng.choice(idxs, size=n_minority, replace=False))
        prepared = [prepare_model_input(fit_frames[i], config.input_size, rng=rng) for i in chosen]
        radius = _train_radius(prepared)
        fmask = model.feature_mask(radius)
        order = rng.permutation(len(prepared))
        batch_starts = range(0, len(order), config.batch_size)
        n_steps = config.steps_per_epoch if config.steps_per_epoch is not None else len(batch_starts)
        losses = []
        step_i = 0
        while step_i < n_steps:
            for start in batch_starts:
                if step_i >= n_steps:
                    break
                chunk = order[start:start + config.batch_size]
                xb = np.stack([prepared[i].x for i in chunk])
                yb = np.array([CLASS_INDEX[prepared[i].label] for i in chunk], dtype=np.int64)
                losses.append(_step(model, opt, params, fmask, xb, yb))
                step_i += 1
            order = rng.permutation(len(prepared))
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": None}
        if epoch >= 2:
            acc = float(val_metric_fn(model, epoch))
            entry["val_accuracy"] = acc
            if epoch >= 3 and prev_acc is not None and acc < prev_acc:
                for k, p in params.items():
                    p[...] = prev_snapshot[k]
                restored_to = epoch - 1
                history.append(entry)
                logger.info("epoch %d: validation accuracy fell %.4f -> %.4f; restored epoch %d weights", epoch, prev_acc, acc, restored_to)
                break
            prev_acc = acc
            prev_snapshot = {k: p.copy() for k, p in params.items()}
        history.append(entry)
        logger.info("epoch %d: train loss %.4f val accuracy %s", epoch, entry["train_loss"],
                    "n/a" if entry["val_accuracy"] is None else f"{entry['val_accuracy']:.4f}")
    return model, TrainLog(tuple(history), restored_to, val_patients)


# ---------------------------------------------------------------------------
# gradient checking through the pooled stack


def gradient_check_image(model: WholeImageModel, x: np.ndarray, labels, input_radius: float, h: float = 1e-5, tol: float = 1e-3):
    """Finite-difference check of the full stem/neck/gap/head stack.

    Runs on float64 copies under cross-entropy loss; the model is not
    modified. The masked pooling sits mid-network, so this also verifies
    its backward rule in context.
    """
    m64 = model.copy(dtype=np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    if x64.ndim == 3:
        x64 = x64[None]
    fmask = m64.feature_mask(input_radius)
    params = m64.params()

    def fn(_params, with_grads):
        u1, c1 = forward(m64.stem, x64)
        u2, c2 = forward(m64.neck, u1)
        v = masked_gap(u2, fmask)
        probs, c3 = forward(m64.head, v)
        loss, dlogits = cross_entropy_loss(probs, labels)
        if not with_grads:
            return loss, None
        g_head, dv = backward_from_logits(m64.head, c3, dlogits)
        du2 = masked_gap_backward(dv, fmask)
        g_neck, du1 = backward(m64.neck, c2, du2)
        g_stem, _ = backward(m64.stem, c1, du1)
        grads = {f"stem.{k}": g for k, g in g_stem.items()}
        grads.update({f"neck.{k}": g for k, g in g_neck.items()})
        grads.update({f"head.{k}": g for k, g in g_head.items()})
        return loss, grads

    return gradient_check_fn(fn, params, h=h, tol=tol)
