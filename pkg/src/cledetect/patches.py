"""Patch probability fusion: classify FOV-complete patches, average the map.

A small CNN scores every patch whose four corners lie inside the circular
field of view; the per-patch carcinoma probabilities form a probability
map over the frame, and their arithmetic mean is the frame probability.
Patch labels are inherited from the frame label; a carcinoma frame's
healthy-looking patches are treated as label noise the fusion averages
out.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_network, save_network
from .engine import (
    Adam,
    Network,
    backward_from_logits,
    build_network,
    conv,
    cross_entropy_loss,
    fc,
    forward,
    infer,
    maxpool,
    relu,
    softmax,
)
from .errors import ConfigError, NonDiagnosticFrameError
from .fov import PatchGrid, extract_patch_grid, extract_patches, frame_mask
from .frame import CLASS_INDEX, LABEL_CARCINOMA, Frame, ImageProbability, normalize_raw

logger = logging.getLogger(__name__)

METHOD_NAME = "ppf"
INFER_BATCH = 256


@dataclass(frozen=True)
class PpfConfig:
    patch_size: int = 80
    stride: int = 40
    conv_channels: tuple = (16, 32)
    fc_width: int = 128
    lr: float = 1e-2
    epochs: int = 60
    batch_size: int = 128

    def __post_init__(self):
        if self.patch_size <= 0 or self.stride <= 0:
            raise ConfigError("patch size and stride must be positive")
        if len(self.conv_channels) != 2 or any(c <= 0 for c in self.conv_channels):
            raise ConfigError(f"exactly two conv stages with positive widths required, got {self.conv_channels}")
        if self.fc_width <= 0 or self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("fc width, learning rate, epochs and batch size must be positive")
        if self.patch_size % 4 != 0:
            raise ConfigError(f"patch size must survive two 2x2 poolings, got {self.patch_size}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


def build_patch_net(config: PpfConfig, rng: np.random.Generator) -> Network:
    """conv-pool, conv-pool, FC, FC, softmax over two classes."""
    c1, c2 = config.conv_channels
    specs = (
        conv(c1, kernel=3, stride=1, padding=1),
        relu(),
        maxpool(2),
        conv(c2, kernel=3, stride=1, padding=1),
        relu(),
        maxpool(2),
        fc(config.fc_width),
        relu(),
        fc(2),
        softmax(),
    )
    return build_network(specs, (config.patch_size, config.patch_size, 1), rng)


# ---------------------------------------------------------------------------
# inference and fusion


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-patch carcinoma probabilities in grid (row-major) order."""

    frame_id: str
    patch_size: int
    entries: tuple  # ((origin_x, origin_y, p_carcinoma), ...)

    def __len__(self) -> int:
        return len(self.entries)

    def probabilities(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=np.float64)


def classify_patches(model: Network, frame: Frame, grid: PatchGrid) -> ProbabilityMap:
    """Score every grid patch; output order equals grid order.

    An empty grid yields an empty map; whether that frame is classifiable
    at all is the fusion step's call, not this one's.
    """
    if model.input_shape != (grid.patch_size, grid.patch_size, 1):
        raise ConfigError(f"model input {model.input_shape} does not match patch size {grid.patch_size}")
    if len(grid) == 0:
        return ProbabilityMap(frame.frame_id, grid.patch_size, ())
    patches = extract_patches(frame.raw, grid)
    x = normalize_raw(patches)[..., None]
    probs = np.concatenate([infer(model, x[i:i + INFER_BATCH]) for i in range(0, len(x), INFER_BATCH)])
    col = CLASS_INDEX[LABEL_CARCINOMA]
    entries = tuple((int(ox), int(oy), float(p)) for (ox, oy), p in zip(grid.origins, probs[:, col]))
    return ProbabilityMap(frame.frame_id, grid.patch_size, entries)


def fuse(pmap: ProbabilityMap) -> ImageProbability:
    """Mean patch carcinoma probability; the frame-level answer."""
    if len(pmap) == 0:
        raise NonDiagnosticFrameError(
            f"frame {pmap.frame_id or '<unnamed>'}: no patch fits the field of view; cannot classify"
        )
    return ImageProbability(float(pmap.probabilities().mean()), METHOD_NAME)


def classify_frame(model: Network, frame: Frame, config: PpfConfig) -> ImageProbability:
    grid = extract_patch_grid(frame_mask(frame), config.patch_size, config.stride)
    return fuse(classify_patches(model, frame, grid))


def map_to_grid(pmap: ProbabilityMap, height: int, width: int) -> np.ndarray:
    """Rasterize a probability map to frame resolution.

    Overlapping patches average; uncovered pixels are NaN so a renderer
    can leave them blank rather than invent a probability.
    """
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    p = pmap.patch_size
    for ox, oy, prob in pmap.entries:
        total[oy:oy + p, ox:ox + p] += prob
        count[oy:oy + p, ox:ox + p] += 1
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def save_probability_map_tsv(path, pmap: ProbabilityMap) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# frame={pmap.frame_id} patch_size={pmap.patch_size}\n")
        fh.write("x\ty\tp_carcinoma\n")
        for ox, oy, prob in pmap.entries:
            fh.write(f"{ox}\t{oy}\t{prob:.6f}\n")


# ---------------------------------------------------------------------------
# training


def augment_rotations(patch: np.ndarray, rng: np.random.Generator):
    """One patch into three: itself plus two distinct quarter-turn rotations.

    Quarter turns are lossless (pure pixel permutations), so the tripled
    dataset adds no interpolation artifacts.
    """
    turns = rng.choice(np.array([1, 2, 3]), size=2, replace=False)
    return [patch, np.rot90(patch, int(turns[0])), np.rot90(patch, int(turns[1]))]


def build_patch_dataset(frames, config: PpfConfig, rng: np.random.Generator):
    """Extract, label, and 3-fold augment all training patches once.

    Returns ``(x, y)``: float32 inputs (N, p, p, 1) and int64 class
    indices. Frames where no patch fits are skipped with a log line.
    """
    xs, ys = [], []
    skipped = 0
    for frame in frames:
        grid = extract_patch_grid(frame_mask(frame), config.patch_size, config.stride)
        if len(grid) == 0:
            skipped += 1
            logger.warning("frame %s: no patch fits the field of view; excluded from training", frame.frame_id)
            continue
        label = CLASS_INDEX[frame.label]
        for patch in extract_patches(frame.raw, grid):
            for aug in augment_rotations(patch, rng):
                xs.append(normalize_raw(aug)[..., None])
                ys.append(label)
    if not xs:
        raise ConfigError("no usable training patches")
    if skipped:
        logger.info("%d frames contributed no patches", skipped)
    return np.stack(xs), np.array(ys, dtype=np.int64)


@dataclass(frozen=True)
class PpfTrainLog:
    epochs: tuple              # per-epoch {"epoch", "train_loss"}
    n_patches: int
    class_counts: dict

    def to_dict(self) -> dict:
        return {
            "epochs": [dict(e) for e in self.epochs],
            "n_patches": self.n_patches,
            "class_counts": {str(k): int(v) for k, v in self.class_counts.items()},
        }


def train_ppf(frames, config: PpfConfig, rng: np.random.Generator):
    """Train the patch net for exactly ``config.epochs`` epochs (no early stop).

    Each epoch undersamples the majority class afresh so every epoch is
    balanced, then sweeps the subset in shuffled minibatches under
    cross-entropy with ADAM. Returns ``(model, PpfTrainLog)``;
    reproducible to the bit from the RNG state.
    """
    frames = list(frames)
    if not frames:
        raise ConfigError("no training frames")
    if len({f.label for f in frames}) < 2:
        raise ConfigError("training frames contain a single class; cannot supervise two-class training")
    x, y = build_patch_dataset(frames, config, rng)
    by_class = {c: np.flatnonzero(y == c) for c in np.unique(y)}
    n_minority = min(len(v) for v in by_class.values())
    if n_minority == 0:
        raise ConfigError("one class contributed no patches")
    model = build_patch_net(config, rng)
    opt = Adam(model.params, lr=config.lr)
    history = []
    for epoch in range(1, config.epochs + 1):
        chosen = np.concatenate([rng.choice(idxs, size=n_minority, replace=False) for c, idxs in sorted(by_class.items())])
        chosen = chosen[rng.permutation(len(chosen))]
        losses = []
        for start in range(0, len(chosen), config.batch_size):
            sel = chosen[start:start + config.batch_size]
            probs, caches = forward(model, x[sel])
            loss, dlogits = cross_entropy_loss(probs, y[sel])
            grads, _ = backward_from_logits(model, caches, dlogits)
            opt.step(model.params, grads)
            losses.append(loss)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
        logger.info("ppf epoch %d/%d: train loss %.4f", epoch, config.epochs, history[-1]["train_loss"])
    counts = {int(c): int(len(v)) for c, v in by_class.items()}
    return model, PpfTrainLog(tuple(history), int(len(y)), counts)


def save_ppf_model(path, model: Network, config: PpfConfig, seed=None, step: int = 0, extra: dict | None = None) -> None:
    meta = dict(extra or {})
    meta["method"] = METHOD_NAME
    meta["config"] = config.to_dict()
    save_network(path, model, seed=seed, step=step, extra=meta)


def load_ppf_model(path):
    """Returns ``(model, config, meta)``."""
    model, meta = load_network(path)
    if meta.get("method") != METHOD_NAME:
        raise ConfigError(f"checkpoint is not a patch model: method={meta.get('method')!r}")
    cfg = dict(meta["config"])
    cfg["conv_channels"] = tuple(cfg["conv_channels"])
    return model, PpfConfig(**cfg), meta
