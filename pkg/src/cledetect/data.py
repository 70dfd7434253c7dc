"""Dataset manifests, the 16-bit frame codec, and the synthetic generator.

The generator produces two domains:

* ``synthetic-A`` (oral-cavity-like): three sites whose median intensity
  targets span dim to medium; carcinoma frames share their site's median
  target, so per-frame brightness carries no class signal and a
  classifier must use texture (cell lattice vs disordered noise with
  bright streaks).
* ``synthetic-B`` (vocal-fold-like): one bright site whose normal frames
  sit far above the carcinoma target, so brightness alone separates the
  classes. A model trained here and applied to domain A marks the dim
  normal sites as positives — the cross-domain precision drop the
  harness is expected to surface.

Every frame's bytes are a pure function of (spec, domain, patient,
frame) via dedicated RNG streams.
"""

from __future__ import annotations

import dataclasses
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .fov import compute_fov_mask, frame_mask, in_fov_values, resize_bilinear
from .frame import (
    LABEL_CARCINOMA,
    LABEL_NORMAL,
    LABELS,
    SITE_ALVEOLAR_RIDGE,
    SITE_HARD_PALATE,
    SITE_INNER_LABIUM,
    SITE_VOCAL_FOLD,
    SITES,
    Frame,
)

log = logging.getLogger("cledetect")

DOMAIN_OC = "OC"
DOMAIN_VC = "VC"
DOMAIN_SYNTH_A = "synthetic-A"
DOMAIN_SYNTH_B = "synthetic-B"
DOMAINS = (DOMAIN_OC, DOMAIN_VC, DOMAIN_SYNTH_A, DOMAIN_SYNTH_B)

# Experiment designs are phrased in terms of the two clinical collections;
# the synthetic domains stand in for them.
DOMAIN_SIDE = {
    DOMAIN_OC: DOMAIN_OC,
    DOMAIN_SYNTH_A: DOMAIN_OC,
    DOMAIN_VC: DOMAIN_VC,
    DOMAIN_SYNTH_B: DOMAIN_VC,
}

MANIFEST_VERSION = 1
MANIFEST_HEADER = f"# cle-manifest v{MANIFEST_VERSION}"
MANIFEST_COLUMNS = ("path", "patient_id", "sequence_id", "label", "site", "domain", "fov_radius")

MAX_PGM_DIM = 4096


@dataclass(frozen=True)
class ManifestRecord:
    path: str  # relative to the dataset root, '/'-separated
    patient_id: str
    sequence_id: str
    label: str
    site: str
    domain: str
    fov_radius: float


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: tuple

    def patients(self, domain: str | None = None):
        seen = []
        for r in self.records:
            if domain is not None and r.domain != domain:
                continue
            if r.patient_id not in seen:
                seen.append(r.patient_id)
        return sorted(seen)

    def domains(self):
        return sorted({r.domain for r in self.records})

    def counts(self) -> dict:
        out: dict = {}
        for r in self.records:
            key = (r.domain, r.patient_id, r.label)
            out[key] = out.get(key, 0) + 1
        return out


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [MANIFEST_HEADER, "# " + "\t".join(MANIFEST_COLUMNS)]
    for r in manifest.records:
        lines.append(
            "\t".join([r.path, r.patient_id, r.sequence_id, r.label, r.site, r.domain, repr(float(r.fov_radius))])
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; errors cite the offending line."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"manifest {path} does not exist")
    root = path.parent
    lines = path.read_text().splitlines()
    if not lines or not re.fullmatch(r"# cle-manifest v(\d+)", lines[0]):
        raise DataFormatError(f"{path}:1: missing 'cle-manifest v<N>' header")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != MANIFEST_VERSION:
        raise DataFormatError(f"{path}:1: unsupported manifest version {version}")
    records = []
    seen_paths = set()
    patient_domains: dict = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise DataFormatError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} tab-separated fields, got {len(parts)}")
        rel, patient, sequence, label, site, domain, radius = parts
        if rel in seen_paths:
            raise DataFormatError(f"{path}:{lineno}: duplicate path {rel!r}")
        seen_paths.add(rel)
        if label not in LABELS:
            raise DataFormatError(f"{path}:{lineno}: unknown label {label!r}")
        if site not in SITES:
            raise DataFormatError(f"{path}:{lineno}: unknown site {site!r}")
        if domain not in DOMAINS:
            raise DataFormatError(f"{path}:{lineno}: unknown domain {domain!r}")
        if domain != patient_domains.setdefault(patient, domain):
            raise DataFormatError(f"{path}:{lineno}: patient {patient} appears in both {patient_domains[patient]} and {domain}")
        try:
            r = float(radius)
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: bad fov_radius {radius!r}") from None
        if not (root / rel).is_file():
            raise DataFormatError(f"{path}:{lineno}: referenced file {rel} does not exist")
        records.append(ManifestRecord(rel, patient, sequence, label, site, domain, r))
    manifest = DatasetManifest(root, tuple(records))
    if not records:
        warnings.warn(f"manifest {path} lists no frames")
    for (domain, patient, label), n in sorted(manifest.counts().items()):
        log.info("manifest %s: %s/%s %s x%d", path.name, domain, patient, label, n)
    return manifest


# ---------------------------------------------------------------------------
# 16-bit PGM codec


def write_pgm(path, raw: np.ndarray) -> None:
    """Binary PGM, maxval 65535, big-endian samples per the format."""
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise DataFormatError(f"PGM writer needs a 2-D uint16 array, got {raw.dtype} {raw.shape}")
    h, w = raw.shape
    if w > MAX_PGM_DIM or h > MAX_PGM_DIM:
        raise DataFormatError(f"image {w}x{h} exceeds the {MAX_PGM_DIM} pixel limit")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(raw.astype(">u2").tobytes())


def _pgm_tokens(data: bytes):
    """Header tokens of a binary PGM, honoring '#' comments; yields
    (token, offset-after-token)."""
    i = 0
    while True:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            return
        yield data[start:i].decode("ascii", "replace"), i


def read_pgm(path):
    """Decode a binary PGM; returns (uint16 array, widened_from_8bit flag).

    maxval 255 inputs are widened by x257 so white maps to white.
    """
    path = Path(path)
    data = path.read_bytes()
    toks = _pgm_tokens(data)
    try:
        magic, _ = next(toks)
        if magic != "P5":
            raise DataFormatError(f"{path}: not a binary PGM (magic {magic!r})")
        (ws, _), (hs, _), (ms, end) = next(toks), next(toks), next(toks)
        w, h, maxval = int(ws), int(hs), int(ms)
    except (StopIteration, ValueError) as e:
        raise DataFormatError(f"{path}: malformed PGM header") from e
    if w < 1 or h < 1 or w > MAX_PGM_DIM or h > MAX_PGM_DIM:
        raise DataFormatError(f"{path}: implausible dimensions {w}x{h}")
    payload = data[end + 1 :]  # single whitespace byte after maxval
    if maxval == 65535:
        need = w * h * 2
        if len(payload) != need:
            raise DataFormatError(f"{path}: payload is {len(payload)} bytes, expected {need}")
        return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16), False
    if maxval == 255:
        need = w * h
        if len(payload) != need:
            raise DataFormatError(f"{path}: payload is {len(payload)} bytes, expected {need}")
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.uint16) * 257
        return raw, True
    raise DataFormatError(f"{path}: unsupported maxval {maxval} (need 255 or 65535)")


UPSCALED_META_KEY = "widened_from_8bit"


def export_png(frame: Frame, path) -> None:
    """8-bit PNG for viewing: min-max compress the in-circle value range.

    Out-of-circle pixels render black; a constant frame renders black.
    """
    from PIL import Image

    vals = in_fov_values(frame)
    lo, hi = int(vals.min()), int(vals.max())
    img = np.zeros(frame.raw.shape, dtype=np.uint8)
    if hi > lo:
        inside = frame_mask(frame).grid == 1
        scaled = (frame.raw[inside].astype(np.float64) - lo) * (255.0 / (hi - lo))
        img[inside] = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


# ---------------------------------------------------------------------------
# dataset access


class Dataset:
    """Manifest plus frame loading. Frames are decoded on demand and cached;
    the default synthetic datasets fit in memory comfortably."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict = {}

    @classmethod
    def open(cls, manifest_path) -> "Dataset":
        return cls(load_manifest(manifest_path))

    def load_record(self, record: ManifestRecord) -> Frame:
        if record.path not in self._cache:
            raw, widened = read_pgm(self.manifest.root / record.path)
            meta = {"path": record.path}
            if widened:
                meta[UPSCALED_META_KEY] = True
            self._cache[record.path] = Frame(
                frame_id=Path(record.path).stem,
                raw=raw,
                fov_radius=record.fov_radius,
                patient_id=record.patient_id,
                sequence_id=record.sequence_id,
                label=record.label,
                site=record.site,
                domain=record.domain,
                meta=meta,
            )
        return self._cache[record.path]

    def frames(self, domain=None, patient=None, label=None, site=None):
        out = []
        for r in self.manifest.records:
            if domain is not None and r.domain != domain:
                continue
            if patient is not None and r.patient_id != patient:
                continue
            if label is not None and r.label != label:
                continue
            if site is not None and r.site != site:
                continue
            out.append(self.load_record(r))
        return out

    def patients(self, domain=None):
        return self.manifest.patients(domain)

    def domains(self):
        return self.manifest.domains()


# ---------------------------------------------------------------------------
# synthetic generator


def _default_site_medians():
    return {
        SITE_HARD_PALATE: 50.0,
        SITE_INNER_LABIUM: 120.0,
        SITE_ALVEOLAR_RIDGE: 400.0,
        SITE_VOCAL_FOLD: 2200.0,
    }


def _default_carcinoma_medians():
    # domain A: tracks the site (no brightness cue); domain B: well below
    # the bright normal site (brightness cue available)
    return {DOMAIN_SYNTH_A: None, DOMAIN_SYNTH_B: 900.0}


def _default_domain_sites():
    return {
        DOMAIN_SYNTH_A: (SITE_HARD_PALATE, SITE_INNER_LABIUM, SITE_ALVEOLAR_RIDGE),
        DOMAIN_SYNTH_B: (SITE_VOCAL_FOLD,),
    }


def _default_cell_spacing():
    return {DOMAIN_SYNTH_A: 9.0, DOMAIN_SYNTH_B: 14.0}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the two-domain synthetic dataset.

    The same spec always produces byte-identical files. ``normal_only_patient``
    emulates a patient for whom only clinically normal frames exist.
    """

    seed: int = 0
    size: int = 128
    fov_radius: float = 60.0
    patients_per_domain: int = 4
    frames_per_patient: int = 10
    normal_only_patient: str | None = "B4"
    site_medians: dict = field(default_factory=_default_site_medians)
    carcinoma_medians: dict = field(default_factory=_default_carcinoma_medians)
    domain_sites: dict = field(default_factory=_default_domain_sites)
    cell_spacing: dict = field(default_factory=_default_cell_spacing)
    cell_jitter: float = 0.8
    border_width_frac: float = 0.18
    noise_octaves: int = 3
    streak_count: tuple = (3, 7)
    streak_gain: float = 1.5
    median_jitter_sigma: float = 0.08

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.patients_per_domain < 3:
            raise ConfigError("leave-one-patient-out needs at least 3 patients per domain")
        if self.frames_per_patient < 1:
            raise ConfigError("frames_per_patient must be >= 1")
        if self.size < 16 or self.fov_radius <= 0 or self.fov_radius > self.size / 2:
            raise ConfigError(f"invalid geometry: size {self.size}, radius {self.fov_radius}")


def _cell_lattice(rng, size, spacing, jitter, border_frac):
    """Jittered cell mosaic in [0, 1]: dim polygonal interiors, bright borders."""
    n = int(np.ceil(size / spacing)) + 3
    gx, gy = np.meshgrid(np.arange(-1, n - 1), np.arange(-1, n - 1))
    px = (gx + 0.5 + jitter * rng.uniform(-0.5, 0.5, gx.shape)) * spacing
    py = (gy + 0.5 + jitter * rng.uniform(-0.5, 0.5, gy.shape)) * spacing
    jj, ii = np.mgrid[0:size, 0:size].astype(np.float64)
    cell_x = np.floor(ii / spacing).astype(np.int64)
    cell_y = np.floor(jj / spacing).astype(np.int64)
    d2 = np.full((size, size, 9), np.inf)
    for k, (oy, ox) in enumerate([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)]):
        cx = np.clip(cell_x + ox + 1, 0, n - 1)
        cy = np.clip(cell_y + oy + 1, 0, n - 1)
        d2[:, :, k] = (px[cy, cx] - ii) ** 2 + (py[cy, cx] - jj) ** 2
    d2.sort(axis=2)
    f1, f2 = np.sqrt(d2[:, :, 0]), np.sqrt(d2[:, :, 1])
    border = np.exp(-(((f2 - f1) / (border_frac * spacing)) ** 2))
    tex = 0.3 + 0.7 * border
    tex *= 1.0 + 0.04 * rng.standard_normal((size, size))
    return np.clip(tex, 0.0, None)


def _value_noise(rng, size, octaves):
    """Multi-octave value noise in roughly [0, 1]."""
    total = np.zeros((size, size))
    norm = 0.0
    base = 8
    for o in range(octaves):
        g = base * (2**o)
        weight = 0.5**o
        coarse = rng.uniform(0.0, 1.0, (min(g, size), min(g, size)))
        total += weight * resize_bilinear(coarse, size, size)
        norm += weight
    return total / norm


def _vessel_streaks(rng, size, fov_radius, n_range):
    """Random-walk bright streaks stamped as Gaussian blobs; canvas in [0, ~1]."""
    canvas = np.zeros((size, size))
    n = int(rng.integers(n_range[0], n_range[1]))
    c = size / 2.0
    stamp_r = 4
    yy, xx = np.mgrid[-stamp_r : stamp_r + 1, -stamp_r : stamp_r + 1].astype(np.float64)
    for _ in range(n):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0, 0.6 * fov_radius)
        x = c + rad * np.cos(ang)
        y = c + rad * np.sin(ang)
        heading = rng.uniform(0, 2 * np.pi)
        sigma = rng.uniform(1.2, 2.2)
        stamp = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
        for _ in range(int(rng.integers(20, 40))):
            heading += rng.normal(0, 0.3)
            x += 2.0 * np.cos(heading)
            y += 2.0 * np.sin(heading)
            ix, iy = int(round(x)), int(round(y))
            if ix < stamp_r or iy < stamp_r or ix >= size - stamp_r or iy >= size - stamp_r:
                break
            canvas[iy - stamp_r : iy + stamp_r + 1, ix - stamp_r : ix + stamp_r + 1] = np.maximum(
                canvas[iy - stamp_r : iy + stamp_r + 1, ix - stamp_r : ix + stamp_r + 1], stamp
            )
    return canvas


def _scale_to_median(tex, inside, target):
    med = float(np.median(tex[inside]))
    if med <= 0:
        raise ConfigError("texture median is zero; cannot hit a positive target")
    return tex * (target / med)


def synth_frame(spec: SynthSpec, domain: str, patient_index: int, frame_index: int) -> Frame:
    """One deterministic synthetic frame; pure function of its arguments."""
    spec.validate()
    if domain not in (DOMAIN_SYNTH_A, DOMAIN_SYNTH_B):
        raise ConfigError(f"generator domains are {DOMAIN_SYNTH_A}/{DOMAIN_SYNTH_B}, got {domain}")
    domain_index = 0 if domain == DOMAIN_SYNTH_A else 1
    patient = f"{'A' if domain_index == 0 else 'B'}{patient_index + 1}"
    sites = spec.domain_sites[domain]
    site = sites[frame_index % len(sites)]
    label = LABEL_NORMAL if (patient == spec.normal_only_patient or frame_index % 2 == 0) else LABEL_CARCINOMA
    rng = np.random.default_rng([spec.seed, domain_index, patient_index, frame_index])
    inside = compute_fov_mask(spec.size, spec.size, spec.fov_radius).grid == 1
    if label == LABEL_NORMAL:
        tex = _cell_lattice(rng, spec.size, spec.cell_spacing[domain], spec.cell_jitter, spec.border_width_frac)
        target = spec.site_medians[site]
    else:
        tex = 0.25 + 0.5 * _value_noise(rng, spec.size, spec.noise_octaves)
        tex = tex + spec.streak_gain * _vessel_streaks(rng, spec.size, spec.fov_radius, spec.streak_count)
        configured = spec.carcinoma_medians[domain]
        target = spec.site_medians[site] if configured is None else configured
    target = target * float(np.exp(rng.normal(0.0, spec.median_jitter_sigma)))
    tex = _scale_to_median(tex, inside, target)
    raw = np.zeros((spec.size, spec.size), dtype=np.uint16)
    raw[inside] = np.clip(np.rint(tex[inside]), 0, 65535).astype(np.uint16)
    return Frame(
        frame_id=f"{patient}-{frame_index:03d}",
        raw=raw,
        fov_radius=spec.fov_radius,
        patient_id=patient,
        sequence_id=f"{patient}-{site}",
        label=label,
        site=site,
        domain=domain,
        meta={},
    )


def generate_synthetic(spec: SynthSpec, out_dir) -> Path:
    """Write the dataset and its manifest; returns the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.tsv"
    if manifest_path.exists():
        raise DataFormatError(f"{manifest_path} already exists; refusing to overwrite a dataset")
    records = []
    for domain in (DOMAIN_SYNTH_A, DOMAIN_SYNTH_B):
        for p in range(spec.patients_per_domain):
            for k in range(spec.frames_per_patient):
                frame = synth_frame(spec, domain, p, k)
                rel = f"frames/{domain}/{frame.patient_id}/{frame.frame_id}.pgm"
                dest = out_dir / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                write_pgm(dest, frame.raw)
                records.append(
                    ManifestRecord(rel, frame.patient_id, frame.sequence_id, frame.label, frame.site, domain, spec.fov_radius)
                )
    manifest = DatasetManifest(out_dir, tuple(records))
    save_manifest(manifest, manifest_path)
    return manifest_path
