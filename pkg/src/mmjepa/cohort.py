"""Synthetic multimodal cohort generator.

Four hidden fair coin flips (g1, g2, d1, d2) drive everything a subject
exhibits: g1 sets the initial nodule size, g2 the growth rate, and (d1, d2)
are mixed through a sparse binary matrix into a molecular-expression vector.
The diagnostic label is a fixed deterministic function of the four bits.

Complete subjects carry a 5-frame timestamped image series plus a rank-2
expression signal; incomplete subjects fix g2 = d2 = 0, carry a single
baseline frame, and their expression depends on d1 only (the centered d2
entry is zeroed, the fill-in convention for a missing variable).

Every subject is a pure function of (cohort_seed, subject_index, spec,
mixing matrix): subject i draws from `SeedSequence(cohort_seed,
spawn_key=(i,))` in a fixed order, so regenerating any one subject
reproduces the full-run output bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MISSING = None  # sentinel for an absent expression vector

LABEL_POSITIVE_PROFILES = {(1, 0, 1, 0), (0, 1, 0, 1)}


class CohortFormatError(ValueError):
    """Malformed dataset or image file on disk."""


@dataclass(frozen=True)
class CausalProfile:
    g1: int
    g2: int
    d1: int
    d2: int

    def __post_init__(self):
        for name in ("g1", "g2", "d1", "d2"):
            v = getattr(self, name)
            if v not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {v!r}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.g1, self.g2, self.d1, self.d2)


@dataclass(frozen=True)
class NoduleParams:
    s: float  # initial size, image-space units
    g: float  # growth rate per unit time

    def __post_init__(self):
        if not (self.s > 0 and self.g > 0):
            raise ValueError(f"nodule params must be positive, got s={self.s}, g={self.g}")


@dataclass
class Subject:
    profile: CausalProfile
    frames: list[np.ndarray]  # each H x W float in [0, 1]
    timestamps: list[float]  # timestamps[0] == 0, strictly increasing
    expression: np.ndarray | None  # length-m vector, or MISSING
    label: int
    complete: bool
    radius_clipped: bool = False

    def n_tokens(self) -> int:
        return len(self.frames) + (0 if self.expression is None else 1)


@dataclass(frozen=True)
class MixingMatrix:
    a: np.ndarray  # (m, 2) binary
    seed: int

    def checksum(self) -> str:
        return hashlib.sha256(self.a.astype(np.uint8).tobytes()).hexdigest()


@dataclass(frozen=True)
class DatasetSpec:
    """One dataset of the experiment roster.

    `kind` fixes structural constraints: S is incomplete and labeled, U is
    complete and unlabeled, F and T are complete and labeled. `name` is the
    roster label (e.g. "S_test" for a held-out set with S's structure).
    """

    name: str
    kind: str  # one of U, S, F, T
    n: int
    complete: bool
    labeled: bool
    beta: float = 0.01
    m: int = 128
    image_size: int = 32
    cohort_seed: int = 0
    n_frames: int = 5
    t_max: float = 2.0
    p_snp: float = 0.02
    noise_sigma: float = 0.5
    expr_missing_rate: float = 0.0
    background: str = "procedural"  # or a CIFAR-10 binary batch path

    def __post_init__(self):
        if self.kind not in ("U", "S", "F", "T"):
            raise ValueError(f"kind must be one of U/S/F/T, got {self.kind!r}")
        if self.kind == "S" and (self.complete or not self.labeled):
            raise ValueError("kind S requires complete=False, labeled=True")
        if self.kind == "U" and self.labeled:
            raise ValueError("kind U requires labeled=False")
        if self.kind in ("F", "T") and not (self.complete and self.labeled):
            raise ValueError(f"kind {self.kind} requires complete=True, labeled=True")
        if not (0 < self.beta <= 1):
            raise ValueError("beta must lie in (0, 1]")
        if self.n < 1 or self.m < 1 or self.image_size < 8:
            raise ValueError("n, m must be positive; image_size >= 8")


# ---------------------------------------------------------------------------
# sampling primitives
# ---------------------------------------------------------------------------

def sample_profile(rng: np.random.Generator, complete: bool) -> CausalProfile:
    """Four fair Bernoulli draws; incomplete regime pins g2 = d2 = 0.

    Draws all four bits either way so the stream position does not depend
    on `complete`.
    """
    bits = rng.integers(0, 2, size=4)
    if complete:
        return CausalProfile(int(bits[0]), int(bits[1]), int(bits[2]), int(bits[3]))
    return CausalProfile(int(bits[0]), 0, int(bits[2]), 0)


_S_MEANS = (1.0, 3.0)
_G_MEANS = (0.5, 1.5)
_SG_SIGMA = 0.06


def sample_nodule_params(profile: CausalProfile, rng: np.random.Generator) -> NoduleParams:
    """Initial size from g1, growth rate from g2; non-positive draws resampled."""
    s = rng.normal(_S_MEANS[profile.g1], _SG_SIGMA)
    while s <= 0:
        s = rng.normal(_S_MEANS[profile.g1], _SG_SIGMA)
    g = rng.normal(_G_MEANS[profile.g2], _SG_SIGMA)
    while g <= 0:
        g = rng.normal(_G_MEANS[profile.g2], _SG_SIGMA)
    return NoduleParams(float(s), float(g))


def label(profile: CausalProfile) -> int:
    return 1 if profile.as_tuple() in LABEL_POSITIVE_PROFILES else 0


def sample_mixing_matrix(m: int, seed: int, density: float = 0.01) -> MixingMatrix:
    """Sparse binary (m, 2) mixing matrix with Bernoulli(density) entries."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    a = (rng.random((m, 2)) < density).astype(np.uint8)
    return MixingMatrix(a, seed)


def usable_mixing_matrix(m: int, seed: int, density: float = 0.01, max_tries: int = 1000) -> MixingMatrix:
    """First seed >= `seed` whose matrix has a nonzero entry in both columns.

    At density 0.01 and m = 128 a single draw leaves a column empty with
    probability ~0.28 per column; an empty column would erase that variable
    from every expression vector, so dataset generation retries
    deterministically rather than shipping a blind cohort.
    """
    for k in range(max_tries):
        mix = sample_mixing_matrix(m, seed + k, density)
        if mix.a[:, 0].any() and mix.a[:, 1].any():
            return mix
    raise RuntimeError(f"no usable mixing matrix in {max_tries} tries from seed {seed}")


def gen_expression(
    profile: CausalProfile,
    mixing: MixingMatrix,
    beta: float,
    rng: np.random.Generator,
    complete: bool = True,
    noise_sigma: float = 0.5,
) -> np.ndarray:
    """beta * A (d - 0.5) + (1 - beta) * eps, eps ~ N(0, noise_sigma).

    In the incomplete regime the centered d2 entry is the 0 fill-in, so the
    signal term depends on d1 alone (rank 1 across a cohort).
    """
    if not (0 < beta <= 1):
        raise ValueError("beta must lie in (0, 1]")
    d = np.array([profile.d1 - 0.5, (profile.d2 - 0.5) if complete else 0.0])
    signal = mixing.a.astype(np.float64) @ d
    eps = rng.normal(0.0, noise_sigma, size=mixing.a.shape[0]) if noise_sigma > 0 else 0.0
    return beta * signal + (1.0 - beta) * eps


# ---------------------------------------------------------------------------
# image rendering
# ---------------------------------------------------------------------------

def procedural_background(rng: np.random.Generator, image_size: int) -> np.ndarray:
    """Gaussian-filtered white noise, rescaled into [0, 0.35].

    The smoothing scale (sigma 4) sits well above the lesion scale and the
    peak level well below the lesion's 0.9, so background texture cannot
    mimic a nodule; it still gives every subject a unique anatomy-like
    backdrop.
    """
    noise = rng.normal(size=(image_size, image_size))
    sm = gaussian_filter(noise, sigma=4.0, mode="wrap")
    lo, hi = sm.min(), sm.max()
    if hi - lo < 1e-12:
        return np.zeros((image_size, image_size))
    return 0.35 * (sm - lo) / (hi - lo)


def _gaussian_blob(image_size, center, radius, ecc, angle, peak=0.9):
    """Anisotropic Gaussian lesion.

    The size parameter sets the geometric-mean sigma directly, so the
    visible extent is roughly two sigma; sigma_major/sigma_minor = ecc.
    """
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    dy = yy - center[0]
    dx = xx - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    base = radius
    s_major = base * np.sqrt(ecc)
    s_minor = base / np.sqrt(ecc)
    q = (u / s_major) ** 2 + (v / s_minor) ** 2
    return peak * np.exp(-0.5 * q)


def render_series(
    params: NoduleParams,
    profile: CausalProfile,
    background_source,
    rng: np.random.Generator,
    n_frames: int = 5,
    image_size: int = 32,
    t_max: float = 2.0,
    p_snp: float = 0.02,
) -> tuple[list[np.ndarray], list[float], bool]:
    """Timestamped nodule series over one background.

    Frame at time t shows a lesion of radius s + g*t (clipped to the image
    half-width; clipping is reported in the returned flag). One lesion
    morphology (eccentricity, orientation) and one subject-level transform
    (translation within +/-4 px, rotation in [0, 2pi)) apply to every frame;
    growth is the only signal that varies across frames. Salt-and-pepper
    noise hits each frame independently.
    """
    # fixed draw order: timestamps, morphology, transform, background, noise
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if n_frames == 1:
        timestamps = [0.0]
    else:
        extra = t_max * (1.0 - rng.random(n_frames - 1))  # uniform in (0, t_max]
        extra = np.sort(extra)
        while len(np.unique(extra)) != n_frames - 1 or extra[0] == 0.0:
            extra = np.sort(t_max * (1.0 - rng.random(n_frames - 1)))
        timestamps = [0.0] + [float(t) for t in extra]

    ecc = rng.uniform(1.0, 1.5)
    orientation = rng.uniform(0.0, 2.0 * np.pi)
    offset = rng.uniform(-4.0, 4.0, size=2)
    subj_rot = rng.uniform(0.0, 2.0 * np.pi)

    ca, sa = np.cos(subj_rot), np.sin(subj_rot)
    rotated_offset = np.array([ca * offset[0] - sa * offset[1], sa * offset[0] + ca * offset[1]])
    center = (image_size - 1) / 2.0 + rotated_offset
    angle = orientation + subj_rot

    background = background_source(rng, image_size)

    half_width = image_size / 2.0
    clipped = False
    frames = []
    for t in timestamps:
        radius = params.s + params.g * t
        if radius > half_width:
            radius = half_width
            clipped = True
        blob = _gaussian_blob(image_size, center, radius, ecc, angle)
        frame = np.maximum(background, blob)
        if p_snp > 0:
            u = rng.random((image_size, image_size))
            frame = np.where(u < p_snp / 2, 0.0, frame)
            frame = np.where((u >= p_snp / 2) & (u < p_snp), 1.0, frame)
        frames.append(np.clip(frame, 0.0, 1.0))
    return frames, timestamps, clipped


def make_background_source(spec: DatasetSpec):
    if spec.background == "procedural":
        return procedural_background
    return load_cifar_backgrounds(spec.background)


def load_cifar_backgrounds(path) -> "object":
    """Background source backed by a CIFAR-10 binary batch file.

    Records are 3073 bytes: 1 label byte then 1024 R + 1024 G + 1024 B
    values, row-major 32 x 32. Images come out grayscale in [0, 1] via the
    BT.601 luma weights.
    """
    raw = Path(path).read_bytes()
    if len(raw) % 3073 != 0:
        offset = (len(raw) // 3073) * 3073
        raise CohortFormatError(
            f"{path}: length {len(raw)} is not a multiple of 3073; trailing partial record at byte {offset}"
        )
    n = len(raw) // 3073
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, 3073)
    labels = buf[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise CohortFormatError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    pixels = buf[:, 1:].reshape(n, 3, 32, 32).astype(np.float64)
    gray = (0.299 * pixels[:, 0] + 0.587 * pixels[:, 1] + 0.114 * pixels[:, 2]) / 255.0

    def source(rng: np.random.Generator, image_size: int) -> np.ndarray:
        img = gray[rng.integers(0, n)]
        if image_size == 32:
            return img.copy()
        if image_size < 32:
            top = (32 - image_size) // 2
            return img[top : top + image_size, top : top + image_size].copy()
        raise CohortFormatError(f"CIFAR backgrounds are 32x32; cannot serve image_size={image_size}")

    source.n_records = n
    return source


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def subject_stream(cohort_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cohort_seed, spawn_key=(index,)))


def make_subject(spec: DatasetSpec, mixing: MixingMatrix, index: int, background_source=None) -> Subject:
    """Subject `index` of the dataset, independent of every other subject."""
    if background_source is None:
        background_source = make_background_source(spec)
    rng = subject_stream(spec.cohort_seed, index)
    profile = sample_profile(rng, spec.complete)
    params = sample_nodule_params(profile, rng)
    n_frames = spec.n_frames if spec.complete else 1
    frames, timestamps, clipped = render_series(
        params,
        profile,
        background_source,
        rng,
        n_frames=n_frames,
        image_size=spec.image_size,
        t_max=spec.t_max,
        p_snp=spec.p_snp,
    )
    # expression draws come last so the image stream is unaffected by m
    drop_roll = rng.random()
    expression = gen_expression(
        profile, mixing, spec.beta, rng, complete=spec.complete, noise_sigma=spec.noise_sigma
    )
    if spec.expr_missing_rate > 0 and drop_roll < spec.expr_missing_rate:
        expression = MISSING
    return Subject(
        profile=profile,
        frames=frames,
        timestamps=timestamps,
        expression=expression,
        label=label(profile),
        complete=spec.complete,
        radius_clipped=clipped,
    )


@dataclass
class Dataset:
    spec: DatasetSpec
    subjects: list[Subject]
    mixing_checksum: str

    def __len__(self) -> int:
        return len(self.subjects)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=np.int64)

    def prevalence(self) -> float:
        return float(self.labels().mean())


def generate_dataset(spec: DatasetSpec, mixing: MixingMatrix) -> Dataset:
    source = make_background_source(spec)
    subjects = [make_subject(spec, mixing, i, source) for i in range(spec.n)]
    return Dataset(spec, subjects, mixing.checksum())


# ---------------------------------------------------------------------------
# serialization: manifest.json + subjects.bin
# ---------------------------------------------------------------------------

_SPEC_FIELDS = (
    "name",
    "kind",
    "n",
    "complete",
    "labeled",
    "beta",
    "m",
    "image_size",
    "cohort_seed",
    "n_frames",
    "t_max",
    "p_snp",
    "noise_sigma",
    "expr_missing_rate",
    "background",
)

_UNLABELED_BYTE = 255


def _spec_to_dict(spec: DatasetSpec) -> dict:
    return {k: getattr(spec, k) for k in _SPEC_FIELDS}


def spec_from_dict(d: dict) -> DatasetSpec:
    return DatasetSpec(**{k: d[k] for k in _SPEC_FIELDS})


def _subject_record(subject: Subject, labeled: bool) -> bytes:
    parts = [
        bytes([1 if subject.complete else 0]),
        bytes([subject.label if labeled else _UNLABELED_BYTE]),
        bytes([len(subject.frames)]),
    ]
    parts.append(np.asarray(subject.timestamps, dtype="<f4").tobytes())
    for frame in subject.frames:
        parts.append(np.ascontiguousarray(frame, dtype="<f4").tobytes())
    if subject.expression is None:
        parts.append(bytes([0]))
    else:
        parts.append(bytes([1]))
        parts.append(np.asarray(subject.expression, dtype="<f4").tobytes())
    return b"".join(parts)


def save_dataset(dataset: Dataset, out_dir) -> dict:
    """Write manifest.json + subjects.bin; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    offsets = []
    pos = 0
    with open(out_dir / "subjects.bin", "wb") as fh:
        for subject in dataset.subjects:
            rec = _subject_record(subject, dataset.spec.labeled)
            offsets.append(pos)
            fh.write(rec)
            pos += len(rec)
    body_sha = hashlib.sha256((out_dir / "subjects.bin").read_bytes()).hexdigest()
    manifest = {
        "format_version": 1,
        "spec": _spec_to_dict(dataset.spec),
        "mixing_checksum": dataset.mixing_checksum,
        "subject_count": len(dataset.subjects),
        "offsets": offsets,
        "subjects_sha256": body_sha,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    try:
        manifest = json.loads((in_dir / "manifest.json").read_text())
    except FileNotFoundError:
        raise CohortFormatError(f"{in_dir}: missing manifest.json")
    except json.JSONDecodeError as e:
        raise CohortFormatError(f"{in_dir}/manifest.json: {e}")
    spec = spec_from_dict(manifest["spec"])
    raw = (in_dir / "subjects.bin").read_bytes()
    side = spec.image_size
    subjects = []
    for i, off in enumerate(manifest["offsets"]):
        pos = off
        try:
            complete = raw[pos] == 1
            lab = raw[pos + 1]
            n_frames = raw[pos + 2]
            pos += 3
            ts = np.frombuffer(raw, dtype="<f4", count=n_frames, offset=pos)
            pos += 4 * n_frames
            frames = []
            for _ in range(n_frames):
                fr = np.frombuffer(raw, dtype="<f4", count=side * side, offset=pos)
                frames.append(fr.reshape(side, side).astype(np.float64))
                pos += 4 * side * side
            has_expr = raw[pos]
            pos += 1
            if has_expr:
                expr = np.frombuffer(raw, dtype="<f4", count=spec.m, offset=pos).astype(np.float64)
                pos += 4 * spec.m
            else:
                expr = MISSING
        except (IndexError, ValueError) as e:
            raise CohortFormatError(f"{in_dir}/subjects.bin: truncated record {i} at offset {off}: {e}")
        subjects.append(
            Subject(
                profile=_RECONSTRUCTED_PROFILE,
                frames=frames,
                timestamps=[float(t) for t in ts],
                expression=expr,
                label=int(lab) if lab != _UNLABELED_BYTE else -1,
                complete=complete,
            )
        )
    ds = Dataset(spec, subjects, manifest["mixing_checksum"])
    return ds


class _ProfileUnavailable:
    """Placeholder profile for deserialized subjects (latents are not stored)."""

    def __repr__(self):
        return "<profile not serialized>"

    def as_tuple(self):
        raise LookupError("causal profile is not stored in the serialized dataset")


_RECONSTRUCTED_PROFILE = _ProfileUnavailable()
