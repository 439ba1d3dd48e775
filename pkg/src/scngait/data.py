"""Silhouette ingestion, alignment, sampling, and a synthetic gait generator.

Dataset layouts:
  CASIA convention   root/<subject>/<condition>-<run>/<view>/<frame files>
  OU-MVLP convention root/<subject>/<view>_<run>/<frame files>

The synthetic generator renders a parameterized biped (torso ellipse, head
disc, two swinging legs and arms with sinusoidal joint angles) and writes it
in the CASIA convention with condition tag "nm". Identities are separable by
construction: every subject gets its own body-proportion and cadence
parameters from a seeded draw.
"""

from __future__ import annotations

import functools
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .pgm import read_frame, write_pgm

MIN_RAW_FRAMES = 15
TARGET_H, TARGET_W = 64, 44


class DegenerateFrameError(ValueError):
    """Silhouette with no foreground pixels."""


class DiscardSequenceError(ValueError):
    """Raw sequence shorter than the usable minimum."""


class IngestionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# alignment


def align_frame(raw: np.ndarray) -> np.ndarray:
    """Normalize one silhouette to a [1, 64, 44] array with values in {0, 1}.

    Crops to the vertical extent of the foreground, rescales the height to 64
    preserving aspect (nearest neighbor, so values stay binary), then centers
    a 44-wide window on the foreground's column-mass centroid, zero-padded at
    the borders.
    """
    mask = np.asarray(raw) > 127 if np.asarray(raw).max() > 1 else np.asarray(raw) > 0
    if not mask.any():
        raise DegenerateFrameError("empty silhouette")
    rows = np.flatnonzero(mask.any(axis=1))
    crop = mask[rows[0]:rows[-1] + 1]
    h_src, w_src = crop.shape
    w_new = max(1, int(round(w_src * TARGET_H / h_src)))
    row_idx = np.minimum((np.arange(TARGET_H) * h_src / TARGET_H).astype(int), h_src - 1)
    col_idx = np.minimum((np.arange(w_new) * w_src / w_new).astype(int), w_src - 1)
    scaled = crop[row_idx][:, col_idx]

    weights = scaled.sum(axis=0).astype(np.float64)
    if weights.sum() == 0:
        raise DegenerateFrameError("silhouette vanished under rescaling")
    centroid = (np.arange(w_new) * weights).sum() / weights.sum()
    start = int(round(centroid - (TARGET_W - 1) / 2))
    out = np.zeros((TARGET_H, TARGET_W), dtype=np.float64)
    src_lo, src_hi = max(0, start), min(w_new, start + TARGET_W)
    if src_lo < src_hi:
        out[:, src_lo - start:src_hi - start] = scaled[:, src_lo:src_hi]
    return out[None]


def align_sequence(frames) -> tuple[np.ndarray, int]:
    """Align every frame, dropping degenerate ones; returns (stack, dropped)."""
    aligned, dropped = [], 0
    for f in frames:
        try:
            aligned.append(align_frame(f))
        except DegenerateFrameError:
            dropped += 1
    if not aligned:
        raise DegenerateFrameError("every frame in the sequence was empty")
    return np.stack(aligned), dropped


def sample_segment(frames: np.ndarray, target_len: int, rng: np.random.Generator) -> np.ndarray:
    """Training segment: a random contiguous window, or a cyclic repeat when
    the sequence is shorter than the target. Frame order is never changed."""
    n = len(frames)
    if n < MIN_RAW_FRAMES:
        raise DiscardSequenceError(f"{n} frames < minimum {MIN_RAW_FRAMES}")
    if n >= target_len:
        start = int(rng.integers(0, n - target_len + 1))
        return frames[start:start + target_len]
    return frames[np.arange(target_len) % n]


# ---------------------------------------------------------------------------
# dataset indexing


@dataclass(frozen=True)
class SeqRecord:
    subject: int
    condition: str
    run: int
    view: int
    path: str
    frame_count: int
    split: str  # train | gallery | probe:<subset> | unused

    @property
    def probe_subset(self) -> str | None:
        return self.split.split(":", 1)[1] if self.split.startswith("probe:") else None


@dataclass(frozen=True)
class SplitProtocol:
    """Split assignment as a pure function of subject id, condition, and run."""

    train_subjects: int = 74
    gallery_runs: tuple = (("nm", 1, 4),)
    probe_subsets: tuple = (("NM", "nm", 5, 6), ("BG", "bg", 1, 2), ("CL", "cl", 1, 2))

    def assign(self, subject: int, condition: str, run: int) -> str:
        if subject <= self.train_subjects:
            return "train"
        for cond, lo, hi in self.gallery_runs:
            if condition == cond and lo <= run <= hi:
                return "gallery"
        for name, cond, lo, hi in self.probe_subsets:
            if condition == cond and lo <= run <= hi:
                return f"probe:{name}"
        return "unused"


def synthetic_protocol(train_subjects: int, probe_runs: tuple = (5, 8)) -> SplitProtocol:
    return SplitProtocol(
        train_subjects=train_subjects,
        gallery_runs=(("nm", 1, 4),),
        probe_subsets=(("NM", "nm", probe_runs[0], probe_runs[1]),),
    )


@dataclass
class DatasetIndex:
    root: str
    records: list[SeqRecord] = field(default_factory=list)

    def split(self, name: str) -> list[SeqRecord]:
        if name == "probe":
            return [r for r in self.records if r.split.startswith("probe:")]
        return [r for r in self.records if r.split == name]

    def train_by_subject(self) -> dict[int, list[SeqRecord]]:
        out: dict[int, list[SeqRecord]] = {}
        for r in self.split("train"):
            out.setdefault(r.subject, []).append(r)
        return out

    def views(self) -> list[int]:
        return sorted({r.view for r in self.records})

    def probe_subsets(self) -> list[str]:
        return sorted({r.probe_subset for r in self.records if r.probe_subset})


_FRAME_RE = re.compile(r".*\.(pgm|png)$", re.IGNORECASE)


def _count_frames(path: str) -> int:
    return sum(1 for f in os.listdir(path) if _FRAME_RE.match(f))


def load_casia_layout(root, protocol: SplitProtocol | None = None) -> DatasetIndex:
    """Index a CASIA-convention tree: subject/condition-run/view directories."""
    protocol = protocol or SplitProtocol()
    root = str(root)
    index = DatasetIndex(root=root)
    unparsed = []
    for subj_name in sorted(os.listdir(root)):
        subj_dir = os.path.join(root, subj_name)
        if not os.path.isdir(subj_dir):
            continue
        if not subj_name.isdigit():
            unparsed.append(subj_dir)
            continue
        subject = int(subj_name)
        for cond_name in sorted(os.listdir(subj_dir)):
            cond_dir = os.path.join(subj_dir, cond_name)
            if not os.path.isdir(cond_dir):
                continue
            m = re.fullmatch(r"([a-z]+)-(\d+)", cond_name)
            if not m:
                unparsed.append(cond_dir)
                continue
            condition, run = m.group(1), int(m.group(2))
            for view_name in sorted(os.listdir(cond_dir)):
                view_dir = os.path.join(cond_dir, view_name)
                if not os.path.isdir(view_dir):
                    continue
                if not view_name.isdigit():
                    unparsed.append(view_dir)
                    continue
                index.records.append(
                    SeqRecord(
                        subject=subject,
                        condition=condition,
                        run=run,
                        view=int(view_name),
                        path=view_dir,
                        frame_count=_count_frames(view_dir),
                        split=protocol.assign(subject, condition, run),
                    )
                )
    if unparsed:
        raise IngestionError("unparsed paths: " + ", ".join(unparsed[:10]))
    if not index.records:
        raise IngestionError(f"no sequences found under {root}")
    return index


def load_ou_mvlp_layout(root, train_subjects: int = 5153) -> DatasetIndex:
    """Index an OU-MVLP-convention tree: subject/view_run directories.

    Run 0 of each test subject forms the gallery, run 1 the probe set.
    """
    root = str(root)
    index = DatasetIndex(root=root)
    unparsed = []
    for subj_name in sorted(os.listdir(root)):
        subj_dir = os.path.join(root, subj_name)
        if not os.path.isdir(subj_dir):
            continue
        if not subj_name.isdigit():
            unparsed.append(subj_dir)
            continue
        subject = int(subj_name)
        for seq_name in sorted(os.listdir(subj_dir)):
            seq_dir = os.path.join(subj_dir, seq_name)
            if not os.path.isdir(seq_dir):
                continue
            m = re.fullmatch(r"(\d+)_(\d+)", seq_name)
            if not m:
                unparsed.append(seq_dir)
                continue
            view, run = int(m.group(1)), int(m.group(2))
            if subject <= train_subjects:
                split = "train"
            else:
                split = "gallery" if run == 0 else "probe:NM"
            index.records.append(
                SeqRecord(subject, "nm", run, view, seq_dir, _count_frames(seq_dir), split)
            )
    if unparsed:
        raise IngestionError("unparsed paths: " + ", ".join(unparsed[:10]))
    if not index.records:
        raise IngestionError(f"no sequences found under {root}")
    return index


def load_raw_sequence(path: str) -> np.ndarray:
    files = sorted(f for f in os.listdir(path) if _FRAME_RE.match(f))
    if not files:
        raise IngestionError(f"no frames under {path}")
    return np.stack([read_frame(os.path.join(path, f)) for f in files])


@functools.lru_cache(maxsize=4096)
def load_aligned_sequence(path: str) -> np.ndarray:
    """Aligned [n, 1, 64, 44] uint8 stack for a sequence directory (cached)."""
    aligned, _ = align_sequence(load_raw_sequence(path))
    return aligned.astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic gait rendering


@dataclass(frozen=True)
class SynthSpec:
    subjects: int = 20
    views: tuple = (0, 30, 60, 90)
    sequences: int = 8
    frames: int = 40
    noise_rate: float = 0.0
    seed: int = 0
    canvas_h: int = 96
    canvas_w: int = 72

    def __post_init__(self):
        if self.subjects < 1 or self.sequences < 1 or self.frames < 1:
            raise ConfigurationError("subjects, sequences, and frames must be positive")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ConfigurationError("noise_rate must lie in [0, 0.5)")
        if self.frames < MIN_RAW_FRAMES:
            raise ConfigurationError(f"frames must be >= {MIN_RAW_FRAMES} to be usable")


def _draw_subject_params(rng: np.random.Generator) -> dict:
    return {
        "height": rng.uniform(0.86, 0.98),
        "torso_w": rng.uniform(0.17, 0.27),
        "torso_frac": rng.uniform(0.30, 0.36),  # shoulder-to-hip fraction of height
        "head_r": rng.uniform(0.050, 0.075),
        "leg_amp": rng.uniform(0.28, 0.55),
        "arm_amp": rng.uniform(0.15, 0.40),
        "leg_len": rng.uniform(0.44, 0.52),
        "arm_len": rng.uniform(0.28, 0.38),
        "leg_w": rng.uniform(0.045, 0.075),
        "arm_w": rng.uniform(0.030, 0.050),
        "period": int(rng.integers(16, 29)),
        "bob": rng.uniform(0.004, 0.016),
    }


def _segment_mask(yy, xx, p0, p1, half_w):
    """Pixels within half_w of the segment p0-p1 (capsule rasterization)."""
    d = p1 - p0
    len2 = float(d @ d)
    if len2 == 0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / len2, 0.0, 1.0)
    cx = p0[0] + t * d[0]
    cy = p0[1] + t * d[1]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= half_w ** 2


def render_biped_frame(params: dict, phase: float, spec: SynthSpec) -> np.ndarray:
    """One canonical-view silhouette frame (uint8, values {0, 255})."""
    H, W = spec.canvas_h, spec.canvas_w
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    hgt = params["height"] * H
    top = (H - hgt) / 2 + params["bob"] * hgt * np.sin(4 * np.pi * phase)
    cx = W / 2.0
    head_r = params["head_r"] * hgt
    y_head = top + head_r
    y_sh = top + 2 * head_r * 1.15
    y_hip = y_sh + params["torso_frac"] * hgt
    leg_len = params["leg_len"] * hgt
    arm_len = params["arm_len"] * hgt

    mask = (xx - cx) ** 2 + (yy - y_head) ** 2 <= head_r ** 2  # head
    a = params["torso_w"] * hgt / 2
    b = (y_hip - y_sh) / 2 + a * 0.35
    cy_t = (y_sh + y_hip) / 2
    mask |= ((xx - cx) / a) ** 2 + ((yy - cy_t) / b) ** 2 <= 1.0  # torso

    def limb(origin_y, length, angle, half_w):
        p0 = np.array([cx, origin_y])
        p1 = p0 + length * np.array([np.sin(angle), np.cos(angle)])
        return _segment_mask(yy, xx, p0, p1, half_w)

    th = 2 * np.pi * phase
    mask |= limb(y_hip, leg_len, params["leg_amp"] * np.sin(th), params["leg_w"] * hgt)
    mask |= limb(y_hip, leg_len, params["leg_amp"] * np.sin(th + np.pi), params["leg_w"] * hgt)
    mask |= limb(y_sh, arm_len, params["arm_amp"] * np.sin(th + np.pi), params["arm_w"] * hgt)
    mask |= limb(y_sh, arm_len, params["arm_amp"] * np.sin(th), params["arm_w"] * hgt)
    return mask.astype(np.uint8) * 255


def apply_view(frame: np.ndarray, view_deg: float) -> np.ndarray:
    """Horizontal affine view change: x-scale plus a row-dependent shear."""
    if view_deg == 0:
        return frame
    H, W = frame.shape
    rad = np.deg2rad(view_deg)
    sx = 1.0 - 0.42 * np.sin(rad)
    shear = 0.22 * np.sin(rad)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W]
    src_x = np.round((xx - cx - shear * (yy - cy)) / sx + cx).astype(int)
    valid = (src_x >= 0) & (src_x < W)
    out = np.zeros_like(frame)
    out[valid] = frame[yy[valid], src_x[valid]]
    return out


def _apply_noise(frame: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        return frame
    flips = rng.random(frame.shape) < rate
    return np.where(flips, 255 - frame, frame).astype(np.uint8)


def render_sequence(params: dict, spec: SynthSpec, phase0: float, view_deg: float,
                    noise_rng: np.random.Generator | None = None) -> np.ndarray:
    frames = []
    for t in range(spec.frames):
        phase = phase0 + t / params["period"]
        f = apply_view(render_biped_frame(params, phase, spec), view_deg)
        if noise_rng is not None:
            f = _apply_noise(f, spec.noise_rate, noise_rng)
        frames.append(f)
    return np.stack(frames)


def synth_generate(spec: SynthSpec, root) -> DatasetIndex:
    """Render the full dataset tree; identical spec implies identical bytes."""
    root = str(root)
    os.makedirs(root, exist_ok=True)
    for s in range(1, spec.subjects + 1):
        params = _draw_subject_params(np.random.default_rng([spec.seed, 1, s]))
        for view in spec.views:
            for run in range(1, spec.sequences + 1):
                seq_rng = np.random.default_rng([spec.seed, 2, s, int(view), run])
                phase0 = float(seq_rng.uniform(0, 1))
                frames = render_sequence(params, spec, phase0, float(view), seq_rng)
                seq_dir = os.path.join(root, f"{s:03d}", f"nm-{run:02d}", f"{int(view):03d}")
                os.makedirs(seq_dir, exist_ok=True)
                for t in range(spec.frames):
                    write_pgm(os.path.join(seq_dir, f"{t:03d}.pgm"), frames[t])
    train = max(1, int(round(spec.subjects * 0.7)))
    return load_casia_layout(root, synthetic_protocol(train_subjects=train))


# ---------------------------------------------------------------------------
# phase twins


def make_phase_twins(root, seed: int = 0, cycles: int = 3, runs: int = 4,
                     spec: SynthSpec | None = None) -> DatasetIndex:
    """Two subjects with identical silhouette multisets in different orders.

    One gait cycle is rendered once; subject 1's sequences are cyclic
    rotations of the tiled cycle, subject 2's are their time reversals. A
    frame-set pooling model cannot tell them apart (same multiset); only the
    temporal order separates them.
    """
    # frame count is set by cycles * period below; the spec only sizes the canvas
    spec = spec or SynthSpec(subjects=2, views=(90,), sequences=runs, seed=seed)
    params = _draw_subject_params(np.random.default_rng([seed, 1, 1]))
    period = params["period"]
    cycle = [apply_view(render_biped_frame(params, t / period, spec), 90.0) for t in range(period)]
    base = np.stack(cycle * cycles)
    n = len(base)
    root = str(root)
    for run in range(1, runs + 1):
        offset = ((run - 1) * period) // runs
        rotated = np.roll(base, -offset, axis=0)
        for subject, seq in ((1, rotated), (2, rotated[::-1])):
            seq_dir = os.path.join(root, f"{subject:03d}", f"nm-{run:02d}", "090")
            os.makedirs(seq_dir, exist_ok=True)
            for t in range(n):
                write_pgm(os.path.join(seq_dir, f"{t:03d}.pgm"), seq[t])
    return load_casia_layout(root, SplitProtocol(train_subjects=2, gallery_runs=(), probe_subsets=()))


# ---------------------------------------------------------------------------
# batch assembly


@dataclass(frozen=True)
class BatchSpec:
    p: int = 4  # subjects per batch
    k: int = 4  # segments per subject
    segment_len: int = 30

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ConfigurationError("batch-all training needs p >= 2 and k >= 2")
        if self.segment_len < 1:
            raise ConfigurationError("segment_len must be positive")


def usable_train_records(index: DatasetIndex) -> dict[int, list[SeqRecord]]:
    by_subject = {}
    for subj, recs in index.train_by_subject().items():
        usable = [r for r in recs if r.frame_count >= MIN_RAW_FRAMES]
        if usable:
            by_subject[subj] = usable
    return by_subject


def sample_batch(index: DatasetIndex, spec: BatchSpec, seed: int, step: int):
    """Batch for one training step: a pure function of (seed, step).

    Returns (labels, segments) where segments are [segment_len, 1, 64, 44]
    float64 arrays in {0, 1}.
    """
    by_subject = usable_train_records(index)
    if len(by_subject) < spec.p:
        raise ConfigurationError(
            f"need {spec.p} trainable subjects, found {len(by_subject)}"
        )
    rng = np.random.default_rng([seed, 3, step])
    subjects = rng.choice(sorted(by_subject), size=spec.p, replace=False)
    labels, segments = [], []
    for subj in subjects:
        recs = by_subject[int(subj)]
        picks = rng.integers(0, len(recs), size=spec.k)
        for i in picks:
            aligned = load_aligned_sequence(recs[int(i)].path)
            seg = sample_segment(aligned, spec.segment_len, rng)
            labels.append(int(subj))
            segments.append(seg.astype(np.float64))
    return labels, segments
