"""Motion templates: non-negative maps encoding inter-frame change.

A feature sequence is a tensor [n, C, H, W] with the frame axis first. Three
template kinds are provided:

  diff         adjacent-frame absolute differences (length n-1)
  multi_diff   two accumulated adjacent differences (length n-2)
  static_excl  per-frame deviation from the sequence's static component,
               estimated by a mean or median filter over frames (length n)

``center_offset`` records which source frame maps[0] describes, so fusion can
align templates with the (possibly truncated) frame stream without
re-deriving index conventions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pgm import write_pgm

TEMPLATE_KINDS = ("diff", "multi_diff", "static_excl")
STATIC_FILTERS = ("mean", "median")


class SequenceTooShortError(ValueError):
    pass


@dataclass
class MotionTemplate:
    kind: str
    maps: T.Tensor  # [m, C, H, W], all entries >= 0
    center_offset: int

    def __len__(self):
        return self.maps.shape[0]


def template_diff(frames: T.Tensor) -> MotionTemplate:
    """maps[k] = |F[k+1] - F[k]| for k in 0..n-2."""
    n = frames.shape[0]
    if n < 2:
        raise SequenceTooShortError(f"diff template needs n >= 2, got n={n}")
    later = T.narrow(frames, 0, 1, n - 1)
    earlier = T.narrow(frames, 0, 0, n - 1)
    return MotionTemplate("diff", T.absolute(T.sub(later, earlier)), center_offset=0)


def template_multi_diff(frames: T.Tensor) -> MotionTemplate:
    """maps[k] = |F[k+2] - F[k+1]| + |F[k+1] - F[k]| for k in 0..n-3.

    maps[0] describes source frame 1, hence center_offset = 1.
    """
    n = frames.shape[0]
    if n < 3:
        raise SequenceTooShortError(f"multi_diff template needs n >= 3, got n={n}")
    later = T.narrow(frames, 0, 1, n - 1)
    earlier = T.narrow(frames, 0, 0, n - 1)
    d = T.absolute(T.sub(later, earlier))  # d[k] = |F[k+1] - F[k]|, length n-1
    maps = T.add(T.narrow(d, 0, 1, n - 2), T.narrow(d, 0, 0, n - 2))
    return MotionTemplate("multi_diff", maps, center_offset=1)


def template_static_excl(frames: T.Tensor, filter: str = "median") -> MotionTemplate:
    """maps[k] = |F[k] - static| where static is the mean/median over frames."""
    if filter not in STATIC_FILTERS:
        raise ValueError(f"static_excl filter must be one of {STATIC_FILTERS}, got {filter!r}")
    n = frames.shape[0]
    if n < 1:
        raise SequenceTooShortError("static_excl template needs n >= 1")
    static = T.reduce(frames, 0, filter)  # [C, H, W], broadcasts over frames
    return MotionTemplate("static_excl", T.absolute(T.sub(frames, static)), center_offset=0)


def make_template(frames: T.Tensor, spec: str) -> MotionTemplate:
    """Build a template from a config name: diff, multi_diff,
    static_excl_mean, or static_excl_median."""
    if spec == "diff":
        return template_diff(frames)
    if spec == "multi_diff":
        return template_multi_diff(frames)
    if spec == "static_excl_mean":
        return template_static_excl(frames, "mean")
    if spec in ("static_excl_median", "static_excl"):
        return template_static_excl(frames, "median")
    raise ValueError(f"unknown template spec {spec!r}")


def template_length(kind_spec: str, n: int) -> int:
    """Map length contract: n-1 for diff, n-2 for multi_diff, n otherwise."""
    if kind_spec == "diff":
        return n - 1
    if kind_spec == "multi_diff":
        return n - 2
    return n


def min_frames(kind_spec: str) -> int:
    return {"diff": 2, "multi_diff": 3}.get(kind_spec, 1)


def dump_template_pgms(template: MotionTemplate, stage: int, out_dir) -> list:
    """Write each map as stage{S}/t{k}.pgm, min-max normalized per map.

    Multi-channel maps are averaged over channels to get one grayscale image.
    Returns the written paths.
    """
    stage_dir = os.path.join(str(out_dir), f"stage{stage}")
    os.makedirs(stage_dir, exist_ok=True)
    paths = []
    maps = template.maps.data
    for k in range(maps.shape[0]):
        img = maps[k].mean(axis=0)
        lo, hi = img.min(), img.max()
        if hi > lo:
            img = (img - lo) / (hi - lo)
        else:
            img = np.zeros_like(img)
        path = os.path.join(stage_dir, f"t{k}.pgm")
        write_pgm(path, np.round(img * 255.0).astype(np.uint8))
        paths.append(path)
    return paths
