"""Fusing motion templates back into the per-frame feature stream.

Three strategies:

  micro     each frame gets its own template map: F[k] + w * t[k]; the frame
            stream is truncated to the template's length
  global    one shared motion summary, built from the frame-wise mean and max
            of the template, mixed by a 1x1 conv and added to every frame
  adaptive  template maps go through their own conv block (untied weights)
            and join the backbone block's output: CB(F[k]) + CB_T(t[k])

All trainable fusion parameters initialize to zero, so an untrained fusion is
an identity map on the (possibly truncated) frame stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import ConvBlockParams, conv_block, init_conv_block
from .templates import MotionTemplate

FUSION_MODES = ("micro", "global", "adaptive")


class AlignmentError(ValueError):
    """Template does not line up with the frame stream it claims to describe."""


@dataclass
class FusionParams:
    mode: str
    w: T.Tensor | None = None  # scalar weight (micro, global)
    mix_kernel: T.Tensor | None = None  # [C, 2C, 1, 1] (global)
    mix_bias: T.Tensor | None = None  # [C, 1, 1] (global)
    template_block: ConvBlockParams | None = None  # (adaptive)

    def named(self, prefix: str):
        out = []
        if self.w is not None:
            out.append((f"{prefix}.w", self.w))
        if self.mix_kernel is not None:
            out.append((f"{prefix}.mix_kernel", self.mix_kernel))
        if self.mix_bias is not None:
            out.append((f"{prefix}.mix_bias", self.mix_bias))
        if self.template_block is not None:
            out.extend(self.template_block.named(f"{prefix}.tblock"))
        return out


def init_fusion(mode: str, channels: int, rng, dtype=np.float64) -> FusionParams:
    if mode not in FUSION_MODES:
        raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    c = channels
    if mode == "micro":
        return FusionParams("micro", w=T.Tensor(np.zeros(()), dtype=dtype, requires_grad=True))
    if mode == "global":
        return FusionParams(
            "global",
            w=T.Tensor(np.zeros(()), dtype=dtype, requires_grad=True),
            mix_kernel=T.Tensor(np.zeros((c, 2 * c, 1, 1), dtype=dtype), requires_grad=True),
            mix_bias=T.Tensor(np.zeros((c, 1, 1), dtype=dtype), requires_grad=True),
        )
    return FusionParams(
        "adaptive",
        template_block=init_conv_block(c, rng, dtype=dtype, zero=True, with_projection=True),
    )


def _check_alignment(frames: T.Tensor, template: MotionTemplate):
    n = frames.shape[0]
    m = template.maps.shape[0]
    if template.center_offset + m > n:
        raise AlignmentError(
            f"template of length {m} at offset {template.center_offset} "
            f"does not fit a {n}-frame sequence"
        )
    if template.maps.shape[1:] != frames.shape[1:]:
        raise AlignmentError(
            f"template maps {template.maps.shape[1:]} vs frames {frames.shape[1:]}"
        )


def truncate_to_template(frames: T.Tensor, template: MotionTemplate) -> T.Tensor:
    """The sub-stream of frames that the template's maps describe."""
    _check_alignment(frames, template)
    m = template.maps.shape[0]
    if m == frames.shape[0] and template.center_offset == 0:
        return frames
    return T.narrow(frames, 0, template.center_offset, m)


def fuse_micro(frames: T.Tensor, template: MotionTemplate, params: FusionParams) -> T.Tensor:
    """out[k] = F[k + offset] + w * t[k]; output length is the template length."""
    assert params.mode == "micro"
    kept = truncate_to_template(frames, template)
    return T.add(kept, T.scalar_mul(template.maps, params.w))


def global_motion_term(template: MotionTemplate, params: FusionParams) -> T.Tensor:
    """w * mix(cat(mean(T), max(T))): the shared additive motion map [C,H,W]."""
    mean_t = T.reduce(template.maps, 0, "mean")
    max_t = T.reduce(template.maps, 0, "max")
    cat = T.concat([mean_t, max_t], axis=0)  # [2C, H, W]
    mixed = T.add(T.conv2d(cat, params.mix_kernel), params.mix_bias)
    return T.scalar_mul(mixed, params.w)


def fuse_global(frames: T.Tensor, template: MotionTemplate, params: FusionParams) -> T.Tensor:
    """Every frame receives the same motion term; no truncation."""
    assert params.mode == "global"
    if template.maps.shape[1:] != frames.shape[1:]:
        raise AlignmentError(
            f"template maps {template.maps.shape[1:]} vs frames {frames.shape[1:]}"
        )
    g = global_motion_term(template, params)
    return T.add(frames, g)  # g broadcasts over the frame axis


def fuse_adaptive(
    frames: T.Tensor,
    template: MotionTemplate,
    params: FusionParams,
    cb: ConvBlockParams,
    slope: float = 0.01,
) -> T.Tensor:
    """out[k] = CB(F[k + offset]) + CB_T(t[k]); replaces the stage's block."""
    assert params.mode == "adaptive"
    kept = truncate_to_template(frames, template)
    appearance = conv_block(cb, kept, slope)
    motion = conv_block(params.template_block, template.maps, slope)
    return T.add(appearance, motion)
