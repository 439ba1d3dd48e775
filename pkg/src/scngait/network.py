"""The full sequence-feature extractor.

Three stages, each: transition (channel-changing 3x3 conv, 2x2 max pool in
stages 2-3) -> motion-template fusion -> residual conv block. A multi-frame
aggregator (MFA) then folds the variable-length frame stream into one
fixed-shape descriptor: the stream is extended cyclically by its first L-1
frames, a temporal 3x1x1 conv runs over each of the n length-L windows, each
window is reduced to one map, and a final frame-wise reduction yields the
sequence feature. Every source frame sits in exactly L windows, which is what
makes the descriptor invariant to cyclic rotations of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import ConvBlockParams, conv_block, init_conv_block, _fan_in_uniform
from .fusion import FusionParams, fuse_global, fuse_micro, init_fusion
from .templates import make_template, min_frames

TEMPLATE_CHOICES = ("diff", "multi_diff", "static_excl_mean", "static_excl_median", "none")


class WindowError(ValueError):
    pass


class SequenceTooShortError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScnConfig:
    channels: tuple = (32, 64, 128)
    input_hw: tuple = (64, 44)
    template: str = "static_excl_median"
    fusion: str = "adaptive"
    bie_stages: int = 0b111  # bitmask, bit i enables the fusion in stage i+1
    window_len: int = 7
    within_window: str = "max"
    final_reduce: str = "max"
    mfa_enabled: bool = True
    leaky_slope: float = 0.01
    dtype: str = "float64"

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ValueError("channels must name the three stage widths")
        if not all(a < b for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channel plan must be strictly increasing, got {self.channels}")
        if self.template not in TEMPLATE_CHOICES:
            raise ValueError(f"template must be one of {TEMPLATE_CHOICES}")
        if self.mfa_enabled and self.window_len < 3:
            raise ValueError("window_len must be >= 3 (the temporal kernel must fit)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def bie_active(self, stage: int) -> bool:
        if self.template == "none":
            return False
        return bool(self.bie_stages >> stage & 1)

    def feature_shape(self) -> tuple:
        h, w = self.input_hw
        return (self.channels[2], h // 4, w // 4)

    def feature_dim(self) -> int:
        c, h, w = self.feature_shape()
        return c * h * w

    def min_sequence_len(self) -> int:
        """Shortest input the forward map accepts under this config."""
        n = self.window_len if self.mfa_enabled else 1
        for stage in (2, 1, 0):
            if self.bie_active(stage) and self.fusion in ("micro", "adaptive"):
                n += {"diff": 1, "multi_diff": 2}.get(self.template, 0)
            if self.bie_active(stage):
                n = max(n, min_frames(self.template))
        return n


@dataclass
class StageParams:
    transition_kernel: T.Tensor  # [C_out, C_in, 3, 3]
    pool: bool
    bie: FusionParams | None
    cb: ConvBlockParams

    def named(self, prefix: str):
        out = [(f"{prefix}.transition", self.transition_kernel)]
        out.extend(self.cb.named(f"{prefix}.cb"))
        if self.bie is not None:
            out.extend(self.bie.named(f"{prefix}.bie"))
        return out


@dataclass
class MfaParams:
    window_len: int
    temporal_kernel: T.Tensor  # [C, C, 3, 1, 1]
    within_window: str = "max"
    final_reduce: str = "max"
    enabled: bool = True

    def named(self, prefix: str):
        return [(f"{prefix}.temporal_kernel", self.temporal_kernel)] if self.enabled else []


@dataclass
class ScnParams:
    config: ScnConfig
    stages: list = field(default_factory=list)
    mfa: MfaParams | None = None

    def named_parameters(self):
        out = []
        for i, st in enumerate(self.stages):
            out.extend(st.named(f"stage{i + 1}"))
        if self.mfa is not None:
            out.extend(self.mfa.named("mfa"))
        return out


@dataclass
class SequenceFeature:
    """Fixed-shape [C, H, W] descriptor of one whole sequence."""

    map: T.Tensor

    def flat(self) -> T.Tensor:
        return T.reshape(self.map, (self.map.size,))

    @property
    def vector(self) -> np.ndarray:
        return self.map.data.reshape(-1)


def init_params(config: ScnConfig, rng: np.random.Generator) -> ScnParams:
    """Fan-in uniform conv weights; fusion parameters all start at zero."""
    dtype = config.np_dtype
    stages = []
    c_in = 1
    for i, c_out in enumerate(config.channels):
        kernel = T.Tensor(_fan_in_uniform(rng, (c_out, c_in, 3, 3), dtype), requires_grad=True)
        bie = init_fusion(config.fusion, c_out, rng, dtype) if config.bie_active(i) else None
        stages.append(
            StageParams(
                transition_kernel=kernel,
                pool=i > 0,
                bie=bie,
                cb=init_conv_block(c_out, rng, dtype=dtype),
            )
        )
        c_in = c_out
    c = config.channels[2]
    mfa = MfaParams(
        window_len=config.window_len,
        temporal_kernel=T.Tensor(
            _fan_in_uniform(rng, (c, c, 3, 1, 1), dtype), requires_grad=True
        ),
        within_window=config.within_window,
        final_reduce=config.final_reduce,
        enabled=config.mfa_enabled,
    )
    return ScnParams(config=config, stages=stages, mfa=mfa)


# ---------------------------------------------------------------------------
# multi-frame aggregator


def num_windows(n: int, window_len: int, cyclic_extension: bool = True) -> int:
    """Window count for a length-n stream: n with the cyclic extension,
    n - L + 1 without it."""
    if n < window_len:
        raise WindowError(f"sequence length n={n} is below window length L={window_len}")
    return n if cyclic_extension else n - window_len + 1


def _temporal_tap(kernel: T.Tensor, tap: int) -> T.Tensor:
    """One temporal slice of a [C,C,3,1,1] kernel as a 1x1 conv kernel."""
    c = kernel.shape[0]
    return T.reshape(T.narrow(T.reshape(kernel, (c, c, 3)), 2, tap, 1), (c, c, 1, 1))


def mfa_forward(params: MfaParams, frames: T.Tensor) -> SequenceFeature:
    """Aggregate [n, C, H, W] into one [C, H, W] map.

    Equivalent to running the temporal conv over each cyclic window and
    reducing, but computed from three shared per-frame channel maps so each
    frame's convolutions are evaluated once instead of once per window.
    ``mfa_forward_reference`` is the literal per-window oracle.
    """
    n = frames.shape[0]
    L = params.window_len
    if not params.enabled:
        return SequenceFeature(map=T.reduce(frames, 0, params.final_reduce))
    if n < L:
        raise WindowError(f"sequence length n={n} is below window length L={L}")
    ext = T.concat([frames, T.narrow(frames, 0, 0, L - 1)], axis=0)  # n + L - 1 frames
    prev_part = T.conv2d(ext, _temporal_tap(params.temporal_kernel, 0))
    curr_part = T.conv2d(ext, _temporal_tap(params.temporal_kernel, 1))
    next_part = T.conv2d(ext, _temporal_tap(params.temporal_kernel, 2))

    folded = None
    for i in range(L):
        # window j, position i mixes ext[j+i-1 : j+i+2]; borders are zero-padded
        term = T.narrow(curr_part, 0, i, n)
        if i > 0:
            term = T.add(term, T.narrow(prev_part, 0, i - 1, n))
        if i < L - 1:
            term = T.add(term, T.narrow(next_part, 0, i + 1, n))
        if folded is None:
            folded = term
        elif params.within_window == "max":
            folded = T.maximum(folded, term)
        else:
            folded = T.add(folded, term)
    if params.within_window == "mean":
        folded = T.scalar_mul(folded, 1.0 / L)
    return SequenceFeature(map=T.reduce(folded, 0, params.final_reduce))


def mfa_forward_reference(params: MfaParams, frames: T.Tensor) -> SequenceFeature:
    """Literal formulation: one temporal conv per cyclic window, then reduce."""
    n = frames.shape[0]
    L = params.window_len
    if n < L:
        raise WindowError(f"sequence length n={n} is below window length L={L}")
    ext = T.concat([frames, T.narrow(frames, 0, 0, L - 1)], axis=0)
    outputs = []
    for j in range(num_windows(n, L)):
        window = T.narrow(ext, 0, j, L)
        mixed = T.conv3d_t3(window, params.temporal_kernel)
        outputs.append(T.reduce(mixed, 0, params.within_window))
    stacked = T.concat([T.reshape(o, (1,) + tuple(o.shape)) for o in outputs], axis=0)
    return SequenceFeature(map=T.reduce(stacked, 0, params.final_reduce))


# ---------------------------------------------------------------------------
# forward pass


def _stage_forward_many(params: ScnParams, stage_idx: int, seqs: list,
                        collect_templates: list | None = None) -> list:
    """One stage over a list of per-sequence frame tensors.

    Frame-wise convolutions run once over the concatenation of all sequences;
    template and fusion logic stays per sequence. When ``collect_templates``
    is given, the first sequence's template (or None) is appended to it.
    """
    cfg = params.config
    st = params.stages[stage_idx]
    lengths = [s.shape[0] for s in seqs]
    cat = seqs[0] if len(seqs) == 1 else T.concat(seqs, axis=0)
    if st.pool:
        cat = T.max_pool2x2(cat)
    cat = T.conv2d(cat, st.transition_kernel, 1, 1)

    if not cfg.bie_active(stage_idx):
        if collect_templates is not None:
            collect_templates.append(None)
        cat = conv_block(st.cb, cat, cfg.leaky_slope)
        return _split(cat, lengths)

    frames_list = _split(cat, lengths)
    templates = []
    for f, n in zip(frames_list, lengths):
        if n < min_frames(cfg.template):
            raise SequenceTooShortError(
                f"stage {stage_idx + 1}: {n} frames cannot form a {cfg.template} template"
            )
        templates.append(make_template(f, cfg.template))
    if collect_templates is not None:
        collect_templates.append(templates[0])

    if cfg.fusion == "micro":
        fused = [fuse_micro(f, t, st.bie) for f, t in zip(frames_list, templates)]
        cat = fused[0] if len(fused) == 1 else T.concat(fused, axis=0)
        cat = conv_block(st.cb, cat, cfg.leaky_slope)
        return _split(cat, [f.shape[0] for f in fused])
    if cfg.fusion == "global":
        fused = [fuse_global(f, t, st.bie) for f, t in zip(frames_list, templates)]
        cat = fused[0] if len(fused) == 1 else T.concat(fused, axis=0)
        cat = conv_block(st.cb, cat, cfg.leaky_slope)
        return _split(cat, [f.shape[0] for f in fused])
    # adaptive: the fusion and the stage block combine; run both branches
    # batched across sequences
    kept = [
        f if t.maps.shape[0] == f.shape[0] and t.center_offset == 0
        else T.narrow(f, 0, t.center_offset, t.maps.shape[0])
        for f, t in zip(frames_list, templates)
    ]
    new_lengths = [k.shape[0] for k in kept]
    kept_cat = kept[0] if len(kept) == 1 else T.concat(kept, axis=0)
    maps_cat = (
        templates[0].maps
        if len(templates) == 1
        else T.concat([t.maps for t in templates], axis=0)
    )
    appearance = conv_block(st.cb, kept_cat, cfg.leaky_slope)
    motion = conv_block(st.bie.template_block, maps_cat, cfg.leaky_slope)
    return _split(T.add(appearance, motion), new_lengths)


def _split(cat: T.Tensor, lengths: list) -> list:
    if len(lengths) == 1:
        return [cat]
    return T.split_frames(cat, lengths)


def scn_forward_many(params: ScnParams, seqs: list) -> list:
    """Forward a list of [n_i, 1, H, W] frame stacks to SequenceFeatures."""
    cfg = params.config
    for s in seqs:
        if s.shape[0] < cfg.min_sequence_len():
            raise SequenceTooShortError(
                f"{s.shape[0]} frames < minimum {cfg.min_sequence_len()} for this config"
            )
    for stage_idx in range(3):
        seqs = _stage_forward_many(params, stage_idx, seqs)
    return [mfa_forward(params.mfa, f) for f in seqs]


def scn_forward(params: ScnParams, frames: T.Tensor) -> SequenceFeature:
    """Map one preprocessed sequence [n, 1, H, W] to its SequenceFeature."""
    return scn_forward_many(params, [frames])[0]


def forward_with_templates(params: ScnParams, frames: T.Tensor):
    """Forward one sequence, also returning each stage's motion template
    (None where the fusion is disabled)."""
    templates: list = []
    seqs = [frames]
    for stage_idx in range(3):
        seqs = _stage_forward_many(params, stage_idx, seqs, collect_templates=templates)
    return mfa_forward(params.mfa, seqs[0]), templates


def swap_parameter(params: ScnParams, name: str, tensor: T.Tensor) -> ScnParams:
    """Structural copy of ``params`` with the named parameter replaced.

    All other tensors are shared; used by finite-difference checks to route a
    probe tensor into the forward graph.
    """
    import dataclasses as dc

    target = dict(params.named_parameters())[name]

    def sub(obj):
        if obj is target:
            return tensor
        if isinstance(obj, T.Tensor):
            return obj
        if dc.is_dataclass(obj) and not isinstance(obj, type):
            return dc.replace(obj, **{f.name: sub(getattr(obj, f.name)) for f in dc.fields(obj)})
        if isinstance(obj, list):
            return [sub(o) for o in obj]
        return obj

    return sub(params)


# ---------------------------------------------------------------------------
# checkpoints: text manifest + tensor snapshots in one file


MAGIC = "SCN-CHECKPOINT 1"


def save_checkpoint(path, params: ScnParams, extra: dict | None = None, step: int = 0):
    """Write every named parameter (and optional extra arrays) with shapes."""
    entries = list(params.named_parameters())
    extra = extra or {}
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}\n".encode())
        fh.write(f"step {int(step)}\n".encode())
        fh.write(f"tensors {len(entries) + len(extra)}\n".encode())
        for name, t in entries:
            dims = " ".join(str(d) for d in t.shape)
            fh.write(f"{name} {dims}\n".encode())
        for name, arr in extra.items():
            dims = " ".join(str(d) for d in np.asarray(arr).shape)
            fh.write(f"{name} {dims}\n".encode())
        for _, t in entries:
            T.save_snapshot(fh, t.data)
        for _, arr in extra.items():
            T.save_snapshot(fh, np.asarray(arr, dtype=np.float64))


def load_checkpoint(path, params: ScnParams) -> tuple[int, dict]:
    """Load parameters in place, validating every shape against the config.

    Returns (step, extra) where extra holds any non-parameter arrays
    (optimizer state and the like).
    """
    by_name = dict(params.named_parameters())
    with open(path, "rb") as fh:
        if fh.readline().decode().strip() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        step_line = fh.readline().decode().split()
        count = int(fh.readline().decode().split()[1])
        manifest = []
        for _ in range(count):
            parts = fh.readline().decode().split()
            manifest.append((parts[0], tuple(int(d) for d in parts[1:])))
        extra = {}
        seen = set()
        for name, shape in manifest:
            arr = T.load_snapshot(fh)
            if arr.shape != shape:
                raise CheckpointError(f"{name}: payload shape {arr.shape} != manifest {shape}")
            if name in by_name:
                t = by_name[name]
                if tuple(t.shape) != shape:
                    raise CheckpointError(
                        f"{name}: checkpoint shape {shape} != config shape {tuple(t.shape)}"
                    )
                t.data = arr.astype(t.data.dtype)
                seen.add(name)
            else:
                extra[name] = arr
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)}")
    return int(step_line[1]), extra
