"""Batch-all triplet training.

Every (anchor, positive, negative) triplet inside a p-subjects-by-k-segments
batch contributes a hinge on Euclidean feature distances. Two published sign
conventions are carried:

  standard     max(M + d_ap - d_an, 0), the usual pull-together/push-apart
  as_written   max(M - d_ap + d_an, 0), kept selectable for fidelity
               experiments against sources that print the loss this way

and two normalizations: ``paper_2M`` divides the hinge sum by 2M times the
triplet count; ``plain_mean`` averages over the active (nonzero) triplets.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BatchSpec, DatasetIndex, sample_batch
from .network import ScnParams, save_checkpoint, load_checkpoint, scn_forward_many


class BatchCompositionError(ValueError):
    pass


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2
    normalization: str = "paper_2M"  # paper_2M | plain_mean
    sign_convention: str = "standard"  # standard | as_written

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.normalization not in ("paper_2M", "plain_mean"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.sign_convention not in ("standard", "as_written"):
            raise ValueError(f"unknown sign convention {self.sign_convention!r}")


def pairwise_distances(features: T.Tensor) -> T.Tensor:
    """Euclidean distance matrix for row vectors [B, D] via the Gram trick."""
    sq = T.sum_axis(T.mul(features, features), 1)  # [B]
    b = features.shape[0]
    gram = T.matmul(features, T.transpose2d(features))
    d2 = T.sub(T.add(T.reshape(sq, (b, 1)), T.reshape(sq, (1, b))), T.scalar_mul(gram, 2.0))
    return T.sqrt(T.hinge(d2))  # clamp tiny negatives from cancellation


def triplet_masks(labels) -> np.ndarray:
    labels = np.asarray(labels)
    b = len(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    return (pos[:, :, None] & neg[:, None, :]).astype(np.float64)


def triplet_loss_ba(features, labels, cfg: TripletConfig) -> tuple[T.Tensor, float]:
    """Loss over all valid triplets plus the fraction with a positive hinge.

    ``features`` is either a [B, D] tensor or a list of SequenceFeatures.
    """
    if isinstance(features, list):
        rows = [T.reshape(f.flat(), (1, f.map.size)) for f in features]
        features = T.concat(rows, axis=0)
    labels = np.asarray(labels)
    if len(labels) != features.shape[0]:
        raise BatchCompositionError("one label per feature row is required")
    counts = {int(s): int((labels == s).sum()) for s in set(labels.tolist())}
    if len(counts) < 2 or min(counts.values()) < 2:
        raise BatchCompositionError(
            f"batch-all needs >= 2 subjects with >= 2 features each, got {counts}"
        )
    b = features.shape[0]
    d = pairwise_distances(features)
    d_ap = T.reshape(d, (b, b, 1))
    d_an = T.reshape(d, (b, 1, b))
    if cfg.sign_convention == "standard":
        raw = T.add(T.sub(d_ap, d_an), cfg.margin)
    else:
        raw = T.add(T.sub(d_an, d_ap), cfg.margin)
    mask = triplet_masks(labels).astype(features.dtype)
    hinges = T.mul(T.hinge(raw), T.Tensor(mask))
    total = T.sum_all(hinges)
    n_triplets = float(mask.sum())
    n_active = float(((hinges.data > 0) & (mask > 0)).sum())
    if cfg.normalization == "paper_2M":
        loss = T.scalar_mul(total, 1.0 / (2.0 * cfg.margin * n_triplets))
    else:
        loss = T.scalar_mul(total, 1.0 / max(n_active, 1.0))
    return loss, n_active / n_triplets


# ---------------------------------------------------------------------------
# schedule and optimizer


SCHEDULES = {
    "casia_b": ((10_000, 1e-3), (80_000, 1e-4), (None, 1e-5)),
    "ou_mvlp": ((50_000, 1e-3), (200_000, 1e-4), (None, 1e-5)),
}


def lr_schedule(step: int, dataset: str, custom=None) -> float:
    """Piecewise-constant rate; the new rate applies from the breakpoint on."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if dataset == "custom":
        if not custom:
            raise ValueError("custom schedule requires breakpoints")
        table = tuple(custom)
    else:
        table = SCHEDULES[dataset]
    for bound, lr in table:
        if bound is None or step < bound:
            return lr
    return table[-1][1]


@dataclass
class OptimizerState:
    """Adam accumulators, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def as_arrays(self) -> dict:
        out = {"adam.step": np.array(float(self.step))}
        for name, arr in self.m.items():
            out[f"adam.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam.v.{name}"] = arr
        return out

    def load_arrays(self, extra: dict, dtype):
        self.step = int(extra.get("adam.step", 0.0))
        for key, arr in extra.items():
            if key.startswith("adam.m."):
                self.m[key[len("adam.m."):]] = arr.astype(dtype)
            elif key.startswith("adam.v."):
                self.v[key[len("adam.v."):]] = arr.astype(dtype)


def optimizer_step(named_params, state: OptimizerState, lr: float):
    """One Adam update in place; gradients are read from each tensor."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise T.NumericError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# training loop


TRACE_COLUMNS = ["step", "lr", "loss", "nonzero_fraction", "wall_ms"]


def train(
    params: ScnParams,
    index: DatasetIndex,
    batch_spec: BatchSpec,
    triplet_cfg: TripletConfig,
    iterations: int,
    out_dir,
    seed: int = 0,
    schedule: str = "custom",
    custom_schedule=((None, 1e-3),),
    checkpoint_every: int = 1000,
    resume_from=None,
    log_every: int = 50,
    quiet: bool = False,
) -> str:
    """Run the loop; returns the final checkpoint path.

    Batches are a pure function of (seed, step), so resuming from a
    checkpoint continues bit-identically: the checkpoint carries parameters,
    Adam moments, and the step counter.
    """
    os.makedirs(str(out_dir), exist_ok=True)
    state = OptimizerState()
    start = 0
    if resume_from is not None:
        start, extra = load_checkpoint(resume_from, params)
        state.load_arrays(extra, params.config.np_dtype)
    named = params.named_parameters()
    dtype = params.config.np_dtype

    trace_path = os.path.join(str(out_dir), "trace.csv")
    mode = "a" if resume_from is not None and os.path.exists(trace_path) else "w"
    ckpt_path = os.path.join(str(out_dir), f"ckpt_{start}.scn")
    if start == 0:
        save_checkpoint(ckpt_path, params, extra=state.as_arrays(), step=0)
    with open(trace_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(TRACE_COLUMNS)
        for step in range(start, iterations):
            t0 = time.perf_counter()
            labels, segments = sample_batch(index, batch_spec, seed, step)
            seqs = [T.Tensor(s.astype(dtype)) for s in segments]
            lr = lr_schedule(step, schedule, custom_schedule)
            with T.Tape() as tape:
                feats = scn_forward_many(params, seqs)
                loss, nonzero = triplet_loss_ba(feats, labels, triplet_cfg)
                tape.backward(loss)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise T.NumericError(f"non-finite loss at step {step}")
            optimizer_step(named, state, lr)
            for _, p in named:
                p.zero_grad()
            wall_ms = (time.perf_counter() - t0) * 1e3
            writer.writerow([step, lr, f"{loss_val:.8f}", f"{nonzero:.6f}", f"{wall_ms:.2f}"])
            if not quiet and (step % log_every == 0 or step == iterations - 1):
                print(
                    f"step {step:6d}  lr {lr:.1e}  loss {loss_val:.5f}  "
                    f"active {nonzero:.3f}  {wall_ms:.0f} ms",
                    flush=True,
                )
            if checkpoint_every and (step + 1) % checkpoint_every == 0 and step + 1 < iterations:
                p_out = os.path.join(str(out_dir), f"ckpt_{step + 1}.scn")
                save_checkpoint(p_out, params, extra=state.as_arrays(), step=step + 1)
    final_path = os.path.join(str(out_dir), f"ckpt_{iterations}.scn")
    save_checkpoint(final_path, params, extra=state.as_arrays(), step=iterations)
    return final_path
