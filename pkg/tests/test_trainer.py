import csv
import dataclasses

import numpy as np
import pytest

from scngait import data as D
from scngait import network as nw
from scngait import tensor as T
from scngait import trainer as tr


def feats_from_rows(rows):
    return T.Tensor(np.asarray(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# triplet loss


def test_satisfied_triplet_contributes_zero():
    # two subjects, two identical features each; cross distance 1
    rows = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]
    loss, nonzero = tr.triplet_loss_ba(feats_from_rows(rows), [1, 1, 2, 2], tr.TripletConfig(margin=0.2))
    assert loss.item() == 0.0
    assert nonzero == 0.0


def test_equal_distances_hinge_and_paper_normalization():
    # d_ap = d_an = 0.5 for every triplet -> hinge = M; paper_2M contribution 0.5
    a = [0.0, 0.0]
    b = [0.5, 0.0]
    c = [0.25, np.sqrt(0.5 ** 2 - 0.25 ** 2)]
    rows = [a, b, c, (np.asarray(c) + np.asarray([0.0, 0.0])).tolist()]
    # construct directly: subjects {1: [a,b]}, {2: [c,c]} with d(a,b)=0.5 and
    # d(a,c)=d(b,c)=0.5 by the equilateral construction
    labels = [1, 1, 2, 2]
    loss, nonzero = tr.triplet_loss_ba(feats_from_rows(rows), labels, tr.TripletConfig(margin=0.2))
    # 8 triplets total; the 4 subject-1 anchors see d_ap = d_an = 0.5 and
    # hinge at exactly M = 0.2 (paper_2M contribution 0.2 / (2 * 0.2) = 0.5
    # each); the 4 subject-2 anchors have d_ap = 0 and satisfy the margin
    assert nonzero == pytest.approx(4 / 8)
    assert loss.item() == pytest.approx((4 * 0.2) / (2 * 0.2 * 8))


def test_triplet_count_paper_batch():
    rng = np.random.default_rng(0)
    p, k = 8, 6
    labels = np.repeat(np.arange(p), k)
    mask = tr.triplet_masks(labels)
    assert mask.sum() == 48 * 5 * 42 == 10080
    rows = rng.standard_normal((p * k, 7))
    loss, nonzero = tr.triplet_loss_ba(feats_from_rows(rows), labels, tr.TripletConfig())
    assert 0.0 <= nonzero <= 1.0 and np.isfinite(loss.item())


def test_loss_zero_iff_margin_satisfied():
    cfg = tr.TripletConfig(margin=0.2)
    rows = [[0.0], [0.01], [1.0], [1.01]]
    labels = [1, 1, 2, 2]
    loss, _ = tr.triplet_loss_ba(feats_from_rows(rows), labels, cfg)
    assert loss.item() == 0.0  # d_an - d_ap >= 0.98 >= M everywhere
    rows_bad = [[0.0], [0.01], [0.1], [0.11]]
    loss_bad, frac = tr.triplet_loss_ba(feats_from_rows(rows_bad), labels, cfg)
    assert loss_bad.item() > 0.0 and frac > 0.0


def test_loss_invariant_under_relabeling():
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((8, 5))
    labels = [1, 1, 2, 2, 3, 3, 4, 4]
    relabeled = [10 * l + 7 for l in labels]
    cfg = tr.TripletConfig()
    l1, f1 = tr.triplet_loss_ba(feats_from_rows(rows), labels, cfg)
    l2, f2 = tr.triplet_loss_ba(feats_from_rows(rows), relabeled, cfg)
    assert l1.item() == l2.item() and f1 == f2


def test_identical_features_nonzero_fraction_one():
    rows = np.ones((6, 4))
    loss, frac = tr.triplet_loss_ba(feats_from_rows(rows), [1, 1, 1, 2, 2, 2], tr.TripletConfig())
    assert frac == 1.0
    assert loss.item() > 0.0


def test_as_written_convention_flips_sign():
    rows = [[0.0], [0.05], [2.0], [2.05]]
    labels = [1, 1, 2, 2]
    std, _ = tr.triplet_loss_ba(feats_from_rows(rows), labels, tr.TripletConfig(sign_convention="standard"))
    aw, _ = tr.triplet_loss_ba(feats_from_rows(rows), labels, tr.TripletConfig(sign_convention="as_written"))
    assert std.item() == 0.0  # wide separation satisfies the standard form
    assert aw.item() > 0.0  # ... and violates the printed form


def test_plain_mean_normalization():
    rows = [[0.0], [0.0], [0.1], [0.1]]
    labels = [1, 1, 2, 2]
    cfg = tr.TripletConfig(margin=0.2, normalization="plain_mean")
    loss, frac = tr.triplet_loss_ba(feats_from_rows(rows), labels, cfg)
    # every active triplet hinges at M + d_ap - d_an = 0.2 - 0.1 = 0.1
    assert loss.item() == pytest.approx(0.1)
    assert frac == 1.0


def test_batch_composition_errors():
    with pytest.raises(tr.BatchCompositionError):
        tr.triplet_loss_ba(feats_from_rows([[0.0], [1.0]]), [1, 2], tr.TripletConfig())
    with pytest.raises(tr.BatchCompositionError):
        tr.triplet_loss_ba(feats_from_rows([[0.0]] * 4), [1, 1, 1, 1], tr.TripletConfig())


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    rows = rng.standard_normal((6, 4))
    labels = [1, 1, 1, 2, 2, 2]
    cfg = tr.TripletConfig(margin=0.2)

    def fn(v):
        loss, _ = tr.triplet_loss_ba(v, labels, cfg)
        return loss

    err = T.grad_check(fn, feats_from_rows(rows), h=1e-6)
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# schedule


def test_lr_schedule_breakpoints():
    assert tr.lr_schedule(9_999, "casia_b") == 1e-3
    assert tr.lr_schedule(10_000, "casia_b") == 1e-4
    assert tr.lr_schedule(80_000, "casia_b") == 1e-5
    assert tr.lr_schedule(49_999, "ou_mvlp") == 1e-3
    assert tr.lr_schedule(50_000, "ou_mvlp") == 1e-4
    assert tr.lr_schedule(200_000, "ou_mvlp") == 1e-5
    assert tr.lr_schedule(5, "custom", ((10, 0.5), (None, 0.25))) == 0.5
    assert tr.lr_schedule(10, "custom", ((10, 0.5), (None, 0.25))) == 0.25


# ---------------------------------------------------------------------------
# Adam


def named_scalar(value=0.0):
    p = T.Tensor(np.array(value), requires_grad=True)
    return [("w", p)], p


def test_adam_zero_gradient_keeps_params():
    named, p = named_scalar(1.5)
    state = tr.OptimizerState()
    p.grad = np.array(0.0)
    tr.optimizer_step(named, state, lr=0.1)
    assert p.data == 1.5


def test_adam_first_step_magnitude():
    named, p = named_scalar(0.0)
    state = tr.OptimizerState()
    p.grad = np.array(1.0)
    tr.optimizer_step(named, state, lr=0.01)
    # bias-corrected first step: -lr * g / (|g| + eps) ~ -lr
    assert p.data == pytest.approx(-0.01, rel=1e-6)


def test_adam_constant_gradient_unit_step():
    named, p = named_scalar(0.0)
    state = tr.OptimizerState()
    lr = 0.003
    steps = []
    for _ in range(1000):
        before = float(p.data)
        p.grad = np.array(1.0)
        tr.optimizer_step(named, state, lr=lr)
        steps.append(before - float(p.data))
    assert steps[-1] == pytest.approx(lr, rel=1e-3)


def test_adam_nonfinite_gradient_names_parameter():
    named, p = named_scalar(0.0)
    p.grad = np.array(np.nan)
    with pytest.raises(T.NumericError, match="w"):
        tr.optimizer_step(named, tr.OptimizerState(), lr=0.1)


def test_adam_moments_decay_toward_zero():
    named, p = named_scalar(0.0)
    state = tr.OptimizerState()
    p.grad = np.array(1.0)
    tr.optimizer_step(named, state, lr=0.0)
    m0 = abs(float(state.m["w"]))
    for _ in range(50):
        p.grad = np.array(0.0)
        tr.optimizer_step(named, state, lr=0.0)
    assert abs(float(state.m["w"])) < m0 * 0.01


# ---------------------------------------------------------------------------
# the loop


TINY = nw.ScnConfig(channels=(2, 4, 8), input_hw=(64, 44), window_len=3,
                    template="static_excl_mean", fusion="micro", dtype="float64")


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return D.synth_generate(
        D.SynthSpec(subjects=3, views=(0,), sequences=2, frames=16, seed=11), root
    )


def test_zero_iterations_checkpoint_equals_init(tmp_path, tiny_dataset):
    rng = np.random.default_rng(3)
    params = nw.init_params(TINY, rng)
    init_vals = {n: t.data.copy() for n, t in params.named_parameters()}
    path = tr.train(params, tiny_dataset, D.BatchSpec(2, 2, 8), tr.TripletConfig(),
                    iterations=0, out_dir=tmp_path, seed=5, quiet=True)
    params2 = nw.init_params(TINY, np.random.default_rng(77))
    nw.load_checkpoint(path, params2)
    for n, t in params2.named_parameters():
        np.testing.assert_array_equal(t.data, init_vals[n])


def test_train_writes_trace_and_checkpoints(tmp_path, tiny_dataset):
    rng = np.random.default_rng(4)
    params = nw.init_params(TINY, rng)
    tr.train(params, tiny_dataset, D.BatchSpec(2, 2, 8), tr.TripletConfig(),
             iterations=3, out_dir=tmp_path, seed=5, quiet=True)
    with open(tmp_path / "trace.csv") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == tr.TRACE_COLUMNS
    assert len(lines) == 4
    assert (tmp_path / "ckpt_3.scn").exists()


def test_resume_is_bit_identical(tmp_path, tiny_dataset):
    spec = D.BatchSpec(2, 2, 8)
    cfg = tr.TripletConfig()

    params_a = nw.init_params(TINY, np.random.default_rng(8))
    tr.train(params_a, tiny_dataset, spec, cfg, iterations=4,
             out_dir=tmp_path / "a", seed=9, quiet=True)

    params_b = nw.init_params(TINY, np.random.default_rng(8))
    tr.train(params_b, tiny_dataset, spec, cfg, iterations=2,
             out_dir=tmp_path / "b", seed=9, quiet=True, checkpoint_every=0)
    tr.train(params_b, tiny_dataset, spec, cfg, iterations=4,
             out_dir=tmp_path / "b", seed=9, quiet=True,
             resume_from=tmp_path / "b" / "ckpt_2.scn")

    for (n1, t1), (n2, t2) in zip(params_a.named_parameters(), params_b.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)

    with open(tmp_path / "a" / "trace.csv") as fh:
        trace_a = {row[0]: row[2] for row in csv.reader(fh) if row and row[0] != "step"}
    with open(tmp_path / "b" / "trace.csv") as fh:
        trace_b = {row[0]: row[2] for row in csv.reader(fh) if row and row[0] != "step"}
    assert trace_a["3"] == trace_b["3"]
