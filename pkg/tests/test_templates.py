import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scngait import tensor as T
from scngait import templates as tp
from scngait.pgm import read_pgm


def seq(values, c=1, h=1, w=1):
    arr = np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1)
    return T.Tensor(np.broadcast_to(arr, (arr.shape[0], c, h, w)).copy())


def rand_seq(rng, n, c=2, h=3, w=2):
    return T.Tensor(rng.standard_normal((n, c, h, w)))


def test_diff_constant_sequence_is_zero():
    f = seq([2.0] * 5, c=2, h=2, w=2)
    t = tp.template_diff(f)
    assert len(t) == 4 and t.kind == "diff" and t.center_offset == 0
    np.testing.assert_array_equal(t.maps.data, 0.0)


def test_diff_hand_values():
    t = tp.template_diff(seq([1.0, 3.0, 2.0]))
    np.testing.assert_array_equal(t.maps.data.reshape(-1), [2.0, 1.0])


def test_diff_length_contract():
    assert len(tp.template_diff(seq(range(5)))) == 4


def test_multi_diff_hand_values():
    t = tp.template_multi_diff(seq([1.0, 3.0, 2.0, 5.0]))
    assert t.center_offset == 1
    np.testing.assert_array_equal(t.maps.data.reshape(-1), [3.0, 4.0])


def test_multi_diff_constant_zero():
    t = tp.template_multi_diff(seq([4.0] * 6))
    assert len(t) == 4
    np.testing.assert_array_equal(t.maps.data, 0.0)


def test_multi_diff_length_contract_n30():
    assert len(tp.template_multi_diff(seq(range(30)))) == 28


def test_static_excl_constant_zero():
    for f in ("mean", "median"):
        t = tp.template_static_excl(seq([3.0] * 4), filter=f)
        assert len(t) == 4 and t.center_offset == 0
        np.testing.assert_array_equal(t.maps.data, 0.0)


def test_static_excl_median_hand():
    t = tp.template_static_excl(seq([1.0, 2.0, 9.0]), filter="median")
    np.testing.assert_array_equal(t.maps.data.reshape(-1), [1.0, 0.0, 7.0])


def test_static_excl_mean_hand():
    t = tp.template_static_excl(seq([0.0, 4.0]), filter="mean")
    np.testing.assert_array_equal(t.maps.data.reshape(-1), [2.0, 2.0])


def test_too_short_errors():
    with pytest.raises(tp.SequenceTooShortError):
        tp.template_diff(seq([1.0]))
    with pytest.raises(tp.SequenceTooShortError):
        tp.template_multi_diff(seq([1.0, 2.0]))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(min_value=3, max_value=100), seed=st.integers(0, 2**31))
def test_length_contracts_and_nonnegativity(n, seed):
    rng = np.random.default_rng(seed)
    f = rand_seq(rng, n, c=1, h=2, w=2)
    for spec, m in [("diff", n - 1), ("multi_diff", n - 2), ("static_excl_mean", n), ("static_excl_median", n)]:
        t = tp.make_template(f, spec)
        assert len(t) == m == tp.template_length(spec, n)
        assert (t.maps.data >= 0).all()


def test_property_sweep_all_lengths_3_to_60():
    rng = np.random.default_rng(0)
    for n in range(3, 61):
        f = rand_seq(rng, n, c=1, h=1, w=1)
        assert len(tp.template_diff(f)) == n - 1
        assert len(tp.template_multi_diff(f)) == n - 2
        assert len(tp.template_static_excl(f, "mean")) == n


def test_order_sensitivity_vs_set_pooling():
    """Some frame permutation changes the diff template while the per-frame
    max over the set stays put: the temporal signal is order-dependent."""
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((6, 1, 2, 2))
        perm = rng.permutation(6)
        while (perm == np.arange(6)).all():
            perm = rng.permutation(6)
        fp = f[perm]
        t0 = tp.template_diff(T.Tensor(f)).maps.data
        t1 = tp.template_diff(T.Tensor(fp)).maps.data
        set_pool0 = f.max(axis=0)
        set_pool1 = fp.max(axis=0)
        np.testing.assert_array_equal(set_pool0, set_pool1)
        if not np.array_equal(t0, t1):
            hits += 1
    assert hits == 100


def test_median_outlier_localization():
    """Odd-length sequence, one outlier frame, others identical: the median
    static estimate matches the common frame, so only the outlier survives."""
    f = seq([5.0, 5.0, 9.0, 5.0, 5.0])
    t = tp.template_static_excl(f, filter="median")
    np.testing.assert_array_equal(t.maps.data.reshape(-1), [0.0, 0.0, 4.0, 0.0, 0.0])


def test_templates_are_differentiable():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.uniform(0.2, 1.0, size=(5, 1, 2, 2)) * rng.choice([-1, 1], size=(5, 1, 2, 2)))
    w = rng.standard_normal((5, 1, 2, 2))

    def fn(v):
        t = tp.template_static_excl(v, "mean")
        return T.sum_all(T.mul(t.maps, T.Tensor(w)))

    assert T.grad_check(fn, x) <= 1e-6

    w2 = rng.standard_normal((3, 1, 2, 2))

    def fn_md(v):
        t = tp.template_multi_diff(v)
        return T.sum_all(T.mul(t.maps, T.Tensor(w2)))

    assert T.grad_check(fn_md, x) <= 1e-6


def test_pgm_dump_layout(tmp_path):
    rng = np.random.default_rng(4)
    f = rand_seq(rng, 5, c=2, h=4, w=3)
    t = tp.template_diff(f)
    paths = tp.dump_template_pgms(t, stage=1, out_dir=tmp_path)
    assert len(paths) == 4
    assert paths[0].endswith("stage1/t0.pgm")
    img = read_pgm(paths[0])
    assert img.shape == (4, 3)
    assert img.max() == 255 or (t.maps.data[0].mean(axis=0).ptp() == 0)
