import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qdvox import controller as ctl
from qdvox import morphology as morph
from qdvox.errors import DegenerateDataset, EmptyMorphology
from qdvox.sim import TaskConfig

RANGE = (0.6, 1.6)


def random_params(rng, n_in, n_out, hidden, scale=0.5):
    return ctl.ControllerParams(rng.normal(0, scale, (hidden, n_in)), rng.normal(0, scale, hidden),
                                rng.normal(0, scale, (n_out, hidden)), rng.normal(0, scale, n_out))


def decodable(rng, w=5, h=5):
    while True:
        try:
            return morph.decode(morph.initial_genome(rng), w, h)
        except EmptyMorphology:
            continue


def dataset(obs, act):
    n = len(obs)
    return ctl.RolloutDataset(obs, act, np.zeros(n, int), np.zeros(n, int))


# ---------------------------------------------------------------- forward

def test_zero_network_outputs_midpoint():
    p = ctl.ControllerParams(np.zeros((32, 12)), np.zeros(32), np.zeros((2, 32)), np.zeros(2))
    out = ctl.forward(p, np.random.default_rng(0).normal(size=12), RANGE)
    np.testing.assert_allclose(out, 1.1)


def test_large_bias_saturates_at_bound():
    p = ctl.init_params(12, 2, np.random.default_rng(0))
    p.b2[:] = (50.0, -50.0)
    out = ctl.forward(p, np.zeros(12), RANGE)
    assert out[0] == pytest.approx(1.6, abs=1e-15) and out[1] == pytest.approx(0.6, abs=1e-15)


def test_forward_toy_by_hand():
    # 2 voxels -> 12 inputs, 2 hidden units, 2 outputs
    W1 = np.zeros((2, 12))
    W1[0, 0], W1[0, 6], W1[1, 1] = 0.5, -0.25, 2.0
    b1 = np.array([0.1, -0.3])
    W2 = np.array([[1.0, -1.0], [0.5, 0.5]])
    b2 = np.array([0.0, 0.2])
    obs = np.zeros(12)
    obs[0], obs[1], obs[6] = 1.0, 0.2, 0.8
    h0 = math.tanh(0.5 * 1.0 - 0.25 * 0.8 + 0.1)
    h1 = math.tanh(2.0 * 0.2 - 0.3)
    z = (h0 - h1, 0.5 * h0 + 0.5 * h1 + 0.2)
    expected = [1.1 + 0.5 * math.tanh(v) for v in z]
    out = ctl.forward(ctl.ControllerParams(W1, b1, W2, b2), obs, RANGE)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_actions_always_within_range(seed, scale):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 12, 2, 8, scale)
    out = ctl.forward(p, rng.normal(0, scale, (50, 12)), RANGE)
    assert (out >= RANGE[0]).all() and (out <= RANGE[1]).all()


def test_batch_and_single_forward_agree(rng):
    p = random_params(rng, 12, 2, 32)
    obs = rng.normal(size=(5, 12))
    np.testing.assert_allclose(ctl.forward(p, obs), np.stack([ctl.forward(p, o) for o in obs]), rtol=1e-14)


def test_dims_for_box():
    assert ctl.dims_for_box(5, 5) == (150, 25)
    p = ctl.init_params(*ctl.dims_for_box(10, 10), np.random.default_rng(0))
    assert p.W1.shape == (32, 600) and p.W2.shape == (100, 32)
    assert not p.b1.any() and not p.b2.any()


# --------------------------------------------------------- mutation/noise

def test_zero_sigma_mutation_is_identity(rng):
    p = random_params(rng, 12, 2, 32)
    q = ctl.mutate(p, rng, sigma=0.0)
    assert q.to_bytes() == p.to_bytes() and q is not p


def test_mutation_preserves_shapes_and_changes_all_entries(rng):
    p = random_params(rng, 12, 2, 32)
    q = ctl.mutate(p, rng)
    assert [t.shape for t in q.tensors()] == [t.shape for t in p.tensors()]
    assert (q.flat() != p.flat()).all()


def test_mutation_half_normal_mean():
    rng = np.random.default_rng(99)
    p = ctl.ControllerParams(np.zeros((1000, 990)), np.zeros(1000), np.zeros((10, 1000)), np.zeros(10))
    delta = np.abs(ctl.mutate(p, rng, 0.1).flat())
    assert delta.size >= 1_000_000
    assert abs(delta.mean() - 0.1 * math.sqrt(2 / math.pi)) < 0.001


def test_apply_noise():
    v = np.arange(5.0)
    np.testing.assert_array_equal(ctl.apply_noise(v, 0.0, np.random.default_rng(0)), v)
    a = ctl.apply_noise(v, 0.01, np.random.default_rng(4))
    b = ctl.apply_noise(v, 0.01, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    draws = ctl.apply_noise(np.zeros(1_000_000), 0.01, np.random.default_rng(5))
    assert abs(draws.var() / 1e-4 - 1.0) < 0.01


def test_noise_spec_rejects_negative():
    with pytest.raises(ValueError):
        ctl.NoiseSpec(obs_sigma=-0.1)


# -------------------------------------------------------------- gradient

def test_gradient_zero_at_fit(rng):
    p = random_params(rng, 6, 3, 4)
    obs = rng.normal(size=(10, 6))
    g = ctl.gradient(p, obs, ctl.forward(p, obs))
    assert all(not t.any() for t in g.tensors())


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        n_in, n_out, hidden, rows = (int(v) for v in rng.integers(1, 6, 4))
        p = random_params(rng, n_in, n_out, hidden)
        obs = rng.normal(size=(rows, n_in))
        tgt = rng.uniform(*RANGE, size=(rows, n_out))
        g = ctl.gradient(p, obs, tgt)
        for t, gt in zip(p.tensors(), g.tensors()):
            flat, gflat = t.reshape(-1), gt.reshape(-1)
            for k in range(flat.size):
                keep = flat[k]
                flat[k] = keep + 1e-5
                up = ctl.mse(p, obs, tgt)
                flat[k] = keep - 1e-5
                down = ctl.mse(p, obs, tgt)
                flat[k] = keep
                fd = (up - down) / 2e-5
                worst = max(worst, abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), 1e-8))
    assert worst < 1e-4


def test_output_bias_gradient_is_linear_in_targets():
    # with a symmetric range the zero network predicts 0, so residuals are the targets
    sym = (-1.0, 1.0)
    p = ctl.ControllerParams(np.zeros((4, 3)), np.zeros(4), np.zeros((2, 4)), np.zeros(2))
    obs = np.random.default_rng(0).normal(size=(7, 3))
    tgt = np.random.default_rng(1).uniform(-0.5, 0.5, (7, 2))
    g1 = ctl.gradient(p, obs, tgt, sym).b2
    g2 = ctl.gradient(p, obs, 2 * tgt, sym).b2
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-14)


# --------------------------------------------------------------- datasets

def test_dataset_row_counts_and_determinism():
    rng = np.random.default_rng(8)
    cfg = TaskConfig(goal_x=1e9)
    teachers = [(decodable(rng), ctl.init_params(150, 25, rng)) for _ in range(5)]
    one = ctl.collect_dataset(teachers[:1], 1, 3, cfg)
    assert len(one) == 200
    assert one.obs.shape == (200, 150) and one.act.shape == (200, 25)
    full = ctl.collect_dataset(teachers, 5, 3, cfg)
    assert len(full) == 5000
    assert sorted(set(full.teacher.tolist())) == list(range(5))
    again = ctl.collect_dataset(teachers, 5, 3, cfg)
    assert np.array_equal(full.obs, again.obs) and np.array_equal(full.act, again.act)


def test_dataset_needs_a_teacher():
    with pytest.raises(ValueError):
        ctl.collect_dataset([], 1, 0)


# ------------------------------------------------------------ distillation

def test_self_distillation_fixed_point():
    rng = np.random.default_rng(10)
    teacher = ctl.init_params(150, 25, rng)
    noise = ctl.NoiseSpec(0.0, 0.0, 0.1)
    ds = ctl.collect_dataset([(decodable(rng), teacher)], 2, 0, TaskConfig(), noise)
    _, curve = ctl.distill(ds, teacher, rng=np.random.default_rng(0))
    assert curve[0] < 1e-20
    assert curve.max() < 1e-6


def test_linear_teacher_is_learned():
    rng = np.random.default_rng(0)
    A = rng.normal(0, 0.03, (2, 12))
    obs = rng.normal(0, 1, (3000, 12))
    ds = dataset(obs, 1.1 + obs @ A.T)
    init = ctl.init_params(12, 2, np.random.default_rng(1))
    _, curve = ctl.distill(ds, init, rng=np.random.default_rng(2))
    assert curve[-1] < 1e-3


def test_distilled_loss_trends_down():
    rng = np.random.default_rng(12)
    teachers = [(decodable(rng), ctl.init_params(150, 25, rng)) for _ in range(3)]
    ds = ctl.collect_dataset(teachers, 2, 1, TaskConfig())
    init = ctl.init_params(150, 25, np.random.default_rng(13))
    _, curve = ctl.distill(ds, init, ctl.DistillConfig(epochs=60), np.random.default_rng(1))
    assert len(curve) == 61
    smooth = np.convolve(curve[1:], np.ones(10) / 10, mode="valid")
    assert (np.diff(smooth) <= 1e-3 * smooth[:-1]).all()


@pytest.mark.parametrize("n_teachers", [1, 5])
def test_pollination_sized_dataset_loses_ninety_percent(n_teachers):
    rng = np.random.default_rng(20 + n_teachers)
    teachers = [(decodable(rng), ctl.init_params(150, 25, rng)) for _ in range(n_teachers)]
    ds = ctl.collect_dataset(teachers, 5, 2, TaskConfig())
    init = ctl.init_params(150, 25, np.random.default_rng(7))
    _, curve = ctl.distill(ds, init, rng=np.random.default_rng(8))
    assert curve[-1] <= 0.1 * curve[0]


def test_distill_rejects_tiny_dataset(rng):
    ds = dataset(rng.normal(size=(10, 12)), np.ones((10, 2)))
    with pytest.raises(DegenerateDataset):
        ctl.distill(ds, ctl.init_params(12, 2, rng))


def test_distill_is_deterministic(rng):
    obs = rng.normal(size=(200, 12))
    ds = dataset(obs, np.full((200, 2), 1.3))
    init = ctl.init_params(12, 2, rng)
    hyper = ctl.DistillConfig(epochs=5)
    a = ctl.distill(ds, init, hyper, np.random.default_rng(3))
    b = ctl.distill(ds, init, hyper, np.random.default_rng(3))
    assert a[0].to_bytes() == b[0].to_bytes() and np.array_equal(a[1], b[1])
    assert init.to_bytes() == ctl.distill(ds, init, ctl.DistillConfig(epochs=0))[0].to_bytes()


# -------------------------------------------------------------- serialising

def test_params_binary_layout(tmp_path, rng):
    p = random_params(rng, 6, 2, 3)
    blob = p.to_bytes()
    assert len(blob) == 8 * (18 + 3 + 6 + 2)
    assert struct.unpack("<d", blob[:8])[0] == p.W1[0, 0]
    assert struct.unpack("<d", blob[8 * 18:8 * 19])[0] == p.b1[0]
    ctl.save_params(p, tmp_path / "ctrl")
    q = ctl.load_params(tmp_path / "ctrl")
    assert q.to_bytes() == blob and q.dims == p.dims


def test_from_bytes_rejects_wrong_size():
    with pytest.raises(ValueError):
        ctl.ControllerParams.from_bytes(b"\0" * 16, 2, 2, 2)
