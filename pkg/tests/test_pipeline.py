import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convcaps3d import loss as losses
from convcaps3d.model import ModelConfig, build_convcaps
from convcaps3d.pipeline import (
    Adam,
    PhantomSpec,
    ScheduleState,
    TrainConfig,
    TrainingError,
    compute_losses,
    generate_phantom,
    normalize,
    read_labels,
    read_volume,
    sample_patches,
    schedule_update,
    sliding_window_infer,
    sliding_window_probs,
    train_step,
    write_labels,
    write_volume,
)
from convcaps3d.pipeline.infer import tile_starts
from convcaps3d.pipeline.volio import sidecar_path
from convcaps3d.tensor import backward


def tiny_net(seed=0, **overrides):
    return build_convcaps(ModelConfig.tiny(**overrides), seed=seed)


def phantom_patch(seed, size=16):
    img, lab = generate_phantom(PhantomSpec((32, 32, 32), 2, 1, 0.05, seed))
    return sample_patches(img, lab, size, 1, 1.0, seed=seed)[0]


# ---- normalization ---------------------------------------------------------

def test_normalize_examples():
    v = np.stack([np.linspace(10, 20, 8), np.full(8, 3.0)], -1).reshape(2, 2, 2, 2)
    out = normalize(v)
    assert out[..., 0].min() == 0.0 and out[..., 0].max() == 1.0
    assert np.all(out[..., 1] == 0.0)
    np.testing.assert_array_equal(normalize(np.array([0.0, 5.0, 10.0]).reshape(3, 1, 1)).ravel(),
                                  [0.0, 0.5, 1.0])


def test_normalize_rejects_nan():
    with pytest.raises(ValueError):
        normalize(np.array([[[np.nan]]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100), st.floats(0.01, 100))
def test_normalize_idempotent(seed, shift, scale):
    v = np.random.default_rng(seed).normal(size=(3, 4, 5, 2)) * scale + shift
    once = normalize(v)
    assert np.abs(normalize(once) - once).max() < 1e-7


# ---- phantoms and patches --------------------------------------------------

def test_phantom_deterministic_and_label_range():
    spec = PhantomSpec((32, 32, 32), seed=3)
    a_img, a_lab = generate_phantom(spec)
    b_img, b_lab = generate_phantom(spec)
    assert a_img.tobytes() == b_img.tobytes() and a_lab.tobytes() == b_lab.tobytes()
    assert set(np.unique(a_lab)) <= {0, 1, 2, 3}
    assert a_img.shape == (32, 32, 32, 2) and a_img.dtype == np.float32
    assert a_img.min() == 0.0 and a_img.max() == 1.0


def test_phantom_shells_are_nested():
    img, lab = generate_phantom(PhantomSpec((32, 32, 32), seed=1))
    # every inner class is enclosed: its 6-neighbours carry the same or the next outer class
    for cls in (2, 3):
        inner = np.argwhere(lab == cls)
        for d in np.eye(3, dtype=int):
            for sign in (1, -1):
                nb = lab[tuple((inner + sign * d).T)]
                assert np.all((nb == cls) | (nb == cls - 1) | (nb == cls + 1))
        assert (lab == cls).sum() < (lab >= cls - 1).sum()


@pytest.mark.slow
def test_phantom_foreground_fraction_over_seeds():
    fracs = [(generate_phantom(PhantomSpec(seed=s))[1] > 0).mean() for s in range(20)]
    assert 0.05 <= min(fracs) and max(fracs) <= 0.6


def test_phantom_too_small():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec((8, 8, 8)))


def test_patch_full_volume():
    img = np.random.default_rng(0).uniform(size=(8, 8, 8, 1))
    lab = np.zeros((8, 8, 8), dtype=np.uint8)
    (p, pl), = sample_patches(img, lab, 8, 1, 0.5)
    assert np.array_equal(p, img) and np.array_equal(pl, lab)


def test_patch_fg_bias_one_hits_single_voxel():
    lab = np.zeros((20, 20, 20), dtype=np.uint8)
    lab[19, 0, 7] = 1
    img = np.zeros((20, 20, 20, 1))
    for _, pl in sample_patches(img, lab, 8, 50, 1.0, seed=4):
        assert pl.sum() == 1


def test_patch_fg_bias_rate():
    img, lab = generate_phantom(PhantomSpec((32, 32, 32), 4, 1, seed=2))
    for seed in range(3):
        patches = sample_patches(img, lab, 8, 100, 0.9, seed=seed)
        assert sum(int(pl.any()) for _, pl in patches) >= 80


def test_patch_deterministic_and_size_check():
    img, lab = generate_phantom(PhantomSpec((16, 16, 16), 2, 1))
    a = sample_patches(img, lab, 8, 5, 0.5, seed=9)
    b = sample_patches(img, lab, 8, 5, 0.5, seed=9)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        sample_patches(img, lab, 24, 1, 0.5)


# ---- training step ---------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_unchanged():
    net = tiny_net()
    before = {k: p.data.tobytes() for k, p in net.named_parameters().items()}
    train_step(net, [phantom_patch(0)], Adam(net.parameters()), 0.0, weight_decay=2e-6)
    assert {k: p.data.tobytes() for k, p in net.named_parameters().items()} == before


def test_zero_loss_weights_give_zero_gradients():
    net = tiny_net(margin_weight=0.0, ce_weight=0.0, reconstruction_weight=0.0)
    img, lab = phantom_patch(1)
    _, m, c, r = compute_losses(net, img[None], lab[None].astype(np.int64))
    backward(losses.total_loss(m, c, r, (0.0, 0.0, 0.0)))
    for p in net.parameters():
        assert p.grad is None or not p.grad.any()


def test_train_step_returns_consistent_report_and_clears_grads():
    net = tiny_net()
    rep = train_step(net, [phantom_patch(2)], Adam(net.parameters()), 1e-4)
    assert abs(rep.total - (rep.margin + rep.ce + rep.recon)) < 1e-9
    assert all(p.grad is None for p in net.parameters())


@pytest.mark.slow
def test_one_step_decreases_loss_for_most_seeds():
    wins = 0
    for seed in range(20):
        net = tiny_net(seed)
        img, lab = phantom_patch(seed)
        batch = [(img, lab)]
        before = train_step(net, batch, Adam(net.parameters()), 1e-4).total
        _, m, c, r = compute_losses(net, img[None], lab[None].astype(np.int64))
        wins += losses.total_loss(m.item(), c.item(), r.item()).total < before
    assert wins >= 18


def test_nan_input_aborts_with_diagnostic():
    net = tiny_net()
    img, lab = phantom_patch(0)
    img = img.copy()
    img[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite values produced by op"):
        train_step(net, [(img, lab)], Adam(net.parameters()), 1e-4)


def test_train_step_rejects_indivisible_patch():
    net = tiny_net()
    with pytest.raises(ValueError):
        train_step(net, [(np.zeros((12, 16, 16, 1)), np.zeros((12, 16, 16), int))],
                   Adam(net.parameters()), 1e-4)


def test_adam_first_step_moves_by_lr():
    from convcaps3d.tensor import Tensor

    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    Adam([p]).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patch_size=(20, 32, 32))
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


# ---- schedule --------------------------------------------------------------

def replay(trace, cfg):
    state = ScheduleState(cfg.learning_rate)
    out = []
    for it, val in trace:
        state = schedule_update(state, val, it, cfg)
        out.append(state)
    return out


def test_improving_dice_keeps_lr():
    cfg = TrainConfig()
    trace = [(i * 100, 0.1 + i * 1e-3) for i in range(1, 1500)]
    states = replay(trace, cfg)
    assert all(s.lr == 1e-4 and not s.stop for s in states)


def test_flat_dice_decays_after_plateau_and_stops_after_patience():
    cfg = TrainConfig()
    states = replay([(i * 100, 0.5) for i in range(1, 1001)], cfg)
    by_iter = {i * 100: s for i, s in enumerate(states, 1)}
    # best set at iteration 100; stagnation counted from there
    assert not by_iter[25_000].stop and by_iter[25_100].stop
    assert by_iter[50_000].lr == 1e-4
    assert by_iter[50_100].lr == pytest.approx(1e-5, rel=1e-15)
    assert by_iter[100_000].lr == pytest.approx(1e-5, rel=1e-15)


def test_improvement_threshold():
    cfg = TrainConfig()
    s = schedule_update(ScheduleState(1e-4), 0.5, 100, cfg)
    s = schedule_update(s, 0.5 + 5e-5, 200, cfg)
    assert not s.improved and s.best_iteration == 100
    s = schedule_update(s, 0.5 + 2e-4, 300, cfg)
    assert s.improved and s.best_iteration == 300


def test_schedule_is_pure():
    cfg = TrainConfig(plateau_patience=300, early_stop_patience=500)
    trace = [(i * 100, v) for i, v in enumerate(
        np.random.default_rng(0).uniform(0, 1, 60).round(2), 1)]
    a = [s.lr for s in replay(trace, cfg)]
    b = [s.lr for s in replay(trace, cfg)]
    assert a == b


# ---- sliding window --------------------------------------------------------

def test_tile_starts_cover_extent():
    assert tile_starts(48, 32, 0.5) == [0, 16]
    assert tile_starts(40, 32, 0.5) == [0, 8]
    assert tile_starts(32, 32, 0.5) == [0]
    with pytest.raises(ValueError):
        tile_starts(16, 32, 0.5)


def test_single_tile_equals_forward_argmax():
    from convcaps3d.model import forward
    from convcaps3d.tensor import Tensor

    net = tiny_net(3)
    img, _ = phantom_patch(3)
    ref = forward(net, Tensor(img))["seg"].data.argmax(-1)
    assert np.array_equal(sliding_window_infer(net, img, 16), ref)


def test_constant_prediction_is_tiling_independent():
    net = tiny_net(4)
    seg = net["segment"].params
    seg["weight"].data[:] = 0.0
    seg["bias"].data[:] = [0.0, 2.0]
    img = np.random.default_rng(0).uniform(size=(40, 24, 32, 1)).astype(np.float32)
    for overlap in (0.0, 0.5, 0.75):
        assert np.all(sliding_window_infer(net, img, (16, 16, 16), overlap) == 1)


@pytest.mark.slow
def test_sliding_window_matches_dense_oracle():
    from convcaps3d.model import forward
    from convcaps3d.tensor import Tensor

    net = tiny_net(5)
    img = np.random.default_rng(1).uniform(size=(48, 48, 48, 1)).astype(np.float32)
    starts = [0, 16]  # stride 16 tiles a 48 extent with 32 patches
    tiles = {}
    for o in np.ndindex(2, 2, 2):
        c = tuple(starts[i] for i in o)
        tiles[c] = forward(net, Tensor(img[c[0]:c[0] + 32, c[1]:c[1] + 32,
                                           c[2]:c[2] + 32]))["seg"].data
    ref = np.empty((48, 48, 48), dtype=np.uint8)
    for v in np.ndindex(48, 48, 48):
        acc, n = np.zeros(2), 0
        for c, seg in tiles.items():
            if all(c[a] <= v[a] < c[a] + 32 for a in range(3)):
                acc += seg[v[0] - c[0], v[1] - c[1], v[2] - c[2]]
                n += 1
        p = acc / n
        ref[v] = 0 if p[0] >= p[1] else 1
    got = sliding_window_infer(net, img, 32, 0.5)
    assert np.array_equal(got, ref)
    np.testing.assert_allclose(sliding_window_probs(net, img, 32).sum(-1), 1.0, atol=1e-5)


# ---- volume files ----------------------------------------------------------

def test_volume_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.normal(size=(5, 3, 4, 2)).astype(np.float32)
    lab = rng.integers(0, 4, size=(5, 3, 4)).astype(np.uint8)
    write_volume(tmp_path / "a.vol", img, spacing=(1.0, 0.5, 2.0))
    write_labels(tmp_path / "b.vol", lab)
    img2, meta = read_volume(tmp_path / "a.vol")
    lab2, _ = read_labels(tmp_path / "b.vol")
    assert img2.tobytes() == img.tobytes() and lab2.tobytes() == lab.tobytes()
    assert meta == {"shape": [5, 3, 4], "channels": 2, "dtype": "f32le",
                    "spacing": [1.0, 0.5, 2.0]}


def test_volume_linear_index_layout(tmp_path):
    img = np.random.default_rng(1).normal(size=(3, 4, 2, 2)).astype(np.float32)
    write_volume(tmp_path / "a.vol", img)
    flat = np.frombuffer((tmp_path / "a.vol").read_bytes(), dtype="<f4")
    X, Y, _, M = img.shape
    for (x, y, z, m) in np.ndindex(*img.shape):
        assert flat[m + M * (x + X * (y + Y * z))] == img[x, y, z, m]


def test_volume_truncated_file_rejected(tmp_path):
    write_volume(tmp_path / "a.vol", np.zeros((2, 2, 2, 1), dtype=np.float32))
    raw = (tmp_path / "a.vol").read_bytes()
    (tmp_path / "a.vol").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_volume(tmp_path / "a.vol")
    assert sidecar_path(tmp_path / "a.vol").name == "a.vol.json"
