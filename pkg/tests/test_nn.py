import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calo_opt import autodiff as ad
from calo_opt import nn


def test_param_counts():
    assert nn.mlp_init(nn.MlpSpec((1, 8, 1), seed=7)).count() == 25
    assert nn.MlpSpec((6, 64, 64, 64, 1)).n_params() == 8833
    assert nn.mlp_init(nn.MlpSpec((6, 64, 64, 64, 1))).count() == 8833


def test_init_is_deterministic_and_glorot_bounded():
    spec = nn.MlpSpec((5, 64, 3), seed=11)
    a, b = nn.mlp_init(spec), nn.mlp_init(spec)
    assert a.equal(b)
    assert not a.equal(nn.mlp_init(nn.MlpSpec((5, 64, 3), seed=12)))
    limit = np.sqrt(6.0 / (5 + 64))
    assert np.abs(a["W0"].data).max() <= limit
    assert np.all(a["b0"].data == 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.MlpSpec((3,))
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 0, 1))


def test_hidden_widths():
    assert nn.hidden_widths(3, 1, 3) == (3, 64, 64, 1)
    assert nn.hidden_widths(2, 1, 4, width=8) == (2, 8, 8, 8, 1)


def test_stacked_init_matches_single():
    spec = nn.MlpSpec((2, 4, 1))
    stack = nn.mlp_init_stack(spec, [3, 9])
    single = nn.mlp_init(nn.MlpSpec((2, 4, 1), seed=9))
    np.testing.assert_array_equal(stack["W0"].data[1], single["W0"].data)
    assert stack["b1"].shape == (2, 1, 1)


def _linear_problem():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(100, 1))
    return x, 2.0 * x


def _mse(spec):
    def loss(params, x, y):
        return ad.mean(ad.square(ad.sub(nn.mlp_forward(params, x, spec), y)))
    return loss


def test_fit_linear_target():
    x, y = _linear_problem()
    spec = nn.MlpSpec((1, 1), seed=0)
    params = nn.mlp_init(spec)
    result = nn.train(params, _mse(spec), [x, y], nn.LrSchedule.staged([(5e-2, 200)]), batch_size=32)
    assert len(result.losses) == 200
    assert result.losses[-1] < 1e-3


def test_smoothed_loss_non_increasing():
    x, y = _linear_problem()
    y = np.sin(3 * x)
    spec = nn.MlpSpec((1, 16, 1), seed=1)
    losses = nn.train(nn.mlp_init(spec), _mse(spec), [x, y], nn.LrSchedule.staged([(1e-2, 200)]),
                      batch_size=25).losses
    windows = np.array(losses).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 1e-3 * windows[0])


def test_zero_epochs_is_noop():
    x, y = _linear_problem()
    spec = nn.MlpSpec((1, 4, 1), seed=2)
    params = nn.mlp_init(spec)
    before = params.copy()
    result = nn.train(params, _mse(spec), [x, y], nn.LrSchedule.staged([(1e-2, 0)]))
    assert result.losses == []
    assert params.equal(before)


def test_non_finite_loss_aborts_with_epoch():
    x, y = _linear_problem()
    spec = nn.MlpSpec((1, 1), seed=0)

    def bad(params, x, y):
        return ad.log(ad.mean(ad.affine(nn.mlp_forward(params, x, spec), 0.0, -1.0)))

    with pytest.raises(nn.TrainingError) as info:
        nn.train(nn.mlp_init(spec), bad, [x, y], nn.LrSchedule.staged([(1e-2, 3)]))
    assert info.value.epoch == 0


def test_shuffling_is_deterministic():
    x, y = _linear_problem()
    spec = nn.MlpSpec((1, 8, 1), seed=3)
    runs = [nn.train(nn.mlp_init(spec), _mse(spec), [x, y], nn.LrSchedule.staged([(1e-2, 5)]),
                     batch_size=16, seed=4).params for _ in range(2)]
    assert runs[0].equal(runs[1])


def test_staged_schedule():
    sched = nn.LrSchedule.staged([(4e-4, 200), (1e-5, 200)])
    assert sched.total_epochs == 400
    assert sched.rate(199) == 4e-4
    assert sched.rate(250) == 1e-5


def test_exponential_schedule_floor():
    sched = nn.LrSchedule.exponential(1e-2, 2000)
    assert sched.rate(0) == 1e-2
    assert sched.rate(1) == pytest.approx(1e-2 * 0.999)
    assert sched.rate(10 ** 6) == pytest.approx(1e-6)


def test_zero_gradient_adam_step_is_identity():
    params = nn.mlp_init(nn.MlpSpec((3, 5, 1), seed=1))
    before = params.copy()
    for t in params._params.values():
        t.grad = np.zeros_like(t.data)
    nn.adam_step(params, nn.AdamState(), lr=1e-2)
    assert params.equal(before)


def test_adam_step_counter_increases():
    params = nn.mlp_init(nn.MlpSpec((1, 1)))
    state = nn.AdamState()
    for k in range(3):
        nn.adam_step(params, state, 1e-3)
        assert state.step == k + 1


def test_checkpoint_round_trip(tmp_path):
    params = nn.mlp_init(nn.MlpSpec((4, 7, 2), seed=5))
    params["W0"].data[...] = np.random.default_rng(0).normal(size=(4, 7))
    path = tmp_path / "p.ckpt"
    nn.checkpoint_save(params, path)
    loaded = nn.checkpoint_load(path, expect=params)
    assert loaded.equal(params)
    assert path.read_bytes()[:8] == b"CALOPT01"


def test_checkpoint_errors(tmp_path):
    params = nn.mlp_init(nn.MlpSpec((2, 3, 1)))
    path = tmp_path / "p.ckpt"
    nn.checkpoint_save(params, path)
    blob = path.read_bytes()

    bad = tmp_path / "magic.ckpt"
    bad.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(nn.CheckpointVersionError):
        nn.checkpoint_load(bad)

    version = tmp_path / "version.ckpt"
    version.write_bytes(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(nn.CheckpointVersionError):
        nn.checkpoint_load(version)

    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-5])
    with pytest.raises(nn.CheckpointError):
        nn.checkpoint_load(cut)

    with pytest.raises(ad.ShapeError):
        nn.checkpoint_load(path, expect=nn.mlp_init(nn.MlpSpec((2, 4, 1))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 1000))
def test_checkpoint_preserves_bits(tmp_path_factory, rows, cols, seed):
    rng = np.random.default_rng(seed)
    arrays = {"a": rng.normal(size=(rows, cols)) * 1e-300, "b": rng.normal(size=cols)}
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    nn.checkpoint_save(arrays, path)
    loaded = nn.checkpoint_load(path)
    for k, v in arrays.items():
        assert loaded[k].data.tobytes() == v.tobytes()


def test_standardizer_round_trip():
    a = np.random.default_rng(1).normal(3.0, 2.0, size=(50, 3))
    a[:, 2] = 7.0
    s = nn.Standardizer.fit(a)
    np.testing.assert_allclose(s.apply(a)[:, :2].mean(axis=0), 0, atol=1e-12)
    assert s.std[2] == 1.0
    np.testing.assert_allclose(s.invert(s.apply(a)), a)


def test_running_stats_match_batch_moments():
    rng = np.random.default_rng(2)
    parts = [rng.normal(size=n) for n in (5, 17, 40)]
    stats = nn.RunningStats()
    for p in parts:
        stats.update(p)
    pooled = np.concatenate(parts)
    assert stats.mean == pytest.approx(pooled.mean())
    assert stats.std == pytest.approx(pooled.std())
