import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calo_opt import calosim as cs
from calo_opt.autodiff import ShapeError
from calo_opt.reco import RecoConfig, per_event_delta, pooled_rows, train_reco

FAST = RecoConfig(stages=((2e-3, 15), (2e-4, 5)))


def _candidates(center, k, m, seed=0, spread=0.3):
    rng = np.random.default_rng(seed)
    thetas = np.clip(np.asarray(center) + spread * rng.standard_normal((k, len(center))), 0, None)
    batches = [cs.simulate(t, cs.sample_energies(1, 20, m, (seed, i, 1)), seed=(seed, i, 2))
               for i, t in enumerate(thetas)]
    return cs.CandidateSet(thetas, batches)


@pytest.fixture(scope="module")
def thick():
    cands = _candidates([0.5, 24.0], 30, 700)
    return cands, train_reco(cands, config=FAST, seed=1)


def test_pooled_rows_layout():
    cands = _candidates([1.0, 1.0, 2.0, 2.0], 3, 5)
    feats, target = pooled_rows(cands)
    assert feats.shape == (15, 2 + 4)
    np.testing.assert_array_equal(feats[5, 2:], cands.thetas[1])
    np.testing.assert_array_equal(target[:5], cands.batches[0].energies)


def test_near_optimal_detector_reconstructs_well(thick):
    cands, model = thick
    errs = []
    for t, b in zip(cands.thetas, cands.batches):
        errs.append(np.abs(model.predict(b.deposits, t) - b.energies) / b.energies)
    assert np.mean(errs) < 0.05


def test_zero_detector_regresses_to_mean():
    cands = _candidates([0.0, 0.0], 10, 200, spread=0.0)
    model = train_reco(cands, config=FAST, seed=0)
    x = cands.energies().ravel()
    pred = model.predict(cands.batches[0].deposits, cands.thetas[0])
    assert np.ptp(pred) < 1e-9
    assert pred[0] == pytest.approx(x.mean(), rel=0.02)
    delta = np.concatenate([per_event_delta(model, b.deposits, b.energies, t)
                            for t, b in zip(cands.thetas, cands.batches)])
    oracle = np.mean(((x.mean() - x) / x) ** 2)
    assert delta.mean() == pytest.approx(oracle, rel=0.05)


def test_warm_start_dominates_cold_start(thick):
    cands, model = thick
    warm = train_reco(cands, warm_start=model, config=RecoConfig(stages=((1e-5, 1),)), seed=2)
    cold = train_reco(cands, config=RecoConfig(stages=((1e-5, 1),)), seed=2)
    assert warm.losses[0] <= cold.losses[0]
    assert warm.inputs is model.inputs


def test_warm_start_shape_mismatch(thick):
    _, model = thick
    with pytest.raises(ShapeError):
        train_reco(_candidates([1.0, 1.0, 1.0, 1.0], 2, 10), warm_start=model, config=FAST)


class _Exact:
    @staticmethod
    def predict(deposits, theta):
        return deposits[:, 0]


def test_delta_examples():
    assert per_event_delta(_Exact, np.array([[10.0]]), [10.0], [0, 1])[0] == 0.0
    assert per_event_delta(_Exact, np.array([[9.0]]), [10.0], [0, 1])[0] == pytest.approx(0.01)
    assert per_event_delta(_Exact, np.ones((7, 1)), np.full(7, 2.0), [0, 1]).shape == (7,)
    with pytest.raises(ValueError):
        per_event_delta(_Exact, np.ones((1, 1)), [0.0], [0, 1])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 50), st.floats(0.5, 50))
def test_delta_is_scale_free(pred, truth):
    one = per_event_delta(_Exact, np.array([[pred]]), [truth], [0, 1])
    two = per_event_delta(_Exact, np.array([[2 * pred]]), [2 * truth], [0, 1])
    np.testing.assert_allclose(one, two, rtol=1e-12)
