import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ostr import episodes as ep
from ostr.estimator import OneShotTextureSegmenter, check_image_pairs


@pytest.fixture(scope="module")
def fitted():
    bank = ep.procedural_bank(8, 2, 64, 0)
    split = ep.holdout_split(bank, 2)
    est = OneShotTextureSegmenter(epochs=1, episodes_per_epoch=4, batch_size=2, lr=1e-4)
    return est.fit(bank, split), bank, split


def test_params_round_trip_and_clone():
    est = OneShotTextureSegmenter(lr=0.01, use_gating=False)
    params = est.get_params()
    assert params["lr"] == 0.01 and params["use_gating"] is False
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(batch_size=3)
    assert est.batch_size == 3


def test_unfitted_predict_raises():
    Q = np.zeros((1, 3, 64, 64), dtype=np.float32)
    with pytest.raises(NotFittedError):
        OneShotTextureSegmenter().predict(Q, Q)


def test_check_image_pairs():
    img = np.full((3, 8, 8), 128, dtype=np.uint8)
    Q, R = check_image_pairs(img, img)
    assert Q.shape == (1, 3, 8, 8) and Q.dtype == np.float32 and np.allclose(Q, 128 / 255)
    with pytest.raises(ValueError):
        check_image_pairs(np.zeros((3, 8, 8)), np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        check_image_pairs(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        check_image_pairs(np.full((3, 8, 8), 2.0), np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        check_image_pairs(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), size=16)


def test_fit_predict_score(fitted):
    est, bank, split = fitted
    eps = ep.episodes(bank, split, ("test", 0), 0, 3, 64)
    Q, R, _ = ep.batch_arrays(eps)
    proba = est.predict_proba(Q, R)
    assert proba.shape == (3, 64, 64) and ((proba > 0) & (proba < 1)).all()
    mask = est.predict(Q, R)
    assert set(np.unique(mask)) <= {0, 1}
    assert est.gate_weights(Q, R).shape == (3, 32)
    assert 0.0 <= est.score(eps) <= 1.0
    assert len(est.record_.epoch_loss) == 1


def test_fit_rejects_wrong_input():
    with pytest.raises(TypeError):
        OneShotTextureSegmenter().fit(np.zeros((2, 2)))


def test_save_and_restore(fitted, tmp_path):
    est, bank, split = fitted
    est.save(tmp_path / "m.ostr")
    back = OneShotTextureSegmenter.from_checkpoint(tmp_path / "m.ostr")
    Q, R, _ = ep.batch_arrays(ep.episodes(bank, split, ("test", 0), 1, 2, 64))
    assert np.array_equal(back.predict_proba(Q, R), est.predict_proba(Q, R))
