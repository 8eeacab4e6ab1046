import numpy as np
import pytest
from sklearn.base import clone

from atl.errors import ConfigError
from atl.estimator import AttentionTransferClassifier, check_images, check_labels
from atl.train import make_recipe
from atl.vit import ArchSpec, build_model

ARCH = ArchSpec(depth=2, embed_dim=16, num_heads=2, patch_size=8, image_size=16, num_classes=4)


def arrays(n=24, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, 16, 16), dtype=np.float32), np.arange(n) % 4


def test_params_round_trip():
    est = AttentionTransferClassifier(arch=ARCH, lam=1.0, max_steps=2)
    assert est.get_params()["lam"] == 1.0
    other = clone(est).set_params(lam=0.5)
    assert other.lam == 0.5 and est.lam == 1.0


def test_fit_predict_shapes():
    X, y = arrays()
    recipe = make_recipe("baseline", "desk").replace(batch_size=8)
    est = AttentionTransferClassifier(arch=ARCH, recipe=recipe, max_steps=3).fit(X, y)
    assert est.n_steps_ == 3
    proba = est.predict_proba(X)
    assert proba.shape == (24, 4) and np.allclose(proba.sum(1), 1, atol=1e-6)
    assert set(est.predict(X)) <= set(range(4))
    assert 0.0 <= est.score(X, y) <= 1.0
    # channels-last input gives the same logits
    assert np.allclose(est.decision_function(X.transpose(0, 2, 3, 1)), est.decision_function(X))


def test_distill_fit_needs_teacher():
    X, y = arrays()
    with pytest.raises(ConfigError):
        AttentionTransferClassifier(arch=ARCH, method="distill").fit(X, y)
    recipe = make_recipe("distill", "desk").replace(batch_size=8)
    est = AttentionTransferClassifier(arch=ARCH, method="distill", teacher=build_model(ARCH, 3), recipe=recipe,
                                      max_steps=2).fit(X, y)
    assert np.isfinite(est.train_loss_)


def test_input_validation():
    with pytest.raises(ConfigError):
        check_images(np.zeros((2, 16, 16)))
    with pytest.raises(ConfigError):
        check_images(np.zeros((0, 3, 16, 16)))
    with pytest.raises(ConfigError):
        check_images(np.full((1, 3, 16, 16), np.nan))
    with pytest.raises(ConfigError):
        check_images(np.zeros((1, 3, 8, 8)), image_size=16)
    assert check_images(np.full((1, 3, 2, 2), 255, dtype=np.uint8)).max().item() == 1.0
    with pytest.raises(ConfigError):
        check_labels([0, 4], 2, 4)
    with pytest.raises(ConfigError):
        check_labels([0.5, 1], 2, 4)
    assert check_labels([0.0, 3.0], 2, 4).tolist() == [0, 3]
