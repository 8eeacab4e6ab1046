import pytest
import torch

from atl.augment import mix_batch, rand_augment, smooth_one_hot, soft_cross_entropy
from atl.data import load_dataset, synthetic_shapes
from atl.errors import ConfigError


def test_synthetic_shapes_balanced_and_seeded():
    data = synthetic_shapes(100, image_size=32, seed=3)
    assert torch.bincount(data.labels).tolist() == [10] * 10
    assert data.images.min() >= 0 and data.images.max() <= 1
    again = synthetic_shapes(100, image_size=32, seed=3)
    assert torch.equal(data.images, again.images)
    train, evaluation = load_dataset("synthetic-shapes", train_size=20, eval_size=10)
    assert len(train) == 20 and len(evaluation) == 10
    assert not torch.equal(train.images[:10], evaluation.images)
    with pytest.raises(ConfigError):
        load_dataset("imagenet")
    with pytest.raises(ConfigError):
        load_dataset("cifar10-dir:/nonexistent")


def test_mix_batch_conserves_label_mass():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(8, 3, 16, 16)
    t = smooth_one_hot(torch.arange(8) % 4, 4, 0.1)
    assert torch.allclose(t.sum(1), torch.ones(8))
    for _ in range(10):
        mx, mt = mix_batch(x, t, 0.8, 1.0, gen)
        assert mx.shape == x.shape
        assert torch.allclose(mt.sum(1), torch.ones(8), atol=1e-6)
    same_x, same_t = mix_batch(x, t, 0.0, 0.0, gen)
    assert same_x is x and same_t is t


def test_rand_augment_range_and_soft_ce():
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(4, 3, 16, 16)
    out = rand_augment(x, 9, 0.5, gen)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    assert rand_augment(x, 0, 0.5, gen) is x
    logits = torch.randn(5, 3)
    labels = torch.tensor([0, 1, 2, 1, 0])
    hard = torch.nn.functional.one_hot(labels, 3).float()
    assert torch.allclose(soft_cross_entropy(logits, hard), torch.nn.functional.cross_entropy(logits, labels))
