import math

import pytest
import torch

from atl.diagnostics import DivergenceProfile, divergence_profile, row_divergence
from atl.errors import ConfigError, IncompatibilityError
from atl.vit import ArchSpec, build_model

from oracles import js_rows, kl_rows

SPEC = ArchSpec(depth=3, embed_dim=16, num_heads=2, patch_size=8, image_size=16)


def images(n, seed=0):
    return torch.rand(n, 3, 16, 16, generator=torch.Generator().manual_seed(seed))


def randomized(seed, scale=1.0):
    model = build_model(SPEC, seed)
    gen = torch.Generator().manual_seed(seed + 50)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * scale)
    return model


def test_hand_kl_oracle():
    p = torch.tensor([0.75, 0.25], dtype=torch.float64)
    q = torch.tensor([0.5, 0.5], dtype=torch.float64)
    value = row_divergence(p, q, "KL").item()
    oracle = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert abs(value - oracle) < 1e-12
    assert abs(value - 0.1308) < 1e-4
    assert abs(value - kl_rows([0.75, 0.25], [0.5, 0.5])) < 1e-15


def test_random_rows_match_summation_oracles():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        p = torch.randn(6, generator=gen, dtype=torch.float64).softmax(0)
        q = torch.randn(6, generator=gen, dtype=torch.float64).softmax(0)
        assert abs(row_divergence(p, q, "KL").item() - kl_rows(p.tolist(), q.tolist())) < 1e-12
        assert abs(row_divergence(p, q, "JS").item() - js_rows(p.tolist(), q.tolist())) < 1e-12


def test_clamp_keeps_zero_rows_finite():
    p = torch.tensor([1.0, 0.0], dtype=torch.float64)
    q = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert math.isfinite(row_divergence(p, q, "KL").item())
    assert row_divergence(p, q, "JS").item() <= math.log(2) + 1e-12
    with pytest.raises(ConfigError):
        row_divergence(p, q, "TV")


def test_self_divergence_is_zero():
    model = randomized(1)
    for kind in ("KL", "JS"):
        prof = divergence_profile(model, model, [images(8)], kind)
        assert len(prof.per_layer) == 3
        assert max(prof.per_layer) < 1e-8


def test_js_bounds_and_symmetry():
    a, b = randomized(1, 0.5), randomized(2, 0.5)
    ab = divergence_profile(a, b, [images(16)], "JS")
    ba = divergence_profile(b, a, [images(16)], "JS")
    assert all(0 <= v <= math.log(2) for v in ab.per_layer)
    assert max(abs(x - y) for x, y in zip(ab.per_layer, ba.per_layer)) < 1e-10
    kl = divergence_profile(a, b, [images(16)], "KL")
    assert all(v >= 0 for v in kl.per_layer)


def test_sample_cap_and_batching_order():
    a, b = randomized(1, 0.5), randomized(2, 0.5)
    x = images(40)
    whole = divergence_profile(a, b, [x], "KL", max_samples=32)
    split = divergence_profile(a, b, [x[:8], x[8:20], x[20:]], "KL", max_samples=32)
    assert whole.num_samples == split.num_samples == 32
    assert max(abs(u - v) for u, v in zip(whole.per_layer, split.per_layer)) < 1e-10


def test_sample_stability():
    a, b = randomized(1, 0.5), randomized(2, 0.5)
    x = images(256, seed=3)
    batches = [x[i:i + 16] for i in range(0, 256, 16)]
    half = divergence_profile(a, b, batches, "KL", max_samples=128)
    full = divergence_profile(a, b, batches, "KL", max_samples=256)
    se = full.standard_error()
    for i in range(3):
        assert abs(half.per_layer[i] - full.per_layer[i]) < 3 * se[i]


def test_depth_mismatch():
    with pytest.raises(IncompatibilityError):
        divergence_profile(build_model(SPEC), build_model(SPEC.replace(depth=2)), [images(2)])
    with pytest.raises(ConfigError):
        divergence_profile(build_model(SPEC), build_model(SPEC), [images(2)], max_samples=0)


def test_register_teacher_is_aligned():
    teacher = build_model(SPEC.replace(num_registers=2), 0)
    student = build_model(SPEC, 1)
    prof = divergence_profile(teacher, student, [images(4)], "JS")
    assert len(prof.per_layer) == 3


def test_profile_serialisation():
    prof = DivergenceProfile("KL", [0.1, 0.25, 0.05], 64, (SPEC, SPEC))
    assert prof.argmax_layer == 1
    assert abs(prof.mean - 0.4 / 3) < 1e-15
    back = DivergenceProfile.from_dict(prof.to_dict())
    assert back.per_layer == prof.per_layer and back.spec_pair == prof.spec_pair
    assert prof.to_csv() == "layer,value\n0,0.1\n1,0.25\n2,0.05\n"
