import math

import pytest
import torch

from atl.errors import ConfigError, DimensionError
from atl.vit import (ArchSpec, Block, apply_layer_scale, attention_block_forward, build_model,
                     build_relative_position_index, forward, parameter_shapes)

from oracles import loop_attention


def tiny(**kw):
    base = dict(depth=2, embed_dim=16, num_heads=2, patch_size=4, image_size=8, num_classes=5)
    base.update(kw)
    return ArchSpec(**base)


def test_spec_invariants_name_the_field():
    with pytest.raises(ConfigError, match="num_heads"):
        ArchSpec(embed_dim=65, num_heads=4).validate()
    with pytest.raises(ConfigError, match="patch_size"):
        ArchSpec(image_size=30, patch_size=4).validate()
    with pytest.raises(ConfigError):
        build_model(ArchSpec(depth=0))


def test_build_is_deterministic():
    a = build_model(ArchSpec(), seed=7)
    b = build_model(ArchSpec(), seed=7)
    c = build_model(ArchSpec(), seed=8)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name
    assert not torch.equal(a.blocks[0].attn.q.weight, c.blocks[0].attn.q.weight)


def test_layer_scale_vectors():
    model = build_model(ArchSpec(layer_scale=1e-5, depth=6))
    gammas = [p for n, p in model.named_parameters() if n.endswith("gamma")]
    assert len(gammas) == 12
    for g in gammas:
        assert torch.all(g == torch.tensor(1e-5, dtype=g.dtype))


def test_token_count_with_registers():
    spec = ArchSpec(image_size=32, patch_size=4, num_registers=4)
    assert spec.num_tokens == 69
    _, trace = forward(build_model(spec), torch.rand(2, 3, 32, 32))
    assert trace.maps[0].shape == (2, 4, 69, 69)


def test_parameter_table_matches_model():
    spec = ArchSpec(layer_scale=1e-5, pre_layer_norm=True, relative_position_bias=True, num_registers=4)
    model = build_model(spec)
    got = {n: tuple(p.shape) for n, p in model.named_parameters()}
    assert got == parameter_shapes(spec)
    assert parameter_shapes(ArchSpec())["blocks.0.attn.q.weight"] == (64, 64)
    assert parameter_shapes(spec)["blocks.0.attn.rel_pos.table"] == ((2 * 8 - 1) ** 2 + 3, 4)
    assert set(model.frozen_names) <= set(got)


def test_uniform_rows_when_logits_tie():
    # zero query weights make every logit in a row equal
    block = Block(tiny(num_heads=1))
    with torch.no_grad():
        block.attn.q.weight.zero_()
        block.attn.q.bias.zero_()
    _, attn = attention_block_forward(block, torch.randn(3, 2, 16))
    assert torch.allclose(attn, torch.full_like(attn, 0.5), atol=1e-7)


def test_hand_softmax_oracle():
    # one head of width 1: scale is 1, query fixed at 1, keys carry the logits 0 and ln 3
    spec = ArchSpec(depth=1, embed_dim=1, num_heads=1, patch_size=1, image_size=1, mlp_ratio=1.0)
    block = Block(spec).double()
    block.norm1 = torch.nn.Identity()
    block.attn.k = torch.nn.Identity()
    with torch.no_grad():
        block.attn.q.weight.zero_()
        block.attn.q.bias.fill_(1.0)
    tokens = torch.tensor([[[0.0], [math.log(3.0)]]], dtype=torch.float64)
    _, attn = attention_block_forward(block, tokens)
    expected = torch.tensor([0.25, 0.75], dtype=torch.float64)
    assert torch.allclose(attn[0, 0], expected.expand(2, 2), atol=1e-12)


@pytest.mark.parametrize("rel_pos", [False, True])
def test_loop_oracle_four_tokens(rel_pos):
    gen = torch.Generator().manual_seed(0)
    # 2x2 grid has 4 patch tokens; without prefix tokens the block sees exactly 4
    for trial in range(20):
        spec = ArchSpec(depth=1, embed_dim=8, num_heads=2, patch_size=1, image_size=2,
                        relative_position_bias=rel_pos)
        block = Block(spec).double()
        with torch.no_grad():
            for p in block.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
        if rel_pos:
            from atl.vit import full_relative_position_index
            block.attn.rel_pos.index = full_relative_position_index(2, 2, 0)
        tokens = torch.randn(1, 4, 8, generator=gen, dtype=torch.float64)
        _, attn = attention_block_forward(block, tokens)
        ref = loop_attention(block, tokens[0])
        assert (attn[0] - ref).abs().max() < 1e-6


def test_forward_trace_shapes_and_rows():
    model = build_model(ArchSpec(), seed=1)
    logits, trace = forward(model, torch.rand(2, 3, 32, 32))
    assert logits.shape == (2, 10)
    assert len(trace.maps) == 6
    for m in trace.maps:
        assert m.shape == (2, 4, 65, 65)
        assert torch.allclose(m.sum(-1), torch.ones(()), atol=1e-6)
        assert m.min() >= 0 and m.max() <= 1


def test_wrong_image_size():
    with pytest.raises(DimensionError):
        forward(build_model(ArchSpec()), torch.rand(1, 3, 28, 28))


def test_pre_layer_norm_changes_logits():
    plain = build_model(ArchSpec(), seed=3)
    normed = build_model(ArchSpec(pre_layer_norm=True), seed=3)
    normed.load_state_dict(plain.state_dict(), strict=False)
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert (plain(x) - normed(x)).abs().max() > 0


def test_relative_index_examples():
    idx = build_relative_position_index(2, 2)
    assert idx.unique().numel() == 9
    assert idx.diagonal().unique().numel() == 1
    idx3 = build_relative_position_index(3, 3)
    assert idx3[0, 1] == idx3[3, 4]
    assert idx3.min() >= 0 and idx3.max() < 25
    # brute force: equal offsets share a slot, different offsets do not
    coords = [(i // 3, i % 3) for i in range(9)]
    slot_of = {}
    for i, (yi, xi) in enumerate(coords):
        for j, (yj, xj) in enumerate(coords):
            off = (yi - yj, xi - xj)
            slot_of.setdefault(off, set()).add(int(idx3[i, j]))
    assert all(len(s) == 1 for s in slot_of.values())
    assert len({next(iter(s)) for s in slot_of.values()}) == len(slot_of)


def test_bias_translation_invariance():
    spec = ArchSpec(relative_position_bias=True)
    model = build_model(spec)
    rel = model.blocks[0].attn.rel_pos
    with torch.no_grad():
        rel.table.normal_()
    bias = rel()[:, 1:, 1:]
    g = spec.grid_size
    # patch (0,0)->(1,2) versus the same pair shifted by (2,3)
    i, j = 0 * g + 0, 1 * g + 2
    si, sj = 2 * g + 3, 3 * g + 5
    assert torch.equal(bias[:, i, j], bias[:, si, sj])


def test_layer_scale_examples():
    x = torch.randn(2, 3, 4)
    assert torch.equal(apply_layer_scale(torch.ones(4), x), x)
    out = apply_layer_scale(torch.full((4,), 1e-5), torch.ones(2, 3, 4))
    assert torch.equal(out, torch.full((2, 3, 4), 1e-5))
    gamma = torch.randn(4, dtype=torch.float64)
    x = torch.randn(2, 3, 4, dtype=torch.float64)
    out = apply_layer_scale(gamma, x)
    for b in range(2):
        for t in range(3):
            for c in range(4):
                assert abs(out[b, t, c].item() - gamma[c].item() * x[b, t, c].item()) <= 1e-12
    with pytest.raises(DimensionError):
        apply_layer_scale(torch.ones(5), x)


def test_zero_gamma_neutralises_blocks():
    model = build_model(ArchSpec(layer_scale=1e-5), seed=2)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("gamma"):
                p.zero_()
    x = torch.rand(2, 3, 32, 32)
    tokens = model.embed(x)
    out = tokens
    for block in model.blocks:
        out, _, _ = block(out)
    assert torch.equal(out, tokens)
    with torch.no_grad():
        expected = model.head(model.norm(tokens)[:, 0])
        assert torch.equal(model(x), expected)
