import math

import numpy as np
import pytest
import torch

from sammae.model import (Attention, Block, MaskedAutoencoderViT, PatchConfig, gather_tokens,
                          get_2d_sincos_pos_embed, load_checkpoint, patchify, save_checkpoint, unpatchify)

from .conftest import tiny_config
from .reference_mae import sincos_2d


def light_config(**kw):
    """ViT-B token geometry with near-zero depth so it builds instantly."""
    base = dict(image_size=224, patch_size=16, embed_dim=16, num_heads=2, encoder_depth=1,
                decoder_dim=16, decoder_depth=1, decoder_heads=2, num_classes=5)
    base.update(kw)
    return PatchConfig(**base)


# ---- patchify --------------------------------------------------------------

def test_patchify_vit_base_geometry():
    imgs = torch.rand(2, 224, 224, 3)
    out = patchify(imgs, 16)
    assert out.shape == (2, 196, 768)


def test_single_patch_is_flattened_image():
    img = torch.rand(1, 16, 16, 3)
    out = patchify(img, 16)
    assert out.shape == (1, 1, 768)
    assert torch.equal(out[0, 0], img.reshape(-1))


def test_four_patches_match_direct_indexing_and_round_trip():
    img = torch.rand(3, 32, 32, 3)
    out = patchify(img, 16)
    for r in range(2):
        for c in range(2):
            block = img[:, r * 16:(r + 1) * 16, c * 16:(c + 1) * 16, :].reshape(3, -1)
            assert torch.equal(out[:, r * 2 + c], block)
    assert torch.equal(unpatchify(out, 16), img)


@pytest.mark.parametrize("shape", [(1, 30, 32, 3), (1, 32, 20, 3)])
def test_patchify_rejects_indivisible(shape):
    with pytest.raises(ValueError):
        patchify(torch.zeros(shape), 16)


def test_patch_config_invariants():
    cfg = PatchConfig()
    assert cfg.num_patches == 196 == 224 * 224 // 16 ** 2
    assert (cfg.decoder_depth, cfg.decoder_dim, cfg.decoder_heads) == (8, 512, 16)
    with pytest.raises(ValueError):
        PatchConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        PatchConfig(image_size=100, patch_size=16)


# ---- embedding ------------------------------------------------------------

def test_embed_sequence_shape_vit_base_width():
    m = MaskedAutoencoderViT(PatchConfig(encoder_depth=0, decoder_depth=0, decoder_dim=64, decoder_heads=4))
    tokens = m.embed_sequence(torch.rand(2, 196, 768))
    assert tokens.shape == (2, 197, 768)


def test_zero_patches_zero_weights_give_position_embedding():
    m = MaskedAutoencoderViT(tiny_config())
    torch.nn.init.zeros_(m.patch_embed.weight)
    torch.nn.init.zeros_(m.patch_embed.bias)
    tokens = m.embed_sequence(torch.zeros(2, 4, m.cfg.patch_dim))
    assert torch.equal(tokens[:, 1:], m.pos_embed[:, 1:].expand(2, -1, -1))
    assert torch.equal(tokens[:, 0], (m.cls_token + m.pos_embed[:, :1])[:, 0].expand(2, -1))
    assert torch.count_nonzero(m.pos_embed[0, 0]) == 0


def test_sincos_matches_closed_form_on_2x2_grid():
    for dim in (8, 16):
        ours = get_2d_sincos_pos_embed(dim, 2)
        np.testing.assert_allclose(ours, sincos_2d(dim, 2).numpy(), rtol=0, atol=1e-12)


# ---- attention ------------------------------------------------------------

def test_identical_tokens_give_uniform_attention():
    torch.manual_seed(1)
    blk = Block(8, 2)
    x = torch.randn(1, 1, 8).expand(3, 7, 8)
    _, attn = blk(x)
    assert torch.allclose(attn, torch.full_like(attn, 1 / 7), atol=1e-7)


def test_attention_rows_are_distributions():
    torch.manual_seed(2)
    blk = Block(16, 4)
    _, attn = blk(torch.randn(5, 11, 16) * 3)
    assert (attn >= 0).all()
    assert torch.allclose(attn.sum(-1), torch.ones(5, 4, 11), atol=1e-6)


def test_affinity_matches_hand_computation():
    att = Attention(2, 1)
    wq = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    wk = torch.tensor([[0.5, 1.0], [1.0, 0.0]])
    with torch.no_grad():
        att.qkv.weight.copy_(torch.cat([wq, wk, torch.eye(2)]))
        att.qkv.bias.zero_()
    z = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    _, a = att(z.unsqueeze(0))
    # q_i = Wq z_i, k_j = Wk z_j, a_ij = softmax_j(q_i . k_j / sqrt(2))
    q = [[1, 0], [0, 2], [1, 2]]
    k = [[0.5, 1], [1, 0], [1.5, 1]]
    expected = []
    for qi in q:
        s = [(qi[0] * kj[0] + qi[1] * kj[1]) / math.sqrt(2) for kj in k]
        e = [math.exp(v) for v in s]
        expected.append([v / sum(e) for v in e])
    assert torch.allclose(a[0, 0], torch.tensor(expected), atol=1e-6)


def test_block_attention_is_taken_after_prenorm():
    torch.manual_seed(3)
    blk = Block(8, 2)
    x = torch.randn(2, 5, 8)
    _, a = blk(x)
    _, a_ref = blk.attn(blk.norm1(x))
    assert torch.equal(a, a_ref)


# ---- encoder --------------------------------------------------------------

@pytest.mark.parametrize("n_tokens", [197, 50])
def test_encoder_token_count_preserved(n_tokens):
    torch.manual_seed(0)
    m = MaskedAutoencoderViT(light_config(encoder_depth=2))
    out = m.encode(torch.randn(2, n_tokens, 16))
    assert out.cls_encoding.shape == (2, 16)
    assert out.patch_encodings.shape == (2, n_tokens - 1, 16)
    assert out.last_attention.per_head.shape == (2, 2, n_tokens, n_tokens)
    assert out.last_attention.layer_index == 1


def test_depth_zero_encoder_is_identity():
    m = MaskedAutoencoderViT(light_config(encoder_depth=0))
    x = torch.randn(2, 50, 16)
    out = m.encode(x)
    assert torch.equal(out.cls_encoding, x[:, 0])
    assert torch.equal(out.patch_encodings, x[:, 1:])
    assert out.last_attention is None


def test_permuting_visible_tokens_permutes_outputs():
    torch.manual_seed(4)
    m = MaskedAutoencoderViT(tiny_config(encoder_depth=2, image_size=32))
    tokens = m.embed_sequence(torch.randn(3, 16, m.cfg.patch_dim))
    perm = torch.randperm(16)
    a = m.encode(tokens)
    b = m.encode(torch.cat([tokens[:, :1], tokens[:, 1:][:, perm]], dim=1))
    assert torch.allclose(b.patch_encodings, a.patch_encodings[:, perm], atol=1e-5)
    assert torch.allclose(b.cls_encoding, a.cls_encoding, atol=1e-5)


def test_capture_all_layers_on_request():
    torch.manual_seed(0)
    m = MaskedAutoencoderViT(tiny_config(encoder_depth=3))
    out = m.encode(torch.randn(1, 5, 8), capture_all=True)
    assert [a.layer_index for a in out.all_attention] == [0, 1, 2]
    assert m.encode(torch.randn(1, 5, 8)).all_attention == []


# ---- decoder --------------------------------------------------------------

def test_decoder_predicts_one_row_per_masked_token():
    torch.manual_seed(0)
    m = MaskedAutoencoderViT(light_config())
    perm = torch.randperm(196).unsqueeze(0).repeat(2, 1)
    mask, vis = perm[:, :88], perm[:, 147:]
    enc = torch.randn(2, 49, 16)
    out = m.decode(enc, vis, mask)
    assert out.shape == (2, 88, 768)


def test_decoder_rows_follow_mask_order():
    torch.manual_seed(0)
    m = MaskedAutoencoderViT(tiny_config(image_size=32))
    enc = torch.randn(1, 5, 8)
    vis = torch.tensor([[0, 3, 5, 9, 12]])
    mask = torch.tensor([[1, 7, 14]])
    a = m.decode(enc, vis, mask)
    b = m.decode(enc, vis, mask[:, [2, 0, 1]])
    assert torch.allclose(b, a[:, [2, 0, 1]], atol=1e-6)


def test_decoder_empty_mask():
    m = MaskedAutoencoderViT(tiny_config())
    out = m.decode(torch.randn(2, 4, 8), torch.arange(4).expand(2, -1), torch.zeros(2, 0, dtype=torch.long))
    assert out.shape == (2, 0, m.cfg.patch_dim)


def test_decoder_rejects_overlap():
    m = MaskedAutoencoderViT(tiny_config())
    with pytest.raises(ValueError, match="overlap"):
        m.decode(torch.randn(1, 2, 8), torch.tensor([[0, 1]]), torch.tensor([[1, 2]]))


def test_decoder_sequence_excludes_cls_and_thrown():
    torch.manual_seed(0)
    m = MaskedAutoencoderViT(tiny_config(image_size=32))
    seen = []
    m.decoder_blocks[0].register_forward_hook(lambda mod, inp, out: seen.append(inp[0].shape))
    vis, mask = torch.tensor([[0, 4, 9]]), torch.tensor([[1, 2, 3, 5, 6]])  # 7 other positions thrown
    pred, target, _, _ = m.forward_pretrain(torch.rand(1, 32, 32, 3), vis, mask)
    assert seen == [torch.Size([1, 3 + 5, 8])]
    assert pred.shape == target.shape == (1, 5, 192)


# ---- classification -------------------------------------------------------

def test_zero_head_gives_uniform_probabilities():
    m = MaskedAutoencoderViT(tiny_config(num_classes=5))
    torch.nn.init.zeros_(m.head.fc2.weight)
    torch.nn.init.zeros_(m.head.fc2.bias)
    probs = m.classify(torch.randn(3, 8)).softmax(-1)
    assert torch.allclose(probs, torch.full((3, 5), 0.2))


def test_softmax_of_hand_logits():
    m = MaskedAutoencoderViT(tiny_config(num_classes=3))
    torch.nn.init.zeros_(m.head.fc2.weight)
    with torch.no_grad():
        m.head.fc2.bias.copy_(torch.tensor([2.0, 0.0, 0.0]))
    probs = m.classify(torch.randn(1, 8)).softmax(-1)[0]
    z = math.e ** 2 + 2
    assert torch.allclose(probs, torch.tensor([math.e ** 2 / z, 1 / z, 1 / z]), atol=1e-7)
    assert abs(probs.sum().item() - 1) < 1e-6


def test_global_pool_vs_cls_feature():
    torch.manual_seed(0)
    m = MaskedAutoencoderViT(tiny_config())
    imgs = torch.rand(2, 16, 16, 3)
    feat_gp, enc = m.forward_features(imgs, None, True)
    feat_cls, _ = m.forward_features(imgs, None, False)
    assert torch.allclose(feat_gp, enc.patch_encodings.mean(1))
    assert torch.allclose(feat_cls, enc.cls_encoding)


def test_gather_tokens_matches_indexing():
    x = torch.randn(2, 6, 3)
    idx = torch.tensor([[5, 0, 2], [1, 1, 4]])
    out = gather_tokens(x, idx)
    for b in range(2):
        assert torch.equal(out[b], x[b, idx[b]])


# ---- checkpoints ----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(5)
    m = MaskedAutoencoderViT(tiny_config())
    imgs = torch.rand(2, 16, 16, 3)
    path = save_checkpoint(tmp_path / "c.pth", m, {"epoch": 7, "seed": 5})
    m2, meta = load_checkpoint(path)
    assert meta["epoch"] == 7 and meta["seed"] == 5 and meta["config"] == m.cfg.to_dict()
    vis, mask = torch.tensor([[0, 3]]).repeat(2, 1), torch.tensor([[1, 2]]).repeat(2, 1)
    for a, b in zip(m.forward_pretrain(imgs, vis, mask)[:3], m2.forward_pretrain(imgs, vis, mask)[:3]):
        assert torch.equal(a, b)
    assert torch.equal(m(imgs), m2(imgs))
