import numpy as np
import pytest

from fadct import engine as E
from fadct.backbones import (MicroResNet, MicroResNetConfig, MicroViT, MicroViTConfig,
                             ResidualBlock, resnet_features, vit_features,
                             zero_residual_branches)
from fadct.engine import ShapeError, Tensor
from fadct.gradcheck import REL_TOL, check_gradients, finite_difference, grad_error
from fadct.rng import Rng

TINY_VIT = MicroViTConfig(image_size=8, patch_size=4, embed_dim=8, layers=1,
                          heads=2, mlp_ratio=2.0, out_dim=8)
TINY_RESNET = MicroResNetConfig(channels=(8,), blocks_per_stage=1, out_dim=8)


def _image(rng, size=8):
    return Tensor(rng.normals((3, size, size)) * 0.3 + 0.5)


def test_vit_output_shape():
    model = MicroViT(TINY_VIT, Rng(1))
    out = vit_features(model, _image(Rng(2)))
    assert out.shape == (8,)
    batch = model(Tensor(Rng(3).normals((4, 3, 8, 8))))
    assert batch.shape == (4, 8)


def test_vit_rejects_wrong_size():
    model = MicroViT(TINY_VIT, Rng(1))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((3, 16, 16))))


def test_attention_rows_are_probability_vectors():
    model = MicroViT(TINY_VIT, Rng(4))
    x = Tensor(Rng(5).normals((2, 3, 8, 8)))
    seq = model.patch_embed(model.patchify(x))
    block = model.blocks[0]
    _, probs = block.attn(block.ln1(seq), return_probs=True)
    sums = probs.data.sum(axis=-1)
    assert np.abs(sums - 1.0).max() < 1e-10
    assert (probs.data >= 0).all()


def test_patch_permutation_equivariance():
    # swapping two image patches together with their positional-embedding
    # rows must leave the class-token features unchanged
    model = MicroViT(TINY_VIT, Rng(6))
    img = _image(Rng(7)).data
    p = TINY_VIT.patch_size

    swapped = img.copy()
    # patches 0 and 3 in row-major grid order: (0,0) and (1,1) blocks
    blk_a = (slice(None), slice(0, p), slice(0, p))
    blk_b = (slice(None), slice(p, 2 * p), slice(p, 2 * p))
    swapped[blk_a], swapped[blk_b] = img[blk_b], img[blk_a].copy()

    out_orig = model(Tensor(img)).data
    pos = model.pos_embed.data
    saved = pos.copy()
    pos[[1, 4]] = pos[[4, 1]]  # token 0 is cls; patches 0/3 sit at rows 1/4
    out_swapped = model(Tensor(swapped)).data
    pos[...] = saved
    assert np.abs(out_orig - out_swapped).max() < 1e-9


def test_vit_deterministic():
    model = MicroViT(TINY_VIT, Rng(8))
    x = _image(Rng(9))
    a = model(x).data
    b = model(x).data
    assert np.array_equal(a, b)


def test_vit_full_gradient_check_tiny():
    model = MicroViT(TINY_VIT, Rng(10))
    x = _image(Rng(11))
    w = Tensor(Rng(12).normals((8,)))

    def loss():
        return E.tsum(E.mul(model(x), w))

    params = [p for _, p in model.named_parameters()]
    assert check_gradients(loss, params) < REL_TOL


def test_vit_no_dead_parameters():
    model = MicroViT(TINY_VIT, Rng(13))
    E.tsum(model(_image(Rng(14)))).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, f"no gradient reached {name}"
        assert p.grad.shape == p.shape


def test_resnet_output_shape():
    model = MicroResNet(TINY_RESNET, Rng(20))
    out = resnet_features(model, _image(Rng(21)))
    assert out.shape == (8,)
    batch = model(Tensor(Rng(22).normals((2, 3, 8, 8))))
    assert batch.shape == (2, 8)


def test_zeroed_residual_branch_is_identity():
    block = ResidualBlock(4, 4, stride=1, rng=Rng(23))
    for mod in (block.affine1, block.conv1, block.affine2, block.conv2):
        for _, p in mod.named_parameters():
            p.data[...] = 0.0
    x = Tensor(Rng(24).normals((2, 4, 6, 6)))
    assert np.abs(block(x).data - x.data).max() < 1e-10


def test_zeroed_residual_branch_equals_projected_skip():
    block = ResidualBlock(4, 8, stride=2, rng=Rng(25))
    for mod in (block.affine1, block.conv1, block.affine2, block.conv2):
        for _, p in mod.named_parameters():
            p.data[...] = 0.0
    x = Tensor(Rng(26).normals((2, 4, 6, 6)))
    assert np.abs(block(x).data - block.skip(x).data).max() < 1e-10


def test_zero_residual_model_depends_only_on_skip_path():
    model = MicroResNet(TINY_RESNET, Rng(27))
    zero_residual_branches(model)
    x = Tensor(Rng(28).normals((1, 3, 8, 8)))
    h = model.stem(x)
    h = E.relu(model.final_affine(h))
    pooled = E.tmean(E.reshape(h, (1, 8, 64)), axis=2)
    want = model.proj(pooled).data
    assert np.abs(model(x).data - want).max() < 1e-10


def test_resnet_conv_weight_gradient_matches_finite_difference():
    model = MicroResNet(TINY_RESNET, Rng(29))
    x = _image(Rng(30))

    def loss():
        return E.tsum(model(x))

    w = model.stages[0][0].conv1.w
    w.zero_grad()
    loss().backward()
    numeric = finite_difference(lambda: loss().item(), w)
    assert grad_error(w.grad, numeric) < 1e-4


def test_resnet_full_gradient_check_tiny():
    model = MicroResNet(TINY_RESNET, Rng(31))
    x = _image(Rng(32))
    w = Tensor(Rng(33).normals((8,)))

    def loss():
        return E.tsum(E.mul(model(x), w))

    params = [p for _, p in model.named_parameters()]
    assert check_gradients(loss, params) < REL_TOL


def test_resnet_no_dead_parameters():
    model = MicroResNet(MicroResNetConfig(channels=(4, 8), blocks_per_stage=2, out_dim=8),
                        Rng(34))
    E.tsum(model(Tensor(Rng(35).normals((1, 3, 8, 8))))).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, f"no gradient reached {name}"


def test_resnet_downsampling_shapes():
    model = MicroResNet(MicroResNetConfig(channels=(4, 8, 16), blocks_per_stage=1,
                                          out_dim=12), Rng(36))
    out = model(Tensor(Rng(37).normals((2, 3, 16, 16))))
    assert out.shape == (2, 12)


def test_config_validation():
    with pytest.raises(ValueError):
        MicroViTConfig(image_size=10, patch_size=4)
    with pytest.raises(ValueError):
        MicroViTConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        MicroResNetConfig(channels=())
