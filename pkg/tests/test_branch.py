import math

import numpy as np
import pytest

from commonrep import branch as br
from commonrep import ops
from commonrep.autodiff import ShapeError, Variable, backward, no_grad
from commonrep.gradcheck import finite_diff_check


@pytest.fixture
def cfg():
    return br.BranchConfig(feature_channels=6, n_classes=4)


def zero_params(params):
    return {k: Variable(np.zeros_like(v.value), requires_grad=True, name=k) for k, v in params.items()}


def test_zero_params_give_zero_features(cfg):
    params = zero_params(br.init_branch(cfg, "rgb", np.random.default_rng(0)))
    img = np.random.default_rng(1).standard_normal((3, 16, 16))
    out = br.branch_forward(cfg, params, "rgb", img)
    assert not out.value.any()


def test_same_seed_same_features(cfg):
    img = np.random.default_rng(2).standard_normal((3, 16, 16))
    a = br.branch_forward(cfg, br.init_branch(cfg, "rgb", np.random.default_rng(7)), "rgb", img)
    b = br.branch_forward(cfg, br.init_branch(cfg, "rgb", np.random.default_rng(7)), "rgb", img)
    assert a.value.tobytes() == b.value.tobytes()


def test_feature_shape():
    cfg = br.BranchConfig(feature_channels=16)
    params = br.init_branch(cfg, "rgb", np.random.default_rng(0))
    out = br.branch_forward(cfg, params, "rgb", np.zeros((3, 32, 32)))
    assert out.shape == (16, 8, 8)
    batched = br.branch_forward(cfg, params, "rgb", np.zeros((2, 3, 32, 32)))
    assert batched.shape == (2, 16, 8, 8)


def test_bad_input_shape(cfg):
    params = br.init_branch(cfg, "rgb", np.random.default_rng(0))
    with pytest.raises(ShapeError):
        br.branch_forward(cfg, params, "rgb", np.zeros((3, 30, 32)))
    with pytest.raises(ShapeError):
        br.branch_forward(cfg, params, "rgb", np.zeros((1, 32, 32)))


def test_parameter_roles(cfg):
    params = br.init_branch(cfg, "depth", np.random.default_rng(0))
    roles = {br.role_of(k) for k in params}
    assert roles == set(br.ROLES)
    assert all(k.startswith("depth.") for k in params)
    assert set(br.select(params, "head")) == {"depth.head.out.weight", "depth.head.out.bias"}


class TestAspp:
    def test_single_rate_identity_mix_is_one_conv(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 7, 7))
        k = rng.standard_normal((3, 3, 3, 3))
        mix = np.eye(3).reshape(3, 3, 1, 1)
        out = br.aspp_lite(x, {1: Variable(k)}, Variable(mix))
        np.testing.assert_allclose(out.value, ops.conv2d(x, k, padding=1).value, rtol=0, atol=1e-14)

    def test_interior_tap_counting(self):
        # on a constant map every rate sees 9 in-image taps in the interior
        x = np.full((1, 13, 13), 2.0)
        ones = np.ones((1, 1, 3, 3))
        for rate in (1, 2, 3):
            y = ops.conv2d(x, ones, dilation=rate, padding=rate).value[0]
            assert y[6, 6] == 18.0
            assert y[0, 0] == 8.0  # corner keeps 4 taps regardless of rate
        out = br.aspp_lite(x, {r: Variable(ones) for r in (1, 2, 3)}, Variable(np.ones((1, 1, 1, 1))))
        assert out.value[0, 6, 6] == 54.0

    def test_shape_preserved(self):
        x = np.zeros((4, 6, 5))
        kernels = {r: Variable(np.zeros((4, 4, 3, 3))) for r in (1, 2, 4)}
        assert br.aspp_lite(x, kernels, Variable(np.zeros((4, 4, 1, 1)))).shape == (4, 6, 5)


class TestHeads:
    def test_zero_segmentation_head_uniform(self, cfg):
        params = zero_params(br.init_head(cfg, "rgb", np.random.default_rng(0)))
        logits = br.segmentation_head(params, "rgb", np.ones((6, 4, 4)), (16, 16))
        assert logits.shape == (4, 16, 16)
        assert not logits.value.any()

    def test_zero_depth_head_is_ln2(self, cfg):
        params = zero_params(br.init_head(cfg, "depth", np.random.default_rng(0), kind="depth"))
        out = br.depth_head(params, "depth", np.ones((6, 4, 4)), (16, 16))
        assert out.shape == (16, 16)
        np.testing.assert_allclose(out.value, math.log(2.0), rtol=1e-15)
        assert abs(out.value[0, 0] - 0.6931) < 1e-4

    def test_dominant_weight_row_wins(self, cfg):
        params = zero_params(br.init_head(cfg, "rgb", np.random.default_rng(0)))
        params["rgb.head.out.weight"].value[2] = 50.0
        feat = np.abs(np.random.default_rng(3).standard_normal((6, 4, 4))) + 0.1
        logits = br.segmentation_head(params, "rgb", feat, (16, 16)).value
        assert (logits.argmax(axis=0) == 2).all()


def test_branch_gradients_match_finite_differences():
    cfg = br.BranchConfig(feature_channels=4, encoder_channels=(3, 4), rates=(1, 2), n_classes=3)
    params = br.init_branch(cfg, "rgb", np.random.default_rng(0))
    img = np.random.default_rng(1).standard_normal((3, 8, 8))
    proj = np.random.default_rng(2).standard_normal((4, 2, 2))

    def f(v):
        return ops.sum(ops.mul(br.branch_forward(cfg, params, "rgb", v), proj))

    assert finite_diff_check(f, img) < 1e-4
    key = "rgb.decoder.aspp2.weight"

    def g(v):
        return ops.sum(ops.mul(br.branch_forward(cfg, dict(params, **{key: v}), "rgb", img), proj))

    assert finite_diff_check(g, params[key].value) < 1e-4


def test_frozen_encoder_gets_no_update(cfg):
    from commonrep.optim import SGD

    params = br.init_branch(cfg, "rgb", np.random.default_rng(0))
    frozen = set(br.select(params, "encoder"))
    for k in frozen:
        params[k].requires_grad = False
    before = {k: params[k].value.tobytes() for k in frozen}
    opt = SGD(params, momentum=0.9, frozen=frozen)
    img = np.random.default_rng(1).standard_normal((3, 16, 16))
    for _ in range(3):
        opt.zero_grad()
        feat = br.branch_forward(cfg, params, "rgb", img)
        backward(ops.mean(ops.square(br.segmentation_head(params, "rgb", feat, (16, 16)))))
        opt.step(0.1)
    assert {k: params[k].value.tobytes() for k in frozen} == before


def test_translation_consistency_in_interior():
    # shifting by a multiple of the stride shifts interior features by shift/4
    cfg = br.BranchConfig(feature_channels=4)
    params = br.init_branch(cfg, "rgb", np.random.default_rng(0))
    rng = np.random.default_rng(1)
    big = rng.standard_normal((3, 144, 144))
    with no_grad():
        a = br.branch_forward(cfg, params, "rgb", big[:, :128, :128]).value
        b = br.branch_forward(cfg, params, "rgb", big[:, 8:136, 8:136]).value
    # receptive field stays inside both crops well away from the border
    np.testing.assert_allclose(a[:, 12:20, 12:20], b[:, 10:18, 10:18], rtol=1e-10, atol=1e-12)
