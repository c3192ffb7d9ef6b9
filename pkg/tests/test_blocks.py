"""Composite block tests: structure properties, constructed-weight oracles,
and the analytic-vs-instrumented MAC cross-check for every block kind."""

import numpy as np
import pytest

import phantomnet.blocks as blocks_mod
from phantomnet.blocks import (
    Bottleneck,
    C2fBlock,
    ConcatBlock,
    ConvBlock,
    DetectHead,
    DWSeparableBlock,
    GhostConvBlock,
    PhantomConvBlock,
    SPPFBlock,
    UpsampleBlock,
    build_block,
)
from phantomnet.tensor import (
    ConfigError,
    Tensor4,
    concat_channels,
    conv2d_naive,
    maxpool2d,
    silu,
    split_channels,
)

from conftest import counting_conv, max_rel_err


def init_random(block, seed=0):
    rng = np.random.default_rng(seed)
    for name, arr in block.param_arrays():
        if name.endswith(".weight") or name == "weight":
            arr[...] = rng.uniform(-0.5, 0.5, arr.shape).astype(np.float32)
        elif name.endswith("scale"):
            arr[...] = rng.uniform(0.8, 1.2, arr.shape).astype(np.float32)
        else:
            arr[...] = rng.uniform(-0.1, 0.1, arr.shape).astype(np.float32)
    return block


def rand_input(n, c, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor4(rng.uniform(-1, 1, (n, c, h, w)).astype(np.float32))


class TestConvBlock:
    def test_shape_1x1(self):
        blk = init_random(ConvBlock(8, 5, 1, 1))
        assert blk.forward(rand_input(1, 8, 4, 4)).shape == (1, 5, 4, 4)

    def test_zero_weights_give_zeros(self):
        blk = ConvBlock(4, 3, 3, 1)  # zero weights, zero bias, silu(0) == 0
        y = blk.forward(rand_input(1, 4, 6, 6))
        np.testing.assert_array_equal(y.data, np.zeros_like(y.data))

    def test_equals_naive_plus_silu(self):
        blk = init_random(ConvBlock(6, 4, 3, 2), seed=1)
        x = rand_input(2, 6, 9, 9, seed=2)
        want = silu(conv2d_naive(x, blk.p))
        got = blk.forward(x)
        assert max_rel_err(got.data, want.data) <= 1e-5


class TestDWSeparable:
    def test_param_count_formula(self):
        c, out_c, k = 16, 32, 3
        blk = DWSeparableBlock(c, out_c, k, 1)
        # depthwise c*k^2 + pointwise c*out_c, plus 2*(c+out_c) folded norm
        want = c * k * k + c * out_c + 2 * (c + out_c)
        assert blk.cost((c, 8, 8)).params == want

    def test_shape(self):
        blk = init_random(DWSeparableBlock(16, 32, 3, 1))
        assert blk.forward(rand_input(1, 16, 8, 8)).shape == (1, 32, 8, 8)

    def test_linear_phase_matches_combined_sum(self):
        # with activations removed, the block is exactly the fused two-step sum
        blk = init_random(DWSeparableBlock(4, 5, 3, 1), seed=3)
        blk.dw.act = False
        blk.pw.act = False
        blk.dw.p.scale[...] = 1.0
        blk.dw.p.bias[...] = 0.0
        blk.pw.p.scale[...] = 1.0
        x = rand_input(1, 4, 7, 7, seed=4)
        got = blk.forward(x)
        dw_out = conv2d_naive(x, blk.dw.p)
        want = conv2d_naive(dw_out, blk.pw.p)
        assert max_rel_err(got.data, want.data) <= 1e-6


class TestGhostConv:
    def test_first_half_equals_primary_alone(self):
        blk = init_random(GhostConvBlock(8, 8, 3, 1), seed=5)
        x = rand_input(1, 8, 6, 6, seed=6)
        y = blk.forward(x)
        primary = blk.primary.forward(x)
        np.testing.assert_array_equal(y.data[:, :4], primary.data)

    def test_first_half_invariant_under_cheap_perturbation(self):
        blk = init_random(GhostConvBlock(8, 8, 3, 1), seed=5)
        x = rand_input(1, 8, 6, 6, seed=6)
        before = blk.forward(x).data[:, :4].copy()
        blk.cheap.p.weights[...] += 1.0
        after = blk.forward(x).data[:, :4]
        np.testing.assert_array_equal(before, after)

    def test_fewer_params_than_dense(self):
        for in_c in (2, 8, 64):
            ghost = GhostConvBlock(in_c, 16, 5, 1).cost((in_c, 8, 8)).params
            dense = ConvBlock(in_c, 16, 5, 1).cost((in_c, 8, 8)).params
            assert ghost < dense

    def test_shape_preserved_at_stride_1(self):
        blk = init_random(GhostConvBlock(6, 10, 3, 1))
        assert blk.forward(rand_input(1, 6, 9, 9)).shape == (1, 10, 9, 9)

    def test_odd_out_channels_rejected(self):
        with pytest.raises(ConfigError, match="even out_channels"):
            GhostConvBlock(4, 7, 3, 1)


class TestPhantomConv:
    def test_shape(self):
        blk = init_random(PhantomConvBlock(16, 32, 1))
        assert blk.forward(rand_input(1, 16, 8, 8)).shape == (1, 32, 8, 8)

    def test_fewer_params_than_ghost_at_matched_config(self):
        # the block's reason to exist: cheaper than ghost at (64 -> 64, k=5)
        shape = (64, 8, 8)
        phantom = PhantomConvBlock(64, 64, 1).cost(shape).params
        ghost = GhostConvBlock(64, 64, 5, 1).cost(shape).params
        assert phantom < ghost

    def test_param_ordering_dense_ghost_phantom(self):
        shape = (64, 8, 8)
        dense = ConvBlock(64, 64, 5, 1).cost(shape).params
        ghost = GhostConvBlock(64, 64, 5, 1).cost(shape).params
        phantom = PhantomConvBlock(64, 64, 1).cost(shape).params
        assert dense > ghost > phantom

    def test_first_half_equals_primary_branch(self):
        blk = init_random(PhantomConvBlock(16, 32, 1), seed=7)
        x = rand_input(1, 16, 8, 8, seed=8)
        y = blk.forward(x)
        primary = blk.primary.forward(x)
        np.testing.assert_array_equal(y.data[:, :16], primary.data)

    def test_first_half_invariant_under_cheap_perturbation(self):
        blk = init_random(PhantomConvBlock(16, 32, 1), seed=7)
        x = rand_input(1, 16, 8, 8, seed=8)
        before = blk.forward(x).data[:, :16].copy()
        blk.cheap.dw.p.weights[...] += 0.5
        blk.cheap.pw.p.weights[...] -= 0.5
        after = blk.forward(x).data[:, :16]
        np.testing.assert_array_equal(before, after)

    def test_divisibility_errors_carry_hint(self):
        with pytest.raises(ConfigError, match="divisible by 4"):
            PhantomConvBlock(6, 8, 1)
        with pytest.raises(ConfigError, match="multiple of 8"):
            PhantomConvBlock(8, 4, 1)


class TestC2f:
    def test_shortcut_changes_output(self):
        x = rand_input(1, 8, 6, 6, seed=9)
        with_sc = init_random(C2fBlock(8, 8, 2, shortcut=True), seed=10)
        without = init_random(C2fBlock(8, 8, 2, shortcut=False), seed=10)
        assert not np.allclose(with_sc.forward(x).data, without.forward(x).data)

    def test_n0_degenerates_to_split_concat(self):
        blk = init_random(C2fBlock(6, 8, 0, shortcut=False))
        assert blk.forward(rand_input(1, 6, 5, 5)).shape == (1, 8, 5, 5)

    def test_identity_bottlenecks_reduce_to_final_conv(self):
        # 3x3 identity kernels (act off) make each bottleneck a passthrough
        blk = init_random(C2fBlock(4, 2, 2, shortcut=False), seed=11)
        for m in blk.m:
            for cv in (m.cv1, m.cv2):
                cv.act = False
                cv.p.weights[...] = 0.0
                cv.p.weights[0, 0, 1, 1] = 1.0
                cv.p.scale[...] = 1.0
                cv.p.bias[...] = 0.0
        x = rand_input(1, 4, 5, 5, seed=12)
        y = blk.forward(x)
        a, b = split_channels(blk.cv1.forward(x), [1, 1])
        want = blk.cv2.forward(concat_channels([a, b, b, b]))
        np.testing.assert_array_equal(y.data, want.data)

    def test_c2fi_has_no_add_nodes(self):
        c2f = C2fBlock(8, 8, 3, shortcut=True)
        c2fi = C2fBlock(8, 8, 3, shortcut=False)
        adds = lambda b: sum(1 for m in b.m if m.shortcut)
        assert adds(c2fi) == 0 <= adds(c2f)
        assert adds(c2f) == 3

    def test_even_out_channels_required(self):
        with pytest.raises(ConfigError, match="even out_channels"):
            C2fBlock(4, 5, 1, shortcut=False)


class TestSPPF:
    def test_constant_input_stays_spatially_constant(self):
        blk = init_random(SPPFBlock(8, 6), seed=13)
        y = blk.forward(Tensor4.full(1, 8, 7, 7, 1.5))
        first = y.data[:, :, :1, :1]
        np.testing.assert_array_equal(y.data, np.broadcast_to(first, y.data.shape))

    def test_spatial_shape_preserved(self):
        blk = init_random(SPPFBlock(8, 16))
        assert blk.forward(rand_input(1, 8, 9, 9)).shape == (1, 16, 9, 9)

    def test_pool_cascade_equals_wider_window(self):
        # two chained k=5 same-padding pools == one k=9 pool
        x = rand_input(1, 3, 10, 10, seed=14)
        p2 = maxpool2d(maxpool2d(x, 5, 1, 2), 5, 1, 2)
        wide = maxpool2d(x, 9, 1, 4)
        np.testing.assert_array_equal(p2.data, wide.data)


class TestDetectHead:
    def test_channel_count_for_4_classes(self):
        head = DetectHead([8, 16, 32], num_classes=4, reg_max=16)
        assert head.out_channels == 4 * 16 + 4 == 68

    def test_spatial_dims_match_inputs(self):
        head = init_random(DetectHead([8, 16, 32], num_classes=2, reg_max=4))
        feats = [rand_input(1, 8, 8, 8), rand_input(1, 16, 4, 4), rand_input(1, 32, 2, 2)]
        out = head.forward(feats)
        assert [(m.h, m.w) for m in out] == [(8, 8), (4, 4), (2, 2)]
        assert all(m.c == 4 * 4 + 2 for m in out)

    def test_decoupled_branches(self):
        head = init_random(DetectHead([8, 16, 32], num_classes=2, reg_max=4), seed=15)
        feats = [rand_input(1, 8, 8, 8, 16), rand_input(1, 16, 4, 4, 17), rand_input(1, 32, 2, 2, 18)]
        before = [m.data[:, : 4 * 4].copy() for m in head.forward(feats)]
        for stack in head.cls_stacks:
            for blk in stack:
                blk.p.weights[...] = 0.0
        after = [m.data[:, : 4 * 4] for m in head.forward(feats)]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)

    def test_wrong_scale_count(self):
        with pytest.raises(ConfigError, match="3 feature scales"):
            DetectHead([8, 16], num_classes=2)


class TestStrideContract:
    @pytest.mark.parametrize(
        "make,stride",
        [
            (lambda: ConvBlock(8, 8, 3, 2), 2),
            (lambda: DWSeparableBlock(8, 8, 3, 2), 2),
            (lambda: GhostConvBlock(8, 8, 3, 2), 2),
            (lambda: PhantomConvBlock(8, 8, 2), 2),
            (lambda: C2fBlock(8, 8, 1, False), 1),
            (lambda: SPPFBlock(8, 8), 1),
        ],
    )
    def test_downsampling_factor(self, make, stride):
        blk = init_random(make())
        y = blk.forward(rand_input(1, 8, 8, 8))
        assert y.h == 8 // stride and y.w == 8 // stride


class TestMacCrossCheck:
    """Analytic MAC counts must equal multiplications executed by an
    instrumented naive forward pass."""

    @pytest.mark.parametrize(
        "name,make,in_shapes",
        [
            ("Conv", lambda: ConvBlock(4, 6, 3, 2), [(4, 8, 8)]),
            ("Conv1x1", lambda: ConvBlock(4, 6, 1, 1), [(4, 8, 8)]),
            ("DWSeparable", lambda: DWSeparableBlock(4, 6, 3, 1), [(4, 8, 8)]),
            ("GhostConv", lambda: GhostConvBlock(4, 8, 3, 1), [(4, 8, 8)]),
            ("PhantomConv", lambda: PhantomConvBlock(4, 8, 1), [(4, 8, 8)]),
            ("Bottleneck", lambda: Bottleneck(4, True), [(4, 8, 8)]),
            ("C2f", lambda: C2fBlock(4, 4, 2, True), [(4, 8, 8)]),
            ("C2fi", lambda: C2fBlock(4, 4, 2, False), [(4, 8, 8)]),
            ("SPPF", lambda: SPPFBlock(4, 6), [(4, 8, 8)]),
            ("Upsample", lambda: UpsampleBlock(4, 2), [(4, 8, 8)]),
            ("Concat", lambda: ConcatBlock([2, 3]), [(2, 8, 8), (3, 8, 8)]),
            (
                "Detect",
                lambda: DetectHead([4, 6, 8], num_classes=2, reg_max=2),
                [(4, 8, 8), (6, 4, 4), (8, 2, 2)],
            ),
        ],
    )
    def test_block_macs(self, monkeypatch, name, make, in_shapes):
        blk = init_random(make(), seed=19)
        counter = [0]
        monkeypatch.setattr(
            blocks_mod, "conv2d_fast", lambda x, p: counting_conv(x, p, counter)
        )
        xs = [rand_input(1, c, h, w, seed=20 + i) for i, (c, h, w) in enumerate(in_shapes)]
        blk.forward(xs if blk.multi_input else xs[0])
        analytic = blk.cost(in_shapes if blk.multi_input else in_shapes[0])
        assert counter[0] == analytic.macs, f"{name}: counted {counter[0]} != analytic {analytic.macs}"


class TestBuildBlock:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown block kind"):
            build_block("Conv3D", [4], {"out_channels": 8})

    def test_unknown_arg(self):
        with pytest.raises(ConfigError, match="unknown args"):
            build_block("Conv", [4], {"out_channels": 8, "kernel_size": 3})

    def test_missing_required_arg(self):
        with pytest.raises(ConfigError, match="missing required arg"):
            build_block("Conv", [4], {})

    def test_c2fi_rejects_shortcut_arg(self):
        with pytest.raises(ConfigError, match="unknown args"):
            build_block("C2fi", [4], {"out_channels": 8, "shortcut": True})

    def test_sequential_repeats(self):
        blk = init_random(build_block("Conv", [4], {"out_channels": 8, "kernel": 3}, repeats=3))
        y = blk.forward(rand_input(1, 4, 6, 6))
        assert y.shape == (1, 8, 6, 6)
        names = [n for n, _ in blk.param_arrays()]
        assert names[0].startswith("r0.") and names[-1].startswith("r2.")

    def test_c2f_repeats_are_bottlenecks(self):
        blk = build_block("C2f", [8], {"out_channels": 8}, repeats=3)
        assert len(blk.m) == 3
