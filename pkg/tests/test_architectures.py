import numpy as np
import pytest

from sepgnet import relmatrix as rm
from sepgnet.architectures import (
    ArchSpec,
    BlockSequence,
    ResNetClassifier,
    UNetSegmenter,
    architecture_hash,
    block_parameter_counts,
    build,
    canonical_blocks,
    group_structure_report,
    scaled_width,
    uniform_strategies,
)
from sepgnet.autodiff import Tensor
from sepgnet.training import gate_parameters


def spec(family="resnet18", strategy=None, **kw):
    defaults = dict(
        family=family,
        num_classes=4,
        in_channels=8,
        width_scale=1 / 8,
    )
    if strategy is not None:
        defaults["block_strategies"] = uniform_strategies(family, strategy)
    defaults.update(kw)
    return ArchSpec(**defaults)


class TestArchSpec:
    def test_unknown_block_rejected(self):
        with pytest.raises(ValueError):
            spec(block_strategies={"Layer9": "dgconv"})

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError):
            spec(block_strategies={"Layer1": "octave"})

    def test_width_scale_bounds(self):
        with pytest.raises(ValueError):
            spec(width_scale=0.0)
        with pytest.raises(ValueError):
            spec(width_scale=1.5)

    def test_scaled_width_power_of_two_floor(self):
        assert scaled_width(64, 1.0) == 64
        assert scaled_width(64, 1 / 8) == 8
        assert scaled_width(64, 1 / 16) == 8  # floor
        assert scaled_width(1024, 1 / 4) == 256


class TestResNetStructure:
    def test_resnet18_full_width_plan(self):
        net = build(spec(width_scale=1.0))
        for name, width, count in [
            ("Layer1", 64, 2),
            ("Layer2", 128, 2),
            ("Layer3", 256, 2),
            ("Layer4", 512, 2),
        ]:
            layer = net.named_blocks[name]
            assert isinstance(layer, BlockSequence)
            assert len(layer.blocks) == count
            assert all(b.spec.c_out == width for b in layer.blocks)

    def test_resnet50_full_width_plan(self):
        net = build(ArchSpec(family="resnet50", num_classes=4, in_channels=8))
        for name, width, count in [
            ("Layer1", 256, 2),
            ("Layer2", 512, 3),
            ("Layer3", 1024, 5),
            ("Layer4", 2048, 2),
        ]:
            layer = net.named_blocks[name]
            assert len(layer.blocks) == count
            assert all(b.spec.c_out == width for b in layer.blocks)
            assert all(b.spec.kind == "bottleneck" for b in layer.blocks)

    def test_forward_shapes(self):
        net = build(spec())
        net.init_params(np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((3, 8, 7, 7)).astype(np.float32))
        out = net.forward(x, training=True)
        assert out.shape == (3, 4)


class TestUNetStructure:
    def test_quarter_width_channel_plan(self):
        net = build(spec(family="unet", width_scale=1 / 4, in_channels=8))
        plan = []
        for name in ("Down1", "Down2", "Down3", "Down4"):
            plan.append(net.named_blocks[name].double_conv.spec.c_out)
        for name in ("Up1", "Up2", "Up3", "Up4"):
            plan.append(net.named_blocks[name].double_conv.spec.c_out)
        assert plan == [32, 64, 128, 256, 128, 64, 32, 16]
        assert net.named_blocks["InConv"].spec.c_out == 16

    def test_forward_preserves_spatial_size(self):
        net = build(spec(family="unet", width_scale=1 / 8, in_channels=6, num_classes=5))
        net.init_params(np.random.default_rng(2))
        x = Tensor(np.random.default_rng(3).standard_normal((1, 6, 32, 48)).astype(np.float32))
        out = net.forward(x, training=True)
        assert out.shape == (1, 5, 32, 48)

    def test_indivisible_input_rejected(self):
        net = build(spec(family="unet", in_channels=6))
        with pytest.raises(ValueError):
            net.forward(Tensor(np.zeros((1, 6, 20, 20), dtype=np.float32)))


def hand_resnet18_counts(ws, in_channels, num_classes):
    """Independent per-block parameter formulas for the regular network."""
    w = [scaled_width(base, ws) for base in (64, 64, 128, 256, 512)]

    def conv(co, ci, k):
        return co * ci * k * k

    def bn(c):
        return 2 * c

    counts = {"InConv": conv(w[0], in_channels, 3) + bn(w[0])}
    c_prev = w[0]
    for i, width in enumerate(w[1:], start=1):
        total = 0
        for b in range(2):
            stride = 2 if (i > 1 and b == 0) else 1
            total += conv(width, c_prev, 3) + bn(width)
            total += conv(width, width, 3) + bn(width)
            if stride != 1 or c_prev != width:
                total += conv(width, c_prev, 1) + bn(width)
            c_prev = width
        counts[f"Layer{i}"] = total
    counts["Head"] = w[-1] * num_classes + num_classes
    return counts


class TestParameterCounts:
    @pytest.mark.parametrize("ws", [1 / 8, 1 / 4])
    def test_resnet18_counts_match_hand_formula(self, ws):
        s = spec(width_scale=ws)
        net = build(s)
        got = block_parameter_counts(net)
        expected = hand_resnet18_counts(ws, s.in_channels, s.num_classes)
        assert got == expected

    @pytest.mark.parametrize("ws", [1 / 8, 1 / 4])
    def test_count_is_function_of_spec(self, ws):
        a = build(spec(width_scale=ws)).parameter_count()
        b = build(spec(width_scale=ws)).parameter_count()
        assert a == b

    def test_gated_network_adds_only_gates(self):
        base = build(spec()).parameter_count()
        gated_net = build(spec(strategy="dgconv"))
        gates = sum(g.size for g in gate_parameters(gated_net))
        assert gated_net.parameter_count() == base + gates
        assert gates > 0


class TestGroupStructureReport:
    def test_dense_init_gates_give_zero_sparsity(self):
        net = build(spec(strategy="dgconv"))
        net.init_params(np.random.default_rng(4))
        records = group_structure_report(net)
        assert records, "gated network must have masked layers"
        assert all(r.sparsity == 0.0 for r in records)
        assert all(r.groups == 1 for r in records)

    def test_all_negative_gates_hit_closed_form(self):
        net = build(spec(strategy="dgconv"))
        net.init_params(np.random.default_rng(5))
        for g in gate_parameters(net):
            g.data[...] = -1.0
        records = group_structure_report(net)
        for record, conv in zip(records, _all_masked(net)):
            c_in, c_out = conv.spec.c_in, conv.spec.c_out
            if c_in == c_out and conv.gates is not None:
                k = rm.shape_params(c_in, c_out).num_gates
                assert record.sparsity == pytest.approx(1 - 2.0**-k)
                assert record.groups == 2**k

    def test_mixed_gates_match_direct_recompute(self):
        net = build(spec(strategy="dgconv"))
        net.init_params(np.random.default_rng(6))
        rng = np.random.default_rng(7)
        for g in gate_parameters(net):
            g.data[...] = rng.uniform(-1, 1, size=g.data.shape)
        records = group_structure_report(net)
        for record, conv in zip(records, _all_masked(net)):
            mask = conv.current_mask()
            assert record.groups == rm.count_groups(mask)
            assert record.sparsity == rm.sparsity(mask)

    def test_unmasked_network_warns_and_is_empty(self):
        net = build(spec())
        with pytest.warns(UserWarning):
            records = group_structure_report(net)
        assert records == []


def _all_masked(net):
    out = []
    for block in net.named_blocks.values():
        out.extend(block.masked_convs())
    return out


class TestStrategySwapConsistency:
    def test_dense_gates_equal_regular_network(self):
        gated = build(spec(strategy="dgconv"))
        plain = build(spec())
        rng = np.random.default_rng(8)
        gated.init_params(rng)
        for g in gate_parameters(gated):
            g.data[...] = 0.05  # every mask all-ones
        gate_ids = {id(g) for g in gate_parameters(gated)}
        gated_params = [p for p in gated.parameters() if id(p) not in gate_ids]
        plain_params = plain.parameters()
        assert len(gated_params) == len(plain_params)
        for src, dst in zip(gated_params, plain_params):
            dst.data[...] = src.data
        x = Tensor(np.random.default_rng(9).standard_normal((2, 8, 7, 7)).astype(np.float32))
        a = gated.forward(x, training=False)
        b = plain.forward(x, training=False)
        np.testing.assert_array_equal(a.data, b.data)


class TestArchitectureHash:
    def test_same_spec_same_hash(self):
        assert architecture_hash(build(spec())) == architecture_hash(build(spec()))

    def test_strategy_changes_hash(self):
        assert architecture_hash(build(spec())) != architecture_hash(
            build(spec(strategy="dgconv"))
        )

    def test_width_changes_hash(self):
        assert architecture_hash(build(spec(width_scale=1 / 8))) != architecture_hash(
            build(spec(width_scale=1 / 4))
        )


class TestCanonicalBlocks:
    def test_block_lists(self):
        assert canonical_blocks("resnet18") == (
            "InConv",
            "Layer1",
            "Layer2",
            "Layer3",
            "Layer4",
        )
        assert canonical_blocks("unet") == (
            "InConv",
            "Down1",
            "Down2",
            "Down3",
            "Down4",
            "Up1",
            "Up2",
            "Up3",
            "Up4",
        )
