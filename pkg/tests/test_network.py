import struct

import numpy as np
import pytest

from nseg import checkpoint, network as N, tensor as T
from nseg.errors import ContractError, LoadError
from nseg.network import GraphConfig, NodeId
from nseg.training import supervision_loss

from helpers import numerical_grad, rel_error


def randomize_heads(model, seed=0):
    rng = np.random.default_rng(seed)
    params = {k: (rng.standard_normal(v.shape).astype(v.dtype) if k.startswith("head") else v)
              for k, v in model.params.items()}
    return model.with_state(params)


def enumerate_units(config):
    """Independent count: walk the instantiated weight arrays of a built model."""
    return sum(a.size for a in N.build_graph(config, 0).params.values())


class TestTopology:
    def test_node_inputs_examples(self):
        cfg = GraphConfig(depth=4)
        assert [str(s) for s in N.node_inputs(NodeId(0, 0), cfg)] == ["external input"]
        assert [str(s) for s in N.node_inputs(NodeId(2, 0), cfg)] == ["Downsample(X^{1,0})"]
        assert [str(s) for s in N.node_inputs(NodeId(0, 2), cfg)] == ["X^{0,0}", "X^{0,1}", "Upsample(X^{1,1})"]

    def test_invalid_node(self):
        with pytest.raises(ContractError):
            N.node_inputs(NodeId(2, 2), GraphConfig(depth=4))

    @pytest.mark.parametrize("L", range(2, 9))
    def test_node_count_and_arity(self, L):
        cfg = GraphConfig(depth=L)
        nodes = cfg.nodes()
        assert len(nodes) == L * (L + 1) // 2
        for node in nodes:
            if node.j > 0:
                assert len(N.node_inputs(node, cfg)) == node.j + 1

    @pytest.mark.parametrize("L", range(2, 9))
    def test_topological_order(self, L):
        cfg = GraphConfig(depth=L)
        order = N.evaluation_order(cfg)
        pos = {n: k for k, n in enumerate(order)}
        assert len(order) == len(cfg.nodes())
        for node in order:
            for src in N.node_inputs(node, cfg):
                if src.node is not None:
                    assert pos[src.node] < pos[node]

    def test_depth2_nodes(self):
        assert GraphConfig(depth=2).nodes() == [NodeId(0, 0), NodeId(0, 1), NodeId(1, 0)]

    def test_block_channels(self):
        cfg = GraphConfig(depth=4, base_channels=8)
        assert cfg.block_in_channels(NodeId(0, 0)) == 1
        assert cfg.block_in_channels(NodeId(2, 0)) == 16
        assert cfg.block_in_channels(NodeId(0, 3)) == 3 * 8 + 16
        assert cfg.block_in_channels(NodeId(1, 2)) == 2 * 16 + 32


class TestBuild:
    def test_node_blocks(self):
        model = N.build_graph(GraphConfig(depth=4), 0)
        convs = [k for k in model.params if k.endswith("/conv") and not k.startswith("head")]
        assert len(convs) == 10 * 2

    def test_deterministic(self):
        a = N.build_graph(GraphConfig(depth=3), 5)
        b = N.build_graph(GraphConfig(depth=3), 5)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_seed_matters(self):
        a = N.build_graph(GraphConfig(depth=3), 1)
        b = N.build_graph(GraphConfig(depth=3), 2)
        assert not np.array_equal(a.params["x0_0/unit0/conv"], b.params["x0_0/unit0/conv"])


class TestParamCount:
    def test_single_unit(self):
        cfg = GraphConfig(depth=2, base_channels=8, input_channels=1)
        c_in, k, c_out = 1, 3, 8
        assert c_in * k ** 2 * c_out == 72 and 2 * c_out == 16
        first = N.build_graph(cfg, 0)
        assert first.params["x0_0/unit0/conv"].size == 72
        assert first.params["x0_0/unit0/bn/gamma"].size + first.params["x0_0/unit0/bn/beta"].size == 16

    @pytest.mark.parametrize("L", [2, 3, 4, 5])
    @pytest.mark.parametrize("C0", [4, 8])
    def test_matches_enumeration(self, L, C0):
        cfg = GraphConfig(depth=L, base_channels=C0)
        assert N.param_count(cfg) == enumerate_units(cfg)
        model = N.build_graph(cfg, 0)
        for d in range(1, L):
            assert N.param_count(cfg, d) == N.prune(model, d).n_parameters()

    @pytest.mark.parametrize("L", [3, 4, 5, 6])
    def test_strictly_increasing(self, L):
        cfg = GraphConfig(depth=L)
        counts = [N.param_count(cfg, d) for d in range(1, L)]
        assert all(a < b for a, b in zip(counts, counts[1:]))

    def test_bad_level(self):
        with pytest.raises(ContractError):
            N.param_count(GraphConfig(depth=4), 4)


class TestForward:
    def test_head_count(self):
        model = N.build_graph(GraphConfig(depth=4, base_channels=4), 0)
        fp = N.forward(model, np.random.default_rng(0).random((2, 1, 16, 16)))
        assert len(fp.outputs) == 3
        assert all(o.shape == (2, 1, 16, 16) for o in fp.outputs)

    def test_prune_level_one(self):
        model = N.prune(N.build_graph(GraphConfig(depth=5, base_channels=2), 0), 1)
        assert len(N.forward(model, np.zeros((1, 1, 16, 16), np.float32)).outputs) == 1

    def test_no_deep_supervision(self):
        model = N.build_graph(GraphConfig(depth=4, base_channels=2, deep_supervision=False), 0)
        fp = N.forward(model, np.zeros((1, 1, 8, 8), np.float32))
        assert fp.heads == [3]

    def test_probability_range(self):
        model = randomize_heads(N.build_graph(GraphConfig(depth=3, base_channels=4), 0))
        x = np.random.default_rng(1).standard_normal((2, 1, 8, 8)).astype(np.float32) * 5
        for mode in ("train", "infer"):
            for o in N.forward(model, x, mode).outputs:
                assert ((o > 0) & (o < 1)).all()

    def test_indivisible_input(self):
        with pytest.raises(ContractError):
            N.forward(N.build_graph(GraphConfig(depth=4), 0), np.zeros((1, 1, 12, 12), np.float32))

    def test_model_not_mutated(self):
        model = N.build_graph(GraphConfig(depth=3, base_channels=2), 0)
        before = {k: v.copy() for k, v in model.buffers.items()}
        fp = N.forward(model, np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32))
        for k in before:
            np.testing.assert_array_equal(model.buffers[k], before[k])
        assert any(not np.array_equal(fp.buffers[k], before[k]) for k in before)


class TestBackward:
    def test_zero_head_grads(self):
        model = randomize_heads(N.build_graph(GraphConfig(depth=3, base_channels=2), 0))
        fp = N.forward(model, np.random.default_rng(0).random((1, 1, 8, 8)).astype(np.float32))
        grads = N.backward(model, fp, [np.zeros_like(o) for o in fp.outputs])
        assert set(grads) == set(model.params)
        assert all(not g.any() for g in grads.values())

    def test_missing_head_grad(self):
        model = N.build_graph(GraphConfig(depth=3, base_channels=2), 0)
        fp = N.forward(model, np.zeros((1, 1, 8, 8), np.float32))
        with pytest.raises(ContractError):
            N.backward(model, fp, fp.outputs[:1])

    def test_end_to_end_finite_differences(self):
        model = randomize_heads(N.build_graph(GraphConfig(depth=3, base_channels=2), 3, dtype=np.float64))
        rng = np.random.default_rng(7)
        x = rng.random((1, 1, 8, 8))
        y = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
        fp = N.forward(model, x)
        _, head_grads = supervision_loss(fp, y)
        grads = N.backward(model, fp, head_grads)
        f = lambda: supervision_loss(N.forward(model, x), y)[0]
        worst = max(rel_error(grads[k], numerical_grad(f, model.params[k])) for k in model.params)
        assert worst < 1e-4

    def test_pruned_reachability(self):
        cfg = GraphConfig(depth=4, base_channels=2)
        model = N.prune(N.build_graph(cfg, 0), 1)
        fp = N.forward(model, np.random.default_rng(0).random((1, 1, 8, 8)).astype(np.float32))
        grads = N.backward(model, fp, [np.ones_like(o) for o in fp.outputs])

        # oracle: ancestors of X^{0,1} by walking node_inputs
        seen, stack = set(), [NodeId(0, 1)]
        while stack:
            node = stack.pop()
            if node not in seen:
                seen.add(node)
                stack.extend(s.node for s in N.node_inputs(node, cfg) if s.node is not None)
        assert seen == {NodeId(0, 0), NodeId(1, 0), NodeId(0, 1)}
        with_grad = {k.split("/")[0] for k in grads if not k.startswith("head")}
        assert with_grad == {n.key for n in seen}
        assert {k for k in grads if k.startswith("head")} == {"head1/conv"}


class TestPrune:
    def test_active_nodes(self):
        model = N.prune(N.build_graph(GraphConfig(depth=4), 0), 1)
        assert set(model.active_nodes) == {NodeId(0, 0), NodeId(1, 0), NodeId(0, 1)}

    def test_counts_decrease(self):
        cfg = GraphConfig(depth=4)
        full = N.param_count(cfg)
        assert all(N.param_count(cfg, d) < full for d in range(1, 3))

    def test_out_of_range(self):
        model = N.build_graph(GraphConfig(depth=4), 0)
        with pytest.raises(ContractError):
            N.prune(model, 0)
        with pytest.raises(ContractError):
            N.prune(N.prune(model, 1), 2)

    def test_weights_shared(self):
        model = N.build_graph(GraphConfig(depth=4), 0)
        pruned = N.prune(model, 2)
        for k, v in pruned.params.items():
            assert v is model.params[k]

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_bitwise_equal_heads(self, mode):
        model = randomize_heads(N.build_graph(GraphConfig(depth=4, base_channels=4), 0))
        x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
        full = N.forward(model, x, mode)
        for d in range(1, 4):
            pruned = N.forward(N.prune(model, d), x, mode)
            assert pruned.final.tobytes() == full.outputs[d - 1].tobytes()

    def test_reduction_report(self):
        cfg = GraphConfig(depth=5, base_channels=8)
        table = dict((d, pct) for d, _, pct in N.reduction_table(cfg))
        step = 100 * (1 - N.param_count(cfg, 3) / N.param_count(cfg, 4))
        print(f"depth 5, base 8: d=3 vs d=4 reduction {step:.1f}% (published figure: 31%)")
        assert 0 < step < 100 and table[4] == 0


class TestMaskHead:
    def test_zero_weights(self):
        out = N.mask_head(np.random.default_rng(0).random((2, 5, 4, 4)), T.ConvParams(np.zeros((1, 5, 1, 1))))
        np.testing.assert_array_equal(out, 0.5)

    @pytest.mark.parametrize("c", [1, 3, 16])
    def test_shape(self, c):
        out = N.mask_head(np.ones((2, c, 4, 4)), T.ConvParams(np.ones((1, c, 1, 1))))
        assert out.shape == (2, 1, 4, 4)

    def test_threshold_gives_binary(self):
        out = N.mask_head(np.random.default_rng(0).standard_normal((1, 3, 4, 4)),
                          T.ConvParams(np.ones((1, 3, 1, 1))))
        assert set(np.unique(out >= 0.5)) <= {False, True}


class TestCheckpoint:
    def test_layout(self):
        model = N.build_graph(GraphConfig(depth=2, base_channels=2), 0)
        raw = checkpoint.dumps(model)
        assert raw.startswith(b"NSEG1\n2 2 3 1 1\n")
        pos = len(b"NSEG1\n2 2 3 1 1\n")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + nlen].decode()
        assert name == "x0_0/unit0/conv"
        pos += 2 + nlen
        assert raw[pos] == 4
        dims = struct.unpack_from("<4I", raw, pos + 1)
        assert dims == (2, 1, 3, 3)
        values = np.frombuffer(raw, "<f4", count=18, offset=pos + 17)
        np.testing.assert_array_equal(values, model.params[name].ravel())

    def test_round_trip(self, tmp_path):
        model = N.build_graph(GraphConfig(depth=3, base_channels=4), 9)
        path = tmp_path / "m.nseg"
        checkpoint.save(model, path)
        loaded = checkpoint.load(path)
        assert loaded.prune_level == 2 and loaded.config == model.config
        for src, dst in ((model.params, loaded.params), (model.buffers, loaded.buffers)):
            assert src.keys() == dst.keys()
            for k in src:
                assert src[k].tobytes() == dst[k].tobytes()
        assert checkpoint.dumps(loaded) == path.read_bytes()

    def test_pruned_round_trip(self):
        model = N.prune(N.build_graph(GraphConfig(depth=4, base_channels=2), 0), 2)
        loaded = checkpoint.loads(checkpoint.dumps(model))
        assert loaded.prune_level == 2
        assert loaded.n_parameters() == N.param_count(model.config, 2)

    def test_bad_magic(self):
        with pytest.raises(LoadError):
            checkpoint.loads(b"NOPE\n")

    def test_truncated(self):
        raw = checkpoint.dumps(N.build_graph(GraphConfig(depth=2, base_channels=2), 0))
        with pytest.raises(LoadError):
            checkpoint.loads(raw[:-10])
