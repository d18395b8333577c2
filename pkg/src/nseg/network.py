"""Nested U-Net (UNet++) graph with deep supervision and pruning.

Node ``X[i, j]`` sits at down-sampling level ``i`` and position ``j`` along
that level's skip pathway. A node with ``j == 0`` reads the max-pooled output
of ``X[i-1, 0]``; a node with ``j > 0`` reads every earlier node on its level
plus the upsampled output of ``X[i+1, j-1]``, concatenated in that order.
Each node is two units of (3x3 conv without bias, batch norm, ReLU).

Output heads are 1x1 convolutions + sigmoid attached to ``X[0, j]`` for
``j = 1 .. depth-1``. Pruning to level ``d`` keeps the nodes with
``i + j <= d`` and reads the mask from head ``d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from graphlib import TopologicalSorter
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError

UNITS_PER_NODE = 2


class NodeId(NamedTuple):
    i: int
    j: int

    def __str__(self):
        return f"X^{{{self.i},{self.j}}}"

    @property
    def key(self) -> str:
        return f"x{self.i}_{self.j}"


class Source(NamedTuple):
    """One input of a node: the external batch, a node, or a resampled node."""

    kind: str  # "input" | "node" | "down" | "up"
    node: NodeId | None = None

    def __str__(self):
        if self.kind == "input":
            return "external input"
        if self.kind == "node":
            return str(self.node)
        wrap = "Downsample" if self.kind == "down" else "Upsample"
        return f"{wrap}({self.node})"


@dataclass(frozen=True)
class GraphConfig:
    depth: int = 4
    base_channels: int = 8
    kernel: int = 3
    input_channels: int = 1
    deep_supervision: bool = True
    convs_per_node: int = UNITS_PER_NODE

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel}")
        if self.convs_per_node != UNITS_PER_NODE:
            raise ConfigurationError(f"convs_per_node is fixed at {UNITS_PER_NODE}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def nodes(self, prune_level: int | None = None) -> list[NodeId]:
        """Valid nodes in canonical order (i ascending, then j ascending)."""
        d = self.depth - 1 if prune_level is None else prune_level
        return [NodeId(i, j) for i in range(self.depth) for j in range(self.depth - i) if i + j <= d]

    def block_in_channels(self, node: NodeId) -> int:
        i, j = node
        if j == 0:
            return self.input_channels if i == 0 else self.channels(i - 1)
        return j * self.channels(i) + self.channels(i + 1)

    def check_prune_level(self, d: int) -> int:
        if not 1 <= d <= self.depth - 1:
            raise ContractError(f"prune level must lie in 1..{self.depth - 1}, got {d}")
        return d


def node_inputs(node: NodeId, config: GraphConfig) -> list[Source]:
    """Ordered sources feeding ``node``."""
    i, j = node
    if i < 0 or j < 0 or i + j > config.depth - 1:
        raise ContractError(f"{node} is not a node of a depth-{config.depth} graph")
    if j == 0:
        return [Source("input")] if i == 0 else [Source("down", NodeId(i - 1, 0))]
    return [Source("node", NodeId(i, k)) for k in range(j)] + [Source("up", NodeId(i + 1, j - 1))]


def evaluation_order(config: GraphConfig, prune_level: int | None = None) -> list[NodeId]:
    """Topological order of the (optionally pruned) node set."""
    graph = {n: [s.node for s in node_inputs(n, config) if s.node is not None]
             for n in config.nodes(prune_level)}
    ts = TopologicalSorter(graph)
    # static_order is deterministic for a fixed insertion order
    return list(ts.static_order())


# -- parameter naming ---------------------------------------------------------

def unit_names(node: NodeId, unit: int) -> dict[str, str]:
    prefix = f"{node.key}/unit{unit}"
    return {
        "conv": f"{prefix}/conv",
        "gamma": f"{prefix}/bn/gamma",
        "beta": f"{prefix}/bn/beta",
        "running_mean": f"{prefix}/bn/running_mean",
        "running_var": f"{prefix}/bn/running_var",
    }


def head_name(j: int) -> str:
    return f"head{j}/conv"


def parameter_names(config: GraphConfig, prune_level: int | None = None,
                    include_buffers: bool = False) -> list[str]:
    """Canonical ordering: nodes (i, j ascending), units, conv before bn; then heads."""
    d = config.depth - 1 if prune_level is None else prune_level
    keys = ["conv", "gamma", "beta"] + (["running_mean", "running_var"] if include_buffers else [])
    names = []
    for node in config.nodes(d):
        for u in range(UNITS_PER_NODE):
            un = unit_names(node, u)
            names.extend(un[k] for k in keys)
    names.extend(head_name(j) for j in range(1, d + 1))
    return names


def param_count(config: GraphConfig, prune_level: int | None = None) -> int:
    """Closed-form learned-parameter budget of the sub-network at ``prune_level``.

    Sums ``c_in * k**2 * c_out`` per convolution and ``2 * c_out`` per batch
    norm over nodes with ``i + j <= d``, plus one ``C0 * 1 * 1`` head for each
    ``j = 1 .. d``.
    """
    d = config.depth - 1 if prune_level is None else config.check_prune_level(prune_level)
    k2 = config.kernel ** 2
    total = 0
    for node in config.nodes(d):
        c_out = config.channels(node.i)
        c_in = config.block_in_channels(node)
        for _ in range(UNITS_PER_NODE):
            total += c_in * k2 * c_out + 2 * c_out
            c_in = c_out
    return total + d * config.channels(0)


def reduction_table(config: GraphConfig) -> list[tuple[int, int, float]]:
    """``(d, count, percent_reduction_vs_full)`` for every prune level."""
    full = param_count(config)
    return [(d, c, 100.0 * (full - c) / full)
            for d in range(1, config.depth) for c in [param_count(config, d)]]


# -- the model ----------------------------------------------------------------------

@dataclass
class NestedUNet:
    """Weights of a (possibly pruned) nested U-Net.

    ``params`` holds learned arrays, ``buffers`` the batch-norm running
    statistics. Both are plain dicts keyed by canonical names such as
    ``"x0_1/unit0/conv"``; a pruned model only stores its active entries.
    """

    config: GraphConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    prune_level: int = field(default=-1)

    def __post_init__(self):
        if self.prune_level == -1:
            self.prune_level = self.config.depth - 1
        self.config.check_prune_level(self.prune_level)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def active_nodes(self) -> list[NodeId]:
        return self.config.nodes(self.prune_level)

    @property
    def active_heads(self) -> list[int]:
        if self.config.deep_supervision:
            return list(range(1, self.prune_level + 1))
        return [self.prune_level]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def with_state(self, params=None, buffers=None) -> "NestedUNet":
        return replace(self, params=dict(self.params if params is None else params),
                       buffers=dict(self.buffers if buffers is None else buffers))

    def astype(self, dtype) -> "NestedUNet":
        return replace(self,
                       params={k: v.astype(dtype) for k, v in self.params.items()},
                       buffers={k: v.astype(dtype) for k, v in self.buffers.items()})

    def copy(self) -> "NestedUNet":
        return self.astype(self.dtype)

    def conv(self, name: str) -> T.ConvParams:
        return T.ConvParams(self.params[name])

    def bn(self, node: NodeId, unit: int) -> T.BatchNormParams:
        un = unit_names(node, unit)
        return T.BatchNormParams(self.params[un["gamma"]], self.params[un["beta"]],
                                 self.buffers[un["running_mean"]], self.buffers[un["running_var"]])


def build_graph(config: GraphConfig, seed: int = 0, dtype=np.float32) -> NestedUNet:
    """Instantiate every node (He-uniform convs, gamma=1, beta=0) and zeroed heads.

    Conv arrays are drawn in canonical parameter order from one seeded generator,
    so a given ``(config, seed)`` always yields the same bits.
    """
    rng = np.random.default_rng(seed)
    k = config.kernel
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def he_uniform(c_out, c_in, ksize):
        bound = np.sqrt(6.0 / (c_in * ksize * ksize))
        return rng.uniform(-bound, bound, size=(c_out, c_in, ksize, ksize)).astype(dtype)

    for node in config.nodes():
        c_in = config.block_in_channels(node)
        c_out = config.channels(node.i)
        for u in range(UNITS_PER_NODE):
            un = unit_names(node, u)
            params[un["conv"]] = he_uniform(c_out, c_in, k)
            params[un["gamma"]] = np.ones(c_out, dtype)
            params[un["beta"]] = np.zeros(c_out, dtype)
            buffers[un["running_mean"]] = np.zeros(c_out, dtype)
            buffers[un["running_var"]] = np.ones(c_out, dtype)
            c_in = c_out
    for j in range(1, config.depth):
        # zero heads start every map at exactly 0.5; a bias-free head on
        # non-negative features otherwise needs many epochs to shed its offset
        params[head_name(j)] = np.zeros((1, config.channels(0), 1, 1), dtype)
    return NestedUNet(config, params, buffers)


def prune(model: NestedUNet, d: int) -> NestedUNet:
    """Sub-network reading its mask from head ``d``; retained arrays are shared, not copied."""
    model.config.check_prune_level(d)
    if d > model.prune_level:
        raise ContractError(f"cannot widen a level-{model.prune_level} model to level {d}")
    keep_p = set(parameter_names(model.config, d))
    keep_b = set(parameter_names(model.config, d, include_buffers=True)) - keep_p
    return NestedUNet(model.config,
                      {k: v for k, v in model.params.items() if k in keep_p},
                      {k: v for k, v in model.buffers.items() if k in keep_b},
                      prune_level=d)


def mask_head(features: np.ndarray, head_params: T.ConvParams) -> np.ndarray:
    """1x1 convolution to a single channel followed by sigmoid."""
    if head_params.k != 1 or head_params.c_out != 1:
        raise ConfigurationError("mask head must be a 1x1 convolution with one output channel")
    return T.sigmoid(T.conv2d_forward(features, head_params))


# -- forward / backward -------------------------------------------------------------

@dataclass
class ForwardPass:
    """Result of :func:`forward`: one probability map per active head plus the tape."""

    outputs: list[np.ndarray]
    heads: list[int]
    buffers: dict[str, np.ndarray]
    mode: str
    _tape: dict = field(repr=False, default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.outputs[-1]


def forward(model: NestedUNet, batch: np.ndarray, mode: str = "train") -> ForwardPass:
    """Evaluate active nodes in dependency order and every active head.

    In ``"train"`` mode batch statistics are used and the returned
    ``buffers`` hold the updated running statistics; ``model`` itself is
    never modified.
    """
    cfg = model.config
    T.check_tensor(batch, "batch")
    if batch.shape[1] != cfg.input_channels:
        raise ContractError(f"model expects {cfg.input_channels} input channels, got {batch.shape[1]}")
    factor = 2 ** (cfg.depth - 1)
    if batch.shape[2] % factor or batch.shape[3] % factor:
        raise ContractError(f"input {batch.shape[2]}x{batch.shape[3]} is not divisible by {factor}")
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown mode {mode!r}")
    batch = batch.astype(model.dtype, copy=False)

    feats: dict[NodeId, np.ndarray] = {}
    node_tape: dict[NodeId, dict] = {}
    buffers = dict(model.buffers)
    for node in evaluation_order(cfg, model.prune_level):
        parts, resample = [], []
        for src in node_inputs(node, cfg):
            if src.kind == "input":
                parts.append(batch)
                resample.append(None)
            elif src.kind == "node":
                parts.append(feats[src.node])
                resample.append(None)
            elif src.kind == "down":
                pooled, arg = T.maxpool2x2(feats[src.node])
                parts.append(pooled)
                resample.append(arg)
            else:
                parts.append(T.upsample2x(feats[src.node]))
                resample.append(None)
        z = T.concat_channels(parts)
        units = []
        for u in range(UNITS_PER_NODE):
            un = unit_names(node, u)
            conv = model.conv(un["conv"])
            pre = T.conv2d_forward(z, conv)
            bn = T.batchnorm_apply(pre, model.bn(node, u), mode)
            buffers[un["running_mean"]] = bn.params.running_mean
            buffers[un["running_var"]] = bn.params.running_var
            units.append((z, bn.cache, bn.output))
            z = T.relu(bn.output)
        feats[node] = z
        node_tape[node] = {"channels": [p.shape[1] for p in parts], "resample": resample, "units": units}

    outputs, heads = [], model.active_heads
    for j in heads:
        outputs.append(mask_head(feats[NodeId(0, j)], model.conv(head_name(j))))
    tape = {"nodes": node_tape, "feats": feats}
    return ForwardPass(outputs, heads, buffers, mode, tape)


def backward(model: NestedUNet, fp: ForwardPass, head_grads) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every reachable parameter.

    ``head_grads`` holds d(loss)/d(probability map) for each output of
    ``fp``, in the same order. Parameters outside the active sub-network, and
    heads that were not evaluated, get no entry.
    """
    cfg = model.config
    head_grads = list(head_grads)
    if len(head_grads) != len(fp.outputs):
        raise ContractError(f"expected {len(fp.outputs)} head gradients, got {len(head_grads)}")
    feats = fp._tape["feats"]
    node_tape = fp._tape["nodes"]
    grads: dict[str, np.ndarray] = {}
    dfeat: dict[NodeId, np.ndarray] = {}

    def accumulate(node, g):
        if node in dfeat:
            dfeat[node] = dfeat[node] + g
        else:
            dfeat[node] = g

    for j, out, g in zip(fp.heads, fp.outputs, head_grads):
        if g.shape != out.shape:
            raise ContractError(f"head {j} gradient shape {g.shape} != output shape {out.shape}")
        node = NodeId(0, j)
        conv = model.conv(head_name(j))
        dlogit = T.sigmoid_backward(out, g)
        dx, dw = T.conv2d_backward(feats[node], conv, dlogit)
        grads[head_name(j)] = dw
        accumulate(node, dx)

    for node in reversed(evaluation_order(cfg, model.prune_level)):
        tape = node_tape[node]
        dz = dfeat.pop(node, None)
        if dz is None:
            dz = np.zeros_like(feats[node])
        for u in reversed(range(UNITS_PER_NODE)):
            un = unit_names(node, u)
            z_in, bn_cache, bn_out = tape["units"][u]
            dz = T.relu_backward(bn_out, dz)
            dpre, dgamma, dbeta = T.batchnorm_backward(bn_cache, dz)
            dz, dw = T.conv2d_backward(z_in, model.conv(un["conv"]), dpre)
            grads[un["conv"]] = dw
            grads[un["gamma"]] = dgamma
            grads[un["beta"]] = dbeta
        pieces = T.concat_backward(tape["channels"], dz)
        for src, arg, g in zip(node_inputs(node, cfg), tape["resample"], pieces):
            if src.kind == "node":
                accumulate(src.node, g)
            elif src.kind == "down":
                accumulate(src.node, T.maxpool2x2_backward(arg, g))
            elif src.kind == "up":
                accumulate(src.node, T.upsample2x_backward(g))
    return grads


def predict(model: NestedUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Final-head probability maps in inference mode, computed in chunks."""
    out = [forward(model, images[s:s + batch_size], "infer").final
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)
