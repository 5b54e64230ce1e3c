"""Cells, the weight-sharing supernetwork and exact parameter counting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from .genotype import CELL_TYPES, EDGES, cell_edges, per_edge_candidates, validate_genotype
from .ops import (
    NORMAL_OPS,
    REDUCTION_OPS,
    BatchNorm,
    Conv,
    FactorizedReduce,
    Module,
    ReLUConvBN,
    he_normal,
    make_op,
    op_param_count,
)


@dataclass(frozen=True)
class CellSpec:
    num_intermediate_nodes: int = 4
    num_input_nodes: int = 2
    multiplier: int = 4

    @property
    def edges(self):
        return tuple(cell_edges(self.num_intermediate_nodes))


@dataclass(frozen=True)
class NetworkConfig:
    layers: int
    channels: int
    in_channels: int = 3
    num_classes: int = 10
    stem_multiplier: int = 3
    cell: CellSpec = field(default_factory=CellSpec)

    def __post_init__(self):
        if self.layers < 3:
            raise ValueError(f"need at least 3 layers to place two reduction cells, got {self.layers}")
        if self.channels < 2:
            raise ValueError(f"need at least 2 channels, got {self.channels}")
        if self.cell.multiplier > self.cell.num_intermediate_nodes:
            raise ValueError("multiplier cannot exceed the number of intermediate nodes")

    def reduction_layers(self):
        return (self.layers // 3, 2 * self.layers // 3)

    def layout(self):
        """Per-cell (cell_type, reduction_prev, C_pp, C_p, C) in depth order."""
        c_curr = self.stem_multiplier * self.channels
        c_pp, c_p, c_curr = c_curr, c_curr, self.channels
        out, reduction_prev = [], False
        for i in range(self.layers):
            reduction = i in self.reduction_layers()
            if reduction:
                c_curr *= 2
            out.append(("reduction" if reduction else "normal", reduction_prev, c_pp, c_p, c_curr))
            reduction_prev = reduction
            c_pp, c_p = c_p, self.cell.multiplier * c_curr
        return out

    def final_channels(self):
        _, _, _, _, c = self.layout()[-1]
        return self.cell.multiplier * c


class Cell(Module):
    def __init__(self, rng, cell_type, reduction_prev, c_pp, c_p, c, candidates, spec):
        super().__init__()
        self.cell_type = cell_type
        self.spec = spec
        self.edges = spec.edges
        if reduction_prev:
            self.pre0 = self.add_child("pre0", FactorizedReduce(rng, c_pp, c))
        else:
            self.pre0 = self.add_child("pre0", ReLUConvBN(rng, c_pp, c, 1))
        self.pre1 = self.add_child("pre1", ReLUConvBN(rng, c_p, c, 1))
        reduction = cell_type == "reduction"
        self.candidates = [tuple(c_) for c_ in candidates]
        self.edge_ops = []
        for (i, j), names in zip(self.edges, self.candidates):
            stride = 2 if reduction and i < 2 else 1
            ops = {}
            for name in names:
                ops[name] = make_op(name, c, stride, rng)
            edge_mod = Module()
            for name, op in ops.items():
                edge_mod.add_child(name, op)
            self.add_child(f"edge_{i}_{j}", edge_mod)
            self.edge_ops.append(ops)

    def _states(self, s0, s1, mode):
        return [self.pre0(s0, mode), self.pre1(s1, mode)]

    def _finish(self, states):
        return T.concat(states[-self.spec.multiplier:], axis=1)

    def _node_sum(self, terms, like):
        if not terms:
            return T.zeros(like)
        return terms[0] if len(terms) == 1 else T.add(terms)

    def _out_shape(self, states):
        n, c, h, w = states[1].shape
        if self.cell_type == "reduction":
            return (n, c, -(-h // 2), -(-w // 2))
        return (n, c, h, w)

    def mixed_forward(self, s0, s1, probs, mode="train"):
        """Each edge outputs sum_o p_o * o(x); zero-probability ops are skipped."""
        states = self._states(s0, s1, mode)
        shape = self._out_shape(states)
        k = 0
        for j in range(2, 2 + self.spec.num_intermediate_nodes):
            terms = []
            for i in range(j):
                p = np.asarray(probs[k])
                ops = self.edge_ops[k]
                if p.shape != (len(ops),):
                    raise ValueError(
                        f"edge {self.edges[k]}: {p.shape[0] if p.ndim else 0} probabilities for {len(ops)} ops"
                    )
                for w, (name, op) in zip(p, ops.items()):
                    if w == 0 or name == "none":
                        continue
                    terms.append(T.scale(op(states[i], mode), float(w)))
                k += 1
            states.append(self._node_sum(terms, shape))
        return self._finish(states)

    def discrete_forward(self, s0, s1, choices, mode="batch"):
        """``choices`` maps edge -> op name; missing or ``none`` edges contribute nothing."""
        states = self._states(s0, s1, mode)
        shape = self._out_shape(states)
        k = 0
        for j in range(2, 2 + self.spec.num_intermediate_nodes):
            terms = []
            for i in range(j):
                name = choices.get((i, j), "none")
                if name != "none":
                    terms.append(self.edge_ops[k][name](states[i], mode))
                k += 1
            states.append(self._node_sum(terms, shape))
        return self._finish(states)


class SuperNetwork(Module):
    def __init__(self, config, candidates, seed):
        super().__init__()
        self.config = config
        self.candidates = {ct: [tuple(c) for c in candidates[ct]] for ct in CELL_TYPES}
        self.seed = seed
        rng = np.random.default_rng(seed)
        spec = config.cell
        c_stem = config.stem_multiplier * config.channels
        self.stem_conv = self.add_child("stem_conv", Conv(rng, config.in_channels, c_stem, 3, padding=1))
        self.stem_bn = self.add_child("stem_bn", BatchNorm(c_stem))
        self.cells = []
        for idx, (ct, red_prev, c_pp, c_p, c) in enumerate(config.layout()):
            cell = Cell(rng, ct, red_prev, c_pp, c_p, c, self.candidates[ct], spec)
            self.cells.append(self.add_child(f"cell{idx}", cell))
        head = self.add_child("classifier", Module())
        c_final = config.final_channels()
        self.fc_w = head.add_param("w", he_normal(rng, (config.num_classes, c_final)))
        self.fc_b = head.add_param("b", np.zeros(config.num_classes))

    @property
    def edges(self):
        return self.config.cell.edges

    def _stem(self, x, mode):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        s = self.stem_bn(self.stem_conv(x), mode)
        return s, s

    def _head(self, s1):
        return T.linear(T.global_avg_pool(s1), self.fc_w, self.fc_b)

    def mixed_forward(self, x, probs, mode="train"):
        """``probs[cell_type][e]`` is the probability vector for edge e."""
        s0, s1 = self._stem(x, mode)
        for cell in self.cells:
            s0, s1 = s1, cell.mixed_forward(s0, s1, probs[cell.cell_type], mode)
        return self._head(s1)

    def discrete_forward(self, x, genotype, mode="batch"):
        validate_genotype(genotype, self.candidates, self.edges)
        s0, s1 = self._stem(x, mode)
        for cell in self.cells:
            s0, s1 = s1, cell.discrete_forward(s0, s1, genotype.cell(cell.cell_type), mode)
        return self._head(s1)

    def op_parameters(self, genotype):
        """Trainable tensors used by the subnetwork ``genotype`` (edges + backbone)."""
        out = [p for name, p in self.named_parameters() if ".edge_" not in name]
        for cell in self.cells:
            choices = genotype.cell(cell.cell_type)
            for k, edge in enumerate(cell.edges):
                name = choices.get(edge, "none")
                if name != "none":
                    out.extend(cell.edge_ops[k][name].parameters())
        return out

    def state_arrays(self):
        """Flat name -> array map of all weights and running statistics."""
        out = {f"param:{n}": p.data for n, p in self.named_parameters()}
        for n, s in self.named_stats():
            out[f"mean:{n}"] = s.mean
            out[f"var:{n}"] = s.var
        return out

    def load_state_arrays(self, arrays):
        for n, p in self.named_parameters():
            p.data[...] = arrays[f"param:{n}"]
        for n, s in self.named_stats():
            s.mean[...] = arrays[f"mean:{n}"]
            s.var[...] = arrays[f"var:{n}"]


def full_candidates(normal_ops=NORMAL_OPS, reduction_ops=REDUCTION_OPS, edges=EDGES):
    return {
        "normal": per_edge_candidates(list(normal_ops), edges),
        "reduction": per_edge_candidates(list(reduction_ops), edges),
    }


def build_supernetwork(cell_spec, layers, channels, normal_ops, reduction_ops, seed, in_channels=3, num_classes=10):
    config = NetworkConfig(layers, channels, in_channels, num_classes, cell=cell_spec)
    edges = cell_spec.edges
    candidates = {
        "normal": per_edge_candidates(list(normal_ops), edges),
        "reduction": per_edge_candidates(list(reduction_ops), edges),
    }
    for ct in CELL_TYPES:
        if len(candidates[ct]) != len(edges) or any(len(c) == 0 for c in candidates[ct]):
            raise ValueError(f"{ct} candidates must list a non-empty op set for each of {len(edges)} edges")
    return SuperNetwork(config, candidates, seed)


def backbone_parameter_count(config):
    """Scalars every subnetwork uses: stem, per-cell input preprocessing, classifier."""
    c_stem = config.stem_multiplier * config.channels
    total = 9 * config.in_channels * c_stem + 2 * c_stem
    for _, red_prev, c_pp, c_p, c in config.layout():
        if red_prev:
            total += 2 * (c_pp * (c // 2)) + 2 * c
        else:
            total += c_pp * c + 2 * c
        total += c_p * c + 2 * c
    total += config.final_channels() * config.num_classes + config.num_classes
    return total


def count_parameters(genotype, config):
    """Exact number of trainable scalars of the subnetwork defined by ``genotype``."""
    total = backbone_parameter_count(config)
    for ct, _, _, _, c in config.layout():
        for op in genotype.cell(ct).values():
            total += op_param_count(op, c)
    return total


def supernetwork_parameter_count(config, candidates):
    total = backbone_parameter_count(config)
    for ct, _, _, _, c in config.layout():
        for names in candidates[ct]:
            total += sum(op_param_count(op, c) for op in names)
    return total
