"""Discrete architectures, architecture tables and the operations on them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CELL_TYPES = ("normal", "reduction")


class InvalidGenotypeError(ValueError):
    pass


class GenotypeFormatError(ValueError):
    pass


def cell_edges(steps=4):
    """Edges (i, j) with j an intermediate node id and i any earlier node.

    Nodes 0 and 1 are the two cell inputs; intermediate nodes are 2..steps+1.
    """
    return [(i, j) for j in range(2, steps + 2) for i in range(j)]


EDGES = tuple(cell_edges(4))


@dataclass
class Genotype:
    """Chosen operation name per edge, one map per cell type.

    A missing edge is a pruned edge and behaves like ``none``.
    """

    normal: dict = field(default_factory=dict)
    reduction: dict = field(default_factory=dict)

    def cell(self, cell_type):
        return self.normal if cell_type == "normal" else self.reduction

    def op(self, cell_type, edge):
        return self.cell(cell_type).get(edge, "none")

    def pruned(self):
        return Genotype(
            {e: o for e, o in self.normal.items() if o != "none"},
            {e: o for e, o in self.reduction.items() if o != "none"},
        )

    def to_dict(self):
        return {
            ct: [[i, j, op] for (i, j), op in sorted(self.cell(ct).items()) if op != "none"]
            for ct in CELL_TYPES
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d):
        cells = {}
        for ct in CELL_TYPES:
            entries = d.get(ct, [])
            if not isinstance(entries, list):
                raise GenotypeFormatError(f"'{ct}' must be a list of [i, j, op] triples")
            cell = {}
            for entry in entries:
                if (
                    not isinstance(entry, list)
                    or len(entry) != 3
                    or not all(isinstance(v, int) for v in entry[:2])
                    or not isinstance(entry[2], str)
                ):
                    raise GenotypeFormatError(f"bad {ct} entry {entry!r}; expected [i, j, op_name]")
                cell[(entry[0], entry[1])] = entry[2]
            cells[ct] = cell
        unknown = set(d) - set(CELL_TYPES)
        if unknown:
            raise GenotypeFormatError(f"unknown genotype keys {sorted(unknown)}")
        return cls(cells["normal"], cells["reduction"])

    @classmethod
    def from_json(cls, text):
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            offset = len(text[: e.pos].encode("utf-8"))
            raise GenotypeFormatError(f"invalid JSON at byte offset {offset}: {e.msg}") from e
        if not isinstance(d, dict):
            raise GenotypeFormatError("genotype JSON must be an object")
        return cls.from_dict(d)


@dataclass
class AlphaTable:
    """Architecture parameters: one real vector per edge per cell type.

    ``ops[cell_type][e]`` lists the candidate names on edge ``EDGES[e]`` and
    ``values[cell_type][e]`` holds the matching logits.
    """

    ops: dict
    values: dict
    edges: tuple = EDGES

    @classmethod
    def uniform(cls, candidates, edges=EDGES):
        ops = {ct: [tuple(c) for c in candidates[ct]] for ct in CELL_TYPES}
        values = {ct: [np.zeros(len(c)) for c in ops[ct]] for ct in CELL_TYPES}
        return cls(ops, values, tuple(edges))

    def copy(self):
        return AlphaTable(
            {ct: list(v) for ct, v in self.ops.items()},
            {ct: [a.copy() for a in v] for ct, v in self.values.items()},
            self.edges,
        )

    def check(self):
        for ct in CELL_TYPES:
            if len(self.ops[ct]) != len(self.edges) or len(self.values[ct]) != len(self.edges):
                raise ValueError(f"{ct} table does not cover {len(self.edges)} edges")
            for e, (names, a) in enumerate(zip(self.ops[ct], self.values[ct])):
                if len(names) == 0 or a.shape != (len(names),):
                    raise ValueError(f"{ct} edge {self.edges[e]}: {a.shape} logits for {len(names)} ops")
                if not np.all(np.isfinite(a)):
                    raise ValueError(f"{ct} edge {self.edges[e]}: non-finite logits")


def per_edge_candidates(ops, edges=EDGES):
    """Broadcast a single catalog to every edge, or pass per-edge lists through."""
    if ops and isinstance(ops[0], str):
        return [tuple(ops) for _ in edges]
    return [tuple(o) for o in ops]


def validate_genotype(genotype, candidates, edges=EDGES):
    """Raise InvalidGenotypeError unless every chosen op is a current candidate."""
    index = {e: k for k, e in enumerate(edges)}
    for ct in CELL_TYPES:
        for edge, op in genotype.cell(ct).items():
            if edge not in index:
                raise InvalidGenotypeError(f"{ct} edge {edge} is not an edge of this cell")
            if op == "none":
                continue
            if op not in candidates[ct][index[edge]]:
                raise InvalidGenotypeError(
                    f"{ct} edge {edge}: {op!r} is not among candidates {candidates[ct][index[edge]]}"
                )


def _argmax_lowest(a):
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(a))


def derive_genotype(alpha):
    """Per-edge argmax of alpha; edges whose argmax is ``none`` are dropped.

    No per-node in-degree cap is applied.
    """
    cells = {}
    for ct in CELL_TYPES:
        chosen = {}
        for edge, names, a in zip(alpha.edges, alpha.ops[ct], alpha.values[ct]):
            op = names[_argmax_lowest(a)]
            if op != "none":
                chosen[edge] = op
        cells[ct] = chosen
    return Genotype(cells["normal"], cells["reduction"])


def top_k_indices(a, keep):
    """Indices of the ``keep`` largest entries, lower index first on ties, in ascending order."""
    order = np.lexsort((np.arange(len(a)), -np.asarray(a)))
    return sorted(int(i) for i in order[:keep])


def shrink_opset(alpha, keep):
    """Keep the ``keep[cell_type]`` highest-alpha candidates on each edge.

    Survivors keep their relative order; the returned table is reset to
    zeros (uniform policy).
    """
    if isinstance(keep, int):
        keep = {ct: keep for ct in CELL_TYPES}
    new_ops = {}
    for ct in CELL_TYPES:
        k = keep[ct]
        if k < 1:
            raise ValueError(f"keep for {ct} cells must be >= 1, got {k}")
        cell_ops = []
        for edge, names, a in zip(alpha.edges, alpha.ops[ct], alpha.values[ct]):
            if k > len(names):
                raise ValueError(f"cannot keep {k} ops on {ct} edge {edge} with only {len(names)} candidates")
            cell_ops.append(tuple(names[i] for i in top_k_indices(a, k)))
        new_ops[ct] = cell_ops
    return AlphaTable.uniform(new_ops, alpha.edges)


def to_dot(genotype, cell_type, steps=4):
    """Graphviz source for one cell of ``genotype``."""
    lines = [
        f"digraph {cell_type}_cell {{",
        "  rankdir=LR;",
        '  node [style=filled, shape=rect, fontname="helvetica"];',
        '  "c_{k-2}" [fillcolor=darkseagreen2];',
        '  "c_{k-1}" [fillcolor=darkseagreen2];',
    ]
    names = {0: "c_{k-2}", 1: "c_{k-1}"}
    for j in range(2, steps + 2):
        names[j] = str(j - 2)
        lines.append(f'  "{j - 2}" [fillcolor=lightblue];')
    lines.append('  "c_{k}" [fillcolor=palegoldenrod];')
    for (i, j), op in sorted(genotype.cell(cell_type).items()):
        if op == "none":
            continue
        lines.append(f'  "{names[i]}" -> "{names[j]}" [label="{op}"];')
    for j in range(2, steps + 2):
        lines.append(f'  "{names[j]}" -> "c_{{k}}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
