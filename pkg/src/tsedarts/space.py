"""Cell topologies, candidate operation sets, architecture encodings.

A cell is a DAG over nodes 0..n-1 (node 0 is the cell input, node n-1
the output) with edges (i, j), i < j.  Each edge carries one softmax
vector over the operation set; argmax per edge turns the continuous
encoding into a discrete genotype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ZERO = "Zero"
SKIP = "Skip"
LINEAR = "ParamLinear"
CONV3X3 = "ParamConv3x3"
AVGPOOL = "AvgPool"

PARAMETRIC_OPS = {LINEAR, CONV3X3}
KNOWN_OPS = {ZERO, SKIP, LINEAR, CONV3X3, AVGPOOL}


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class OperationKind:
    """One candidate operation; `tag` selects the kernel."""

    tag: str

    def __post_init__(self):
        if self.tag not in KNOWN_OPS:
            raise SpaceError(f"unknown operation tag {self.tag!r}")

    @property
    def parametric(self) -> bool:
        return self.tag in PARAMETRIC_OPS


@dataclass(frozen=True)
class CellTopology:
    """DAG over `nodes` nodes; acyclic by the i < j edge convention."""

    nodes: int
    edges: tuple  # tuple of (i, j) with i < j
    preset: str = "custom"

    def __post_init__(self):
        if self.nodes < 2:
            raise SpaceError("a cell needs at least an input and an output node")
        for (i, j) in self.edges:
            if not (0 <= i < j < self.nodes):
                raise SpaceError(f"edge ({i}, {j}) violates 0 <= i < j < {self.nodes}")
        if len(set(self.edges)) != len(self.edges):
            raise SpaceError("duplicate edge")
        if not self._reachable(set()):
            raise SpaceError("output node unreachable from input node")

    def _reachable(self, dropped: set) -> bool:
        reach = {0}
        for (i, j) in sorted(self.edges):
            if (i, j) not in dropped and i in reach:
                reach.add(j)
        return self.nodes - 1 in reach

    @property
    def input_node(self) -> int:
        return 0

    @property
    def output_node(self) -> int:
        return self.nodes - 1


@dataclass
class ArchEncoding:
    """One real vector per edge, one entry per candidate operation."""

    table: np.ndarray  # (n_edges, n_ops)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise SpaceError("encoding table must be (n_edges, n_ops)")
        if not np.all(np.isfinite(self.table)):
            raise SpaceError("non-finite architecture encoding")

    @classmethod
    def uniform(cls, topology: CellTopology, ops: Sequence[OperationKind]) -> "ArchEncoding":
        return cls(np.zeros((len(topology.edges), len(ops))))


@dataclass(frozen=True)
class Genotype:
    """One chosen operation per edge."""

    edges: tuple        # (i, j) pairs, aligned with `ops`
    ops: tuple          # OperationKind per edge
    preset: str = "custom"

    def to_json(self) -> str:
        doc = {
            "edges": [
                {"from": i, "to": j, "op": op.tag}
                for (i, j), op in zip(self.edges, self.ops)
            ],
            "topology": self.preset,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        doc = json.loads(text)
        edges = tuple((e["from"], e["to"]) for e in doc["edges"])
        ops = tuple(OperationKind(e["op"]) for e in doc["edges"])
        return cls(edges, ops, doc.get("topology", "custom"))


def mixture_weights(alpha_edge: np.ndarray) -> np.ndarray:
    """Softmax over one edge's operation logits."""
    a = np.asarray(alpha_edge, dtype=np.float64)
    if a.size == 0:
        raise SpaceError("empty operation set")
    if not np.all(np.isfinite(a)):
        raise SpaceError("non-finite alpha")
    e = np.exp(a - a.max())
    return e / e.sum()


def discretize(encoding: ArchEncoding, topology: CellTopology,
               ops: Sequence[OperationKind], rule: str = "argmax-per-edge",
               top_k: int = 2) -> Genotype:
    """argmax per edge (ties -> lowest op index); optional top-k edge
    retention per intermediate node, ranked by max non-Zero weight."""
    if encoding.table.shape != (len(topology.edges), len(ops)):
        raise SpaceError("encoding does not cover the topology")
    chosen = [ops[int(np.argmax(row))] for row in encoding.table]
    if rule == "argmax-per-edge":
        return Genotype(tuple(topology.edges), tuple(chosen), topology.preset)
    if rule != "top-k-edges":
        raise SpaceError(f"unknown discretization rule {rule!r}")

    # Rank incoming edges per node by their best non-Zero mixture weight;
    # edges outside the top k are forced to Zero (Zero must be in O).
    zero = next((o for o in ops if o.tag == ZERO), None)
    if zero is None:
        raise SpaceError("top-k-edges rule needs a Zero operation to drop edges")
    scores = {}
    for idx, (i, j) in enumerate(topology.edges):
        w = mixture_weights(encoding.table[idx])
        nz = [w[k] for k, o in enumerate(ops) if o.tag != ZERO]
        scores[idx] = max(nz) if nz else 0.0
    keep = set()
    for node in range(1, topology.nodes):
        incoming = [idx for idx, (i, j) in enumerate(topology.edges) if j == node]
        incoming.sort(key=lambda idx: (-scores[idx], idx))
        keep.update(incoming[:top_k])
    final = [op if idx in keep else zero for idx, op in enumerate(chosen)]
    return Genotype(tuple(topology.edges), tuple(final), topology.preset)


def cell_depth(genotype: Genotype, topology: CellTopology) -> int:
    """Longest input->output path (edge count) after deleting Zero edges."""
    dist = {topology.input_node: 0}
    for (i, j), op in sorted(zip(genotype.edges, genotype.ops)):
        if op.tag == ZERO or i not in dist:
            continue
        dist[j] = max(dist.get(j, 0), dist[i] + 1)
    return dist.get(topology.output_node, 0)


def skip_count(genotype: Genotype) -> int:
    return sum(1 for op in genotype.ops if op.tag == SKIP)


def _full_dag(nodes: int) -> tuple:
    return tuple((i, j) for i in range(nodes) for j in range(i + 1, nodes))


def make_space(preset: str, features: str = "vector",
               custom_topology: CellTopology | None = None,
               custom_ops: Sequence[OperationKind] | None = None):
    """Return (CellTopology, operation tuple) for a named preset.

    `features` picks the parametric kernel: dense for vector data,
    3x3 convolution for image data.
    """
    if features not in ("vector", "image"):
        raise SpaceError(f"unknown feature kind {features!r}")
    parametric = LINEAR if features == "vector" else CONV3X3
    if preset == "nb201-like":
        topo = CellTopology(4, _full_dag(4), preset)
        ops = (OperationKind(ZERO), OperationKind(SKIP),
               OperationKind(parametric), OperationKind(AVGPOOL))
        return topo, ops
    if preset == "s2-like":
        topo = CellTopology(4, _full_dag(4), preset)
        ops = (OperationKind(SKIP), OperationKind(parametric))
        return topo, ops
    if preset == "custom":
        if custom_topology is None or not custom_ops:
            raise SpaceError("custom preset needs a topology and a nonempty operation set")
        return custom_topology, tuple(custom_ops)
    raise SpaceError(f"unknown preset {preset!r}")
