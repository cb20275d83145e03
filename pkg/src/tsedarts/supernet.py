"""Weight-sharing supernetwork of stacked cells.

Weights w and architecture logits alpha live in disjoint parameter
groups; alpha is shared by every cell.  The mixed forward pass weights
each edge's candidate operations by the softmax of that edge's logits,
and each node averages its incoming edge contributions.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .space import (AVGPOOL, CONV3X3, LINEAR, SKIP, ZERO, ArchEncoding,
                    CellTopology, Genotype, OperationKind, make_space)


class SupernetError(ValueError):
    pass


@dataclass(frozen=True)
class SupernetConfig:
    layers: int
    width: int
    preset: str = "nb201-like"
    classes: int = 4
    in_shape: tuple = (16,)   # (d,) vectors or (c, h, w) images
    seed: int = 0
    aggregation: str = "mean"  # node aggregation: "mean" | "sum"

    def __post_init__(self):
        if self.layers < 1:
            raise SupernetError("layers must be >= 1")
        if self.width < 1:
            raise SupernetError("width must be >= 1")
        if self.classes < 2:
            raise SupernetError("classes must be >= 2")
        if len(self.in_shape) not in (1, 3):
            raise SupernetError("in_shape must be (d,) or (c, h, w)")
        if self.aggregation not in ("mean", "sum"):
            raise SupernetError("aggregation must be 'mean' or 'sum'")

    @property
    def features(self) -> str:
        return "vector" if len(self.in_shape) == 1 else "image"


def _avg_matrix(d: int) -> np.ndarray:
    """Kernel-3, same-padded neighborhood averaging as a fixed matrix."""
    a = np.zeros((d, d))
    for i in range(d):
        lo, hi = max(0, i - 1), min(d, i + 2)
        a[lo:hi, i] = 1.0 / (hi - lo)
    return a


class Supernet:
    """Stacked cells over a shared ArchEncoding.

    `params` maps weight names to leaf Vars; `alpha` is a separate
    (n_edges, n_ops) leaf.  Forward is a pure function of
    (weights, alpha, batch).
    """

    def __init__(self, config: SupernetConfig,
                 topology: CellTopology | None = None,
                 ops: tuple | None = None):
        self.config = config
        if topology is None or ops is None:
            topology, ops = make_space(config.preset, features=config.features)
        self.topology = topology
        self.ops = tuple(ops)
        self.forward_count = 0
        if config.features == "image" and any(o.tag == LINEAR for o in self.ops):
            raise SupernetError("ParamLinear operation needs vector inputs")
        if config.features == "vector" and any(o.tag == CONV3X3 for o in self.ops):
            raise SupernetError("ParamConv3x3 operation needs image inputs")

        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Var] = {}
        w = config.width
        if config.features == "vector":
            self._add_affine(rng, "stem", config.in_shape[0], w)
            self._pool = ad.const(_avg_matrix(w))
        else:
            self._add_affine(rng, "stem", 9 * config.in_shape[0], w)
        for layer in range(config.layers):
            for e_idx, (i, j) in enumerate(self.topology.edges):
                for op in self.ops:
                    if op.tag == LINEAR:
                        self._add_affine(rng, f"cell{layer}/e{i}-{j}/linear", w, w)
                    elif op.tag == CONV3X3:
                        self._add_affine(rng, f"cell{layer}/e{i}-{j}/conv", 9 * w, w)
        self._add_affine(rng, "head", w, config.classes)
        self.alpha = ad.param(
            np.zeros((len(self.topology.edges), len(self.ops))), name="alpha")

    def _add_affine(self, rng, prefix: str, fan_in: int, fan_out: int):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{prefix}/W"] = ad.param(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{prefix}/W")
        self.params[f"{prefix}/b"] = ad.param(
            rng.uniform(-bound, bound, size=(fan_out,)), name=f"{prefix}/b")

    # -- parameter bookkeeping -------------------------------------
    def weight_names(self) -> list:
        return list(self.params.keys())

    def weight_vars(self) -> list:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def snapshot(self) -> dict:
        return {k: v.value.copy() for k, v in self.params.items()}

    def restore(self, snap: dict):
        for k, v in self.params.items():
            v.value = snap[k].copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(np.ascontiguousarray(self.params[k].value).tobytes())
        return h.hexdigest()

    # -- forward passes --------------------------------------------
    def forward(self, batch: np.ndarray, alpha: Var | np.ndarray | None = None,
                params: dict | None = None) -> Var:
        """Mixed-operation forward pass; returns logits (batch, classes)."""
        alpha = self._resolve_alpha(alpha)
        params = params if params is not None else self.params
        self.forward_count += 1
        x = self._stem(batch, params)
        mix = ad.softmax_rows(alpha)
        for layer in range(self.config.layers):
            x = self._cell(x, layer, params, mix=mix)
        return self._head(x, params)

    def discrete_forward(self, batch: np.ndarray, genotype: Genotype,
                         params: dict | None = None) -> Var:
        """Forward using only the chosen operation per edge."""
        if genotype.edges != tuple(self.topology.edges):
            raise SupernetError("genotype does not match topology")
        params = params if params is not None else self.params
        self.forward_count += 1
        x = self._stem(batch, params)
        for layer in range(self.config.layers):
            x = self._cell(x, layer, params, genotype=genotype)
        return self._head(x, params)

    def loss(self, logits: Var, targets: np.ndarray) -> Var:
        return ad.cross_entropy(logits, targets)

    def _resolve_alpha(self, alpha) -> Var:
        if alpha is None:
            return self.alpha
        if isinstance(alpha, ArchEncoding):
            alpha = alpha.table
        if not isinstance(alpha, Var):
            alpha = ad.const(alpha)
        if alpha.shape != self.alpha.shape:
            raise SupernetError(
                f"alpha shape {alpha.shape} != {self.alpha.shape}")
        return alpha

    def _stem(self, batch: np.ndarray, params: dict) -> Var:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[1:] != self.config.in_shape:
            raise SupernetError(
                f"batch shape {batch.shape[1:]} != {self.config.in_shape}")
        x = ad.const(batch)
        if self.config.features == "vector":
            return ad.vtanh(x @ params["stem/W"] + params["stem/b"])
        return ad.vtanh(self._conv(x, params["stem/W"], params["stem/b"]))

    def _head(self, x: Var, params: dict) -> Var:
        if self.config.features == "image":
            x = x.mean(axis=3).mean(axis=2)  # global average pool
        return x @ params["head/W"] + params["head/b"]

    def _conv(self, x: Var, w: Var, b: Var) -> Var:
        # 3x3 same-padded conv as matmul over extracted patches.
        n, c, h, wd = x.shape
        cols = ad.im2col3(x)                                 # (n, 9c, h, w)
        flat = ad.reshape(ad.transpose(cols, (0, 2, 3, 1)), (n * h * wd, 9 * c))
        out = flat @ w + b
        return ad.transpose(ad.reshape(out, (n, h, wd, w.shape[1])), (0, 3, 1, 2))

    def _apply_op(self, tag: str, x: Var, layer: int, edge: tuple, params: dict):
        i, j = edge
        if tag == ZERO:
            return None
        if tag == SKIP:
            return x
        if tag == LINEAR:
            pre = f"cell{layer}/e{i}-{j}/linear"
            return ad.vtanh(x @ params[f"{pre}/W"] + params[f"{pre}/b"])
        if tag == CONV3X3:
            pre = f"cell{layer}/e{i}-{j}/conv"
            return ad.vtanh(self._conv(x, params[f"{pre}/W"], params[f"{pre}/b"]))
        if tag == AVGPOOL:
            if self.config.features == "vector":
                return x @ self._pool
            n, c, h, w = x.shape
            cols = ad.reshape(ad.im2col3(x), (n, c, 9, h, w))
            return cols.mean(axis=2)
        raise SupernetError(f"unknown operation tag {tag!r}")

    def _cell(self, x_in: Var, layer: int, params: dict,
              mix: Var | None = None, genotype: Genotype | None = None) -> Var:
        topo = self.topology
        feats = {topo.input_node: x_in}
        incoming: dict[int, list] = {}
        for e_idx, (i, j) in enumerate(topo.edges):
            incoming.setdefault(j, []).append((e_idx, i, j))
        for node in range(1, topo.nodes):
            terms = []
            edges_in = incoming.get(node, [])
            for e_idx, i, j in edges_in:
                src = feats[i]
                if genotype is not None:
                    out = self._apply_op(genotype.ops[e_idx].tag, src, layer,
                                         (i, j), params)
                    if out is not None:
                        terms.append(out)
                else:
                    for o_idx, op in enumerate(self.ops):
                        out = self._apply_op(op.tag, src, layer, (i, j), params)
                        if out is not None:
                            terms.append(ad.vslice(mix, (e_idx, o_idx)) * out)
            if terms:
                acc = terms[0]
                for t in terms[1:]:
                    acc = acc + t
                if self.config.aggregation == "mean" and len(edges_in) > 1:
                    acc = acc * ad.const(1.0 / len(edges_in))
                feats[node] = acc
            else:
                feats[node] = ad.const(np.zeros(x_in.shape))
        return feats[topo.output_node]


def build(config: SupernetConfig, topology=None, ops=None) -> Supernet:
    return Supernet(config, topology=topology, ops=ops)


# ------------------------------------------------------------------
# checkpoint format: flat little-endian float64 blob + JSON manifest
# ------------------------------------------------------------------

def save_checkpoint(net: Supernet, directory: str,
                    blob_name: str = "params.bin",
                    manifest_name: str = "params.json"):
    os.makedirs(directory, exist_ok=True)
    entries, chunks, offset = [], [], 0
    named = list(net.params.items()) + [("alpha", net.alpha)]
    for name, var in named:
        arr = np.ascontiguousarray(var.value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    with open(os.path.join(directory, blob_name), "wb") as f:
        f.write(b"".join(chunks))
    manifest = {"dtype": "<f8", "total": offset, "params": entries}
    with open(os.path.join(directory, manifest_name), "w") as f:
        json.dump(manifest, f, indent=2)


def load_checkpoint(net: Supernet, directory: str,
                    blob_name: str = "params.bin",
                    manifest_name: str = "params.json"):
    with open(os.path.join(directory, manifest_name)) as f:
        manifest = json.load(f)
    blob = np.fromfile(os.path.join(directory, blob_name), dtype="<f8")
    if blob.size != manifest["total"]:
        raise SupernetError("checkpoint blob size does not match manifest")
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = blob[entry["offset"]:entry["offset"] + size].reshape(shape)
        if entry["name"] == "alpha":
            net.alpha.value = arr.astype(np.float64).copy()
        else:
            net.params[entry["name"]].value = arr.astype(np.float64).copy()
