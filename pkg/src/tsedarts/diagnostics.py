"""Per-epoch search diagnostics.

Dominant eigenvalue of the loss Hessian w.r.t. the architecture logits
(power iteration over finite-difference Hessian-vector products),
skip-connection counts, cell depth, validation accuracy, and the
SearchTrace record assembly + serialization.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .space import Genotype, cell_depth, discretize, skip_count
from .supernet import Supernet


class DiagnosticsError(ValueError):
    pass


@dataclass
class EigenEstimate:
    eigenvalue: float
    iterations: int
    residual: float
    loss_source: str          # "train" | "val"
    converged: bool = True
    zero_hessian: bool = False

    def to_dict(self) -> dict:
        return {
            "eigenvalue": self.eigenvalue,
            "iterations": self.iterations,
            "residual": self.residual,
            "loss_source": self.loss_source,
            "converged": self.converged,
            "zero_hessian": self.zero_hessian,
        }


def _shifted_power_iteration(apply_h, v0: np.ndarray, shift: float, sign: float,
                             max_iters: int, tol: float):
    """Power iteration on sign*H + shift*I; returns the implied
    eigenvalue of H plus iteration bookkeeping.

    The shift separates the most positive (sign=+1) or most negative
    (sign=-1) eigenvalue from an opposite-sign eigenvalue of similar
    magnitude, which plain power iteration cannot resolve.
    """
    v = v0 / np.linalg.norm(v0)
    mu_prev = None
    mu = shift
    residuals = []
    iters = 0
    for iters in range(1, max_iters + 1):
        av = sign * apply_h(v) + shift * v
        mu = float(v @ av)
        residuals.append(float(np.linalg.norm(av - mu * v)))
        norm = np.linalg.norm(av)
        if norm < 1e-12:
            break
        v = av / norm
        if mu_prev is not None and abs(mu - mu_prev) < tol * max(1.0, abs(mu)):
            break
        mu_prev = mu
    converged = mu_prev is not None and abs(mu - mu_prev) < tol * max(1.0, abs(mu))
    lam = sign * (mu - shift)
    return lam, v, iters, residuals, converged


def dominant_eigenvalue(loss_closure, alpha0: np.ndarray, max_iters: int = 50,
                        tol: float = 1e-3, eps: float | None = None,
                        seed: int = 0, loss_source: str = "val") -> EigenEstimate:
    """Eigenvalue of largest magnitude via shifted power iteration.

    `loss_closure(alpha_flat)` rebuilds the loss at the given logits and
    returns (loss Var, leaf Var).  The Hessian acts through central
    differences of exact gradients.  Two shifted runs isolate the most
    positive and most negative eigenvalues; the larger magnitude wins
    and its Rayleigh quotient is reported.
    """
    theta = np.asarray(alpha0, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(theta.size)
    v0 /= np.linalg.norm(v0)

    def apply_h(v):
        return ad.hvp(loss_closure, theta, v, eps=eps)

    hv0 = apply_h(v0)
    if np.linalg.norm(hv0) < 1e-10:
        return EigenEstimate(0.0, 1, 0.0, loss_source,
                             converged=True, zero_hessian=True)
    # Scale estimate for the shift: a few plain iterates.
    scale = np.linalg.norm(hv0)
    v = hv0 / scale
    for _ in range(4):
        hv = apply_h(v)
        scale = max(scale, np.linalg.norm(hv))
        v = hv / np.linalg.norm(hv)
    shift = 1.5 * scale

    best = None
    total_iters = 5
    for sign in (1.0, -1.0):
        lam, vec, iters, residuals, conv = _shifted_power_iteration(
            apply_h, v0, shift, sign, max_iters, tol)
        total_iters += iters
        if best is None or abs(lam) > abs(best[0]):
            best = (lam, vec, residuals, conv)
    lam, vec, residuals, converged = best
    hv = apply_h(vec)
    residual = float(np.linalg.norm(hv - lam * vec))
    return EigenEstimate(lam, total_iters, residual, loss_source,
                         converged=converged)


def alpha_loss_closure(net: Supernet, batch):
    """Loss on a fixed batch as a function of the flat alpha logits."""
    xb, yb = batch
    shape = net.alpha.shape

    def closure(theta: np.ndarray):
        leaf = ad.param(theta.reshape(shape), name="alpha_probe")
        loss = net.loss(net.forward(xb, alpha=leaf), yb)
        return loss, leaf

    return closure


def val_accuracy(net: Supernet, alpha_or_genotype, val_ds, chunk: int = 256) -> float:
    """Fraction of argmax-correct predictions, evaluated in chunks."""
    if val_ds is None or len(val_ds) == 0:
        raise DiagnosticsError("empty validation dataset")
    correct = 0
    for start in range(0, len(val_ds), chunk):
        xb = val_ds.features[start:start + chunk]
        yb = val_ds.labels[start:start + chunk]
        if isinstance(alpha_or_genotype, Genotype):
            logits = net.discrete_forward(xb, alpha_or_genotype)
        else:
            logits = net.forward(xb, alpha=alpha_or_genotype)
        correct += int((logits.value.argmax(axis=1) == yb).sum())
    return correct / len(val_ds)


@dataclass
class EpochRecord:
    epoch: int
    tse: float | None
    train_loss: float
    val_acc: float | None
    skip_count: int
    depth: int
    eig_val: float | None
    eig_train: float | None
    genotype: Genotype
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "epoch": self.epoch,
            "tse": self.tse,
            "train_loss": self.train_loss,
            "val_acc": self.val_acc,
            "skip_count": self.skip_count,
            "depth": self.depth,
            "eig_val": self.eig_val,
            "eig_train": self.eig_train,
            "genotype": json.loads(self.genotype.to_json()),
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpochRecord":
        known = {"epoch", "tse", "train_loss", "val_acc", "skip_count",
                 "depth", "eig_val", "eig_train", "genotype"}
        return cls(
            epoch=d["epoch"], tse=d["tse"], train_loss=d["train_loss"],
            val_acc=d["val_acc"], skip_count=d["skip_count"], depth=d["depth"],
            eig_val=d["eig_val"], eig_train=d["eig_train"],
            genotype=Genotype.from_json(json.dumps(d["genotype"])),
            extra={k: v for k, v in d.items() if k not in known},
        )


CSV_COLUMNS = ["epoch", "tse", "train_loss", "val_acc", "skip_count",
               "depth", "eig_val", "eig_train"]


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise DiagnosticsError("epochs must be strictly increasing")
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "SearchTrace":
        trace = cls()
        for line in text.splitlines():
            if line.strip():
                trace.records.append(EpochRecord.from_dict(json.loads(line)))
        return trace

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                d = r.to_dict()
                writer.writerow([d[c] for c in CSV_COLUMNS])


def record_epoch(trace: SearchTrace, net: Supernet, epoch: int, *,
                 tse: float | None, train_loss: float,
                 val_ds=None, eigen_batches: dict | None = None,
                 eigen_opts: dict | None = None, seed: int = 0,
                 extra: dict | None = None) -> SearchTrace:
    """Append one complete record; read-only with respect to (w, alpha).

    `eigen_batches` maps loss source ("train"/"val") to a fixed
    diagnostic batch; enabled metrics must have their data configured.
    """
    from .space import ArchEncoding
    encoding = ArchEncoding(net.alpha.value.copy())
    genotype = discretize(encoding, net.topology, net.ops)
    val_acc = None
    if val_ds is not None:
        val_acc = val_accuracy(net, net.alpha.value, val_ds)
    eig = {"train": None, "val": None}
    for source, batch in (eigen_batches or {}).items():
        if source not in eig:
            raise DiagnosticsError(f"unknown eigenvalue loss source {source!r}")
        opts = eigen_opts or {}
        est = dominant_eigenvalue(
            alpha_loss_closure(net, batch), net.alpha.value,
            max_iters=opts.get("max_iters", 50), tol=opts.get("tol", 1e-3),
            seed=seed, loss_source=source)
        eig[source] = est.eigenvalue
    record = EpochRecord(
        epoch=epoch, tse=tse, train_loss=train_loss, val_acc=val_acc,
        skip_count=skip_count(genotype),
        depth=cell_depth(genotype, net.topology),
        eig_val=eig["val"], eig_train=eig["train"],
        genotype=genotype, extra=extra or {},
    )
    trace.append(record)
    return trace
