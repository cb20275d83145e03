"""Experiment runner and reporting surface.

Subcommands:
  search  - run one seeded architecture search (darts-1st or tse-darts)
  verify  - run the oracle cross-check suites
  plots   - turn run logs into long-format trajectory CSVs
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import diagnostics as diag
from . import optim
from . import oracles
from . import space as spacemod
from . import supernet as snmod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    space: str = "s2-like"
    optimizer: str = "tse-darts"       # "tse-darts" | "darts-1st"
    layers: int = 8
    unroll_t: int | None = None        # resolved against dataset size
    epochs: int = 30
    lr: float = 0.025
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    seed: int = 0
    out: str = "run"
    dataset: str = "synth"
    val_frac: float | None = None      # search split; None -> per-method default
    diag_val_frac: float = 0.1         # diagnostics-only split, labeled as such
    diag_eigen: bool = True
    width: int = 8
    batch_size: int = 32
    aggregation: str = "mean"          # node aggregation: "mean" | "sum"

    def validate(self):
        if self.optimizer not in ("tse-darts", "darts-1st"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.layers < 1 or self.epochs < 1:
            raise ConfigError("layers and epochs must be >= 1")
        if self.lr <= 0 or self.arch_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.optimizer == "tse-darts" and (self.val_frac or 0.0) > 0.0:
            raise ConfigError(
                "tse-darts searches use no validation split (val-frac must be 0); "
                "use --diag-val-frac for a diagnostics-only split")
        if self.unroll_t is not None and not (1 <= self.unroll_t <= 100):
            raise ConfigError("unroll T must be in [1, 100]")

    def resolved(self, n_samples: int) -> dict:
        cfg = dataclasses.asdict(self)
        if cfg["unroll_t"] is None:
            cfg["unroll_t"] = 100 if n_samples >= 10000 else 25
        if cfg["val_frac"] is None:
            cfg["val_frac"] = 0.0 if self.optimizer == "tse-darts" else 0.5
        return cfg


def _load_dataset(spec: str, seed: int) -> datamod.Dataset:
    if spec == "synth":
        return datamod.synth_blobs(4, 16, 4096, 0.3, seed)
    if spec.startswith("synth:"):
        k, d, n, noise = spec[len("synth:"):].split(",")
        return datamod.synth_blobs(int(k), int(d), int(n), float(noise), seed)
    if spec.startswith("xor:"):
        k, d, n, noise = spec[len("xor:"):].split(",")
        return datamod.synth_xor(int(k), int(d), int(n), float(noise), seed)
    if spec.startswith("idx:"):
        images, labels = spec[len("idx:"):].split(":")
        return datamod.load_idx(images, labels)
    raise ConfigError(f"unknown dataset spec {spec!r}")


def run_search(config: RunConfig) -> int:
    config.validate()
    os.makedirs(config.out, exist_ok=True)
    started = time.time()

    ds = _load_dataset(config.dataset, config.seed)
    resolved = config.resolved(len(ds))
    t_steps = resolved["unroll_t"]
    val_frac = resolved["val_frac"]

    # Diagnostics-only split first; the search never sees it.
    search_ds, diag_ds = datamod.split(
        ds, datamod.SplitSpec(1.0 - config.diag_val_frac, config.diag_val_frac,
                              seed=config.seed + 1)) \
        if config.diag_val_frac > 0 else (ds, None)
    if val_frac > 0:
        train_ds, sval_ds = datamod.split(
            search_ds, datamod.SplitSpec(1.0 - val_frac, val_frac,
                                         seed=config.seed + 2))
    else:
        train_ds, sval_ds = search_ds, None

    net_cfg = snmod.SupernetConfig(
        layers=config.layers, width=config.width, preset=config.space,
        classes=ds.classes, in_shape=ds.features.shape[1:], seed=config.seed,
        aggregation=config.aggregation)
    net = snmod.Supernet(net_cfg)

    w_cfg = optim.SGDConfig(lr=config.lr)
    arch_opt = optim.ArchOptimizer(optim.ArchOptimizerConfig(
        lr=config.arch_lr, weight_decay=config.arch_weight_decay))

    resolved["parameter_count"] = net.n_parameters()
    resolved["started"] = started
    with open(os.path.join(config.out, "config.json"), "w") as f:
        json.dump(resolved, f, indent=2)

    # Fixed seeded diagnostic batches so trajectories are comparable.
    diag_rng = np.random.default_rng(config.seed + 3)
    eigen_batches = {}
    if config.diag_eigen:
        idx = diag_rng.permutation(len(train_ds))[:512]
        eigen_batches["train"] = (train_ds.features[idx], train_ds.labels[idx])
        eig_src = diag_ds if diag_ds is not None else sval_ds
        if eig_src is not None:
            idx = diag_rng.permutation(len(eig_src))[:512]
            eigen_batches["val"] = (eig_src.features[idx], eig_src.labels[idx])

    train_stream = datamod.batch_stream(train_ds, config.batch_size,
                                        seed=config.seed + 4)
    val_stream = (datamod.batch_stream(sval_ds, min(config.batch_size, len(sval_ds)),
                                       seed=config.seed + 5)
                  if sval_ds is not None else None)

    trace = diag.SearchTrace()
    runlog_path = os.path.join(config.out, "runlog.jsonl")
    try:
        with open(runlog_path, "w") as runlog:
            for epoch in range(config.epochs):
                if config.optimizer == "tse-darts":
                    window = optim.make_window(
                        net, [next(train_stream) for _ in range(t_steps)])
                    result = optim.tse_darts_round(net, window, w_cfg, arch_opt)
                    tse_value = result.tse
                    train_loss = float(np.mean(result.retrain_losses))
                else:
                    losses = []
                    for _ in range(t_steps):
                        step = optim.darts_first_order_round(
                            net, next(train_stream), next(val_stream),
                            w_cfg, arch_opt)
                        losses.append(step["train_loss"])
                    tse_value = None
                    train_loss = float(np.mean(losses))
                diag.record_epoch(
                    trace, net, epoch, tse=tse_value, train_loss=train_loss,
                    val_ds=diag_ds, eigen_batches=eigen_batches,
                    seed=config.seed + 6)
                rec = trace.records[-1].to_dict()
                rec["seed"] = config.seed
                rec["time"] = time.time()
                runlog.write(json.dumps(rec) + "\n")
                runlog.flush()
    except (optim.UnrollAbort, ad.NonFiniteError, optim.OptimError) as err:
        with open(os.path.join(config.out, "abort.json"), "w") as f:
            json.dump({"error": str(err)}, f)
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC

    trace.write_csv(os.path.join(config.out, "metrics.csv"))
    encoding = spacemod.ArchEncoding(net.alpha.value.copy())
    genotype = spacemod.discretize(encoding, net.topology, net.ops)
    with open(os.path.join(config.out, "genotype.json"), "w") as f:
        f.write(genotype.to_json() + "\n")
    snmod.save_checkpoint(net, config.out)
    return EXIT_OK


# ------------------------------------------------------------------
# verification suites
# ------------------------------------------------------------------

def _tiny_net(seed: int, width: int = 3, layers: int = 1) -> snmod.Supernet:
    cfg = snmod.SupernetConfig(layers=layers, width=width, preset="s2-like",
                               classes=2, in_shape=(4,), seed=seed)
    return snmod.Supernet(cfg)


def _tiny_batches(seed: int, count: int, batch: int = 6, dim: int = 4):
    rng = np.random.default_rng(seed)
    return [(rng.standard_normal((batch, dim)),
             rng.integers(0, 2, size=batch)) for _ in range(count)]


def _suite_gradients(seeds=range(3)) -> dict:
    checks = []
    for seed in seeds:
        net = _tiny_net(seed)
        net.alpha.value = 0.3 * np.random.default_rng(seed + 50).standard_normal(
            net.alpha.shape)
        window = optim.make_window(net, _tiny_batches(seed + 100, 4))

        # At lr 0 the approximate and exact TSE gradients must coincide.
        zero = optim.SGDConfig(lr=0.0)
        approx = optim.tse_unroll(net, window, zero).alpha_grad
        _, exact = optim.exact_tse_gradient(net, window, zero)
        err0 = float(np.max(np.abs(approx - exact)))
        checks.append({"name": f"tse-grad-lr0-seed{seed}", "error": err0,
                       "tolerance": 1e-12, "pass": err0 < 1e-12})

        # Exact hypergradient vs central differences of the final loss.
        cfg = optim.SGDConfig(lr=0.05)
        exact_h = optim.exact_hypergradient(net, window, cfg).ravel()

        def loss_at(theta, window=window, net=net, cfg=cfg):
            saved = net.alpha.value.copy()
            net.alpha.value = theta.reshape(net.alpha.shape)
            try:
                net.restore(window.w0)
                for xb, yb in window.batches[:-1]:
                    loss = net.loss(net.forward(xb), yb)
                    gm = ad.backward(ad.tape(loss), wrt=net.weight_vars())
                    optim.sgd_step(net.params, gm.by_name(), cfg)
                xb, yb = window.batches[-1]
                return float(net.loss(net.forward(xb), yb).value)
            finally:
                net.alpha.value = saved
                net.restore(window.w0)

        fd = oracles.fd_gradient(loss_at, net.alpha.value.ravel(), step=1e-5)
        denom = max(float(np.max(np.abs(fd))), 1e-8)
        err = float(np.max(np.abs(exact_h - fd)) / denom)
        checks.append({"name": f"exact-hypergrad-fd-seed{seed}", "error": err,
                       "tolerance": 1e-4, "pass": err < 1e-4})
    return {"suite": "gradients", "checks": checks,
            "pass": all(c["pass"] for c in checks)}


def _suite_eigen(count: int = 10, dim: int = 10, seed: int = 0) -> dict:
    checks = []
    rng = np.random.default_rng(seed)
    for i in range(count):
        m = rng.standard_normal((dim, dim))
        a = 0.5 * (m + m.T)

        def closure(theta, a=a):
            leaf = ad.param(theta.reshape(1, -1), name="theta")
            quad = ad.vsum((leaf @ ad.const(a)) * leaf) * ad.const(0.5)
            return quad, leaf

        est = diag.dominant_eigenvalue(closure, np.zeros(dim), seed=i,
                                       max_iters=500, tol=1e-8)
        ref = oracles.dense_dominant_eigenvalue(
            lambda th, a=a: 0.5 * float(th @ a @ th), np.zeros(dim))
        err = float(abs(est.eigenvalue - ref) / max(abs(ref), 1e-12))
        checks.append({"name": f"eigen-quadratic-{i}", "error": err,
                       "tolerance": 1e-3, "pass": bool(err < 1e-3)})
    return {"suite": "eigen", "checks": checks,
            "pass": all(c["pass"] for c in checks)}


def _suite_depth(count: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(count):
        n, edges = oracles.random_dag(rng)
        topo = spacemod.CellTopology(n, tuple(edges))
        ops = tuple(spacemod.OperationKind(
            rng.choice([spacemod.ZERO, spacemod.SKIP, spacemod.LINEAR]))
            for _ in edges)
        geno = spacemod.Genotype(tuple(edges), ops)
        kept = [e for e, op in zip(edges, ops) if op.tag != spacemod.ZERO]
        ref = oracles.brute_force_longest_path(n, kept, 0, n - 1)
        if spacemod.cell_depth(geno, topo) != ref:
            mismatches += 1
    check = {"name": f"depth-bruteforce-{count}dags", "error": mismatches,
             "tolerance": 0, "pass": mismatches == 0}
    return {"suite": "depth", "checks": [check], "pass": check["pass"]}


def run_verify(suite: str, out_path: str | None = None) -> int:
    suites = {"gradients": _suite_gradients, "eigen": _suite_eigen,
              "depth": _suite_depth}
    if suite != "all" and suite not in suites:
        raise ConfigError(f"unknown suite {suite!r}")
    names = list(suites) if suite == "all" else [suite]
    report = {"suites": [suites[n]() for n in names]}
    report["pass"] = all(s["pass"] for s in report["suites"])
    text = json.dumps(report, indent=2)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK if report["pass"] else 1


# ------------------------------------------------------------------
# plot-ready trajectory CSVs
# ------------------------------------------------------------------

_TRAJECTORIES = {
    "skip_trajectory.csv": "skip_count",
    "depth_trajectory.csv": "depth",
    "eigenvalue_trajectory.csv": "eig_val",
    "accuracy_trajectory.csv": "val_acc",
}


def _find_runlogs(run_dir: str) -> list:
    direct = os.path.join(run_dir, "runlog.jsonl")
    if os.path.exists(direct):
        return [direct]
    found = sorted(
        os.path.join(run_dir, d, "runlog.jsonl")
        for d in os.listdir(run_dir)
        if os.path.exists(os.path.join(run_dir, d, "runlog.jsonl")))
    if not found:
        raise ConfigError(f"no runlog.jsonl under {run_dir}")
    return found


def emit_plots(run_dir: str) -> int:
    logs = _find_runlogs(run_dir)
    rows: dict[str, list] = {name: [] for name in _TRAJECTORIES}
    for log in logs:
        with open(log) as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                for name, key in _TRAJECTORIES.items():
                    rows[name].append((rec["epoch"], rec.get(key), rec.get("seed")))
    for name in _TRAJECTORIES:
        with open(os.path.join(run_dir, name), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "value", "seed"])
            writer.writerows(rows[name])
    return EXIT_OK


# ------------------------------------------------------------------
# argument parsing
# ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsedarts", description="desk-scale differentiable architecture search")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run one seeded search")
    s.add_argument("--space", default="s2-like",
                   choices=["nb201-like", "s2-like"])
    s.add_argument("--optimizer", default="tse-darts",
                   choices=["tse-darts", "darts-1st"])
    s.add_argument("--layers", type=int, default=8)
    s.add_argument("--unroll-t", type=int, default=None)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.025)
    s.add_argument("--arch-lr", type=float, default=3e-4)
    s.add_argument("--arch-wd", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="run")
    s.add_argument("--dataset", default="synth")
    s.add_argument("--val-frac", type=float, default=None)
    s.add_argument("--diag-val-frac", type=float, default=0.1)
    s.add_argument("--diag-eigen", choices=["on", "off"], default="on")
    s.add_argument("--width", type=int, default=8)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--aggregation", choices=["mean", "sum"], default="mean")

    v = sub.add_parser("verify", help="run oracle cross-check suites")
    v.add_argument("--suite", default="all",
                   choices=["all", "gradients", "eigen", "depth"])
    v.add_argument("--out", default=None)

    p = sub.add_parser("plots", help="emit trajectory CSVs from a run directory")
    p.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "search":
            config = RunConfig(
                space=args.space, optimizer=args.optimizer, layers=args.layers,
                unroll_t=args.unroll_t, epochs=args.epochs, lr=args.lr,
                arch_lr=args.arch_lr, arch_weight_decay=args.arch_wd,
                seed=args.seed, out=args.out, dataset=args.dataset,
                val_frac=args.val_frac, diag_val_frac=args.diag_val_frac,
                diag_eigen=args.diag_eigen == "on", width=args.width,
                batch_size=args.batch_size, aggregation=args.aggregation)
            return run_search(config)
        if args.command == "verify":
            return run_verify(args.suite, args.out)
        if args.command == "plots":
            return emit_plots(args.run_dir)
    except (ConfigError, datamod.DataError, spacemod.SpaceError,
            snmod.SupernetError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
