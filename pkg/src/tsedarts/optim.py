"""Weight training and architecture updates.

Covers plain-SGD weight steps, the first-order validation-loss
architecture step, the training-speed-estimate (TSE) unrolling round
(accumulated direct gradients, snapshot/restore, retrain), and the
exact unrolled hypergradient computed by differentiating through the
whole weight-update recurrence.  The exact routes are the verification
oracles for the cheap accumulated approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Var
from .supernet import Supernet


class OptimError(ValueError):
    pass


class UnrollAbort(RuntimeError):
    """Non-finite loss inside an unrolling window."""

    def __init__(self, step: int, message: str):
        super().__init__(f"window aborted at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class SGDConfig:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise OptimError("learning rate must be >= 0")

    def require_plain(self, where: str):
        if self.momentum != 0.0 or self.weight_decay != 0.0:
            raise OptimError(f"{where} requires plain SGD (no momentum/decay)")


@dataclass(frozen=True)
class ArchOptimizerConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-3
    kind: str = "adam"   # "adam" | "sgd"

    def __post_init__(self):
        if self.lr <= 0:
            raise OptimError("architecture learning rate must be > 0")
        if self.kind not in ("adam", "sgd"):
            raise OptimError(f"unknown architecture optimizer {self.kind!r}")


@dataclass
class UnrollWindow:
    """Weight snapshot at window start plus the window's fixed batches."""

    w0: dict            # name -> ndarray snapshot
    batches: list       # [(features, labels), ...], replayed in order

    def __post_init__(self):
        if not self.batches:
            raise OptimError("unrolling window needs at least one batch")

    @property
    def steps(self) -> int:
        return len(self.batches)


def make_window(net: Supernet, batches: list) -> UnrollWindow:
    return UnrollWindow(net.snapshot(), list(batches))


@dataclass
class TSEResult:
    tse: float
    step_losses: list
    alpha_grad: np.ndarray
    w_final: dict
    forward_passes: int
    backward_passes: int


def sgd_step(weights: dict, grads: dict, cfg: SGDConfig,
             state: dict | None = None) -> dict:
    """In-place w <- w - lr * (g + wd * w), with optional momentum."""
    if state is None:
        state = {}
    for name, p in weights.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for {name}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.value
        if cfg.momentum:
            buf = state.get(name)
            buf = g if buf is None else cfg.momentum * buf + g
            state[name] = buf
            g = buf
        p.value = p.value - cfg.lr * g
    return state


class ArchOptimizer:
    """Architecture step on alpha: plain SGD or Adam with DARTS-style
    defaults (lr 3e-4, betas (0.5, 0.999), weight decay 1e-3)."""

    def __init__(self, cfg: ArchOptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m = None
        self.v = None

    def step(self, alpha: Var, grad: np.ndarray):
        if not np.all(np.isfinite(grad)):
            raise OptimError("non-finite architecture gradient")
        g = grad + self.cfg.weight_decay * alpha.value
        if self.cfg.kind == "sgd":
            alpha.value = alpha.value - self.cfg.lr * g
            return
        b1, b2, eps = 0.5, 0.999, 1e-8
        if self.m is None:
            self.m = np.zeros_like(alpha.value)
            self.v = np.zeros_like(alpha.value)
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        alpha.value = alpha.value - self.cfg.lr * mhat / (np.sqrt(vhat) + eps)


# ------------------------------------------------------------------
# TSE unrolling (accumulated direct gradients)
# ------------------------------------------------------------------

def tse_unroll(net: Supernet, window: UnrollWindow, cfg: SGDConfig) -> TSEResult:
    """Run the window's SGD steps from the snapshot, summing per-step
    losses into the TSE scalar and per-step direct alpha-gradients into
    one accumulator (never cleared between steps).  One forward and one
    backward per step; alpha itself is not modified."""
    if cfg.momentum != 0.0:
        raise OptimError("momentum must be disabled during unrolling")
    net.restore(window.w0)
    wvars = net.weight_vars()
    tse = 0.0
    step_losses = []
    alpha_grad = np.zeros_like(net.alpha.value)
    fwd0, bwd0 = net.forward_count, ad.BACKWARD_CALLS
    for t, (xb, yb) in enumerate(window.batches):
        try:
            loss = net.loss(net.forward(xb), yb)
            gm = ad.backward(ad.tape(loss), wrt=wvars + [net.alpha])
        except NonFiniteError as err:
            raise UnrollAbort(t, str(err)) from err
        step_losses.append(float(loss.value))
        tse += float(loss.value)
        alpha_grad += gm.array(net.alpha)
        sgd_step(net.params, gm.by_name(), cfg)
    return TSEResult(
        tse=tse,
        step_losses=step_losses,
        alpha_grad=alpha_grad,
        w_final=net.snapshot(),
        forward_passes=net.forward_count - fwd0,
        backward_passes=ad.BACKWARD_CALLS - bwd0,
    )


@dataclass
class RoundResult:
    tse: float
    step_losses: list
    retrain_losses: list
    alpha_grad: np.ndarray
    restore_exact: bool


def tse_darts_round(net: Supernet, window: UnrollWindow, w_cfg: SGDConfig,
                    arch_opt: ArchOptimizer) -> RoundResult:
    """One search round: unroll to accumulate the TSE gradient, restore
    the weight snapshot bit-exactly, step alpha, then retrain the same
    batches under the new alpha."""
    result = tse_unroll(net, window, w_cfg)
    net.restore(window.w0)
    restore_exact = all(
        net.params[k].value.tobytes() == window.w0[k].tobytes()
        for k in window.w0)
    arch_opt.step(net.alpha, result.alpha_grad)
    retrain_losses = []
    wvars = net.weight_vars()
    for t, (xb, yb) in enumerate(window.batches):
        try:
            loss = net.loss(net.forward(xb), yb)
            gm = ad.backward(ad.tape(loss), wrt=wvars)
        except NonFiniteError as err:
            raise UnrollAbort(t, str(err)) from err
        retrain_losses.append(float(loss.value))
        sgd_step(net.params, gm.by_name(), w_cfg)
    return RoundResult(result.tse, result.step_losses, retrain_losses,
                       result.alpha_grad, restore_exact)


def darts_first_order_round(net: Supernet, train_batch, val_batch,
                            w_cfg: SGDConfig, arch_opt: ArchOptimizer) -> dict:
    """One first-order baseline step: SGD on the train loss, then an
    alpha step on the direct validation-loss gradient at the current
    weights (w* approximated by w)."""
    xt, yt = train_batch
    loss_t = net.loss(net.forward(xt), yt)
    gm = ad.backward(ad.tape(loss_t), wrt=net.weight_vars())
    sgd_step(net.params, gm.by_name(), w_cfg)

    xv, yv = val_batch
    loss_v = net.loss(net.forward(xv), yv)
    (ga,) = ad.grad(loss_v, wrt=[net.alpha])
    arch_opt.step(net.alpha, ga.value)
    return {"train_loss": float(loss_t.value), "val_loss": float(loss_v.value)}


# ------------------------------------------------------------------
# exact unrolled hypergradients (verification oracles)
# ------------------------------------------------------------------

def _check_cap(net: Supernet, cap: int):
    n = net.n_parameters()
    if n > cap:
        raise OptimError(f"{n} weight parameters exceed the exact-unroll cap {cap}")


def _graph_weights(window: UnrollWindow) -> dict:
    return {k: ad.const(v) for k, v in window.w0.items()}


def _unrolled_step(net: Supernet, wvars: dict, batch, cfg: SGDConfig):
    """One differentiable SGD step: returns (loss Var, next weights)."""
    xb, yb = batch
    loss = net.loss(net.forward(xb, params=wvars), yb)
    names = list(wvars.keys())
    gs = ad.grad(loss, wrt=[wvars[n] for n in names], create_graph=True)
    lr = ad.const(cfg.lr)
    nxt = {n: wvars[n] - lr * g for n, g in zip(names, gs)}
    return loss, nxt


def exact_hypergradient(net: Supernet, window: UnrollWindow, cfg: SGDConfig,
                        cap: int = 2000) -> np.ndarray:
    """Exact gradient w.r.t. alpha of the final training loss, by full
    reverse-mode differentiation through every weight update.

    The window's first steps-1 batches drive the updates; the last
    batch evaluates the final loss.  With a single batch this is the
    direct gradient at the snapshot.
    """
    cfg.require_plain("exact_hypergradient")
    _check_cap(net, cap)
    wvars = _graph_weights(window)
    for batch in window.batches[:-1]:
        _, wvars = _unrolled_step(net, wvars, batch, cfg)
    xb, yb = window.batches[-1]
    final_loss = net.loss(net.forward(xb, params=wvars), yb)
    (ga,) = ad.grad(final_loss, wrt=[net.alpha])
    return ga.value.copy()


def exact_tse_gradient(net: Supernet, window: UnrollWindow, cfg: SGDConfig,
                       cap: int = 2000):
    """Exact gradient w.r.t. alpha of the TSE scalar (the same per-step
    loss sum tse_unroll accumulates), in one unrolled reverse pass.

    Returns (tse value, exact alpha gradient).
    """
    cfg.require_plain("exact_tse_gradient")
    _check_cap(net, cap)
    wvars = _graph_weights(window)
    total = None
    for t, batch in enumerate(window.batches):
        last = t == len(window.batches) - 1
        if last:
            xb, yb = batch
            loss = net.loss(net.forward(xb, params=wvars), yb)
        else:
            loss, wvars = _unrolled_step(net, wvars, batch, cfg)
        total = loss if total is None else total + loss
    (ga,) = ad.grad(total, wrt=[net.alpha])
    return float(total.value), ga.value.copy()
