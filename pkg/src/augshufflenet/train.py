"""Optimizer (SGD + Nesterov momentum + weight decay), cosine schedule,
toy-scale training loop, and finite-difference gradient verification.

Update rule per step, applied to every learnable parameter w with raw
gradient g, decay lambda, momentum mu and velocity v:

    g' = g + lambda * w
    v  = mu * v + g'
    w  = w - lr * (g' + mu * v)

Gradient checks run the ops in float64 end to end so that method error is
not masked by storage rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import blocks, channel_ops, network, ops
from .autodiff import Node, Tape
from .data import Dataset, augment_batch, epoch_rng
from .errors import ConfigurationError


@dataclass
class OptimState:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    total_epochs: int = 300
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(epoch: int, total_epochs: int, lr0: float = 0.1) -> float:
    """Half-cosine decay from lr0 at epoch 0 to 0 at epoch == total_epochs."""
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_step(params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray],
             state: OptimState, lr: float) -> None:
    """One Nesterov step, in place; every parameter must have a gradient."""
    mu, lam = state.momentum, state.weight_decay
    for name, w in params:
        g = grads[name]
        if g.shape != w.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != param shape {w.shape} for {name}")
        g = g.astype(w.dtype) + lam * w if lam else g.astype(w.dtype)
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(w)
            state.velocities[name] = v
        v *= mu
        v += g
        w -= lr * (g + mu * v)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float | None = None


def metrics_csv(history: list[EpochStats]) -> str:
    with_test = any(h.test_acc is not None for h in history)
    header = "epoch,lr,train_loss,train_acc" + (",test_acc" if with_test else "")
    lines = [header]
    for h in history:
        row = f"{h.epoch},{h.lr:.8f},{h.train_loss:.6f},{h.train_acc:.6f}"
        if with_test:
            row += f",{h.test_acc:.6f}" if h.test_acc is not None else ","
        lines.append(row)
    return "\n".join(lines) + "\n"


def evaluate(model: network.Model, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset in inference mode."""
    total_loss = 0.0
    correct = 0
    n = len(data)
    for start in range(0, n, batch_size):
        xb = data.images[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        logits = network.forward(model, xb, training=False)
        loss = ad.softmax_cross_entropy(None, Node(logits), yb)
        total_loss += float(loss.value) * xb.shape[0]
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    return total_loss / n, correct / n


def train_loop(model: network.Model, train_data: Dataset, state: OptimState,
               epochs: int, seed: int = 0, use_augmentation: bool = True,
               test_data: Dataset | None = None,
               log=None) -> list[EpochStats]:
    """Train for ``epochs`` epochs; deterministic for a fixed seed.

    The cosine schedule spans exactly the epochs being run. Training
    accuracy/loss are accumulated from the (augmented) training batches.
    """
    if len(train_data) == 0:
        raise ConfigurationError("training dataset is empty")
    params = list(network.named_parameters(model))
    order_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xfeed,)))
    history: list[EpochStats] = []
    n = len(train_data)
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, state.lr0)
        aug_rng = epoch_rng(seed, epoch)
        perm = order_rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, state.batch_size):
            idx = perm[start:start + state.batch_size]
            xb = train_data.images[idx]
            yb = train_data.labels[idx]
            if use_augmentation:
                xb = augment_batch(xb, aug_rng)
            tape = Tape()
            logits = network.forward_nodes(model, tape, Node(xb, constant=True), training=True)
            loss = ad.softmax_cross_entropy(tape, logits, yb)
            tape.backward(loss)
            grads = {name: tape.grad_for(arr) for name, arr in params}
            missing = [name for name, g in grads.items() if g is None]
            if missing:
                raise RuntimeError(f"no gradient for parameters: {missing[:3]} ...")
            sgd_step(params, grads, state, lr)
            total_loss += float(loss.value) * xb.shape[0]
            correct += int((np.argmax(logits.value, axis=1) == yb).sum())
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            train_loss=total_loss / n,
            train_acc=correct / n,
            test_acc=evaluate(model, test_data)[1] if test_data is not None else None,
        )
        history.append(stats)
        if log is not None:
            log(stats)
    return history


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_difference_check(fn, arrays: dict[str, np.ndarray], *,
                            h: float = 1e-5, tolerance: float = 1e-4,
                            name: str = "op") -> GradCheck:
    """Compare analytic gradients against central differences, elementwise.

    ``fn(arrays) -> (loss, grads)`` must be a pure function of the float64
    arrays (any internal state reset per call). Relative error uses
    max(|analytic|, |numeric|, 1e-8) as the denominator.
    """
    _, grads = fn(arrays)
    max_rel = 0.0
    for key, base in arrays.items():
        analytic = grads[key]
        if analytic is None:
            raise RuntimeError(f"{name}: no analytic gradient for {key!r}")
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = fn(arrays)
            flat[i] = orig - h
            down, _ = fn(arrays)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(np.asarray(analytic).reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return GradCheck(name=name, max_rel_error=max_rel, tolerance=tolerance)


def _random_proj(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _scalarize(tape: Tape, out: Node, proj: np.ndarray) -> float:
    tape.backward(out, proj)
    return float((out.value * proj).sum())


def _conv_check(rng, *, k, groups, name, tolerance):
    c_in, c_out, size = (4, 4, 5) if groups > 1 else (3, 6, 5)
    x0 = rng.standard_normal((2, c_in, size, size))
    w0 = rng.standard_normal((c_out, c_in // groups, k, k))
    proj = None

    def fn(arrays):
        nonlocal proj
        p = ops.ConvParams(arrays["w"], stride=1, padding=k // 2, groups=groups)
        tape = Tape()
        x = Node(arrays["x"])
        y = ad.conv2d(tape, x, p)
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        return loss, {"x": x.grad, "w": tape.grad_for(arrays["w"])}

    return fn, {"x": x0, "w": w0}, name, tolerance


def _bn_check(rng, training, name, tolerance):
    c = 3
    x0 = rng.standard_normal((2, c, 4, 4))
    g0 = rng.uniform(0.5, 1.5, c)
    b0 = rng.standard_normal(c)
    proj = None

    def fn(arrays):
        nonlocal proj
        n = ops.NormParams(
            gamma=arrays["gamma"], beta=arrays["beta"],
            running_mean=np.array([0.1, -0.2, 0.05]),
            running_var=np.array([1.1, 0.9, 1.3]),
        )
        tape = Tape()
        x = Node(arrays["x"])
        y = ad.batch_norm(tape, x, n, training)
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        return loss, {"x": x.grad, "gamma": tape.grad_for(arrays["gamma"]),
                      "beta": tape.grad_for(arrays["beta"])}

    return fn, {"x": x0, "gamma": g0, "beta": b0}, name, tolerance


def _relu_check(rng, name, tolerance):
    # keep inputs away from the kink at 0
    signs = rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
    x0 = signs * rng.uniform(0.2, 1.5, size=(2, 3, 4, 4))
    proj = None

    def fn(arrays):
        nonlocal proj
        tape = Tape()
        x = Node(arrays["x"])
        y = ad.relu(tape, x)
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        return loss, {"x": x.grad}

    return fn, {"x": x0}, name, tolerance


def _pool_check(rng, name, tolerance):
    x0 = rng.standard_normal((2, 3, 4, 4))
    proj = None

    def fn(arrays):
        nonlocal proj
        tape = Tape()
        x = Node(arrays["x"])
        y = ad.global_avg_pool(tape, x)
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        return loss, {"x": x.grad}

    return fn, {"x": x0}, name, tolerance


def _linear_check(rng, name, tolerance):
    x0 = rng.standard_normal((3, 5))
    w0 = rng.standard_normal((5, 4))
    b0 = rng.standard_normal(4)
    proj = None

    def fn(arrays):
        nonlocal proj
        tape = Tape()
        x = Node(arrays["x"])
        y = ad.linear(tape, x, arrays["w"], arrays["b"])
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        return loss, {"x": x.grad, "w": tape.grad_for(arrays["w"]),
                      "b": tape.grad_for(arrays["b"])}

    return fn, {"x": x0, "w": w0, "b": b0}, name, tolerance


def _concat_check(rng, name, tolerance):
    a0 = rng.standard_normal((2, 3, 4, 4))
    b0 = rng.standard_normal((2, 5, 4, 4))
    proj = None

    def fn(arrays):
        nonlocal proj
        tape = Tape()
        a, b = Node(arrays["a"]), Node(arrays["b"])
        y = ad.concat_channels(tape, a, b)
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        return loss, {"a": a.grad, "b": b.grad}

    return fn, {"a": a0, "b": b0}, name, tolerance


def _perm_check(rng, which, name, tolerance):
    x0 = rng.standard_normal((2, 8, 3, 3))
    proj = None

    def fn(arrays):
        nonlocal proj
        tape = Tape()
        x = Node(arrays["x"])
        if which == "split":
            bank, branch = ad.channel_split(tape, x, 0.375)
            y = ad.concat_channels(tape, branch, bank)
        elif which == "shuffle":
            y = ad.channel_shuffle(tape, x)
        else:
            bank, branch = ad.channel_split(tape, x, 0.375)
            b2, k2 = ad.channel_crossover(tape, branch, bank)
            y = ad.concat_channels(tape, k2, b2)
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        return loss, {"x": x.grad}

    return fn, {"x": x0}, name, tolerance


def _softmax_ce_check(rng, name, tolerance):
    x0 = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)

    def fn(arrays):
        tape = Tape()
        x = Node(arrays["x"])
        loss = ad.softmax_cross_entropy(tape, x, labels)
        tape.backward(loss)
        return float(loss.value), {"x": x.grad}

    return fn, {"x": x0}, name, tolerance


def aug_block_check(rng, *, m=8, r=0.375, spatial=4, training=True,
                    name="aug_block", tolerance=1e-4):
    """Full augmented-block gradient check over input, conv and norm params."""
    x_ch = channel_ops.split_point(m, r)
    half = m // 2
    x0 = rng.standard_normal((1, m, spatial, spatial))
    arrays = {
        "x": x0,
        "w1": rng.standard_normal((x_ch, x_ch, 1, 1)) * 0.5,
        "g1": rng.uniform(0.5, 1.5, x_ch), "b1": rng.standard_normal(x_ch) * 0.1,
        "wd": rng.standard_normal((x_ch, 1, 3, 3)) * 0.5,
        "g2": rng.uniform(0.5, 1.5, x_ch), "b2": rng.standard_normal(x_ch) * 0.1,
        "w2": rng.standard_normal((half, half, 1, 1)) * 0.5,
        "g3": rng.uniform(0.5, 1.5, half), "b3": rng.standard_normal(half) * 0.1,
    }
    proj = None

    def fn(vals):
        nonlocal proj
        p = blocks.BlockParams(
            conv1=ops.ConvParams(vals["w1"]),
            norm1=ops.NormParams(vals["g1"], vals["b1"],
                                 np.zeros(x_ch), np.ones(x_ch)),
            dwconv=ops.ConvParams(vals["wd"], padding=1, groups=x_ch),
            norm2=ops.NormParams(vals["g2"], vals["b2"],
                                 np.zeros(x_ch), np.ones(x_ch)),
            conv2=ops.ConvParams(vals["w2"]),
            norm3=ops.NormParams(vals["g3"], vals["b3"],
                                 np.zeros(half), np.ones(half)),
        )
        tape = Tape()
        x = Node(vals["x"])
        y = blocks.aug_block_nodes(tape, x, p, r, training)
        if proj is None:
            proj = _random_proj(rng, y.value.shape)
        loss = _scalarize(tape, y, proj)
        grads = {"x": x.grad,
                 "w1": tape.grad_for(vals["w1"]), "g1": tape.grad_for(vals["g1"]),
                 "b1": tape.grad_for(vals["b1"]), "wd": tape.grad_for(vals["wd"]),
                 "g2": tape.grad_for(vals["g2"]), "b2": tape.grad_for(vals["b2"]),
                 "w2": tape.grad_for(vals["w2"]), "g3": tape.grad_for(vals["g3"]),
                 "b3": tape.grad_for(vals["b3"])}
        return loss, grads

    return fn, arrays, name, tolerance


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> list[GradCheck]:
    """FD-check every differentiable op once, plus the full augmented block."""
    rng = np.random.default_rng(seed)
    cases = [
        _conv_check(rng, k=1, groups=1, name="conv2d_1x1", tolerance=tolerance),
        _conv_check(rng, k=3, groups=1, name="conv2d_3x3", tolerance=tolerance),
        _conv_check(rng, k=3, groups=4, name="conv2d_depthwise", tolerance=tolerance),
        _bn_check(rng, True, "batch_norm_train", tolerance),
        _bn_check(rng, False, "batch_norm_eval", tolerance),
        _relu_check(rng, "relu", tolerance),
        _pool_check(rng, "global_avg_pool", tolerance),
        _linear_check(rng, "linear", tolerance),
        _concat_check(rng, "concat_channels", tolerance),
        _perm_check(rng, "split", "channel_split", tolerance),
        _perm_check(rng, "shuffle", "channel_shuffle", tolerance),
        _perm_check(rng, "crossover", "channel_crossover", tolerance),
        _softmax_ce_check(rng, "softmax_cross_entropy", tolerance),
        aug_block_check(rng, tolerance=tolerance),
    ]
    results = []
    for fn, arrays, name, tol in cases:
        results.append(finite_difference_check(fn, arrays, tolerance=tol, name=name))
    return results
