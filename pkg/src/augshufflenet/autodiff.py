"""Reverse-mode autodiff: a linear gradient tape over the numpy kernels.

Every traced op computes its forward value through :mod:`ops` /
:mod:`channel_ops` and, when a tape is supplied, records a VJP closure.
``Tape.backward`` walks the records in exact reverse order (a valid
topological order by construction) and accumulates gradients on activation
nodes and on parameter arrays (keyed by array identity, so parameters must
be updated in place between steps).

With ``tape=None`` the same functions run pure inference with no recording,
which is how the block/network forward code stays single-sourced.
"""

from __future__ import annotations

import numpy as np

from . import channel_ops, ops


class Node:
    """An activation value flowing through the tape."""

    __slots__ = ("value", "grad", "constant")

    def __init__(self, value: np.ndarray, constant: bool = False):
        self.value = value
        self.grad = None
        self.constant = constant


class Tape:
    """Recorded op sequence with enough saved state for one backward pass."""

    def __init__(self):
        self._records = []
        self._param_grads: dict[int, np.ndarray] = {}

    def add(self, outputs, parents, vjp) -> None:
        self._records.append((outputs, parents, vjp))

    def add_param_grad(self, param: np.ndarray, grad: np.ndarray) -> None:
        key = id(param)
        if key in self._param_grads:
            self._param_grads[key] = self._param_grads[key] + grad
        else:
            self._param_grads[key] = grad

    def grad_for(self, param: np.ndarray):
        return self._param_grads.get(id(param))

    def backward(self, root: Node, seed=None) -> None:
        if not self._records:
            raise RuntimeError("backward called before any recorded forward op")
        root.grad = np.ones_like(root.value) if seed is None else seed
        for outputs, parents, vjp in reversed(self._records):
            grads_out = tuple(o.grad for o in outputs)
            if all(g is None for g in grads_out):
                continue
            grads_out = tuple(
                np.zeros_like(o.value) if g is None else g
                for o, g in zip(outputs, grads_out)
            )
            for parent, grad in zip(parents, vjp(grads_out)):
                if grad is None or parent.constant:
                    continue
                parent.grad = grad if parent.grad is None else parent.grad + grad


# ---------------------------------------------------------------------------
# traced ops
# ---------------------------------------------------------------------------

def conv2d(t: Tape | None, x: Node, p: ops.ConvParams) -> Node:
    out = Node(ops.conv2d(x.value, p))
    if t is not None:
        x_val = x.value

        def vjp(gys):
            gx, gw = ops.conv2d_backward(x_val, p, gys[0], need_input_grad=not x.constant)
            t.add_param_grad(p.weights, gw)
            return (gx,)

        t.add((out,), (x,), vjp)
    return out


def batch_norm(t: Tape | None, x: Node, n: ops.NormParams, training: bool) -> Node:
    if training:
        mean, var = ops.bn_batch_stats(x.value)
        count = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]
        ops.bn_update_running(n, mean, var, count)
    else:
        mean, var = n.running_mean, n.running_var
    out = Node(ops.bn_apply(x.value, n.gamma, n.beta, mean, var, n.eps))
    if t is not None:
        x_val = x.value

        def vjp(gys):
            gx, ggamma, gbeta = ops.batch_norm_backward(
                x_val, n.gamma, mean, var, n.eps, gys[0], training
            )
            t.add_param_grad(n.gamma, ggamma)
            t.add_param_grad(n.beta, gbeta)
            return (gx,)

        t.add((out,), (x,), vjp)
    return out


def relu(t: Tape | None, x: Node) -> Node:
    out = Node(ops.relu(x.value))
    if t is not None:
        x_val = x.value
        t.add((out,), (x,), lambda gys: (ops.relu_backward(x_val, gys[0]),))
    return out


def global_avg_pool(t: Tape | None, x: Node) -> Node:
    out = Node(ops.global_avg_pool(x.value))
    if t is not None:
        shape = x.value.shape
        t.add((out,), (x,), lambda gys: (ops.global_avg_pool_backward(shape, gys[0]),))
    return out


def flatten(t: Tape | None, x: Node) -> Node:
    """(N, C, 1, 1) -> (N, C) for the classifier head."""
    shape = x.value.shape
    out = Node(x.value.reshape(shape[0], -1))
    if t is not None:
        t.add((out,), (x,), lambda gys: (gys[0].reshape(shape),))
    return out


def linear(t: Tape | None, x: Node, w: np.ndarray, b: np.ndarray) -> Node:
    out = Node(ops.linear(x.value, w, b))
    if t is not None:
        x_val = x.value

        def vjp(gys):
            gx, gw, gb = ops.linear_backward(x_val, w, gys[0])
            t.add_param_grad(w, gw)
            t.add_param_grad(b, gb)
            return (gx,)

        t.add((out,), (x,), vjp)
    return out


def concat_channels(t: Tape | None, a: Node, b: Node) -> Node:
    out = Node(ops.concat_channels(a.value, b.value))
    if t is not None:
        ca = a.value.shape[1]
        t.add((out,), (a, b), lambda gys: (gys[0][:, :ca], gys[0][:, ca:]))
    return out


def channel_split(t: Tape | None, x: Node, r: float) -> tuple[Node, Node]:
    bank_val, branch_val = channel_ops.channel_split(x.value, r)
    bank, branch = Node(bank_val), Node(branch_val)
    if t is not None:
        t.add(
            (bank, branch),
            (x,),
            lambda gys: (np.concatenate(gys, axis=1),),
        )
    return bank, branch


def channel_shuffle(t: Tape | None, x: Node) -> Node:
    perm = channel_ops.shuffle_permutation(x.value.shape[1])
    out = Node(perm.apply(x.value))
    if t is not None:
        inv = perm.inverse()
        t.add((out,), (x,), lambda gys: (inv.apply(gys[0]),))
    return out


def channel_crossover(t: Tape | None, branch: Node, bank: Node) -> tuple[Node, Node]:
    branch2_val, bank2_val = channel_ops.channel_crossover(branch.value, bank.value)
    branch2, bank2 = Node(branch2_val), Node(bank2_val)
    if t is not None:
        x, b = branch.value.shape[1], bank.value.shape[1]
        d, w = channel_ops.crossover_counts(x, b)

        def vjp(gys):
            g_branch2, g_bank2 = gys
            g_branch = np.concatenate((g_branch2[:, w:], g_bank2[:, b - w:]), axis=1)
            g_bank = np.concatenate((g_branch2[:, :w], g_bank2[:, : b - w]), axis=1)
            return g_branch, g_bank

        t.add((branch2, bank2), (branch, bank), vjp)
    return branch2, bank2


def softmax_cross_entropy(t: Tape | None, logits: Node, labels: np.ndarray) -> Node:
    """Mean softmax cross-entropy; returns a 0-d float64 node."""
    z = logits.value.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    out = Node(np.float64(loss))
    if t is not None:
        probs = np.exp(logp)

        def vjp(gys):
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
            g *= float(gys[0]) / n
            return (g.astype(logits.value.dtype),)

        t.add((out,), (logits,), vjp)
    return out
