"""Query reconstruction from score-weighted pair features, attribute
classification, and the loss bundle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kprn.diffmath import add_lstm_params, lstm_sequence
from kprn.diffmath import tensor as T
from kprn.errors import ContractViolation, NumericDomainError


def add_decoder_params(store, vocab_size, input_dim, hidden, rng, prefix="dec"):
    store.add(f"{prefix}.embed", (vocab_size, input_dim), rng, fan_in=input_dim)
    add_lstm_params(store, f"{prefix}.lstm", input_dim, hidden, rng)
    store.add(f"{prefix}.out.W", (hidden, vocab_size), rng)
    store.add(f"{prefix}.out.b", (vocab_size,), rng, fan_in=hidden)


def add_fuse_params(store, in_dim, out_dim, rng, prefix="fuse"):
    store.add(f"{prefix}.W", (in_dim, out_dim), rng)
    store.add(f"{prefix}.b", (out_dim,), rng, fan_in=in_dim)


def add_attribute_params(store, in_dim, n_labels, rng, prefix="attr"):
    store.add(f"{prefix}.W", (in_dim, n_labels), rng)
    store.add(f"{prefix}.b", (n_labels,), rng, fan_in=in_dim)


def fuse_pair(v_s, v_o, params, prefix="fuse"):
    """``relu(W [v_s; v_o] + b)`` per pair row.

    ``v_s``/``v_o`` are (P, d) tensors or arrays; a (1, d) ``v_o`` is
    broadcast over the pairs.
    """
    v_s = v_s if isinstance(v_s, T.Tensor) else T.constant(v_s)
    v_o = v_o if isinstance(v_o, T.Tensor) else T.constant(v_o)
    if v_o.shape[0] != v_s.shape[0]:
        v_o = T.mul(T.constant(np.ones((v_s.shape[0], 1))), v_o)
    W = params[f"{prefix}.W"]
    if v_s.shape[1] + v_o.shape[1] != W.shape[0]:
        raise ContractViolation(
            f"fuse_pair: {v_s.shape[1]}+{v_o.shape[1]} inputs for W of shape {W.shape}"
        )
    return T.relu(T.add(T.matmul(T.concat([v_s, v_o]), W), params[f"{prefix}.b"]))


def aggregate(r_vis, final):
    """``sum_i S_t^i r_vis^i`` as a (1, D) tensor."""
    P = r_vis.shape[0]
    if final.shape != (P,):
        raise ContractViolation(f"aggregate: {final.shape} scores for {P} pair features")
    return T.matmul(T.reshape(final, (1, P)), r_vis)


def reconstruction_loss(f_vis, target_ids, vocab, params, prefix="dec"):
    """Teacher-forced decoding of the query from ``f_vis``.

    Step 0 feeds ``f_vis``; then ``<start>, w_1 .. w_T`` are fed and the
    outputs after them are scored against ``w_1 .. w_T, <end>``. Returns the
    mean negative log-likelihood per predicted token.
    """
    if len(target_ids) == 0:
        raise ContractViolation("reconstruction_loss: empty target")
    emb = params[f"{prefix}.embed"]
    if f_vis.shape != (1, emb.shape[1]):
        raise ContractViolation(f"reconstruction_loss: f_vis {f_vis.shape} vs decoder input {emb.shape[1]}")
    # Step 0 consumes f_vis; its output predicts nothing.
    xs = T.concat([f_vis, T.embedding(emb, [vocab.start] + list(target_ids))], axis=0)
    hs = lstm_sequence(xs, params, f"{prefix}.lstm")
    outs = T.take_rows(hs, list(range(1, len(target_ids) + 2)))
    logits = T.add(T.matmul(outs, params[f"{prefix}.out.W"]), params[f"{prefix}.out.b"])
    return T.nll_log_softmax(logits, list(target_ids) + [vocab.end])


def attribute_loss(cnn_rows, final, targets, weights, params, prefix="attr"):
    """Weighted multi-label BCE on the score-weighted subject CNN feature.

    ``cnn_rows`` (P, dc) holds the CNN features of the pair subjects,
    ``targets`` the multi-hot label vector, ``weights`` the per-label weights.
    Queries without attribute words contribute a constant zero.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if not targets.any():
        return T.constant(0.0)
    pooled = aggregate(T.constant(cnn_rows), final)
    logits = T.add(T.matmul(pooled, params[f"{prefix}.W"]), params[f"{prefix}.b"])
    return T.weighted_bce(T.reshape(logits, (targets.size,)), targets, weights)


def label_weights(frequencies):
    """Reciprocal label frequencies, rescaled to mean 1."""
    f = np.asarray(frequencies, dtype=np.float64)
    if (f <= 0).any():
        raise ContractViolation("label frequencies must be positive")
    w = 1.0 / f
    return w / w.mean()


@dataclass
class LossBundle:
    loss_sub: float
    loss_obj: float
    loss_lan: float
    loss_att: float
    total: float
    tensor: T.Tensor | None = None  # differentiable total, when built from tensors

    def as_row(self):
        return [self.loss_sub, self.loss_obj, self.loss_lan, self.loss_att, self.total]


COMPONENTS = ("loss_sub", "loss_obj", "loss_lan", "loss_att")


def total_loss(loss_sub, loss_obj, loss_lan, loss_att):
    """Sum of the four losses. Accepts tensors or floats; checks finiteness
    and names the offending part."""
    parts = dict(zip(COMPONENTS, (loss_sub, loss_obj, loss_lan, loss_att)))
    values = {}
    for name, v in parts.items():
        x = v.item() if isinstance(v, T.Tensor) else float(v)
        if not math.isfinite(x):
            raise NumericDomainError(f"{name} is not finite ({x})")
        values[name] = x
    tensors = [v if isinstance(v, T.Tensor) else T.constant(float(v)) for v in parts.values()]
    total_t = T.add(T.add(tensors[0], tensors[1]), T.add(tensors[2], tensors[3]))
    return LossBundle(**values, total=total_t.item(), tensor=total_t)
