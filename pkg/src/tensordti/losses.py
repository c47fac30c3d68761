"""Training objectives: BCE, two contrastive variants, confidence
calibration, token reconstruction cross-entropy, MSE, and the weighted
composite.

Every loss is mean-reduced over the batch and returns a scalar node on the
caller's tape, so gradients flow wherever the inputs were recorded. Plain
arrays are accepted for convenience and treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import Node, Tape


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _as_row(x, n: int | None = None) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if n is not None and a.shape[1] != n:
        raise ConfigError(f"expected {n} batch entries, got {a.shape[1]}")
    return a


def bce_with_logits(tape: Tape, logits, labels) -> Node:
    """-[y log sigma(x) + (1-y) log(1-sigma(x))], stable, batch mean."""
    logits = _as_node(tape, logits)
    y = _as_row(labels, logits.value.shape[1])
    return tape.mean_all(tape.bce_logits(logits, y))


def contrastive_cosine(tape: Tape, e_d, e_p, labels, margin: float) -> Node:
    """Margin loss on cosine distance d = 1 - cos(e_d, e_p):
    mean over pairs of y*d^2 + (1-y)*max(0, m-d)^2."""
    if margin <= 0:
        raise ConfigError("cosine margin must be > 0")
    e_d = _as_node(tape, e_d)
    e_p = _as_node(tape, e_p)
    y = _as_row(labels, e_d.value.shape[1])
    d = tape.affine(tape.cosine_cols(e_d, e_p), -1.0, 1.0)
    pos = tape.mul(tape.constant(y), tape.mul(d, d))
    hinge = tape.relu(tape.affine(d, -1.0, margin))
    neg = tape.mul(tape.constant(1.0 - y), tape.mul(hinge, hinge))
    return tape.mean_all(tape.add(pos, neg))


def _col_l2(tape: Tape, a: Node, b: Node) -> Node:
    diff = tape.sub(a, b)
    return tape.sqrt(tape.sum_rows(tape.mul(diff, diff)))


def contrastive_triplet(tape: Tape, f_d, f_p_pos, f_p_neg, margin: float) -> Node:
    """Hinge over triplets: mean of max(0, margin + ||f_d-f_p|| - ||f_d-f_p_neg||)."""
    if margin <= 0:
        raise ConfigError("triplet margin must be > 0")
    f_d = _as_node(tape, f_d)
    f_p_pos = _as_node(tape, f_p_pos)
    f_p_neg = _as_node(tape, f_p_neg)
    gap = tape.sub(_col_l2(tape, f_d, f_p_pos), _col_l2(tape, f_d, f_p_neg))
    return tape.mean_all(tape.relu(tape.affine(gap, 1.0, margin)))


def confidence_loss(tape: Tape, conf, labels, probs) -> Node:
    """(c - |y - p|)^2, batch mean. The target |y - p| is a constant, so no
    gradient reaches the classifier through this loss."""
    conf = _as_node(tape, conf)
    y = _as_row(labels, conf.value.shape[1])
    p = _as_row(probs, conf.value.shape[1])
    err = tape.sub(conf, tape.constant(np.abs(y - p)))
    return tape.mean_all(tape.mul(err, err))


def reconstruction_loss(tape: Tape, logits, token_ids, pad_mask, n_positions: int, vocab_size: int) -> Node:
    """Softmax cross-entropy averaged over non-PAD positions per sample,
    then over the batch."""
    logits = _as_node(tape, logits)
    per_sample = tape.token_xent(logits, token_ids, pad_mask, n_positions, vocab_size)
    return tape.mean_all(per_sample)


def mse_loss(tape: Tape, pred, target) -> Node:
    pred = _as_node(tape, pred)
    target = _as_node(tape, target)
    diff = tape.sub(pred, target)
    return tape.mean_all(tape.mul(diff, diff))


@dataclass
class LossTerms:
    """Scalar nodes from one forward pass; None where a head was not run."""

    bce: Node | None = None
    con: Node | None = None
    conf: Node | None = None
    recon: Node | None = None
    mse: Node | None = None


@dataclass
class LossBreakdown:
    l_bce: float
    l_con: float
    l_conf: float
    l_recon: float
    l_total: float
    l_mse: float | None = None


def composite_loss(tape: Tape, terms: LossTerms, config) -> tuple[Node, LossBreakdown]:
    """alpha_cls*L_cls + alpha_con*L_con + alpha_conf*L_conf + alpha_recon*L_recon.

    In regression mode the classification term is the MSE and the
    contrastive term is zeroed.
    """
    weights = (config.alpha_cls, config.alpha_con, config.alpha_conf, config.alpha_recon)
    if any(w < 0 for w in weights):
        raise ConfigError(f"loss weights must be >= 0, got {weights}")
    regression = getattr(config, "mode", "classification") == "regression"

    head = terms.mse if regression else terms.bce
    pairs = [
        (config.alpha_cls, head, "classification"),
        (0.0 if regression else config.alpha_con, terms.con, "contrastive"),
        (config.alpha_conf, terms.conf, "confidence"),
        (config.alpha_recon, terms.recon, "reconstruction"),
    ]
    total: Node | None = None
    for w, term, name in pairs:
        if w == 0.0:
            continue
        if term is None:
            raise ConfigError(f"{name} loss weighted {w} but its term is missing")
        scaled = tape.affine(term, w)
        total = scaled if total is None else tape.add(total, scaled)
    if total is None:
        total = tape.constant(0.0)

    def val(node):
        return 0.0 if node is None else node.item()

    return total, LossBreakdown(
        l_bce=0.0 if regression else val(terms.bce),
        l_con=0.0 if regression else val(terms.con),
        l_conf=val(terms.conf),
        l_recon=val(terms.recon),
        l_total=total.item(),
        l_mse=val(terms.mse) if regression else None,
    )
