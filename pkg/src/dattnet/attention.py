"""Self and mutual attention over frame-level features.

Both kinds produce a T' x num_f weight matrix, column-stochastic over time,
and collapse f_id to a single vector per utterance.  Self-attention scales
each frame of f_att by the utterance's own time average; mutual attention
scales it by the partner utterance's self-attended vector, so the weights
highlight frames that are discriminative for this particular pair.  One
parameter set serves both utterances of a pair.

Grid variants evaluate every (i, j) combination of two utterance groups in
one broadcast pass; training consumes all B^2 pairs of a batch that way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BatchNorm, Dense, Module
from .errors import ShapeError


class AttentionParams(Module):
    """Two-layer dense stacks mapping f_raw to attention logits.

    Separate stacks feed the self and mutual paths by default; `shared`
    collapses them to one parameter set.
    """

    def __init__(self, rng, c_in, num_f, shared=False, dtype=np.float32):
        self.shared = shared
        self.self_fc1 = Dense(rng, c_in, num_f, dtype=dtype)
        self.self_bn = BatchNorm(num_f, dtype)
        self.self_fc2 = Dense(rng, num_f, num_f, dtype=dtype)
        if not shared:
            self.mutual_fc1 = Dense(rng, c_in, num_f, dtype=dtype)
            self.mutual_bn = BatchNorm(num_f, dtype)
            self.mutual_fc2 = Dense(rng, num_f, num_f, dtype=dtype)

    def stack(self, which):
        if which not in ("self", "mutual"):
            raise ShapeError(f"unknown attention stack {which!r}")
        if which == "self" or self.shared:
            return self.self_fc1, self.self_bn, self.self_fc2
        return self.mutual_fc1, self.mutual_bn, self.mutual_fc2


def compute_f_att(f_raw, params, which, mode):
    """Per-frame two-layer transform of f_raw; no cross-frame mixing."""
    fc1, bn, fc2 = params.stack(which)
    h = bn(fc1(f_raw), mode, act="relu")
    return fc2(h)


def _time_axis(t):
    if t.data.ndim < 2:
        raise ShapeError(f"attention input must be (.., T', num_f), got {t.data.shape}")
    return t.data.ndim - 2


def self_attention(f_att, f_id):
    """Weights from an utterance's own average activation.

    W[t, c] = softmax_t(f_att[t, c] * mean_t(f_att[., c])); the result
    pools f_id as f_self[c] = sum_t W[t, c] * f_id[t, c].
    """
    if f_att.data.shape != f_id.data.shape:
        raise ShapeError(f"f_att {f_att.data.shape} vs f_id {f_id.data.shape}")
    axis = _time_axis(f_att)
    scaled = T.mul(f_att, T.mean_over(f_att, axis=axis, keepdims=True))
    w = T.softmax_over_axis(scaled, axis)
    f_self = T.sum_over(T.mul(w, f_id), axis=axis)
    return w, f_self


def mutual_attention(f_att_1, f_id_1, f_self_2):
    """Weights for utterance 1 driven by utterance 2's pooled vector."""
    if f_att_1.data.shape != f_id_1.data.shape:
        raise ShapeError(f"f_att {f_att_1.data.shape} vs f_id {f_id_1.data.shape}")
    axis = _time_axis(f_att_1)
    if f_self_2.data.shape[-1] != f_att_1.data.shape[-1]:
        raise ShapeError(
            f"partner vector width {f_self_2.data.shape} does not match {f_att_1.data.shape}"
        )
    scaled = T.mul(f_att_1, f_self_2)  # broadcasts over the time axis
    w = T.softmax_over_axis(scaled, axis)
    f_mutual_1 = T.sum_over(T.mul(w, f_id_1), axis=axis)
    return w, f_mutual_1


def mutual_attention_grid(f_att_1, f_id_1, f_self_2):
    """All-pairs mutual attention for two utterance groups.

    f_att_1/f_id_1: (B1, T', num_f); f_self_2: (B2, num_f).  Returns
    (B1, B2, num_f) where [i, j] pools utterance i against partner j.
    """
    b1, t, nf = f_att_1.data.shape
    b2 = f_self_2.data.shape[0]
    att = T.reshape(f_att_1, (b1, 1, t, nf))
    fid = T.reshape(f_id_1, (b1, 1, t, nf))
    partner = T.reshape(f_self_2, (1, b2, 1, nf))
    w = T.softmax_over_axis(T.mul(att, partner), 2)
    return T.sum_over(T.mul(w, fid), axis=2)


@dataclass
class UtteranceAttention:
    w_self: T.Tensor
    f_self: T.Tensor
    w_mutual: T.Tensor
    f_mutual: T.Tensor


@dataclass
class PairAttention:
    u1: UtteranceAttention
    u2: UtteranceAttention


def _as_frames(x):
    if x.data.ndim == 3:
        if x.data.shape[0] != 1:
            raise ShapeError(f"expected a single utterance, got batch {x.data.shape}")
        return T.reshape(x, x.data.shape[1:])
    return x


def attend_pair(u1, u2, params, mode="infer"):
    """Full dual-attention pass for one utterance pair (any T' lengths)."""
    out = []
    raws = [_as_frames(u.f_raw) for u in (u1, u2)]
    ids = [_as_frames(u.f_id) for u in (u1, u2)]
    atts_self = [compute_f_att(r, params, "self", mode) for r in raws]
    atts_mutual = [compute_f_att(r, params, "mutual", mode) for r in raws]
    selfs = [self_attention(a, i) for a, i in zip(atts_self, ids)]
    for k, other in ((0, 1), (1, 0)):
        w_m, f_m = mutual_attention(atts_mutual[k], ids[k], selfs[other][1])
        out.append(UtteranceAttention(selfs[k][0], selfs[k][1], w_m, f_m))
    return PairAttention(out[0], out[1])
