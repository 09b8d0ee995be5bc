"""Pair similarity scores and their fusion.

Two raw scores per pair: cosine similarity of the pooled embeddings, and a
learned binary head on the dual-attention features.  The head multiplies
the two utterances' f_self difference with their f_mutual difference
elementwise, normalizes, and maps to a sigmoid probability; negating both
differences cancels, so the score is exactly order-invariant.

Raw scores are z-normalized with statistics sampled from training pairs and
averaged into the fused score.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BatchNorm, Dense, Module
from .errors import NumericError

STD_FLOOR = 1e-6


def cosine_score(e1, e2):
    """Cosine similarity in [-1, 1]; zero vectors are an error."""
    a = np.asarray(e1.data if isinstance(e1, T.Tensor) else e1, dtype=np.float64).reshape(-1)
    b = np.asarray(e2.data if isinstance(e2, T.Tensor) else e2, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine_score: zero-norm embedding")
    return float(a @ b / (na * nb))


class BinaryHeadParams(Module):
    """Normalization, train-only dropout, and a dense layer to one logit."""

    def __init__(self, rng, num_f, dropout_rate=0.5, dtype=np.float32):
        self.bn = BatchNorm(num_f, dtype)
        self.fc = Dense(rng, num_f, 1, dtype=dtype)
        self.dropout_rate = dropout_rate


def pair_difference_product(f_self_1, f_self_2, f_mutual_1, f_mutual_2):
    """(f_self1 - f_self2) * (f_mutual1 - f_mutual2), elementwise."""
    return T.mul(T.sub(f_self_1, f_self_2), T.sub(f_mutual_1, f_mutual_2))


def binary_head_scores(x, params, mode="infer", rng=None):
    """Head forward on (..., num_f) difference products -> (...) scores."""
    h = params.bn(x, mode)
    if mode == "train" and params.dropout_rate > 0:
        if rng is None:
            raise NumericError("train-mode dropout needs an rng")
        keep = 1.0 - params.dropout_rate
        mask = (rng.random(h.data.shape) < keep).astype(h.data.dtype) / keep
        h = T.mul(h, T.Tensor(mask))
    lead = h.data.shape[:-1]
    flat = T.reshape(h, (-1, h.data.shape[-1]))
    logit = params.fc(flat)
    return T.reshape(T.sigmoid(logit), lead)


def binary_score(pa, params, mode="infer", rng=None):
    """Similarity of one attended pair, in (0, 1)."""
    x = pair_difference_product(
        pa.u1.f_self, pa.u2.f_self, pa.u1.f_mutual, pa.u2.f_mutual
    )
    x = T.reshape(x, (1, x.data.shape[-1]))
    return float(binary_head_scores(x, params, mode, rng).data[0])


@dataclass
class NormStats:
    mean_cos: float
    std_cos: float
    mean_bin: float
    std_bin: float

    def to_dict(self):
        return {
            "mean_cos": self.mean_cos,
            "std_cos": self.std_cos,
            "mean_bin": self.mean_bin,
            "std_bin": self.std_bin,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean_cos"], d["std_cos"], d["mean_bin"], d["std_bin"])


def _floored_std(values, name):
    std = float(np.std(values))  # population formula
    if std < STD_FLOOR:
        warnings.warn(f"{name} scores are (near-)constant; std floored at {STD_FLOOR}")
        return STD_FLOOR
    return std


def norm_stats_from_scores(cos_scores, bin_scores):
    return NormStats(
        float(np.mean(cos_scores)),
        _floored_std(cos_scores, "cosine"),
        float(np.mean(bin_scores)),
        _floored_std(bin_scores, "binary"),
    )


def calibrate_norm_stats(model, corpus, n_pairs=10000, seed=0):
    """Score-distribution statistics from sampled training pairs.

    Pairs are drawn uniformly with replacement from all corpus utterances;
    each utterance is embedded once and reused across pairs.
    """
    if n_pairs < 2:
        raise NumericError(f"need at least 2 calibration pairs, got {n_pairs}")
    utts = [u for speaker in corpus.utterances for u in speaker]
    records = [model.embed_utterance(u) for u in utts]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 2)))
    cos_scores = np.empty(n_pairs)
    bin_scores = np.empty(n_pairs)
    for k in range(n_pairs):
        i = int(rng.integers(len(records)))
        j = int(rng.integers(len(records)))
        cos_scores[k], bin_scores[k] = model.score_records(records[i], records[j])
    return norm_stats_from_scores(cos_scores, bin_scores)


def fuse_scores(cos, binary, ns):
    """Mean of the two z-normalized scores; increasing in both arguments."""
    return 0.5 * ((cos - ns.mean_cos) / ns.std_cos + (binary - ns.mean_bin) / ns.std_bin)
