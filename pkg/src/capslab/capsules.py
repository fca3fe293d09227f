"""Capsule math: squashing, vote transformation, dynamic routing,
margin loss, and class-conditional masking.

Shapes follow one convention throughout: a batch of M input capsules of
width D_in produces votes of shape (B, M, N, D_out) for N classes, and
routing reduces the M axis to output capsules (B, N, D_out).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _result
from .errors import ShapeError


@dataclass(frozen=True)
class MarginLossParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.m_minus < self.m_plus < 1.0:
            raise ValueError(f"margins must satisfy 0 < m_minus < m_plus < 1, got {self}")


@dataclass
class RoutingState:
    """Final-iteration routing byproducts (plain arrays, no gradient tape)."""

    b: np.ndarray              # log priors plus accumulated agreement
    c: np.ndarray              # coupling coefficients of the last iteration
    t: int                     # number of iterations performed
    agreement_sum: np.ndarray  # sum over iterations of v . vote


@dataclass
class OutputCapsules:
    v: Tensor         # (B, N, D_out)
    lengths: Tensor   # (B, N)


def squash(s):
    """Scale each last-axis vector to length |s|^2 / (1 + |s|^2), keeping direction.

    The zero vector maps to zero (the limit value), with a zero gradient.
    """
    x = s.data
    n2 = np.sum(x * x, axis=-1, keepdims=True)
    norm = np.sqrt(n2)
    denom = np.where(norm > 0, norm, 1.0)
    scale = n2 / (1.0 + n2) / denom
    out = x * scale

    def vjp(g):
        gdot = np.sum(g * x, axis=-1, keepdims=True)
        coef = np.where(n2 > 0, (1.0 - n2) / ((1.0 + n2) ** 2 * denom), 0.0)
        return (g * scale + x * (gdot * coef),)

    return _result(out, (s,), vjp, "squash")


def primary_capsules(feature_maps, d_in):
    """Regroup (B, C, H, W) feature maps into (B, M, d_in) capsules.

    Capsule (g, h, w) collects the d_in consecutive channels of group g
    at one spatial location; M = (C / d_in) * H * W.  The regrouping is
    a pure reshape/transpose and round-trips losslessly.
    """
    b, c, h, w = feature_maps.data.shape
    if c % d_in != 0:
        raise ShapeError(f"channel count {c} not divisible by capsule width {d_in}")
    groups = c // d_in
    x = ad.reshape(feature_maps, (b, groups, d_in, h, w))
    x = ad.transpose(x, (0, 1, 3, 4, 2))
    return ad.reshape(x, (b, groups * h * w, d_in))


def transform_votes(poses, matrices, num_classes, d_out):
    """Per-capsule matrix product producing votes (B, M, N, D_out).

    ``matrices`` has shape (M, D_in, N*D_out), or (1, D_in, N*D_out) for
    the shared variant, in which case the single matrix applies to every
    capsule and its gradient sums over all M uses.
    """
    b, m, d_in = poses.data.shape
    mw, dw, k = matrices.data.shape
    if dw != d_in or k != num_classes * d_out:
        raise ShapeError(
            f"transform_votes: poses {poses.data.shape} vs matrices {matrices.data.shape} "
            f"(expect last dim {num_classes * d_out})"
        )
    if mw not in (1, m):
        raise ShapeError(f"transform_votes: {mw} matrices for {m} capsules")

    if mw == 1:
        w2 = matrices.data[0]
        p2 = poses.data.reshape(b * m, d_in)
        out = p2 @ w2

        def vjp(g):
            g2 = g.reshape(b * m, k)
            return (g2 @ w2.T).reshape(b, m, d_in), (p2.T @ g2)[None]

        flat = _result(out.reshape(b, m, k), (poses, matrices), vjp, "votes_shared")
    else:
        pt = np.ascontiguousarray(poses.data.transpose(1, 0, 2))  # (M, B, D_in)
        out = np.matmul(pt, matrices.data)  # (M, B, K)

        def vjp(g):
            gt = np.ascontiguousarray(g.transpose(1, 0, 2))  # (M, B, K)
            gposes = np.matmul(gt, matrices.data.transpose(0, 2, 1)).transpose(1, 0, 2)
            gw = np.matmul(pt.transpose(0, 2, 1), gt)
            return np.ascontiguousarray(gposes), gw

        flat = _result(
            np.ascontiguousarray(out.transpose(1, 0, 2)), (poses, matrices), vjp, "votes"
        )
    return ad.reshape(flat, (b, m, num_classes, d_out))


def _weighted_vote_sum(c, votes):
    """s[b,n,d] = sum_m c[b,m,n] * votes[b,m,n,d] on (B,M,N,*) operands.

    float64 keeps the sequential einsum contraction (bitwise-stable for
    oracle comparisons); float32 routes through ``_weighted_vote_sum_t``.
    """
    out = np.einsum("bmn,bmnd->bnd", c.data, votes.data)

    def vjp(g):
        gc = np.einsum("bnd,bmnd->bmn", g, votes.data)
        gu = np.einsum("bmn,bnd->bmnd", c.data, g)
        return gc, gu

    return _result(out, (c, votes), vjp, "route_weighted_sum")


def _weighted_vote_sum_t(c_t, votes_t):
    """s[b,n,d] = sum_m c_t[b,n,m] * votes_t[b,n,m,d] via batched matmul."""
    out = np.matmul(c_t.data[:, :, None, :], votes_t.data)[:, :, 0, :]

    def vjp(g):
        gc = np.matmul(votes_t.data, g[:, :, :, None])[:, :, :, 0]
        gu = c_t.data[:, :, :, None] * g[:, :, None, :]
        return gc, gu

    return _result(out, (c_t, votes_t), vjp, "route_weighted_sum_t")


def _vote_agreement(v, votes):
    """a[b,m,n] = sum_d v[b,n,d] * votes[b,m,n,d]."""
    out = np.einsum("bnd,bmnd->bmn", v.data, votes.data)

    def vjp(g):
        gv = np.einsum("bmn,bmnd->bnd", g, votes.data)
        gu = np.einsum("bmn,bnd->bmnd", g, v.data)
        return gv, gu

    return _result(out, (v, votes), vjp, "route_agreement")


def _vote_agreement_t(v, votes_t):
    """a[b,n,m] = sum_d v[b,n,d] * votes_t[b,n,m,d] via batched matmul."""
    out = np.matmul(votes_t.data, v.data[:, :, :, None])[:, :, :, 0]

    def vjp(g):
        gv = np.matmul(g[:, :, None, :], votes_t.data)[:, :, 0, :]
        gu = g[:, :, :, None] * v.data[:, :, None, :]
        return gv, gu

    return _result(out, (v, votes_t), vjp, "route_agreement_t")


def dynamic_routing(votes, iterations, b_init=None, squash_output=True,
                    detach_coefficients=False):
    """Iterative routing by agreement over votes (B, M, N, D_out).

    Iteration t forms s from the current coupling coefficients, squashes
    it, and re-softmaxes the coefficients from the log priors plus all
    agreements seen so far.  Returns the final output capsules and the
    final routing state.  Gradients flow through the coefficients of the
    unrolled graph unless ``detach_coefficients`` is set.
    """
    if iterations < 1:
        raise ValueError(f"routing iterations must be >= 1, got {iterations}")
    b, m, n, d_out = votes.data.shape
    if b_init is None:
        b_init = np.zeros((b, m, n), dtype=votes.data.dtype)
    else:
        b_init = np.asarray(b_init, dtype=votes.data.dtype)
        if b_init.shape != (b, m, n):
            raise ShapeError(f"b_init shape {b_init.shape} != {(b, m, n)}")

    # float32 training works in a capsule-transposed (B,N,M,*) layout so
    # the per-iteration contractions run as batched matmuls; float64
    # keeps the (B,M,N,*) einsum form whose summation order matches a
    # straight-line transcription bitwise.
    fast = votes.data.dtype == np.float32
    if fast:
        u = ad.transpose(votes, (0, 2, 1, 3))  # (B,N,M,D)
        prior = Tensor(np.ascontiguousarray(b_init.transpose(0, 2, 1)))  # (B,N,M)
        softmax_axis = 1
        weighted_sum, agreement = _weighted_vote_sum_t, _vote_agreement_t
    else:
        u = votes
        prior = Tensor(b_init)
        softmax_axis = -1
        weighted_sum, agreement = _weighted_vote_sum, _vote_agreement

    agreements = None
    c = ad.softmax(prior, axis=softmax_axis)
    for t in range(1, iterations + 1):
        if t > 1:
            a = agreement(v, u)
            agreements = a if agreements is None else ad.add(agreements, a)
            c = ad.softmax(ad.add(agreements, prior), axis=softmax_axis)
        if detach_coefficients:
            c = c.detach()
        s = weighted_sum(c, u)
        v = squash(s) if squash_output else s

    # final agreement enters the reported state only, not the loss path
    if fast:
        last = np.matmul(u.data, v.data[:, :, :, None])[:, :, :, 0]
    else:
        last = np.einsum("bnd,bmnd->bmn", v.data, votes.data)
    agreement_sum = last if agreements is None else agreements.data + last
    c_state = c.data
    if fast:
        agreement_sum = np.ascontiguousarray(agreement_sum.transpose(0, 2, 1))
        c_state = np.ascontiguousarray(c_state.transpose(0, 2, 1))
    state = RoutingState(
        b=b_init + agreement_sum,
        c=c_state.copy(),
        t=iterations,
        agreement_sum=agreement_sum,
    )
    return OutputCapsules(v=v, lengths=ad.l2_norm_lastaxis(v)), state


def no_routing_average(votes, squash_output=True):
    """Uniform vote average: v_j = squash(mean over capsules of the votes)."""
    s = ad.reduce_mean(votes, axes=(1,))
    v = squash(s) if squash_output else s
    return OutputCapsules(v=v, lengths=ad.l2_norm_lastaxis(v))


def margin_loss(lengths, targets, params=MarginLossParams()):
    """Two-sided hinge-squared loss on capsule lengths.

    ``targets`` is a {0,1} multi-hot array (B, N); positives may number
    more than one per row (two for overlapping-digit training).  Summed
    over classes, averaged over the batch.
    """
    targets = np.asarray(targets)
    if targets.shape != lengths.data.shape:
        raise ShapeError(f"margin_loss: lengths {lengths.data.shape} vs targets {targets.shape}")
    t = targets.astype(lengths.data.dtype)
    pos = ad.relu(ad.add_scalar(ad.mul_scalar(lengths, -1.0), params.m_plus))
    neg = ad.relu(ad.add_scalar(lengths, -params.m_minus))
    per_class = ad.add(
        ad.mul(ad.square(pos), t),
        ad.mul_scalar(ad.mul(ad.square(neg), 1.0 - t), params.lam),
    )
    return ad.mul_scalar(ad.reduce_sum(per_class), 1.0 / lengths.data.shape[0])


def mask_capsules(v, target_class=None):
    """Zero all but one capsule per sample and flatten to (B, N*D_out).

    ``target_class`` selects the kept capsule: an int (whole batch), a
    per-sample int array, or None to keep the longest (predicted) capsule.
    """
    b, n, d_out = v.data.shape
    if target_class is None:
        lengths = np.sqrt(np.sum(v.data * v.data, axis=-1))
        keep = lengths.argmax(axis=1)
    else:
        keep = np.broadcast_to(np.asarray(target_class, dtype=np.int64), (b,))
        if keep.min() < 0 or keep.max() >= n:
            raise ValueError(f"target class out of range [0, {n}): {np.unique(keep)}")
    mask = np.zeros((b, n, 1), dtype=v.data.dtype)
    mask[np.arange(b), keep] = 1.0
    masked = ad.mul(v, np.broadcast_to(mask, v.data.shape).copy())
    return ad.reshape(masked, (b, n * d_out))
