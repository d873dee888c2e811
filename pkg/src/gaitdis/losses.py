"""Training objectives: cross reconstruction, pose similarity, canonical
consistency, and the identity losses over LSTM outputs.

All functions are pure in their tensor inputs and differentiable end to end.
Sequence tensors are time-major: (T, D) for a single clip or (T, B, D) for a
batch; identity labels are class indices into the training subject set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError

# Cross reconstruction pairs the appearance and canonical features of one
# frame with the pose feature of the other and reconstructs that other frame.
# The alternative (False) sources appearance from the target frame instead.
POSE_FROM_TARGET_FRAME = True


@dataclass
class LossWeights:
    """Weights for the combined objective (identity term has weight 1)."""

    lambda_r: float = 1.0
    lambda_d: float = 1.0
    lambda_s: float = 1.0

    def validate(self) -> None:
        for name in ("lambda_r", "lambda_d", "lambda_s"):
            v = getattr(self, name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")


def _mixed_features(feats_src, feats_tgt):
    f_a_src, f_c_src, f_p_src = feats_src
    f_a_tgt, _, f_p_tgt = feats_tgt
    if POSE_FROM_TARGET_FRAME:
        return torch.cat([f_a_src, f_c_src, f_p_tgt], dim=-1)
    return torch.cat([f_a_tgt, f_c_src, f_p_src], dim=-1)


def cross_recon_loss(feats_t1, feats_t2, x_t1, x_t2, decoder) -> torch.Tensor:
    """Symmetric cross reconstruction between two frames of the same clip.

    Each half decodes the static features of one frame with the pose feature
    of the other and scores the mean squared error against that other frame;
    both targets are needed, hence both frames are passed in. Both halves go
    through the decoder as one batch so its normalization statistics match
    what evaluation-mode reconstruction sees.

    Args:
        feats_t1 / feats_t2: (f_a, f_c, f_p) tuples, each (B, dim).
        x_t1 / x_t2: target frames, (B, 3, 64, 32).
        decoder: maps the 320-d concatenation back to frames.
    """
    mixed = torch.cat(
        [_mixed_features(feats_t1, feats_t2), _mixed_features(feats_t2, feats_t1)]
    )
    targets = torch.cat([x_t2, x_t1])
    return F.mse_loss(decoder(mixed), targets)


def pose_sim_loss(pose_seq_c1: torch.Tensor, pose_seq_c2: torch.Tensor) -> torch.Tensor:
    """Squared distance between the time-averaged pose features of two videos
    of the same subject captured under different conditions."""
    if pose_seq_c1.shape[0] < 1 or pose_seq_c2.shape[0] < 1:
        raise InvalidInputError("pose sequences must be non-empty")
    diff = pose_seq_c1.mean(dim=0) - pose_seq_c2.mean(dim=0)
    return (diff**2).sum(dim=-1).mean()


def cano_cons_loss(
    fc_frames_c1: torch.Tensor,
    fc_frames_c2: torch.Tensor,
    subject: torch.Tensor,
    classifier_sg,
) -> torch.Tensor:
    """Canonical consistency: within-video spread, cross-video drift, and
    identity classification of the canonical features.

    Terms: (a) sum over ordered frame pairs i != j within condition 1 of the
    squared distances, normalized by n1^2; (b) framewise squared distance to
    condition 2, paired by index over min(n1, n2), normalized by n1; (c) mean
    negative log-likelihood of the true subject over condition-1 frames.

    Accepts (n, D) for one clip or (n, B, D) batched with subject (B,).
    """
    if fc_frames_c1.shape[0] < 1:
        raise InvalidInputError("canonical feature sequence must be non-empty")
    single = fc_frames_c1.dim() == 2
    if single:
        fc_frames_c1 = fc_frames_c1.unsqueeze(1)
        fc_frames_c2 = fc_frames_c2.unsqueeze(1)
        subject = subject.reshape(1)
    n1 = fc_frames_c1.shape[0]
    n2 = fc_frames_c2.shape[0]

    pair_diff = fc_frames_c1.unsqueeze(0) - fc_frames_c1.unsqueeze(1)  # (n1, n1, B, D)
    term_a = (pair_diff**2).sum(dim=-1).sum(dim=(0, 1)) / (n1 * n1)

    m = min(n1, n2)
    if n2 < n1:
        warnings.warn(
            f"cross-condition term truncated to {m} frames (n1={n1}, n2={n2})",
            stacklevel=2,
        )
    term_b = ((fc_frames_c1[:m] - fc_frames_c2[:m]) ** 2).sum(dim=-1).sum(dim=0) / n1

    logits = classifier_sg(fc_frames_c1)  # (n1, B, K)
    labels = subject.expand(n1, -1)
    term_c = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), reduction="none"
    ).view(n1, -1).mean(dim=0)

    return (term_a + term_b + term_c).mean()


def _class_nll(logits: torch.Tensor, subject: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, subject, reduction="none")


def id_single_loss(h_seq: torch.Tensor, subject: torch.Tensor, classifier_dg) -> torch.Tensor:
    """Negative log-likelihood of the subject under the final LSTM output."""
    if h_seq.shape[0] < 1:
        raise InvalidInputError("LSTM output sequence must be non-empty")
    single = h_seq.dim() == 2
    h_n = h_seq[-1].unsqueeze(0) if single else h_seq[-1]
    subject = subject.reshape(-1)
    return _class_nll(classifier_dg(h_n), subject).mean()


def dyn_gait(h_seq: torch.Tensor, t: int) -> torch.Tensor:
    """Running mean of the first t LSTM outputs."""
    if not 1 <= t <= h_seq.shape[0]:
        raise InvalidInputError(f"t must be in 1..{h_seq.shape[0]}, got {t}")
    return h_seq[:t].mean(dim=0)


def id_avg_loss(h_seq: torch.Tensor, subject: torch.Tensor, classifier_dg) -> torch.Tensor:
    """Identity loss on the time-averaged LSTM output."""
    if h_seq.shape[0] < 1:
        raise InvalidInputError("LSTM output sequence must be non-empty")
    single = h_seq.dim() == 2
    feat = dyn_gait(h_seq, h_seq.shape[0])
    if single:
        feat = feat.unsqueeze(0)
    subject = subject.reshape(-1)
    return _class_nll(classifier_dg(feat), subject).mean()


def id_inc_avg_loss(h_seq: torch.Tensor, subject: torch.Tensor, classifier_dg) -> torch.Tensor:
    """Incremental identity loss: every running-mean step weighted by t^2."""
    if h_seq.shape[0] < 1:
        raise InvalidInputError("LSTM output sequence must be non-empty")
    single = h_seq.dim() == 2
    if single:
        h_seq = h_seq.unsqueeze(1)
    subject = subject.reshape(-1)
    n = h_seq.shape[0]
    steps = torch.arange(1, n + 1, dtype=h_seq.dtype, device=h_seq.device)
    running = h_seq.cumsum(dim=0) / steps.view(n, 1, 1)
    logits = classifier_dg(running)  # (n, B, K)
    labels = subject.expand(n, -1)
    nll = _class_nll(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1)).view(n, -1)
    w = steps**2
    per_clip = (w.view(n, 1) * nll).sum(dim=0) / w.sum()
    return per_clip.mean()


@dataclass
class LossComponents:
    id_inc_avg: torch.Tensor
    xrecon: torch.Tensor
    pose_sim: torch.Tensor
    cano_cons: torch.Tensor


def total_loss(components: LossComponents, weights: LossWeights) -> torch.Tensor:
    """Combined objective: identity + weighted disentanglement terms."""
    weights.validate()
    return (
        components.id_inc_avg
        + weights.lambda_r * components.xrecon
        + weights.lambda_d * components.pose_sim
        + weights.lambda_s * components.cano_cons
    )
