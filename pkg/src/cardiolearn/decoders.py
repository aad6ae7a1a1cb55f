"""Segmentation and classification decoders over the branch set.

The segmentation path upsamples every branch to the top resolution,
concatenates (15C channels), gates channels with squeeze-and-excitation,
and projects each position to one probability. The classification path
folds resolution downward with strided convolutions and channel-wise
sums, then pools globally and applies a task-specific linear head.
"""

from __future__ import annotations

from . import tensor as T
from .errors import ShapeError
from .layers import BatchNorm1d, Conv1d, Linear, Module, ModuleList, SEBlock

CONCAT_FACTOR = 15  # C + 2C + 4C + 8C


def _check_branches(branches, C):
    if len(branches) != 4:
        raise ShapeError(f"decoder expects 4 branches, got {len(branches)}")
    L0 = branches[0].data.shape[2]
    length = L0
    for r, z in enumerate(branches):
        ch = C * 2 ** r
        if z.data.shape[1] != ch or z.data.shape[2] != length:
            raise ShapeError(
                f"branch {r} has shape {z.data.shape[1:]}, expected ({ch}, {length})"
            )
        length = -(-length // 2)
    return L0


class SegDecoder(Module):
    def __init__(self, base_channels, *, rng, dtype, se_reduction=4):
        super().__init__()
        self.base_channels = base_channels
        width = CONCAT_FACTOR * base_channels
        self.se = SEBlock(width, rng=rng, dtype=dtype, family="seg", reduction=se_reduction)
        self.proj = Conv1d(width, 1, 1, rng=rng, dtype=dtype, family="seg", prunable=True)

    def forward(self, branches, train=False):
        """Branch set -> per-position probabilities of shape (B, ceil(L/4))."""
        L0 = _check_branches(branches, self.base_channels)
        z = T.concat_channels(
            [branches[0]] + [T.linear_interpolate(b, L0) for b in branches[1:]]
        )
        gated = self.se.forward(z, train)
        pooled = T.adaptive_avg_pool(gated, L0)
        logits = self.proj.forward(pooled, train)
        probs = T.sigmoid(logits)
        # (B, 1, L0) -> (B, L0)
        return T.Tensor(
            probs.data[:, 0, :], _parents=(probs,),
            _backward_fn=lambda go: (go[:, None, :],),
        )


class ClsDecoder(Module):
    """Shared strided-fusion trunk; the linear head is installed per task."""

    def __init__(self, base_channels, *, rng, dtype):
        super().__init__()
        self.base_channels = base_channels
        self.sconvs = ModuleList()
        self.bns = ModuleList()
        for i in range(3):
            ch = base_channels * 2 ** i
            self.sconvs.append(Conv1d(ch, 2 * ch, 3, stride=2, padding=1,
                                      rng=rng, dtype=dtype, family="cls", prunable=True))
            self.bns.append(BatchNorm1d(2 * ch, dtype=dtype))

    def fuse(self, branches, train=False):
        """Fold branches to the lowest resolution: (B, 8C) pooled features."""
        _check_branches(branches, self.base_channels)
        h = branches[0]
        for i in range(3):
            down = self.bns[i].forward(self.sconvs[i].forward(h, train), train)
            h = T.add(down, branches[i + 1])
        return T.global_avg_pool(h)

    def forward(self, branches, head, train=False):
        """Branch set + task head -> multi-label probabilities (B, n_classes)."""
        feats = self.fuse(branches, train)
        return T.sigmoid(head.forward(feats, train))


def make_head(base_channels, n_classes, *, rng, dtype):
    """Task-exclusive classification head on pooled 8C features."""
    return Linear(8 * base_channels, n_classes, rng=rng, dtype=dtype)
