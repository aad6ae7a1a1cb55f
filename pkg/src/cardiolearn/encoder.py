"""Four-stage multi-resolution 1D convolutional backbone.

Stage 1 embeds the signal at quarter length; stages 2-4 each append a
half-length, double-channel branch, transform every branch with residual
conv blocks, and fuse all branches with strided convolutions (down) or
transposed convolutions (up). Branch r carries ``C * 2**r`` channels at
length ``ceil(L / 4 / 2**r)``.
"""

from __future__ import annotations

from . import tensor as T
from .errors import ContractError, ShapeError
from .layers import (
    BatchNorm1d, Conv1d, ConvBlock, ConvTranspose1d, Module, ModuleDict, ModuleList,
)

MIN_INPUT_LENGTH = 32
STANDARD_LEADS = 12


class PartitionLayer(Module):
    """Stride-2 conv doubling channels, producing the next lower branch."""

    def __init__(self, in_ch, *, rng, dtype):
        super().__init__()
        self.conv = Conv1d(in_ch, 2 * in_ch, 3, stride=2, padding=1,
                           rng=rng, dtype=dtype, family="encoder", prunable=True)
        self.bn = BatchNorm1d(2 * in_ch, dtype=dtype)

    def forward(self, x, train=False):
        return T.relu(self.bn.forward(self.conv.forward(x, train), train))


class MergeLayer(Module):
    """Additive cross-resolution fusion over a fixed set of branches.

    Downward paths chain stride-2 convs (ReLU between hops, none after the
    last); upward paths use one transposed conv with kernel = stride =
    2**distance, a 1x1 projection, and truncation to the target length.
    """

    def __init__(self, channels, *, rng, dtype):
        super().__init__()
        self.n = len(channels)
        self.paths = ModuleDict()
        for dst in range(self.n):
            for src in range(self.n):
                if src == dst:
                    continue
                if src < dst:
                    hops = ModuleList()
                    for i in range(dst - src):
                        hops.append(Conv1d(channels[src] * 2 ** i, channels[src] * 2 ** (i + 1),
                                           3, stride=2, padding=1, rng=rng, dtype=dtype,
                                           family="encoder", prunable=True))
                    self.paths.set(f"down{src}to{dst}", hops)
                else:
                    d = src - dst
                    up = Module()
                    up.deconv = ConvTranspose1d(channels[src], channels[src], 2 ** d, 2 ** d,
                                                rng=rng, dtype=dtype, family="encoder", prunable=True)
                    up.proj = Conv1d(channels[src], channels[dst], 1, rng=rng, dtype=dtype,
                                     family="encoder", prunable=True)
                    self.paths.set(f"up{src}to{dst}", up)

    def _resample(self, x, src, dst, target_len, train):
        if src == dst:
            return x
        if src < dst:
            hops = self.paths.get(f"down{src}to{dst}")
            h = x
            for i, conv in enumerate(hops):
                h = conv.forward(h, train)
                if i < len(hops) - 1:
                    h = T.relu(h)
            return h
        up = self.paths.get(f"up{src}to{dst}")
        h = up.proj.forward(up.deconv.forward(x, train), train)
        return T.slice_length(h, target_len)

    def forward(self, branches, train=False):
        if len(branches) != self.n:
            raise ShapeError(f"branch_merge: expected {self.n} branches, got {len(branches)}")
        out = []
        for dst in range(self.n):
            target_len = branches[dst].data.shape[2]
            total = self._resample(branches[0], 0, dst, target_len, train)
            for src in range(1, self.n):
                total = T.add(total, self._resample(branches[src], src, dst, target_len, train))
            out.append(T.relu(total))
        return out


class MultiResEncoder(Module):
    """Embedding plus three partition/transform/merge stages."""

    def __init__(self, config, *, rng, dtype):
        super().__init__()
        C = config.base_channels
        B = config.blocks_per_stage
        self.base_channels = C
        self.embed_conv1 = Conv1d(STANDARD_LEADS, C, 3, stride=2, padding=1,
                                  rng=rng, dtype=dtype, family="encoder", prunable=True)
        self.embed_bn1 = BatchNorm1d(C, dtype=dtype)
        self.embed_conv2 = Conv1d(C, C, 3, stride=2, padding=1,
                                  rng=rng, dtype=dtype, family="encoder", prunable=True)
        self.embed_bn2 = BatchNorm1d(C, dtype=dtype)

        self.stage1_blocks = ModuleList(
            [ConvBlock(C, rng=rng, dtype=dtype, family="encoder") for _ in range(B)]
        )
        self.partitions = ModuleList(
            [PartitionLayer(C * 2 ** r, rng=rng, dtype=dtype) for r in range(3)]
        )
        stages = ModuleList()
        merges = ModuleList()
        for stage in (2, 3, 4):
            chans = [C * 2 ** r for r in range(stage)]
            per_branch = ModuleList()
            for ch in chans:
                per_branch.append(ModuleList(
                    [ConvBlock(ch, rng=rng, dtype=dtype, family="encoder") for _ in range(B)]
                ))
            stages.append(per_branch)
            merges.append(MergeLayer(chans, rng=rng, dtype=dtype))
        self.stage_blocks = stages
        self.merges = merges

    def embed_core(self, x12, train=False):
        """Two stride-2 conv/BN/ReLU stems: 12 channels at L -> C at ceil(L/4)."""
        if x12.data.shape[2] < MIN_INPUT_LENGTH:
            raise ShapeError(
                f"encoder input length {x12.data.shape[2]} below minimum {MIN_INPUT_LENGTH}"
            )
        h = T.relu(self.embed_bn1.forward(self.embed_conv1.forward(x12, train), train))
        return T.relu(self.embed_bn2.forward(self.embed_conv2.forward(h, train), train))

    def branch_partition(self, branches, train=False):
        """Append one lower branch derived from the current lowest one."""
        if not 1 <= len(branches) <= 3:
            raise ContractError(f"branch_partition: cannot extend {len(branches)} branches")
        new = self.partitions[len(branches) - 1].forward(branches[-1], train)
        return list(branches) + [new]

    def run_blocks(self, branches, train=False):
        """Apply this stage's conv blocks to every branch."""
        stage_idx = len(branches) - 2  # stage 2 -> 0
        per_branch = self.stage_blocks[stage_idx]
        out = []
        for r, x in enumerate(branches):
            for block in per_branch[r]:
                x = block.forward(x, train)
            out.append(x)
        return out

    def branch_merge(self, branches, train=False):
        if len(branches) < 2:
            raise ContractError("branch_merge: need at least 2 branches")
        return self.merges[len(branches) - 2].forward(branches, train)

    def forward(self, x12, train=False):
        h = self.embed_core(x12, train)
        for block in self.stage1_blocks:
            h = block.forward(h, train)
        branches = [h]
        for _ in range(3):
            branches = self.branch_partition(branches, train)
            branches = self.run_blocks(branches, train)
            branches = self.branch_merge(branches, train)
        return branches


def branch_shapes(L, C):
    """The lawful (channels, length) ladder for input length L."""
    shapes = []
    length = -(-L // 4)
    for r in range(4):
        shapes.append((C * 2 ** r, length))
        length = -(-length // 2)
    return shapes
