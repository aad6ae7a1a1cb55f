"""Full network: lead adapter + encoder + both decoders.

The adapter (N leads -> 12 channels) and the classification head are
task-exclusive and installed per task; everything else is structural and
potentially shared across tasks.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .decoders import ClsDecoder, SegDecoder, make_head
from .encoder import STANDARD_LEADS, MultiResEncoder
from .errors import ConfigError
from .layers import BatchNorm1d, Conv1d, Module


def make_adapter(leads, *, rng, dtype):
    """Task-exclusive 1x1 conv projecting N leads to 12 channels.

    Initialized to replicate leads cyclically so the raw signal passes
    through unchanged before training.
    """
    adapter = Conv1d(leads, STANDARD_LEADS, 1, rng=rng, dtype=dtype)
    w = np.zeros((STANDARD_LEADS, leads, 1), dtype=dtype)
    for o in range(STANDARD_LEADS):
        w[o, o % leads, 0] = 1.0
    adapter.weight.data = w
    return adapter


class Network(Module):
    def __init__(self, config, *, rng, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.encoder = MultiResEncoder(config, rng=rng, dtype=dtype)
        self.seg = SegDecoder(config.base_channels, rng=rng, dtype=dtype,
                              se_reduction=config.se_reduction)
        self.cls = ClsDecoder(config.base_channels, rng=rng, dtype=dtype)
        self.adapter = None
        self.head = None
        self.assign_parameter_names()

    # -- task-exclusive slots -------------------------------------------------

    def install_adapter(self, adapter):
        self.adapter = adapter
        adapter.assign_parameter_names("adapter.")

    def install_head(self, head):
        self.head = head
        head.assign_parameter_names("head.")

    def new_adapter(self, leads, rng):
        return make_adapter(leads, rng=rng, dtype=self.dtype)

    def new_head(self, n_classes, rng):
        head = make_head(self.config.base_channels, n_classes, rng=rng, dtype=self.dtype)
        head.assign_parameter_names("head.")
        return head

    # -- forward paths --------------------------------------------------------

    def embed(self, x, train=False):
        """Adapter + stride-4 embedding: (B, N, L) -> (B, C, ceil(L/4))."""
        if self.adapter is None:
            raise ConfigError("no lead adapter installed")
        if x.data.shape[1] != self.adapter.in_ch:
            raise ConfigError(
                f"lead adapter expects {self.adapter.in_ch} leads, input has {x.data.shape[1]}"
            )
        return self.encoder.embed_core(self.adapter.forward(x, train), train)

    def encoder_forward(self, x, train=False):
        """Full resolution ladder: input window -> 4 branches."""
        h = self.embed(x, train)
        for block in self.encoder.stage1_blocks:
            h = block.forward(h, train)
        branches = [h]
        for _ in range(3):
            branches = self.encoder.branch_partition(branches, train)
            branches = self.encoder.run_blocks(branches, train)
            branches = self.encoder.branch_merge(branches, train)
        return branches

    def seg_forward(self, x, train=False):
        return self.seg.forward(self.encoder_forward(x, train), train)

    def cls_forward(self, x, train=False):
        if self.head is None:
            raise ConfigError("no classification head installed")
        return self.cls.forward(self.encoder_forward(x, train), self.head, train)

    def forward_for_mode(self, x, mode, train=False):
        if mode == "seg":
            return self.seg_forward(x, train)
        if mode == "cls":
            return self.cls_forward(x, train)
        raise ConfigError(f"unknown task mode {mode!r}")

    # -- introspection ---------------------------------------------------------

    def shared_parameters(self):
        """Structural parameters (everything except adapter/head slots)."""
        for name, p in self.named_parameters():
            if name.startswith(("adapter.", "head.")):
                continue
            yield name, p

    def prunable_parameters(self):
        for name, p in self.shared_parameters():
            if p.prunable:
                yield name, p

    def exclusive_shared_parameters(self):
        """Biases and BN affine terms living inside shared layers."""
        for name, p in self.shared_parameters():
            if not p.prunable:
                yield name, p

    def batchnorms(self):
        for name, m in self.named_modules():
            if isinstance(m, BatchNorm1d):
                yield name, m

    def count_parameters(self, mode, leads, n_classes=None):
        """Scalar count for one task's model: encoder + one decoder + exclusives."""
        total = sum(p.data.size for _, p in self.encoder.named_parameters())
        total += STANDARD_LEADS * leads + STANDARD_LEADS  # adapter
        if mode == "seg":
            total += sum(p.data.size for _, p in self.seg.named_parameters())
        elif mode == "cls":
            total += sum(p.data.size for _, p in self.cls.named_parameters())
            if n_classes is None:
                raise ConfigError("n_classes required to count a classification model")
            total += n_classes * 8 * self.config.base_channels + n_classes
        else:
            raise ConfigError(f"unknown task mode {mode!r}")
        return total
