"""The overfitted occupancy-prediction network.

One model serves every scale of every frame in a group: per-scale context
MLPs and a learned scale embedding distinguish the pyramid levels, while
the feature extractors and the eight stage heads are shared.  Each stage
head predicts, per parent voxel, the probability that one child slot is
occupied, conditioned on the slots already coded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import MissingGroundTruthError, ScaleMismatchError, ShapeError
from .voxel import ScalePyramid, SparseVoxelSet, neighbor_occupancy

NEIGHBOR_CHANNELS = 7
NUM_STAGES = 8


@dataclass(frozen=True)
class ModelConfig:
    """Architecture constants; channel widths are codec-version invariants."""

    num_scales: int
    mlp_hidden: int = 24
    conv_channels: int = 8
    embed_channels: int = 8
    residual_blocks: int = 1
    bit_depth: int = 10

    def __post_init__(self):
        if self.num_scales < 0:
            raise ValueError("num_scales must be >= 0")
        for field in ("mlp_hidden", "conv_channels", "embed_channels",
                      "residual_blocks"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")


class ResidualBlock:
    """Two parallel conv branches, channel-concatenated, fused, plus skip."""

    def __init__(self, rng, name, channels, dtype):
        half = max(channels // 2, 1)
        self.a1 = ad.SparseConvLayer(rng, f"{name}.a1", channels, half, 1, dtype)
        self.a2 = ad.SparseConvLayer(rng, f"{name}.a2", half, half, 3, dtype)
        self.b = ad.SparseConvLayer(rng, f"{name}.b", channels, half, 3, dtype)
        self.fuse = ad.SparseConvLayer(rng, f"{name}.fuse", 2 * half, channels, 1, dtype)

    def __call__(self, x, voxels):
        branches = ad.concat_channels([self.a2(self.a1(x, voxels), voxels),
                                       self.b(x, voxels)])
        return ad.add(self.fuse(branches, voxels), x)

    def parameters(self):
        return (self.a1.parameters() + self.a2.parameters()
                + self.b.parameters() + self.fuse.parameters())


class GlobalExtractor:
    """Shared deep features of the scale-context tensor, computed once per
    scale and reused by all eight stages."""

    def __init__(self, rng, name, c_in, channels, blocks, dtype):
        self.conv_in = ad.SparseConvLayer(rng, f"{name}.conv_in", c_in, channels, 3, dtype)
        self.blocks = [
            ResidualBlock(rng, f"{name}.block{k}", channels, dtype)
            for k in range(blocks)
        ]
        self.conv_out = ad.SparseConvLayer(rng, f"{name}.conv_out", channels, channels, 3, dtype)

    def __call__(self, x, voxels):
        h = ad.relu(self.conv_in(x, voxels))
        for block in self.blocks:
            h = block(h, voxels)
        return self.conv_out(h, voxels)

    def parameters(self):
        out = self.conv_in.parameters() + self.conv_out.parameters()
        for block in self.blocks:
            out += block.parameters()
        return out


class LocalExtractor:
    """Features of the already-coded child slots feeding one stage."""

    def __init__(self, rng, name, c_in, channels, dtype):
        self.lift = ad.AffineLayer(rng, f"{name}.lift", c_in, channels, dtype)
        self.conv = ad.SparseConvLayer(rng, f"{name}.conv", channels, channels, 3, dtype)

    def __call__(self, x, voxels):
        return self.conv(ad.relu(self.lift(x)), voxels)

    def parameters(self):
        return self.lift.parameters() + self.conv.parameters()


class StageHead:
    """Per-stage classifier: conv, pointwise MLP, sigmoid."""

    def __init__(self, rng, name, channels, hidden, dtype):
        self.conv = ad.SparseConvLayer(rng, f"{name}.conv", channels, channels, 3, dtype)
        self.mlp = ad.Mlp(rng, f"{name}.mlp", channels, hidden, 1, dtype)

    def __call__(self, merged, voxels):
        return ad.sigmoid(self.mlp(self.conv(merged, voxels)))

    def parameters(self):
        return self.conv.parameters() + self.mlp.parameters()


class OccupancyModel:
    """All learned parameters plus the forward passes of the codec.

    Parameter initialization order is fixed, so a seed fully determines the
    starting point.  The canonical flattening used on the wire is
    lexicographic by parameter name, independent of construction order.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        n = config.num_scales
        c = config.conv_channels
        self.embedding = ad.ScaleEmbedding(rng, "embed", n,
                                           config.embed_channels, dtype)
        context_in = NEIGHBOR_CHANNELS + config.embed_channels
        self.context_mlps = [
            ad.Mlp(rng, f"scale_mlp.{i:02d}", context_in, config.mlp_hidden,
                   config.mlp_hidden, dtype)
            for i in range(n)
        ]
        self.global_net = GlobalExtractor(rng, "global", config.mlp_hidden, c,
                                          config.residual_blocks, dtype)
        self.local_nets = {
            j: LocalExtractor(rng, f"local.{j}", j, c, dtype)
            for j in range(1, NUM_STAGES)
        }
        self.heads = [
            StageHead(rng, f"head.{j}", c, config.mlp_hidden, dtype)
            for j in range(NUM_STAGES)
        ]
        params = self.embedding.parameters()
        for mlp in self.context_mlps:
            params += mlp.parameters()
        params += self.global_net.parameters()
        for j in sorted(self.local_nets):
            params += self.local_nets[j].parameters()
        for head in self.heads:
            params += head.parameters()
        self._params = {p.name: p for p in params}
        if len(self._params) != len(params):
            raise ValueError("duplicate parameter names")
        self._flat_order = sorted(self._params)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        return list(self._params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def flatten(self) -> np.ndarray:
        """All parameters as one vector, lexicographic by name path."""
        return np.concatenate(
            [self._params[name].data.reshape(-1) for name in self._flat_order]
        )

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec).reshape(-1)
        if vec.size != self.num_parameters():
            raise ShapeError(
                f"expected {self.num_parameters()} values, got {vec.size}"
            )
        pos = 0
        for name in self._flat_order:
            p = self._params[name]
            nxt = pos + p.data.size
            p.data[...] = vec[pos:nxt].reshape(p.data.shape).astype(self.dtype)
            pos = nxt

    def zero_(self) -> None:
        """Set every parameter to zero (test anchor: all probabilities 0.5)."""
        for p in self._params.values():
            p.data[...] = 0

    # -- forward passes -----------------------------------------------------

    def scale_context(self, coarse: SparseVoxelSet, scale_index: int) -> ad.Tensor:
        """Per-point context of one pyramid level: neighbor occupancy plus
        the broadcast scale embedding, merged by that scale's MLP."""
        if not 0 <= scale_index < self.config.num_scales:
            raise IndexError(
                f"scale {scale_index} out of range 0..{self.config.num_scales - 1}"
            )
        nb = ad.constant(neighbor_occupancy(coarse, dtype=self.dtype))
        emb = self.embedding(scale_index, len(coarse))
        return self.context_mlps[scale_index](ad.concat_channels([nb, emb]))

    def global_features(self, context: ad.Tensor, coarse: SparseVoxelSet) -> ad.Tensor:
        return self.global_net(context, coarse)

    def stage_probability(self, j: int, g_feat: ad.Tensor, coded_slots,
                          coarse: SparseVoxelSet) -> ad.Tensor:
        """Probability (n, 1) that child slot j is occupied, given the slots
        already coded.  Stage 0 sees global features only."""
        if len(coded_slots) != j:
            raise ShapeError(f"stage {j} needs {j} coded slot columns, "
                             f"got {len(coded_slots)}")
        if j == 0:
            merged = g_feat
        else:
            cum = ad.constant(
                np.stack(coded_slots, axis=1).astype(self.dtype, copy=False)
            )
            merged = ad.add(g_feat, self.local_nets[j](cum, coarse))
        return self.heads[j](merged, coarse)

    def predict_stage(self, j: int, context: ad.Tensor, coarse: SparseVoxelSet,
                      coded_slots) -> ad.Tensor:
        """Single-stage convenience path; arithmetic identical to the staged
        loop in :meth:`predict_children`."""
        g = self.global_features(context, coarse)
        return self.stage_probability(j, g, coded_slots, coarse)

    def predict_children(self, context: ad.Tensor, coarse: SparseVoxelSet,
                         truth_masks):
        """Run all eight stages with ground-truth conditioning.

        Returns (per-stage probability tensors, total cross-entropy bits).
        The ground truth doubles as the coded-slot context, which is exactly
        what the decoder reconstructs in lossless operation.
        """
        if truth_masks is None:
            raise MissingGroundTruthError("eight-stage pass needs child masks")
        masks = np.asarray(truth_masks)
        if masks.shape[0] != len(coarse):
            raise ShapeError("mask count must match parent count")
        g = self.global_features(context, coarse)
        probs = []
        loss = None
        slots = []
        for j in range(NUM_STAGES):
            p = self.stage_probability(j, g, slots, coarse)
            probs.append(p)
            bits_j = ((masks >> j) & 1).astype(self.dtype)
            stage_loss = ad.bce_bits(p, bits_j[:, None])
            loss = stage_loss if loss is None else ad.add(loss, stage_loss)
            slots.append(bits_j)
        return probs, loss

    def frame_loss(self, pyramid: ScalePyramid, l2_coeff: float = 0.0) -> ad.Tensor:
        """Estimated occupancy bits of one frame plus the L2 penalty.

        Sums the eight-stage cross-entropy over every scale transition,
        coarse to fine.  The L2 term rides the same tape, so its gradient
        reaches the optimizer along with the data term.
        """
        if pyramid.num_scales != self.config.num_scales:
            raise ScaleMismatchError(
                f"pyramid has {pyramid.num_scales} scales, "
                f"model expects {self.config.num_scales}"
            )
        total = None
        for i in range(self.config.num_scales - 1, -1, -1):
            coarse = pyramid.levels[i + 1]
            context = self.scale_context(coarse, i)
            _, bits = self.predict_children(context, coarse, pyramid.masks(i))
            total = bits if total is None else ad.add(total, bits)
        if total is None:
            total = ad.constant(np.asarray(0.0, dtype=self.dtype))
        if l2_coeff > 0.0:
            penalty = None
            for name in self._flat_order:
                sq = ad.square_sum(self._params[name])
                penalty = sq if penalty is None else ad.add(penalty, sq)
            total = ad.add(total, ad.scale(penalty, l2_coeff))
        return total
