"""Group-of-frames orchestration and the bitstream container.

Encoding a sequence: freeze the scale count from the first frame, split the
frames into groups, overfit one network per group (warm-started from the
previous group's pre-quantization parameters), quantize and reload the
network so both sides run identical arithmetic, then range-code every
child-occupancy bit under the network's predictions.

Container layout (`.linr`, all integers little-endian):

    magic "LNRP", version u8, bit_depth u8, num_scales u8, gop_size u16,
    frame_count u32, param_bits u8
    per group:  parameter block (see params.pack_param_block)
    per frame:  lowest-scale block (point_count u32, then 3 x u16 per point)
                per scale transition, coarse to fine, per stage 0..7:
                a u32 length prefix plus the occupancy payload
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import DecodeError, InvalidOccupancyError, LinrError
from .network import ModelConfig, NUM_STAGES, OccupancyModel
from .params import (
    LaplaceSideInfo,
    QuantHeader,
    compress_params,
    decompress_params,
    fit_laplace,
    pack_param_block,
    quantize,
    reload_dequantized,
    unpack_param_block,
)
from .rangecoder import RangeDecoder, RangeEncoder, quantize_probabilities
from .voxel import (
    ScalePyramid,
    SparseVoxelSet,
    build_pyramid,
    pack_coords,
    reconstruct_children,
)

MAGIC = b"LNRP"
VERSION = 1
FILE_EXTENSION = ".linr"

_HEADER_FMT = "<4sBBBHIB"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

WARM_START_MODES = ("random", "previous_gop", "external_checkpoint")


@dataclass
class GopConfig:
    """Sequence-level coding configuration."""

    gop_size: int = 32
    epochs_first: int = 6
    epochs_rest: int = 1
    bits: int = 8
    seed: int = 0
    warm_start: str = "previous_gop"
    init_params: Optional[np.ndarray] = None
    bit_depth: int = 10
    stop_at: int = 64
    l2_coeff: float = 1e-4
    lr0: float = 0.01
    lr_min: float = 0.0004
    lr_decay: float = 0.992
    lr_decay_every: int = 32

    def __post_init__(self):
        if self.gop_size < 1:
            raise ValueError("gop_size must be >= 1")
        if self.epochs_first < 0 or self.epochs_rest < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must be in [1, 16]")
        if self.warm_start not in WARM_START_MODES:
            raise ValueError(f"warm_start must be one of {WARM_START_MODES}")
        if self.warm_start == "external_checkpoint" and self.init_params is None:
            raise ValueError("external_checkpoint warm start needs init_params")


@dataclass
class TrainResult:
    model: OccupancyModel
    losses: list
    num_scales: int

    @property
    def steps(self) -> int:
        return len(self.losses)


@dataclass
class StageRecord:
    """Measured vs estimated size of one per-stage payload."""

    scale: int
    stage: int
    payload_bits: int
    estimated_bits: float


@dataclass
class FrameRecord:
    frame_index: int
    gop_index: int
    point_count: int
    lowest_bits: int
    occupancy_bits: int
    param_bits_amortized: float
    stages: list

    @property
    def bpp(self) -> float:
        total = self.lowest_bits + self.occupancy_bits + self.param_bits_amortized
        return total / self.point_count

    def occupancy_bits_by_scale(self) -> dict:
        out: dict = {}
        for rec in self.stages:
            out[rec.scale] = out.get(rec.scale, 0) + rec.payload_bits
        return out


@dataclass
class EncodeReport:
    num_scales: int
    header_bits: int
    gop_param_bits: list
    gop_frame_counts: list
    epochs_used: list
    frames: list
    training_seconds: float
    coding_seconds: float
    encode_seconds: float

    @property
    def total_points(self) -> int:
        return sum(f.point_count for f in self.frames)

    @property
    def total_bits(self) -> int:
        return (
            self.header_bits
            + sum(self.gop_param_bits)
            + sum(f.lowest_bits + f.occupancy_bits for f in self.frames)
        )

    @property
    def bpp(self) -> float:
        return self.total_bits / self.total_points

    def allocation(self) -> dict:
        """Fractions of the categorized stream (container header excluded)."""
        params = sum(self.gop_param_bits)
        lowest = sum(f.lowest_bits for f in self.frames)
        occupancy = sum(f.occupancy_bits for f in self.frames)
        total = params + lowest + occupancy
        return {
            "decoder_params": params / total,
            "lowest_scale": lowest / total,
            "occupancy": occupancy / total,
        }

    def occupancy_by_scale(self) -> dict:
        out: dict = {}
        for f in self.frames:
            for scale, bits in f.occupancy_bits_by_scale().items():
                out[scale] = out.get(scale, 0) + bits
        return dict(sorted(out.items()))

    def to_dict(self) -> dict:
        return {
            "num_scales": self.num_scales,
            "total_bits": self.total_bits,
            "total_points": self.total_points,
            "bpp": self.bpp,
            "allocation": self.allocation(),
            "occupancy_bits_by_scale": self.occupancy_by_scale(),
            "gop_param_bits": list(self.gop_param_bits),
            "gop_frame_counts": list(self.gop_frame_counts),
            "epochs_used": list(self.epochs_used),
            "training_seconds": self.training_seconds,
            "coding_seconds": self.coding_seconds,
            "encode_seconds": self.encode_seconds,
            "frames": [
                {
                    "frame": f.frame_index,
                    "gop": f.gop_index,
                    "points": f.point_count,
                    "bpp": f.bpp,
                    "lowest_bits": f.lowest_bits,
                    "occupancy_bits": f.occupancy_bits,
                    "param_bits_amortized": f.param_bits_amortized,
                    "stages": [
                        {
                            "scale": s.scale,
                            "stage": s.stage,
                            "payload_bits": s.payload_bits,
                            "estimated_bits": s.estimated_bits,
                        }
                        for s in f.stages
                    ],
                }
                for f in self.frames
            ],
        }


@dataclass
class DecodeStats:
    param_seconds: float = 0.0
    lowest_seconds: float = 0.0
    scale_seconds: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    # Per decoded point: (x, y, z, scale, coded bits of its occupancy event).
    point_costs: list = field(default_factory=list)


@dataclass
class VerifyResult:
    ok: bool
    message: str
    decode_seconds: float = 0.0

    def __bool__(self) -> bool:
        return self.ok


class _Reader:
    """Cursor over the container with hard bounds checking."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError(
                f"container truncated: wanted {n} bytes at offset {self.pos}"
            )
        out = self.data[self.pos : end]
        self.pos = end
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self) -> bool:
        return self.pos == len(self.data)


def _model_config(num_scales: int, config: GopConfig) -> ModelConfig:
    return ModelConfig(num_scales=num_scales, bit_depth=config.bit_depth)


def _make_optimizer(model: OccupancyModel, config: GopConfig) -> ad.Adam:
    # The L2 penalty of the loss rides the autodiff tape, so the optimizer
    # itself applies no additional decay (that would count it twice).
    return ad.Adam(
        model.parameters(),
        lr0=config.lr0,
        lr_min=config.lr_min,
        decay=config.lr_decay,
        decay_every=config.lr_decay_every,
        weight_decay=0.0,
    )


def train_gop(frames, config: GopConfig, init: Optional[np.ndarray] = None,
              num_scales: Optional[int] = None,
              epochs: Optional[int] = None) -> TrainResult:
    """Overfit one network to a group of frames.

    One epoch is one optimizer step per frame, in container order.  When
    ``init`` is given it is loaded verbatim before training (the warm
    start); ``epochs=0`` returns it untouched.
    """
    if not frames:
        raise ValueError("train_gop needs at least one frame")
    if num_scales is None:
        num_scales = build_pyramid(frames[0], stop_at=config.stop_at).num_scales
    pyramids = [build_pyramid(f, num_scales=num_scales) for f in frames]
    model = OccupancyModel(_model_config(num_scales, config), seed=config.seed)
    if init is not None:
        model.load_flat(init)
    if epochs is None:
        epochs = config.epochs_first
    losses = _train_epochs(model, pyramids, config, epochs)
    return TrainResult(model=model, losses=losses, num_scales=num_scales)


def _train_epochs(model, pyramids, config, epochs):
    opt = _make_optimizer(model, config)
    losses = []
    for _ in range(epochs):
        for pyr in pyramids:
            opt.zero_grad()
            loss = model.frame_loss(pyr, l2_coeff=config.l2_coeff)
            loss.backward()
            opt.step()
            losses.append(loss.item())
    return losses


def _coords_to_wire(pc: SparseVoxelSet) -> bytes:
    return pc.coords.astype("<u2").tobytes()


def _coords_from_wire(raw: bytes, count: int, bit_depth: int) -> SparseVoxelSet:
    coords = (
        np.frombuffer(raw, dtype="<u2", count=count * 3)
        .reshape(count, 3)
        .astype(np.int64)
    )
    if count and coords.max() >= (1 << bit_depth):
        raise DecodeError("lowest-scale coordinates exceed declared bit depth")
    keys = pack_coords(coords)
    if count > 1 and np.any(np.diff(keys) <= 0):
        raise DecodeError("lowest-scale coordinates not sorted and unique")
    return SparseVoxelSet(coords, assume_sorted=True)


def _estimate_bits(probs: np.ndarray, bits: np.ndarray) -> float:
    p = np.clip(probs.astype(np.float64), ad.BCE_EPS, 1.0 - ad.BCE_EPS)
    t = bits.astype(np.float64)
    return float(-(t * np.log2(p) + (1.0 - t) * np.log2(1.0 - p)).sum())


def _encode_frame(pyramid: ScalePyramid, model: Optional[OccupancyModel],
                  parts: list, stage_records: list) -> tuple:
    """Append one frame's blocks to ``parts``; returns (lowest, occupancy) bits."""
    base = pyramid.levels[-1]
    lowest = struct.pack("<I", len(base)) + _coords_to_wire(base)
    parts.append(lowest)
    occupancy_bits = 0
    with ad.no_grad():
        for i in range(pyramid.num_scales - 1, -1, -1):
            coarse = pyramid.levels[i + 1]
            masks = pyramid.masks(i)
            context = model.scale_context(coarse, i)
            g = model.global_features(context, coarse)
            slots = []
            for j in range(NUM_STAGES):
                p = model.stage_probability(j, g, slots, coarse)
                flat = p.data[:, 0]
                quantized = quantize_probabilities(flat)
                bits_j = ((masks >> j) & 1).astype(np.int64)
                enc = RangeEncoder()
                for p1, bit in zip(quantized.tolist(), bits_j.tolist()):
                    enc.encode_bit(p1, bit)
                payload = enc.finish()
                parts.append(struct.pack("<I", len(payload)))
                parts.append(payload)
                occupancy_bits += 8 * (4 + len(payload))
                stage_records.append(
                    StageRecord(
                        scale=i,
                        stage=j,
                        payload_bits=8 * len(payload),
                        estimated_bits=_estimate_bits(flat, bits_j),
                    )
                )
                slots.append(bits_j.astype(model.dtype))
    return 8 * len(lowest), occupancy_bits


def encode_sequence(frames, config: GopConfig):
    """Encode a frame sequence; returns (container bytes, EncodeReport)."""
    if not frames:
        raise ValueError("encode_sequence needs at least one frame")
    for f in frames:
        f.check_bit_depth(config.bit_depth)
    t_begin = time.perf_counter()
    num_scales = build_pyramid(frames[0], stop_at=config.stop_at).num_scales

    header = struct.pack(
        _HEADER_FMT, MAGIC, VERSION, config.bit_depth, num_scales,
        config.gop_size, len(frames), config.bits,
    )
    parts = [header]

    gop_param_bits = []
    gop_frame_counts = []
    epochs_used = []
    frame_records = []
    training_seconds = 0.0
    coding_seconds = 0.0
    prev_params = None

    groups = [
        frames[k : k + config.gop_size]
        for k in range(0, len(frames), config.gop_size)
    ]
    frame_index = 0
    for gop_index, gop_frames in enumerate(groups):
        pyramids = [build_pyramid(f, num_scales=num_scales) for f in gop_frames]
        epochs = config.epochs_first if gop_index == 0 else config.epochs_rest
        if num_scales > 0:
            model = OccupancyModel(_model_config(num_scales, config),
                                   seed=config.seed)
            init = None
            if gop_index == 0:
                if config.warm_start == "external_checkpoint":
                    init = config.init_params
            elif config.warm_start in ("previous_gop", "external_checkpoint"):
                init = prev_params
            if init is not None:
                model.load_flat(init)
            t0 = time.perf_counter()
            _train_epochs(model, pyramids, config, epochs)
            training_seconds += time.perf_counter() - t0
            # Warm starts continue from the full-precision parameters, but
            # coding always runs on the reloaded transmitted values.
            prev_params = model.flatten()
            q_header, q = quantize(prev_params, config.bits)
            side = fit_laplace(q)
            payload = compress_params(q, side, config.bits)
            reload_dequantized(model, q_header, q)
            block = pack_param_block(q_header, side, payload)
        else:
            model = None
            block = pack_param_block(
                QuantHeader(min=0.0, max=0.0, bits=config.bits, count=0),
                LaplaceSideInfo(mu=0.0, b=0.0),
                b"",
            )
        parts.append(block)
        gop_param_bits.append(8 * len(block))
        gop_frame_counts.append(len(gop_frames))
        epochs_used.append(epochs)

        t0 = time.perf_counter()
        for pyr, frame in zip(pyramids, gop_frames):
            stage_records: list = []
            lowest_bits, occ_bits = _encode_frame(pyr, model, parts, stage_records)
            frame_records.append(
                FrameRecord(
                    frame_index=frame_index,
                    gop_index=gop_index,
                    point_count=len(frame),
                    lowest_bits=lowest_bits,
                    occupancy_bits=occ_bits,
                    param_bits_amortized=8 * len(block) / len(gop_frames),
                    stages=stage_records,
                )
            )
            frame_index += 1
        coding_seconds += time.perf_counter() - t0

    report = EncodeReport(
        num_scales=num_scales,
        header_bits=8 * HEADER_SIZE,
        gop_param_bits=gop_param_bits,
        gop_frame_counts=gop_frame_counts,
        epochs_used=epochs_used,
        frames=frame_records,
        training_seconds=training_seconds,
        coding_seconds=coding_seconds,
        encode_seconds=time.perf_counter() - t_begin,
    )
    data = b"".join(parts)
    if 8 * len(data) != report.total_bits:
        raise LinrError("container accounting mismatch")
    return data, report


def _decode_frame(reader: _Reader, model: Optional[OccupancyModel],
                  num_scales: int, bit_depth: int,
                  stats: Optional[DecodeStats]) -> SparseVoxelSet:
    t0 = time.perf_counter()
    count = reader.u32()
    current = _coords_from_wire(reader.take(count * 6), count, bit_depth)
    if stats is not None:
        stats.lowest_seconds += time.perf_counter() - t0
    with ad.no_grad():
        for i in range(num_scales - 1, -1, -1):
            t_scale = time.perf_counter()
            coarse = current
            context = model.scale_context(coarse, i)
            g = model.global_features(context, coarse)
            slots = []
            columns = []
            for j in range(NUM_STAGES):
                p = model.stage_probability(j, g, slots, coarse)
                quantized = quantize_probabilities(p.data[:, 0])
                payload = reader.take(reader.u32())
                dec = RangeDecoder(payload)
                bits_j = np.fromiter(
                    (dec.decode_bit(p1) for p1 in quantized.tolist()),
                    dtype=np.int64,
                    count=len(coarse),
                )
                if dec.bits_consumed > 8 * len(payload) + 32:
                    raise DecodeError(
                        f"occupancy payload truncated at scale {i} stage {j}"
                    )
                columns.append((bits_j, quantized))
                slots.append(bits_j.astype(model.dtype))
            masks = np.zeros(len(coarse), dtype=np.uint8)
            for j, (bits_j, _) in enumerate(columns):
                masks |= (bits_j.astype(np.uint8)) << j
            if len(masks) and masks.min() == 0:
                raise InvalidOccupancyError(
                    f"decoded an empty child mask at scale {i} (corrupt stream)"
                )
            fine = reconstruct_children(masks, coarse)
            if stats is not None:
                for j, (bits_j, quantized) in enumerate(columns):
                    hit = bits_j == 1
                    if not hit.any():
                        continue
                    parents = coarse.coords[hit]
                    child = (parents << 1) + np.array(
                        [(j >> 2) & 1, (j >> 1) & 1, j & 1], dtype=np.int64
                    )
                    cost = -np.log2(quantized[hit] / 65536.0)
                    stats.point_costs.append((child, i, cost))
                stats.scale_seconds[i] = stats.scale_seconds.get(i, 0.0) + (
                    time.perf_counter() - t_scale
                )
            current = fine
    return current


def decode_sequence(data: bytes, collect_stats: bool = False):
    """Decode a container; returns (frames, DecodeStats or None)."""
    t_begin = time.perf_counter()
    reader = _Reader(data)
    magic, version, bit_depth, num_scales, gop_size, frame_count, bits = (
        struct.unpack(_HEADER_FMT, reader.take(HEADER_SIZE))
    )
    if magic != MAGIC:
        raise DecodeError("not a LNRP container")
    if version != VERSION:
        raise DecodeError(f"unsupported container version {version}")
    if frame_count < 1 or gop_size < 1:
        raise DecodeError("invalid frame or group count")
    stats = DecodeStats() if collect_stats else None

    frames = []
    remaining = frame_count
    while remaining > 0:
        in_gop = min(gop_size, remaining)
        t0 = time.perf_counter()
        q_header, side, payload, new_pos = unpack_param_block(reader.data, reader.pos)
        reader.pos = new_pos
        model = None
        if num_scales > 0:
            model = OccupancyModel(
                ModelConfig(num_scales=num_scales, bit_depth=bit_depth)
            )
            q = decompress_params(payload, q_header, side)
            reload_dequantized(model, q_header, q)
        elif q_header.count != 0:
            raise DecodeError("parameter block present but no scales to decode")
        if stats is not None:
            stats.param_seconds += time.perf_counter() - t0
        for _ in range(in_gop):
            frames.append(
                _decode_frame(reader, model, num_scales, bit_depth, stats)
            )
        remaining -= in_gop
    if not reader.done():
        raise DecodeError(
            f"{len(reader.data) - reader.pos} trailing bytes after the last frame"
        )
    if stats is not None:
        stats.total_seconds = time.perf_counter() - t_begin
    return frames, stats


def container_summary(data: bytes) -> dict:
    """Byte accounting of a container without decoding any geometry.

    Returns totals per section plus per-scale occupancy bytes (length
    prefixes included in their sections).
    """
    reader = _Reader(data)
    magic, version, bit_depth, num_scales, gop_size, frame_count, bits = (
        struct.unpack(_HEADER_FMT, reader.take(HEADER_SIZE))
    )
    if magic != MAGIC:
        raise DecodeError("not a LNRP container")
    param_bytes = 0
    lowest_bytes = 0
    scale_bytes = {i: 0 for i in range(num_scales)}
    gops = 0
    remaining = frame_count
    while remaining > 0:
        in_gop = min(gop_size, remaining)
        _, _, payload, new_pos = unpack_param_block(reader.data, reader.pos)
        param_bytes += new_pos - reader.pos
        reader.pos = new_pos
        gops += 1
        for _ in range(in_gop):
            count = reader.u32()
            reader.take(count * 6)
            lowest_bytes += 4 + count * 6
            for i in range(num_scales - 1, -1, -1):
                for _ in range(NUM_STAGES):
                    plen = reader.u32()
                    reader.take(plen)
                    scale_bytes[i] += 4 + plen
        remaining -= in_gop
    if not reader.done():
        raise DecodeError("trailing bytes after the last frame")
    return {
        "file_bytes": len(data),
        "header_bytes": HEADER_SIZE,
        "param_bytes": param_bytes,
        "lowest_bytes": lowest_bytes,
        "scale_bytes": scale_bytes,
        "num_scales": num_scales,
        "frame_count": frame_count,
        "gop_count": gops,
        "gop_size": gop_size,
        "bit_depth": bit_depth,
        "param_bits_width": bits,
    }


def verify(data: bytes, original_frames) -> VerifyResult:
    """Decode and compare against the originals, coordinate-exact."""
    t0 = time.perf_counter()
    try:
        decoded, _ = decode_sequence(data)
    except LinrError as exc:
        return VerifyResult(False, f"decode failed: {exc}")
    elapsed = time.perf_counter() - t0
    if len(decoded) != len(original_frames):
        return VerifyResult(
            False,
            f"frame count differs: container {len(decoded)}, "
            f"input {len(original_frames)}",
            elapsed,
        )
    for k, (got, want) in enumerate(zip(decoded, original_frames)):
        if len(got) != len(want):
            return VerifyResult(
                False,
                f"frame {k}: {len(got)} points decoded, {len(want)} expected",
                elapsed,
            )
        if not np.array_equal(got.coords, want.coords):
            row = int(np.nonzero(np.any(got.coords != want.coords, axis=1))[0][0])
            return VerifyResult(
                False,
                f"frame {k}: first mismatch at row {row}: "
                f"{got.coords[row].tolist()} != {want.coords[row].tolist()}",
                elapsed,
            )
    return VerifyResult(True, f"{len(decoded)} frames bit-exact", elapsed)
