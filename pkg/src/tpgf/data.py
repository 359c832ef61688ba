"""Synthetic dataset generation, windowing, splits, normalization, and
file ingestion.

Two data families share one sample layout:
  - multinode series: raw [T, N, F] vector measurements per node
  - moving sprites: frames flattened to [T, H*W, 1] so the same
    Seq2Seq consumes both; grid dims are kept in meta for SSIM

Every generator is a pure function of (config, seed).
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import RngState


@dataclass
class DataMeta:
    channel_names: list
    target_channels: list
    mean: np.ndarray | None = None  # per input channel, train split only
    std: np.ndarray | None = None
    grid: tuple | None = None  # (H, W) when samples are flattened frames
    window_starts: np.ndarray | None = None  # raw start per window; None = independent sequences
    dropped_windows: int = 0
    normalized: bool = False


@dataclass
class Dataset:
    contexts: np.ndarray  # [num, T_in, N, F]
    targets: np.ndarray  # [num, K, N, F_target]
    meta: DataMeta

    def __len__(self):
        return self.contexts.shape[0]


# ---------------------------------------------------------------------------
# generators

def multinode_clean_value(t, node, channel, nodes: int) -> float:
    """Closed form of the noise-free, uncoupled series at one point.

    Two shared sinusoids per channel; the node enters only through its
    phase offset. Channel f has base period 24 + 7 f.
    """
    period = 24.0 + 7.0 * channel
    phase = 2.0 * np.pi * node / nodes + 0.61 * channel
    a = np.sin(2.0 * np.pi * t / period + phase)
    b = 0.4 * np.sin(4.0 * np.pi * t / period + 2.0 * phase)
    return a + b


def gen_multinode_series(nodes: int, channels: int, length: int,
                         coupling: float, noise: float, seed: int) -> np.ndarray:
    """Raw series [T, N, F].

    Construction, in order: (1) the closed-form sinusoid bank above;
    (2) cross-node/cross-channel mixing controlled by `coupling`
    (shared node-mean and channel-mean fields); (3) AR(1) noise with
    decay 0.7 whose innovations are one rng.normal(T*N*F) draw reshaped
    [T, N, F] in row-major order.
    """
    if nodes < 1 or channels < 1 or length < 1:
        raise ConfigError(
            f"nodes, channels, length must be >= 1, got {nodes}, {channels}, {length}")
    if noise < 0:
        raise ConfigError(f"noise level must be non-negative, got {noise}")
    if not 0.0 <= coupling <= 1.0:
        raise ConfigError(f"coupling must lie in [0, 1], got {coupling}")

    t = np.arange(length, dtype=np.float64)[:, None, None]
    n = np.arange(nodes, dtype=np.float64)[None, :, None]
    f = np.arange(channels, dtype=np.float64)[None, None, :]
    period = 24.0 + 7.0 * f
    phase = 2.0 * np.pi * n / nodes + 0.61 * f
    base = (np.sin(2.0 * np.pi * t / period + phase)
            + 0.4 * np.sin(4.0 * np.pi * t / period + 2.0 * phase))

    if coupling > 0.0:
        node_mean = base.mean(axis=1, keepdims=True)
        chan_mean = base.mean(axis=2, keepdims=True)
        shared = 0.7 * node_mean + 0.3 * chan_mean
        series = (1.0 - coupling) * base + coupling * shared
    else:
        series = base

    if noise > 0.0:
        rng = RngState(seed)
        xi = rng.normal(length * nodes * channels).reshape(length, nodes, channels)
        ar = np.empty_like(xi)
        ar[0] = noise * xi[0]
        for k in range(1, length):
            ar[k] = 0.7 * ar[k - 1] + noise * xi[k]
        series = series + ar
    return series


def advance_position(pos: int, vel: int, limit: int):
    """One elastic step along one axis; positions stay in [0, limit]."""
    pos = pos + vel
    if pos < 0:
        return -pos, -vel
    if pos > limit:
        return 2 * limit - pos, -vel
    return pos, vel


def render_frame(h: int, w: int, sprites, rows, cols) -> np.ndarray:
    """Max-composite the sprites onto a zero background."""
    frame = np.zeros((h, w))
    for sprite, r, c in zip(sprites, rows, cols):
        sh, sw = sprite.shape
        region = frame[r:r + sh, c:c + sw]
        np.maximum(region, sprite, out=region)
    return frame


def gen_moving_sprites(h: int, w: int, num_sprites: int, speed_range,
                       length: int, seed: int, count: int = 1,
                       sprite_size: int = 5, sprite_bank=None) -> np.ndarray:
    """Frame sequences [count, T, H, W] with pixel values in [0, 1].

    Sprites are solid squares (or entries of sprite_bank) moving with
    constant integer velocity and elastic reflection at the walls.
    Sequence i draws from the stream split(seed, i + 1); per sprite the
    draw order is row, col, |row speed|, |col speed|, row sign, col sign.
    """
    lo, hi = int(speed_range[0]), int(speed_range[1])
    if lo < 0 or hi < lo:
        raise ConfigError(f"speed range must satisfy 0 <= lo <= hi, got {lo}, {hi}")
    if num_sprites < 1 or length < 1 or count < 1:
        raise ConfigError("num_sprites, length, count must all be >= 1")
    if sprite_bank is not None:
        sprites_src = [np.asarray(s, dtype=np.float64) for s in sprite_bank]
    else:
        sprites_src = [np.ones((sprite_size, sprite_size))]
    for s in sprites_src:
        if s.shape[0] > h or s.shape[1] > w:
            raise ConfigError(
                f"sprite {list(s.shape)} does not fit grid {h}x{w}")

    base = RngState(seed)
    out = np.zeros((count, length, h, w))
    for idx in range(count):
        rng = base.split(idx + 1)
        picks = (rng.randint_below(len(sprites_src), num_sprites)
                 if len(sprites_src) > 1 else np.zeros(num_sprites, dtype=np.int64))
        sprites = [sprites_src[p] for p in picks]
        rows, cols, v_r, v_c = [], [], [], []
        for sp in sprites:
            r_lim = h - sp.shape[0]
            c_lim = w - sp.shape[1]
            rows.append(int(rng.randint_below(r_lim + 1, 1)[0]))
            cols.append(int(rng.randint_below(c_lim + 1, 1)[0]))
            mag_r = lo + int(rng.randint_below(hi - lo + 1, 1)[0])
            mag_c = lo + int(rng.randint_below(hi - lo + 1, 1)[0])
            sign_r = 1 if rng.bernoulli(0.5, 1)[0] else -1
            sign_c = 1 if rng.bernoulli(0.5, 1)[0] else -1
            v_r.append(sign_r * mag_r)
            v_c.append(sign_c * mag_c)
        for t in range(length):
            out[idx, t] = render_frame(h, w, sprites, rows, cols)
            for k, sp in enumerate(sprites):
                rows[k], v_r[k] = advance_position(rows[k], v_r[k], h - sp.shape[0])
                cols[k], v_c[k] = advance_position(cols[k], v_c[k], w - sp.shape[1])
    return out


# ---------------------------------------------------------------------------
# windowing and splits

def windowize(raw: np.ndarray, t_in: int, k: int, stride: int = 1,
              target_channels=None, channel_names=None) -> Dataset:
    """Sliding windows over a raw [T, N, F] series; the context/target
    boundary sits at t_in."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ConfigError(f"raw series must be [T, N, F], got shape {list(raw.shape)}")
    if t_in < 1 or k < 1 or stride < 1:
        raise ConfigError(f"t_in, k, stride must be >= 1, got {t_in}, {k}, {stride}")
    total, nodes, channels = raw.shape
    window = t_in + k
    if total < window:
        raise ConfigError(
            f"series length {total} shorter than window {t_in}+{k}")
    if target_channels is None:
        target_channels = list(range(channels))
    target_channels = [int(c) for c in target_channels]
    for c in target_channels:
        if not 0 <= c < channels:
            raise ConfigError(f"target channel {c} out of range for F={channels}")
    if channel_names is None:
        channel_names = [f"ch{i}" for i in range(channels)]

    starts = np.arange(0, total - window + 1, stride, dtype=np.int64)
    contexts = np.stack([raw[s:s + t_in] for s in starts])
    targets = np.stack([raw[s + t_in:s + window][:, :, target_channels]
                        for s in starts])
    meta = DataMeta(channel_names=list(channel_names),
                    target_channels=target_channels,
                    window_starts=starts)
    return Dataset(contexts=contexts, targets=targets, meta=meta)


def windowize_sequences(seqs: np.ndarray, t_in: int, k: int,
                        grid: tuple) -> Dataset:
    """Independent frame sequences [count, T, H, W] -> one sample each,
    frames flattened to [T, H*W, 1]."""
    seqs = np.asarray(seqs, dtype=np.float64)
    if seqs.ndim != 4:
        raise ConfigError(
            f"expected [count, T, H, W] frames, got shape {list(seqs.shape)}")
    count, total, h, w = seqs.shape
    if total < t_in + k:
        raise ConfigError(
            f"sequence length {total} shorter than window {t_in}+{k}")
    flat = seqs.reshape(count, total, h * w, 1)
    meta = DataMeta(channel_names=["intensity"], target_channels=[0],
                    grid=(h, w), window_starts=None)
    return Dataset(contexts=flat[:, :t_in].copy(),
                   targets=flat[:, t_in:t_in + k].copy(), meta=meta)


def split(dataset: Dataset, fractions):
    """Chronological (train, val, test) partition.

    Windowed series are cut at raw-time boundaries and windows that
    straddle a boundary are dropped (count recorded in meta); banks of
    independent sequences are cut by sample index.
    """
    f1, f2, f3 = (float(x) for x in fractions)
    if min(f1, f2, f3) < 0 or abs(f1 + f2 + f3 - 1.0) > 1e-9:
        raise ConfigError(
            f"split fractions must be non-negative and sum to 1, got {fractions}")
    num = len(dataset)
    starts = dataset.meta.window_starts
    if starts is None:
        b1 = int(f1 * num)
        b2 = int((f1 + f2) * num)
        masks = [np.zeros(num, dtype=bool) for _ in range(3)]
        masks[0][:b1] = True
        masks[1][b1:b2] = True
        masks[2][b2:] = True
    else:
        window = dataset.contexts.shape[1] + dataset.targets.shape[1]
        horizon = int(starts[-1]) + window
        b1 = int(f1 * horizon)
        b2 = int((f1 + f2) * horizon)
        ends = starts + window
        masks = [
            ends <= b1,
            (starts >= b1) & (ends <= b2),
            starts >= b2,
        ]
    dropped = num - int(sum(m.sum() for m in masks))
    parts = []
    for frac, mask in zip((f1, f2, f3), masks):
        if frac > 1e-9 and not mask.any():
            raise ConfigError(
                f"split fraction {frac} produced an empty partition "
                f"({num} windows total)")
        meta = dataclasses.replace(
            dataset.meta,
            window_starts=None if starts is None else starts[mask],
            dropped_windows=dropped)
        parts.append(Dataset(contexts=dataset.contexts[mask],
                             targets=dataset.targets[mask], meta=meta))
    return tuple(parts)


# ---------------------------------------------------------------------------
# normalization

def normalize(train: Dataset, *others: Dataset):
    """Z-score every channel using statistics from the TRAIN contexts
    only; returns (train', *others')."""
    if train.meta.normalized:
        raise ConfigError("dataset is already normalized")
    if len(train) == 0:
        raise ConfigError("cannot normalize an empty training split")
    flat = train.contexts.reshape(-1, train.contexts.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for c, s in enumerate(std):
        if s <= 0:
            name = train.meta.channel_names[c]
            raise ConfigError(f"channel {name} has zero variance in the training split")

    out = []
    for ds in (train,) + others:
        if ds.meta.normalized:
            raise ConfigError("dataset is already normalized")
        tc = ds.meta.target_channels
        meta = dataclasses.replace(ds.meta, mean=mean, std=std, normalized=True)
        out.append(Dataset(
            contexts=(ds.contexts - mean) / std,
            targets=(ds.targets - mean[tc]) / std[tc],
            meta=meta))
    return tuple(out)


def denormalize(predictions: np.ndarray, meta: DataMeta) -> np.ndarray:
    """Map normalized target-channel predictions back to raw units."""
    if meta.mean is None or meta.std is None:
        raise ConfigError("meta carries no normalization statistics")
    tc = meta.target_channels
    return predictions * meta.std[tc] + meta.mean[tc]


# ---------------------------------------------------------------------------
# file formats

_CSV_HEADER = "time,node,channel,value"


def write_series_csv(series: np.ndarray, path):
    """Dense long-format CSV; %.17g keeps float64 values exact."""
    series = np.asarray(series, dtype=np.float64)
    total, nodes, channels = series.shape
    with open(path, "w") as fh:
        fh.write(_CSV_HEADER + "\n")
        for t in range(total):
            for n in range(nodes):
                for f in range(channels):
                    fh.write(f"{t},{n},{f},{series[t, n, f]:.17g}\n")


def load_series_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != _CSV_HEADER:
            raise DataFormatError(
                f"expected header {_CSV_HEADER!r}, got {header!r}")
        entries = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataFormatError(
                    f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, n, f = int(parts[0]), int(parts[1]), int(parts[2])
                v = float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
            if (t, n, f) in entries:
                raise DataFormatError(
                    f"line {lineno}: duplicate entry for time={t}, node={n}, channel={f}")
            entries[(t, n, f)] = v
    if not entries:
        raise DataFormatError("CSV contains no data rows")
    total = max(k[0] for k in entries) + 1
    nodes = max(k[1] for k in entries) + 1
    channels = max(k[2] for k in entries) + 1
    series = np.empty((total, nodes, channels))
    for t in range(total):
        for n in range(nodes):
            for f in range(channels):
                key = (t, n, f)
                if key not in entries:
                    raise DataFormatError(
                        f"missing entry for time={t}, node={n}, channel={f}")
                series[t, n, f] = entries[key]
    return series


_FRAME_MAGIC = b"TPGFRAME"
_FRAME_VERSION = 1


def write_frame_sequences(seqs: np.ndarray, path):
    """Documented binary: magic, version, T, H, W, count as little-endian
    u32 after the 8-byte magic, then float64 planes in sequence order."""
    seqs = np.ascontiguousarray(seqs, dtype=np.float64)
    if seqs.ndim != 4:
        raise ConfigError(
            f"expected [count, T, H, W] frames, got shape {list(seqs.shape)}")
    count, total, h, w = seqs.shape
    with open(path, "wb") as fh:
        fh.write(_FRAME_MAGIC)
        fh.write(struct.pack("<5I", _FRAME_VERSION, total, h, w, count))
        fh.write(seqs.astype("<f8").tobytes())


def load_frame_sequences(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_FRAME_MAGIC) + 20:
        raise DataFormatError("frame file truncated before header end")
    if blob[:len(_FRAME_MAGIC)] != _FRAME_MAGIC:
        raise DataFormatError(
            f"bad frame-file magic {blob[:len(_FRAME_MAGIC)]!r}")
    version, total, h, w, count = struct.unpack_from("<5I", blob, len(_FRAME_MAGIC))
    if version != _FRAME_VERSION:
        raise DataFormatError(f"unsupported frame-file version {version}")
    need = len(_FRAME_MAGIC) + 20 + count * total * h * w * 8
    if len(blob) != need:
        raise DataFormatError(
            f"frame file size {len(blob)} does not match header (expected {need})")
    data = np.frombuffer(blob, dtype="<f8", offset=len(_FRAME_MAGIC) + 20)
    return data.reshape(count, total, h, w).astype(np.float64)


_IDX_IMAGE_MAGIC = 0x00000803


def load_idx_images(path) -> np.ndarray:
    """Standard IDX unsigned-byte image file -> [count, H, W] in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise DataFormatError("IDX file shorter than its 16-byte header")
    magic = int.from_bytes(blob[0:4], "big")
    if magic != _IDX_IMAGE_MAGIC:
        raise DataFormatError(
            f"bad IDX magic 0x{magic:08X}, expected 0x{_IDX_IMAGE_MAGIC:08X}")
    count = int.from_bytes(blob[4:8], "big")
    rows = int.from_bytes(blob[8:12], "big")
    cols = int.from_bytes(blob[12:16], "big")
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise DataFormatError(
            f"IDX file truncated: {len(blob)} bytes, header implies {need}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols,
                           offset=16)
    return pixels.reshape(count, rows, cols).astype(np.float64) / 255.0
