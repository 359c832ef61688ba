"""Seq2Seq encoder-decoder assembly and checkpoint IO.

Wiring conventions (the usual ones, fixed here once):
  - encoder and decoder are separate single-layer LSTMs, no shared weights
  - decoder initial state = encoder final state
  - decoder initial input = last context frame
  - frames/measurement grids are flattened before reaching this module:
    unbatched arrays are [T, F_in], batched are [B, T, F_in]

When the model predicts only a subset of the input channels, feedback
into the next decoder step overwrites the predicted slots of the last
observed context frame (the carrier); the remaining slots stay frozen at
their last observed values. `target_slots` records that mapping and is
persisted in checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, DimensionError
from . import nn
from .rng import RngState


@dataclass
class Seq2SeqParams:
    encoder: nn.LstmParams
    decoder: nn.LstmParams
    projection: nn.LinearParams
    hidden: int
    f_in: int
    f_out: int
    target_slots: np.ndarray  # f_out indices into the f_in input layout

    def tensors(self):
        """Parameter arrays in declared (checkpoint) order."""
        return [self.encoder.w_x, self.encoder.w_h, self.encoder.b,
                self.decoder.w_x, self.decoder.w_h, self.decoder.b,
                self.projection.w, self.projection.b]


@dataclass
class ForecastRequest:
    context: np.ndarray  # [T_in, ...] flattening to [T_in, F_in]
    horizon: int

    def __post_init__(self):
        if self.context.shape[0] < 1:
            raise ConfigError("context must contain at least one step")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")


def make_target_slots(nodes: int, channels: int, target_channels) -> np.ndarray:
    """Input-layout indices of the predicted channels, node-major, for
    raw frames flattened as [node, channel]."""
    slots = [n * channels + c for n in range(nodes) for c in target_channels]
    return np.asarray(slots, dtype=np.int64)


def init_seq2seq(hidden: int, f_in: int, f_out: int, rng: RngState,
                 target_slots=None, scale: float = 0.1) -> Seq2SeqParams:
    """Draw order: encoder, decoder, projection."""
    if hidden < 1 or f_in < 1 or f_out < 1:
        raise ConfigError(
            f"hidden, f_in, f_out must be >= 1, got {hidden}, {f_in}, {f_out}")
    if target_slots is None:
        if f_out != f_in:
            raise ConfigError("target_slots required when f_out != f_in")
        target_slots = np.arange(f_in, dtype=np.int64)
    target_slots = np.asarray(target_slots, dtype=np.int64)
    if target_slots.shape != (f_out,):
        raise ConfigError(
            f"target_slots must have length f_out={f_out}, got {target_slots.shape}")
    if target_slots.size and (target_slots.min() < 0 or target_slots.max() >= f_in):
        raise ConfigError("target_slots entries must index into [0, f_in)")
    return Seq2SeqParams(
        encoder=nn.init_lstm(hidden, f_in, rng, scale),
        decoder=nn.init_lstm(hidden, f_in, rng, scale),
        projection=nn.init_linear(f_out, hidden, rng, scale),
        hidden=hidden, f_in=f_in, f_out=f_out, target_slots=target_slots)


def flatten_steps(x: np.ndarray, f_in: int) -> np.ndarray:
    """[T, ...] -> [T, F_in] or [B, T, ...] -> [B, T, F_in]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim >= 2 and int(np.prod(x.shape[1:])) == f_in:
        return x.reshape(x.shape[0], f_in)
    if x.ndim >= 3 and int(np.prod(x.shape[2:])) == f_in:
        return x.reshape(x.shape[0], x.shape[1], f_in)
    raise DimensionError(
        f"cannot flatten shape {list(x.shape)} to feature width {f_in}")


def embed_targets(carrier: np.ndarray, values: np.ndarray,
                  slots: np.ndarray) -> np.ndarray:
    """Overwrite the predicted slots of a carrier frame; other slots keep
    the carrier's values."""
    if carrier.shape[:-1] != values.shape[:-1] or values.shape[-1] != slots.shape[0]:
        raise DimensionError(
            f"embed shapes incompatible: carrier {list(carrier.shape)}, "
            f"values {list(values.shape)}, slots {slots.shape[0]}")
    out = carrier.copy()
    out[..., slots] = values
    return out


def encode_full(context: np.ndarray, p: Seq2SeqParams):
    """Run the encoder over all steps; returns (final state, caches)."""
    context = flatten_steps(context, p.f_in)
    batched = context.ndim == 3
    steps = context.shape[1] if batched else context.shape[0]
    state = nn.zero_state(p.hidden, context.shape[0] if batched else None)
    caches = []
    for t in range(steps):
        x = context[:, t] if batched else context[t]
        state, cache = nn.lstm_step(x, state, p.encoder)
        caches.append(cache)
    return state, caches


def encode(context: np.ndarray, p: Seq2SeqParams) -> nn.LstmState:
    """Final encoder state after consuming the context in time order."""
    state, _ = encode_full(context, p)
    return state


def decode_step(prev_input: np.ndarray, state: nn.LstmState, p: Seq2SeqParams):
    """One decoder LSTM step plus the output projection."""
    new_state, step_cache = nn.lstm_step(prev_input, state, p.decoder)
    pred, lin_cache = nn.linear_forward(new_state.h, p.projection)
    return pred, new_state, (step_cache, lin_cache)


def rollout(req: ForecastRequest, p: Seq2SeqParams, input_selector=None) -> np.ndarray:
    """K sequential decode steps -> predictions [K, F_out].

    The first decoder input is the last context frame. After step s the
    selector is called as input_selector(s, own_feedback) where
    own_feedback is the carrier with the step-s prediction embedded; it
    returns the next decoder input. None means closed loop (always feed
    the model's own prediction). The selector runs K-1 times.
    """
    context = flatten_steps(req.context, p.f_in)
    if context.ndim != 2:
        raise DimensionError("rollout expects an unbatched [T_in, F_in] context")
    state = encode(context, p)
    carrier = context[-1]
    x = carrier
    preds = np.empty((req.horizon, p.f_out))
    for s in range(1, req.horizon + 1):
        pred, state, _ = decode_step(x, state, p)
        preds[s - 1] = pred
        if s < req.horizon:
            own = embed_targets(carrier, pred, p.target_slots)
            x = own if input_selector is None else np.asarray(
                input_selector(s, own), dtype=np.float64)
            if x.shape != (p.f_in,):
                raise DimensionError(
                    f"selector returned shape {list(x.shape)} at step {s}, "
                    f"expected [{p.f_in}]")
    return preds


# ---------------------------------------------------------------------------
# checkpoint format

_CKPT_MAGIC = b"TPGF"
_CKPT_VERSION = 1


def save_checkpoint(p: Seq2SeqParams, path):
    """Layout: 4-byte magic, then little-endian u32 version, hidden,
    f_in, f_out, n_slots, the slot table as u32, then every parameter
    tensor in declared order as little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<5I", _CKPT_VERSION, p.hidden, p.f_in, p.f_out,
                             p.target_slots.shape[0]))
        fh.write(p.target_slots.astype("<u4").tobytes())
        for t in p.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> Seq2SeqParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise DataFormatError("checkpoint truncated before header end")
    if blob[:4] != _CKPT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic {blob[:4]!r}")
    version, hidden, f_in, f_out, n_slots = struct.unpack_from("<5I", blob, 4)
    if version != _CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    if f_out != n_slots:
        raise DataFormatError(
            f"slot table length {n_slots} does not match f_out {f_out}")
    offset = 24
    if len(blob) < offset + 4 * n_slots:
        raise DataFormatError("checkpoint truncated inside slot table")
    slots = np.frombuffer(blob, dtype="<u4", count=n_slots,
                          offset=offset).astype(np.int64)
    offset += 4 * n_slots

    shapes = [(4 * hidden, f_in), (4 * hidden, hidden), (4 * hidden,),
              (4 * hidden, f_in), (4 * hidden, hidden), (4 * hidden,),
              (f_out, hidden), (f_out,)]
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if len(blob) < offset + 8 * n:
            raise DataFormatError("checkpoint truncated inside parameter data")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n,
                                    offset=offset).reshape(shape).copy())
        offset += 8 * n
    if offset != len(blob):
        raise DataFormatError(
            f"checkpoint has {len(blob) - offset} trailing bytes")
    return Seq2SeqParams(
        encoder=nn.LstmParams(w_x=arrays[0], w_h=arrays[1], b=arrays[2]),
        decoder=nn.LstmParams(w_x=arrays[3], w_h=arrays[4], b=arrays[5]),
        projection=nn.LinearParams(w=arrays[6], b=arrays[7]),
        hidden=hidden, f_in=f_in, f_out=f_out, target_slots=slots)
