"""Loss, Adam, BPTT, and the three training drivers: teacher forcing,
scheduled sampling, and the two-stage half-timescale curriculum.

Per-iteration draw order (the determinism contract depends on it):
  1. batch sample indices, one randint_below call
  2. tau coin flips for decoder steps 2..K in step order, one bernoulli
     call per step; steps whose epsilon is exactly 0 or 1 consume no
     draws

Gradient-flow boundary: when a decoder input was sampled from ground
truth or from the frozen intermediate model, backpropagation treats it
as a constant; only inputs built from the model's own previous
prediction pass gradient back through the feedback path.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from . import metrics as mt
from . import nn
from .data import Dataset
from .model import (Seq2SeqParams, decode_step, encode_full, init_seq2seq,
                    make_target_slots)
from .rng import RngState
from .sampling import ScheduleConfig, Strategy, epsilon_for, inverse_sigmoid_epsilon

_TENSOR_NAMES = ["encoder.w_x", "encoder.w_h", "encoder.b",
                 "decoder.w_x", "decoder.w_h", "decoder.b",
                 "projection.w", "projection.b"]

# rng stream ids, xor-ed into the run seed
_STREAM_SCHEDULED = 0x5C
_STREAM_M1_INIT = 0x11
_STREAM_M2_INIT = 0x12
_STREAM_STAGE1 = 0x51
_STREAM_STAGE2 = 0x52


@dataclass
class TrainConfig:
    schedule: ScheduleConfig
    hidden: int = 32
    learning_rate: float = 1e-2
    batch_size: int = 32
    total_iters: int = 2000
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    warm_start_m2: bool = True
    seed: int = 0
    val_every: int = 50

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(
                f"adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.hidden < 1:
            raise ConfigError(f"hidden size must be >= 1, got {self.hidden}")
        if self.val_every < 1:
            raise ConfigError(f"val_every must be >= 1, got {self.val_every}")


@dataclass
class TrainState:
    iteration: int
    m: list
    v: list
    adam_t: int
    stage: str
    rng: RngState


@dataclass
class MetricsRow:
    iteration: int
    split: str
    metric: str
    value: float


def make_train_state(p: Seq2SeqParams, rng: RngState, stage: str = "main") -> TrainState:
    return TrainState(iteration=0,
                      m=[np.zeros_like(t) for t in p.tensors()],
                      v=[np.zeros_like(t) for t in p.tensors()],
                      adam_t=0, stage=stage, rng=rng)


def clone_params(p: Seq2SeqParams) -> Seq2SeqParams:
    return copy.deepcopy(p)


def copy_into(dst: Seq2SeqParams, src: Seq2SeqParams):
    for d, s in zip(dst.tensors(), src.tensors()):
        d[:] = s


# ---------------------------------------------------------------------------
# loss

def composite_loss(pred: np.ndarray, target: np.ndarray):
    """Sum over channels of per-channel MSE; channels are the last axis.

    Returns (total, per_channel). The mean inside each channel runs over
    every other axis (batch, time, node).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(
            f"loss shapes differ: {list(pred.shape)} vs {list(target.shape)}")
    if pred.ndim < 2:
        raise DimensionError("loss expects channels along a trailing axis")
    d = pred - target
    per_channel = np.mean(d * d, axis=tuple(range(pred.ndim - 1)))
    return float(per_channel.sum()), per_channel


def composite_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(total)/d(pred): 2 * residual / (elements per channel)."""
    n = int(np.prod(pred.shape[:-1]))
    return 2.0 * (pred - target) / n


# ---------------------------------------------------------------------------
# optimizer

def clip_gradients(grads: list, clip_norm: float) -> list:
    """Scale all gradients by clip_norm/norm when the global L2 norm
    exceeds clip_norm; otherwise return them bit-identical."""
    if not clip_norm > 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    sq = sum(float(np.sum(g * g)) for g in grads)
    norm = np.sqrt(sq)
    if norm <= clip_norm:
        return grads
    factor = clip_norm / norm
    return [g * factor for g in grads]


def adam_step(params: Seq2SeqParams, grads: list, state: TrainState,
              cfg: TrainConfig):
    """Standard Adam with bias correction; updates params in place."""
    tensors = params.tensors()
    if len(grads) != len(tensors):
        raise DimensionError(
            f"expected {len(tensors)} gradient tensors, got {len(grads)}")
    for name, g in zip(_TENSOR_NAMES, grads):
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.adam_t += 1
    t = state.adam_t
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)
    return params, state


# ---------------------------------------------------------------------------
# training-mode forward and backward

@dataclass
class RolloutCaches:
    enc_caches: list
    dec_caches: list  # [(lstm StepCache, linear cache), ...] per step
    carrier: np.ndarray
    taus: np.ndarray  # [B, K-1] decisions for inputs to steps 2..K


def forward_train(p: Seq2SeqParams, contexts: np.ndarray,
                  preferred: np.ndarray | None, taus: np.ndarray):
    """Batched rollout with per-step input mixing, keeping caches.

    contexts: [B, T_in, F_in]; taus: [B, K-1] in {0,1}; preferred:
    [B, K-1, F_out] values fed when tau=1 (ground truth, or the frozen
    intermediate model's estimates). The input to step s+1 is the last
    context frame with either the own prediction (tau=0) or the
    preferred value (tau=1) embedded at the target slots.
    """
    b, _, f_in = contexts.shape
    if f_in != p.f_in:
        raise DimensionError(
            f"contexts have width {f_in}, model expects {p.f_in}")
    k = taus.shape[1] + 1
    if k > 1 and (preferred is None or preferred.shape != (b, k - 1, p.f_out)):
        have = None if preferred is None else list(preferred.shape)
        raise DimensionError(
            f"preferred values must be [{b}, {k - 1}, {p.f_out}], got {have}")
    state, enc_caches = encode_full(contexts, p)
    carrier = contexts[:, -1]
    x = carrier
    preds = np.empty((b, k, p.f_out))
    dec_caches = []
    for s in range(1, k + 1):
        pred, state, caches = decode_step(x, state, p)
        preds[:, s - 1] = pred
        dec_caches.append(caches)
        if s < k:
            col = taus[:, s - 1][:, None]
            values = np.where(col == 1, preferred[:, s - 1], pred)
            x = carrier.copy()
            x[:, p.target_slots] = values
    return preds, RolloutCaches(enc_caches=enc_caches, dec_caches=dec_caches,
                                carrier=carrier, taus=taus)


def rollout_batch(p: Seq2SeqParams, contexts: np.ndarray, horizon: int) -> np.ndarray:
    """Closed-loop batched inference: every feedback is the model's own
    prediction. Returns [B, K, F_out]."""
    b = contexts.shape[0]
    taus = np.zeros((b, horizon - 1), dtype=np.int64)
    preferred = np.zeros((b, horizon - 1, p.f_out)) if horizon > 1 else None
    preds, _ = forward_train(p, contexts, preferred, taus)
    return preds


def bptt(p: Seq2SeqParams, caches: RolloutCaches, dpreds: np.ndarray) -> list:
    """Reverse-time gradients of a forward_train rollout.

    Returns gradients aligned with params.tensors(). Inputs that were
    sampled from the preferred source (tau=1) are constants; only
    own-prediction feedback (tau=0) passes gradient from step s+1's
    input back to prediction s.
    """
    k = len(caches.dec_caches)
    if k == 0:
        raise DimensionError("no decoder caches to backpropagate through")
    if dpreds.shape[1] != k:
        raise DimensionError(
            f"loss grads cover {dpreds.shape[1]} steps, rollout had {k}")
    slots = p.target_slots
    g_enc = nn.LstmParams(w_x=np.zeros_like(p.encoder.w_x),
                          w_h=np.zeros_like(p.encoder.w_h),
                          b=np.zeros_like(p.encoder.b))
    g_dec = nn.LstmParams(w_x=np.zeros_like(p.decoder.w_x),
                          w_h=np.zeros_like(p.decoder.w_h),
                          b=np.zeros_like(p.decoder.b))
    g_proj = nn.LinearParams(w=np.zeros_like(p.projection.w),
                             b=np.zeros_like(p.projection.b))

    dh = np.zeros_like(caches.dec_caches[-1][0].h_prev)
    dc = np.zeros_like(dh)
    pending_dx = None  # gradient w.r.t. the input of step s+1
    for s in range(k, 0, -1):
        dpred = dpreds[:, s - 1].copy()
        if pending_dx is not None:
            # feedback path: only samples that consumed their own
            # prediction (tau=0) let gradient through
            own = (caches.taus[:, s - 1] == 0).astype(np.float64)[:, None]
            dpred += pending_dx[:, slots] * own
        step_cache, lin_cache = caches.dec_caches[s - 1]
        dh_lin, gp = nn.linear_backward(dpred, lin_cache, p.projection)
        g_proj.w += gp.w
        g_proj.b += gp.b
        dx, dstate, gd = nn.lstm_step_backward(dh + dh_lin, dc, step_cache,
                                               p.decoder)
        g_dec.w_x += gd.w_x
        g_dec.w_h += gd.w_h
        g_dec.b += gd.b
        dh, dc = dstate.h, dstate.c
        pending_dx = dx

    # decoder initial state is the encoder final state
    for cache in reversed(caches.enc_caches):
        _, dstate, ge = nn.lstm_step_backward(dh, dc, cache, p.encoder)
        g_enc.w_x += ge.w_x
        g_enc.w_h += ge.w_h
        g_enc.b += ge.b
        dh, dc = dstate.h, dstate.c
    return [g_enc.w_x, g_enc.w_h, g_enc.b,
            g_dec.w_x, g_dec.w_h, g_dec.b,
            g_proj.w, g_proj.b]


# ---------------------------------------------------------------------------
# dataset adapters

def flatten_dataset(ds: Dataset):
    """[num, T, N, F] / [num, K, N, Ft] -> flattened pairs plus (N, Ft)."""
    num, t_in, n, f = ds.contexts.shape
    k, ft = ds.targets.shape[1], ds.targets.shape[3]
    return (ds.contexts.reshape(num, t_in, n * f),
            ds.targets.reshape(num, k, n * ft), (n, ft))


def _closed_loop_loss(p: Seq2SeqParams, ctx: np.ndarray, tgt: np.ndarray,
                      shape) -> float:
    n, ft = shape
    preds = rollout_batch(p, ctx, tgt.shape[1])
    b, k = tgt.shape[0], tgt.shape[1]
    total, _ = composite_loss(preds.reshape(b, k, n, ft),
                              tgt.reshape(b, k, n, ft))
    return total


# ---------------------------------------------------------------------------
# inner driver

def _run_training(p: Seq2SeqParams, groups, eval_groups, cfg: TrainConfig,
                  rng: RngState, state: TrainState, curves: list,
                  start_iter: int, end_iter: int, eps_fn, preferred_fn,
                  prefix: str = "", stage_fn=None):
    """Shared minibatch loop.

    groups: list of (ctx [num,T,f_in], tgt [num,K,f_out], (N,Ft)) cycled
    per iteration. eval_groups: {split: [same triples]} for cadence
    rows. eps_fn(i, s) gives the tau probability for the input of step
    s+1 at global iteration i. preferred_fn(group_idx, sample_idx) gives
    the tau=1 values [B, K-1, f_out].
    """
    best = clone_params(p)
    best_loss = np.inf
    has_val = "val" in eval_groups

    def cadence(i):
        nonlocal best_loss
        rows = {}
        for split, parts in eval_groups.items():
            losses = [_closed_loop_loss(p, ctx, tgt, shape)
                      for ctx, tgt, shape in parts]
            rows[split] = float(np.mean(losses))
            curves.append(MetricsRow(i, split, prefix + "loss", rows[split]))
        if has_val and rows["val"] < best_loss:
            best_loss = rows["val"]
            copy_into(best, p)
        if not all(np.isfinite(v) for v in rows.values()):
            raise FloatingPointError("non-finite validation loss")

    try:
        # overflow is allowed to produce inf here; the finiteness checks
        # below turn it into a DivergenceError with the best checkpoint
        with np.errstate(over="ignore", invalid="ignore"):
            _loop(p, groups, cfg, rng, state, curves, start_iter, end_iter,
                  eps_fn, preferred_fn, prefix, stage_fn, cadence)
    except FloatingPointError as exc:
        raise DivergenceError(str(exc), params=best, curves=curves) from exc
    if has_val and np.isfinite(best_loss):
        copy_into(p, best)
    return p, state


def _loop(p, groups, cfg, rng, state, curves, start_iter, end_iter,
          eps_fn, preferred_fn, prefix, stage_fn, cadence) -> None:
    for i in range(start_iter, end_iter):
        state.iteration = i
        if stage_fn is not None:
            state.stage = stage_fn(i)
        group_idx = (i - start_iter) % len(groups)
        ctx_all, tgt_all, shape = groups[group_idx]
        num = ctx_all.shape[0]
        k = tgt_all.shape[1]

        idx = rng.randint_below(num, cfg.batch_size)
        ctx = ctx_all[idx]
        tgt = tgt_all[idx]
        taus = np.empty((cfg.batch_size, k - 1), dtype=np.int64)
        for s in range(1, k):
            eps = eps_fn(i, s)
            if eps >= 1.0:
                taus[:, s - 1] = 1
            elif eps <= 0.0:
                taus[:, s - 1] = 0
            else:
                taus[:, s - 1] = rng.bernoulli(eps, cfg.batch_size)
        preferred = preferred_fn(group_idx, idx) if k > 1 else None

        preds, caches = forward_train(p, ctx, preferred, taus)
        n, ft = shape
        b = cfg.batch_size
        total, _ = composite_loss(preds.reshape(b, k, n, ft),
                                  tgt.reshape(b, k, n, ft))
        if not np.isfinite(total):
            raise FloatingPointError("non-finite training loss")
        if i % cfg.val_every == 0:
            curves.append(MetricsRow(i, "train", prefix + "loss", total))
            cadence(i)
        dpreds = composite_loss_grad(preds.reshape(b, k, n, ft),
                                     tgt.reshape(b, k, n, ft)).reshape(b, k, -1)
        grads = bptt(p, caches, dpreds)
        grads = clip_gradients(grads, cfg.clip_norm)
        adam_step(p, grads, state, cfg)
    if end_iter > start_iter:
        state.iteration = end_iter
        cadence(end_iter)


# ---------------------------------------------------------------------------
# public drivers

def evaluate(p: Seq2SeqParams, ds: Dataset, split: str = "test",
             iteration: int = 0) -> list:
    """Closed-loop metrics over a whole split."""
    if len(ds) == 0:
        raise ConfigError(f"cannot evaluate an empty {split} split")
    ctx, tgt, (n, ft) = flatten_dataset(ds)
    k = tgt.shape[1]
    preds = rollout_batch(p, ctx, k)
    num = ctx.shape[0]
    pr = preds.reshape(num, k, n, ft)
    tg = tgt.reshape(num, k, n, ft)
    total, per_channel = composite_loss(pr, tg)

    rows = [MetricsRow(iteration, split, "loss", total),
            MetricsRow(iteration, split, "rmse", mt.rmse(pr, tg)),
            MetricsRow(iteration, split, "mae", mt.mae(pr, tg))]
    names = [ds.meta.channel_names[c] for c in ds.meta.target_channels]
    for j, name in enumerate(names):
        rows.append(MetricsRow(iteration, split, f"rmse.{name}",
                               mt.rmse(pr[..., j], tg[..., j])))
        rows.append(MetricsRow(iteration, split, f"mae.{name}",
                               mt.mae(pr[..., j], tg[..., j])))
    if ds.meta.grid is not None:
        h, w = ds.meta.grid
        frames_p = np.clip(pr.reshape(num, k, h, w), 0.0, 1.0)
        frames_t = tg.reshape(num, k, h, w)
        vals = [mt.ssim_per_frame(frames_p[i, t], frames_t[i, t])
                for i in range(num) for t in range(k)]
        rows.append(MetricsRow(iteration, split, "ssim", float(np.mean(vals))))
    return rows


def predict_closed_loop(p: Seq2SeqParams, ds: Dataset) -> np.ndarray:
    """Closed-loop predictions for every sample, [num, K, N, Ft]."""
    ctx, tgt, (n, ft) = flatten_dataset(ds)
    preds = rollout_batch(p, ctx, tgt.shape[1])
    return preds.reshape(len(ds), tgt.shape[1], n, ft)


def evaluate_horizon(p: Seq2SeqParams, ds: Dataset, split: str = "test",
                     iteration: int = 0) -> list:
    """Closed-loop error resolved per forecast step.

    Emits one rmse.h<s> and one mae.h<s> row for each step s = 1..K,
    exposing how error accumulates along the horizon.
    """
    if len(ds) == 0:
        raise ConfigError(f"cannot evaluate an empty {split} split")
    ctx, tgt, (n, ft) = flatten_dataset(ds)
    k = tgt.shape[1]
    preds = rollout_batch(p, ctx, k)
    num = ctx.shape[0]
    pr = preds.reshape(num, k, n, ft)
    tg = tgt.reshape(num, k, n, ft)
    rows = []
    for s in range(k):
        rows.append(MetricsRow(iteration, split, f"rmse.h{s + 1}",
                               mt.rmse(pr[:, s], tg[:, s])))
    for s in range(k):
        rows.append(MetricsRow(iteration, split, f"mae.h{s + 1}",
                               mt.mae(pr[:, s], tg[:, s])))
    return rows


def init_model(train: Dataset, cfg: TrainConfig) -> Seq2SeqParams:
    """Fresh model sized for a dataset, seeded from the config.

    Uses the same init stream as a TPG run's first model, so a scheduled
    baseline and a TPG run started from one seed share their starting
    point.
    """
    n = train.contexts.shape[2]
    f = train.contexts.shape[3]
    slots = make_target_slots(n, f, train.meta.target_channels)
    return init_seq2seq(cfg.hidden, n * f, len(slots),
                        RngState(cfg.seed).split(_STREAM_M1_INIT),
                        target_slots=slots)


def train_scheduled(p: Seq2SeqParams, splits, cfg: TrainConfig):
    """Teacher forcing or scheduled sampling over (train, val, test).

    Returns (params, curves). The preferred source is always ground
    truth; epsilon follows the configured schedule.
    """
    if cfg.schedule.strategy not in (Strategy.TEACHER_FORCING,
                                     Strategy.SCHEDULED_SAMPLING):
        raise ConfigError(
            f"train_scheduled handles teacher_forcing/scheduled_sampling, "
            f"got {cfg.schedule.strategy.value}")
    train, val, test = splits
    if len(train) == 0:
        raise ConfigError("training split is empty")
    ctx, tgt, shape = flatten_dataset(train)
    groups = [(ctx, tgt, shape)]
    eval_groups = {}
    for name, ds in (("val", val), ("test", test)):
        if ds is not None and len(ds) > 0:
            eval_groups[name] = [flatten_dataset(ds)]

    curves: list = []
    rng = RngState(cfg.seed).split(_STREAM_SCHEDULED)
    state = make_train_state(p, rng)

    def eps_fn(i, s):
        return epsilon_for(cfg.schedule, i, s + 1)

    def preferred_fn(group_idx, idx):
        return tgt[idx][:, :-1]

    p, state = _run_training(p, groups, eval_groups, cfg, rng, state, curves,
                             0, cfg.total_iters, eps_fn, preferred_fn)
    for name, ds in (("val", val), ("test", test)):
        if ds is not None and len(ds) > 0:
            curves.extend(evaluate(p, ds, name, cfg.total_iters))
    return p, curves


def _half_timescale_groups(ds: Dataset):
    """Parity-subsampled (ctx, tgt, shape) pairs, odd half first.

    Target step 1 anchors the parity: the odd half holds target steps
    1, 3, 5, ... and the context frames lying on the same stride-2 grid;
    the even half holds the rest.
    """
    ctx, tgt, shape = flatten_dataset(ds)
    t_in = ctx.shape[1]
    odd = (ctx[:, t_in % 2::2], tgt[:, 0::2], shape)
    even = (ctx[:, (t_in + 1) % 2::2], tgt[:, 1::2], shape)
    return odd, even


def train_tpg(splits, cfg: TrainConfig):
    """Two-stage curriculum; returns (m1 params, m2 params, curves).

    Stage 1 trains one half-timescale model on the odd and even target
    subsequences (alternating per iteration) with scheduled sampling.
    Stage 2 freezes it, precomputes its closed-loop estimates for every
    training window, and trains the full-timescale model whose tau=1
    decoder inputs come from those estimates, annealed by the
    index-aware decay.
    """
    if cfg.schedule.strategy is not Strategy.TPG:
        raise ConfigError(f"train_tpg requires the tpg strategy, "
                          f"got {cfg.schedule.strategy.value}")
    train, val, test = splits
    if len(train) == 0:
        raise ConfigError("training split is empty")
    k = train.targets.shape[1]
    if k < 2:
        raise ConfigError(f"tpg needs horizon >= 2 to subsample, got {k}")
    stage1 = cfg.schedule.stage1_iters
    if stage1 >= cfg.total_iters:
        raise ConfigError(
            f"stage1_iters {stage1} must be < total_iters {cfg.total_iters}")
    if stage1 + cfg.schedule.transition_iters != cfg.total_iters:
        raise ConfigError(
            f"stage1_iters {stage1} + transition_iters "
            f"{cfg.schedule.transition_iters} must equal total_iters "
            f"{cfg.total_iters}")

    ctx, tgt, shape = flatten_dataset(train)
    f_in = ctx.shape[2]
    f_out = tgt.shape[2]
    n, ft = shape
    slots = make_target_slots(n, train.contexts.shape[3],
                              train.meta.target_channels)

    curves: list = []

    # stage 1: half-timescale model on both parity halves
    m1 = init_seq2seq(cfg.hidden, f_in, f_out,
                      RngState(cfg.seed).split(_STREAM_M1_INIT),
                      target_slots=slots)
    groups1 = list(_half_timescale_groups(train))
    eval1 = {}
    for name, ds in (("val", val), ("test", test)):
        if ds is not None and len(ds) > 0:
            eval1[name] = list(_half_timescale_groups(ds))
    rng1 = RngState(cfg.seed).split(_STREAM_STAGE1)
    state1 = make_train_state(m1, rng1, stage="M1")
    ss = ScheduleConfig(strategy=Strategy.SCHEDULED_SAMPLING, lam=cfg.schedule.lam)

    def eps1(i, s):
        return inverse_sigmoid_epsilon(i, ss.lam)

    def preferred1(group_idx, idx):
        return groups1[group_idx][1][idx][:, :-1]

    m1, state1 = _run_training(m1, groups1, eval1, cfg, rng1, state1, curves,
                               0, stage1, eps1, preferred1, prefix="m1.",
                               stage_fn=lambda i: "M1")

    # stage 2: frozen m1 feeds the full-timescale model
    m2 = (clone_params(m1) if cfg.warm_start_m2 else
          init_seq2seq(cfg.hidden, f_in, f_out,
                       RngState(cfg.seed).split(_STREAM_M2_INIT),
                       target_slots=slots))

    # m1's closed-loop estimates, interleaved back to full order [num, K, f_out]
    odd_ctx = groups1[0][0]
    even_ctx = groups1[1][0]
    m1_odd = rollout_batch(m1, odd_ctx, (k + 1) // 2)
    m1_even = rollout_batch(m1, even_ctx, k // 2)
    m1_full = np.empty((ctx.shape[0], k, f_out))
    m1_full[:, 0::2] = m1_odd
    m1_full[:, 1::2] = m1_even

    groups2 = [(ctx, tgt, shape)]
    eval2 = {}
    for name, ds in (("val", val), ("test", test)):
        if ds is not None and len(ds) > 0:
            eval2[name] = [flatten_dataset(ds)]
    rng2 = RngState(cfg.seed).split(_STREAM_STAGE2)
    state2 = make_train_state(m2, rng2, stage="Transition")

    def eps2(i, s):
        return epsilon_for(cfg.schedule, i, s + 1)

    def preferred2(group_idx, idx):
        return m1_full[idx][:, :-1]

    def stage2_label(i):
        return "M2Solo" if epsilon_for(cfg.schedule, i, 2) < 1e-3 else "Transition"

    m2, state2 = _run_training(m2, groups2, eval2, cfg, rng2, state2, curves,
                               stage1, cfg.total_iters, eps2, preferred2,
                               prefix="m2.", stage_fn=stage2_label)
    for name, ds in (("val", val), ("test", test)):
        if ds is not None and len(ds) > 0:
            curves.extend(evaluate(m2, ds, name, cfg.total_iters))
    return m1, m2, curves
