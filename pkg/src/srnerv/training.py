"""Per-instance fitting: loss, Adam, cosine schedule, pruning, QAT.

The whole training story is overfitting one video: sample frames on a
seeded permutation schedule, render them, descend on L1 + lambda*(1-SSIM),
then prune the smallest mixing weights globally and finish with a short
quantization-aware phase (fake-quantized forward, straight-through
gradients) so the weights survive the integer lattice they will be
serialized on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import codec
from . import tensor as tc
from .errors import ConfigError, DivergenceError
from .metrics import psnr
from .model import ModelConfig, ParameterStore, build_model, generate
from .tensor import ShapeError, Tensor


@dataclass
class TrainConfig:
    epochs: int = 200  # desk-scale default; full-scale runs use 300
    lr_max: float = 2e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ssim_weight: float = 0.3
    prune_fraction: float = 0.15
    qat_bits: int = 6
    qat_epoch_fraction: float = 0.1
    batch: int = 1
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ConfigError(f"prune_fraction must be in [0, 1), got {self.prune_fraction}")
        if not 2 <= self.qat_bits <= 8:
            raise ConfigError(f"qat_bits must be in [2, 8], got {self.qat_bits}")
        if self.ssim_weight < 0:
            raise ConfigError("ssim_weight must be non-negative")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("epochs must be >= 0 and batch >= 1")
        return self


# ---------------------------------------------------------------------------
# loss


def ssim_value(a: tc.Tensor, b: tc.Tensor, sigma: float = 1.5, K: int = 11,
               k1: float = 0.01, k2: float = 0.03) -> tc.Tensor:
    """Differentiable single-scale SSIM; numerically matches metrics.ssim."""
    c1, c2 = k1 * k1, k2 * k2
    blur = lambda t: tc.gaussian_blur(t, sigma, K)
    ma, mb = blur(a), blur(b)
    va = blur(a * a) - ma * ma
    vb = blur(b * b) - mb * mb
    cov = blur(a * b) - ma * mb
    num = (2.0 * ma * mb + c1) * (2.0 * cov + c2)
    den = (ma * ma + mb * mb + c1) * (va + vb + c2)
    return (num / den).mean()


def loss(pred: tc.Tensor, target, ssim_weight: float) -> tc.Tensor:
    """Mean absolute error plus ssim_weight * (1 - SSIM)."""
    if not isinstance(target, Tensor):
        target = tc.constant(np.asarray(target))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    l1 = (pred - target).abs().mean()
    if ssim_weight == 0.0:
        return l1
    return l1 + ssim_weight * (1.0 - ssim_value(pred, target))


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(store: ParameterStore) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros(store.params[n].shape, dtype=np.float64) for n in store.names()},
        v={n: np.zeros(store.params[n].shape, dtype=np.float64) for n in store.names()},
    )


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray],
              opt: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam; pruned entries get no update and stay zero."""
    opt.step += 1
    bc1 = 1.0 - beta1 ** opt.step
    bc2 = 1.0 - beta2 ** opt.step
    for name, g in grads.items():
        p = store.params[name]
        if g.shape != p.values.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {p.values.shape}")
        g = g.astype(np.float64)
        m = opt.m[name] = beta1 * opt.m[name] + (1.0 - beta1) * g
        v = opt.v[name] = beta2 * opt.v[name] + (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new = p.values - update.astype(p.values.dtype)
        mask = store.masks.get(name)
        if mask is not None:
            new[mask] = 0.0
        p.values = new


# ---------------------------------------------------------------------------
# fitting


def _frame_schedule(rng: np.random.Generator, epochs: int, T: int, batch: int):
    """Fixed permutation schedule: per epoch, shuffled frames split into batches."""
    steps = []
    for _ in range(epochs):
        perm = rng.permutation(T)
        for i in range(0, T, batch):
            steps.append(perm[i:i + batch])
    return steps


def _fake_quant(w: Tensor, mask, bits: int) -> Tensor:
    # straight-through: forward is the dequantized lattice point, gradient
    # passes unchanged
    dq = codec.fake_quantize(w.values, mask, bits).astype(np.float64)
    return tc._node(dq, (w,), lambda g: (g,))


def _forward_store(store: ParameterStore, fake_bits: int | None) -> ParameterStore:
    if fake_bits is None:
        return store
    params = {n: _fake_quant(store.params[n], store.masks.get(n), fake_bits)
              for n in store.names()}
    return ParameterStore(store.config, params, store.masks)


def _train_steps(store, video, tcfg, schedule, lr_at, opt, log, fake_bits=None,
                 step_offset=0):
    for k, frames in enumerate(schedule):
        lr = lr_at(k)
        view = _forward_store(store, fake_bits)
        total = None
        preds = []
        for t in frames:
            pred = generate(view, int(t))
            preds.append(pred.values)
            term = loss(pred, video[int(t)], tcfg.ssim_weight)
            total = term if total is None else total + term
        total = total * (1.0 / len(frames))
        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise DivergenceError(
                f"non-finite loss {loss_val} at step {step_offset + k} (lr {lr:.3g})")
        tc.backward(total)
        grads = {}
        for name in store.names():
            p = store.params[name]
            if p.grad is not None:
                grads[name] = p.grad
                p.grad = None
        adam_step(store, grads, opt, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
        batch_psnr = psnr(np.stack(preds), video[np.asarray(frames, dtype=int)])
        log.append({"step": step_offset + k, "lr": lr, "loss": loss_val,
                    "psnr": batch_psnr})


def fit(video: np.ndarray, mcfg: ModelConfig, tcfg: TrainConfig,
        store: ParameterStore | None = None):
    """Overfit ``video``; returns (store, log). Deterministic for a seed."""
    tcfg.validate()
    video = np.asarray(video, dtype=np.float32)
    if video.shape != (mcfg.T, mcfg.H, mcfg.W, 3):
        raise ConfigError(
            f"video shape {video.shape} does not match config "
            f"({mcfg.T}, {mcfg.H}, {mcfg.W}, 3)")
    if store is None:
        store = build_model(mcfg, tcfg.seed)
    rng = np.random.default_rng([tcfg.seed, 0])
    schedule = _frame_schedule(rng, tcfg.epochs, mcfg.T, tcfg.batch)
    total_steps = len(schedule)
    log: list[dict] = []
    if total_steps:
        opt = init_optimizer(store)
        _train_steps(store, video, tcfg, schedule,
                     lambda k: cosine_lr(k, total_steps, tcfg.lr_max, tcfg.lr_min),
                     opt, log)
    return store, log


def qat_steps_for(tcfg: TrainConfig, T: int) -> int:
    main = tcfg.epochs * math.ceil(T / tcfg.batch)
    return int(round(tcfg.qat_epoch_fraction * main))


def qat_finetune(store: ParameterStore, video: np.ndarray, tcfg: TrainConfig):
    """Short fake-quantized fitting phase at constant lr_max/10."""
    tcfg.validate()
    video = np.asarray(video, dtype=np.float32)
    T = store.config.T
    n_steps = qat_steps_for(tcfg, T)
    log: list[dict] = []
    if n_steps:
        rng = np.random.default_rng([tcfg.seed, 1])
        epochs = math.ceil(n_steps / math.ceil(T / tcfg.batch))
        schedule = _frame_schedule(rng, epochs, T, tcfg.batch)[:n_steps]
        opt = init_optimizer(store)
        _train_steps(store, video, tcfg, schedule, lambda k: tcfg.lr_max / 10.0,
                     opt, log, fake_bits=tcfg.qat_bits)
    return store, log


# ---------------------------------------------------------------------------
# pruning


def prunable_names(store: ParameterStore) -> list[str]:
    """Mixing weights only: no biases, norm affines, grid, or head."""
    names = []
    for name in store.names():
        field = name.rsplit(".", 1)[-1]
        if name == "stem.w" or (name.startswith("sm.") and field == "kernel") \
                or (name.startswith("cm.") and field in ("w1", "w2")):
            names.append(name)
    return names


def prune_global(store: ParameterStore, fraction: float) -> int:
    """Mask the globally smallest |w| among mixing weights; returns count masked.

    Ties break by ascending flat position in the canonical tensor order.
    fraction 0 leaves the store untouched (no masks created).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    if fraction == 0.0:
        return 0
    names = prunable_names(store)
    flats = [np.abs(store.params[n].values.reshape(-1)) for n in names]
    mags = np.concatenate(flats)
    k = int(np.floor(fraction * mags.size))
    if k == 0:
        return 0
    order = np.argsort(mags, kind="stable")
    chosen = np.zeros(mags.size, dtype=bool)
    chosen[order[:k]] = True
    offset = 0
    for name, flat in zip(names, flats):
        sel = chosen[offset:offset + flat.size]
        offset += flat.size
        if sel.any():
            mask = sel.reshape(store.params[name].shape)
            store.masks[name] = mask
            store.params[name].values[mask] = 0.0
    return k


# ---------------------------------------------------------------------------
# the full compression pipeline (fit output -> bitstream)


def compress_model(store: ParameterStore, video: np.ndarray, tcfg: TrainConfig):
    """prune -> QAT -> quantize+serialize; returns (blob, report dict, qat log)."""
    tcfg.validate()
    prune_global(store, tcfg.prune_fraction)
    _, qat_log = qat_finetune(store, video, tcfg)
    qmodel = codec.quantize_store(store, tcfg.qat_bits)
    blob = codec.serialize_quantized(qmodel)
    rate = codec.estimate_rate(qmodel)
    recon = codec.render_video(codec.store_from_quantized(qmodel))
    cfg = store.config
    report = {
        "bpp": len(blob) * 8 / (cfg.T * cfg.H * cfg.W),
        "est_sm_bits": rate["sm_bits"],
        "est_cm_bits": rate["cm_bits"],
        "est_total_bits": rate["total_bits"],
        "psnr": psnr(recon, np.asarray(video, dtype=np.float32)),
    }
    return blob, report, qat_log


def write_log_csv(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,lr,loss,psnr\n")
        for row in log:
            fh.write(f"{row['step']},{row['lr']!r},{row['loss']!r},{row['psnr']!r}\n")
