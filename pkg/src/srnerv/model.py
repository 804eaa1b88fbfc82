"""The scale-recursive generator and its parameter store.

A frame is produced by mapping a learnable low-resolution grid through M
x2-upsampling stages, each followed by L residual blocks. Every block
splits into a spatial-mixing half (channel norm -> depthwise conv, plus
skip) and a channel-mixing half (norm -> expand -> GELU -> contract, plus
skip). The share mode decides which parameter sets are distinct:

    hybrid  spatial sets per (stage, position), channel sets per position
    full    both kinds per position only, reused at every stage
    none    both kinds per (stage, position)

Sharing is by reference: a shared set is one collection of tensors, so
gradients from every stage accumulate into it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from . import tensor as tc
from .tensor import Tensor

SHARE_MODES = ("none", "full", "hybrid")

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    M: int
    L: int
    C: int
    grid_T: int
    grid_H0: int
    grid_W0: int
    grid_C0: int
    T: int
    H: int
    W: int
    share_mode: str = "hybrid"
    K: int = 3
    r: int = 4

    def validate(self) -> "ModelConfig":
        if self.share_mode not in SHARE_MODES:
            raise ConfigError(f"unknown share_mode {self.share_mode!r}")
        for name in ("M", "L", "C", "grid_T", "grid_H0", "grid_W0", "grid_C0", "T", "H", "W", "r"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.K < 1 or self.K % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.K}")
        if self.H != self.grid_H0 * 2 ** self.M or self.W != self.grid_W0 * 2 ** self.M:
            raise ConfigError(
                f"inconsistent dyadic geometry: output {self.H}x{self.W} != "
                f"grid {self.grid_H0}x{self.grid_W0} doubled {self.M} times")
        if self.grid_T > self.T:
            raise ConfigError(f"grid_T {self.grid_T} exceeds frame count {self.T}")
        return self


SM_FIELDS = ("gamma", "beta", "kernel", "bias")
CM_FIELDS = ("gamma", "beta", "w1", "b1", "w2", "b2")


def sm_keys(config: ModelConfig) -> list[str]:
    """Distinct spatial-mixing set names, canonical order."""
    if config.share_mode == "full":
        return [f"sm.{j}" for j in range(1, config.L + 1)]
    return [f"sm.{i}.{j}" for i in range(1, config.M + 1) for j in range(1, config.L + 1)]


def cm_keys(config: ModelConfig) -> list[str]:
    """Distinct channel-mixing set names, canonical order."""
    if config.share_mode == "none":
        return [f"cm.{i}.{j}" for i in range(1, config.M + 1) for j in range(1, config.L + 1)]
    return [f"cm.{j}" for j in range(1, config.L + 1)]


def param_names(config: ModelConfig) -> list[str]:
    """Every stored tensor name, in the canonical (serialization) order."""
    names = ["grid", "stem.w", "stem.b"]
    for key in sm_keys(config):
        names.extend(f"{key}.{f}" for f in SM_FIELDS)
    for key in cm_keys(config):
        names.extend(f"{key}.{f}" for f in CM_FIELDS)
    names.extend(["head.w", "head.b"])
    return names


def param_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    C, K, r = config.C, config.K, config.r
    if name == "grid":
        return (config.grid_T, config.grid_H0, config.grid_W0, config.grid_C0)
    if name == "stem.w":
        return (C, config.grid_C0)
    if name == "stem.b":
        return (C,)
    if name == "head.w":
        return (3, C)
    if name == "head.b":
        return (3,)
    stem, field = name.rsplit(".", 1)
    if stem.startswith("sm."):
        return {"gamma": (C,), "beta": (C,), "kernel": (K, K, C), "bias": (C,)}[field]
    if stem.startswith("cm."):
        return {"gamma": (C,), "beta": (C,), "w1": (r * C, C), "b1": (r * C,),
                "w2": (C, r * C), "b2": (C,)}[field]
    raise KeyError(name)


class ParameterStore:
    """Named parameter tensors plus optional pruning masks.

    ``masks[name]`` is a boolean array (True = pruned); masked positions are
    kept exactly zero in ``params[name].values``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 masks: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params
        self.masks = masks if masks is not None else {}

    def names(self) -> list[str]:
        return param_names(self.config)

    def sm_key(self, i: int, j: int) -> str:
        return f"sm.{j}" if self.config.share_mode == "full" else f"sm.{i}.{j}"

    def cm_key(self, i: int, j: int) -> str:
        return f"cm.{i}.{j}" if self.config.share_mode == "none" else f"cm.{j}"

    def sm_set(self, i: int, j: int) -> dict[str, Tensor]:
        key = self.sm_key(i, j)
        return {f: self.params[f"{key}.{f}"] for f in SM_FIELDS}

    def cm_set(self, i: int, j: int) -> dict[str, Tensor]:
        key = self.cm_key(i, j)
        return {f: self.params[f"{key}.{f}"] for f in CM_FIELDS}

    def apply_masks(self):
        for name, mask in self.masks.items():
            vals = self.params[name].values
            vals[mask] = 0.0


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    draw = rng.standard_normal(shape) * std
    return np.clip(draw, -2.0 * std, 2.0 * std).astype(np.float32)


_RANDOM_INIT = {"grid", "stem.w", "head.w"}  # plus cm w1; handled below


def build_model(config: ModelConfig, seed: int, trainable: bool = True) -> ParameterStore:
    """Allocate and initialize all parameter tensors for ``config``.

    Spatial kernels, biases, and each FFN's contract map start at zero and
    norm gains at one, so every block is an exact pass-through at step 0.
    Deterministic for a given seed.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name in param_names(config):
        shape = param_shape(config, name)
        field = name.rsplit(".", 1)[-1]
        if name in _RANDOM_INIT or field == "w1":
            vals = _trunc_normal(rng, shape)
        elif field == "gamma":
            vals = np.ones(shape, dtype=np.float32)
        else:  # biases, betas, depthwise kernels, contract maps, head bias
            vals = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(vals, requires_grad=trainable)
    return ParameterStore(config, params)


def base_grid(store: ParameterStore, t: int) -> Tensor:
    """Temporal slice of the grid, linearly interpolated between stored frames."""
    cfg = store.config
    if not 0 <= t < cfg.T:
        raise ValueError(f"frame index {t} outside [0, {cfg.T})")
    grid = store.params["grid"]
    if cfg.T == 1 or cfg.grid_T == 1:
        return grid[0]
    pos = t * (cfg.grid_T - 1) / (cfg.T - 1)
    i0 = int(np.floor(pos))
    frac = pos - i0
    if frac == 0.0:
        return grid[i0]
    i1 = min(i0 + 1, cfg.grid_T - 1)
    return grid[i0] * (1.0 - frac) + grid[i1] * frac


def srnerv_block(h: Tensor, sm: dict[str, Tensor], cm: dict[str, Tensor]) -> Tensor:
    """One residual refinement block: spatial mixing then channel mixing."""
    y = tc.depthwise_conv2d(tc.layer_norm(h, sm["gamma"], sm["beta"], NORM_EPS),
                            sm["kernel"], sm["bias"]) + h
    inner = tc.layer_norm(y, cm["gamma"], cm["beta"], NORM_EPS)
    inner = tc.pointwise_linear(inner, cm["w1"], cm["b1"]).gelu()
    z = tc.pointwise_linear(inner, cm["w2"], cm["b2"]) + y
    return z


def generate(store: ParameterStore, t: int) -> Tensor:
    """Render frame ``t``: stem -> M x (upsample, L blocks) -> sigmoid head."""
    cfg = store.config
    x = tc.pointwise_linear(base_grid(store, t), store.params["stem.w"], store.params["stem.b"])
    for i in range(1, cfg.M + 1):
        x = tc.bilinear_upsample2(x)
        for j in range(1, cfg.L + 1):
            x = srnerv_block(x, store.sm_set(i, j), store.cm_set(i, j))
    return tc.pointwise_linear(x, store.params["head.w"], store.params["head.b"]).sigmoid()


def count_params(config: ModelConfig) -> dict[str, int]:
    """Exact stored-scalar counts per partition (masked entries included)."""
    C, K, r = config.C, config.K, config.r
    per_sm = C * K * K + C + 2 * C
    per_cm = 2 * C + (C * r * C + r * C) + (r * C * C + C)
    sm_sets = len(sm_keys(config))
    cm_sets = len(cm_keys(config))
    other = (config.grid_T * config.grid_H0 * config.grid_W0 * config.grid_C0
             + C * config.grid_C0 + C + 3 * C + 3)
    sm = sm_sets * per_sm
    cm = cm_sets * per_cm
    return {"sm_params": sm, "cm_params": cm, "other_params": other,
            "total": sm + cm + other}


def match_budget(target_total: int, template: ModelConfig,
                 c_max: int = 4096) -> ModelConfig:
    """Pick the channel width whose total count lands nearest the target.

    Only C varies; ties go to the smaller C. Raises if the best achievable
    count misses the target by more than 20%.
    """
    best_c, best_err = None, None
    for c in range(1, c_max + 1):
        total = count_params(replace(template, C=c))["total"]
        err = abs(total - target_total)
        if best_err is None or err < best_err:
            best_c, best_err = c, err
        if total > target_total and err > (best_err if best_err is not None else err):
            break  # counts grow monotonically in C
    assert best_c is not None
    if best_err > 0.2 * target_total:
        raise ConfigError(
            f"no channel width within 20% of {target_total} parameters "
            f"(closest miss {best_err})")
    return replace(template, C=best_c).validate()
