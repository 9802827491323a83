"""Inference pipeline: calibrated noise injection and partial reverse diffusion.

Ensemble spread comes only from the initial injected noise; the reverse
diffusion itself is the deterministic second-order (Heun) solver over a
rho-spaced sigma schedule that starts at the calibrated level and ends
at zero, so a member is a pure function of (checkpoints, sigma, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corrector import EDMParams, denoise_tensor
from .errors import ConfigError, ShapeMismatchError
from .grids import FieldSet, denormalize_values
from .unet import DenoiserUNet
from .util import rng_for
from .verify import ensemble_mean as _members_mean
from .verify import pmm as _pmm


@dataclass
class SampleConfig:
    members: int = 16
    steps: int = 20
    rho: float = 7.0
    sigma_min: float = 0.002
    base_seed: int = 0
    sequential: bool = False

    def __post_init__(self):
        if self.members < 1:
            raise ConfigError("members must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


def inject_noise(fs: FieldSet, sigma: float, seed: int) -> FieldSet:
    """Add i.i.d. Gaussian noise of std sigma to every cell and channel."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return replace(fs, values=fs.values.copy())
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(fs.values.shape)
    return replace(fs, values=fs.values + sigma * eps)


def karras_schedule(
    sigma_start: float, steps: int, sigma_min: float = 0.002, rho: float = 7.0
) -> np.ndarray:
    """Noise levels from sigma_start down to sigma_min, then the terminal 0."""
    if sigma_start == 0:
        return np.zeros(1)
    if steps == 1:
        return np.array([sigma_start, 0.0])
    i = np.arange(steps)
    ramp = (
        sigma_start ** (1 / rho)
        + i / (steps - 1) * (sigma_min ** (1 / rho) - sigma_start ** (1 / rho))
    ) ** rho
    ramp[0] = sigma_start
    ramp[-1] = sigma_min
    return np.concatenate([ramp, [0.0]])


def reverse_diffuse_tensor(
    model: DenoiserUNet,
    x: torch.Tensor,
    sigma_start: float,
    steps: int,
    sigma_data: float,
    sigma_min: float = 0.002,
    rho: float = 7.0,
) -> torch.Tensor:
    """Heun solver over the schedule; batch [B, C, H, W] shares one sigma path."""
    sigmas = karras_schedule(sigma_start, steps, sigma_min, rho)
    if len(sigmas) == 1:
        return x.clone()
    with torch.no_grad():
        for i in range(len(sigmas) - 1):
            s = float(sigmas[i])
            s_next = float(sigmas[i + 1])
            sig = torch.full((x.shape[0],), s, dtype=x.dtype, device=x.device)
            d = (x - denoise_tensor(model, x, sig, sigma_data)) / s
            x_euler = x + (s_next - s) * d
            if s_next > 0:
                sig_n = torch.full((x.shape[0],), s_next, dtype=x.dtype, device=x.device)
                d2 = (x_euler - denoise_tensor(model, x_euler, sig_n, sigma_data)) / s_next
                x = x + (s_next - s) * 0.5 * (d + d2)
            else:
                x = x_euler
    return x


def reverse_diffuse(
    model: DenoiserUNet,
    fs: FieldSet,
    sigma_start: float,
    steps: int,
    edm: EDMParams,
) -> FieldSet:
    """Partial reverse diffusion of a normalized field set from sigma_start."""
    if sigma_start < 0:
        raise ConfigError("sigma_start must be >= 0")
    if 0 < sigma_start < edm.sigma_min:
        raise ConfigError(
            f"sigma_start {sigma_start} below sigma_min {edm.sigma_min}"
        )
    if fs.n_channels != model.in_channels:
        raise ShapeMismatchError(
            f"state has {fs.n_channels} channels, checkpoint expects {model.in_channels}"
        )
    if sigma_start == 0:
        return replace(fs, values=fs.values.copy())
    x = torch.from_numpy(np.ascontiguousarray(fs.values, dtype=np.float32)).unsqueeze(0)
    y = reverse_diffuse_tensor(
        model, x, sigma_start, steps, edm.sigma_data, edm.sigma_min, edm.rho
    )
    return replace(fs, values=y.squeeze(0).numpy().astype(np.float64))


@dataclass
class EnsembleForecast:
    """Corrected members plus the raw predictor output (all normalized).

    Aggregates are derived on demand so they can never go stale: the
    ensemble mean averages the denormalized members per variable, and
    the precipitation aggregate is the probability matched mean.
    """

    members: list[FieldSet]
    predictor_output: FieldSet
    seeds: list[int] = field(default_factory=list)
    sigma: float = 0.0
    steps: int = 0

    def __post_init__(self):
        shapes = {m.values.shape for m in self.members}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"members disagree on shape: {shapes}")
        if self.predictor_output.values.shape not in shapes:
            raise ShapeMismatchError("predictor output shape differs from members")

    @property
    def specs(self):
        return self.predictor_output.specs

    def members_physical(self) -> np.ndarray:
        """[m, c, y, x] in physical units."""
        return np.stack(
            [denormalize_values(m.values, m.specs) for m in self.members]
        )

    def predictor_physical(self) -> np.ndarray:
        return denormalize_values(self.predictor_output.values, self.specs)

    def ensemble_mean(self) -> FieldSet:
        """Physical-units mean over members, all variables."""
        return FieldSet(
            values=_members_mean(self.members_physical()),
            specs=self.specs,
            time_index=self.predictor_output.time_index,
            dt_hours=self.predictor_output.dt_hours,
            normalized=False,
        )

    def pmm_precip(self, precip_name: str = "precip") -> np.ndarray:
        """Probability matched mean of the physical precipitation members."""
        c = self.predictor_output.channel_index(precip_name)
        return _pmm(self.members_physical()[:, c])


def ensemble_forecast(
    predictor_model,
    corrector_model: DenoiserUNet,
    sigma: float,
    state: FieldSet,
    cfg: SampleConfig,
    edm: EDMParams,
) -> EnsembleForecast:
    """Predict once, then correct M independently noised copies.

    Member m uses seed base_seed + m, so results do not depend on
    execution order; `sequential` forces one-member-at-a-time execution
    (the bit-reproducible single-threaded path), otherwise members run
    as one batch.
    """
    from .predictor import predict

    pred = predict(predictor_model, state)
    seeds = [cfg.base_seed + m for m in range(cfg.members)]
    if sigma == 0 or cfg.steps == 0:
        members = [replace(pred, values=pred.values.copy()) for _ in seeds]
        return EnsembleForecast(
            members=members, predictor_output=pred, seeds=seeds, sigma=sigma, steps=cfg.steps
        )

    noisy = [inject_noise(pred, sigma, seed) for seed in seeds]
    if cfg.sequential:
        corrected = [
            reverse_diffuse(corrector_model, fs_n, sigma, cfg.steps, edm)
            for fs_n in noisy
        ]
    else:
        x = torch.from_numpy(
            np.stack([fs_n.values for fs_n in noisy]).astype(np.float32)
        )
        y = reverse_diffuse_tensor(
            corrector_model, x, sigma, cfg.steps, edm.sigma_data, edm.sigma_min, edm.rho
        ).numpy()
        corrected = [
            replace(pred, values=y[m].astype(np.float64)) for m in range(cfg.members)
        ]
    return EnsembleForecast(
        members=corrected, predictor_output=pred, seeds=seeds, sigma=sigma, steps=cfg.steps
    )
