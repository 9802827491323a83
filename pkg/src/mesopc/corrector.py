"""Probabilistic corrector: denoiser preconditioning, loss, and training.

The denoiser is wrapped in the sigma-dependent preconditioning
D(x; sigma) = c_skip x + c_out F(c_in x, c_noise) with

    c_skip  = sd^2 / (sigma^2 + sd^2)
    c_out   = sigma sd / sqrt(sigma^2 + sd^2)
    c_in    = 1 / sqrt(sigma^2 + sd^2)
    c_noise = ln(sigma) / 4

so that D(x; 0) = x exactly.  Training draws sigma log-normally
(ln sigma ~ N(p_mean, p_std^2)) on unpaired fields and minimizes
lambda(sigma) ||D(x + sigma n; sigma) - x||^2 with
lambda = (sigma^2 + sd^2) / (sigma sd)^2.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericsError, ShapeMismatchError
from .grids import FieldSet, GridSet, normalize_gridset
from .unet import DenoiserUNet


@dataclass
class CorrectorConfig:
    base_embed: int = 32
    multipliers: tuple[int, ...] = (1, 2, 2, 2)
    res_blocks: int = 2

    def __post_init__(self):
        self.multipliers = tuple(self.multipliers)
        if not self.multipliers:
            raise ConfigError("multipliers must be non-empty")

    @property
    def levels(self) -> int:
        return len(self.multipliers)


@dataclass
class EDMParams:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ConfigError("sigma_data must be > 0")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")


@dataclass
class DiffTrainConfig:
    epochs: int = 120
    batch: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    # Random periodic shifts per sample; the domain is a torus, so rolls
    # are distribution-preserving for stationary statistics and keep a
    # small training set from being memorized.
    augment_roll: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")


def precond_coeffs(sigma, sigma_data: float):
    """(c_skip, c_out, c_in, c_noise) for a sigma scalar or tensor."""
    if isinstance(sigma, torch.Tensor):
        s2 = sigma**2
        sd2 = sigma_data**2
        c_skip = sd2 / (s2 + sd2)
        c_out = sigma * sigma_data / torch.sqrt(s2 + sd2)
        c_in = 1.0 / torch.sqrt(s2 + sd2)
        c_noise = torch.log(sigma) / 4.0
        return c_skip, c_out, c_in, c_noise
    s2 = sigma * sigma
    sd2 = sigma_data * sigma_data
    return (
        sd2 / (s2 + sd2),
        sigma * sigma_data / math.sqrt(s2 + sd2),
        1.0 / math.sqrt(s2 + sd2),
        math.log(sigma) / 4.0 if sigma > 0 else 0.0,
    )


def denoise_tensor(
    model: DenoiserUNet, x: torch.Tensor, sigma: torch.Tensor, sigma_data: float
) -> torch.Tensor:
    """Preconditioned denoiser on [B, C, H, W] with per-sample sigma [B]."""
    if torch.any(sigma < 0):
        raise ConfigError("sigma must be >= 0")
    if torch.all(sigma == 0):
        return x.clone()
    c_skip, c_out, c_in, c_noise = precond_coeffs(sigma, sigma_data)
    fx = model(c_in[:, None, None, None] * x, c_noise)
    return c_skip[:, None, None, None] * x + c_out[:, None, None, None] * fx


def denoise(model: DenoiserUNet, fs: FieldSet, sigma: float, sigma_data: float = 0.5) -> FieldSet:
    """Denoise a normalized field set at noise level sigma.

    sigma = 0 returns the input values bitwise (c_skip = 1, c_out = 0).
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return replace(fs, values=fs.values.copy())
    x = torch.from_numpy(np.ascontiguousarray(fs.values, dtype=np.float32)).unsqueeze(0)
    with torch.no_grad():
        y = denoise_tensor(model, x, torch.full((1,), float(sigma)), sigma_data)
    return replace(fs, values=y.squeeze(0).numpy().astype(np.float64))


def loss_weight(sigma: torch.Tensor, sigma_data: float) -> torch.Tensor:
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def build_corrector(cfg: CorrectorConfig, in_channels: int, seed: int = 0) -> DenoiserUNet:
    torch.manual_seed(seed)
    return DenoiserUNet(
        in_channels=in_channels,
        base_embed=cfg.base_embed,
        multipliers=cfg.multipliers,
        res_blocks=cfg.res_blocks,
    )


def train_corrector(
    train_gs: GridSet,
    ccfg: CorrectorConfig,
    edm: EDMParams,
    tcfg: DiffTrainConfig,
    ckpt_path: Path | str,
    log_path: Path | str | None = None,
    device: str = "cpu",
) -> Path:
    """Train the denoiser on unpaired normalized fields; persist CKPT1.

    No pairing enters the loss: each sample is a single time slice.
    Logs one JSON line per epoch: {epoch, loss, wall_s}.
    """
    if not train_gs.normalized:
        train_gs = normalize_gridset(train_gs)
    data = torch.from_numpy(np.ascontiguousarray(train_gs.values, dtype=np.float32))

    torch.manual_seed(tcfg.seed)
    model = build_corrector(ccfg, in_channels=data.shape[1], seed=tcfg.seed)
    dev = torch.device(device)
    model.to(dev)
    data = data.to(dev)
    opt = torch.optim.AdamW(model.parameters(), lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2))
    gen = torch.Generator().manual_seed(tcfg.seed)

    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log_f = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tcfg.epochs):
            t0 = time.monotonic()
            order = torch.randperm(data.shape[0], generator=gen)
            epoch_loss = 0.0
            n_batches = 0
            for b, i in enumerate(range(0, len(order), tcfg.batch)):
                x = data[order[i : i + tcfg.batch]]
                if tcfg.augment_roll:
                    ny, nx = x.shape[-2], x.shape[-1]
                    sy = torch.randint(0, ny, (x.shape[0],), generator=gen)
                    sx = torch.randint(0, nx, (x.shape[0],), generator=gen)
                    x = torch.stack(
                        [
                            torch.roll(x[j], (int(sy[j]), int(sx[j])), dims=(-2, -1))
                            for j in range(x.shape[0])
                        ]
                    )
                sigma = torch.exp(
                    edm.p_mean + edm.p_std * torch.randn(x.shape[0], generator=gen)
                ).to(dev)
                noise = torch.randn(
                    x.shape, generator=gen
                ).to(dev) * sigma[:, None, None, None]
                d = denoise_tensor(model, x + noise, sigma, edm.sigma_data)
                w = loss_weight(sigma, edm.sigma_data)[:, None, None, None]
                loss = torch.mean(w * (d - x) ** 2)
                if not torch.isfinite(loss):
                    raise NumericsError(f"NaN loss at epoch {epoch} batch {b}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach())
                n_batches += 1
            if log_f:
                log_f.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "loss": epoch_loss / max(n_batches, 1),
                            "wall_s": time.monotonic() - t0,
                        }
                    )
                    + "\n"
                )
                log_f.flush()
    finally:
        if log_f:
            log_f.close()

    model.eval()
    config = {
        "model": asdict(ccfg),
        "edm": asdict(edm),
        "train": asdict(tcfg),
        "in_channels": int(data.shape[1]),
        "variables": train_gs.variable_names(),
        "grid": list(train_gs.grid),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return save_checkpoint(ckpt_path, "corrector", config, arrays)


def load_corrector(
    path: Path | str, device: str = "cpu"
) -> tuple[DenoiserUNet, EDMParams, dict]:
    kind, config, arrays = load_checkpoint(path)
    if kind != "corrector":
        raise ShapeMismatchError(f"checkpoint kind {kind!r} is not a corrector")
    m = config["model"]
    model = build_corrector(
        CorrectorConfig(
            base_embed=m["base_embed"],
            multipliers=tuple(m["multipliers"]),
            res_blocks=m["res_blocks"],
        ),
        in_channels=config["in_channels"],
    )
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.to(torch.device(device))
    model.eval()
    return model, EDMParams(**config["edm"]), config
