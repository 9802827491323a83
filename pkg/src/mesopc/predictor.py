"""Deterministic one-step-ahead model: build, train, predict, persist.

Training minimizes MSE over consecutive normalized pairs.  All
randomness (init, shuffling) derives from the training seed, so runs
are reproducible in single-threaded mode.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericsError, ShapeMismatchError
from .grids import FieldSet, GridSet, normalize_gridset
from .swin import SwinUnet


@dataclass
class PredictorConfig:
    embed_dim: int = 32
    window: int = 4
    depths: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (2, 4, 8)
    mlp_ratio: float = 4.0
    pad_to_fit: bool = True

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        if len(self.depths) != len(self.heads):
            raise ConfigError("depths and heads must have equal length")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h:
                raise ConfigError(
                    f"stage {i} dim {self.embed_dim * 2 ** i} not divisible by {h} heads"
                )


@dataclass
class TrainConfig:
    epochs: int = 40
    batch: int = 8
    lr: float = 5e-4
    weight_decay: float = 3e-6
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")


def build_predictor(cfg: PredictorConfig, in_channels: int, seed: int = 0) -> SwinUnet:
    """Construct the model with seed-determined initial weights."""
    torch.manual_seed(seed)
    return SwinUnet(
        in_channels=in_channels,
        embed_dim=cfg.embed_dim,
        window=cfg.window,
        depths=cfg.depths,
        heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio,
        pad_to_fit=cfg.pad_to_fit,
    )


def param_count(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_normalized(gs: GridSet) -> GridSet:
    return gs if gs.normalized else normalize_gridset(gs)


def _pairs(gs: GridSet) -> tuple[torch.Tensor, torch.Tensor]:
    if gs.n_times < 2:
        raise ConfigError("need at least 2 time steps to form training pairs")
    vals = torch.from_numpy(np.ascontiguousarray(gs.values, dtype=np.float32))
    return vals[:-1], vals[1:]


def _epoch_mse(model, inputs, targets, batch) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, inputs.shape[0], batch):
            pred = model(inputs[i : i + batch])
            total += float(torch.sum((pred - targets[i : i + batch]) ** 2))
    return total / targets.numel()


def train_predictor(
    train_gs: GridSet,
    val_gs: GridSet | None,
    pcfg: PredictorConfig,
    tcfg: TrainConfig,
    ckpt_path: Path | str,
    log_path: Path | str | None = None,
    device: str = "cpu",
) -> Path:
    """Train on consecutive pairs and persist a CKPT1 checkpoint.

    Logs one JSON line per epoch: {epoch, train_mse, val_mse, wall_s}.
    """
    train_gs = _as_normalized(train_gs)
    inputs, targets = _pairs(train_gs)
    val_data = None
    if val_gs is not None:
        val_gs = _as_normalized(val_gs)
        if val_gs.n_times >= 2:
            val_data = _pairs(val_gs)

    torch.manual_seed(tcfg.seed)
    model = build_predictor(pcfg, in_channels=train_gs.values.shape[1], seed=tcfg.seed)
    dev = torch.device(device)
    model.to(dev)
    inputs = inputs.to(dev)
    targets = targets.to(dev)
    if val_data is not None:
        val_data = (val_data[0].to(dev), val_data[1].to(dev))
    opt = torch.optim.Adam(
        model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay
    )
    shuffler = torch.Generator().manual_seed(tcfg.seed)

    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log_f = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tcfg.epochs):
            t0 = time.monotonic()
            model.train()
            order = torch.randperm(inputs.shape[0], generator=shuffler)
            epoch_loss = 0.0
            n_batches = 0
            for b, i in enumerate(range(0, len(order), tcfg.batch)):
                idx = order[i : i + tcfg.batch]
                opt.zero_grad()
                pred = model(inputs[idx])
                loss = torch.mean((pred - targets[idx]) ** 2)
                if not torch.isfinite(loss):
                    raise NumericsError(f"NaN loss at epoch {epoch} batch {b}")
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach())
                n_batches += 1
            model.eval()
            record = {
                "epoch": epoch,
                "train_mse": epoch_loss / max(n_batches, 1),
                "val_mse": _epoch_mse(model, *val_data, tcfg.batch) if val_data else None,
                "wall_s": time.monotonic() - t0,
            }
            if log_f:
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()
    finally:
        if log_f:
            log_f.close()

    model.eval()
    config = {
        "model": asdict(pcfg),
        "train": asdict(tcfg),
        "in_channels": int(train_gs.values.shape[1]),
        "variables": train_gs.variable_names(),
        "grid": list(train_gs.grid),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return save_checkpoint(ckpt_path, "predictor", config, arrays)


def load_predictor(path: Path | str, device: str = "cpu") -> tuple[SwinUnet, dict]:
    kind, config, arrays = load_checkpoint(path)
    if kind != "predictor":
        raise ShapeMismatchError(f"checkpoint kind {kind!r} is not a predictor")
    m = config["model"].copy()
    pcfg = PredictorConfig(
        embed_dim=m["embed_dim"],
        window=m["window"],
        depths=tuple(m["depths"]),
        heads=tuple(m["heads"]),
        mlp_ratio=m["mlp_ratio"],
        pad_to_fit=m["pad_to_fit"],
    )
    model = build_predictor(pcfg, in_channels=config["in_channels"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.to(torch.device(device))
    model.eval()
    return model, config


def predict(model: SwinUnet, fs: FieldSet) -> FieldSet:
    """Map a normalized state at t to the state at t + dt; deterministic."""
    if not fs.normalized:
        raise ConfigError("predict expects a normalized field set")
    if fs.n_channels != model.in_channels:
        raise ShapeMismatchError(
            f"state has {fs.n_channels} channels, checkpoint expects {model.in_channels}"
        )
    dev = next(model.parameters()).device
    x = torch.from_numpy(np.ascontiguousarray(fs.values, dtype=np.float32)).to(dev)
    model.eval()
    with torch.no_grad():
        y = model(x.unsqueeze(0)).squeeze(0)
    return replace(
        fs, values=y.cpu().numpy().astype(np.float64), time_index=fs.time_index + 1
    )


def make_predict_fn(model: SwinUnet):
    def fn(fs: FieldSet) -> FieldSet:
        return predict(model, fs)

    return fn
