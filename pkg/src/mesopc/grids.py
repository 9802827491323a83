"""Gridded multi-variable fields: domain types, normalization, GSETv001 container.

A `FieldSet` is one time slice of a multi-channel 2-D grid; a `GridSet`
is a time sequence of them sharing variable metadata.  The GSETv001
on-disk container is a JSON header plus a raw float32 little-endian
payload, chosen so that round trips are bit-exact and single time
slices can be read without loading the file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, CorruptFileError, ShapeMismatchError

GSET_MAGIC = b"GSETv001"
_TRANSFORMS = ("none", "log1p")


@dataclass(frozen=True)
class VariableSpec:
    """Per-variable metadata: identity, units, and normalization statistics.

    `norm_mean`/`norm_std` are statistics of the transformed values
    (after `transform`), conventionally computed on the training split.
    """

    name: str
    level: str = "surface"
    units: str = "1"
    norm_mean: float = 0.0
    norm_std: float = 1.0
    transform: str = "none"

    def __post_init__(self):
        if not self.name:
            raise ConfigError("variable name must be non-empty")
        if self.transform not in _TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}")
        if not np.isfinite(self.norm_mean) or not np.isfinite(self.norm_std):
            raise ConfigError(f"non-finite normalization stats for {self.name!r}")
        if self.norm_std <= 0:
            raise ConfigError(f"norm_std must be > 0 for {self.name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "level": self.level,
            "units": self.units,
            "norm_mean": float(self.norm_mean),
            "norm_std": float(self.norm_std),
            "transform": self.transform,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableSpec":
        return cls(**d)


def _check_specs(specs: Sequence[VariableSpec], n_channels: int) -> None:
    if len(specs) != n_channels:
        raise ShapeMismatchError(
            f"{n_channels} channels but {len(specs)} variable specs"
        )
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate variable names: {names}")


def _check_grid(values: np.ndarray, min_side: int = 16) -> None:
    y, x = values.shape[-2], values.shape[-1]
    if y < min_side or x < min_side:
        raise ShapeMismatchError(f"grid {y}x{x} below the {min_side}x{min_side} minimum")
    if not np.all(np.isfinite(values)):
        from .errors import NumericsError

        bad = np.argwhere(~np.isfinite(values))[0]
        chan = int(bad[-3]) if values.ndim >= 3 else 0
        raise NumericsError(f"non-finite value in channel {chan} at index {tuple(int(i) for i in bad)}")


@dataclass
class FieldSet:
    """One time slice: values[channel, y, x] plus per-channel specs."""

    values: np.ndarray
    specs: list[VariableSpec]
    time_index: int = 0
    dt_hours: float = 6.0
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ShapeMismatchError(
                f"FieldSet values must be [channel, y, x], got shape {self.values.shape}"
            )
        _check_specs(self.specs, self.values.shape[0])
        _check_grid(self.values)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]

    def channel_index(self, name: str) -> int:
        for i, s in enumerate(self.specs):
            if s.name == name:
                return i
        raise KeyError(f"no channel named {name!r}")

    def channel(self, name: str) -> np.ndarray:
        return self.values[self.channel_index(name)]

    def variable_names(self) -> list[str]:
        return [s.name for s in self.specs]


@dataclass
class GridSet:
    """A time sequence of field sets sharing specs; values[t, c, y, x]."""

    values: np.ndarray
    specs: list[VariableSpec]
    dt_hours: float = 6.0
    seed: int | None = None
    time_start: int = 0
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ShapeMismatchError(
                f"GridSet values must be [t, c, y, x], got shape {self.values.shape}"
            )
        _check_specs(self.specs, self.values.shape[1])
        # The container allows tiny grids; the 16x16 floor binds model-facing
        # FieldSets only.
        _check_grid(self.values, min_side=1)

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]

    def fieldset(self, i: int) -> FieldSet:
        return FieldSet(
            values=self.values[i],
            specs=self.specs,
            time_index=self.time_start + i,
            dt_hours=self.dt_hours,
            normalized=self.normalized,
        )

    def channel_index(self, name: str) -> int:
        for i, s in enumerate(self.specs):
            if s.name == name:
                return i
        raise KeyError(f"no channel named {name!r}")

    def variable_names(self) -> list[str]:
        return [s.name for s in self.specs]


# ---------------------------------------------------------------------------
# Normalization


def _forward_transform(vals: np.ndarray, spec: VariableSpec, chan: int) -> np.ndarray:
    if spec.transform == "log1p":
        if np.any(vals < 0):
            from .errors import NumericsError

            raise NumericsError(
                f"channel {chan} ({spec.name}): log1p transform requires values >= 0"
            )
        return np.log1p(vals)
    return vals


def _inverse_transform(vals: np.ndarray, spec: VariableSpec) -> np.ndarray:
    if spec.transform == "log1p":
        # Model outputs may dip slightly below log1p(0); clamp at zero so
        # the physical variable stays non-negative.
        return np.maximum(np.expm1(vals), 0.0)
    return vals


def normalize_values(values: np.ndarray, specs: Sequence[VariableSpec]) -> np.ndarray:
    """Per-channel (T(v) - mean) / std on the channel axis (axis -3), float64."""
    out = np.empty(values.shape, dtype=np.float64)
    for c, spec in enumerate(specs):
        v = np.asarray(values[..., c, :, :], dtype=np.float64)
        if not np.all(np.isfinite(v)):
            from .errors import NumericsError

            raise NumericsError(f"non-finite value in channel {c} ({spec.name})")
        out[..., c, :, :] = (_forward_transform(v, spec, c) - spec.norm_mean) / spec.norm_std
    return out


def denormalize_values(values: np.ndarray, specs: Sequence[VariableSpec]) -> np.ndarray:
    out = np.empty(values.shape, dtype=np.float64)
    for c, spec in enumerate(specs):
        v = np.asarray(values[..., c, :, :], dtype=np.float64)
        out[..., c, :, :] = _inverse_transform(v * spec.norm_std + spec.norm_mean, spec)
    return out


def normalize(fs: FieldSet) -> FieldSet:
    if fs.normalized:
        raise ConfigError("field set is already normalized")
    return replace(fs, values=normalize_values(fs.values, fs.specs), normalized=True)


def denormalize(fs: FieldSet) -> FieldSet:
    if not fs.normalized:
        raise ConfigError("field set is not normalized")
    return replace(fs, values=denormalize_values(fs.values, fs.specs), normalized=False)


def normalize_gridset(gs: GridSet) -> GridSet:
    if gs.normalized:
        raise ConfigError("grid set is already normalized")
    return replace(gs, values=normalize_values(gs.values, gs.specs), normalized=True)


def denormalize_gridset(gs: GridSet) -> GridSet:
    if not gs.normalized:
        raise ConfigError("grid set is not normalized")
    return replace(gs, values=denormalize_values(gs.values, gs.specs), normalized=False)


def compute_norm_specs(
    values: np.ndarray, specs: Sequence[VariableSpec]
) -> list[VariableSpec]:
    """Recompute norm_mean/norm_std per channel from values[t, c, y, x]."""
    out = []
    for c, spec in enumerate(specs):
        v = np.asarray(values[:, c], dtype=np.float64)
        t = _forward_transform(v, spec, c)
        std = float(t.std())
        if std <= 0 or not np.isfinite(std):
            std = 1.0
        out.append(replace(spec, norm_mean=float(t.mean()), norm_std=std))
    return out


# ---------------------------------------------------------------------------
# Center crop


def crop_center_values(values: np.ndarray, y_out: int, x_out: int) -> np.ndarray:
    y, x = values.shape[-2], values.shape[-1]
    if y_out > y or x_out > x:
        raise ShapeMismatchError(
            f"requested crop {y_out}x{x_out} exceeds input {y}x{x}"
        )
    oy = (y - y_out) // 2
    ox = (x - x_out) // 2
    return values[..., oy : oy + y_out, ox : ox + x_out]


def crop_center(fs: FieldSet, y_out: int, x_out: int) -> FieldSet:
    """Centered window; offset = floor((dim - out) / 2) per axis."""
    return replace(fs, values=crop_center_values(fs.values, y_out, x_out))


# ---------------------------------------------------------------------------
# GSETv001 container


def _header_dict(gs: GridSet) -> dict:
    t, c, y, x = gs.values.shape
    return {
        "dims": {"time": t, "channel": c, "y": y, "x": x},
        "variables": [s.to_dict() for s in gs.specs],
        "dtype": "float32le",
        "layout": "t,c,y,x",
        "dt_hours": float(gs.dt_hours),
        "seed": gs.seed,
        "time_start": int(gs.time_start),
    }


def write_gridset(gs: GridSet, path: Path | str) -> Path:
    """Write a GSETv001 file: magic, u64 header length, JSON header, payload."""
    path = Path(path)
    header = json.dumps(_header_dict(gs), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(gs.values, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(GSET_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)
    return path


def _read_header(f) -> tuple[dict, int]:
    magic = f.read(len(GSET_MAGIC))
    if magic != GSET_MAGIC:
        raise CorruptFileError(f"corrupt file: bad magic {magic!r}")
    (header_len,) = struct.unpack("<Q", f.read(8))
    try:
        header = json.loads(f.read(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"corrupt file: unreadable header ({e})") from e
    return header, len(GSET_MAGIC) + 8 + header_len


def read_gridset(path: Path | str, time_index: int | None = None):
    """Read a GSETv001 file.

    With `time_index`, seeks to that slice and returns a `FieldSet`
    without loading the rest of the payload; otherwise returns the full
    `GridSet`.
    """
    path = Path(path)
    with open(path, "rb") as f:
        header, data_start = _read_header(f)
        dims = header["dims"]
        t, c, y, x = dims["time"], dims["channel"], dims["y"], dims["x"]
        expected = t * c * y * x * 4
        f.seek(0, 2)
        actual = f.tell() - data_start
        if actual != expected:
            raise ShapeMismatchError(
                f"shape mismatch: payload has {actual} bytes, header implies {expected}"
            )
        specs = [VariableSpec.from_dict(d) for d in header["variables"]]
        if time_index is not None:
            if not 0 <= time_index < t:
                raise ShapeMismatchError(f"time index {time_index} outside [0, {t})")
            f.seek(data_start + time_index * c * y * x * 4)
            raw = np.frombuffer(f.read(c * y * x * 4), dtype="<f4")
            return FieldSet(
                values=raw.reshape(c, y, x).copy(),
                specs=specs,
                time_index=header.get("time_start", 0) + time_index,
                dt_hours=header["dt_hours"],
            )
        f.seek(data_start)
        raw = np.frombuffer(f.read(expected), dtype="<f4")
    return GridSet(
        values=raw.reshape(t, c, y, x).copy(),
        specs=specs,
        dt_hours=header["dt_hours"],
        seed=header.get("seed"),
        time_start=header.get("time_start", 0),
    )
