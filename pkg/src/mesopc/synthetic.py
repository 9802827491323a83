"""Synthetic mesoscale-like dataset generator with analytically known spectra.

The world is a periodic 2-D domain.  Prognostic channels are Gaussian
random fields advected semi-Lagrangially by a prescribed divergence-free
flow, damped, and re-energized by stochastic forcing that only acts
above a configurable x-wavenumber.  Fine scales are therefore
irreducibly random (a one-step forecaster must under-represent them)
while coarse scales stay predictable.  A diagnostic precipitation-like
channel is the rectified, thresholded convergence of the first two
prognostic channels, so it is non-negative and heavy-tailed.

Spectral bookkeeping: fields are synthesized as irfft2(A * rfft2(z))
with white z and a separable amplitude A(kx, ky) = f(kx) g(ky), where
sum_ky g^2 = ny.  The expected x-direction PSD (see `spectral`) is then
exactly f(kx)^2 / nx, which the tests use as the analytic oracle.  The
forcing amplitude per bin is shaped by the one-step spectral retention
of the deterministic map so that the stationary spectrum matches the
configured power law k^(-slope).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .grids import GridSet, VariableSpec, compute_norm_specs, write_gridset
from .util import canonical_json, rng_for

PRECIP_NAME = "precip"


@dataclass
class ChannelConfig:
    """One prognostic channel: x-PSD ~ amplitude^2 k^(-slope) / nx."""

    name: str
    slope: float
    amplitude: float = 1.0

    def __post_init__(self):
        if self.slope < 0:
            raise ConfigError(f"channel {self.name!r}: slope must be >= 0")
        if self.amplitude <= 0:
            raise ConfigError(f"channel {self.name!r}: amplitude must be > 0")


@dataclass
class FlowConfig:
    """Prescribed advecting flow: uniform drift plus streamfunction eddies.

    The eddy part comes from a few large-scale streamfunction modes, so
    it is smooth and divergence-free by construction.  `period_steps`
    makes the eddy phases rotate with that period; 0 keeps the flow
    steady, which keeps the one-step map autonomous (learnable from the
    state alone).
    """

    drift_u: float = 0.7
    drift_v: float = 0.35
    eddy_amplitude: float = 0.5
    n_modes: int = 3
    period_steps: int = 0


@dataclass
class SynthConfig:
    grid: tuple[int, int] = (64, 96)
    channels: list[ChannelConfig] = field(
        default_factory=lambda: [
            ChannelConfig("theta", 2.2),
            ChannelConfig("chi", 2.8),
        ]
    )
    flow: FlowConfig = field(default_factory=FlowConfig)
    forcing_amplitude: float = 1.0
    forcing_cutoff: int = 3
    damping: float = 0.998
    dt_hours: float = 6.0
    seed: int = 0
    n_steps: int = 160
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)
    spinup_steps: int = 8
    precip_threshold: float = 0.8
    precip_gain: float = 10.0
    y_corr: float = 6.0

    def __post_init__(self):
        ny, nx = self.grid
        if ny < 16 or nx < 16:
            raise ConfigError("grid must be at least 16x16")
        if len(self.channels) < 2:
            raise ConfigError("need at least two prognostic channels")
        names = [c.name for c in self.channels] + [PRECIP_NAME]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate channel names in {names}")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("damping must be in (0, 1]")
        if self.forcing_amplitude < 0:
            raise ConfigError("forcing_amplitude must be >= 0")
        if not 0 <= self.forcing_cutoff <= nx // 2:
            raise ConfigError("forcing_cutoff outside [0, nx/2]")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ConfigError("splits must be three fractions summing to 1")


# ---------------------------------------------------------------------------
# Gaussian random fields


def _x_filter(
    nx: int, slope: float, amplitude: float, kmin: int = 1, kmax: int | None = None
) -> np.ndarray:
    """One-sided x amplitude f(kx), kx = 0..nx/2."""
    k = np.arange(nx // 2 + 1, dtype=np.float64)
    f = np.zeros_like(k)
    hi = nx // 2 if kmax is None else min(kmax, nx // 2)
    band = (k >= max(kmin, 1)) & (k <= hi)
    f[band] = amplitude * k[band] ** (-slope / 2.0)
    return f


def _y_envelope(ny: int, y_corr: float) -> np.ndarray:
    """Full-spectrum y amplitude g(|ky|) with sum(g^2) = ny."""
    ky = np.abs(np.fft.fftfreq(ny, d=1.0 / ny))
    g = np.exp(-((ky / (ny / y_corr)) ** 2))
    return g * math.sqrt(ny / np.sum(g**2))


def _amplitude_grid(fx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Separable amplitude on the rfft2 grid: A[iy, ix] = g(ky) f(kx)."""
    return gy[:, None] * fx[None, :]


def _synthesize(a_rfft: np.ndarray, ny: int, nx: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((ny, nx))
    return np.fft.irfft2(a_rfft * np.fft.rfft2(z), s=(ny, nx))


def _full_square_sum(a_rfft: np.ndarray, nx: int) -> float:
    """Sum of A^2 over the full 2-D spectrum given the rfft half-grid."""
    w = np.full(a_rfft.shape[1], 2.0)
    w[0] = 1.0
    if nx % 2 == 0:
        w[-1] = 1.0
    return float(np.sum(a_rfft**2 * w[None, :]))


def make_grf(
    shape: tuple[int, int],
    slope: float,
    amplitude: float,
    seed: int,
    kmin: int = 1,
    kmax: int | None = None,
) -> np.ndarray:
    """Zero-mean Gaussian random field with x-PSD amplitude^2 k^(-slope) / nx."""
    ny, nx = shape
    if ny < 4 or nx < 4:
        raise ConfigError(f"shape {shape} too small for spectral synthesis")
    fx = _x_filter(nx, slope, amplitude, kmin, kmax)
    gy = _y_envelope(ny, y_corr=6.0)
    return _synthesize(_amplitude_grid(fx, gy), ny, nx, np.random.default_rng(seed))


def expected_psd_x(
    nx: int, slope: float, amplitude: float, kmin: int = 1, kmax: int | None = None
) -> np.ndarray:
    """Analytic expected x-direction PSD of `make_grf` output, k = 0..nx/2."""
    return _x_filter(nx, slope, amplitude, kmin, kmax) ** 2 / nx


# ---------------------------------------------------------------------------
# Simulator


class Simulator:
    """Precomputed machinery for stepping one `SynthConfig` world."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        ny, nx = cfg.grid
        self.ny, self.nx = ny, nx
        self.n_prog = len(cfg.channels)
        self.gy = _y_envelope(ny, cfg.y_corr)
        self.x_filters = [
            _x_filter(nx, ch.slope, ch.amplitude) for ch in cfg.channels
        ]
        self._build_flow()
        self._build_forcing()
        self._precip_scale = self._divergence_std()

    # -- flow ---------------------------------------------------------------

    def _build_flow(self):
        cfg = self.cfg
        ny, nx = self.ny, self.nx
        yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        rng = rng_for(cfg.seed, "flow")
        modes = [(1, 1), (2, 1), (1, 2), (2, 2), (1, 3), (3, 1)]
        n_modes = min(cfg.flow.n_modes, len(modes))
        self._flow_modes = []
        for j in range(n_modes):
            m, n = modes[j]
            phase = rng.uniform(0, 2 * np.pi)
            self._flow_modes.append((m, n, phase))
        # Scale mode amplitudes so the peak eddy speed hits eddy_amplitude.
        u, v = self._eddy_uv(xx, yy, 0, raw=True)
        peak = max(np.abs(u).max(), np.abs(v).max(), 1e-12)
        self._eddy_scale = cfg.flow.eddy_amplitude / peak
        self._xx, self._yy = xx, yy

    def _eddy_uv(self, xx, yy, t: int, raw: bool = False):
        cfg = self.cfg
        ny, nx = self.ny, self.nx
        u = np.zeros((ny, nx))
        v = np.zeros((ny, nx))
        for j, (m, n, phase) in enumerate(self._flow_modes):
            omega = 0.0
            if cfg.flow.period_steps > 0:
                omega = 2 * np.pi / cfg.flow.period_steps * (1 if j % 2 == 0 else -1)
            arg = 2 * np.pi * (m * xx / nx + n * yy / ny) + phase + omega * t
            # psi = cos(arg): u = dpsi/dy, v = -dpsi/dx.
            u += -(2 * np.pi * n / ny) * np.sin(arg)
            v += (2 * np.pi * m / nx) * np.sin(arg)
        if not raw:
            u *= self._eddy_scale
            v *= self._eddy_scale
        return u, v

    def flow_at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        u, v = self._eddy_uv(self._xx, self._yy, t)
        return u + self.cfg.flow.drift_u, v + self.cfg.flow.drift_v

    def advect(self, fields: np.ndarray, t: int = 0) -> np.ndarray:
        """Semi-Lagrangian advection: bilinear sampling at departure points."""
        u, v = self.flow_at(t)
        xi = self._xx - u
        yi = self._yy - v
        x0 = np.floor(xi).astype(np.int64)
        y0 = np.floor(yi).astype(np.int64)
        fx = xi - x0
        fy = yi - y0
        x0m = np.mod(x0, self.nx)
        x1m = np.mod(x0 + 1, self.nx)
        y0m = np.mod(y0, self.ny)
        y1m = np.mod(y0 + 1, self.ny)
        f = np.asarray(fields, dtype=np.float64)
        out = (
            f[..., y0m, x0m] * (1 - fy) * (1 - fx)
            + f[..., y0m, x1m] * (1 - fy) * fx
            + f[..., y1m, x0m] * fy * (1 - fx)
            + f[..., y1m, x1m] * fy * fx
        )
        return out

    # -- forcing ------------------------------------------------------------

    def _retention_x(self, t_samples: Sequence[int] = (0,)) -> np.ndarray:
        """Approximate one-step x-PSD retention of advection, per kx bin.

        Bilinear sampling at fractional offset d multiplies a mode of
        phase angle theta by 1 - 2 d (1 - d)(1 - cos theta); the spatial
        mean of d(1-d) over the displacement field gives the per-axis
        loss, and the y-axis loss is averaged under the g^2 envelope.
        """
        qx = 0.0
        qy = 0.0
        for t in t_samples:
            u, v = self.flow_at(t)
            dx = np.mod(-u, 1.0)
            dy = np.mod(-v, 1.0)
            qx += float(np.mean(2 * dx * (1 - dx)))
            qy += float(np.mean(2 * dy * (1 - dy)))
        qx /= len(t_samples)
        qy /= len(t_samples)
        theta_x = 2 * np.pi * np.arange(self.nx // 2 + 1) / self.nx
        theta_y = 2 * np.pi * np.fft.fftfreq(self.ny, d=1.0 / self.ny) / self.ny
        rx = 1.0 - qx * (1.0 - np.cos(theta_x))
        ry = 1.0 - qy * (1.0 - np.cos(theta_y))
        ry_mean = float(np.sum(self.gy**2 * ry) / np.sum(self.gy**2))
        return np.clip(rx * ry_mean, 1e-3, 1.0)

    def _build_forcing(self):
        cfg = self.cfg
        if cfg.flow.period_steps > 0:
            t_samples = list(range(cfg.flow.period_steps))
        else:
            t_samples = [0]
        self.retention_x = self._retention_x(t_samples)
        d2r = np.clip(cfg.damping**2 * self.retention_x, 0.0, 1.0 - 1e-6)
        gain = np.sqrt(1.0 - d2r)
        self.forcing_filters = []
        for fx in self.x_filters:
            ff = fx * gain
            ff[: cfg.forcing_cutoff + 1] = 0.0
            self.forcing_filters.append(ff * cfg.forcing_amplitude)

    def forcing_variance(self) -> np.ndarray:
        """Analytic per-pixel variance of the forcing, per prognostic channel."""
        out = []
        for ff in self.forcing_filters:
            a = _amplitude_grid(ff, self.gy)
            out.append(_full_square_sum(a, self.nx) / (self.nx * self.ny))
        return np.asarray(out)

    # -- precipitation diagnostic --------------------------------------------

    def _divergence_std(self) -> float:
        """Analytic std of the divergence proxy under the target spectra."""
        theta_x = 2 * np.pi * np.arange(self.nx // 2 + 1) / self.nx
        theta_y = 2 * np.pi * np.fft.fftfreq(self.ny, d=1.0 / self.ny) / self.ny
        a1 = _amplitude_grid(self.x_filters[0], self.gy) * np.sin(theta_x)[None, :]
        a2 = _amplitude_grid(self.x_filters[1], self.gy) * np.abs(np.sin(theta_y))[:, None]
        var = (_full_square_sum(a1, self.nx) + _full_square_sum(a2, self.nx)) / (
            self.nx * self.ny
        )
        return math.sqrt(max(var, 1e-30))

    def diagnose_precip(self, prog: np.ndarray) -> np.ndarray:
        """Rectified, thresholded convergence of the first two channels.

        The convergence is standardized by its own spatial std (a pure
        function of the state), so the wet fraction stays near
        P(z > threshold) regardless of where the dynamics equilibrate.
        """
        c1, c2 = prog[0], prog[1]
        ddx = (np.roll(c1, -1, axis=-1) - np.roll(c1, 1, axis=-1)) / 2.0
        ddy = (np.roll(c2, -1, axis=-2) - np.roll(c2, 1, axis=-2)) / 2.0
        conv = -(ddx + ddy)
        conv = conv / max(float(conv.std()), 1e-12 * self._precip_scale)
        return self.cfg.precip_gain * np.maximum(conv - self.cfg.precip_threshold, 0.0)

    # -- stepping -------------------------------------------------------------

    def deterministic_prog(self, prog: np.ndarray, t: int = 0) -> np.ndarray:
        return self.cfg.damping * self.advect(prog, t)

    def step_values(
        self, state: np.ndarray, t: int = 0, rng: np.random.Generator | None = None
    ) -> np.ndarray:
        """One step: advect + damp prognostics, force, re-diagnose precip."""
        cfg = self.cfg
        prog = self.deterministic_prog(state[: self.n_prog], t)
        if cfg.forcing_amplitude > 0:
            if rng is None:
                raise ConfigError("stochastic forcing requires an rng")
            for c in range(self.n_prog):
                a = _amplitude_grid(self.forcing_filters[c], self.gy)
                prog[c] += _synthesize(a, self.ny, self.nx, rng)
        out = np.empty((self.n_prog + 1, self.ny, self.nx))
        out[: self.n_prog] = prog
        out[self.n_prog] = self.diagnose_precip(prog)
        return out

    def initial_values(self, rng: np.random.Generator) -> np.ndarray:
        prog = np.stack(
            [
                _synthesize(_amplitude_grid(fx, self.gy), self.ny, self.nx, rng)
                for fx in self.x_filters
            ]
        )
        out = np.empty((self.n_prog + 1, self.ny, self.nx))
        out[: self.n_prog] = prog
        out[self.n_prog] = self.diagnose_precip(prog)
        return out

    def run(self) -> np.ndarray:
        """Simulate spinup + n_steps states; returns [n_steps, C, ny, nx] float32."""
        cfg = self.cfg
        state = self.initial_values(rng_for(cfg.seed, "ic"))
        for t in range(cfg.spinup_steps):
            state = self.step_values(state, t, rng_for(cfg.seed, "spinup", t))
        frames = np.empty(
            (cfg.n_steps, self.n_prog + 1, self.ny, self.nx), dtype=np.float32
        )
        frames[0] = state
        for t in range(1, cfg.n_steps):
            state = self.step_values(state, cfg.spinup_steps + t - 1, rng_for(cfg.seed, "forcing", t))
            frames[t] = state
        return frames

    def base_specs(self) -> list[VariableSpec]:
        specs = [
            VariableSpec(name=ch.name, level="surface", units="1")
            for ch in self.cfg.channels
        ]
        specs.append(
            VariableSpec(
                name=PRECIP_NAME,
                level="surface",
                units="kg m-2 h-1",
                transform="log1p",
            )
        )
        return specs


_SIM_CACHE: dict[str, Simulator] = {}


def _sim_for(cfg: SynthConfig) -> Simulator:
    key = canonical_json(
        {
            "grid": list(cfg.grid),
            "channels": [(c.name, c.slope, c.amplitude) for c in cfg.channels],
            "flow": vars(cfg.flow),
            "forcing": [cfg.forcing_amplitude, cfg.forcing_cutoff],
            "damping": cfg.damping,
            "seed": cfg.seed,
            "precip": [cfg.precip_threshold, cfg.precip_gain],
            "y_corr": cfg.y_corr,
        }
    )
    if key not in _SIM_CACHE:
        if len(_SIM_CACHE) > 8:
            _SIM_CACHE.clear()
        _SIM_CACHE[key] = Simulator(cfg)
    return _SIM_CACHE[key]


# ---------------------------------------------------------------------------
# Spec-level operations


def step(fs, cfg: SynthConfig, rng: np.random.Generator | None = None, t: int = 0):
    """Advance a field set one step under the configured dynamics."""
    from dataclasses import replace

    sim = _sim_for(cfg)
    values = sim.step_values(np.asarray(fs.values, dtype=np.float64), t, rng)
    return replace(fs, values=values, time_index=fs.time_index + 1)


def deterministic_step(fs, cfg: SynthConfig, t: int = 0):
    """The damping * advection part of `step`, with precip re-diagnosed."""
    from dataclasses import replace

    sim = _sim_for(cfg)
    prog = sim.deterministic_prog(np.asarray(fs.values[: sim.n_prog], dtype=np.float64), t)
    values = np.concatenate([prog, sim.diagnose_precip(prog)[None]], axis=0)
    return replace(fs, values=values, time_index=fs.time_index + 1)


def generate_dataset(cfg: SynthConfig, out_dir: Path | str) -> dict[str, Path]:
    """Simulate and persist train/val/test GSETv001 files.

    Normalization statistics come from the train split only and are
    stored in every header, so the transform is reversible downstream.
    """
    if cfg.n_steps < 20:
        raise ConfigError("n_steps must be >= 20")
    n_train = int(math.floor(cfg.splits[0] * cfg.n_steps))
    n_val = int(math.floor(cfg.splits[1] * cfg.n_steps))
    n_test = cfg.n_steps - n_train - n_val
    if min(n_train, n_val, n_test) < 2:
        raise ConfigError(
            f"degenerate split sizes {n_train}/{n_val}/{n_test}: each needs >= 2 steps"
        )

    sim = _sim_for(cfg)
    frames = sim.run()
    specs = compute_norm_specs(frames[:n_train], sim.base_specs())

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bounds = {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, cfg.n_steps),
    }
    paths = {}
    for name, (lo, hi) in bounds.items():
        gs = GridSet(
            values=frames[lo:hi],
            specs=specs,
            dt_hours=cfg.dt_hours,
            seed=cfg.seed,
            time_start=lo,
        )
        paths[name] = write_gridset(gs, out_dir / f"{name}.gset")
    return paths
