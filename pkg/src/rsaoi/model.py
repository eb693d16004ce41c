"""Scenario configuration, link budget, Gauss-Markov fading and MISO precoding.

Conventions used throughout the package:
  * channel matrices have shape (K, Nt) with row k holding the vector of
    vehicle-k antenna coefficients; inner products are h_k^H p = conj(h_k) @ p
  * the transmitter only ever sees the previous slot's matrix (outdated CSIT)
  * path loss takes the carrier in GHz and distances in meters
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 3.0e8  # m/s
ZF_CONDITION_LIMIT = 1e8  # CSIT condition number above this triggers a resample


class ConfigError(ValueError):
    """Invalid scenario configuration."""


class NearSingularChannelError(RuntimeError):
    """CSIT matrix too ill-conditioned for ZF; the trial should be redrawn."""


def kmh_to_mps(v_kmh: float) -> float:
    return v_kmh / 3.6


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemConfig:
    """All scenario parameters. Defaults reproduce the reference setup:
    5x4 downlink at 5.9 GHz / 10 MHz, 35 dBm, 200 km/h, 0.24 ms slots,
    200 info bits (30% multicast), blocklength 400, vehicles at 200..350 m.
    """

    n_antennas: int = 5
    n_users: int = 4
    tx_power_dbm: float = 35.0
    noise_density_dbm_hz: float = -174.0
    bandwidth_hz: float = 10e6
    carrier_hz: float = 5.9e9
    velocity_mps: float = 200.0 / 3.6
    slot_duration_s: float = 0.24e-3
    info_bits_total: int = 200
    multicast_fraction: float = 0.3
    blocklength_common: int = 400
    blocklength_private: tuple = (400, 400, 400, 400)
    distances_m: tuple = (200.0, 250.0, 300.0, 350.0)
    qos_lambda: float = 0.8
    rng_seed: int = 12345
    n_trials: int = 100_000

    def with_(self, **overrides) -> "SystemConfig":
        """Copy with replaced fields; scalar blocklength_private is broadcast."""
        bl = overrides.get("blocklength_private")
        if bl is not None and np.isscalar(bl):
            k = overrides.get("n_users", self.n_users)
            overrides["blocklength_private"] = tuple(int(bl) for _ in range(k))
        for key in ("blocklength_private", "distances_m"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        return replace(self, **overrides)


# JSON schema for config files: every SystemConfig field, one key each.
CONFIG_KEYS = {f.name for f in fields(SystemConfig)}
_LIST_KEYS = {"blocklength_private", "distances_m"}
_INT_KEYS = {"n_antennas", "n_users", "info_bits_total", "blocklength_common",
             "rng_seed", "n_trials"}


def config_from_dict(data: dict) -> SystemConfig:
    """Build a SystemConfig from a parsed JSON object; unknown keys rejected."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    kwargs = {}
    for key, val in data.items():
        if key in _LIST_KEYS:
            if not isinstance(val, (list, tuple)):
                raise ConfigError(f"config key '{key}' must be a list")
            kwargs[key] = tuple(float(v) if key == "distances_m" else int(v)
                                for v in val)
        elif key in _INT_KEYS:
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"config key '{key}' must be an integer")
            kwargs[key] = val
        else:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"config key '{key}' must be a number")
            kwargs[key] = float(val)
    cfg = SystemConfig(**kwargs)
    validate_config(cfg)  # fail fast with a config-level diagnostic
    return cfg


def load_config(path) -> SystemConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: SystemConfig) -> dict:
    out = {}
    for f in fields(SystemConfig):
        val = getattr(cfg, f.name)
        out[f.name] = list(val) if isinstance(val, tuple) else val
    return out


# ---------------------------------------------------------------------------
# link budget
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkBudget:
    """Derived per-scenario constants: Doppler correlation, attenuation,
    normalized transmit power P_T/sigma^2 (linear)."""

    rho: float
    xi: np.ndarray          # (K,) linear path-loss attenuation
    p_n: float
    noise_power_dbm: float


def path_loss_db(distance_m: float, carrier_hz: float) -> float:
    """Path loss in dB (negative gain); carrier internally in GHz."""
    f_ghz = carrier_hz / 1e9
    return -32.4 - 20.0 * math.log10(f_ghz) - 31.9 * math.log10(distance_m)


def validate_config(cfg: SystemConfig) -> LinkBudget:
    """Check all SystemConfig invariants and derive the link budget."""
    if cfg.n_users < 1:
        raise ConfigError(f"need at least one user, got K={cfg.n_users}")
    if cfg.n_antennas < cfg.n_users:
        raise ConfigError(
            f"antenna count must be at least the user count "
            f"(Nt={cfg.n_antennas} < K={cfg.n_users})")
    if len(cfg.distances_m) != cfg.n_users:
        raise ConfigError(
            f"distances_m has {len(cfg.distances_m)} entries for K={cfg.n_users}")
    if len(cfg.blocklength_private) != cfg.n_users:
        raise ConfigError(
            f"blocklength_private has {len(cfg.blocklength_private)} entries "
            f"for K={cfg.n_users}")
    if any(d <= 0 for d in cfg.distances_m):
        raise ConfigError(f"distances must be positive, got {cfg.distances_m}")
    if cfg.qos_lambda <= 0:
        raise ConfigError(f"qos_lambda must be positive, got {cfg.qos_lambda}")
    if cfg.blocklength_common < 1 or any(n < 1 for n in cfg.blocklength_private):
        raise ConfigError("all blocklengths must be >= 1")
    if not 0.0 <= cfg.multicast_fraction <= 1.0:
        raise ConfigError(
            f"multicast_fraction must lie in [0, 1], got {cfg.multicast_fraction}")
    if cfg.slot_duration_s <= 0:
        raise ConfigError("slot_duration_s must be positive")
    if cfg.bandwidth_hz <= 0 or cfg.carrier_hz <= 0:
        raise ConfigError("bandwidth and carrier frequency must be positive")
    if cfg.velocity_mps < 0:
        raise ConfigError("velocity must be nonnegative")
    if cfg.info_bits_total < 0:
        raise ConfigError("info_bits_total must be nonnegative")
    if cfg.n_trials < 1:
        raise ConfigError("n_trials must be >= 1")

    rho = doppler_correlation(cfg.velocity_mps, cfg.carrier_hz, cfg.slot_duration_s)
    xi = np.array([10.0 ** (path_loss_db(d, cfg.carrier_hz) / 10.0)
                   for d in cfg.distances_m])
    noise_power_dbm = cfg.noise_density_dbm_hz + 10.0 * math.log10(cfg.bandwidth_hz)
    p_n = 10.0 ** ((cfg.tx_power_dbm - noise_power_dbm) / 10.0)
    return LinkBudget(rho=rho, xi=xi, p_n=p_n, noise_power_dbm=noise_power_dbm)


# ---------------------------------------------------------------------------
# Doppler correlation (zeroth-order Bessel function of the first kind)
# ---------------------------------------------------------------------------

def bessel_j0(x: float) -> float:
    """J0 via ascending power series for |x| <= 12, Hankel asymptotics beyond.

    Accurate to better than 1e-10 absolute over the real line.
    """
    x = abs(float(x))
    if x <= 12.0:
        q = 0.25 * x * x
        term = 1.0
        total = 1.0
        for k in range(1, 60):
            term *= -q / (k * k)
            total += term
            if abs(term) < 1e-18:
                break
        return total
    # J0(x) ~ sqrt(2/(pi x)) [P cos(x - pi/4) + Q sin(x - pi/4)],
    # with P = 1 - c2 + c4 - ..., Q = c1 - c3 + ..., c_k = c_{k-1} (2k-1)^2/(8kx).
    p_sum, q_sum = 1.0, 0.0
    c = 1.0
    sign = 1.0
    for k in range(1, 40):
        c_next = c * (2 * k - 1) ** 2 / (8.0 * k * x)
        if c_next > c and k > 2:
            break  # asymptotic series started diverging; stop at smallest term
        c = c_next
        if k % 2 == 1:
            q_sum += sign * c
        else:
            p_sum -= sign * c  # signs alternate per pair (c2 enters with minus)
            sign = -sign
        if c < 1e-18:
            break
    chi = x - 0.25 * math.pi
    return math.sqrt(2.0 / (math.pi * x)) * (p_sum * math.cos(chi) + q_sum * math.sin(chi))


def doppler_correlation(velocity_mps: float, carrier_hz: float,
                        slot_duration_s: float) -> float:
    """Slot-to-slot fading correlation J0(2 pi f_D T), f_D = v f_c / c."""
    if velocity_mps < 0:
        raise ConfigError("velocity must be nonnegative")
    f_doppler = velocity_mps * carrier_hz / SPEED_OF_LIGHT
    return bessel_j0(2.0 * math.pi * f_doppler * slot_duration_s)


# ---------------------------------------------------------------------------
# channel evolution
# ---------------------------------------------------------------------------

@dataclass
class ChannelState:
    """Fading at one slot plus the outdated matrix the transmitter works with."""

    slot_index: int
    h_current: np.ndarray   # (K, Nt) complex, unit-variance entries
    h_previous: np.ndarray  # (K, Nt) complex = CSIT


def draw_fading(n_users: int, n_antennas: int, rng: np.random.Generator) -> np.ndarray:
    """One (K, Nt) matrix of iid zero-mean unit-variance complex Gaussians."""
    re = rng.standard_normal((n_users, n_antennas))
    im = rng.standard_normal((n_users, n_antennas))
    return (re + 1j * im) / np.sqrt(2.0)


def initial_channel_state(cfg: SystemConfig, rng: np.random.Generator) -> ChannelState:
    h0 = draw_fading(cfg.n_users, cfg.n_antennas, rng)
    h1 = draw_fading(cfg.n_users, cfg.n_antennas, rng)
    return ChannelState(slot_index=1, h_current=h1, h_previous=h0)


def evolve_channel(state: ChannelState, rho: float,
                   rng: np.random.Generator) -> ChannelState:
    """First-order Gauss-Markov step: h' = rho h + sqrt(1-rho^2) e."""
    if abs(rho) > 1.0:
        raise ValueError(f"|rho| must be <= 1, got {rho}")
    k, nt = state.h_current.shape
    innovation = draw_fading(k, nt, rng)
    h_new = rho * state.h_current + math.sqrt(max(0.0, 1.0 - rho * rho)) * innovation
    return ChannelState(slot_index=state.slot_index + 1,
                        h_current=h_new, h_previous=state.h_current)


# ---------------------------------------------------------------------------
# precoding
# ---------------------------------------------------------------------------

@dataclass
class PrecoderSet:
    p_common: np.ndarray    # (Nt,) unit norm
    p_private: np.ndarray   # (Nt, K), column k serves user k, unit norm


def zf_precoders(csit: np.ndarray,
                 cond_limit: float = ZF_CONDITION_LIMIT) -> np.ndarray:
    """Column-normalized right pseudo-inverse of the CSIT matrix.

    Returns (Nt, K); column j is orthogonal to every CSIT row but row j.
    Raises NearSingularChannelError when cond(CSIT) exceeds `cond_limit`
    so the caller can resample the trial.
    """
    csit = np.asarray(csit)
    if np.linalg.cond(csit) > cond_limit:
        raise NearSingularChannelError(
            f"CSIT condition number exceeds {cond_limit:g}")
    gram = csit @ csit.conj().T
    pinv = csit.conj().T @ np.linalg.inv(gram)
    # the receiver correlates with h_k^H, so the nulling matrix is the
    # conjugate of the right pseudo-inverse: conj(h_j) @ p_k = delta_jk
    pinv = pinv.conj()
    return pinv / np.linalg.norm(pinv, axis=0, keepdims=True)


def common_precoder(csit: np.ndarray, mode: str,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Unit-norm common-stream precoder.

    mode "random": uniform on the complex unit sphere (analysis assumption).
    mode "principal_eigenvector": dominant eigenvector of the per-slot CSIT
    sample covariance (1/K) H^H H.
    """
    csit = np.asarray(csit)
    nt = csit.shape[1]
    if mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        vec = (rng.standard_normal(nt) + 1j * rng.standard_normal(nt)) / np.sqrt(2.0)
        return vec / np.linalg.norm(vec)
    if mode == "principal_eigenvector":
        # sample covariance (1/K) sum_k h_k h_k^H of the CSIT rows; its top
        # eigenvector maximizes the mean beamforming gain |h_k^H v|^2
        cov = csit.T @ csit.conj() / csit.shape[0]
        _, vecs = np.linalg.eigh(cov)
        vec = vecs[:, -1]
        return vec / np.linalg.norm(vec)
    raise ValueError(f"unknown common precoder mode {mode!r}")


# ---------------------------------------------------------------------------
# decision variables and instantaneous SINRs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerAllocation:
    """Stream power fractions: alpha_c + sum(alpha) = 1, all in [0, 1]."""

    alpha_c: float
    alpha: np.ndarray

    def validate(self, atol: float = 1e-9) -> None:
        alpha = np.asarray(self.alpha, dtype=float)
        total = self.alpha_c + alpha.sum()
        if abs(total - 1.0) > atol:
            raise ValueError(f"power fractions sum to {total}, expected 1")
        if not (-atol <= self.alpha_c <= 1 + atol) or np.any(alpha < -atol) \
                or np.any(alpha > 1 + atol):
            raise ValueError("power fractions must lie in [0, 1]")


@dataclass(frozen=True)
class RateSplit:
    """Per-user fraction of the unicast payload moved into the common stream."""

    psi: np.ndarray

    def validate(self) -> None:
        psi = np.asarray(self.psi, dtype=float)
        if np.any(psi < 0) or np.any(psi > 1):
            raise ValueError("rate-splitting fractions must lie in [0, 1]")


def uniform_allocation(cfg: SystemConfig, alpha_c: float = 0.5) -> PowerAllocation:
    k = cfg.n_users
    return PowerAllocation(alpha_c=alpha_c,
                           alpha=np.full(k, (1.0 - alpha_c) / k))


def uniform_split(cfg: SystemConfig, psi: float = 0.0) -> RateSplit:
    return RateSplit(psi=np.full(cfg.n_users, float(psi)))


def instantaneous_sinrs(h_true: np.ndarray, precoders: PrecoderSet,
                        alloc: PowerAllocation, budget: LinkBudget):
    """Per-user (common, private) SINRs for one slot.

    Common stream sees every private stream as noise; the private SINR
    assumes the common stream was removed perfectly first.
    """
    alloc.validate()
    h_conj = np.asarray(h_true).conj()
    gain_c = np.abs(h_conj @ precoders.p_common) ** 2            # (K,)
    cross = np.abs(h_conj @ precoders.p_private) ** 2            # (K, K)
    alpha = np.asarray(alloc.alpha, dtype=float)
    p_xi = budget.p_n * budget.xi
    interference_all = cross @ alpha                             # sum_j a_j |h_k p_j|^2
    own = np.diag(cross) * alpha
    gamma_c = p_xi * alloc.alpha_c * gain_c / (p_xi * interference_all + 1.0)
    gamma_p = p_xi * own / (p_xi * (interference_all - own) + 1.0)
    return gamma_c, gamma_p
