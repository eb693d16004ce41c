"""Monte Carlo ground truth for the analytic chain.

Two entry points:
  * run_monte_carlo: evolves the Gauss-Markov channel slot by slot, builds
    ZF precoders from the previous slot's matrix, draws per-slot decoding
    outcomes from the instantaneous Q-form BLERs, and accumulates per-user
    BLER and AoI statistics with normal-approximation confidence intervals.
  * slot_aoi_trace: a bare Bernoulli slot process with prescribed failure
    probabilities, used as the independent oracle for the renewal formula.

Trials are independent blocks of consecutive slots keyed by block index;
RNG substreams derive from (seed, block, attempt) so multi-worker runs
reduce to exactly the single-worker result in ascending block order.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .bler import CodeParams, code_params_from_split, normal_approx_bler
from .model import (LinkBudget, PowerAllocation, RateSplit, SystemConfig,
                    ZF_CONDITION_LIMIT, NearSingularChannelError,
                    validate_config)

WARMUP_SLOTS = 100
DEFAULT_BLOCK_SLOTS = 1000
_MAX_RESAMPLE_ATTEMPTS = 100


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class SimResult:
    """Empirical estimates; all per-user arrays are shape (K,).

    empirical_bler / empirical_aaoi map stream name -> estimate, with 95%
    half-widths alongside. AoI entries exist only in slot mode.
    """

    n_trials: int
    n_blocks: int
    empirical_bler: Dict[str, np.ndarray]
    bler_halfwidth: Dict[str, np.ndarray]
    empirical_aaoi: Dict[str, np.ndarray]
    aaoi_halfwidth: Dict[str, np.ndarray]
    sinr_samples: Optional[Dict[str, np.ndarray]]
    resample_count: int


@dataclass
class AoiTrace:
    """One Bernoulli AoI sample path.

    slot_aoi[i] is the age right after the slot-i reception instant; the
    age resets to one slot duration on success and otherwise keeps growing
    by exactly one slot per slot. success_gaps are the renewal lengths W_j
    between consecutive successes and area_terms the exact per-renewal
    areas T^2 (W_j^2/2 + W_j).
    """

    slot_aoi: np.ndarray
    success_gaps: np.ndarray
    area_terms: np.ndarray
    slot_duration_s: float
    time_average: float
    renewal_average: float


# ---------------------------------------------------------------------------
# AoI bookkeeping on success masks
# ---------------------------------------------------------------------------

def _ages_after_slots(success: np.ndarray, slot_s: float) -> np.ndarray:
    """Age at each slot's end boundary given per-slot success flags.

    Boundary i+1 carries age (i - last_success_index(<=i) + 1) * T, with a
    virtual reset at boundary 0.
    """
    n = success.shape[0]
    idx = np.arange(n)
    marked = np.where(success, idx, -1)
    last = np.maximum.accumulate(marked)
    return (idx - last + 1.0) * slot_s


def _windowed_time_average(success: np.ndarray, slot_s: float,
                           warmup: int) -> float:
    """Time-average age between the first and last resets after warm-up.

    Averaging over whole renewals keeps the estimator unbiased and makes the
    direct slot sum agree exactly with the per-renewal area bookkeeping.
    With fewer than two post-warm-up successes the raw post-warm-up trace is
    averaged instead (the documented divergent regime).
    """
    n = success.shape[0]
    warmup = min(warmup, n - 1) if n > 1 else 0
    ages_end = _ages_after_slots(success, slot_s)
    ages_start = np.empty(n)
    ages_start[0] = slot_s
    ages_start[1:] = ages_end[:-1]
    post = np.flatnonzero(success[max(warmup - 1, 0):]) + max(warmup - 1, 0)
    if post.size >= 2:
        start, end = int(post[0]) + 1, int(post[-1]) + 1
    else:
        start, end = warmup, n
    areas = slot_s * ages_start[start:end] + 0.5 * slot_s * slot_s
    return float(areas.sum() / ((end - start) * slot_s))


def slot_aoi_trace(failure_probs, n_slots: int, slot_duration_s: float,
                   rng: np.random.Generator,
                   warmup: int = WARMUP_SLOTS) -> AoiTrace:
    """Bernoulli slot process with per-slot (or constant) failure probability."""
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    eps = np.broadcast_to(np.asarray(failure_probs, dtype=float), (n_slots,))
    if np.any(eps < 0) or np.any(eps > 1):
        raise ValueError("failure probabilities must lie in [0, 1]")
    success = rng.random(n_slots) >= eps
    ages = _ages_after_slots(success, slot_duration_s)

    succ_idx = np.flatnonzero(success)
    gaps = np.diff(succ_idx).astype(float)
    areas = slot_duration_s ** 2 * (gaps ** 2 / 2.0 + gaps)
    time_avg = _windowed_time_average(success, slot_duration_s, warmup)

    # same window, renewal bookkeeping: renewals strictly after the first
    # post-warm-up reset and up to the last one
    renewal_avg = math.nan
    post = succ_idx[succ_idx >= max(warmup - 1, 0)]
    if post.size >= 2:
        w = np.diff(post).astype(float)
        q = slot_duration_s ** 2 * (w ** 2 / 2.0 + w)
        renewal_avg = float(q.sum() / (slot_duration_s * w.sum()))
    return AoiTrace(slot_aoi=ages, success_gaps=gaps, area_terms=areas,
                    slot_duration_s=slot_duration_s,
                    time_average=time_avg, renewal_average=renewal_avg)


# ---------------------------------------------------------------------------
# channel pipeline (vectorized over the slots of one block)
# ---------------------------------------------------------------------------

def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
        / np.sqrt(2.0)


def _block_rng(seed: int, block: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, block, attempt]))


def _evolve_block(rng: np.random.Generator, n_slots: int, k: int, nt: int,
                  rho: float) -> np.ndarray:
    """(n_slots+1, K, Nt) Gauss-Markov path started from stationarity."""
    h0 = _complex_normal(rng, (k, nt))
    if n_slots == 0:
        return h0[None]
    innov = _complex_normal(rng, (n_slots, k, nt))
    scale = math.sqrt(max(0.0, 1.0 - rho * rho))
    path, _ = lfilter([scale], [1.0, -rho], innov, axis=0, zi=rho * h0[None])
    return np.concatenate([h0[None], path], axis=0)


def _batched_zf(csit: np.ndarray, cond_limit: float) -> np.ndarray:
    """Column-normalized ZF precoders for a (S, K, Nt) CSIT stack."""
    sv = np.linalg.svd(csit, compute_uv=False)
    if np.any(sv[:, -1] <= 0) or np.any(sv[:, 0] / sv[:, -1] > cond_limit):
        raise NearSingularChannelError("near-singular CSIT in block")
    gram = csit @ csit.conj().transpose(0, 2, 1)
    pinv = (csit.conj().transpose(0, 2, 1) @ np.linalg.inv(gram)).conj()
    return pinv / np.linalg.norm(pinv, axis=1, keepdims=True)


def _simulate_block(cfg: SystemConfig, budget: LinkBudget,
                    alloc: PowerAllocation, common_code: CodeParams,
                    private_codes: Sequence[CodeParams], n_slots: int,
                    seed: int, block: int, mode: str, common_mode: str,
                    cond_limit: float, keep_sinr: bool):
    """One independent chain of warm-up + measured slots; returns raw stats."""
    k, nt = cfg.n_users, cfg.n_antennas
    rho = budget.rho
    total = n_slots + (WARMUP_SLOTS if mode == "slot_aoi" else 0)
    resamples = 0
    for attempt in range(_MAX_RESAMPLE_ATTEMPTS):
        rng = _block_rng(seed, block, attempt)
        h = _evolve_block(rng, total, k, nt, rho)
        csit, h_true = h[:-1], h[1:]
        try:
            precoders = _batched_zf(csit, cond_limit)
        except NearSingularChannelError:
            resamples += 1
            continue
        break
    else:
        raise NearSingularChannelError(
            f"block {block}: CSIT stayed near-singular after "
            f"{_MAX_RESAMPLE_ATTEMPTS} resampling attempts")

    if common_mode == "random":
        pc = _complex_normal(rng, (total, nt))
        pc /= np.linalg.norm(pc, axis=1, keepdims=True)
    else:
        cov = csit.transpose(0, 2, 1) @ csit.conj() / k
        _, vecs = np.linalg.eigh(cov)
        pc = vecs[..., -1]

    h_conj = h_true.conj()
    gain_c = np.abs(np.einsum("skn,sn->sk", h_conj, pc)) ** 2
    cross = np.abs(np.einsum("skn,snj->skj", h_conj, precoders)) ** 2
    alpha = np.asarray(alloc.alpha, dtype=float)
    p_xi = budget.p_n * budget.xi
    interference = cross @ alpha
    own = np.einsum("skk->sk", cross) * alpha
    gamma_c = p_xi * alloc.alpha_c * gain_c / (p_xi * interference + 1.0)
    gamma_p = p_xi * own / (p_xi * (interference - own) + 1.0)

    eps_c = normal_approx_bler(gamma_c, common_code)
    eps_p = np.column_stack([
        normal_approx_bler(gamma_p[:, j], private_codes[j]) for j in range(k)])

    out = {"resamples": resamples}
    if keep_sinr:
        out["sinr_common"] = gamma_c
        out["sinr_private"] = gamma_p

    if mode == "analytic_bler_check":
        # Rao-Blackwellized estimate: average the instantaneous error
        # probabilities instead of drawing outcomes
        out["bler_common"] = eps_c.mean(axis=0)
        out["bler_private"] = eps_p.mean(axis=0)
        out["bler_overall"] = (eps_c + (1 - eps_c) * eps_p).mean(axis=0)
        return out

    success_c = rng.random((total, k)) >= eps_c
    success_p_raw = rng.random((total, k)) >= eps_p
    success_all = success_c & success_p_raw

    out["bler_common"] = 1.0 - success_c[WARMUP_SLOTS:].mean(axis=0)
    attempts = success_c[WARMUP_SLOTS:].sum(axis=0)
    failures = (success_c[WARMUP_SLOTS:] & ~success_p_raw[WARMUP_SLOTS:]).sum(axis=0)
    with np.errstate(invalid="ignore"):
        out["bler_private"] = np.where(attempts > 0, failures / attempts, np.nan)
    out["bler_overall"] = 1.0 - success_all[WARMUP_SLOTS:].mean(axis=0)
    out["aaoi_common"] = np.array([
        _windowed_time_average(success_c[:, j], cfg.slot_duration_s,
                               WARMUP_SLOTS) for j in range(k)])
    out["aaoi_overall"] = np.array([
        _windowed_time_average(success_all[:, j], cfg.slot_duration_s,
                               WARMUP_SLOTS) for j in range(k)])
    out["trace"] = (gamma_c, gamma_p, success_c, success_all)
    return out


def _mean_halfwidth(stack: np.ndarray):
    """Across-block mean and 95% normal-approximation half-width."""
    mean = np.nanmean(stack, axis=0)
    if stack.shape[0] < 2:
        return mean, np.full_like(mean, np.nan)
    std = np.nanstd(stack, axis=0, ddof=1)
    return mean, 1.96 * std / math.sqrt(stack.shape[0])


def run_monte_carlo(cfg: SystemConfig, alloc: PowerAllocation,
                    split: RateSplit, mode: str = "slot_aoi",
                    seed: Optional[int] = None,
                    n_trials: Optional[int] = None,
                    workers: int = 1,
                    common_mode: str = "random",
                    block_slots: int = DEFAULT_BLOCK_SLOTS,
                    cond_limit: float = ZF_CONDITION_LIMIT,
                    keep_sinr_samples: Optional[bool] = None,
                    trace_path=None) -> SimResult:
    """Monte Carlo estimates of per-user BLER and AAoI.

    mode "analytic_bler_check" draws stationary slots and keeps the SINR
    samples; mode "slot_aoi" runs the full per-slot Bernoulli decoding
    pipeline (common first, private only on common success) and measures
    AoI time averages after a fixed 100-slot warm-up per block.

    n_trials counts payload slots and is rounded down to whole blocks of
    `block_slots` (a single shorter block when n_trials < block_slots).
    """
    if mode not in ("analytic_bler_check", "slot_aoi"):
        raise ValueError(f"unknown Monte Carlo mode {mode!r}")
    budget = validate_config(cfg)
    alloc.validate()
    seed = cfg.rng_seed if seed is None else int(seed)
    n_trials = cfg.n_trials if n_trials is None else int(n_trials)
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if keep_sinr_samples is None:
        keep_sinr_samples = mode == "analytic_bler_check"
    common_code, private_codes = code_params_from_split(cfg, split)

    n_blocks = max(1, n_trials // block_slots)
    per_block = block_slots if n_trials >= block_slots else n_trials

    def job(block_index: int):
        return _simulate_block(cfg, budget, alloc, common_code, private_codes,
                               per_block, seed, block_index, mode,
                               common_mode, cond_limit, keep_sinr_samples)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(n_blocks)))
    else:
        results = [job(b) for b in range(n_blocks)]

    # ordered reduction: blocks are already in ascending index order
    bler = {}
    bler_hw = {}
    for key in ("common", "private", "overall"):
        stack = np.stack([r["bler_" + key] for r in results])
        bler[key], bler_hw[key] = _mean_halfwidth(stack)
    aaoi = {}
    aaoi_hw = {}
    if mode == "slot_aoi":
        for key in ("common", "overall"):
            stack = np.stack([r["aaoi_" + key] for r in results])
            aaoi[key], aaoi_hw[key] = _mean_halfwidth(stack)
    samples = None
    if keep_sinr_samples:
        samples = {
            "common": np.concatenate([r["sinr_common"] for r in results]),
            "private": np.concatenate([r["sinr_private"] for r in results]),
        }
    if trace_path is not None and mode == "slot_aoi":
        _dump_trace(trace_path, cfg, results)
    return SimResult(n_trials=n_blocks * per_block, n_blocks=n_blocks,
                     empirical_bler=bler, bler_halfwidth=bler_hw,
                     empirical_aaoi=aaoi, aaoi_halfwidth=aaoi_hw,
                     sinr_samples=samples,
                     resample_count=sum(r["resamples"] for r in results))


def _dump_trace(path, cfg: SystemConfig, results) -> None:
    """Raw per-slot dump: slot, user, stream, SINR, success flag, AoI.

    Common rows track the common-stream decoder; private rows carry the
    private-stream SINR together with the complete-update success flag and
    the overall age it drives.
    """
    t_slot = cfg.slot_duration_s
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "user", "stream", "sinr", "success", "aoi_s"])
        offset = 0
        for res in results:
            gamma_c, gamma_p, success_c, success_all = res["trace"]
            n, k = success_c.shape
            for stream, gamma, succ in (("common", gamma_c, success_c),
                                        ("private", gamma_p, success_all)):
                ages = np.column_stack([
                    _ages_after_slots(succ[:, j], t_slot) for j in range(k)])
                for j in range(k):
                    for i in range(n):
                        writer.writerow([offset + i, j, stream,
                                         repr(float(gamma[i, j])),
                                         int(succ[i, j]),
                                         repr(float(ages[i, j]))])
            offset += n
