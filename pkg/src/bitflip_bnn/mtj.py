"""Behavioral spin-torque MTJ model: resistances, stochastic switching, energy.

A junction stores a bit as the relative magnetization of two layers;
parallel/antiparallel states differ in resistance:

    TMR = (R_AP - R_P) / R_P,   R_P = RA / area

Programming applies a voltage pulse. The mean switching time follows Sun's
model, tau = tau0 * Vc / (V - Vc) (valid for V well above the critical
voltage Vc), and the actual switching time is gamma-distributed with shape k
and scale theta = tau / k (k = 16 gives a relative spread of 0.25). A write
error is a cell that has not switched when the pulse ends, so

    BER(t_pulse) = P(t_sw > t_pulse) = Q(k, t_pulse / theta)

with Q the regularized upper incomplete gamma, evaluated for integer k by
the exact Poisson sum exp(-x) * sum_{i<k} x^i / i!. Per-write energy is the
junction conduction energy V^2 * t / R, split between the initial-state and
final-state resistance at the sampled switching instant. Device-to-device
variability perturbs R_P and TMR with independent Gaussian relative noise;
Vc and tau0 are held nominal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, NumericError

INTRINSIC_ONLY = "intrinsic_only"
WITH_DEVICE_VARIATIONS = "with_device_variations"
VARIABILITY_MODES = (INTRINSIC_ONLY, WITH_DEVICE_VARIATIONS)

P_TO_AP = "p_to_ap"
AP_TO_P = "ap_to_p"
DIRECTIONS = (P_TO_AP, AP_TO_P)

_MC_CHUNK = 1 << 20  # samples per vectorized chunk; fixed so results do not
# depend on how a caller splits the total sample count


@dataclass
class MtjDeviceParams:
    """Junction geometry, electrical parameters and variability sigmas.

    Units: diameter in nm, RA product in ohm*um^2, voltages in V, times in s.
    tmr and the sigmas are dimensionless ratios (tmr=1.5 means 150%).
    """

    diameter_nm: float
    ra_ohm_um2: float
    tmr: float
    v_c: float
    tau_0: float
    k: float
    v_write: float
    sigma_tmr_rel: float = 0.0
    sigma_rp_rel: float = 0.0

    def __post_init__(self):
        for name in ("diameter_nm", "ra_ohm_um2", "tmr", "v_c", "tau_0", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma_tmr_rel < 0 or self.sigma_rp_rel < 0:
            raise ValueError("variability sigmas must be non-negative")
        if self.v_write <= self.v_c:
            raise ValueError(
                f"v_write={self.v_write} V must exceed v_c={self.v_c} V "
                "(mean switching time diverges at the critical voltage)"
            )
        if self.v_write < 1.5 * self.v_c:
            warnings.warn(
                f"v_write={self.v_write} V is below 1.5*v_c; the mean "
                "switching-time model is only trusted well above v_c",
                stacklevel=2,
            )

    @classmethod
    def nominal(cls) -> "MtjDeviceParams":
        """32 nm perpendicular-anisotropy junction written at 2*Vc."""
        return cls(
            diameter_nm=32.0,
            ra_ohm_um2=4.0,
            tmr=1.5,
            v_c=0.190,
            tau_0=1e-9,
            k=16.0,
            v_write=2.0 * 0.190,
            sigma_tmr_rel=0.05,
            sigma_rp_rel=0.05,
        )


class EnergyStats(NamedTuple):
    energy_mean: float
    energy_std: float
    ber_observed: float


@dataclass
class ProgrammingPoint:
    """One operating point of the energy-vs-BER tradeoff curve."""

    t_pulse: float
    ber: float
    energy_mean: float
    energy_std: float
    variability_mode: str

    def __post_init__(self):
        if not 0.0 < self.ber <= 1.0:
            raise ValueError("ber must lie in (0, 1]")
        if self.t_pulse > 0 and self.energy_mean <= 0:
            raise ValueError("positive pulse must dissipate positive energy")
        if self.variability_mode not in VARIABILITY_MODES:
            raise ValueError(f"unknown variability mode {self.variability_mode!r}")


def resistances(params: MtjDeviceParams) -> tuple[float, float]:
    """(R_P, R_AP) in ohms from the RA product, diameter and TMR."""
    area_um2 = math.pi * (params.diameter_nm / 2000.0) ** 2
    r_p = params.ra_ohm_um2 / area_um2
    r_ap = r_p * (1.0 + params.tmr)
    return r_p, r_ap


def mean_switching_time(params: MtjDeviceParams) -> float:
    """Sun-model mean switching time tau0 * Vc / (V - Vc), in seconds."""
    if params.v_write <= params.v_c:
        raise ValueError("write voltage must exceed the critical voltage")
    return params.tau_0 * params.v_c / (params.v_write - params.v_c)


def _gamma_theta(params: MtjDeviceParams) -> float:
    return mean_switching_time(params) / params.k


def switching_time_sample(params: MtjDeviceParams, rng: np.random.Generator) -> float:
    """Draw one stochastic switching time (gamma, shape k, scale tau/k)."""
    return float(rng.gamma(params.k, _gamma_theta(params)))


def _integer_shape(k: float) -> int:
    ik = round(k)
    if ik < 1 or abs(k - ik) > 1e-9:
        raise ValueError(
            f"closed-form switching tail needs a positive integer gamma shape, got k={k}"
        )
    return ik


def gamma_upper_q(k: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(k, x) for positive integer k.

    Closed form (Poisson sum): Q(k, x) = exp(-x) * sum_{i=0}^{k-1} x^i / i!.
    Evaluated directly for x >= k; for x < k the numerically better route is
    the exact complement 1 - P(k, x) with P from its power series, which
    avoids accumulated rounding when Q is within a few ulp of 1.
    """
    ik = _integer_shape(k)
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0.0:
        return 1.0
    if x < ik:
        # P(k,x) = x^k e^-x / Gamma(k+1) * sum_{n>=0} x^n / ((k+1)...(k+n))
        term = 1.0 / ik
        total = term
        n = ik
        while True:
            n += 1
            term *= x / n
            total += term
            if term < total * 1e-17:
                break
        p_low = total * math.exp(-x + ik * math.log(x) - math.lgamma(ik))
        return 1.0 - p_low
    lead = math.exp(-x)
    if lead > 0.0:
        term = lead
        total = term
        for i in range(1, ik):
            term *= x / i
            total += term
    else:
        # x beyond exp underflow (~745): sum term-by-term in log space
        lx = math.log(x)
        total = 0.0
        for i in range(ik):
            total += math.exp(-x + i * lx - math.lgamma(i + 1))
    return min(total, 1.0)


def ber_at_pulse(params: MtjDeviceParams, t_pulse: float) -> float:
    """Probability that a cell is left unswitched by a pulse of this width."""
    if t_pulse < 0:
        raise ValueError("pulse width must be non-negative")
    return gamma_upper_q(params.k, t_pulse / _gamma_theta(params))


def pulse_for_ber(
    params: MtjDeviceParams, target_ber: float, rel_tol: float = 1e-9
) -> float:
    """Pulse width achieving a target BER, by bisection on the exact tail.

    Q(k, t/theta) is strictly decreasing in t, so the solution is unique.
    target_ber=1.0 maps to the t=0 boundary.
    """
    if not 0.0 < target_ber <= 1.0:
        raise ValueError("target BER must lie in (0, 1]")
    if target_ber == 1.0:
        return 0.0
    k = params.k
    _integer_shape(k)  # fail early with the domain message
    theta = _gamma_theta(params)

    lo, hi = 0.0, float(k)
    expansions = 0
    while gamma_upper_q(k, hi) > target_ber:
        hi *= 2.0
        expansions += 1
        if expansions > 100:
            raise NumericError(f"could not bracket BER={target_ber}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gamma_upper_q(k, mid) > target_ber:
            lo = mid
        else:
            hi = mid
        if lo > 0.0 and (hi - lo) <= rel_tol * lo:
            return 0.5 * (lo + hi) * theta
    raise NumericError(
        f"bisection for BER={target_ber} did not reach rel tol {rel_tol} in 200 iterations"
    )


def conduction_energy(t_sw, t_pulse: float, r_init, r_final, v_write: float):
    """Junction conduction energy of one write pulse.

    The cell conducts at the initial-state resistance until min(t_sw, t_pulse)
    and, if it switched, at the final-state resistance for the remainder:

        E = V^2 * [ min(t_sw, t_p)/R_init + max(0, t_p - t_sw)/R_final ]

    Accepts scalars or arrays (broadcast).
    """
    t_sw = np.asarray(t_sw, dtype=np.float64)
    return v_write**2 * (
        np.minimum(t_sw, t_pulse) / r_init + np.maximum(0.0, t_pulse - t_sw) / r_final
    )


def write_energy_mc(
    params: MtjDeviceParams,
    t_pulse: float,
    direction: str,
    samples: int,
    rng: np.random.Generator,
    variability_mode: str = INTRINSIC_ONLY,
) -> EnergyStats:
    """Monte Carlo per-write conduction energy for one switching direction.

    Each sample optionally perturbs R_P and TMR (relative Gaussian noise),
    draws a switching time, and conducts at the initial-state resistance
    until min(t_sw, t_pulse) and at the final-state resistance for the
    remainder when the cell switched:

        E = V^2 * [ min(t_sw, t_p)/R_init + max(0, t_p - t_sw)/R_final ]

    Returns the sample mean and std of E and the observed unswitched
    fraction. Samples are processed in fixed-size chunks merged by streaming
    mean/variance combination, so chunking does not change the result.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if variability_mode not in VARIABILITY_MODES:
        raise ValueError(f"unknown variability mode {variability_mode!r}")
    if t_pulse < 0:
        raise ValueError("pulse width must be non-negative")

    r_p_nom, _ = resistances(params)
    theta = _gamma_theta(params)

    count = 0
    mean = 0.0
    m2 = 0.0
    unswitched = 0
    remaining = samples
    while remaining > 0:
        n = min(remaining, _MC_CHUNK)
        remaining -= n
        if variability_mode == WITH_DEVICE_VARIATIONS:
            r_p = r_p_nom * (1.0 + params.sigma_rp_rel * rng.standard_normal(n))
            tmr = params.tmr * (1.0 + params.sigma_tmr_rel * rng.standard_normal(n))
            r_ap = r_p * (1.0 + tmr)
        else:
            r_p = np.full(n, r_p_nom)
            r_ap = r_p * (1.0 + params.tmr)
        t_sw = rng.gamma(params.k, theta, size=n)
        if direction == P_TO_AP:
            r_init, r_final = r_p, r_ap
        else:
            r_init, r_final = r_ap, r_p
        energy = conduction_energy(t_sw, t_pulse, r_init, r_final, params.v_write)
        unswitched += int(np.count_nonzero(t_sw > t_pulse))

        # Chan et al. parallel mean/M2 combination
        c_mean = float(energy.mean())
        c_m2 = float(((energy - c_mean) ** 2).sum())
        delta = c_mean - mean
        total = count + n
        mean += delta * n / total
        m2 += c_m2 + delta * delta * count * n / total
        count = total

    std = math.sqrt(m2 / (count - 1)) if count > 1 else 0.0
    return EnergyStats(mean, std, unswitched / samples)


def energy_ber_curve(
    params: MtjDeviceParams,
    bers: list[float],
    samples: int,
    seed: int,
    variability_mode: str = INTRINSIC_ONLY,
) -> list[ProgrammingPoint]:
    """Energy-per-bit operating points for a list of target BERs.

    For each target the pulse width is solved from the switching tail, then
    both write directions are simulated and averaged equally. Points are
    returned sorted by BER descending (energy grows as BER shrinks). Each
    (point, direction) pair owns a derived RNG stream, so the curve is
    reproducible and points could be evaluated in parallel.
    """
    if not bers:
        raise ValueError("need at least one target BER")
    for b in bers:
        if not 0.0 < b < 1.0:
            raise ValueError(f"target BERs must lie in (0, 1), got {b}")
    points: list[ProgrammingPoint] = []
    for idx, ber in enumerate(sorted(bers, reverse=True)):
        t_pulse = pulse_for_ber(params, ber)
        stats = []
        for d_idx, direction in enumerate(DIRECTIONS):
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((seed, idx, d_idx)))
            )
            stats.append(
                write_energy_mc(params, t_pulse, direction, samples, rng, variability_mode)
            )
        mean = 0.5 * (stats[0].energy_mean + stats[1].energy_mean)
        # equal-weight mixture of the two direction distributions
        second_moment = 0.5 * sum(s.energy_std**2 + s.energy_mean**2 for s in stats)
        var = max(0.0, second_moment - mean**2)
        points.append(
            ProgrammingPoint(t_pulse, ber, mean, math.sqrt(var), variability_mode)
        )
    return points


# ---------------------------------------------------------------------------
# Device config files: line-oriented key=value
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "diameter_nm",
    "ra_ohm_um2",
    "tmr",
    "vc_mv",
    "v_over_vc",
    "tau0_ns",
    "gamma_k",
    "sigma_tmr_rel",
    "sigma_rp_rel",
)

_CONFIG_DEFAULTS = {
    "diameter_nm": 32.0,
    "ra_ohm_um2": 4.0,
    "tmr": 1.5,
    "vc_mv": 190.0,
    "v_over_vc": 2.0,
    "tau0_ns": 1.0,
    "gamma_k": 16.0,
    "sigma_tmr_rel": 0.05,
    "sigma_rp_rel": 0.05,
}


def parse_device_config(text: str) -> MtjDeviceParams:
    """Parse key=value device config text; unknown or duplicate keys error.

    Keys not present fall back to the nominal 32 nm device values. Blank
    lines and '#' comments are allowed.
    """
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"device config line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_KEYS:
            raise FormatError(f"device config line {lineno}: unknown key '{key}'")
        if key in values:
            raise FormatError(f"device config line {lineno}: duplicate key '{key}'")
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise FormatError(
                f"device config line {lineno}: value for '{key}' is not a number: {val!r}"
            ) from exc
    merged = {**_CONFIG_DEFAULTS, **values}
    v_c = merged["vc_mv"] * 1e-3
    return MtjDeviceParams(
        diameter_nm=merged["diameter_nm"],
        ra_ohm_um2=merged["ra_ohm_um2"],
        tmr=merged["tmr"],
        v_c=v_c,
        tau_0=merged["tau0_ns"] * 1e-9,
        k=merged["gamma_k"],
        v_write=merged["v_over_vc"] * v_c,
        sigma_tmr_rel=merged["sigma_tmr_rel"],
        sigma_rp_rel=merged["sigma_rp_rel"],
    )


def load_device_config(path) -> MtjDeviceParams:
    return parse_device_config(Path(path).read_text())
