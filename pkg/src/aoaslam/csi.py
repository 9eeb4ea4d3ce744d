"""Synthetic CSI generation and joint AoA-ToF estimation.

The receiver reports a 30-subcarrier x 3-antenna complex channel matrix per
packet. Each propagation path contributes a phase ramp across subcarriers
(its time of flight) and a per-antenna phase offset (its bearing on the
circular array). Bearings are recovered with a subspace (noise-projection)
pseudo-spectrum over a joint (theta, tau) grid, after smoothing the CSI
along the subcarrier dimension to decorrelate coherent multipath.

Smoothing note: the 3-antenna circular array's steering law
{0, d cos(theta), d cos(theta + pi/3)} is not shift-invariant across
antennas, so sub-arrays of 2 antennas would live on different manifolds and
cannot be averaged. Smoothing therefore slides only along subcarriers:
overlapping blocks of 15 subcarriers x all 3 antennas, giving 16 snapshot
vectors of length 45 per packet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SPEED_OF_LIGHT = 299792458.0
N_SUBCARRIERS = 30
SUBCARRIER_SPACING_HZ = 625e3
SMOOTH_SUB_LEN = 15  # subcarriers per smoothing block
MAX_SIGNAL_DIM = 4  # eigengap cap on the signal subspace


class EstimationFailedError(RuntimeError):
    """The pseudo-spectrum could not be formed or yielded no peaks."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Three-antenna uniform circular array.

    Antenna 1 is the phase reference; a signal with bearing theta travels an
    extra d*cos(theta) to antenna 2 and d*cos(theta + pi/3) to antenna 3.
    """

    spacing: float
    wavelength: float

    def __post_init__(self):
        if self.spacing > self.wavelength / 2 + 1e-12:
            raise ValueError("antenna spacing must be <= lambda/2 for unambiguous bearings")

    num_antennas = 3

    def path_deltas(self, theta) -> np.ndarray:
        """Extra path length per antenna, shape (..., 3)."""
        theta = np.asarray(theta, dtype=float)
        return np.stack([
            np.zeros_like(theta),
            self.spacing * np.cos(theta),
            self.spacing * np.cos(theta + np.pi / 3),
        ], axis=-1)

    def steering(self, theta) -> np.ndarray:
        """Antenna steering vectors, shape (..., 3)."""
        return np.exp(-2j * np.pi * self.path_deltas(theta) / self.wavelength)


def geometry_for(center_freq_hz: float, spacing: float | None = None) -> ArrayGeometry:
    """Array geometry at a channel center; default spacing is lambda/2 at 5.825 GHz."""
    lam = SPEED_OF_LIGHT / center_freq_hz
    if spacing is None:
        spacing = SPEED_OF_LIGHT / 5.825e9 / 2
    return ArrayGeometry(spacing=spacing, wavelength=lam)


@dataclass(frozen=True)
class VirtualPath:
    """One transmitter-to-tag path composed with one tag-to-receiver path."""

    tof: float
    aoa: float
    attenuation: complex

    def __post_init__(self):
        if self.tof < 0:
            raise ValueError("negative time of flight")
        if abs(self.attenuation) <= 0:
            raise ValueError("attenuation must be nonzero")


@dataclass
class CsiMatrix:
    """Complex channel matrix, subcarriers x antennas."""

    h: np.ndarray
    center_freq_hz: float
    subcarrier_spacing_hz: float = SUBCARRIER_SPACING_HZ

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=complex)
        if self.h.shape != (N_SUBCARRIERS, 3):
            raise ValueError(f"CSI must be {N_SUBCARRIERS}x3, got {self.h.shape}")
        if not np.all(np.isfinite(self.h)):
            raise ValueError("non-finite CSI entries")


@dataclass(frozen=True)
class AoAEstimate:
    tag_id: int
    theta: float
    tau: float
    confidence: float
    timestamp: float


@dataclass(frozen=True)
class SearchGrid:
    """Joint (theta, tau) search grid with a local refinement pass."""

    theta_step_deg: float = 1.0
    refine_step_deg: float = 0.1
    tau_max: float = 200e-9
    tau_step: float = 2e-9
    polish: bool = True  # simplex polish of each refined peak

    def __post_init__(self):
        if self.theta_step_deg <= 0 or self.tau_step <= 0 or self.tau_max <= 0:
            raise ValueError("grid resolutions must be positive")

    @property
    def thetas(self) -> np.ndarray:
        step = math.radians(self.theta_step_deg)
        return np.arange(0.0, 2 * np.pi - step / 2, step)

    @property
    def taus(self) -> np.ndarray:
        return np.arange(0.0, self.tau_max + self.tau_step / 2, self.tau_step)


def synthesize_csi(paths: list[VirtualPath], geom: ArrayGeometry,
                   noise_std: float = 0.0,
                   rng: np.random.Generator | None = None,
                   center_freq_hz: float | None = None) -> CsiMatrix:
    """Sum per-path phase ramps over subcarriers and antennas, plus noise.

    noise_std is the standard deviation of the complex noise per entry
    (each real component gets noise_std/sqrt(2)).
    """
    if not paths:
        raise ValueError("at least one propagation path required")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if center_freq_hz is None:
        center_freq_hz = SPEED_OF_LIGHT / geom.wavelength
    n = np.arange(N_SUBCARRIERS)
    h = np.zeros((N_SUBCARRIERS, 3), dtype=complex)
    for p in paths:
        sub = np.exp(-2j * np.pi * p.tof * n * SUBCARRIER_SPACING_HZ)
        ant = geom.steering(p.aoa)
        h += p.attenuation * np.outer(sub, ant)
    if noise_std > 0:
        if rng is None:
            rng = np.random.default_rng()
        h += noise_std / math.sqrt(2) * (rng.standard_normal(h.shape)
                                         + 1j * rng.standard_normal(h.shape))
    return CsiMatrix(h=h, center_freq_hz=center_freq_hz)


def smoothed_covariance(csi: CsiMatrix) -> np.ndarray:
    """Subcarrier-smoothed snapshot covariance, 45x45.

    Snapshot s stacks subcarriers [s, s+15) of all three antennas into one
    vector (antenna-major: index = antenna*15 + subcarrier offset).
    """
    n_blocks = N_SUBCARRIERS - SMOOTH_SUB_LEN + 1
    snaps = np.empty((n_blocks, 3 * SMOOTH_SUB_LEN), dtype=complex)
    for s in range(n_blocks):
        snaps[s] = csi.h[s:s + SMOOTH_SUB_LEN, :].T.reshape(-1)
    return snaps.T @ snaps.conj() / n_blocks


def _signal_subspace(cov: np.ndarray) -> np.ndarray:
    """Signal eigenvectors of a smoothed covariance, by largest eigengap."""
    w, v = np.linalg.eigh(cov)
    w, v = w[::-1], v[:, ::-1]
    if w[0] <= 0 or not np.isfinite(w[0]):
        raise EstimationFailedError("rank-deficient smoothed covariance")
    # ratio-based eigengap so a strong path does not mask a weaker one
    floor = w[0] * 1e-12
    ratios = np.maximum(w[:MAX_SIGNAL_DIM], floor) / np.maximum(
        w[1:MAX_SIGNAL_DIM + 1], floor)
    p = int(np.argmax(ratios)) + 1
    return v[:, :p]


def _steering_parts(geom: ArrayGeometry, thetas: np.ndarray, taus: np.ndarray):
    key = (geom, thetas.tobytes(), taus.tobytes())
    cached = _STEERING_CACHE.get(key)
    if cached is None:
        a_ant = geom.steering(thetas)  # (T, 3)
        a_sub = np.exp(-2j * np.pi * np.outer(taus, np.arange(SMOOTH_SUB_LEN))
                       * SUBCARRIER_SPACING_HZ)  # (U, 15)
        cached = (a_ant.conj(), a_sub.conj())
        if thetas.size > 16:  # cache coarse grids only, not refinement grids
            _STEERING_CACHE[key] = cached
            if len(_STEERING_CACHE) > 32:
                _STEERING_CACHE.pop(next(iter(_STEERING_CACHE)))
    return cached


_STEERING_CACHE: dict = {}


def _null_power_grid(es: np.ndarray, geom: ArrayGeometry,
                     thetas: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """||a||^2 - ||Es^H a||^2 for every grid point; zero at a true path."""
    a_ant_c, a_sub_c = _steering_parts(geom, thetas, taus)
    p = es.shape[1]
    n_tau = taus.size
    es_r = es.reshape(3, SMOOTH_SUB_LEN, p)
    c = a_sub_c @ es_r.transpose(1, 0, 2).reshape(SMOOTH_SUB_LEN, 3 * p)
    c = c.reshape(n_tau, 3, p).transpose(1, 0, 2).reshape(3, n_tau * p)
    proj = a_ant_c @ c
    pr = proj.view(np.float64).reshape(thetas.size, n_tau, 2 * p)
    power = np.einsum("tuk,tuk->tu", pr, pr)
    return 3 * SMOOTH_SUB_LEN - power


def _null_power_point(es: np.ndarray, geom: ArrayGeometry,
                      theta: float, tau: float) -> float:
    a = np.kron(geom.steering(theta),
                np.exp(-2j * np.pi * tau * np.arange(SMOOTH_SUB_LEN)
                       * SUBCARRIER_SPACING_HZ))
    return float(3 * SMOOTH_SUB_LEN - np.sum(np.abs(es.conj().T @ a) ** 2))


_SUB_IDX = np.arange(SMOOTH_SUB_LEN, dtype=float)


def _refine_peak(es, geom, grid: SearchGrid, theta0: float, tau0: float,
                 polish: bool = True, fine_pass: bool = True):
    """Local fine-grid pass around a coarse peak, then a Newton polish."""
    theta, tau = theta0, tau0
    if fine_pass:
        span = math.radians(grid.theta_step_deg)
        fine = np.arange(theta0 - span, theta0 + span + 1e-12,
                         math.radians(grid.refine_step_deg))
        taus = np.array([max(tau0, 0.0)])
        null = _null_power_grid(es, geom, fine, taus)[:, 0]
        theta = float(fine[np.argmin(null)])
    if polish and grid.polish:
        p = es.shape[1]
        # (15, 3p) layout so the inner loop is two small dot products
        es_m = np.ascontiguousarray(
            es.conj().reshape(3, SMOOTH_SUB_LEN, p).transpose(1, 0, 2)
            .reshape(SMOOTH_SUB_LEN, 3 * p))
        scale = -2j * np.pi * geom.spacing / geom.wavelength

        def null_at(x):
            # x = [theta in rad, tau in ns]; NM needs comparable scales
            th = x[0]
            ant = np.exp(scale * np.array(
                [0.0, math.cos(th), math.cos(th + math.pi / 3)]))
            sub = np.exp((-2j * np.pi * x[1] * 1e-9 * SUBCARRIER_SPACING_HZ)
                         * _SUB_IDX)
            proj = ant @ (sub @ es_m).reshape(3, p)
            return 3 * SMOOTH_SUB_LEN - float((proj @ proj.conj()).real)

        # Newton steps on the locally quadratic null surface; falls back to
        # the grid value whenever the stencil is not convex.
        x = np.array([theta, tau * 1e9])
        h = np.array([math.radians(grid.refine_step_deg) / 4,
                      grid.tau_step * 1e9 / 8])
        max_step = np.array([math.radians(grid.theta_step_deg),
                             grid.tau_step * 1e9])
        for _ in range(4):
            f0 = null_at(x)
            fp = np.array([null_at(x + [h[0], 0]), null_at(x + [0, h[1]])])
            fm = np.array([null_at(x - [h[0], 0]), null_at(x - [0, h[1]])])
            gradient = (fp - fm) / (2 * h)
            hess = np.empty((2, 2))
            hess[0, 0] = (fp[0] - 2 * f0 + fm[0]) / h[0] ** 2
            hess[1, 1] = (fp[1] - 2 * f0 + fm[1]) / h[1] ** 2
            hess[0, 1] = hess[1, 0] = (
                null_at(x + h) - null_at(x + [h[0], -h[1]])
                - null_at(x + [-h[0], h[1]]) + null_at(x - h)
            ) / (4 * h[0] * h[1])
            if hess[0, 0] <= 0 or np.linalg.det(hess) <= 0:
                break
            step = np.linalg.solve(hess, -gradient)
            step = np.clip(step, -max_step, max_step)
            if null_at(x + step) >= f0:
                break
            x = x + step
            h = h / 8
            if np.all(np.abs(step) < 1e-9):
                break
        theta, tau = float(x[0]), float(x[1]) * 1e-9
    theta = theta % (2 * np.pi)
    tau = min(max(tau, 0.0), grid.tau_max)
    return theta, tau


def estimate_from_covariance(cov: np.ndarray, geom: ArrayGeometry,
                             grid: SearchGrid = SearchGrid()) -> list[tuple[float, float, float]]:
    """Top pseudo-spectrum peaks of a smoothed covariance.

    Returns (theta, tau, power) sorted by power descending; at most one peak
    per signal eigenvector.
    """
    es = _signal_subspace(cov)
    thetas, taus = grid.thetas, grid.taus
    null = _null_power_grid(es, geom, thetas, taus)
    spectrum = 1.0 / np.maximum(null, 1e-300)
    # local maxima on the grid; theta wraps, tau does not
    footprint = np.ones((3, 3), dtype=bool)
    local_max = spectrum >= ndimage.maximum_filter(
        spectrum, footprint=footprint, mode=("wrap", "nearest"))
    ti, ui = np.nonzero(local_max)
    order = np.argsort(spectrum[ti, ui])[::-1][:es.shape[1]]
    peaks = []
    for k in order:
        theta0, tau0 = float(thetas[ti[k]]), float(taus[ui[k]])
        theta, tau = _refine_peak(es, geom, grid, theta0, tau0, polish=False)
        power = 1.0 / max(_null_power_point(es, geom, theta, tau), 1e-300)
        peaks.append((theta, tau, power))
    if not peaks:
        raise EstimationFailedError("no spectrum peaks found")
    if grid.polish:
        # only the direct-path candidate needs sub-grid precision
        i = min(range(len(peaks)), key=lambda j: (peaks[j][1], -peaks[j][2]))
        theta, tau = _refine_peak(es, geom, grid, peaks[i][0], peaks[i][1],
                                  fine_pass=False)
        power = 1.0 / max(_null_power_point(es, geom, theta, tau), 1e-300)
        peaks[i] = (theta, tau, power)
    peaks.sort(key=lambda p: -p[2])
    return peaks


def estimate_aoa_tof(csi: CsiMatrix, geom: ArrayGeometry,
                     grid: SearchGrid = SearchGrid()) -> list[tuple[float, float, float]]:
    """Joint AoA-ToF peaks from one CSI matrix."""
    return estimate_from_covariance(smoothed_covariance(csi), geom, grid)


def direct_path_aoa(peaks: list[tuple[float, float, float]],
                    tag_id: int = -1, timestamp: float = 0.0) -> AoAEstimate:
    """The peak with minimum ToF is the direct path; ties go to higher power."""
    if not peaks:
        raise EstimationFailedError("empty peak list")
    theta, tau, power = min(peaks, key=lambda p: (p[1], -p[2]))
    return AoAEstimate(tag_id=tag_id, theta=theta % (2 * np.pi), tau=tau,
                       confidence=power, timestamp=timestamp)


def dump_csi_records(records: list[tuple[float, int, CsiMatrix]]) -> str:
    """Text trace: one line per (timestamp, tag_id, center_hz, 90 re/im pairs)."""
    lines = [f"# csi-trace subcarriers {N_SUBCARRIERS} antennas 3 "
             f"f_delta {SUBCARRIER_SPACING_HZ:.0f}"]
    for t, tag_id, csi in records:
        vals = csi.h.reshape(-1)
        parts = [f"{t:.9g}", str(tag_id), f"{csi.center_freq_hz:.9g}"]
        parts += [f"{x:.17g}" for v in vals for x in (v.real, v.imag)]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_csi_records(text: str) -> list[tuple[float, int, CsiMatrix]]:
    """Inverse of dump_csi_records."""
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 + 2 * N_SUBCARRIERS * 3:
            raise ValueError(f"line {lineno}: expected {3 + 180} fields, got {len(parts)}")
        t, tag_id, center = float(parts[0]), int(parts[1]), float(parts[2])
        flat = np.array([float(x) for x in parts[3:]])
        h = (flat[0::2] + 1j * flat[1::2]).reshape(N_SUBCARRIERS, 3)
        records.append((t, tag_id, CsiMatrix(h=h, center_freq_hz=center)))
    return records
