"""End-to-end scenario runner: ground truth, sensor simulation, SLAM, metrics.

The world frame is anchored at the robot's start pose (position [0,0,0],
heading along +x); room extents and tag positions are expressed in that
frame. Ground truth is the trajectory discretized at the IMU rate - IMU
samples are the exact inverse of the preintegration recursion, so the
noiseless pipeline is exact to machine precision.

Declared assumptions (the underlying experiment report leaves these open):
robot speed ~0.3 m/s, 50 packets/s while a channel is dwelt, 100 ms dwell,
one AoA estimate per dwell, one window state per full sweep cycle, and a
6 m tag communication range that produces the staggered acquisition /
loss-of-contact timeline.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import channel as chan
from . import csi as csimod
from . import inertial
from .core import (Rot, RobotState, TagState, TagStatus, Vec3, wrap_2pi,
                   wrap_pi)
from .csi import AoAEstimate, SearchGrid
from .inertial import DiscreteTrajectory, odometry_constraint
from .slam import DegenerateGeometryError, Window, WindowConfig


class MetricAlignmentError(RuntimeError):
    """Logs and ground truth cannot be matched up."""


# Per-entry CSI noise, relative to the direct-path amplitude, that makes the
# LOS median AoA error land on the reported 9.3 degrees (see the calibration
# test); scaled by noise_scale.
CSI_NOISE_CALIBRATED = 4.85

# temporal consistency filter on raw bearings: a bearing whose gyro-frame
# direction sits further than this from the median of its neighbours within
# the half-window is discarded as a spectrum outlier
OUTLIER_HALF_WINDOW = 1.7  # seconds
OUTLIER_TOL_DEG = 20.0

# robust taper on bearing rows of the whole-trajectory refinement: full
# weight below the soft angle of disagreement with the current geometry,
# zero beyond the cut. The reweighting sweeps anneal linearly from the
# wide pair down to the tight pair.
BATCH_TAPER_WIDE_SOFT_DEG = 60.0
BATCH_TAPER_WIDE_CUT_DEG = 90.0
BATCH_TAPER_SOFT_DEG = 10.0
BATCH_TAPER_CUT_DEG = 20.0


@dataclass
class Scenario:
    """Full parameterization of one simulated run; seed determines all
    randomness."""

    room_size: tuple[float, float] = (9.0, 5.0)
    room_origin: tuple[float, float] = (-1.0, -0.755)
    tag_positions: tuple[tuple[float, float], ...] = ()
    nlos_tags: tuple[int, ...] = ()
    waypoints: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 0.0))
    speed: float = 0.3
    ap_position: tuple[float, float] = (3.5, 2.0)
    excitation_channel: int = 165
    seed: int = 0
    imu_rate: float = 100.0
    packet_rate: float = 50.0
    dwell_time: float = 0.1
    max_range: float = 6.0
    # noise settings; noise_scale scales every stochastic disturbance
    csi_noise: float = CSI_NOISE_CALIBRATED
    accel_noise_std: float = 0.05
    gyro_noise_std: float = 0.005
    noise_scale: float = 1.0
    # solver settings
    window_size: int = 10
    reweight_iters: int = 2
    initial_distance: float = 3.0
    sigma_theta: float = 0.163
    # robust reweighting sweeps of the whole-trajectory refinement run over
    # the recorded stream after the live pass (0 disables the refinement)
    refine_passes: int = 6

    def __post_init__(self):
        x0, y0 = self.room_origin
        x1, y1 = x0 + self.room_size[0], y0 + self.room_size[1]
        for p in list(self.tag_positions) + list(self.waypoints):
            if not (x0 <= p[0] <= x1 and y0 <= p[1] <= y1):
                raise ValueError(f"point {p} outside room [{x0},{x1}]x[{y0},{y1}]")

    def window_config(self) -> WindowConfig:
        period = self.dwell_time * max(len(self.tag_positions), 1)
        return WindowConfig(
            n=self.window_size, reweight_iters=self.reweight_iters,
            initial_distance=self.initial_distance,
            sigma_theta=self.sigma_theta, assoc_tol=period / 2)


@dataclass
class RunReport:
    robot_mean_error: float
    robot_rmse: float
    tag_errors: dict[int, float]
    tag_mean_error_los: float
    tag_error_nlos: float
    aoa_median_error_los_deg: float
    aoa_median_error_nlos_deg: float
    trajectory_length: float
    n_solves: int
    dropped_observations: int
    solve_latency_median_ms: float = 0.0
    solve_latency_max_ms: float = 0.0


def discretize_waypoints(waypoints, speed: float, rate: float) -> DiscreteTrajectory:
    """Constant-speed polyline sampled at the IMU rate.

    Positions advance by p[i] = p[i-1] + v[i]*dt with v[i] the chord velocity
    over the tick, so the discrete trajectory is exactly reproducible by the
    discrete integrator. Heading follows the direction of motion.
    """
    wp = np.asarray(waypoints, dtype=float)
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    length = float(np.sum(seg_len))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    dt = 1.0 / rate
    n = int(round(length / speed / dt))

    def point(s: float) -> np.ndarray:
        s = min(max(s, 0.0), length)
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(i, len(seg) - 1)
        frac = (s - cum[i]) / seg_len[i]
        return wp[i] + frac * seg[i]

    t = np.arange(n + 1) * dt
    pos2 = np.array([point(i * dt * speed) for i in range(n + 1)])
    pos = np.column_stack([pos2, np.zeros(n + 1)])
    vel = np.zeros((n + 1, 3))
    vel[1:, :2] = np.diff(pos2, axis=0) / dt
    psi = np.zeros(n + 1)
    psi[1:] = np.arctan2(vel[1:, 1], vel[1:, 0])
    psi[0] = math.atan2(seg[0, 1], seg[0, 0])
    # stationary ticks (if any) keep the previous heading
    for i in range(1, n + 1):
        if vel[i, 0] == 0.0 and vel[i, 1] == 0.0:
            psi[i] = psi[i - 1]
    return DiscreteTrajectory(dt=dt, t=t, pos=pos, vel=vel, psi=psi)


def paper_scenario(seed: int = 0, noise_scale: float = 1.0,
                   window_size: int = 10) -> Scenario:
    """Canonical reproduction scenario: 9x5 m room, 41.96 m rectangular
    double loop, four tags (tag 3 NLOS), excitation channel 165."""
    rect = [(0.0, 0.0), (7.0, 0.0), (7.0, 3.49), (0.0, 3.49)]
    waypoints = tuple(rect + rect + [(0.0, 0.0)])
    # perimeter 2*(7.0+3.49) = 20.98 m, twice around = 41.96 m
    length = 2 * 2 * (7.0 + 3.49)
    return Scenario(
        tag_positions=((-0.5, 1.0), (3.5, 4.0), (7.8, 2.0), (5.0, -0.5)),
        nlos_tags=(3,),
        waypoints=waypoints,
        speed=length / 140.0,
        seed=seed,
        csi_noise=CSI_NOISE_CALIBRATED,
        noise_scale=noise_scale,
        window_size=window_size,
    )


def _bearing_body(traj: DiscreteTrajectory, i: int, tag_xy) -> float:
    dx = tag_xy[0] - traj.pos[i, 0]
    dy = tag_xy[1] - traj.pos[i, 1]
    return wrap_2pi(math.atan2(dy, dx) - traj.psi[i])


def _path_geometry(scenario: Scenario, traj: DiscreteTrajectory, i: int,
                   tag_id: int) -> tuple[float, float, float, float]:
    """(bearing, distance tag->rx, distance ap->tag, direct ToF) at tick i."""
    tag = scenario.tag_positions[tag_id]
    d_rx = math.hypot(tag[0] - traj.pos[i, 0], tag[1] - traj.pos[i, 1])
    d_ap = math.hypot(tag[0] - scenario.ap_position[0],
                      tag[1] - scenario.ap_position[1])
    theta = _bearing_body(traj, i, tag)
    tof = (d_ap + d_rx) / csimod.SPEED_OF_LIGHT
    return theta, d_rx, d_ap, tof


def run_scenario(scenario: Scenario, out_dir: str | Path | None = None) -> RunReport:
    """Execute the full pipeline in simulated time; deterministic per seed."""
    rng = np.random.default_rng(scenario.seed)
    traj = discretize_waypoints(scenario.waypoints, scenario.speed,
                                scenario.imu_rate)
    duration = float(traj.t[-1])
    dt = traj.dt

    n_tags = len(scenario.tag_positions)
    plan = chan.plan_channels(n_tags, scenario.excitation_channel)
    schedule = chan.sweep_schedule(plan, scenario.dwell_time)
    tag_of_channel = {a.rx_channel: a.tag_id for a in plan.assignments}
    geoms = {a.rx_channel: csimod.geometry_for(chan.channel_center_hz(a.rx_channel))
             for a in plan.assignments}
    grid = SearchGrid()

    samples = inertial.simulate_imu(
        traj,
        accel_noise_std=scenario.accel_noise_std * scenario.noise_scale,
        gyro_noise_std=scenario.gyro_noise_std * scenario.noise_scale,
        rng=rng)
    # gyro-integrated heading estimate per tick; used only to express raw
    # bearings in a common frame for the temporal consistency filter
    psi_est = np.concatenate([[traj.psi[0]], traj.psi[0] + np.cumsum(
        [s.gyro.z for s in samples]) * dt])

    # deterministic per-tag transmitter-side reflection (delay, complex gain)
    tx_reflections = [(float(rng.uniform(20e-9, 60e-9)),
                       0.4 * np.exp(1j * rng.uniform(0, 2 * np.pi)))
                      for _ in range(n_tags)]
    # NLOS tags reach the receiver via fixed environment scatterers: each
    # obstruction diverts energy onto geometrically stable detours, so the
    # spurious bearings point at the same wrong spots all run long instead
    # of averaging out like independent noise would
    ox, oy = scenario.room_origin
    w, h = scenario.room_size
    nlos_scatterers = {
        tid: [((float(rng.uniform(ox, ox + w)), float(rng.uniform(oy, oy + h))),
               0.5 * np.exp(1j * rng.uniform(0, 2 * np.pi)))
              for _ in range(2)]
        for tid in scenario.nlos_tags}

    window = Window(scenario.window_config())
    state0 = traj.state_at(0, state_id=0)
    window.add_state(state0)

    state_period = scenario.dwell_time * max(len(schedule.channels), 1)
    packets_per_dwell = int(round(scenario.packet_rate * scenario.dwell_time))

    aoa_records: list[dict] = []  # t, tag_id, true/est theta, los flag
    solve_records: list[dict] = []
    latencies: list[float] = []
    pending_obs: list[tuple[AoAEstimate, int]] = []  # estimate, truth tick
    # ordered (kind, ...) log of every graph operation of the live pass, so
    # refinement passes replay the identical stream without re-synthesizing
    # CSI: ("aoa", estimate, offset, rotation) / ("state", edge) / ("solve",)
    events: list[tuple] = []
    last_state_tick = 0
    next_state_t = state_period
    # every raw estimate per tag as (t, gyro-frame bearing), kept or not;
    # the consistency filter judges each bearing against this stream
    raw_bearings: dict[int, list[tuple[float, float]]] = {}

    def _is_consistent(tag_id: int, t_obs: float, world_theta: float) -> bool:
        """Temporal consistency check: true bearings follow a smooth ramp
        (a few tens of degrees per second at the closest approaches) while
        spectrum outliers (a noise peak picked over the direct path)
        scatter; a bearing far from the robust local linear prediction of
        its temporal neighbourhood is such an outlier."""
        nb = [(tn - t_obs, wrap_pi(w - world_theta))
              for (tn, w) in raw_bearings.get(tag_id, [])
              if abs(tn - t_obs) <= OUTLIER_HALF_WINDOW and tn != t_obs]
        if len(nb) < 4:
            return True  # too little context to judge
        # Theil-Sen: median pairwise slope, then median intercept at t_obs
        slopes = [wrap_pi(w2 - w1) / (t2 - t1)
                  for i, (t1, w1) in enumerate(nb)
                  for (t2, w2) in nb[i + 1:] if abs(t2 - t1) > 1e-9]
        slope = float(np.median(slopes)) if slopes else 0.0
        resid = float(np.median([w - slope * t for t, w in nb]))
        return abs(resid) <= math.radians(OUTLIER_TOL_DEG)

    def flush_observations(limit_t: float) -> None:
        """Attach buffered estimates whose nearest state now exists."""
        remaining = []
        for obs, tick in pending_obs:
            if obs.timestamp > limit_t:
                remaining.append((obs, tick))
                continue
            state = min(window.states, key=lambda s: abs(s.t - obs.timestamp))
            offset, rot_obs = _odometry_offset(state, obs.timestamp)
            window.add_aoa(obs, offset=offset, rotation=rot_obs)
            events.append(("aoa", obs, offset, rot_obs))
        pending_obs[:] = remaining

    def _odometry_offset(state: RobotState, t_obs: float) -> tuple[Vec3, Rot]:
        """World displacement from a window state to the measurement point
        plus the heading there, derived from the (noisy) IMU samples
        between the two times.

        The displacement is anchored at a state no later than the
        measurement, so only propagation-fixed quantities (velocity,
        heading) enter; the anchor's position estimate cancels out.
        """
        i_state = traj.index_at(state.t)
        i_obs = traj.index_at(t_obs)
        if i_obs == i_state:
            return Vec3.zero(), state.rotation
        if i_obs > i_state:
            edge = inertial.preintegrate(samples[i_state:i_obs], dt=dt)
            base = RobotState(id=0, t=0.0, position=Vec3.zero(),
                              velocity=state.velocity, rotation=state.rotation)
            moved = inertial.propagate(base, edge)
            return moved.position, moved.rotation
        # observation precedes the state: integrate forward from the latest
        # window state at or before the observation and difference the two
        # propagated positions
        older = [s for s in window.states if traj.index_at(s.t) <= i_obs]
        if not older:
            return Vec3.zero(), state.rotation
        prev = max(older, key=lambda s: s.t)
        i_prev = traj.index_at(prev.t)
        base = RobotState(id=0, t=0.0, position=Vec3.zero(),
                          velocity=prev.velocity, rotation=prev.rotation)
        at_obs = base if i_prev == i_obs else inertial.propagate(
            base, inertial.preintegrate(samples[i_prev:i_obs], dt=dt))
        p_state = inertial.propagate(
            base, inertial.preintegrate(samples[i_prev:i_state], dt=dt)).position
        return at_obs.position - p_state, at_obs.rotation

    n_dwells = int(math.floor(duration / scenario.dwell_time + 1e-9))
    for d in range(n_dwells):
        t0 = d * scenario.dwell_time
        rx = chan.rx_channel_at(schedule, t0 + scenario.dwell_time / 2)
        tag_id = tag_of_channel[rx]
        geom = geoms[rx]
        mid_tick = traj.index_at(t0 + scenario.dwell_time / 2)
        theta_mid, d_rx_mid, _, _ = _path_geometry(scenario, traj, mid_tick, tag_id)
        if d_rx_mid > scenario.max_range:
            # tag out of communication range: no packets this dwell
            # (still advance SLAM states below)
            obs = None
        else:
            nlos = tag_id in scenario.nlos_tags
            # One estimate per dwell from the averaged smoothed covariance
            # of the dwell's packets. The path geometry is held at the
            # dwell midpoint: the array moves ~3 cm over a dwell, which is
            # below the fidelity of the channel model, and averaging the
            # per-packet noise is what makes the signal subspace usable at
            # tag-level SNR.
            p_mid = packets_per_dwell // 2
            t_obs = t0 + (p_mid + 0.5) / scenario.packet_rate
            tick = traj.index_at(t_obs)
            theta, d_rx, d_ap, tof = _path_geometry(scenario, traj, tick, tag_id)
            amp = 1.0 / max(d_rx * d_ap, 0.25)
            # the noise floor tracks the unobstructed link budget; an
            # obstruction attenuates the direct path but not the noise,
            # which is what makes NLOS bearings worse than LOS ones
            noise_amp = amp
            if nlos:
                amp *= 0.5  # -6 dB direct-path attenuation
            delay, gain = tx_reflections[tag_id]
            paths = [csimod.VirtualPath(tof=tof, aoa=theta, attenuation=amp),
                     csimod.VirtualPath(tof=tof + delay, aoa=theta,
                                        attenuation=amp * gain)]
            if nlos and scenario.noise_scale > 0:
                tag_xy = scenario.tag_positions[tag_id]
                for (sx, sy), s_gain in nlos_scatterers[tag_id]:
                    d_ts = math.hypot(sx - tag_xy[0], sy - tag_xy[1])
                    d_sr = math.hypot(sx - traj.pos[tick, 0],
                                      sy - traj.pos[tick, 1])
                    extra = (d_ts + d_sr - d_rx) / csimod.SPEED_OF_LIGHT
                    paths.append(csimod.VirtualPath(
                        tof=tof + max(extra, 0.0),
                        aoa=_bearing_body(traj, tick, (sx, sy)),
                        attenuation=amp * s_gain * scenario.noise_scale))
            noise_std = scenario.csi_noise * scenario.noise_scale * noise_amp
            n_pkts = packets_per_dwell if noise_std > 0 else 1
            try:
                cov = np.zeros(0)
                for _ in range(n_pkts):
                    m = csimod.synthesize_csi(
                        paths, geom, noise_std=noise_std, rng=rng,
                        center_freq_hz=chan.channel_center_hz(rx))
                    c = csimod.smoothed_covariance(m)
                    cov = c if cov.size == 0 else cov + c
                cov /= n_pkts
                peaks = csimod.estimate_from_covariance(cov, geom, grid)
                est = csimod.direct_path_aoa(peaks, tag_id=tag_id, timestamp=t_obs)
                obs = est
            except csimod.EstimationFailedError:
                obs = None
            if obs is not None:
                aoa_records.append({
                    "t": t_obs, "tag_id": tag_id,
                    "true_theta": theta_mid, "est_theta": obs.theta,
                    "los": 0 if nlos else 1})
                raw_bearings.setdefault(tag_id, []).append(
                    (t_obs, obs.theta + psi_est[traj.index_at(t_obs)]))
                pending_obs.append((obs, mid_tick))

        t_end = t0 + scenario.dwell_time
        if t_end + 1e-9 >= next_state_t:
            tick = traj.index_at(next_state_t)
            edge = inertial.preintegrate(
                samples[last_state_tick:tick], dt=dt,
                accel_noise_std=scenario.accel_noise_std * scenario.noise_scale,
                from_id=window.states[-1].id, to_id=window.states[-1].id + 1)
            new_state = inertial.propagate(window.states[-1], edge)
            window.add_state(new_state, edge)
            events.append(("state", edge))
            last_state_tick = tick
            next_state_t += state_period
            flush_observations(new_state.t)
            if len(window.states) >= 2 and window.constraints:
                events.append(("solve",))
                tic = time.perf_counter()
                try:
                    sol = window.solve()
                except DegenerateGeometryError:
                    sol = None
                latencies.append((time.perf_counter() - tic) * 1e3)
                if sol is not None:
                    solve_records.append({
                        "t": new_state.t,
                        "states": {str(i): [p.x, p.y] for i, p in sol.positions.items()},
                        "state_times": {str(s.id): s.t for s in window.states},
                        "tags": {str(i): [p.x, p.y] for i, p in sol.tags.items()},
                        "aoa_cost": sol.aoa_cost, "odom_cost": sol.odom_cost})

    flush_observations(duration)

    # Offline consistency filtering: the live pass attaches every bearing
    # (holding them back for two-sided context would delay the correction
    # past the sliding window), but the refinement replays see the full
    # history, so gross spectrum outliers are dropped from the recorded
    # stream before replay.
    filtered_events = [
        ev for ev in events
        if ev[0] != "aoa" or _is_consistent(
            ev[1].tag_id, ev[1].timestamp,
            ev[1].theta + psi_est[traj.index_at(ev[1].timestamp)])]

    final_tags = {tid: (tag.position.x, tag.position.y)
                  for tid, tag in window.tags.items()}

    # refinement: one whole-trajectory robust least squares over the
    # recorded stream. Tag and trajectory accuracy are mutually limiting in
    # the causal pass - bearings triangulated from drifted poses misplace
    # the tags, and misplaced tags drag the poses - so the post-pass
    # re-estimates every state and tag jointly from the full history
    if scenario.refine_passes > 0 and solve_records:
        init_positions: dict[int, tuple[float, float]] = {}
        for rec in solve_records:
            for sid, xy in rec["states"].items():
                init_positions[int(sid)] = (xy[0], xy[1])
        refined = _batch_refine(
            filtered_events, traj.state_at(0, state_id=0),
            scenario.window_config(), init_positions, dict(final_tags),
            n_iters=scenario.refine_passes)
        if refined is not None:
            record, refined_tags = refined
            solve_records = solve_records + [record]
            final_tags.update(refined_tags)

    report = compute_metrics(solve_records, aoa_records, traj, scenario,
                             final_tags)
    report.dropped_observations = window.dropped_observations
    if latencies:
        report.solve_latency_median_ms = float(np.median(latencies))
        report.solve_latency_max_ms = float(np.max(latencies))

    if out_dir is not None:
        _write_outputs(Path(out_dir), scenario, traj, plan, solve_records,
                       aoa_records, final_tags, report)
    return report


def _batch_refine(events: list[tuple], state0: RobotState,
                  cfg: WindowConfig,
                  init_positions: dict[int, tuple[float, float]],
                  init_tags: dict[int, tuple[float, float]],
                  n_iters: int = 2
                  ) -> tuple[dict, dict[int, tuple[float, float]]] | None:
    """Whole-trajectory robust least squares over the recorded stream.

    The causal pass estimates positions in a sliding window; this post-pass
    re-solves every state and every tag jointly from the complete set of
    odometry edges and consistency-filtered bearings, initialized from the
    causal estimates. Unknowns are position and world-frame velocity per
    state plus the tag positions; modelling the velocity explicitly puts
    its accumulated random walk (the dominant dead-reckoning error) inside
    the estimate instead of mis-attributing it to independent per-edge
    noise. State 0 is held fixed as the gauge. Bearing rows are linear in
    the positions given the measured world-frame ray, so the outer loop
    only re-estimates the range weighting and the robust disagreement
    taper.
    """
    states = [state0]
    edges = []
    for ev in events:
        if ev[0] == "state":
            edges.append(ev[1])
            states.append(inertial.propagate(states[-1], ev[1]))
    bearings = [(ev[1], ev[2], ev[3]) for ev in events if ev[0] == "aoa"]
    if len(states) < 2 or not bearings:
        return None

    # nearest state by time - matches the live attachment, where each
    # observation is flushed right after the state covering it is added
    times = np.array([s.t for s in states])
    assoc = [int(np.argmin(np.abs(times - obs.timestamp)))
             for obs, _, _ in bearings]

    tag_ids = sorted({obs.tag_id for obs, _, _ in bearings})
    n_states = len(states)
    # 4 columns per free state (position x,y then velocity x,y), 2 per tag
    col = {("state", i): 4 * (i - 1) for i in range(1, n_states)}
    for j, tid in enumerate(tag_ids):
        col[("tag", tid)] = 4 * (n_states - 1) + 2 * j
    ncols = 4 * (n_states - 1) + 2 * len(tag_ids)

    pos = np.zeros((n_states, 2))
    pos[0] = (state0.position.x, state0.position.y)
    for i, s in enumerate(states[1:], start=1):
        pos[i] = init_positions.get(s.id, (s.position.x, s.position.y))
    # world-frame velocities, initialized from the gyro/IMU propagation
    vel = np.array([[s.rotation.apply(s.velocity).x,
                     s.rotation.apply(s.velocity).y] for s in states])
    tag_xy = {}
    for tid in tag_ids:
        if tid in init_tags:
            tag_xy[tid] = np.array(init_tags[tid], dtype=float)
        else:  # never localized causally: drop a point down the first ray
            obs, off, rot = next(b for b in bearings if b[0].tag_id == tid)
            w = rot.apply(Vec3(math.cos(obs.theta), math.sin(obs.theta), 0.0))
            i = assoc[next(k for k, b in enumerate(bearings)
                           if b[0].tag_id == tid)]
            tag_xy[tid] = pos[i] + np.array([off.x, off.y]) \
                + cfg.initial_distance * np.array([w.x, w.y])

    # odometry rows are constant across reweighting sweeps: per edge, a
    # position pair (mu_{k+1} - mu_k - dT V_k = R_k T) and a velocity pair
    # (V_{k+1} - V_k = R_k V_inc), both in the world frame
    odom_rows = np.zeros((4 * len(edges), ncols))
    odom_rhs = np.zeros(4 * len(edges))
    floor2 = cfg.covariance_floor * np.eye(2)
    for k, edge in enumerate(edges):
        rot = states[k].rotation.matrix()[:2, :2]
        cov_v = edge.covariance[:2, :2] + floor2
        # within-edge translation noise: the running velocity error
        # integrates once more, contributing ~ cov_v * dT^2 / 3
        cov_p = edge.covariance[:2, :2] * (edge.duration ** 2 / 3.0) + floor2
        white_p = np.linalg.cholesky(np.linalg.inv(cov_p)).T
        white_v = np.linalg.cholesky(np.linalg.inv(cov_v)).T

        rp = rot @ np.array([edge.translation_inc.x, edge.translation_inc.y])
        rv = rot @ np.array([edge.velocity_inc.x, edge.velocity_inc.y])
        r = 4 * k
        c1 = col[("state", k + 1)]
        odom_rows[r:r + 2, c1:c1 + 2] = white_p
        odom_rows[r + 2:r + 4, c1 + 2:c1 + 4] = white_v
        if k > 0:
            c0 = col[("state", k)]
            odom_rows[r:r + 2, c0:c0 + 2] = -white_p
            odom_rows[r:r + 2, c0 + 2:c0 + 4] = -edge.duration * white_p
            odom_rows[r + 2:r + 4, c0 + 2:c0 + 4] = -white_v
        else:  # state 0 is the gauge: its position and velocity fold out
            rp += pos[0] + edge.duration * vel[0]
            rv += vel[0]
        odom_rhs[r:r + 2] = white_p @ rp
        odom_rhs[r + 2:r + 4] = white_v @ rv

    # per-bearing constants: world ray and measurement-point offset
    rays = np.zeros((len(bearings), 2))
    offs = np.zeros((len(bearings), 2))
    for k, (obs, off, rot) in enumerate(bearings):
        w = rot.apply(Vec3(math.cos(obs.theta), math.sin(obs.theta), 0.0))
        rays[k] = (w.x, w.y)
        offs[k] = (off.x, off.y)

    n_iters = max(n_iters, 1)
    for sweep in range(n_iters):
        # anneal the taper: early sweeps keep wide acceptance so the causal
        # estimate can be pulled out of a drifted basin, late sweeps reject
        # aggressively once the geometry has settled
        frac = sweep / max(n_iters - 1, 1)
        soft = math.radians(BATCH_TAPER_WIDE_SOFT_DEG
                            + frac * (BATCH_TAPER_SOFT_DEG
                                      - BATCH_TAPER_WIDE_SOFT_DEG))
        cut = math.radians(BATCH_TAPER_WIDE_CUT_DEG
                           + frac * (BATCH_TAPER_CUT_DEG
                                     - BATCH_TAPER_WIDE_CUT_DEG))
        rows = [odom_rows]
        rhs = [odom_rhs]
        b_rows = np.zeros((len(bearings), ncols))
        b_rhs = np.zeros(len(bearings))
        for k, (obs, off, rot) in enumerate(bearings):
            i = assoc[k]
            wx, wy = rays[k]
            mu = pos[i] + offs[k]
            v = tag_xy[obs.tag_id] - mu
            d = max(float(np.hypot(*v)), cfg.distance_floor)
            ang = abs(wrap_pi(math.atan2(wy, wx) - math.atan2(v[1], v[0])))
            factor = max(0.0, min(1.0, (cut - ang) / (cut - soft)))
            weight = factor / (d * cfg.sigma_theta)
            if weight == 0.0:
                continue
            tcol = col[("tag", obs.tag_id)]
            b_rows[k, tcol:tcol + 2] = (-wy, wx)
            r = wx * offs[k][1] - wy * offs[k][0]
            if i > 0:
                scol = col[("state", i)]
                b_rows[k, scol:scol + 2] = (wy, -wx)
            else:
                r += -wy * pos[0][0] + wx * pos[0][1]
            b_rows[k] *= weight
            b_rhs[k] = weight * r
        rows.append(b_rows)
        rhs.append(b_rhs)

        a_mat = np.vstack(rows)
        full_rhs = np.concatenate(rhs)
        # solve for the correction to the current estimate: the min-norm
        # solution then leaves weakly observed directions where they are
        # instead of shrinking them toward zero
        x_prev = np.empty(ncols)
        for i in range(1, n_states):
            c0 = col[("state", i)]
            x_prev[c0:c0 + 2] = pos[i]
            x_prev[c0 + 2:c0 + 4] = vel[i]
        for tid in tag_ids:
            tcol = col[("tag", tid)]
            x_prev[tcol:tcol + 2] = tag_xy[tid]
        # sparse normal equations on the correction: the system is a block
        # tridiagonal odometry chain plus a few dense tag columns, and the
        # tiny Tikhonov term keeps unobserved directions (e.g. a tag whose
        # rows all tapered out this sweep) at their current values
        a_sp = scipy.sparse.csr_matrix(a_mat)
        ata = (a_sp.T @ a_sp).tocsc()
        reg = 1e-9 * float(ata.diagonal().max()) + 1e-12
        dx = scipy.sparse.linalg.spsolve(
            ata + reg * scipy.sparse.identity(ncols, format="csc"),
            a_sp.T @ (full_rhs - a_mat @ x_prev))
        x = x_prev + dx
        for i in range(1, n_states):
            c0 = col[("state", i)]
            pos[i] = x[c0:c0 + 2]
            vel[i] = x[c0 + 2:c0 + 4]
        for tid in tag_ids:
            tcol = col[("tag", tid)]
            tag_xy[tid] = x[tcol:tcol + 2]

    resid = a_mat @ x - full_rhs
    n_odom = 2 * len(edges)
    record = {
        "t": states[-1].t,
        "states": {str(s.id): [float(pos[i][0]), float(pos[i][1])]
                   for i, s in enumerate(states)},
        "state_times": {str(s.id): s.t for s in states},
        "tags": {str(t): [float(p[0]), float(p[1])]
                 for t, p in tag_xy.items()},
        "aoa_cost": float(np.sum(resid[n_odom:] ** 2)),
        "odom_cost": float(np.sum(resid[:n_odom] ** 2))}
    refined_tags = {t: (float(p[0]), float(p[1])) for t, p in tag_xy.items()}
    return record, refined_tags


def compute_metrics(solve_records: list[dict], aoa_records: list[dict],
                    traj: DiscreteTrajectory, scenario: Scenario,
                    final_tags: dict[int, tuple[float, float]]) -> RunReport:
    """Trajectory/tag/AoA error metrics from the solution and AoA logs.

    The trajectory estimate for a state is its last solved value (each solve
    record overwrites the states still in the window).
    """
    if not solve_records:
        raise MetricAlignmentError("empty solution log")
    est: dict[int, tuple[float, float, float]] = {}  # id -> (t, x, y)
    for rec in solve_records:
        for sid, (x, y) in rec["states"].items():
            t = rec["state_times"].get(sid)
            if t is None:
                raise MetricAlignmentError(f"state {sid} missing a timestamp")
            est[int(sid)] = (t, x, y)
    errors = []
    for sid, (t, x, y) in sorted(est.items()):
        i = traj.index_at(t)
        if abs(traj.t[i] - t) > traj.dt:
            raise MetricAlignmentError(f"state time {t} beyond ground-truth range")
        errors.append(math.hypot(x - traj.pos[i, 0], y - traj.pos[i, 1]))
    errors = np.array(errors)

    tag_errors = {}
    for tid, (x, y) in sorted(final_tags.items()):
        tx, ty = scenario.tag_positions[tid]
        tag_errors[tid] = float(math.hypot(x - tx, y - ty))
    los_errs = [e for tid, e in tag_errors.items() if tid not in scenario.nlos_tags]
    nlos_errs = [e for tid, e in tag_errors.items() if tid in scenario.nlos_tags]

    def median_err(recs):
        if not recs:
            return float("nan")
        errs = [abs(wrap_pi(r["est_theta"] - r["true_theta"])) for r in recs]
        return float(np.degrees(np.median(errs)))

    return RunReport(
        robot_mean_error=float(np.mean(errors)),
        robot_rmse=float(np.sqrt(np.mean(errors ** 2))),
        tag_errors=tag_errors,
        tag_mean_error_los=float(np.mean(los_errs)) if los_errs else float("nan"),
        tag_error_nlos=float(np.mean(nlos_errs)) if nlos_errs else float("nan"),
        aoa_median_error_los_deg=median_err([r for r in aoa_records if r["los"]]),
        aoa_median_error_nlos_deg=median_err([r for r in aoa_records if not r["los"]]),
        trajectory_length=traj.arc_length(),
        n_solves=len(solve_records),
        dropped_observations=0,
    )


def _write_outputs(out: Path, scenario: Scenario, traj: DiscreteTrajectory,
                   plan: chan.ChannelPlan, solve_records, aoa_records,
                   final_tags, report: RunReport) -> None:
    out.mkdir(parents=True, exist_ok=True)

    est: dict[int, tuple[float, float, float]] = {}
    for rec in solve_records:
        for sid, (x, y) in rec["states"].items():
            est[int(sid)] = (rec["state_times"][sid], x, y)
    with open(out / "trajectory.csv", "w") as f:
        f.write("t,true_x,true_y,est_x,est_y\n")
        for sid, (t, x, y) in sorted(est.items()):
            i = traj.index_at(t)
            f.write(f"{t:.6f},{traj.pos[i, 0]:.9g},{traj.pos[i, 1]:.9g},"
                    f"{x:.9g},{y:.9g}\n")

    with open(out / "tags.csv", "w") as f:
        f.write("tag_id,true_x,true_y,est_x,est_y,error\n")
        for tid, (x, y) in sorted(final_tags.items()):
            tx, ty = scenario.tag_positions[tid]
            f.write(f"{tid},{tx:.9g},{ty:.9g},{x:.9g},{y:.9g},"
                    f"{report.tag_errors[tid]:.9g}\n")

    with open(out / "aoa.csv", "w") as f:
        f.write("t,tag_id,true_theta,est_theta,los\n")
        for r in aoa_records:
            f.write(f"{r['t']:.6f},{r['tag_id']},{r['true_theta']:.9g},"
                    f"{r['est_theta']:.9g},{r['los']}\n")

    with open(out / "solutions.jsonl", "w") as f:
        for rec in solve_records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    with open(out / "channel_plan.txt", "w") as f:
        f.write(chan.export_plan(plan))

    payload = asdict(report)
    # wall-clock latency is run-dependent; keep report.json seed-deterministic
    lat = {k: payload.pop(k) for k in
           ("solve_latency_median_ms", "solve_latency_max_ms")}
    payload["scenario"] = {k: v for k, v in asdict(scenario).items()}
    payload["assumptions"] = {
        "speed_m_per_s": scenario.speed,
        "packet_rate_hz": scenario.packet_rate,
        "dwell_time_s": scenario.dwell_time,
        "max_range_m": scenario.max_range,
    }
    with open(out / "report.json", "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(out / "perf.json", "w") as f:
        json.dump(lat, f, sort_keys=True, indent=2)
        f.write("\n")


def load_scenario(path: str | Path) -> Scenario:
    """Scenario from a JSON file with Scenario field names."""
    with open(path) as f:
        data = json.load(f)
    for key in ("tag_positions", "waypoints"):
        if key in data:
            data[key] = tuple(tuple(p) for p in data[key])
    for key in ("room_size", "room_origin", "ap_position", "nlos_tags"):
        if key in data and isinstance(data[key], list):
            data[key] = tuple(data[key])
    return Scenario(**data)
