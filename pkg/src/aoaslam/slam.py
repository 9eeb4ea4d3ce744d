"""Sliding-window graph optimizer over robot and tag positions.

The window holds the most recent robot states, the odometry edges between
them, and the bearing (AoA) constraints observed from them. Both constraint
families are exactly linear in the stacked position vector, so each solve is
one weighted linear least-squares problem; an outer loop re-estimates the
robot-tag distances that scale the bearing covariances.

Gauge: the oldest state in the window is held fixed at its current estimate
(the very first state starts at the origin), anchoring the translational
freedom. Headings and velocities come from gyro/odometry propagation and are
not optimized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (RobotState, Rot, TagState, TagStatus, Vec3, cross,
                   wrap_2pi, wrap_pi)
from .csi import AoAEstimate
from .inertial import OdometryEdge, odometry_constraint


class DegenerateGeometryError(RuntimeError):
    """The stacked system is rank deficient; prior estimates are kept."""

    def __init__(self, message: str, blocks: list[str] | None = None):
        super().__init__(message if not blocks else f"{message}: {', '.join(blocks)}")
        self.blocks = blocks or []


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window sizing and reweighting knobs."""

    n: int = 10
    reweight_iters: int = 2
    initial_distance: float = 3.0
    sigma_theta: float = 0.16  # bearing noise std (rad) used in whitening
    activation_min_angle_deg: float = 5.0
    freeze_timeout: float = 10.0
    assoc_tol: float = 0.2  # half the per-tag AoA sampling period
    covariance_floor: float = 1e-12
    distance_floor: float = 0.1
    # update directions with singular values at or below this are zeroed
    # instead of solved: plain least squares would put an arbitrary, hugely
    # amplified value along exactly those directions
    min_singular_value: float = 0.05
    # weight of the soft position prior anchoring each window's oldest
    # state to its previous estimate. None derives it from the odometry
    # quality: the better the dead reckoning, the harder the window holds
    # its absolute reference against a handful of noisy bearings, while
    # noisy odometry needs bearings to win so drift gets corrected
    gauge_weight: float | None = None
    # auto gauge weight = gauge_drift_ratio / per-step odometry sigma
    gauge_drift_ratio: float = 0.04
    # floor on the standard deviation assumed for an active tag's
    # accumulated-history position prior; caps how hard history can pull
    tag_prior_sigma: float = 0.3
    # whether bearings to still-converging tags may push back on the robot
    # states (full joint solve) or only determine the tag columns
    couple_active_tags: bool = False
    # range taper for settled-tag anchor bearings correcting the robot:
    # full weight at anchor_range_full, zero beyond anchor_range_cut.
    # Long-range bearings are the noisiest (lowest tag SNR) and arrive a
    # few at a time, so letting them move the window invites meter-scale
    # jumps right when a tag re-enters range
    anchor_range_full: float = 4.0
    anchor_range_cut: float = 5.5
    # an active tag starts anchoring the robot (its bearings correct the
    # poses instead of re-estimating the tag) once a full observation pass
    # is behind it (stale for freeze_timeout) and its triangulated
    # position is pinned to at most this standard deviation
    anchor_sigma_max: float = 0.5
    # a stale tag freezes for good only once pinned this tightly
    freeze_sigma_max: float = 0.1

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("window must hold at least 3 states")
        if self.reweight_iters < 1:
            raise ValueError("reweight_iters must be >= 1")


@dataclass
class AoAConstraint:
    """One bearing observation tying a tag to a window state.

    offset is the (known, odometry-derived) world-frame displacement from
    the associated state to the point where the bearing was actually
    measured; zero when the observation coincides with the state.
    distance is the current robot-tag range estimate scaling the covariance.
    """

    tag_id: int
    state_id: int
    theta: float  # body-frame bearing
    rotation: Rot  # state rotation at observation time
    distance: float
    offset: Vec3 = field(default_factory=Vec3.zero)

    @property
    def world_dir(self) -> Vec3:
        return self.rotation.apply(Vec3(math.cos(self.theta), math.sin(self.theta), 0.0))


def residual_aoa(c: AoAConstraint, mu: Vec3, b: Vec3) -> Vec3:
    """Cross-product bearing residual; zero iff the ray and the tag
    displacement are collinear."""
    return cross(c.world_dir, b - mu - c.offset)


@dataclass
class Solution:
    """Snapshot of one solve: updated positions plus diagnostics."""

    positions: dict[int, Vec3]
    tags: dict[int, Vec3]
    aoa_cost: float
    odom_cost: float
    cost_history: list[float]
    prev_cost_history: list[float]
    covariance_diag: dict[str, np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return self.aoa_cost + self.odom_cost


def _triangulate_history(obs: list[tuple[float, float, float, float]],
                         cfg: WindowConfig) -> tuple[Vec3, np.ndarray] | None:
    """Robust bearing-only triangulation over (px, py, wx, wy) records.

    Bearing sets from real spectra carry a minority of gross outliers (a
    reflection picked instead of the direct path), so the fit alternates a
    weighted intersection with an angular-residual trim at progressively
    tighter thresholds. Returns the estimate and its 2x2 information
    matrix, or None when the geometry cannot pin both coordinates.
    """
    if len(obs) < 8:
        return None
    arr = np.asarray(obs)
    px, py, wx, wy = arr.T
    if _circular_spread(list(np.arctan2(wy, wx))) < math.radians(15.0):
        return None  # bearings too parallel to fix a crossing point
    a = np.column_stack([-wy, wx])
    r = wx * py - wy * px
    # seed by consensus: a least-squares intersection over all rows is
    # pulled into a wrong basin by the gross outliers, and the trimming
    # then keeps the wrong half. Ray-pair intersections scored by how many
    # bearings point at them (within 20 degrees) find the majority crossing
    b_est = _consensus_seed(px, py, wx, wy)
    if b_est is None:
        b_est, _, rank0, _ = np.linalg.lstsq(a, r, rcond=None)
        if rank0 < 2 or not np.all(np.isfinite(b_est)):
            return None
    # keep the weight ratio bounded: letting the range estimate collapse
    # onto a measurement point would let one row dominate the fit
    floor = max(cfg.distance_floor, 0.5)
    aw = a
    rw = r
    keep = np.ones(len(obs), dtype=bool)
    for trim in (math.radians(90.0), math.radians(30.0), math.radians(20.0)):
        ang = np.abs(wrap_pi(np.arctan2(wy, wx)
                             - np.arctan2(b_est[1] - py, b_est[0] - px)))
        kept = ang < trim
        if np.count_nonzero(kept) >= 5:
            keep = kept
        d = np.hypot(b_est[0] - px, b_est[1] - py)
        wt = keep / (np.maximum(d, floor) * cfg.sigma_theta)
        aw = a * wt[:, None]
        rw = wt * r
        sol, _, rank, _ = np.linalg.lstsq(aw, rw, rcond=None)
        if rank < 2 or not np.all(np.isfinite(sol)):
            return None
        b_est = sol
    # deflate the information by the a-posteriori variance factor: when the
    # residual scatter exceeds the nominal bearing noise (multipath, stale
    # robot poses) the fit must not claim the nominal confidence
    resid = aw @ b_est - rw
    dof = max(int(np.count_nonzero(keep)) - 2, 1)
    s2 = max(float(resid @ resid) / dof, 1.0)
    return Vec3(float(b_est[0]), float(b_est[1]), 0.0), (aw.T @ aw) / s2


def _consensus_seed(px, py, wx, wy, n_pairs: int = 256,
                    tol: float = math.radians(20.0)) -> np.ndarray | None:
    """Forward ray-pair intersection with the largest angular-inlier count.

    Deterministic (fixed-seed pair sampling) so repeated runs of the same
    data reproduce bit-identical estimates.
    """
    n = len(px)
    rng = np.random.default_rng(12345)
    i, j = rng.integers(0, n, size=(2, n_pairs))
    ok = i != j
    den = wx[i] * wy[j] - wy[i] * wx[j]
    ok &= np.abs(den) > 1e-9
    den = np.where(ok, den, 1.0)
    t1 = ((px[j] - px[i]) * wy[j] - (py[j] - py[i]) * wx[j]) / den
    t2 = ((px[j] - px[i]) * wy[i] - (py[j] - py[i]) * wx[i]) / den
    ok &= (t1 > 0) & (t2 > 0)  # crossing must be in front of both rays
    if not np.any(ok):
        return None
    cx = (px[i] + t1 * wx[i])[ok]
    cy = (py[i] + t1 * wy[i])[ok]
    ang = np.abs(wrap_pi(np.arctan2(wy, wx)[None, :]
                         - np.arctan2(cy[:, None] - py[None, :],
                                      cx[:, None] - px[None, :])))
    votes = np.sum(ang < tol, axis=1)
    best = int(np.argmax(votes))
    return np.array([cx[best], cy[best]])


def _circular_spread(angles: list[float]) -> float:
    """Largest angular extent covered by a set of bearings (radians)."""
    if len(angles) < 2:
        return 0.0
    a = np.sort(np.mod(angles, 2 * np.pi))
    gaps = np.diff(np.concatenate([a, [a[0] + 2 * np.pi]]))
    return float(2 * np.pi - np.max(gaps))


class Window:
    """Single-writer sliding window; solve snapshots are immutable values."""

    def __init__(self, cfg: WindowConfig = WindowConfig()):
        self.cfg = cfg
        self.states: list[RobotState] = []
        self.edges: dict[int, OdometryEdge] = {}  # keyed by from-state id
        self.constraints: list[AoAConstraint] = []
        self.tags: dict[int, TagState] = {}
        self.bearing_history: dict[int, list[float]] = {}
        # retired observations per tag: (px, py, wx, wy) measurement point
        # and world bearing, recorded when the observing state leaves the
        # window; a single window is too short a baseline to pin a tag, so
        # tag positions are re-triangulated from the full history
        self.obs_archive: dict[int, list[tuple[float, float, float, float]]] = {}
        # 2x2 information of each tag's last full-history triangulation
        self.tag_info: dict[int, np.ndarray] = {}
        # tags promoted to robot anchors (one full observation pass behind
        # them, position pinned); membership is permanent
        self.anchored_tags: set[int] = set()
        self.dropped_observations = 0
        self.last_solution: Solution | None = None

    # -- graph maintenance -------------------------------------------------

    def add_state(self, state: RobotState, edge: OdometryEdge | None = None) -> None:
        """Append a propagated state; drop the oldest past capacity."""
        if not self.states:
            if edge is not None:
                raise ValueError("first state takes no incoming edge")
            self.states.append(state)
            return
        if edge is None:
            raise ValueError("non-initial states require an incoming edge")
        last = self.states[-1]
        if edge.from_id != last.id or edge.to_id != state.id:
            raise ValueError(
                f"edge {edge.from_id}->{edge.to_id} does not connect "
                f"state {last.id} to state {state.id}")
        self.states.append(state)
        self.edges[last.id] = edge
        self._freeze_stale_tags(state.t)
        while len(self.states) > self.cfg.n:
            old = self.states.pop(0)
            self.edges.pop(old.id, None)
            kept = []
            for c in self.constraints:
                if c.state_id != old.id:
                    kept.append(c)
                    continue
                p = old.position + c.offset
                w = c.world_dir
                self.obs_archive.setdefault(c.tag_id, []).append(
                    (p.x, p.y, w.x, w.y))
            self.constraints = kept

    def _freeze_stale_tags(self, now: float) -> None:
        for tid, tag in self.tags.items():
            if (tag.status is not TagStatus.ACTIVE
                    or now - tag.last_observed <= self.cfg.freeze_timeout):
                continue
            if self._is_pinned(tid, self.cfg.anchor_sigma_max):
                self.anchored_tags.add(tid)
            if self._is_pinned(tid, self.cfg.freeze_sigma_max):
                self.tags[tid] = tag.advanced(TagStatus.FROZEN)

    def _is_pinned(self, tid: int, sigma_max: float) -> bool:
        """Whether a tag's history pins its position to at most sigma_max
        standard deviation along its loosest direction. Loosely-pinned
        stale tags simply stay active, refining as observations accumulate.
        """
        info = self.tag_info.get(tid)
        if info is None:
            return False
        return float(np.linalg.eigvalsh(info)[0]) >= sigma_max ** -2

    def add_aoa(self, obs: AoAEstimate, offset: Vec3 = Vec3.zero(),
                rotation: Rot | None = None) -> bool:
        """Attach a bearing to the nearest-in-time window state.

        rotation is the robot heading at the measurement instant (defaults
        to the associated state's heading). Returns False (and counts the
        drop) when no state lies within the association tolerance. Unseen
        tag ids allocate a new tag initialized one initial-distance guess
        along the bearing ray.
        """
        if not self.states:
            self.dropped_observations += 1
            return False
        state = min(self.states, key=lambda s: abs(s.t - obs.timestamp))
        if abs(state.t - obs.timestamp) > self.cfg.assoc_tol:
            self.dropped_observations += 1
            return False
        if rotation is None:
            rotation = state.rotation
        world_dir = rotation.apply(
            Vec3(math.cos(obs.theta), math.sin(obs.theta), 0.0))
        meas_point = state.position + offset
        tag = self.tags.get(obs.tag_id)
        if tag is None:
            init = meas_point + self.cfg.initial_distance * world_dir
            tag = TagState(tag_id=obs.tag_id, position=Vec3(init.x, init.y, 0.0),
                           last_observed=obs.timestamp)
            self.tags[obs.tag_id] = tag
            self.bearing_history[obs.tag_id] = []
        elif tag.status is not TagStatus.FROZEN:
            self.tags[obs.tag_id] = tag.observed_at(obs.timestamp)
            tag = self.tags[obs.tag_id]
        if tag.status is TagStatus.UNLOCALIZED:
            d = self.cfg.initial_distance
        else:
            # frozen tags keep contributing bearings: their fixed, known
            # positions anchor the robot against odometry drift
            d = max((tag.position - meas_point).norm(), self.cfg.distance_floor)
        self.constraints.append(AoAConstraint(
            tag_id=obs.tag_id, state_id=state.id, theta=obs.theta,
            rotation=rotation, distance=d, offset=offset))
        self.bearing_history[obs.tag_id].append(
            wrap_2pi(obs.theta + rotation.psi))
        return True

    def _activate_tags(self) -> None:
        thresh = math.radians(self.cfg.activation_min_angle_deg)
        for tid, tag in self.tags.items():
            if (tag.status is TagStatus.UNLOCALIZED
                    and _circular_spread(self.bearing_history[tid]) >= thresh):
                self.tags[tid] = tag.advanced(TagStatus.ACTIVE)

    # -- the least-squares solve -------------------------------------------

    def solve(self, cfg: WindowConfig | None = None) -> Solution:
        cfg = cfg or self.cfg
        if len(self.states) < 2:
            raise DegenerateGeometryError("need at least 2 robot states")
        self._activate_tags()
        in_window_ids = {s.id for s in self.states}
        candidates = [c for c in self.constraints
                      if c.state_id in in_window_ids
                      and self.tags[c.tag_id].status is not TagStatus.UNLOCALIZED]

        # Gauge: the very first state ever is pinned at the origin. Later
        # windows keep every state free and only add a weak prior on the
        # oldest one, so bearings to settled tags can pull the whole window
        # back against accumulated odometry drift.
        first_window = self.states[0].id == 0
        anchor_id = self.states[0].id if first_window else None
        free_states = self.states[1:] if first_window else self.states

        positions = {s.id: s.position for s in self.states}
        used = candidates
        # active tags whose accumulated history already pins them tightly
        # act as anchors like frozen tags do (fixed position on the right
        # side, correcting the robot); their positions still refine from
        # the full history at write-back. Loose tags get joint columns.
        anchored = {c.tag_id for c in used
                    if self.tags[c.tag_id].status is TagStatus.ACTIVE
                    and c.tag_id in self.anchored_tags}
        tag_ids = sorted({c.tag_id for c in used
                          if self.tags[c.tag_id].status is TagStatus.ACTIVE
                          and c.tag_id not in anchored})

        # unknown layout: free state positions first, then active tags, two
        # columns (x, y) each. Velocities and headings stay at their
        # propagated values; re-solving them feeds bearing noise back into
        # the dead reckoning that every later state is propagated from.
        blocks: list[tuple[str, int]] = [("state", s.id) for s in free_states]
        blocks += [("tag", t) for t in tag_ids]
        col = {b: 2 * i for i, b in enumerate(blocks)}
        ncols = 2 * len(blocks)
        tag_pos = {t: self.tags[t].position for t in tag_ids}
        col_has_tag = set(tag_ids)
        # soft absolute reference for the window, scaled to the odometry
        # quality and kept strong enough to survive the truncated-SVD cutoff
        if cfg.gauge_weight is None:
            sig2 = [np.trace(self.edges[s.id].covariance[:2, :2]) / 2
                    for s in self.states[:-1] if s.id in self.edges]
            sigma_step = math.sqrt(max(float(np.median(sig2)), 0.0)
                                   + cfg.covariance_floor) if sig2 else 1.0
            gauge_weight = min(cfg.gauge_drift_ratio / sigma_step, 1e6)
        else:
            gauge_weight = cfg.gauge_weight
        gauge_weight = max(gauge_weight, 4.0 * cfg.min_singular_value)

        def tag_position(tid: int) -> Vec3:
            return tag_pos[tid] if tid in col_has_tag else self.tags[tid].position

        def current_vector() -> np.ndarray:
            x = np.empty(ncols)
            for b, c0 in col.items():
                p = positions[b[1]] if b[0] == "state" else tag_pos[b[1]]
                x[c0:c0 + 2] = (p.x, p.y)
            return x

        # active tags with a settled history get a soft position prior so a
        # window's handful of bearings cannot yank them (and through them,
        # the robot) away from what hundreds of past observations agree on;
        # the pull is capped at tag_prior_sigma
        tag_priors: list[tuple[int, Vec3, np.ndarray]] = []
        for t in tag_ids:
            info = self.tag_info.get(t)
            if info is None:
                continue
            lam, vecs = np.linalg.eigh(info)
            lam = np.minimum(np.maximum(lam, 0.0), cfg.tag_prior_sigma ** -2)
            half = vecs @ np.diag(np.sqrt(lam)) @ vecs.T
            tag_priors.append((t, self.tags[t].position, half))

        cost_hist: list[float] = []
        prev_cost_hist: list[float] = []
        a_mat = rhs = None
        # odometry (and prior) rows come first, then bearing rows
        n_odom_rows = (2 * (len(self.states) - 1) + (0 if first_window else 2)
                       + 2 * len(tag_priors))

        for _ in range(cfg.reweight_iters):
            rows: list[np.ndarray] = []
            rhs_list: list[float] = []

            if not first_window:
                oldest_id = self.states[0].id
                prior = np.zeros((2, ncols))
                c0 = col[("state", oldest_id)]
                prior[:, c0:c0 + 2] = gauge_weight * np.eye(2)
                rows.append(prior)
                rhs_list.extend(gauge_weight * np.array(
                    [positions[oldest_id].x, positions[oldest_id].y]))

            for t, b0, half in tag_priors:
                block = np.zeros((2, ncols))
                tcol = col[("tag", t)]
                block[:, tcol:tcol + 2] = half
                rows.append(block)
                rhs_list.extend(half @ np.array([b0.x, b0.y]))

            # odometry rows (2 per edge): the preintegrated translation
            # increment ties consecutive positions, whitened by its
            # covariance; the propagated start velocity folds into the
            # right-hand side
            for k in range(len(self.states) - 1):
                sk, sk1 = self.states[k], self.states[k + 1]
                edge = self.edges[sk.id]
                terms = odometry_constraint(edge, sk)
                m = terms.rot_world_to_body[:2, :2]
                lam = terms.covariance[:2, :2] + cfg.covariance_floor * np.eye(2)
                white_p = np.linalg.cholesky(np.linalg.inv(lam)).T

                # R_k^-1 (p_{k+1} - p_k) + rhs_offset = T
                p_rows = np.zeros((2, ncols))
                rp = np.array([terms.u_hat.x - terms.rhs_offset.x,
                               terms.u_hat.y - terms.rhs_offset.y])
                if sk1.id != anchor_id:
                    c1 = col[("state", sk1.id)]
                    p_rows[:, c1:c1 + 2] = m
                else:  # pragma: no cover - anchor is always the oldest state
                    rp -= m @ np.array([positions[sk1.id].x, positions[sk1.id].y])
                if sk.id != anchor_id:
                    c0 = col[("state", sk.id)]
                    p_rows[:, c0:c0 + 2] = -m
                else:
                    rp += m @ np.array([positions[sk.id].x, positions[sk.id].y])
                rows.append(white_p @ p_rows)
                rhs_list.extend(white_p @ rp)

            # robust factors: bearings that disagree grossly with the current
            # geometry are reflections picked instead of the direct path, and
            # they get tapered out rather than pulling the whole window
            factors: list[float] = []
            for c in used:
                w = c.world_dir
                mu = positions[c.state_id] + c.offset
                v = tag_position(c.tag_id) - mu
                ang = abs(wrap_pi(math.atan2(w.y, w.x) - math.atan2(v.y, v.x)))
                if (self.tags[c.tag_id].status is TagStatus.FROZEN
                        or c.tag_id in anchored):
                    # settled anchor: cut hard on disagreement, and fade
                    # out bearings taken near the edge of the tag's range
                    soft, cut = math.radians(25.0), math.radians(45.0)
                    f_ang = max(0.0, min(1.0, (cut - ang) / (cut - soft)))
                    f_rng = max(0.0, min(1.0, (cfg.anchor_range_cut - c.distance)
                                / (cfg.anchor_range_cut - cfg.anchor_range_full)))
                    factors.append(f_ang * f_rng)
                else:  # position still converging: only reject reversals
                    soft, cut = math.radians(60.0), math.radians(90.0)
                    factors.append(max(0.0, min(1.0, (cut - ang) / (cut - soft))))

            # bearing rows (1 per constraint): w x (b - mu - offset) = 0
            for c, factor in zip(used, factors):
                w = c.world_dir
                weight = factor / (max(c.distance, cfg.distance_floor) * cfg.sigma_theta)
                if weight == 0.0:
                    continue
                row = np.zeros(ncols)
                r = w.x * c.offset.y - w.y * c.offset.x
                if c.tag_id in col_has_tag:
                    tcol = col[("tag", c.tag_id)]
                    row[tcol:tcol + 2] = (-w.y, w.x)
                else:  # frozen tag: fixed position moves to the right side
                    b = self.tags[c.tag_id].position
                    r += w.y * b.x - w.x * b.y
                if c.tag_id in col_has_tag and not cfg.couple_active_tags:
                    # a still-converging tag must not push back on the robot:
                    # letting it do so feeds its estimation error straight
                    # into the poses that all tags are triangulated from.
                    # The measurement point is held at the current state
                    # estimate and only the tag column is determined.
                    mu = positions[c.state_id]
                    r += -w.y * mu.x + w.x * mu.y
                elif c.state_id != anchor_id:
                    scol = col[("state", c.state_id)]
                    row[scol:scol + 2] = (w.y, -w.x)
                else:
                    mu = positions[c.state_id]
                    r += -w.y * mu.x + w.x * mu.y
                rows.append(weight * row.reshape(1, -1))
                rhs_list.append(weight * r)

            a_mat = np.vstack(rows)
            rhs = np.array(rhs_list)
            x_prev = current_vector()

            # Truncated-SVD update: solve for the correction relative to
            # the current estimate and zero it along directions the window
            # barely observes (a tag seen over a short arc, or the global
            # translation of a window with no settled tag in range). A
            # plain least-squares solution would put an arbitrary, hugely
            # amplified value along exactly those directions.
            u_m, s_m, vt_m = np.linalg.svd(a_mat, full_matrices=False)
            observable = s_m > cfg.min_singular_value
            if not np.any(observable):
                raise DegenerateGeometryError(
                    "no observable directions in window system")
            null_t = vt_m[~observable]
            truncated = sorted({f"{b[0]}:{b[1]}" for b, c0 in col.items()
                                if null_t.size
                                and np.max(np.abs(null_t[:, c0:c0 + 2])) > 1e-3})
            dx = vt_m[observable].T @ (
                (u_m[:, observable] .T @ (rhs - a_mat @ x_prev)) / s_m[observable])
            x = x_prev + dx

            prev_cost_hist.append(float(np.sum((a_mat @ x_prev - rhs) ** 2)))
            cost_hist.append(float(np.sum((a_mat @ x - rhs) ** 2)))

            for b, c0 in col.items():
                p = Vec3(float(x[c0]), float(x[c0 + 1]), 0.0)
                if b[0] == "state":
                    positions[b[1]] = p
                else:
                    tag_pos[b[1]] = p
            for c in used:  # re-estimate ranges for the next reweight pass
                mu = positions[c.state_id] + c.offset
                c.distance = max((tag_position(c.tag_id) - mu).norm(),
                                 cfg.distance_floor)

        # residual diagnostics at the final estimate
        resid = a_mat @ current_vector() - rhs
        odom_cost = float(np.sum(resid[:n_odom_rows] ** 2))
        aoa_cost = float(np.sum(resid[n_odom_rows:] ** 2))

        cov_diag: dict[str, np.ndarray] = {}
        normal = a_mat.T @ a_mat
        try:
            cov = np.linalg.inv(normal)
            for b, c0 in col.items():
                cov_diag[f"{b[0]}:{b[1]}"] = np.diag(cov)[c0:c0 + 2].copy()
        except np.linalg.LinAlgError:  # pragma: no cover
            pass

        # write back; tag positions come from the full observation history
        # when it is strong enough (a single 10-state window is a noisy
        # triangulation snapshot), else from the window solution
        self.states = [s if s.id == anchor_id else RobotState(
            id=s.id, t=s.t, position=positions[s.id],
            velocity=s.velocity, rotation=s.rotation)
                       for s in self.states]
        for t in sorted(set(tag_ids) | anchored):
            live = [(positions[c.state_id].x + c.offset.x,
                     positions[c.state_id].y + c.offset.y,
                     c.world_dir.x, c.world_dir.y)
                    for c in used if c.tag_id == t]
            refined = _triangulate_history(
                self.obs_archive.get(t, []) + live, cfg)
            if refined is not None:
                tag_pos[t] = refined[0]
                self.tag_info[t] = refined[1]
            if t in tag_pos:
                self.tags[t] = self.tags[t].with_position(tag_pos[t])

        warnings = [f"update truncated along {b}" for b in truncated]
        for t in tag_ids:
            pos_t = self.tags[t].position
            behind = sum(1 for c in used if c.tag_id == t and
                         c.world_dir.dot(pos_t - positions[c.state_id] - c.offset) < 0)
            total = sum(1 for c in used if c.tag_id == t)
            if total and behind > total / 2:
                warnings.append(f"tag {t} solved behind {behind}/{total} bearing rays")

        self.last_solution = Solution(
            positions=dict(positions), tags=dict(tag_pos),
            aoa_cost=aoa_cost, odom_cost=odom_cost,
            cost_history=cost_hist, prev_cost_history=prev_cost_hist,
            covariance_diag=cov_diag, warnings=warnings)
        return self.last_solution
