"""IMU simulation, preintegration, and the linear odometry constraint.

Conventions:
 - Accelerometer samples are specific force in the body frame: the gravity
   reaction [0, 0, 9.8] appears when the robot is static. Preintegration
   subtracts the (rotated) gravity before summation, so the integrated
   velocity and translation increments describe motion only. With planar
   (z-axis) rotations the body-frame gravity equals the world-frame one,
   which makes the subtraction exact.
 - The incremental rotation is integrated as a heading accumulation
   psi += omega_z * dt, the closed form of the skew-symmetric update for
   rotations about z (no per-step orthonormalization error).
 - simulate_imu is the exact inverse of the preintegration recursion:
   noiseless samples re-integrate to the discrete ground-truth trajectory
   to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GRAVITY, Rot, RobotState, Vec3


@dataclass(frozen=True)
class ImuSample:
    """One accelerometer + gyroscope reading (body frame, SI units)."""

    t: float
    accel: Vec3
    gyro: Vec3


@dataclass(frozen=True)
class OdometryEdge:
    """Preintegrated motion between two consecutive window states.

    velocity_inc (V) and translation_inc (T) are expressed in the body frame
    at the edge start; delta_rotation is the heading increment over the edge.
    covariance is the first-order noise propagation of T.
    """

    from_id: int
    to_id: int
    duration: float
    dt: float
    velocity_inc: Vec3
    translation_inc: Vec3
    delta_rotation: Rot
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    n_samples: int = 0


@dataclass
class DiscreteTrajectory:
    """Ground-truth robot motion sampled at the IMU rate.

    Arrays hold the state at ticks t[i] = t[0] + i*dt; positions advance by
    p[i] = p[i-1] + v[i]*dt, i.e. v[i] is the velocity over (t[i-1], t[i]].
    """

    dt: float
    t: np.ndarray
    pos: np.ndarray  # (N+1, 3), z = 0
    vel: np.ndarray  # (N+1, 3), world frame, z = 0
    psi: np.ndarray  # (N+1,)

    def __post_init__(self):
        n = len(self.t)
        if not (self.pos.shape == (n, 3) and self.vel.shape == (n, 3)
                and self.psi.shape == (n,)):
            raise ValueError("inconsistent trajectory array shapes")

    def arc_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.pos, axis=0), axis=1)))

    def state_at(self, i: int, state_id: int = 0) -> RobotState:
        r = Rot(float(self.psi[i]))
        vel_body = r.inverse().apply(Vec3.from_array(self.vel[i]))
        return RobotState(id=state_id, t=float(self.t[i]),
                          position=Vec3.from_array(self.pos[i]),
                          velocity=vel_body, rotation=r)

    def index_at(self, t: float) -> int:
        return int(round((t - self.t[0]) / self.dt))


def simulate_imu(traj: DiscreteTrajectory,
                 accel_noise_std: float = 0.0,
                 gyro_noise_std: float = 0.0,
                 rng: np.random.Generator | None = None) -> list[ImuSample]:
    """Emit IMU samples whose noiseless re-integration reproduces traj.

    Sample i (for i = 1..N) covers the interval (t[i-1], t[i]]: the gyro
    reads the heading change over the interval and the accelerometer the
    velocity change plus the gravity reaction, both divided by dt.
    """
    dt = traj.dt
    n = len(traj.t) - 1
    if rng is None and (accel_noise_std > 0 or gyro_noise_std > 0):
        rng = np.random.default_rng()
    d_psi = np.diff(traj.psi)
    omega_z = ((d_psi + np.pi) % (2.0 * np.pi) - np.pi) / dt
    a_world = np.diff(traj.vel, axis=0) / dt
    cos_p, sin_p = np.cos(traj.psi[1:]), np.sin(traj.psi[1:])
    a_body = np.empty_like(a_world)  # world -> body: rotate by -psi
    a_body[:, 0] = cos_p * a_world[:, 0] + sin_p * a_world[:, 1]
    a_body[:, 1] = -sin_p * a_world[:, 0] + cos_p * a_world[:, 1]
    a_body[:, 2] = a_world[:, 2]
    a_body += GRAVITY
    gyro = np.zeros_like(a_body)
    gyro[:, 2] = omega_z
    if rng is not None:
        a_body = a_body + rng.normal(0.0, accel_noise_std, a_body.shape)
        gyro = gyro + rng.normal(0.0, gyro_noise_std, gyro.shape)
    return [ImuSample(t=float(traj.t[i + 1]),
                      accel=Vec3.from_array(a_body[i]),
                      gyro=Vec3.from_array(gyro[i]))
            for i in range(n)]


def preintegrate(samples: list[ImuSample], r_k: Rot = Rot(0.0),
                 accel_noise_std: float = 0.0,
                 dt: float | None = None,
                 from_id: int = -1, to_id: int = -1) -> OdometryEdge:
    """Fold a buffered sample run into one relative-motion edge.

    Runs the discrete recursion (per sample, in the frame of the edge start):
        psi += omega_z * dt
        T   += V * dt + R(psi) a * dt^2
        V   += R(psi) a * dt
    with a the gravity-compensated acceleration. The covariance is the
    first-order propagation sum R Q R^T dt^2 with Q = diag(accel_noise^2).

    r_k (rotation of the start state) is accepted for interface symmetry;
    with planar rotations the gravity term it would rotate is frame
    invariant, so it does not enter the sums.
    """
    if not samples:
        raise ValueError("at least one sample required")
    times = [s.t for s in samples]
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("samples must be strictly time-ordered")
    if dt is None:
        if len(samples) < 2:
            raise ValueError("dt must be given for a single-sample stream")
        dt = times[1] - times[0]
        spacings = np.diff(times)
        if np.any(np.abs(spacings - dt) > 1e-9):
            raise ValueError("sample spacing must be constant per stream")

    # vectorized form of the recursion above
    gyro_z = np.array([s.gyro.z for s in samples])
    accel = np.array([[s.accel.x, s.accel.y, s.accel.z]
                      for s in samples]) - GRAVITY
    psi_t = np.cumsum(gyro_z * dt)
    cos_p, sin_p = np.cos(psi_t), np.sin(psi_t)
    a_world = np.empty_like(accel)
    a_world[:, 0] = cos_p * accel[:, 0] - sin_p * accel[:, 1]
    a_world[:, 1] = sin_p * accel[:, 0] + cos_p * accel[:, 1]
    a_world[:, 2] = accel[:, 2]
    v_after = np.cumsum(a_world * dt, axis=0)
    v_before = v_after - a_world * dt
    t_acc = np.sum(v_before * dt + a_world * dt * dt, axis=0)
    v = v_after[-1]
    psi = float(psi_t[-1])
    rots = np.zeros((len(samples), 3, 3))
    rots[:, 0, 0] = cos_p
    rots[:, 0, 1] = -sin_p
    rots[:, 1, 0] = sin_p
    rots[:, 1, 1] = cos_p
    rots[:, 2, 2] = 1.0
    q = np.eye(3) * accel_noise_std**2
    cov = np.einsum("nij,jk,nlk->il", rots, q, rots) * dt * dt
    return OdometryEdge(from_id=from_id, to_id=to_id,
                        duration=len(samples) * dt, dt=dt,
                        velocity_inc=Vec3.from_array(v),
                        translation_inc=Vec3.from_array(t_acc),
                        delta_rotation=Rot(psi),
                        covariance=cov, n_samples=len(samples))


def chain(first: OdometryEdge, second: OdometryEdge) -> OdometryEdge:
    """Compose two consecutive edges into one (exact for planar rotations)."""
    r1 = first.delta_rotation
    rm = r1.matrix()
    v = first.velocity_inc + r1.apply(second.velocity_inc)
    t = (first.translation_inc + first.velocity_inc * second.duration
         + r1.apply(second.translation_inc))
    cov = first.covariance + rm @ second.covariance @ rm.T
    return OdometryEdge(from_id=first.from_id, to_id=second.to_id,
                        duration=first.duration + second.duration,
                        dt=first.dt, velocity_inc=v, translation_inc=t,
                        delta_rotation=r1.compose(second.delta_rotation),
                        covariance=cov,
                        n_samples=first.n_samples + second.n_samples)


def propagate(state_k: RobotState, edge: OdometryEdge) -> RobotState:
    """Advance a state through an edge (gravity-compensated convention).

    Position: mu' = mu + R_k (nu * dT + T); velocity (body frame at k+1):
    nu' = dR^-1 (nu + V). Gravity was already removed in preintegration, so
    no gravity term appears here; z components stay exactly 0.
    """
    r_k = state_k.rotation
    mu = (state_k.position
          + r_k.apply(state_k.velocity * edge.duration + edge.translation_inc))
    nu = edge.delta_rotation.inverse().apply(state_k.velocity + edge.velocity_inc)
    return RobotState(id=state_k.id + 1, t=state_k.t + edge.duration,
                      position=Vec3(mu.x, mu.y, 0.0),
                      velocity=Vec3(nu.x, nu.y, 0.0),
                      rotation=r_k.compose(edge.delta_rotation))


@dataclass(frozen=True)
class OdometryTerms:
    """Pieces of the linear odometry constraint between states k and k+1.

    The measurement u_hat (= T) satisfies
        u_hat = R_world_to_body mu_{k+1} - R_world_to_body mu_k + rhs_offset
    where rhs_offset = -nu_k * dT folds the (propagated, constant) velocity
    into the right-hand side. covariance weights the residual.
    """

    u_hat: Vec3
    rot_world_to_body: np.ndarray
    rhs_offset: Vec3
    covariance: np.ndarray


def odometry_constraint(edge: OdometryEdge, state_k: RobotState) -> OdometryTerms:
    """Linear constraint terms for an edge anchored at state_k."""
    return OdometryTerms(
        u_hat=edge.translation_inc,
        rot_world_to_body=state_k.rotation.inverse().matrix(),
        rhs_offset=state_k.velocity * (-edge.duration),
        covariance=edge.covariance,
    )


def export_imu_trace(samples: list[ImuSample]) -> str:
    """One 't ax ay az wx wy wz' record per line, SI units."""
    lines = []
    for s in samples:
        lines.append(" ".join(f"{x:.17g}" for x in
                              (s.t, s.accel.x, s.accel.y, s.accel.z,
                               s.gyro.x, s.gyro.y, s.gyro.z)))
    return "\n".join(lines) + "\n"


def import_imu_trace(text: str) -> list[ImuSample]:
    """Inverse of export_imu_trace."""
    samples = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields")
        samples.append(ImuSample(t=vals[0], accel=Vec3(*vals[1:4]),
                                 gyro=Vec3(*vals[4:7])))
    return samples
