"""Frequency-shift channel planning and receiver sweep scheduling.

A tag toggles its RF switch with a square wave at rate f_b, which mirrors
the excitation carrier f_c into sidebands at f_c +/- (2n-1) f_b with
amplitudes falling off as 1/(2n-1). Each tag gets its own receive channel
so concurrent tags do not interfere; the receiver round-robins over the
assigned channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# 5 GHz non-overlapping 20 MHz channels (regulatory-free subset).
CHANNELS_5GHZ = (
    36, 40, 44, 48, 52, 56, 60, 64,
    100, 104, 108, 112, 116, 120, 124, 128, 132, 136, 140, 144,
    149, 153, 157, 161, 165,
)

CHANNEL_WIDTH_HZ = 20e6


class CapacityExceededError(ValueError):
    """Requested more tags than the channel plan can support."""

    def __init__(self, requested: int, capacity: int):
        super().__init__(
            f"cannot plan {requested} tags: at most {capacity} non-interfering "
            f"channels are available"
        )
        self.requested = requested
        self.capacity = capacity


def channel_center_hz(channel: int) -> float:
    """Center frequency of a 5 GHz WiFi channel number."""
    if channel not in CHANNELS_5GHZ:
        raise ValueError(f"not a 5 GHz 20 MHz channel: {channel}")
    return (5000 + 5 * channel) * 1e6


_BAND_LOW_HZ = channel_center_hz(CHANNELS_5GHZ[0]) - CHANNEL_WIDTH_HZ / 2
_BAND_HIGH_HZ = channel_center_hz(CHANNELS_5GHZ[-1]) + CHANNEL_WIDTH_HZ / 2

# Sideband harmonic orders checked for collisions. Orders above 2 carry
# <= 1/25 of the fundamental power and are ignored.
COLLISION_ORDERS = 2


@dataclass(frozen=True)
class SpectrumLine:
    offset_hz: float
    amplitude: float


@dataclass(frozen=True)
class SpectrumReport:
    """Sideband image offsets and relative amplitudes up to max_order."""

    shift_hz: float
    lines: tuple[SpectrumLine, ...]


@dataclass(frozen=True)
class Assignment:
    tag_id: int
    shift_hz: float
    rx_channel: int


@dataclass(frozen=True)
class ChannelPlan:
    excitation_channel: int
    assignments: tuple[Assignment, ...]
    band: tuple[int, ...] = CHANNELS_5GHZ


@dataclass
class SweepSchedule:
    """Round-robin receiver tuning over the assigned rx channels."""

    dwell_time: float
    channels: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.dwell_time <= 0:
            raise ValueError("dwell_time must be positive")


def sideband_spectrum(f_b: float, max_order: int) -> SpectrumReport:
    """Sideband images of square-wave mixing at shift f_b.

    The order-n component sits at +/-(2n-1) f_b with relative amplitude
    1/(2n-1) (order 1 normalized to 1), from the Fourier series of the
    toggling square wave.
    """
    if f_b <= 0:
        raise ValueError(f"shift frequency must be positive, got {f_b}")
    if max_order < 1:
        raise ValueError(f"max_order must be >= 1, got {max_order}")
    lines = []
    for n in range(1, max_order + 1):
        off = (2 * n - 1) * f_b
        amp = 1.0 / (2 * n - 1)
        lines.append(SpectrumLine(+off, amp))
        lines.append(SpectrumLine(-off, amp))
    lines.sort(key=lambda l: (abs(l.offset_hz), -l.offset_hz))
    return SpectrumReport(shift_hz=f_b, lines=tuple(lines))


def _image_frequencies(f_c: float, f_b: float) -> list[float]:
    """Sideband image frequencies checked for collisions (orders 1..2)."""
    return [f_c + s * (2 * n - 1) * f_b
            for n in range(1, COLLISION_ORDERS + 1) for s in (+1, -1)]


def _in_channel(freq_hz: float, channel: int) -> bool:
    return abs(freq_hz - channel_center_hz(channel)) < CHANNEL_WIDTH_HZ / 2


def _in_band(freq_hz: float) -> bool:
    return _BAND_LOW_HZ < freq_hz < _BAND_HIGH_HZ


def find_collisions(plan: ChannelPlan) -> list[tuple[int, float, int]]:
    """Exhaustively check every sideband image against every other channel.

    Returns (offending tag_id, image frequency, hit rx channel) triples;
    an empty list means the plan is interference-free. Images that land in
    the emitting tag's own channel or outside the usable band are fine.
    """
    f_c = channel_center_hz(plan.excitation_channel)
    hits = []
    for a in plan.assignments:
        for img in _image_frequencies(f_c, a.shift_hz):
            if not _in_band(img):
                continue
            for b in plan.assignments:
                if b.tag_id == a.tag_id:
                    continue
                if _in_channel(img, b.rx_channel):
                    hits.append((a.tag_id, img, b.rx_channel))
    return hits


def _greedy_assignments(excitation_channel: int,
                        limit: int | None = None) -> list[Assignment]:
    """Deterministic greedy channel assignment.

    Candidate channels are tried in order of increasing shift magnitude
    (slower tag toggling preferred) and accepted when no first- or
    third-order sideband image of any assigned tag lands inside another
    tag's channel.
    """
    f_c = channel_center_hz(excitation_channel)
    candidates = sorted(
        (ch for ch in CHANNELS_5GHZ if ch != excitation_channel),
        key=lambda ch: abs(channel_center_hz(ch) - f_c),
    )
    assignments: list[Assignment] = []
    for ch in candidates:
        if limit is not None and len(assignments) == limit:
            break
        cand = Assignment(tag_id=len(assignments),
                          shift_hz=abs(channel_center_hz(ch) - f_c),
                          rx_channel=ch)
        trial = ChannelPlan(excitation_channel, tuple(assignments + [cand]))
        if not find_collisions(trial):
            assignments.append(cand)
    return assignments


def plan_channels(num_tags: int, excitation_channel: int = 165) -> ChannelPlan:
    """Assign each tag a frequency shift and a private receive channel.

    Band-edge excitation channels (the default 165) leave one first-order
    image outside the usable band, maximizing capacity.
    """
    if num_tags < 0:
        raise ValueError("num_tags must be >= 0")
    assignments = _greedy_assignments(excitation_channel, num_tags)
    if len(assignments) < num_tags:
        raise CapacityExceededError(num_tags, plan_capacity(excitation_channel))
    return ChannelPlan(excitation_channel, tuple(assignments))


def plan_capacity(excitation_channel: int = 165) -> int:
    """Maximum tag count the greedy planner supports for this excitation."""
    return len(_greedy_assignments(excitation_channel))


def sweep_schedule(plan: ChannelPlan, dwell_time: float = 0.1) -> SweepSchedule:
    """Build the receiver's round-robin schedule from a plan."""
    return SweepSchedule(dwell_time=dwell_time,
                         channels=[a.rx_channel for a in plan.assignments])


def rx_channel_at(s: SweepSchedule, t: float) -> int:
    """Channel the receiver is tuned to at time t (piecewise constant)."""
    if not s.channels:
        raise ValueError("empty sweep schedule")
    idx = int(t / s.dwell_time) % len(s.channels)
    return s.channels[idx]


def export_plan(plan: ChannelPlan) -> str:
    """Plan as text, one 'tag_id shift_hz rx_channel' record per line."""
    lines = [f"# excitation_channel {plan.excitation_channel}"]
    for a in plan.assignments:
        lines.append(f"{a.tag_id} {a.shift_hz:.0f} {a.rx_channel}")
    return "\n".join(lines) + "\n"


def import_plan(text: str) -> ChannelPlan:
    """Inverse of export_plan."""
    excitation = None
    assignments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts[:1] == ["excitation_channel"]:
                excitation = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'tag_id shift_hz rx_channel'")
        assignments.append(Assignment(int(parts[0]), float(parts[1]), int(parts[2])))
    if excitation is None:
        raise ValueError("missing '# excitation_channel' header")
    return ChannelPlan(excitation, tuple(assignments))
