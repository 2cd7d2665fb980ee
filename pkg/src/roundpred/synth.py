"""Synthetic single-roundabout traffic generator with known ground truth.

The ring's centerline radius varies with angle, so every neighborhood of the
road is geometrically distinctive and absolute position is recoverable from a
short trajectory window.  Vehicles enter along tangent arms, circulate
counterclockwise (optionally dipping to the inner lane or looping), and leave
along tangent exits.  Speed follows a piecewise-constant-acceleration plan.

All emitted kinematic columns (velocity, heading, acceleration) are derived
from the clean positions by finite differencing, so the usual consistency
relations hold exactly.  Optional measurement noise perturbs only the
emitted x/y columns.  Generation is deterministic per (seed, recording,
vehicle) and every track carries its own golden maneuver labels computed by
closed-form geometry, independent of the polygon pipeline.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .zones import Zone, ZoneMap

TAU = 2.0 * math.pi


# ---------------------------------------------------------------------------
# world geometry


@dataclass(frozen=True)
class WorldConfig:
    ring_radius: float = 26.0
    lane_offset: float = 2.0
    band_halfwidth: float = 4.0
    arms: int = 4
    approach_length: float = 32.0
    gate_length: float = 25.0
    gate_shim: float = 1.5
    gate_halfwidth: float = 2.0
    merge_lead: float = 0.15
    exit_lead: float = 0.15
    radius_amp1: float = 0.12
    radius_phase1: float = 0.7
    radius_amp2: float = 0.08
    radius_phase2: float = 1.1
    sections: int = 8
    frame_rate: int = 25

    def __post_init__(self):
        if self.arms < 2 or self.arms > 8:
            raise ValueError(f"arms must be in [2, 8], got {self.arms}")
        if self.band_halfwidth <= self.lane_offset:
            raise ValueError("band_halfwidth must exceed lane_offset")
        if self.ring_radius * (1 - self.radius_amp1 - self.radius_amp2) <= self.band_halfwidth:
            raise ValueError("radius modulation collapses the ring")


@dataclass(frozen=True)
class Arm:
    index: int
    merge_alpha: float
    exit_alpha: float
    merge_point: np.ndarray
    exit_point: np.ndarray
    merge_tangent: np.ndarray
    exit_tangent: np.ndarray
    merge_section: int
    exit_section: int
    entry_rect: np.ndarray = field(repr=False)  # 4 corners
    exit_rect: np.ndarray = field(repr=False)


class RingWorld:
    """Analytic road geometry plus the matching polygonal zone map."""

    def __init__(self, cfg: WorldConfig = WorldConfig()):
        self.cfg = cfg
        self._section_span = TAU / cfg.sections
        self.arms = tuple(self._build_arm(k) for k in range(cfg.arms))
        self._map: ZoneMap | None = None

    # radius profile and lanes

    def radius_at(self, alpha):
        c = self.cfg
        return c.ring_radius * (
            1.0
            + c.radius_amp1 * np.cos(alpha + c.radius_phase1)
            + c.radius_amp2 * np.sin(2.0 * alpha + c.radius_phase2)
        )

    def radius_deriv(self, alpha):
        c = self.cfg
        return c.ring_radius * (
            -c.radius_amp1 * np.sin(alpha + c.radius_phase1)
            + 2.0 * c.radius_amp2 * np.cos(2.0 * alpha + c.radius_phase2)
        )

    def lane_point(self, alpha, blend: float = 0.0):
        """Point on the travel lane; blend 0 = outer lane, 1 = inner lane."""
        r = self.radius_at(alpha) + self.cfg.lane_offset * (1.0 - 2.0 * blend)
        return np.array([r * math.cos(alpha), r * math.sin(alpha)])

    def lane_tangent(self, alpha):
        r = float(self.radius_at(alpha)) + self.cfg.lane_offset
        dr = float(self.radius_deriv(alpha))
        t = np.array(
            [dr * math.cos(alpha) - r * math.sin(alpha), dr * math.sin(alpha) + r * math.cos(alpha)]
        )
        return t / np.hypot(*t)

    def section_of_angle(self, alpha) -> int:
        idx = int((alpha % TAU) / self._section_span) % self.cfg.sections
        return idx + 1

    # arms

    def _build_arm(self, k: int) -> Arm:
        c = self.cfg
        base = self._section_span / 2.0 + k * (TAU / c.arms)
        am = base + c.merge_lead
        ax = base - c.exit_lead
        mp = self.lane_point(am)
        xp = self.lane_point(ax)
        mt = self.lane_tangent(am)
        xt = self.lane_tangent(ax)

        def rect(anchor, tang, u_lo, u_hi):
            n = np.array([-tang[1], tang[0]])
            w = c.gate_halfwidth
            return np.array(
                [
                    anchor + u_hi * tang + w * n,
                    anchor + u_hi * tang - w * n,
                    anchor + u_lo * tang - w * n,
                    anchor + u_lo * tang + w * n,
                ]
            )

        return Arm(
            index=k,
            merge_alpha=am,
            exit_alpha=ax,
            merge_point=mp,
            exit_point=xp,
            merge_tangent=mt,
            exit_tangent=xt,
            merge_section=self.section_of_angle(am),
            exit_section=self.section_of_angle(ax),
            entry_rect=rect(mp, mt, -c.gate_length, c.gate_shim),
            exit_rect=rect(xp, xt, -c.gate_shim, c.gate_length),
        )

    # zone map

    def zone_map(self) -> ZoneMap:
        if self._map is not None:
            return self._map
        c = self.cfg
        zones: list[Zone] = []
        for arm in self.arms:
            zones.append(
                Zone(id=1 + arm.index, kind="entry", polygon=arm.entry_rect, feeds_section=arm.merge_section)
            )
            zones.append(
                Zone(id=21 + arm.index, kind="exit", polygon=arm.exit_rect, feeds_section=arm.exit_section)
            )
        if c.arms <= 4:
            # decorative excluded patches well away from any traffic
            for sid, ang in zip((5, 8, 11), (0.8, 2.9, 5.0)):
                cx, cy = 80.0 * math.cos(ang), 80.0 * math.sin(ang)
                zones.append(
                    Zone(
                        id=sid,
                        kind="excluded",
                        polygon=[[cx - 1, cy - 1], [cx + 1, cy - 1], [cx + 1, cy + 1], [cx - 1, cy + 1]],
                    )
                )
        sections: dict[int, tuple[int, ...]] = {}
        for s in range(1, c.sections + 1):
            lo = (s - 1) * self._section_span
            hi = s * self._section_span
            angles = np.linspace(lo, hi, 8)
            rr = self.radius_at(angles)
            outer = np.concatenate(
                [
                    np.stack([(rr + c.band_halfwidth) * np.cos(angles), (rr + c.band_halfwidth) * np.sin(angles)], 1),
                    np.stack([rr * np.cos(angles), rr * np.sin(angles)], 1)[::-1],
                ]
            )
            inner = np.concatenate(
                [
                    np.stack([rr * np.cos(angles), rr * np.sin(angles)], 1),
                    np.stack([(rr - c.band_halfwidth) * np.cos(angles), (rr - c.band_halfwidth) * np.sin(angles)], 1)[::-1],
                ]
            )
            zones.append(Zone(id=100 + s, kind="circular", polygon=outer))
            zones.append(Zone(id=110 + s, kind="circular", polygon=inner))
            sections[s] = (100 + s, 110 + s)
        isl = np.linspace(0.0, TAU, 64, endpoint=False)
        rr = self.radius_at(isl) - c.band_halfwidth
        zones.append(Zone(id=200, kind="excluded", polygon=np.stack([rr * np.cos(isl), rr * np.sin(isl)], 1)))
        for arm in self.arms:
            ang = np.linspace(arm.merge_alpha - 0.08, arm.merge_alpha + 0.08, 4)
            rr = self.radius_at(ang)
            poly = np.concatenate(
                [
                    np.stack([(rr + c.band_halfwidth) * np.cos(ang), (rr + c.band_halfwidth) * np.sin(ang)], 1),
                    np.stack([rr * np.cos(ang), rr * np.sin(ang)], 1)[::-1],
                ]
            )
            zones.append(Zone(id=301 + arm.index, kind="conflict", polygon=poly, feeds_section=arm.merge_section))
        self._map = ZoneMap(zones, sections)
        return self._map

    # analytic point classification mirroring lowest-id zone priority

    def classify_point(self, p) -> tuple | None:
        x, y = float(p[0]), float(p[1])
        for arm in self.arms:  # entry ids come first
            if self._in_rect(x, y, arm.merge_point, arm.merge_tangent, -self.cfg.gate_length, self.cfg.gate_shim):
                return ("entry", arm.index, arm.merge_section)
        for arm in self.arms:
            if self._in_rect(x, y, arm.exit_point, arm.exit_tangent, -self.cfg.gate_shim, self.cfg.gate_length):
                return ("exit", arm.index, arm.exit_section)
        r = math.hypot(x, y)
        alpha = math.atan2(y, x) % TAU
        base = float(self.radius_at(alpha))
        if abs(r - base) <= self.cfg.band_halfwidth:
            return ("circular", self.section_of_angle(alpha), self.section_of_angle(alpha))
        if r < base - self.cfg.band_halfwidth:
            return ("island", None, None)
        return None

    def _in_rect(self, x, y, anchor, tang, u_lo, u_hi) -> bool:
        dx, dy = x - anchor[0], y - anchor[1]
        u = dx * tang[0] + dy * tang[1]
        v = -dx * tang[1] + dy * tang[0]
        return u_lo <= u <= u_hi and abs(v) <= self.cfg.gate_halfwidth


# ---------------------------------------------------------------------------
# traffic generation


@dataclass(frozen=True)
class TrafficConfig:
    seed: int = 0
    duration: float = 300.0
    vehicles: int = 40
    noise: float = 0.0
    speed_min: float = 3.0
    speed_max: float = 13.0
    start_speed_min: float = 6.5
    start_speed_max: float = 11.0
    accel_min: float = 0.8
    accel_max: float = 1.6
    segment_min: float = 2.0
    segment_max: float = 4.0
    inner_lane_prob: float = 0.4
    loop_prob: float = 0.12


_CLASS_SPECS = (
    ("car", 0.66, 4.5, 1.9),
    ("van", 0.12, 5.5, 2.1),
    ("truck", 0.08, 8.5, 2.5),
    ("bicycle", 0.08, 1.8, 0.6),
    ("pedestrian", 0.06, 0.6, 0.6),
)

_TRACK_COLUMNS = (
    "recordingId",
    "trackId",
    "frame",
    "trackLifetime",
    "xCenter",
    "yCenter",
    "heading",
    "width",
    "length",
    "xVelocity",
    "yVelocity",
    "xAcceleration",
    "yAcceleration",
    "lonVelocity",
    "latVelocity",
    "lonAcceleration",
    "latAcceleration",
)


def _fd(y: np.ndarray, dt: float) -> np.ndarray:
    """Central differences with one-sided endpoints."""
    d = np.empty_like(y)
    d[1:-1] = (y[2:] - y[:-2]) / (2.0 * dt)
    d[0] = (y[1] - y[0]) / dt
    d[-1] = (y[-1] - y[-2]) / dt
    return d


def derive_columns(xy: np.ndarray, dt: float) -> dict[str, np.ndarray]:
    """Kinematic columns finite-differenced from positions (the emitted truth)."""
    if len(xy) < 3:
        raise ValueError("need at least 3 frames to derive kinematics")
    vx = _fd(xy[:, 0], dt)
    vy = _fd(xy[:, 1], dt)
    ax = _fd(vx, dt)
    ay = _fd(vy, dt)
    theta = np.arctan2(vy, vx)
    ct, st = np.cos(theta), np.sin(theta)
    return {
        "xVelocity": vx,
        "yVelocity": vy,
        "xAcceleration": ax,
        "yAcceleration": ay,
        "heading": np.degrees(theta) % 360.0,
        "lonVelocity": vx * ct + vy * st,
        "latVelocity": -vx * st + vy * ct,
        "lonAcceleration": ax * ct + ay * st,
        "latAcceleration": -ax * st + ay * ct,
    }


@dataclass
class SynthTrack:
    track_id: int
    cls: str
    width: float
    length: float
    initial_frame: int
    clean_xy: np.ndarray
    noisy_xy: np.ndarray
    columns: dict[str, np.ndarray]

    @property
    def n_frames(self) -> int:
        return len(self.clean_xy)

    @property
    def final_frame(self) -> int:
        return self.initial_frame + self.n_frames - 1


@dataclass
class SynthRecording:
    rec_id: int
    frame_rate: int
    duration: float
    tracks: list[SynthTrack]


def _build_speed_plan(rng, cfg: TrafficConfig, horizon: float):
    times = [0.0]
    speeds = [rng.uniform(cfg.start_speed_min, cfg.start_speed_max)]
    accel = rng.uniform(cfg.accel_min, cfg.accel_max)
    t, v = 0.0, speeds[0]
    while t < horizon:
        dur = rng.uniform(cfg.segment_min, cfg.segment_max)
        options = [0.0]
        if v + accel * dur <= cfg.speed_max:
            options.append(accel)
        if v - accel * dur >= cfg.speed_min:
            options.append(-accel)
        a = options[int(rng.integers(len(options)))]
        t += dur
        v += a * dur
        times.append(t)
        speeds.append(v)
    return np.array(times), np.array(speeds)


def _smoothstep(a, a0, a1):
    t = min(max((a - a0) / (a1 - a0), 0.0), 1.0)
    return 0.5 - 0.5 * math.cos(math.pi * t)


def _smoothstep_deriv(a, a0, a1):
    t = (a - a0) / (a1 - a0)
    if t <= 0.0 or t >= 1.0:
        return 0.0
    return 0.5 * math.pi * math.sin(math.pi * t) / (a1 - a0)


def _generate_vehicle(world: RingWorld, cfg: TrafficConfig, rng, max_frames: int):
    """Integrate one vehicle's path; returns clean positions or None if too short."""
    wc = world.cfg
    u = rng.random()
    cls, base_len, base_wid = _CLASS_SPECS[-1][0], _CLASS_SPECS[-1][2], _CLASS_SPECS[-1][3]
    acc_p = 0.0
    for name, prob, spec_len, spec_wid in _CLASS_SPECS:
        acc_p += prob
        if u <= acc_p:
            cls, base_len, base_wid = name, spec_len, spec_wid
            break
    length = base_len * rng.uniform(0.92, 1.08)
    width = base_wid * rng.uniform(0.92, 1.08)

    arm_in = world.arms[int(rng.integers(wc.arms))]
    arm_out = world.arms[int(rng.integers(wc.arms))]
    loops = 1 if rng.random() < cfg.loop_prob else 0
    span = (arm_out.exit_alpha - arm_in.merge_alpha) % TAU
    if span < 0.5:
        span += TAU
    span += loops * TAU
    alpha0 = arm_in.merge_alpha
    alpha1 = alpha0 + span
    use_inner = span > 2.2 and rng.random() < cfg.inner_lane_prob
    blend_in = (alpha0 + 0.5, alpha0 + 1.0)
    blend_out = (alpha1 - 1.0, alpha1 - 0.5)

    times, speeds = _build_speed_plan(rng, cfg, horizon=span * 40.0 / cfg.speed_min + 30.0)
    slopes = np.diff(speeds) / np.diff(times)

    ring_r = world.radius_at
    ring_dr = world.radius_deriv
    off = wc.lane_offset

    def blend(a):
        if not use_inner:
            return 0.0, 0.0
        w = _smoothstep(a, *blend_in) - _smoothstep(a, *blend_out)
        dw = _smoothstep_deriv(a, *blend_in) - _smoothstep_deriv(a, *blend_out)
        return w, dw

    def arc_metric(a):
        w, dw = blend(a)
        r = float(ring_r(a)) + off * (1.0 - 2.0 * w)
        dr = float(ring_dr(a)) - 2.0 * off * dw
        return r, math.hypot(r, dr)

    dt = 1.0 / wc.frame_rate
    substeps = 6
    h = dt / substeps
    mx, my = arm_in.merge_point
    mtx, mty = arm_in.merge_tangent
    xx, xy_ = arm_out.exit_point
    xtx, xty = arm_out.exit_tangent

    phase = 0  # 0 approach, 1 arc, 2 exit
    dist_to_merge = wc.approach_length
    alpha = alpha0
    exit_u = 0.0
    t = 0.0
    seg = 0
    positions = []
    done = False
    while not done and len(positions) < max_frames:
        if phase == 0:
            positions.append((mx - dist_to_merge * mtx, my - dist_to_merge * mty))
        elif phase == 1:
            r, _ = arc_metric(alpha)
            positions.append((r * math.cos(alpha), r * math.sin(alpha)))
        else:
            positions.append((xx + exit_u * xtx, xy_ + exit_u * xty))
        for _ in range(substeps):
            tm = t + 0.5 * h
            while seg < len(slopes) - 1 and tm >= times[seg + 1]:
                seg += 1
            v = speeds[seg] + slopes[seg] * (tm - times[seg])
            ds = v * h
            if phase == 0:
                dist_to_merge -= ds
                if dist_to_merge <= 0.0:
                    carry = -dist_to_merge
                    phase = 1
                    alpha = alpha0
                    if carry > 0.0:
                        _, m0 = arc_metric(alpha)
                        alpha_mid = alpha + 0.5 * carry / m0
                        _, m1 = arc_metric(alpha_mid)
                        alpha += carry / m1
            elif phase == 1:
                _, m0 = arc_metric(alpha)
                alpha_mid = alpha + 0.5 * ds / m0
                _, m1 = arc_metric(alpha_mid)
                alpha += ds / m1
                if alpha >= alpha1:
                    _, mend = arc_metric(alpha1)
                    exit_u = (alpha - alpha1) * mend
                    phase = 2
            else:
                exit_u += ds
                if exit_u > wc.approach_length:
                    done = True
                    break
            t += h
    if len(positions) < 160:
        return None
    clean = np.array(positions)
    cols = derive_columns(clean, dt)
    if cfg.noise > 0.0:
        noisy = clean + cfg.noise * rng.standard_normal(clean.shape)
    else:
        noisy = clean.copy()
    return cls, width, length, clean, noisy, cols


def generate_recording(world: RingWorld, cfg: TrafficConfig, rec_id: int) -> SynthRecording:
    total_frames = int(cfg.duration * world.cfg.frame_rate)
    schedule = np.random.default_rng([cfg.seed, rec_id, 0])
    spawn_times = np.sort(schedule.uniform(0.0, cfg.duration * 0.75, size=cfg.vehicles))
    tracks: list[SynthTrack] = []
    for idx, t0 in enumerate(spawn_times):
        rng = np.random.default_rng([cfg.seed, rec_id, 1 + idx])
        spawn_frame = int(t0 * world.cfg.frame_rate)
        out = _generate_vehicle(world, cfg, rng, max_frames=total_frames - spawn_frame)
        if out is None:
            continue
        cls, width, length, clean, noisy, cols = out
        tracks.append(
            SynthTrack(
                track_id=len(tracks),
                cls=cls,
                width=width,
                length=length,
                initial_frame=spawn_frame,
                clean_xy=clean,
                noisy_xy=noisy,
                columns=cols,
            )
        )
    return SynthRecording(rec_id=rec_id, frame_rate=world.cfg.frame_rate, duration=cfg.duration, tracks=tracks)


# ---------------------------------------------------------------------------
# golden labels


def golden_accel_class(track: SynthTrack, t_frame: int, a_threshold: float, future: int = 100) -> int:
    """1 slowing / 2 constant / 3 speeding from the clean acceleration column."""
    idx = t_frame - track.initial_frame
    window = track.columns["lonAcceleration"][idx + 1 : idx + future + 1]
    m = float(np.mean(window))
    if m < -a_threshold:
        return 1
    if m > a_threshold:
        return 3
    return 2


def golden_location_section(world: RingWorld, track: SynthTrack, t_frame: int, future: int = 100, ds: int = 4):
    """Closed-form location section for the horizon ending at t_frame + future."""
    idx = t_frame - track.initial_frame
    pts = track.clean_xy[idx + ds : idx + future + 1 : ds]
    for p in pts[::-1]:
        kind = world.classify_point(p)
        if kind is not None and kind[0] == "circular":
            return kind[1]
    kind = world.classify_point(pts[-1])
    if kind is not None and kind[0] in ("entry", "exit"):
        return kind[2]
    return None


def golden_labels(world: RingWorld, track: SynthTrack, t_frame: int, a_threshold: float = 0.5,
                  history: int = 49, future: int = 100, ds: int = 4):
    """(location_section, accel_class) or None when the window does not fit."""
    idx = t_frame - track.initial_frame
    if idx < history or idx + future > track.n_frames - 1:
        return None
    loc = golden_location_section(world, track, t_frame, future=future, ds=ds)
    if loc is None:
        return None
    return loc, golden_accel_class(track, t_frame, a_threshold, future=future)


# ---------------------------------------------------------------------------
# file output


def _fmt(x) -> str:
    return str(float(x))


def write_recording(rec: SynthRecording, outdir) -> list[str]:
    """Write {id}_tracks.csv, {id}_tracksMeta.csv, {id}_recordingMeta.csv."""
    os.makedirs(outdir, exist_ok=True)
    prefix = os.path.join(outdir, f"{rec.rec_id:02d}_")
    paths = [prefix + "tracks.csv", prefix + "tracksMeta.csv", prefix + "recordingMeta.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_TRACK_COLUMNS)
        for tr in rec.tracks:
            cols = tr.columns
            for i in range(tr.n_frames):
                w.writerow(
                    [
                        rec.rec_id,
                        tr.track_id,
                        tr.initial_frame + i,
                        i,
                        _fmt(tr.noisy_xy[i, 0]),
                        _fmt(tr.noisy_xy[i, 1]),
                        _fmt(cols["heading"][i]),
                        _fmt(tr.width),
                        _fmt(tr.length),
                        _fmt(cols["xVelocity"][i]),
                        _fmt(cols["yVelocity"][i]),
                        _fmt(cols["xAcceleration"][i]),
                        _fmt(cols["yAcceleration"][i]),
                        _fmt(cols["lonVelocity"][i]),
                        _fmt(cols["latVelocity"][i]),
                        _fmt(cols["lonAcceleration"][i]),
                        _fmt(cols["latAcceleration"][i]),
                    ]
                )
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recordingId", "trackId", "initialFrame", "finalFrame", "numFrames", "width", "length", "class"])
        for tr in rec.tracks:
            w.writerow(
                [rec.rec_id, tr.track_id, tr.initial_frame, tr.final_frame, tr.n_frames, _fmt(tr.width), _fmt(tr.length), tr.cls]
            )
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recordingId", "locationId", "frameRate", "duration", "numTracks"])
        w.writerow([rec.rec_id, 999, rec.frame_rate, _fmt(rec.duration), len(rec.tracks)])
    return paths


def write_golden_labels(world: RingWorld, recs: list[SynthRecording], path, stride: int = 25,
                        a_threshold: float = 0.5) -> int:
    """CSV of golden labels for every stride-aligned viable anchor frame."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recordingId", "trackId", "frame", "locationSection", "accelClass"])
        for rec in recs:
            for tr in rec.tracks:
                first = tr.initial_frame + 49
                last = tr.final_frame - 100
                for t in range(first, last + 1):
                    if (t - tr.initial_frame - 49) % stride != 0:
                        continue
                    lab = golden_labels(world, tr, t, a_threshold=a_threshold)
                    if lab is None:
                        continue
                    w.writerow([rec.rec_id, tr.track_id, t, lab[0], lab[1]])
                    n += 1
    return n


def generate_corpus(outdir, world: RingWorld, cfg: TrafficConfig, recordings: int,
                    golden_stride: int = 25, a_threshold: float = 0.5) -> dict:
    """Emit CSVs, the zone map, and golden labels for `recordings` recordings."""
    os.makedirs(outdir, exist_ok=True)
    recs = [generate_recording(world, cfg, rec_id) for rec_id in range(recordings)]
    files = []
    for rec in recs:
        files.extend(write_recording(rec, outdir))
    map_path = os.path.join(outdir, "zone_map.json")
    world.zone_map().save(map_path)
    golden_path = os.path.join(outdir, "golden_labels.csv")
    n_golden = write_golden_labels(world, recs, golden_path, stride=golden_stride, a_threshold=a_threshold)
    return {
        "recordings": recordings,
        "tracks": sum(len(r.tracks) for r in recs),
        "golden_rows": n_golden,
        "files": files + [map_path, golden_path],
    }
