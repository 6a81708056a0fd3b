"""Rule-based generator of labeled soccer-like clips.

Players follow a discretized mean-reverting walk around formation anchors that
shift with the ball. The ball alternates possession events (ball carried at a
fixed 0.3 m offset from the possessor) with either a pass (constant speed to
the receiver's interception point) or an uncontrolled phase (constant
friction deceleration until someone reaches it). Possessor labels use the
last-toucher convention. Each clip is mirrored along the length of the
pitch with probability 1/2, so the attacking direction of the offense team
is not a constant. Crop features are synthesized so that they are dominated
by ball visibility, mimicking appearance descriptors. Crops can go missing
per cell (``crop_dropout``) or over a contiguous run of frames per player
(``crop_occlusion``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .datamodel import DEFENSE, OFFENSE, BallState, PitchSpec, Sequence

FORWARD_BIAS = 0.7
CARRY_OFFSET = 0.3
PICKUP_RADIUS = 1.0
_VISIBILITY_SEED = 20240601


@dataclass(frozen=True)
class GenParams:
    n_players_per_team: int = 11
    n_frames: int = 60
    frame_rate_hz: float = 6.25
    pass_speed: tuple[float, float] = (8.0, 18.0)
    possession_hold: tuple[int, int] = (4, 12)
    p_uncontrolled: float = 0.15
    player_speed_limit: float = 8.0
    formation_jitter: float = 3.0
    crop_dim: int = 32
    crop_signal_gain: float = 1.0
    crop_noise_sigma: float = 0.03
    ball_visibility_radius: float = 2.0
    crop_dropout: float = 0.0
    crop_occlusion: float = 0.0
    random_attack_direction: bool = True
    pass_radius: float = 35.0
    uncontrolled_frames: tuple[int, int] = (3, 10)
    friction: float = 3.0
    burn_in: tuple[int, int] = (0, 24)
    pitch_length: float = 105.0
    pitch_width: float = 68.0
    seed: int = 0

    def __post_init__(self):
        if self.n_players_per_team < 1:
            raise ValueError("n_players_per_team must be at least 1")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        for name in ("p_uncontrolled", "crop_dropout", "crop_occlusion"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        for name in ("frame_rate_hz", "player_speed_limit", "ball_visibility_radius", "friction",
                     "pass_radius", "pitch_length", "pitch_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.crop_dim < 1:
            raise ValueError("crop_dim must be positive")
        if self.formation_jitter < 0 or self.crop_noise_sigma < 0 or self.crop_signal_gain < 0:
            raise ValueError("jitter, noise and gain must be nonnegative")
        for name in ("pass_speed", "possession_hold", "uncontrolled_frames", "burn_in"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an ordered nonnegative range")
        if self.pass_speed[0] <= 0 or self.possession_hold[0] < 1 or self.uncontrolled_frames[0] < 1:
            raise ValueError("pass speed, hold and uncontrolled ranges must be strictly positive")

    @property
    def pitch(self) -> PitchSpec:
        return PitchSpec(self.pitch_length, self.pitch_width)

    @property
    def n_players(self) -> int:
        return 2 * self.n_players_per_team

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenParams keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def visibility_direction(d_c: int) -> np.ndarray:
    """Fixed nonnegative unit vector along which ball visibility shows up."""
    u = np.random.default_rng(_VISIBILITY_SEED).random(d_c) + 0.5
    return u / np.linalg.norm(u)


def formation(n: int, pitch: PitchSpec) -> np.ndarray:
    """Anchors for one team defending the -x goal. Index 0 is the goalkeeper."""
    L, W = pitch.length, pitch.width
    anchors = [(-0.44 * L, 0.0)]
    rest = n - 1
    if rest > 0:
        n_lines = max(1, round(math.sqrt(rest)))
        per_line = [rest // n_lines + (1 if i < rest % n_lines else 0) for i in range(n_lines)]
        xs = np.linspace(-0.3 * L, -0.02 * L, n_lines) if n_lines > 1 else [-0.15 * L]
        for x, k in zip(xs, per_line):
            for y in np.linspace(-0.35 * W, 0.35 * W, k) if k > 1 else [0.0]:
                anchors.append((x, y))
    return np.array(anchors)


def _unit(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 1e-9 else fallback


class _Sim:
    def __init__(self, params: GenParams, rng: np.random.Generator):
        self.p = params
        self.rng = rng
        self.dt = 1.0 / params.frame_rate_hz
        pitch = params.pitch
        self.bound = pitch.half_extent + 2.0
        self.ball_bound = pitch.half_extent + 3.0
        n = params.n_players_per_team
        base = formation(n, pitch)
        home = base + rng.normal(0.0, params.formation_jitter, base.shape)
        away = base * np.array([-1.0, 1.0]) + rng.normal(0.0, params.formation_jitter, base.shape)
        self.anchors = np.concatenate([home, away])
        self.team = np.repeat([0, 1], n)
        self.attack_dir = np.where(self.team == 0, 1.0, -1.0)
        self.pos = np.clip(self.anchors + rng.normal(0.0, 2.0, self.anchors.shape), -self.bound, self.bound)
        self.vel = np.zeros_like(self.pos)
        # kick-off from a random outfield player of the offense team
        first = rng.integers(1, n) if n > 1 else 0
        self.toucher = int(first)
        self.offset_dir = np.array([1.0, 0.0])
        self.ball = self.pos[first] + CARRY_OFFSET * self.offset_dir
        self.event = "possession"
        self._start_possession(first)
        self.passes = 0
        self.uncontrolled = 0

    # event bookkeeping -------------------------------------------------
    def _start_possession(self, who: int) -> None:
        self.event = "possession"
        self.toucher = who
        lo, hi = self.p.possession_hold
        self.remaining = int(self.rng.integers(lo, hi + 1))
        self.dribble = np.array([self.attack_dir[who] * self.rng.uniform(1.5, 4.5), self.rng.normal(0.0, 1.5)])

    def _start_next_event(self) -> None:
        if self.rng.random() < self.p.p_uncontrolled:
            self._start_uncontrolled()
        else:
            self._start_pass()

    def _start_pass(self) -> None:
        sender = self.toucher
        mates = np.flatnonzero((self.team == self.team[sender]) & (np.arange(len(self.team)) != sender))
        if mates.size == 0:
            self._start_uncontrolled()
            return
        dist = np.linalg.norm(self.pos[mates] - self.pos[sender], axis=1)
        near = mates[dist <= self.p.pass_radius]
        cand = near if near.size else mates[[np.argmin(dist)]]
        forward = (self.pos[cand, 0] - self.pos[sender, 0]) * self.attack_dir[sender] > 0
        w = (1.0 - FORWARD_BIAS) + FORWARD_BIAS * forward
        recv = int(self.rng.choice(cand, p=w / w.sum()))

        speed = self.rng.uniform(*self.p.pass_speed)
        lead = self.vel[recv] * float(np.linalg.norm(self.pos[recv] - self.ball)) / speed
        target = np.clip(self.pos[recv] + lead, -self.bound + 1.0, self.bound - 1.0)
        k = max(2, int(round(np.linalg.norm(target - self.ball) / (speed * self.dt))))
        reach = 0.8 * self.p.player_speed_limit * k * self.dt
        step = target - self.pos[recv]
        if np.linalg.norm(step) > reach:
            target = self.pos[recv] + step * (reach / np.linalg.norm(step))
        self.event = "pass"
        self.receiver = recv
        self.pass_from = self.ball.copy()
        self.pass_to = target
        self.recv_from = self.pos[recv].copy()
        self.pass_frames = k
        self.pass_j = 0
        self.passes += 1

    def _start_uncontrolled(self) -> None:
        theta = self.rng.uniform(0.0, 2.0 * math.pi)
        direction = np.array([math.cos(theta), math.sin(theta)])
        v0 = self.rng.uniform(4.0, 10.0)
        # stopping distance must keep the ball inside the pitch margin
        with np.errstate(divide="ignore"):
            room = np.where(direction > 0, (self.ball_bound - self.ball) / direction,
                            np.where(direction < 0, (-self.ball_bound - self.ball) / direction, np.inf))
        d_max = max(0.0, float(room.min()) - 0.5)
        v0 = min(v0, math.sqrt(2.0 * self.p.friction * d_max))
        self.event = "uncontrolled"
        self.ball_vel = direction * v0
        self.unc_j = 0
        lo, hi = self.p.uncontrolled_frames
        self.unc_min = int(self.rng.integers(lo, hi + 1))
        self.unc_max = self.unc_min + 6
        self.uncontrolled += 1

    # per-frame dynamics ------------------------------------------------
    def _move_players(self) -> None:
        p = self.p
        has_ball_team = self.team[self.toucher]
        shift = np.array([0.45, 0.35]) * self.ball
        push = np.where(self.team == has_ball_team, 6.0, -4.0)[:, None] * np.array([1.0, 0.0]) * self.attack_dir[:, None]
        target = self.anchors + shift + push
        target[:, 0] = np.where(np.arange(len(target)) % p.n_players_per_team == 0,
                                self.anchors[:, 0] + 0.1 * shift[0], target[:, 0])
        # the nearest outfield player of the team without the ball presses it
        opp = np.flatnonzero((self.team != has_ball_team) & (np.arange(len(self.team)) % p.n_players_per_team != 0))
        chasers = []
        if opp.size:
            chasers.append(int(opp[np.argmin(np.linalg.norm(self.pos[opp] - self.ball, axis=1))]))
        if self.event == "uncontrolled":
            own = np.flatnonzero((self.team == has_ball_team) & (np.arange(len(self.team)) != self.toucher))
            if own.size:
                chasers.append(int(own[np.argmin(np.linalg.norm(self.pos[own] - self.ball, axis=1))]))
        v_des = 0.8 * (target - self.pos)
        for c in chasers:
            v_des[c] = 3.0 * (self.ball - self.pos[c])
        if self.event == "possession":
            v_des[self.toucher] = self.dribble + 0.1 * (target[self.toucher] - self.pos[self.toucher])
        speed = np.linalg.norm(v_des, axis=1, keepdims=True)
        cap = 0.9 * p.player_speed_limit
        v_des = np.where(speed > cap, v_des * cap / np.maximum(speed, 1e-12), v_des)
        vel = 0.6 * self.vel + 0.4 * v_des + self.rng.normal(0.0, 0.4, self.vel.shape)
        speed = np.linalg.norm(vel, axis=1, keepdims=True)
        vel = np.where(speed > p.player_speed_limit, vel * p.player_speed_limit / np.maximum(speed, 1e-12), vel)
        new = np.clip(self.pos + vel * self.dt, -self.bound, self.bound)
        if self.event == "pass":
            frac = (self.pass_j + 1) / self.pass_frames
            new[self.receiver] = self.recv_from + (self.pass_to - self.recv_from) * frac
        self.vel = (new - self.pos) / self.dt
        self.pos = new

    def step(self) -> tuple[int, int]:
        """Advance one frame; returns (state, possessor) labels for it."""
        self._move_players()
        if self.event == "possession":
            who = self.toucher
            self.offset_dir = _unit(self.vel[who], self.offset_dir)
            self.ball = self.pos[who] + CARRY_OFFSET * self.offset_dir
            label = (BallState.POSSESSION, who)
            self.remaining -= 1
            if self.remaining <= 0:
                self._start_next_event()
            return label
        if self.event == "pass":
            self.pass_j += 1
            self.ball = self.pass_from + (self.pass_to - self.pass_from) * (self.pass_j / self.pass_frames)
            if self.pass_j >= self.pass_frames:
                # reception frame: ball sits on the receiver
                recv = self.receiver
                self.pos[recv] = self.pass_to
                self.ball = self.pass_to.copy()
                self._start_possession(recv)
                self.remaining -= 1
                return BallState.POSSESSION, recv
            return BallState.PASS, self.toucher
        # uncontrolled
        self.unc_j += 1
        speed = np.linalg.norm(self.ball_vel)
        if speed > 0:
            new_speed = max(0.0, speed - self.p.friction * self.dt)
            self.ball = self.ball + self.ball_vel * self.dt * (speed + new_speed) / (2.0 * speed)
            self.ball_vel = self.ball_vel * (new_speed / speed)
        self.ball = np.clip(self.ball, -self.ball_bound, self.ball_bound)
        label = (BallState.UNCONTROLLED, self.toucher)
        d = np.linalg.norm(self.pos - self.ball, axis=1)
        if self.unc_j >= self.unc_max or (self.unc_j >= self.unc_min and d.min() <= PICKUP_RADIUS):
            # next frame starts in possession of whoever is closest
            who = int(np.argmin(d))
            self._start_possession(who)
        return label


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_sequence(params: GenParams, rng: np.random.Generator, seq_id: int = 0) -> Sequence:
    """Simulate one clip. Labels and ball kinematics are consistent by construction."""
    sim = _Sim(params, rng)
    for _ in range(int(rng.integers(params.burn_in[0], params.burn_in[1] + 1))):
        sim.step()
    T, N = params.n_frames, params.n_players
    positions = np.empty((T, N, 2))
    ball = np.empty((T, 2))
    states = np.empty(T, dtype=np.int64)
    possessor = np.empty(T, dtype=np.int64)
    for t in range(T):
        s, who = sim.step()
        positions[t] = sim.pos
        ball[t] = sim.ball
        states[t] = s
        possessor[t] = who
    types = np.where(sim.team[:, None] == 0, OFFENSE, DEFENSE)
    seq = Sequence(
        positions=_quantize(positions),
        player_types=types,
        crop_features=np.zeros((T, N, params.crop_dim)),
        crop_present=np.zeros((T, N), bool),
        agent_valid=np.ones(N, bool),
        ball_positions=_quantize(ball),
        ball_states=states,
        possessor=possessor,
        frame_rate_hz=params.frame_rate_hz,
        seq_id=seq_id,
        pitch=params.pitch,
    )
    feats, present = simulate_crop_features(seq, params, rng)
    seq = seq.replace(crop_features=feats, crop_present=present)
    # drawn last so the mirror leaves every other draw of the clip unchanged
    if params.random_attack_direction and rng.random() < 0.5:
        flip = np.array([-1.0, 1.0])
        seq = seq.replace(positions=seq.positions * flip, ball_positions=seq.ball_positions * flip)
    return seq


def identity_base(rng: np.random.Generator, n_agents: int, d_c: int) -> np.ndarray:
    """Per-player appearance vectors; the first draw of :func:`simulate_crop_features`."""
    return rng.uniform(0.15, 0.45, (n_agents, d_c))


def simulate_crop_features(seq: Sequence, params: GenParams, rng: np.random.Generator):
    """Synthetic appearance descriptors dominated by ball visibility.

    Returns ``(features (T, N, d_c), present (T, N))``. Features are
    ``clip(base_n + gain * exp(-|ball_t - pos_tn|^2 / sigma^2) * u + noise, 0, 1)``
    with a per-player identity vector ``base_n`` and a fixed unit direction ``u``.
    """
    T, N, d_c = seq.n_frames, seq.n_agents, params.crop_dim
    base = identity_base(rng, N, d_c)
    noise = rng.normal(0.0, 1.0, (T, N, d_c)) * params.crop_noise_sigma
    dropped = rng.random((T, N)) < params.crop_dropout
    u = visibility_direction(d_c)
    d2 = np.sum((seq.ball_positions[:, None, :] - seq.positions) ** 2, axis=-1)
    vis = np.exp(-d2 / params.ball_visibility_radius ** 2)
    feats = np.clip(base[None] + params.crop_signal_gain * vis[..., None] * u + noise, 0.0, 1.0)
    present = seq.agent_valid[None, :] & ~dropped
    if params.crop_occlusion > 0:
        # out of view or hidden behind others: one contiguous gap of T/4 to T frames
        hit = rng.random(N) < params.crop_occlusion
        length = rng.integers(max(1, T // 4), T + 1, N)
        start = rng.integers(0, T - length + 1)
        t = np.arange(T)[:, None]
        present &= ~(hit & (t >= start) & (t < start + length))
    feats = np.where(present[..., None], _quantize(feats), 0.0)
    return feats, present


def generate_dataset(params: GenParams, count: int, start_id: int = 0) -> list[Sequence]:
    """``count`` sequences; sequence ``i`` depends only on ``(params.seed, start_id + i)``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return [
        generate_sequence(params, np.random.default_rng([params.seed, start_id + i]), seq_id=start_id + i)
        for i in range(count)
    ]


def split_datasets(params: GenParams, n_train: int, n_val: int, n_test: int) -> dict[str, list[Sequence]]:
    """Train/val/test splits drawn from disjoint generation seeds."""
    out = {}
    for k, (name, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        split_params = GenParams(**{**params.to_dict(), "seed": params.seed * 3 + k})
        out[name] = generate_dataset(split_params, n, start_id=k * 1_000_000) if n else []
    return out


def summarize(seqs: list[Sequence]) -> dict:
    states = np.concatenate([s.ball_states for s in seqs])
    counts = {name.lower(): int(np.sum(states == s)) for name, s in BallState.__members__.items()}
    # events following a possession: count pass and uncontrolled onsets
    onsets = {"pass": 0, "uncontrolled": 0}
    for s in seqs:
        prev = s.ball_states[:-1]
        nxt = s.ball_states[1:]
        starts = nxt[(nxt != prev) & (nxt != BallState.POSSESSION)]
        onsets["pass"] += int(np.sum(starts == BallState.PASS))
        onsets["uncontrolled"] += int(np.sum(starts == BallState.UNCONTROLLED))
    n_events = max(1, onsets["pass"] + onsets["uncontrolled"])
    return {
        "sequences": len(seqs),
        "frames": int(states.size),
        "state_counts": counts,
        "state_fractions": {k: v / max(1, states.size) for k, v in counts.items()},
        "event_counts": onsets,
        "event_fractions": {k: v / n_events for k, v in onsets.items()},
    }
