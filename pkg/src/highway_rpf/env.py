"""Three-lane one-way highway microsimulator.

Discrete time (1 s steps), kinematic vehicles, IDM car following and a
gap-acceptance overtaking rule for the surrounding traffic, a 10-action
tactical interface for the ego vehicle, and the normalized observation
encoder consumed by the Q-networks.

Conventions:
  * x is the longitudinal center position in meters, increasing forward.
  * lanes are indexed 0 (rightmost) to 2 (leftmost); lane centers sit at
    y = lane * LANE_WIDTH, so y=0 is the rightmost lane.
  * left lateral motion is positive v_y.
  * a lane change spans LANE_CHANGE_DURATION seconds and cannot be aborted;
    a changing vehicle occupies both lanes for collision purposes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

# road geometry
N_LANES = 3
LANE_WIDTH = 3.2           # m
Y_MAX = N_LANES * LANE_WIDTH
ROAD_LENGTH = 5000.0       # m, used only for spawn feasibility
DT = 1.0                   # s
EPISODE_STEPS = 100

# vehicles
EGO_LENGTH = 16.0          # m, truck-trailer
CAR_LENGTH = 5.0           # m
EGO_MAX_SPEED = 25.0       # m/s
SPEED_MIN = 15.0           # m/s, surrounding desired-speed range
SPEED_MAX = 35.0
SENSOR_RANGE = 200.0       # m
LANE_CHANGE_DURATION = 4.0  # s
LATERAL_SPEED = LANE_WIDTH / LANE_CHANGE_DURATION  # 0.8 m/s

# IDM car following
IDM_ACCEL_MAX = 2.6        # m/s^2
IDM_BRAKE_COMFORT = 4.5    # m/s^2
IDM_MIN_GAP = 2.0          # m
IDM_HEADWAY = 1.0          # s
IDM_EXPONENT = 4
ACCEL_FLOOR = -9.0         # m/s^2, physical braking limit

# overtaking rule
LC_SPEED_SHORTFALL = 1.0   # m/s below desired before a change is considered
LC_SAFE_DECEL = 4.5        # m/s^2, max braking imposed on anyone by a change
LC_ANTICIPATION_MARGIN = 60.0  # m added to the time-gap distance as lookahead

# reward model
REWARD_SPEED_NORM = EGO_MAX_SPEED
COLLISION_PENALTY = -10.0
NEAR_EVENT_PENALTY = -10.0
LANE_CHANGE_PENALTY = -1.0
EMERGENCY_DECEL = 4.5      # m/s^2, braking forced on others counts as a near event
MIN_TIME_GAP = 2.5         # s

HEURISTIC_HARD_BRAKE_BELOW = -2.5  # m/s^2, quantization cut between -4 and -1
HEURISTIC_HEADWAY = 2.6    # s, keeps the baseline driver outside the penalty gap

# driver models for surrounding vehicles
MODEL_IDM = "idm"             # car following + overtaking
MODEL_IDM_NO_LC = "idm_nolc"  # car following, lane locked
MODEL_FIXED = "fixed"         # constant speed (stopped / oncoming props)


class SimulationError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EgoAction:
    index: int
    accel: float    # m/s^2
    lateral: int    # 0 stay, +1 change left, -1 change right


ACTIONS: tuple[EgoAction, ...] = (
    EgoAction(0, 0.0, 0),
    EgoAction(1, 0.0, +1),
    EgoAction(2, 0.0, -1),
    EgoAction(3, -1.0, 0),
    EgoAction(4, -1.0, +1),
    EgoAction(5, -1.0, -1),
    EgoAction(6, 1.0, 0),
    EgoAction(7, 1.0, +1),
    EgoAction(8, 1.0, -1),
    EgoAction(9, -4.0, 0),  # hard brake; also the safety fallback
)
N_ACTIONS = len(ACTIONS)
FALLBACK_ACTION = 9
EGO_FEATURES = 3
VEHICLE_FEATURES = 4


def action_from_parts(accel: float, lateral: int) -> int:
    for a in ACTIONS:
        if a.accel == accel and a.lateral == lateral:
            return a.index
    raise ValueError(f"no action with accel={accel}, lateral={lateral}")


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class Vehicle:
    x: float
    lane_from: int
    lane_to: int
    y: float
    vx: float
    vy: float
    length: float
    desired_speed: float
    lane_change_progress: float = 0.0   # s, 0 when not changing
    model: str = MODEL_IDM
    is_ego: bool = False
    ood: bool = False                   # flagged out-of-distribution prop

    @property
    def lane_index(self) -> int:
        return self.lane_to

    @property
    def changing(self) -> bool:
        return self.lane_from != self.lane_to

    def occupied_lanes(self) -> tuple[int, ...]:
        if self.changing:
            return (self.lane_from, self.lane_to)
        return (self.lane_to,)


@dataclass
class TrafficState:
    vehicles: list[Vehicle]          # ego at index 0 when present
    elapsed_steps: int = 0
    seed: int | None = None          # reset seed, for traceability
    terminated: bool = False

    @property
    def ego(self) -> Vehicle:
        if not self.vehicles or not self.vehicles[0].is_ego:
            raise SimulationError("state has no ego vehicle")
        return self.vehicles[0]

    @property
    def has_ego(self) -> bool:
        return bool(self.vehicles) and self.vehicles[0].is_ego


@dataclass
class StepOutcome:
    state: TrafficState
    reward: float
    terminated: bool
    collision: bool = False
    off_road: bool = False
    emergency_brake_caused: bool = False
    time_gap_violation: bool = False
    lane_change_initiated: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    """Episode generator settings, including out-of-distribution overrides."""

    kind: str = "nominal"            # nominal | stopped | speeder | oncoming
    n_vehicles: int = 25
    speed_min: float = SPEED_MIN
    speed_max: float = SPEED_MAX
    include_ego: bool = True
    seed: int | None = None          # optional fixed seed for file-driven replays
    # stopped-vehicle scenario
    stopped_distance: float = 300.0
    stopped_wall_count: int = 3
    # speeding-vehicle scenario
    speeder_speed: float = 55.0
    speeder_distance: float = 150.0
    slow_leader_distance: float = 60.0
    slow_leader_speed: float = 15.0
    # oncoming scenario
    oncoming_speed: float = 25.0     # approach speed; the vehicle drives at -speed
    oncoming_distance: float = 400.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


SCENARIO_KINDS = ("nominal", "stopped", "speeder", "oncoming")


def load_scenario_config(path) -> ScenarioConfig:
    with open(path) as fh:
        data = json.load(fh)
    return scenario_from_dict(data)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    unknown = set(data) - set(ScenarioConfig.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
    cfg = ScenarioConfig(**data)
    if cfg.kind not in SCENARIO_KINDS:
        raise ConfigurationError(f"unknown scenario kind {cfg.kind!r}")
    if cfg.n_vehicles < 0 or cfg.speed_min > cfg.speed_max:
        raise ConfigurationError("invalid vehicle count or speed range")
    return cfg


def save_scenario_config(cfg: ScenarioConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def lane_center(lane: int) -> float:
    return lane * LANE_WIDTH


def bumper_gap(leader: Vehicle, follower: Vehicle) -> float:
    """Front-bumper-to-rear-bumper distance; negative means overlap."""
    return (leader.x - 0.5 * leader.length) - (follower.x + 0.5 * follower.length)


def _lanes_overlap(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    return any(lane in b for lane in a)


def _neighbor(vehicles: list[Vehicle], idx: int, lanes: tuple[int, ...],
              ahead: bool) -> int | None:
    """Index of the nearest vehicle ahead/behind of ``idx`` touching ``lanes``.

    A changing vehicle counts in both of its lanes (car following, gap
    acceptance and collision logic all see the full swept corridor).
    """
    me = vehicles[idx]
    best = None
    best_dist = math.inf
    for j, v in enumerate(vehicles):
        if j == idx:
            continue
        if not _lanes_overlap(v.occupied_lanes(), lanes):
            continue
        dist = v.x - me.x if ahead else me.x - v.x
        if dist <= 0:
            continue
        if dist < best_dist:
            best = j
            best_dist = dist
    return best


def _ego_gap_leader(vehicles: list[Vehicle]) -> int | None:
    """Leader for the penalized time-gap check.

    The vehicle the ego is driving towards in the lane it is heading for.
    Another driver mid-change only counts once committed to that lane
    (second half of the maneuver), so a legal tight cut-in does not flip the
    ego into violation before the intruder has actually arrived.
    """
    ego = vehicles[0]
    best = None
    best_dist = math.inf
    for j in range(1, len(vehicles)):
        v = vehicles[j]
        lane = v.lane_to
        if v.changing and v.lane_change_progress < 0.5 * LANE_CHANGE_DURATION:
            lane = v.lane_from
        if lane != ego.lane_to:
            continue
        dist = v.x - ego.x
        if 0 < dist < best_dist:
            best = j
            best_dist = dist
    return best


def collision_pairs(vehicles: list[Vehicle]) -> list[tuple[int, int]]:
    """All index pairs whose longitudinal and lateral extents overlap."""
    pairs = []
    for i in range(len(vehicles)):
        for j in range(i + 1, len(vehicles)):
            a, b = vehicles[i], vehicles[j]
            if not _lanes_overlap(a.occupied_lanes(), b.occupied_lanes()):
                continue
            if abs(a.x - b.x) < 0.5 * (a.length + b.length):
                pairs.append((i, j))
    return pairs


def collision_check(state: TrafficState) -> dict:
    """Collision flags: any pair, and whether the ego is involved."""
    pairs = collision_pairs(state.vehicles)
    ego_hit = state.has_ego and any(0 in p for p in pairs)
    return {"collision": ego_hit, "any_collision": bool(pairs), "pairs": pairs}


# ---------------------------------------------------------------------------
# driver models
# ---------------------------------------------------------------------------

def surrounding_accel(speed: float, desired_speed: float,
                      leader_gap: float | None = None,
                      leader_speed: float | None = None,
                      headway: float = IDM_HEADWAY) -> float:
    """IDM acceleration, clamped to [ACCEL_FLOOR, IDM_ACCEL_MAX]."""
    if desired_speed <= 0.0:
        return 0.0
    accel = IDM_ACCEL_MAX * (1.0 - (speed / desired_speed) ** IDM_EXPONENT)
    if leader_gap is not None:
        closing = speed - float(leader_speed)
        desired_gap = IDM_MIN_GAP + max(
            0.0,
            speed * headway
            + speed * closing / (2.0 * math.sqrt(IDM_ACCEL_MAX * IDM_BRAKE_COMFORT)),
        )
        gap = max(leader_gap, 0.01)
        accel -= IDM_ACCEL_MAX * (desired_gap / gap) ** 2
    return min(max(accel, ACCEL_FLOOR), IDM_ACCEL_MAX)


def _control_accel(vehicles: list[Vehicle], idx: int, desired_speed: float,
                   headway: float = IDM_HEADWAY) -> tuple[float, int | None]:
    """Most constraining IDM acceleration over every occupied lane.

    A vehicle mid-change follows whichever of its two lanes' leaders demands
    the harder braking; the nearest vehicle alone is not enough (a close fast
    mover in the target lane must not mask a stopped one in the origin lane).
    Returns (acceleration, index of the binding leader or None).
    """
    me = vehicles[idx]
    accel = surrounding_accel(me.vx, desired_speed)
    binding = None
    for lane in me.occupied_lanes():
        j = _neighbor(vehicles, idx, (lane,), ahead=True)
        if j is None:
            continue
        candidate = surrounding_accel(me.vx, desired_speed,
                                      bumper_gap(vehicles[j], me), vehicles[j].vx,
                                      headway=headway)
        if candidate < accel:
            accel = candidate
            binding = j
    return accel, binding


def _accel_towards(vehicles: list[Vehicle], idx: int, desired_speed: float,
                   headway: float = IDM_HEADWAY) -> float:
    return _control_accel(vehicles, idx, desired_speed, headway)[0]


def _anticipated_speed(vehicles: list[Vehicle], idx: int, lane: int) -> float:
    """Speed vehicle ``idx`` could hold in ``lane`` over a short horizon."""
    me = vehicles[idx]
    horizon = MIN_TIME_GAP * me.vx + LC_ANTICIPATION_MARGIN
    j = _neighbor(vehicles, idx, (lane,), ahead=True)
    if j is None:
        return me.desired_speed
    gap = bumper_gap(vehicles[j], me)
    if gap > horizon:
        return me.desired_speed
    return min(me.desired_speed, vehicles[j].vx)


def _change_is_safe(vehicles: list[Vehicle], idx: int, lane: int,
                    min_leader_gap: float = 0.0) -> bool:
    """Nobody (incoming driver included) is forced below -LC_SAFE_DECEL.

    The new follower must also retain its own equilibrium headway, so nobody
    slots in at a distance the follower's driver model could never hold.
    """
    me = vehicles[idx]
    j = _neighbor(vehicles, idx, (lane,), ahead=True)
    if j is not None:
        gap = bumper_gap(vehicles[j], me)
        if gap <= max(0.0, min_leader_gap):
            return False
        if surrounding_accel(me.vx, me.desired_speed, gap, vehicles[j].vx) < -LC_SAFE_DECEL:
            return False
    j = _neighbor(vehicles, idx, (lane,), ahead=False)
    if j is not None:
        follower = vehicles[j]
        gap = bumper_gap(me, follower)
        if gap <= IDM_MIN_GAP + IDM_HEADWAY * follower.vx:
            return False
        if surrounding_accel(follower.vx, follower.desired_speed, gap, me.vx) < -LC_SAFE_DECEL:
            return False
    return True


def surrounding_lane_change(vehicles: list[Vehicle], idx: int,
                            min_leader_gap: float = 0.0) -> int | None:
    """Target lane for an overtaking move, or None.

    Uncooperative gap acceptance: change when the current lane is slower than
    desired by more than LC_SPEED_SHORTFALL, an adjacent lane anticipates a
    strictly higher speed, and nobody would have to brake hard. Overtaking is
    allowed on both sides; ties prefer the left lane.
    """
    me = vehicles[idx]
    if me.changing:
        return None
    # while braking hard there is no controlled escape: a swerve would sweep
    # the origin lane for the whole maneuver with no room to clear the leader
    if _accel_towards(vehicles, idx, me.desired_speed) < -LC_SAFE_DECEL:
        return None
    current = _anticipated_speed(vehicles, idx, me.lane_to)
    if current >= me.desired_speed - LC_SPEED_SHORTFALL:
        return None
    best_lane = None
    best_speed = current
    for lane in (me.lane_to + 1, me.lane_to - 1):  # left first
        if lane < 0 or lane >= N_LANES:
            continue
        anticipated = _anticipated_speed(vehicles, idx, lane)
        if anticipated <= best_speed:
            continue
        if not _change_is_safe(vehicles, idx, lane, min_leader_gap):
            continue
        best_lane = lane
        best_speed = anticipated
    return best_lane


def heuristic_driver_policy(state: TrafficState) -> int:
    """Ego baseline: the surrounding-driver model quantized onto the action set.

    The car-following law runs with a headway compatible with the penalized
    minimum time gap, so the baseline does not park itself inside the
    near-event zone whenever it follows someone.
    """
    vehicles = state.vehicles
    ego = state.ego
    accel = _accel_towards(vehicles, 0, min(ego.desired_speed, EGO_MAX_SPEED),
                           headway=HEURISTIC_HEADWAY)
    lateral = 0
    if not ego.changing:
        # never change into a slot inside the penalized time gap
        target = surrounding_lane_change(vehicles, 0,
                                         min_leader_gap=MIN_TIME_GAP * ego.vx)
        if target is not None:
            lateral = 1 if target > ego.lane_to else -1
    # hard braking preempts an available escape lane only in emergencies
    if accel < -LC_SAFE_DECEL or (accel < HEURISTIC_HARD_BRAKE_BELOW and lateral == 0):
        return FALLBACK_ACTION  # (-4, stay)
    if accel < -0.5:
        quantized = -1.0
    elif accel > 0.5:
        quantized = 1.0
    else:
        quantized = 0.0
    return action_from_parts(quantized, lateral)


# ---------------------------------------------------------------------------
# episode generation
# ---------------------------------------------------------------------------

def _required_spawn_gap(follower_speed: float, leader_speed: float) -> float:
    """Bumper gap that lets the follower settle without harsh braking."""
    brake_margin = max(0.0, follower_speed ** 2 - leader_speed ** 2) / (2.0 * IDM_BRAKE_COMFORT)
    return IDM_MIN_GAP + IDM_HEADWAY * follower_speed + brake_margin


def _make_car(x: float, lane: int, speed: float, desired: float,
              model: str = MODEL_IDM, ood: bool = False) -> Vehicle:
    return Vehicle(x=x, lane_from=lane, lane_to=lane, y=lane_center(lane),
                   vx=speed, vy=0.0, length=CAR_LENGTH, desired_speed=desired,
                   model=model, ood=ood)


def _spawn_nominal(cfg: ScenarioConfig, rng: np.random.Generator,
                   ego_x: float, ego_lane: int) -> list[Vehicle]:
    """Slower cars ahead of the ego anchor, faster cars behind it.

    Placement walks outward per lane; every pair respects the spawn gap rule
    so the opening seconds are free of collisions and forced braking, and the
    ego starts clear of time-gap violations in its own lane.
    """
    vehicles: list[Vehicle] = []
    ahead_x = {lane: ego_x for lane in range(N_LANES)}
    ahead_v = {lane: EGO_MAX_SPEED for lane in range(N_LANES)}
    ahead_len = {lane: EGO_LENGTH if lane == ego_lane else 0.0 for lane in range(N_LANES)}
    behind_x = dict(ahead_x)
    behind_v = dict(ahead_v)
    behind_len = dict(ahead_len)

    for _ in range(cfg.n_vehicles):
        desired = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        lane = int(rng.integers(N_LANES))
        slack = float(rng.uniform(40.0, 130.0))
        goes_ahead = desired < EGO_MAX_SPEED
        if goes_ahead:
            # the frontier vehicle (or ego) follows the newcomer
            gap = _required_spawn_gap(ahead_v[lane], desired) + slack
            if lane == ego_lane and ahead_x[lane] == ego_x:
                gap = max(gap, MIN_TIME_GAP * EGO_MAX_SPEED + 40.0)
            x = ahead_x[lane] + gap + 0.5 * (ahead_len[lane] + CAR_LENGTH)
            ahead_x[lane], ahead_v[lane], ahead_len[lane] = x, desired, CAR_LENGTH
        else:
            # the newcomer follows the frontier vehicle (or ego)
            gap = _required_spawn_gap(desired, behind_v[lane]) + slack
            if lane == ego_lane and behind_x[lane] == ego_x:
                gap = max(gap, MIN_TIME_GAP * desired + 10.0)
            x = behind_x[lane] - gap - 0.5 * (behind_len[lane] + CAR_LENGTH)
            behind_x[lane], behind_v[lane], behind_len[lane] = x, desired, CAR_LENGTH
        vehicles.append(_make_car(x, lane, desired, desired))

    span = max(ahead_x.values()) - min(behind_x.values())
    if span > ROAD_LENGTH:
        raise ConfigurationError(
            f"cannot place {cfg.n_vehicles} vehicles on a {ROAD_LENGTH:.0f} m road")
    return vehicles


def reset(cfg: ScenarioConfig, rng: np.random.Generator | int) -> TrafficState:
    """Build the initial traffic state for a scenario; deterministic per seed."""
    seed = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    ego_x = 1000.0

    if cfg.kind == "nominal":
        ego_lane = int(rng.integers(N_LANES))
        surrounding = _spawn_nominal(cfg, rng, ego_x, ego_lane)
    elif cfg.kind == "stopped":
        ego_lane = 0
        surrounding = [_make_car(ego_x + cfg.stopped_distance, 0, 0.0, 0.0,
                                 model=MODEL_FIXED, ood=True)]
        for i in range(cfg.stopped_wall_count):
            speed = float(rng.uniform(15.0, 18.0))
            surrounding.append(_make_car(ego_x + 30.0 + 45.0 * i, 1, speed, speed,
                                         model=MODEL_IDM_NO_LC))
    elif cfg.kind == "speeder":
        ego_lane = 0
        surrounding = [
            _make_car(ego_x + cfg.slow_leader_distance, 0,
                      cfg.slow_leader_speed, cfg.slow_leader_speed, model=MODEL_IDM_NO_LC),
            _make_car(ego_x - cfg.speeder_distance, 1,
                      cfg.speeder_speed, cfg.speeder_speed, model=MODEL_IDM_NO_LC, ood=True),
        ]
    elif cfg.kind == "oncoming":
        ego_lane = 1
        surrounding = [_make_car(ego_x + cfg.oncoming_distance, 1,
                                 -abs(cfg.oncoming_speed), 0.0, model=MODEL_FIXED, ood=True)]
    else:
        raise ConfigurationError(f"unknown scenario kind {cfg.kind!r}")

    vehicles = []
    if cfg.include_ego:
        vehicles.append(Vehicle(x=ego_x, lane_from=ego_lane, lane_to=ego_lane,
                                y=lane_center(ego_lane), vx=EGO_MAX_SPEED, vy=0.0,
                                length=EGO_LENGTH, desired_speed=EGO_MAX_SPEED,
                                is_ego=True))
    vehicles.extend(surrounding)
    return TrafficState(vehicles=vehicles, elapsed_steps=0, seed=seed)


# ---------------------------------------------------------------------------
# observation encoding
# ---------------------------------------------------------------------------

def _sgn(value: float) -> float:
    if value > 0:
        return 1.0
    if value < 0:
        return -1.0
    return 0.0


def observe(state: TrafficState) -> np.ndarray:
    """Normalized input vector: 3 ego features + 4 per sensed vehicle.

    Every component lies in [-1, 1]; the relative-speed feature is clamped so
    out-of-distribution speeds cannot push it outside the training range.
    """
    ego = state.ego
    parts = [
        2.0 * ego.y / Y_MAX - 1.0,
        2.0 * ego.vx / EGO_MAX_SPEED - 1.0,
        _sgn(ego.vy),
    ]
    speed_span = SPEED_MAX - SPEED_MIN
    for v in state.vehicles[1:]:
        dx = v.x - ego.x
        if abs(dx) > SENSOR_RANGE:
            continue
        parts.append(dx / SENSOR_RANGE)
        parts.append((v.y - ego.y) / Y_MAX)
        parts.append(min(max((v.vx - ego.vx) / speed_span, -1.0), 1.0))
        parts.append(_sgn(v.vy))
    return np.asarray(parts, dtype=np.float64)


# ---------------------------------------------------------------------------
# transition
# ---------------------------------------------------------------------------

def compute_reward(ego_speed: float, collision: bool, off_road: bool,
                   emergency_brake_caused: bool, time_gap_violation: bool,
                   lane_change_initiated: bool) -> float:
    """Speed term in [0, 1] plus event penalties."""
    reward = 1.0 - (REWARD_SPEED_NORM - ego_speed) / REWARD_SPEED_NORM
    if collision or off_road:
        reward += COLLISION_PENALTY
    if emergency_brake_caused or time_gap_violation:
        reward += NEAR_EVENT_PENALTY
    if lane_change_initiated:
        reward += LANE_CHANGE_PENALTY
    return reward


def _initiate_change(vehicle: Vehicle, target: int) -> None:
    vehicle.lane_to = target
    vehicle.vy = LATERAL_SPEED if target > vehicle.lane_from else -LATERAL_SPEED
    vehicle.lane_change_progress = 0.0


def step(state: TrafficState, action: int | EgoAction | None) -> StepOutcome:
    """Advance the simulation by one second.

    Order: lateral decisions (ego first, then surrounding vehicles in index
    order, each seeing earlier intents), then accelerations, then
    semi-implicit integration (speed before position), then event detection
    on the post-move state.
    """
    if state.terminated:
        raise SimulationError("cannot step a terminated state")
    vehicles = [replace(v) for v in state.vehicles]
    has_ego = bool(vehicles) and vehicles[0].is_ego
    if has_ego and action is None:
        raise SimulationError("an ego action is required")
    if action is not None and not has_ego:
        raise SimulationError("cannot apply an ego action without an ego vehicle")
    if isinstance(action, (int, np.integer)):
        action = ACTIONS[int(action)]

    off_road = False
    lane_change_initiated = False

    # lateral decisions
    if has_ego:
        ego = vehicles[0]
        if action.lateral != 0 and not ego.changing:
            target = ego.lane_to + action.lateral
            if 0 <= target < N_LANES:
                _initiate_change(ego, target)
                lane_change_initiated = True
            else:
                off_road = True
    for i, v in enumerate(vehicles):
        if v.is_ego or v.model != MODEL_IDM or v.changing:
            continue
        target = surrounding_lane_change(vehicles, i)
        if target is not None:
            _initiate_change(v, target)

    # accelerations (binding leaders recorded for the emergency-brake event)
    accels = [0.0] * len(vehicles)
    control_leader: list[int | None] = [None] * len(vehicles)
    for i, v in enumerate(vehicles):
        if v.is_ego:
            accels[i] = action.accel
        elif v.model == MODEL_FIXED:
            accels[i] = 0.0
        else:
            accels[i], control_leader[i] = _control_accel(vehicles, i, v.desired_speed)

    # integrate: speed first, then position
    for i, v in enumerate(vehicles):
        if v.model != MODEL_FIXED:
            v.vx = v.vx + accels[i] * DT
            v.vx = min(max(v.vx, 0.0), EGO_MAX_SPEED) if v.is_ego else max(v.vx, 0.0)
        v.x += v.vx * DT
        if v.changing:
            v.lane_change_progress += DT
            v.y += v.vy * DT
            if v.lane_change_progress >= LANE_CHANGE_DURATION:
                v.lane_from = v.lane_to
                v.y = lane_center(v.lane_to)
                v.vy = 0.0
                v.lane_change_progress = 0.0

    # events on the post-move state
    collision = False
    emergency = False
    time_gap_violation = False
    if has_ego:
        ego = vehicles[0]
        collision = any(0 in pair for pair in collision_pairs(vehicles))
        emergency = any(control_leader[i] == 0 and accels[i] < -EMERGENCY_DECEL
                        for i in range(1, len(vehicles)))
        # gap the ego keeps to the vehicle it is driving towards; tailgating
        # *by* others is their doing and is captured through the
        # emergency-braking event instead
        lead = _ego_gap_leader(vehicles)
        if lead is not None and bumper_gap(vehicles[lead], ego) < MIN_TIME_GAP * ego.vx:
            time_gap_violation = True

    elapsed = state.elapsed_steps + 1
    terminated = collision or off_road or elapsed >= EPISODE_STEPS
    reward = 0.0
    if has_ego:
        reward = compute_reward(vehicles[0].vx, collision, off_road, emergency,
                                time_gap_violation, lane_change_initiated)

    next_state = TrafficState(vehicles=vehicles, elapsed_steps=elapsed,
                              seed=state.seed, terminated=terminated)
    return StepOutcome(state=next_state, reward=reward, terminated=terminated,
                       collision=collision, off_road=off_road,
                       emergency_brake_caused=emergency,
                       time_gap_violation=time_gap_violation,
                       lane_change_initiated=lane_change_initiated)


# ---------------------------------------------------------------------------
# trace export
# ---------------------------------------------------------------------------

TRAJECTORY_COLUMNS = ["step", "vehicle_id", "x", "y", "v_x", "v_y",
                      "lane_change_progress", "reward", "collision", "off_road",
                      "emergency_brake_caused", "time_gap_violation",
                      "lane_change_initiated"]


def write_trajectory_csv(path, states: list[TrafficState],
                         outcomes: list[StepOutcome | None]) -> None:
    """One row per (step, vehicle); positions in m, speeds in m/s.

    ``outcomes[t]`` holds the transition that produced ``states[t]`` (None for
    the initial state, whose reward/event columns are written as zero).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for t, (st, out) in enumerate(zip(states, outcomes)):
            for vid, v in enumerate(st.vehicles):
                writer.writerow([
                    t, vid, f"{v.x:.3f}", f"{v.y:.3f}", f"{v.vx:.3f}", f"{v.vy:.3f}",
                    f"{v.lane_change_progress:.1f}",
                    f"{out.reward:.6f}" if out else "0",
                    int(out.collision) if out else 0,
                    int(out.off_road) if out else 0,
                    int(out.emergency_brake_caused) if out else 0,
                    int(out.time_gap_violation) if out else 0,
                    int(out.lane_change_initiated) if out else 0,
                ])
