"""Run orchestration: training sessions, fixed evaluation suites, OOD replays.

Everything here is deterministic given (master seed, settings): episode seeds
come from named streams, evaluation suites are frozen per session, and all
CSV output uses stable formatting, so two identically-seeded sessions produce
byte-identical artifacts.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import env, nets, safety, seeding
from .config import TrainSettings
from .dqn import DqnAgent
from .ensemble import EnsembleAgent
from .replay import Experience, SharedReplayMemory

AGENT_KINDS = ("rpf", "dqn", "heuristic")

METRICS_COLUMNS = ["training_step", "actual_step", "collision_free_fraction",
                   "mean_normalized_return", "normalized_return_std",
                   "cv_mean", "cv_std", "cv_p1", "cv_p50", "cv_p99"]

TRAINING_LOG_COLUMNS = ["training_step", "episode", "member_k", "loss_mean",
                        "episode_return"]


@dataclass
class EvaluationResult:
    training_step: int
    actual_step: int
    collision_free_fraction: float
    mean_normalized_return: float
    normalized_return_std: float
    cv_mean: float
    cv_std: float
    cv_p1: float
    cv_p50: float
    cv_p99: float

    def csv_row(self) -> list[str]:
        return [str(self.training_step), str(self.actual_step)] + [
            _fmt(getattr(self, col)) for col in METRICS_COLUMNS[2:]]


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def make_agent(agent_kind: str, settings: TrainSettings, master_seed: int):
    if agent_kind == "rpf":
        return EnsembleAgent(settings, master_seed)
    if agent_kind == "dqn":
        return DqnAgent(settings, master_seed)
    raise ValueError(f"cannot train agent kind {agent_kind!r}")


# ---------------------------------------------------------------------------
# episode rollouts
# ---------------------------------------------------------------------------

def discounted_return(rewards: list[float], discount: float) -> float:
    total = 0.0
    weight = 1.0
    for r in rewards:
        total += weight * r
        weight *= discount
    return total


def _eval_actor(agent):
    """(state) -> (action index, chosen-action cv or nan); never gated."""
    if agent == "heuristic":
        return lambda state: (env.heuristic_driver_policy(state), math.nan)
    if agent.kind == "rpf" and len(agent.members) >= 2:
        def act(state):
            matrix = agent.member_q_matrix(env.observe(state))
            action, report = safety.greedy_report(matrix)
            return action, float(report.cv[action])
        return act
    return lambda state: (agent.act_greedy(env.observe(state)), math.nan)


def run_eval_episode(actor, scenario: env.ScenarioConfig,
                     rng: np.random.Generator, discount: float):
    """Greedy rollout; returns (discounted return, collision-free, cv trace)."""
    state = env.reset(scenario, rng)
    rewards: list[float] = []
    cvs: list[float] = []
    crashed = False
    while not state.terminated:
        action, cv = actor(state)
        outcome = env.step(state, action)
        rewards.append(outcome.reward)
        cvs.append(cv)
        crashed = crashed or outcome.collision or outcome.off_road
        state = outcome.state
    return discounted_return(rewards, discount), not crashed, cvs


def compute_heuristic_baseline(settings: TrainSettings, master_seed: int) -> np.ndarray:
    """Heuristic-driver discounted returns on the fixed evaluation suite."""
    actor = _eval_actor("heuristic")
    scenario = settings.nominal_scenario()
    returns = []
    for j in range(settings.eval_episodes):
        rng = seeding.stream(master_seed, seeding.EVAL_EPISODE, j)
        ret, _, _ = run_eval_episode(actor, scenario, rng, settings.discount)
        returns.append(ret)
    return np.asarray(returns)


def evaluate_suite(agent, settings: TrainSettings, master_seed: int,
                   baseline_returns: np.ndarray, training_step: int = 0,
                   actual_step: int = 0) -> EvaluationResult:
    """Greedy evaluation on the session's fixed episode suite.

    Per-episode returns are normalized by the heuristic driver's return on
    the identical episode; the uncertainty gate is never active here.
    """
    if baseline_returns is None or len(baseline_returns) != settings.eval_episodes:
        raise ValueError("heuristic baseline missing or mismatched; "
                         "run the baseline for this suite first")
    actor = _eval_actor(agent)
    scenario = settings.nominal_scenario()
    ratios = []
    clean = 0
    all_cvs: list[float] = []
    for j in range(settings.eval_episodes):
        rng = seeding.stream(master_seed, seeding.EVAL_EPISODE, j)
        ret, collision_free, cvs = run_eval_episode(actor, scenario, rng, settings.discount)
        ratios.append(ret / baseline_returns[j])
        clean += collision_free
        all_cvs.extend(cvs)
    ratios = np.asarray(ratios)
    cv_arr = np.asarray(all_cvs)
    return EvaluationResult(
        training_step=training_step,
        actual_step=actual_step,
        collision_free_fraction=clean / settings.eval_episodes,
        mean_normalized_return=float(ratios.mean()),
        normalized_return_std=float(ratios.std()),
        cv_mean=_cv_stat(cv_arr, "mean"),
        cv_std=_cv_stat(cv_arr, "std"),
        cv_p1=_cv_stat(cv_arr, 1),
        cv_p50=_cv_stat(cv_arr, 50),
        cv_p99=_cv_stat(cv_arr, 99),
    )


def _cv_stat(cv_arr: np.ndarray, which) -> float:
    if cv_arr.size == 0 or np.isnan(cv_arr).all():
        return math.nan
    if which == "mean":
        return float(cv_arr.mean())
    if which == "std":
        return float(cv_arr.std())
    return float(np.percentile(cv_arr, which))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(agent, path, meta: dict, include_run_state: bool = False) -> None:
    """Write an agent checkpoint directory; optionally the full resumable state."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": 1,
        "agent": agent.kind,
        "settings": agent.settings.to_dict(),
        "master_seed": agent.master_seed,
        "train_iterations": agent.train_iterations,
        "full": include_run_state,
    }
    manifest.update(meta)
    if agent.kind == "rpf":
        manifest["ensemble_size"] = agent.settings.ensemble_size
        manifest["prior_scale"] = agent.settings.prior_scale
        for k, member in enumerate(agent.members):
            nets.save_network(member.trainable, os.path.join(path, f"member_{k:02d}_trainable.qnet"))
            nets.save_network(member.prior, os.path.join(path, f"member_{k:02d}_prior.qnet"))
            nets.save_network(member.target, os.path.join(path, f"member_{k:02d}_target.qnet"))
            nets.save_adam(member.optimizer, os.path.join(path, f"member_{k:02d}_adam.bin"))
        if include_run_state:
            manifest["rng"] = {
                "mask": seeding.generator_state(agent._mask_rng),
                "member_choice": seeding.generator_state(agent._member_rng),
                "sample": [seeding.generator_state(r) for r in agent._sample_rngs],
            }
    else:
        nets.save_network(agent.online, os.path.join(path, "online.qnet"))
        nets.save_network(agent.target, os.path.join(path, "target.qnet"))
        nets.save_adam(agent.optimizer, os.path.join(path, "adam.bin"))
        if include_run_state:
            manifest["rng"] = {
                "mask": seeding.generator_state(agent._mask_rng),
                "sample": seeding.generator_state(agent._sample_rng),
                "explore": seeding.generator_state(agent._explore_rng),
            }
    if include_run_state:
        np.savez_compressed(os.path.join(path, "replay.npz"), **agent.replay.state_arrays())
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=int)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild an agent (and its manifest) from a checkpoint directory."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    settings = TrainSettings(**manifest["settings"])
    agent = make_agent(manifest["agent"], settings, manifest["master_seed"])
    agent.train_iterations = manifest.get("train_iterations", 0)
    if agent.kind == "rpf":
        for k, member in enumerate(agent.members):
            member.trainable = nets.load_network(os.path.join(path, f"member_{k:02d}_trainable.qnet"))
            member.prior = nets.load_network(os.path.join(path, f"member_{k:02d}_prior.qnet"))
            member.target = nets.load_network(os.path.join(path, f"member_{k:02d}_target.qnet"))
            member.optimizer = nets.load_adam(os.path.join(path, f"member_{k:02d}_adam.bin"))
    else:
        agent.online = nets.load_network(os.path.join(path, "online.qnet"))
        agent.target = nets.load_network(os.path.join(path, "target.qnet"))
        agent.optimizer = nets.load_adam(os.path.join(path, "adam.bin"))
    if manifest.get("full"):
        with np.load(os.path.join(path, "replay.npz")) as data:
            agent.replay = SharedReplayMemory.from_state_arrays(dict(data))
        rng = manifest["rng"]
        if agent.kind == "rpf":
            agent._mask_rng = seeding.restore_generator(rng["mask"])
            agent._member_rng = seeding.restore_generator(rng["member_choice"])
            agent._sample_rngs = [seeding.restore_generator(s) for s in rng["sample"]]
        else:
            agent._mask_rng = seeding.restore_generator(rng["mask"])
            agent._sample_rng = seeding.restore_generator(rng["sample"])
            agent._explore_rng = seeding.restore_generator(rng["explore"])
    return agent, manifest


# ---------------------------------------------------------------------------
# training session
# ---------------------------------------------------------------------------

def _eval_marks(settings: TrainSettings) -> list[int]:
    marks = list(range(settings.eval_interval, settings.total_steps + 1,
                       settings.eval_interval))
    if not marks or marks[-1] != settings.total_steps:
        marks.append(settings.total_steps)
    return marks


def _append_csv(path, header: list[str], rows: list[list]) -> None:
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(header)
        writer.writerows(rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def load_baseline(out_dir) -> np.ndarray:
    path = os.path.join(out_dir, "baseline.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"{path} not found: run the 'baseline' command (or a training "
            "session) for this output directory and master seed first")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.asarray([float(r["discounted_return"]) for r in rows])


def ensure_baseline(settings: TrainSettings, master_seed: int, out_dir) -> np.ndarray:
    path = os.path.join(out_dir, "baseline.csv")
    if os.path.exists(path):
        return load_baseline(out_dir)
    returns = compute_heuristic_baseline(settings, master_seed)
    os.makedirs(out_dir, exist_ok=True)
    _append_csv(path, ["episode_index", "discounted_return"],
                [[j, _fmt(r)] for j, r in enumerate(returns)])
    return returns


def run_training_session(agent_kind: str, settings: TrainSettings, master_seed: int,
                         out_dir, resume_path=None, quiet: bool = False):
    """Train with periodic frozen-weight evaluation and checkpointing.

    Every ``eval_interval`` collected samples the weights are frozen, the
    fixed suite is run greedily (uncertainty gate off), a metrics row is
    appended and a checkpoint written.  ``checkpoint_latest`` additionally
    holds the replay memory and RNG states so the session can resume without
    re-evaluating past marks.
    """
    os.makedirs(out_dir, exist_ok=True)
    baseline = ensure_baseline(settings, master_seed, out_dir)
    if resume_path is not None:
        agent, manifest = load_checkpoint(resume_path)
        if not manifest.get("full"):
            raise ValueError("resume requires a checkpoint with run state "
                             "(checkpoint_latest)")
        step_count = manifest["step_count"]
        episode_index = manifest["episode_index"]
        evals_done = manifest["evals_done"]
        if manifest["agent"] != agent_kind:
            raise ValueError(f"checkpoint holds a {manifest['agent']} agent, "
                             f"requested {agent_kind}")
        # the run's identity (suite, cadence, hyperparameters) lives in the
        # checkpoint; only the step horizon may be extended by the caller
        agent.settings = replace(agent.settings, total_steps=settings.total_steps)
        settings = agent.settings
    else:
        agent = make_agent(agent_kind, settings, master_seed)
        step_count = 0
        episode_index = 0
        evals_done: list[int] = []

    marks = _eval_marks(settings)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    log_path = os.path.join(out_dir, "training_log.csv")
    scenario = settings.nominal_scenario()

    def pending_marks():
        return [m for m in marks if m not in evals_done and m <= step_count]

    while step_count < settings.total_steps:
        rng = seeding.stream(master_seed, seeding.TRAIN_EPISODE, episode_index)
        state = env.reset(scenario, rng)
        member = agent.begin_episode()
        rewards: list[float] = []
        losses: list[float] = []
        while not state.terminated and step_count < settings.total_steps:
            obs = env.observe(state)
            action = agent.act_training(obs, step_count)
            outcome = env.step(state, action)
            rewards.append(outcome.reward)
            hard_stop = outcome.collision or outcome.off_road
            if not (outcome.terminated and not hard_stop):
                # timeout endings are hidden from the learner so value
                # estimates behave as if episodes continue forever
                agent.record(Experience(obs, action, outcome.reward,
                                        env.observe(outcome.state), hard_stop))
            step_count += 1
            if step_count >= settings.learn_start:
                losses.extend(l for l in agent.train_tick() if l is not None)
            state = outcome.state
        episode_index += 1
        _append_csv(log_path, TRAINING_LOG_COLUMNS, [[
            step_count, episode_index - 1,
            member if member is not None else -1,
            _fmt(float(np.mean(losses))) if losses else "nan",
            _fmt(discounted_return(rewards, settings.discount)),
        ]])

        for mark in pending_marks():
            result = evaluate_suite(agent, settings, master_seed, baseline,
                                    training_step=mark, actual_step=step_count)
            _append_csv(metrics_path, METRICS_COLUMNS, [result.csv_row()])
            evals_done.append(mark)
            meta = {"step_count": step_count, "episode_index": episode_index,
                    "evals_done": evals_done}
            save_checkpoint(agent, os.path.join(out_dir, f"checkpoint_{mark:09d}"), meta)
            save_checkpoint(agent, os.path.join(out_dir, "checkpoint_latest"),
                            meta, include_run_state=True)
            if not quiet:
                print(f"[{agent_kind}] step {mark}: collision-free "
                      f"{result.collision_free_fraction:.2f}, normalized return "
                      f"{result.mean_normalized_return:.3f}")
    return agent, read_metrics(metrics_path)


# ---------------------------------------------------------------------------
# out-of-distribution scenario replay
# ---------------------------------------------------------------------------

TRACE_FIXED_COLUMNS = ["step", "ego_x", "ego_y", "ego_vx", "n_sensed", "action",
                       "reward", "collision", "off_road", "emergency_brake_caused",
                       "time_gap_violation", "lane_change_initiated"]


def run_ood_scenario(agent, scenario: env.ScenarioConfig, gate: bool,
                     cv_safe: float, trace_path=None, seed: int = 0):
    """Roll out a scenario, recording a full uncertainty trace per step.

    ``gate`` switches between the confidence-gated policy (fallback to hard
    braking when every action is too uncertain) and plain greedy action on
    the ensemble mean.
    """
    if gate and getattr(agent, "kind", None) != "rpf":
        raise ValueError("the uncertainty gate requires an ensemble agent")
    n_actions = agent.arch.n_actions
    state = env.reset(scenario, scenario.seed if scenario.seed is not None else seed)
    rows = []
    summary = {"collision": False, "off_road": False, "steps": 0,
               "fallback_steps": 0, "first_fallback_step": None,
               "max_chosen_cv": math.nan, "min_speed": math.inf}
    chosen_cvs = []
    while not state.terminated:
        obs = env.observe(state)
        n_sensed = (obs.shape[0] - agent.arch.ego_inputs) // agent.arch.per_vehicle_inputs
        if agent.kind == "rpf" and len(agent.members) >= 2:
            matrix = agent.member_q_matrix(obs)
            if gate:
                action, report = safety.select_safe_action(matrix, cv_safe)
            else:
                action, report = safety.greedy_report(matrix)
        else:
            action = agent.act_greedy(obs)
            report = None
        outcome = env.step(state, action)
        step_idx = state.elapsed_steps
        ego = outcome.state.vehicles[0]
        row = [step_idx, _fmt(ego.x), _fmt(ego.y), _fmt(ego.vx), n_sensed, action,
               _fmt(outcome.reward), int(outcome.collision), int(outcome.off_road),
               int(outcome.emergency_brake_caused), int(outcome.time_gap_violation),
               int(outcome.lane_change_initiated)]
        if report is not None:
            row.extend(report.csv_row())
            chosen_cvs.append(float(report.cv[report.chosen_action]))
            if report.fallback_used:
                summary["fallback_steps"] += 1
                if summary["first_fallback_step"] is None:
                    summary["first_fallback_step"] = step_idx
        rows.append(row)
        summary["collision"] = summary["collision"] or outcome.collision
        summary["off_road"] = summary["off_road"] or outcome.off_road
        summary["min_speed"] = min(summary["min_speed"], ego.vx)
        state = outcome.state
    summary["steps"] = state.elapsed_steps
    if chosen_cvs:
        finite = [c for c in chosen_cvs if math.isfinite(c)]
        summary["max_chosen_cv"] = max(finite) if finite else math.inf
    if trace_path is not None:
        header = list(TRACE_FIXED_COLUMNS)
        if agent.kind == "rpf":
            header += safety.UncertaintyReport.csv_header(n_actions)
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    return summary, rows


# ---------------------------------------------------------------------------
# run comparison
# ---------------------------------------------------------------------------

def compare_report(run_dirs: list, out_csv=None, out_txt=None) -> str:
    """Aligned collision-free / normalized-return table across runs.

    Runs are aligned on the intersection of their evaluation grids and
    ordered by final normalized return (best first).
    """
    if not run_dirs:
        raise ValueError("need at least one run directory")
    runs = []
    for d in run_dirs:
        rows = read_metrics(os.path.join(d, "metrics.csv"))
        by_step = {int(r["training_step"]): r for r in rows}
        runs.append((os.path.basename(os.path.normpath(d)), by_step))
    common = set(runs[0][1])
    for _, by_step in runs[1:]:
        common &= set(by_step)
    steps = sorted(common)
    warning = ""
    if not steps:
        warning = "warning: evaluation grids do not intersect; empty table\n"
    runs.sort(key=lambda item: -float(item[1][steps[-1]]["mean_normalized_return"]) if steps else 0.0)

    header = ["training_step"]
    for name, _ in runs:
        header += [f"{name}/collision_free", f"{name}/normalized_return"]
    table_rows = []
    for step in steps:
        row = [str(step)]
        for _, by_step in runs:
            row += [by_step[step]["collision_free_fraction"],
                    by_step[step]["mean_normalized_return"]]
        table_rows.append(row)

    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(table_rows)
    widths = [max(len(h), 14) for h in header]
    lines = [warning] if warning else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in table_rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    text = "\n".join(lines) + "\n"
    if out_txt is not None:
        with open(out_txt, "w") as fh:
            fh.write(text)
    return text
