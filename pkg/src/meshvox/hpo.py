"""Asynchronous successive halving (ASHA) over the MeshNet search space.

Trials start at the lowest fidelity rung. Whenever a worker frees up the
scheduler promotes the best not-yet-promoted trial that ranks in the top
``ceil(n_k / eta)`` of its rung ``k``; if there is none it starts a new trial.
The scheduler never waits for stragglers.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .meshnet import CANONICAL_DILATIONS, MeshNetConfig, from_weights
from .train import train, validation_dice, with_search_config

CONFIG_FIELDS = ("channels", "lr", "weight_decay", "background_weight", "warmup_frac")
LEDGER_FIELDS = ("trial_id", "rung", "fidelity", *CONFIG_FIELDS, "score", "status", "wall_time", "error")


@dataclass(frozen=True)
class SearchSpace:
    channels: tuple[int, int] = (5, 21)
    lr: tuple[float, float] = (1e-4, 4e-2)
    weight_decay: tuple[float, float] = (1e-4, 4e-2)
    background_weight: tuple[float, float] = (0.0, 1.0)
    warmup_frac: tuple[float, ...] = (0.02, 0.1, 0.2)
    epochs: tuple[int, int] = (15, 50)

    def __post_init__(self):
        for name in ("channels", "lr", "weight_decay", "background_weight", "epochs"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} bounds reversed: {lo} > {hi}")
        if self.lr[0] <= 0 or self.weight_decay[0] <= 0:
            raise ValueError("log-uniform bounds must be positive")
        if not self.epochs[0] < self.epochs[1]:
            raise ValueError("fidelity minimum must be below its maximum")
        if not self.warmup_frac:
            raise ValueError("warmup_frac needs at least one choice")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: tuple(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


def _log_uniform(rng, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample(space: SearchSpace, seed: int, trial_index: int) -> dict:
    """Configuration for trial ``trial_index``; a pure function of its arguments."""
    rng = np.random.default_rng([seed, trial_index])
    return {
        "channels": int(rng.integers(space.channels[0], space.channels[1] + 1)),
        "lr": _log_uniform(rng, *space.lr),
        "weight_decay": _log_uniform(rng, *space.weight_decay),
        "background_weight": float(rng.uniform(*space.background_weight)),
        "warmup_frac": float(space.warmup_frac[rng.integers(len(space.warmup_frac))]),
    }


def rung_fidelities(r_min: int, r_max: int, eta: int) -> list[int]:
    """``min(r_min * eta**k, r_max)`` until the cap is reached."""
    rungs = [r_min]
    while rungs[-1] < r_max:
        rungs.append(min(rungs[-1] * eta, r_max))
    return rungs


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    rung: int = 0
    fidelity: int = 0
    status: str = "pending"  # pending | running | completed_at_rung | promoted | stopped
    scores: dict[int, float] = field(default_factory=dict)
    error: str | None = None


class Decision(NamedTuple):
    action: str  # "start_new_trial" | "promote" | "stop"
    trial_id: int | None = None
    to_rung: int | None = None


def promotion_quota(n_recorded: int, eta: int) -> int:
    return math.ceil(n_recorded / eta)


def asha_decide(trials, eta: int, rungs, can_start: bool = True) -> Decision | None:
    """Next scheduler action given every trial's record.

    A trial that completed rung ``k`` is promotable iff it ranks in the top
    ``ceil(n_k / eta)`` of the scores recorded at ``k`` and fewer than that
    many trials have already left rung ``k``. Higher rungs are served first.
    Without promotions a new trial is started (when ``can_start``); once no
    work remains, idle trials are stopped one at a time. ``None`` means wait.
    """
    trials = trials.values() if isinstance(trials, dict) else trials
    trials = list(trials)
    by_id = {t.trial_id: t for t in trials}
    top = len(rungs) - 1
    for k in reversed(range(top)):
        recorded = sorted(((t.scores[k], t.trial_id) for t in trials if k in t.scores), key=lambda s: (-s[0], s[1]))
        quota = promotion_quota(len(recorded), eta)
        left = sum(1 for t in trials if t.rung > k)
        if left >= quota:
            continue
        for _, tid in recorded[:quota]:
            t = by_id[tid]
            if t.status == "completed_at_rung" and t.rung == k:
                return Decision("promote", tid, k + 1)
    if can_start:
        return Decision("start_new_trial")
    if any(t.status in ("running", "pending") for t in trials):
        return None
    for t in sorted(trials, key=lambda t: t.trial_id):
        if t.status == "completed_at_rung" and t.rung < top:
            return Decision("stop", t.trial_id)
    return None


def trial_seed(seed: int, trial_id: int) -> int:
    return int(np.random.SeedSequence([seed, trial_id]).generate_state(1)[0])


@dataclass
class SearchResult:
    best: TrialRecord | None
    trials: dict[int, TrialRecord]
    ledger: list[dict]
    rungs: list[int]


class Ledger:
    """Append-only CSV log of scheduler events."""

    def __init__(self, path=None):
        self.path = path
        self.rows: list[dict] = []
        if path is not None and not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.DictWriter(f, LEDGER_FIELDS).writeheader()

    def append(self, t: TrialRecord, rungs, status: str, score=None, wall_time: float = 0.0):
        row = {
            "trial_id": t.trial_id,
            "rung": t.rung,
            "fidelity": rungs[t.rung],
            **{k: t.config[k] for k in CONFIG_FIELDS},
            "score": "" if score is None else score,
            "status": status,
            "wall_time": round(wall_time, 6),
            "error": t.error or "",
        }
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.DictWriter(f, LEDGER_FIELDS).writerow(row)


def load_ledger(path) -> dict[int, TrialRecord]:
    """Rebuild trial records from a ledger. A trial whose last event is
    ``running`` was interrupted and will be re-run at that rung on resume."""
    trials: dict[int, TrialRecord] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            tid = int(row["trial_id"])
            config = {
                "channels": int(row["channels"]),
                **{k: float(row[k]) for k in CONFIG_FIELDS if k != "channels"},
            }
            t = trials.setdefault(tid, TrialRecord(tid, config))
            t.rung = int(row["rung"])
            t.fidelity = int(row["fidelity"])
            t.status = row["status"]
            t.error = row["error"] or None
            if row["score"] != "" and row["status"] == "completed_at_rung":
                t.scores[t.rung] = float(row["score"])
    return trials


Objective = Callable[[dict, int, int], float]


def run_search(
    space: SearchSpace,
    budget_trials: int,
    workers: int,
    seed: int,
    objective: Objective,
    eta: int = 3,
    ledger_path=None,
    resume: bool = False,
    on_decision: Callable[[dict, Decision], None] | None = None,
) -> SearchResult:
    """Run ASHA until ``budget_trials`` trials have been started and no
    promotion remains.

    ``objective(config, fidelity, seed)`` returns a score to maximise
    (validation DICE). A raising objective stops that trial with the error
    recorded. With ``workers=1`` the run is serial and exactly replayable.
    ``on_decision`` sees the trial state before each decision is applied.
    """
    if budget_trials < 1 or workers < 1:
        raise ValueError("budget_trials and workers must be >= 1")
    rungs = rung_fidelities(space.epochs[0], space.epochs[1], eta)
    trials: dict[int, TrialRecord] = {}
    if resume and ledger_path is not None and os.path.exists(ledger_path):
        trials = load_ledger(ledger_path)
    ledger = Ledger(ledger_path)
    to_rerun = sorted(t.trial_id for t in trials.values() if t.status in ("running", "pending", "promoted"))

    def execute(t: TrialRecord):
        start = time.perf_counter()
        try:
            score = float(objective(dict(t.config), rungs[t.rung], trial_seed(seed, t.trial_id)))
            if not math.isfinite(score):
                raise FloatingPointError(f"objective returned {score}")
            return t.trial_id, score, None, time.perf_counter() - start
        except Exception as exc:  # noqa: BLE001 - any objective failure stops the trial
            return t.trial_id, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - start

    def record(result):
        tid, score, err, wall = result
        t = trials[tid]
        if err is None:
            t.scores[t.rung] = score
            t.status = "completed_at_rung"
            ledger.append(t, rungs, t.status, score, wall)
        else:
            t.status = "stopped"
            t.error = err
            ledger.append(t, rungs, t.status, None, wall)

    def next_job() -> TrialRecord | None:
        while True:
            if to_rerun:
                t = trials[to_rerun.pop(0)]
            else:
                decision = asha_decide(trials, eta, rungs, can_start=len(trials) < budget_trials)
                if on_decision is not None and decision is not None:
                    on_decision(trials, decision)
                if decision is None:
                    return None
                if decision.action == "stop":
                    trials[decision.trial_id].status = "stopped"
                    ledger.append(trials[decision.trial_id], rungs, "stopped")
                    continue
                if decision.action == "promote":
                    t = trials[decision.trial_id]
                    t.rung = decision.to_rung
                    ledger.append(t, rungs, "promoted")
                else:
                    tid = len(trials)
                    t = trials[tid] = TrialRecord(tid, sample(space, seed, tid))
            t.fidelity = rungs[t.rung]
            t.status = "running"
            ledger.append(t, rungs, "running")
            return t

    if workers == 1:
        while (job := next_job()) is not None:
            record(execute(job))
    else:
        with ThreadPoolExecutor(workers) as pool:
            running = {}
            while True:
                while len(running) < workers and (job := next_job()) is not None:
                    running[pool.submit(execute, job)] = job.trial_id
                if not running:
                    break
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=lambda f: running[f]):
                    del running[fut]
                    record(fut.result())

    return SearchResult(best_trial(trials, rungs), trials, ledger.rows, rungs)


def best_trial(trials: dict[int, TrialRecord], rungs) -> TrialRecord | None:
    """Highest score at the highest rung any trial reached."""
    for k in reversed(range(len(rungs))):
        scored = [t for t in trials.values() if k in t.scores]
        if scored:
            return max(scored, key=lambda t: (t.scores[k], -t.trial_id))
    return None


def synthetic_objective(config: dict, fidelity: int, seed: int) -> float:
    """Analytic stand-in for training: peaks at channels=16, lr=3e-3,
    wd=1e-3, background weight 0.5, warmup 0.1; higher fidelity scales the
    score up without changing the ranking."""
    d = (
        ((config["channels"] - 16) / 16) ** 2
        + (math.log10(config["lr"]) - math.log10(3e-3)) ** 2
        + (math.log10(config["weight_decay"]) - math.log10(1e-3)) ** 2 / 4
        + (config["background_weight"] - 0.5) ** 2
        + (config["warmup_frac"] - 0.1) ** 2
    )
    return math.exp(-d) * (1 - math.exp(-fidelity / 15))


def make_cv_objective(dataset: dict, plan, base_cfg, dilations=None, outer: int = 0) -> Objective:
    """Objective = mean validation DICE over the inner folds of one outer fold.

    ``dataset`` maps subject id to ``(Volume, LabelMask)``; ``base_cfg`` is a
    :class:`~meshvox.train.TrainRunConfig` whose lr, weight decay, background
    weight and warmup are overridden by each sampled configuration.
    """
    dilations = dilations or CANONICAL_DILATIONS

    def objective(config: dict, fidelity: int, seed: int) -> float:
        net_cfg = MeshNetConfig(config["channels"], dilations)
        run = with_search_config(base_cfg, config, fidelity)
        run = replace(run, restarts=1, seed=seed)
        scores = []
        for train_ids, val_ids in plan.inner_folds[outer]:
            val = [dataset[s] for s in val_ids]
            ws, _ = train(net_cfg, [dataset[s] for s in train_ids], run, val_set=val)
            scores.append(validation_dice(from_weights(net_cfg, ws), val))
        return float(np.mean(scores))

    return objective


def ledger_to_json(result: SearchResult) -> str:
    best = result.best
    return json.dumps(
        {"rungs": result.rungs, "best": None if best is None else {"trial_id": best.trial_id, "config": best.config,
                                                                   "scores": best.scores}},
        indent=1,
    )
