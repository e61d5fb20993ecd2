"""
Inverse kinematic transformation: logged trajectory -> action tokens.

A rolling k-step window of continuous actions is fitted to the logged states
by damped Gauss-Newton; only the first action is kept, snapped to the nearest
codebook centre, and the state it produces (not the logged one) seeds the next
window. Quantization error is therefore compensated instead of accumulated.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError
from tqdm import tqdm

from kinesim.core.action_codec import (
    A_MAX,
    W_MAX,
    ZERO_TOKEN,
    ActionToken,
    dequantize,
    nearest_token,
)
from kinesim.core.config import progress_enabled
from kinesim.core.errors import InvalidArgumentError, ScenarioParseError, TokenizerError
from kinesim.core.kinematics import CTRA, AgentState, ControlAction, ctra_step, wrap_angle, wrap_angle_array
from kinesim.schemas import Scenario, TokenRecord, Track

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 3

_LOWER = np.array([-A_MAX, -W_MAX])
_UPPER = np.array([A_MAX, W_MAX])
_MAX_DAMPING = 1e10


class SolverConfig(BaseModel):
    heading_weight: float = Field(default=2.0, gt=0)  # m/rad
    speed_weight: float = Field(default=0.5, gt=0)  # m*s/m
    fd_step: float = Field(default=1e-5, gt=0)
    damping: float = Field(default=1e-3, gt=0)
    max_iters: int = Field(default=50, ge=0)
    tol: float = Field(default=1e-10, ge=0)


DEFAULT_SOLVER = SolverConfig()


class TokenizedTrack(BaseModel):
    tokens: List[ActionToken]
    ctl_states: List[AgentState]
    residuals: List[float]

    @property
    def flat_tokens(self) -> List[int]:
        return [token.flat for token in self.tokens]

    @property
    def mean_residual(self) -> float:
        return float(np.mean(self.residuals)) if self.residuals else 0.0


def init_estimate(s0: AgentState, s1: AgentState, dt: float) -> ControlAction:
    """Finite-difference warm start for one transition"""
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    return ControlAction(a=(s1.v - s0.v) / dt, w=wrap_angle(s1.theta - s0.theta) / dt)


def _as_mask(valid: Optional[Sequence[bool]], k: int) -> np.ndarray:
    if valid is None:
        return np.ones(k, dtype=bool)
    return np.asarray(valid, dtype=bool)


def _batch_residuals(
    s_init: np.ndarray,
    u_flat: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    dt: float,
    config: SolverConfig,
) -> np.ndarray:
    """Residual rows for a batch of candidate windows.

    u_flat has shape (P, 2k); the result has shape (P, 4k) ordered
    [dx, dy, L_theta*dtheta, L_v*dv] per step. Masked steps contribute zeros.
    """
    n_candidates = u_flat.shape[0]
    k = targets.shape[0]
    state = np.broadcast_to(s_init, (n_candidates, 4))
    rows = np.zeros((n_candidates, k, 4))
    for j in range(k):
        state = CTRA.step_batch(state, u_flat[:, 2 * j : 2 * j + 2], dt)
        if not mask[j]:
            continue
        diff = state - targets[j]
        rows[:, j, 0] = diff[:, 0]
        rows[:, j, 1] = diff[:, 1]
        rows[:, j, 2] = config.heading_weight * wrap_angle_array(diff[:, 2])
        rows[:, j, 3] = config.speed_weight * diff[:, 3]
    return rows.reshape(n_candidates, 4 * k)


def _window_arrays(
    s_init: AgentState, targets: Sequence[AgentState], valid: Optional[Sequence[bool]]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(targets) == 0:
        raise InvalidArgumentError("window needs at least one target state")
    target_arr = np.stack([target.to_array() for target in targets])
    mask = _as_mask(valid, len(targets))
    if mask.shape[0] != len(targets):
        raise InvalidArgumentError("validity mask length must match the window")
    return s_init.to_array(), target_arr, mask


def window_cost(
    s_init: AgentState,
    u_seq: Sequence[ControlAction],
    targets: Sequence[AgentState],
    dt: float,
    valid: Optional[Sequence[bool]] = None,
    config: SolverConfig = DEFAULT_SOLVER,
) -> float:
    """Weighted squared tracking error of a window chained from s_init"""
    if len(u_seq) != len(targets):
        raise InvalidArgumentError("one action per target state is required")
    s_arr, target_arr, mask = _window_arrays(s_init, targets, valid)
    u_flat = np.concatenate([u.to_array() for u in u_seq])[None, :]
    residual = _batch_residuals(s_arr, u_flat, target_arr, mask, dt, config)[0]
    return float(residual @ residual)


def _solve(
    s_arr: np.ndarray,
    target_arr: np.ndarray,
    mask: np.ndarray,
    u0: np.ndarray,
    dt: float,
    config: SolverConfig,
) -> Tuple[np.ndarray, float, int]:
    k = target_arr.shape[0]
    n = 2 * k
    lower = np.tile(_LOWER, k)
    upper = np.tile(_UPPER, k)

    def residual(z: np.ndarray) -> np.ndarray:
        return _batch_residuals(s_arr, z[None, :], target_arr, mask, dt, config)[0]

    z = np.clip(u0, lower, upper)
    r = residual(z)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise TokenizerError("window cost is not finite at the initial guess")

    damping = config.damping
    iterations = 0
    eye = np.eye(n)
    while iterations < config.max_iters and cost > 0.0:
        iterations += 1
        # central differences, all 2n perturbations evaluated in one batch
        perturbed = np.concatenate([z + config.fd_step * eye, z - config.fd_step * eye])
        rows = _batch_residuals(s_arr, perturbed, target_arr, mask, dt, config)
        jac = ((rows[:n] - rows[n:]) / (2.0 * config.fd_step)).T
        grad = jac.T @ r
        hess = jac.T @ jac

        # variables pinned at a bound with the descent direction pointing out stay fixed
        pinned = ((z >= upper) & (grad < 0)) | ((z <= lower) & (grad > 0))
        free = ~pinned
        if not free.any():
            break

        accepted = False
        while damping <= _MAX_DAMPING:
            step = np.zeros(n)
            system = hess[np.ix_(free, free)] + damping * np.eye(int(free.sum()))
            step[free] = np.linalg.solve(system, -grad[free])
            candidate = np.clip(z + step, lower, upper)
            r_new = residual(candidate)
            cost_new = float(r_new @ r_new)
            if not np.isfinite(cost_new):
                raise TokenizerError("window cost became non-finite during the solve")
            if cost_new < cost:
                accepted = True
                damping = max(damping / 10.0, 1e-12)
                break
            damping *= 10.0
        if not accepted:
            break
        decrease = (cost - cost_new) / cost
        z, r, cost = candidate, r_new, cost_new
        if decrease < config.tol:
            break
    return z, cost, iterations


def solve_window(
    s_init: AgentState,
    targets: Sequence[AgentState],
    u_init: Sequence[ControlAction],
    dt: float,
    valid: Optional[Sequence[bool]] = None,
    config: SolverConfig = DEFAULT_SOLVER,
) -> List[ControlAction]:
    """Fit k continuous actions to k target states (bounded, damped Gauss-Newton)"""
    if len(u_init) != len(targets):
        raise InvalidArgumentError("one initial action per target state is required")
    s_arr, target_arr, mask = _window_arrays(s_init, targets, valid)
    u0 = np.concatenate([u.to_array() for u in u_init])
    z, _, _ = _solve(s_arr, target_arr, mask, u0, dt, config)
    return [ControlAction(a=float(z[2 * j]), w=float(z[2 * j + 1])) for j in range(len(targets))]


def _step_residual(predicted: AgentState, target: AgentState, config: SolverConfig) -> float:
    dx = predicted.x - target.x
    dy = predicted.y - target.y
    dtheta = config.heading_weight * wrap_angle(predicted.theta - target.theta)
    dv = config.speed_weight * (predicted.v - target.v)
    return dx * dx + dy * dy + dtheta * dtheta + dv * dv


def tokenize_track(
    states: Sequence[AgentState],
    dt: float,
    k: int = DEFAULT_WINDOW,
    valid: Optional[Sequence[bool]] = None,
    config: SolverConfig = DEFAULT_SOLVER,
) -> TokenizedTrack:
    """Recover the token sequence of one logged track"""
    if len(states) < 2:
        raise TokenizerError("a track needs at least two states to tokenize")
    if k < 1:
        raise InvalidArgumentError(f"window length must be >= 1, got {k}")
    mask = _as_mask(valid, len(states))
    if mask.shape[0] != len(states):
        raise InvalidArgumentError("validity mask length must match the state count")
    if not mask[0]:
        raise TokenizerError("the initial state of a track must be valid")

    n_steps = len(states) - 1
    ctl_states: List[AgentState] = [states[0]]
    tokens: List[ActionToken] = []
    residuals: List[float] = []
    for t in range(n_steps):
        width = min(k, n_steps - t)
        window_mask = mask[t + 1 : t + 1 + width]
        if not window_mask.any():
            # nothing observed ahead: hold the last committed action
            token = tokens[-1] if tokens else ZERO_TOKEN
            nxt = ctra_step(ctl_states[-1], dequantize(token), dt)
            tokens.append(token)
            ctl_states.append(nxt)
            residuals.append(0.0)
            continue

        targets = states[t + 1 : t + 1 + width]
        guesses = []
        for j in range(width):
            source = ctl_states[-1] if j == 0 else states[t + j]
            source_ok = j == 0 or mask[t + j]
            if source_ok and mask[t + j + 1]:
                guesses.append(init_estimate(source, states[t + j + 1], dt))
            else:
                guesses.append(ControlAction(a=0.0, w=0.0))
        s_arr, target_arr, _ = _window_arrays(ctl_states[-1], targets, window_mask)
        u0 = np.concatenate([u.to_array() for u in guesses])
        z, _, _ = _solve(s_arr, target_arr, window_mask, u0, dt, config)

        token = nearest_token(ControlAction(a=float(z[0]), w=float(z[1])))
        nxt = ctra_step(ctl_states[-1], dequantize(token), dt)
        tokens.append(token)
        ctl_states.append(nxt)
        residuals.append(_step_residual(nxt, states[t + 1], config) if mask[t + 1] else 0.0)
    return TokenizedTrack(tokens=tokens, ctl_states=ctl_states, residuals=residuals)


def detokenize(initial: AgentState, tokens: Iterable[ActionToken], dt: float) -> List[AgentState]:
    """States reached by replaying tokens from the initial state"""
    states = [initial]
    for token in tokens:
        states.append(ctra_step(states[-1], dequantize(token), dt))
    return states[1:]


def _tokenize_job(job: Tuple[Track, float, int, SolverConfig]) -> TokenizedTrack:
    track, dt, k, config = job
    return tokenize_track(track.states, dt, k=k, valid=track.valid, config=config)


def tokenize_scenario(
    scenario: Scenario,
    k: int = DEFAULT_WINDOW,
    workers: int = 1,
    config: SolverConfig = DEFAULT_SOLVER,
) -> Dict[int, TokenizedTrack]:
    """Tokenize every track whose first state is valid; results keep track order"""
    tracks = [track for track in scenario.tracks if track.valid and track.valid[0]]
    skipped = len(scenario.tracks) - len(tracks)
    if skipped:
        logger.debug("scenario %s: %d track(s) start invalid and are not tokenized", scenario.scenario_id, skipped)
    jobs = [(track, scenario.dt, k, config) for track in tracks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_tokenize_job, jobs))
    else:
        results = [_tokenize_job(job) for job in jobs]
    return {track.agent_id: result for track, result in zip(tracks, results)}


def to_record(scenario: Scenario, agent_id: int, tokenized: TokenizedTrack) -> TokenRecord:
    initial = tokenized.ctl_states[0]
    return TokenRecord(
        scenario_id=scenario.scenario_id,
        agent_id=agent_id,
        dt=scenario.dt,
        initial_state=(initial.x, initial.y, initial.theta, initial.v),
        tokens=tokenized.flat_tokens,
        mean_residual=tokenized.mean_residual,
        max_residual=max(tokenized.residuals, default=0.0),
    )


def save_token_dataset(records: Iterable[TokenRecord], path: Union[str, Path]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json() + "\n")
            count += 1
    logger.info("wrote %d token records to %s", count, path)
    return count


def load_token_dataset(path: Union[str, Path]) -> List[TokenRecord]:
    path = Path(path)
    records: List[TokenRecord] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(TokenRecord.model_validate_json(line))
            except ValidationError as exc:
                raise ScenarioParseError(str(path), line_no, exc.errors()[0].get("msg", "invalid record")) from exc
    return records


def recovery_rate(records: Iterable[TokenRecord], scenarios: Dict[str, Scenario]) -> Optional[float]:
    """Fraction of tokens equal to generator ground truth, None when no truth is known"""
    matched = 0
    total = 0
    for record in records:
        scenario = scenarios.get(record.scenario_id)
        if scenario is None:
            continue
        track = scenario.track(record.agent_id)
        if track.gt_tokens is None:
            continue
        truth = track.gt_tokens[: len(record.tokens)]
        matched += sum(int(a == b) for a, b in zip(record.tokens, truth))
        total += len(truth)
    return matched / total if total else None


def tokenize_all(
    scenarios: Sequence[Scenario],
    k: int = DEFAULT_WINDOW,
    workers: int = 1,
    config: SolverConfig = DEFAULT_SOLVER,
) -> List[TokenRecord]:
    records: List[TokenRecord] = []
    for scenario in tqdm(scenarios, desc="tokenize", disable=not progress_enabled()):
        for agent_id, tokenized in tokenize_scenario(scenario, k=k, workers=workers, config=config).items():
            records.append(to_record(scenario, agent_id, tokenized))
    return records


def summarize_records(records: Sequence[TokenRecord]) -> Dict[str, float]:
    residuals = [record.mean_residual for record in records]
    peaks = [record.max_residual for record in records]
    return {
        "tracks": len(records),
        "tokens": int(sum(len(record.tokens) for record in records)),
        "mean_residual": float(np.mean(residuals)) if residuals else 0.0,
        "max_residual": float(np.max(peaks)) if peaks else 0.0,
    }
