"""
Masked-diffusion objective, unmasking sampler and the refinement pass.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .codec import MASK_ID, TrajectoryCodec
from .models import DiffusionError, TokenSequence
from .planner import ExpertId, PlannerModel
from .tensor import Tensor

COSINE = "cosine"
UNIFORM = "uniform"


@dataclass
class Schedule:
    """Per-step unmask counts u_1..u_s."""
    steps: int
    kind: str
    counts: List[int]

    def __post_init__(self):
        if len(self.counts) != self.steps or any(c < 0 for c in self.counts):
            raise DiffusionError(f"Invalid schedule counts {self.counts} for {self.steps} steps")

    @property
    def length(self) -> int:
        return int(sum(self.counts))

    def remaining_after(self, step: int) -> int:
        return self.length - int(sum(self.counts[:step]))


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def cosine_counts(steps: int, length: int) -> List[int]:
    """Remaining-mask targets m_t = round(L cos(pi/2 t/s)); u_t = m_{t-1} - m_t."""
    if steps < 1 or length < 1:
        raise DiffusionError(f"cosine schedule needs steps >= 1 and length >= 1, got {steps}, {length}")
    remaining = [_round_half_up(length * math.cos(math.pi / 2.0 * t / steps)) for t in range(steps + 1)]
    remaining[0] = length
    remaining[-1] = 0
    for t in range(1, steps + 1):
        remaining[t] = min(remaining[t], remaining[t - 1])
    counts = [remaining[t - 1] - remaining[t] for t in range(1, steps + 1)]
    # any deficit goes to the last step so sampling always ends fully unmasked
    counts[-1] += length - sum(counts)
    return counts


def uniform_counts(steps: int, length: int) -> List[int]:
    if steps < 1 or length < 1:
        raise DiffusionError(f"uniform schedule needs steps >= 1 and length >= 1, got {steps}, {length}")
    base, extra = divmod(length, steps)
    return [base + (1 if t < extra else 0) for t in range(steps)]


def make_schedule(steps: int, length: int, kind: str = COSINE) -> Schedule:
    if kind == COSINE:
        return Schedule(steps, kind, cosine_counts(steps, length))
    if kind == UNIFORM:
        return Schedule(steps, kind, uniform_counts(steps, length))
    raise DiffusionError(f"Unknown schedule kind: {kind}")


def snapshot_steps(steps: int, tau: int) -> List[int]:
    """Steps after which a snapshot is kept: tau, 2tau, ..., with the last window ending at s."""
    if not 1 <= tau <= steps:
        raise DiffusionError(f"tau {tau} must lie in [1, {steps}]")
    windows = steps // tau
    return [j * tau for j in range(1, windows)] + [steps]


@dataclass
class SamplePath:
    """Partial response states x^0 (all masked) .. x^{floor(s/tau)} (no masks)."""
    snapshots: List[np.ndarray]
    tau: int

    @property
    def transitions(self) -> int:
        return len(self.snapshots) - 1

    def eligible(self, j: int) -> np.ndarray:
        """Positions masked in x^j and decoded in x^{j+1}."""
        before, after = self.snapshots[j], self.snapshots[j + 1]
        return np.flatnonzero((before == MASK_ID) & (after != MASK_ID))


@dataclass
class SampleResult:
    tokens: np.ndarray
    path: SamplePath
    history: List[np.ndarray] = field(default_factory=list)


def corrupt(r0, t: float, rng: np.random.Generator) -> np.ndarray:
    """Mask each position independently with probability t; never return an unmasked sequence."""
    if not 0.0 < t <= 1.0:
        raise DiffusionError(f"Mask probability {t} outside (0, 1]")
    r0 = np.asarray(r0, dtype=np.int64)
    while True:
        masked = rng.random(r0.shape[0]) < t
        if masked.any():
            break
    out = r0.copy()
    out[masked] = MASK_ID
    return out


def sft_loss(logits: Tensor, r0, r_t, t: float) -> Tensor:
    """-(1/t) * sum over masked positions of log p(r0_i | context, r_t)."""
    r0 = np.asarray(r0, dtype=np.int64)
    r_t = np.asarray(r_t, dtype=np.int64)
    if logits.shape[0] != r0.shape[0] or r0.shape != r_t.shape:
        raise DiffusionError(f"sft_loss: logits {logits.shape} with response lengths {r0.shape}/{r_t.shape}")
    masked = r_t == MASK_ID
    if not masked.any():
        raise DiffusionError("sft_loss: empty mask set")
    return T.cross_entropy_with_logits(logits, r0, weights=masked.astype(np.float64) / t)


def refine_sft_pair(r0, rng: np.random.Generator, corruption_rate: float,
                    codec: TrajectoryCodec) -> Tuple[np.ndarray, np.ndarray]:
    """Clean target plus an unmasked input with random in-sub-vocabulary substitutions."""
    if not 0.0 <= corruption_rate < 1.0:
        raise DiffusionError(f"corruption_rate {corruption_rate} outside [0, 1)")
    target = np.asarray(r0, dtype=np.int64).copy()
    noisy = target.copy()
    hits = rng.random(target.shape[0]) < corruption_rate
    for position in np.flatnonzero(hits):
        noisy[position] = codec.random_token(int(position), rng)
    return noisy, target


def outlier_corruption(r0, rng: np.random.Generator, codec: TrajectoryCodec) -> Tuple[np.ndarray, int]:
    """Replace one uniformly chosen position with a different token from its sub-vocabulary."""
    tokens = np.asarray(r0, dtype=np.int64).copy()
    if tokens.shape[0] == 0:
        raise DiffusionError("cannot corrupt an empty response")
    position = int(rng.integers(tokens.shape[0]))
    replacement = tokens[position]
    while replacement == tokens[position]:
        replacement = codec.random_token(position, rng)
    tokens[position] = replacement
    return tokens, position


def refine_loss(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy over every response position."""
    target = np.asarray(target, dtype=np.int64)
    return T.scale(T.cross_entropy_with_logits(logits, target), 1.0 / target.shape[0])


def _draw(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Sample one token per row; confidence is the probability of the drawn token."""
    rows = np.arange(logits.shape[0])
    if temperature <= 0.0:
        tokens = logits.argmax(axis=1)
        probs = T.softmax_array(logits)
        return tokens, probs[rows, tokens]
    probs = T.softmax_array(logits * (1.0 / temperature))
    u = 1.0 - rng.random(logits.shape[0])
    cdf = np.cumsum(probs, axis=1)
    tokens = np.minimum((cdf < u[:, None]).sum(axis=1), logits.shape[1] - 1)
    return tokens, probs[rows, tokens]


def _most_confident(confidence: np.ndarray, positions: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` highest confidences; ties go to the lower position."""
    order = np.lexsort((positions, -confidence))
    return order[:count]


def sample(context: TokenSequence, model: PlannerModel, schedule: Schedule, temperature: float,
           rng: np.random.Generator, tau: int = 1, expert: ExpertId = ExpertId.GENERATION,
           keep_history: bool = False) -> SampleResult:
    """Iteratively unmask a fully masked response following the schedule."""
    length = model.config.response_len
    if schedule.length != length:
        raise DiffusionError(f"Schedule unmasks {schedule.length} tokens but the response has {length}")
    marks = set(snapshot_steps(schedule.steps, tau))
    response = np.full(length, MASK_ID, dtype=np.int64)
    snapshots = [response.copy()]
    history = [response.copy()] if keep_history else []
    for step, count in enumerate(schedule.counts, start=1):
        masked = np.flatnonzero(response == MASK_ID)
        if count > 0 and masked.size:
            logits = model.logits(context.with_response(response), expert)[masked]
            tokens, confidence = _draw(logits, temperature, rng)
            keep = _most_confident(confidence, masked, min(count, masked.size))
            response[masked[keep]] = tokens[keep]
        if keep_history:
            history.append(response.copy())
        if step in marks:
            snapshots.append(response.copy())
    return SampleResult(tokens=response, path=SamplePath(snapshots, tau), history=history)


def refine_with_logprobs(tokens, context: TokenSequence, model: PlannerModel, mode: str = "argmax",
                         temperature: float = 1.0,
                         rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """One refinement-expert pass; returns revised tokens and their log-probabilities."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if (tokens == MASK_ID).any():
        raise DiffusionError("refine: input still contains [MASK] tokens")
    logits = model.logits(context.with_response(tokens), ExpertId.REFINEMENT)
    rows = np.arange(tokens.shape[0])
    if mode == "argmax":
        revised = logits.argmax(axis=1)
        logp = T.log_softmax_array(logits)
    elif mode == "sample":
        if rng is None:
            raise DiffusionError("refine: sample mode needs an rng")
        revised, _ = _draw(logits, temperature, rng)
        logp = T.log_softmax_array(logits * (1.0 / temperature)) if temperature > 0 else T.log_softmax_array(logits)
    else:
        raise DiffusionError(f"Unknown refine mode: {mode}")
    return revised.astype(np.int64), logp[rows, revised]


def refine(tokens, context: TokenSequence, model: PlannerModel, mode: str = "argmax",
           temperature: float = 1.0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    revised, _ = refine_with_logprobs(tokens, context, model, mode, temperature, rng)
    return revised
