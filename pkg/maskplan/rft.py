"""
Reinforcement fine-tuning of both experts.

The generation expert is trained with a group-relative clipped surrogate
over sampled rollouts. The refinement expert is trained on the same group
with a hybrid objective: an offline term built from pairwise reward
differences inside the group, and an online term built from its own
sampled refinements.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .codec import TrajectoryCodec
from .config import RftConfig, SimConfig
from .diffusion import SamplePath, make_schedule, refine_with_logprobs, sample
from .models import CodecError, RewardBreakdown, RftError, Scene, TokenSequence
from .planner import ExpertId, PlannerModel
from .sim import scene_context, score
from .tensor import AdamW, ParameterLabel, Tensor

logger = logging.getLogger(__name__)

_group_ids = itertools.count(1)

GENERATION_LABELS = (ParameterLabel.SHARED, ParameterLabel.GENERATION_EXPERT)
REFINEMENT_LABELS = (ParameterLabel.REFINEMENT_EXPERT,)


class TokenScorer:
    """Decode a response and score it against a scene; decode failures score 0."""

    def __init__(self, codec: TrajectoryCodec, sim_config: Optional[SimConfig] = None):
        self.codec = codec
        self.sim_config = sim_config or SimConfig()

    def context(self, scene: Scene) -> TokenSequence:
        return scene_context(scene, self.codec, self.sim_config)

    def breakdown(self, scene: Scene, tokens) -> RewardBreakdown:
        try:
            trajectory = self.codec.decode_trajectory(tokens)
        except CodecError:
            return RewardBreakdown(malformed=True)
        return score(scene, trajectory, self.sim_config)

    def reward(self, scene: Scene, tokens) -> float:
        return self.breakdown(scene, tokens).pdms


@dataclass
class RolloutGroup:
    """G sampled responses for one scene, with per-snapshot sampling-time log-probs."""
    scene: Scene
    context: TokenSequence
    trajectories: List[np.ndarray]
    paths: List[SamplePath]
    rewards: np.ndarray
    old_logprobs: List[List[np.ndarray]]
    temperature: float
    uid: int = field(default_factory=lambda: next(_group_ids))

    @property
    def size(self) -> int:
        return len(self.trajectories)


@dataclass
class OfflineAdvantage:
    """matrix[i, j] = r_i - r_j; input x_j, target x_i."""
    matrix: np.ndarray
    group_uid: Optional[int] = None
    old_logprobs: Optional[np.ndarray] = None  # (G, G, L): target i given input j


@dataclass
class OnlineAdvantage:
    """matrix[i, k] = refined reward r_ik - r_i."""
    matrix: np.ndarray
    refined: List[List[np.ndarray]]
    rewards: np.ndarray
    old_logprobs: np.ndarray  # (G, K, L)
    group_uid: Optional[int] = None


def tempered_logprobs(logits: np.ndarray, temperature: float) -> np.ndarray:
    return T.log_softmax_array(logits * (1.0 / temperature))


def _tempered_log_softmax(logits: Tensor, temperature: float) -> Tensor:
    return T.log_softmax(T.scale(logits, 1.0 / temperature))


# --- rollouts and advantages ---------------------------------------------

def rollout_group(model: PlannerModel, scene: Scene, cfg: RftConfig, rng: np.random.Generator,
                  scorer: TokenScorer, context: Optional[TokenSequence] = None,
                  schedule_kind: str = "cosine") -> RolloutGroup:
    """Sample G responses with snapshot stride tau and record sampling-time log-probs."""
    context = context or scorer.context(scene)
    schedule = make_schedule(cfg.steps, model.config.response_len, schedule_kind)
    trajectories, paths, rewards, old = [], [], [], []
    for _ in range(cfg.group_size):
        result = sample(context, model, schedule, cfg.temperature, rng, tau=cfg.tau,
                        expert=ExpertId.GENERATION)
        trajectories.append(result.tokens)
        paths.append(result.path)
        rewards.append(scorer.reward(scene, result.tokens))
        per_snapshot = []
        for j in range(result.path.transitions):
            eligible = result.path.eligible(j)
            if eligible.size == 0:
                per_snapshot.append(np.zeros(0))
                continue
            logits = model.logits(context.with_response(result.path.snapshots[j]), ExpertId.GENERATION)
            logp = tempered_logprobs(logits, cfg.temperature)
            per_snapshot.append(logp[eligible, result.path.snapshots[j + 1][eligible]])
        old.append(per_snapshot)
    return RolloutGroup(scene=scene, context=context, trajectories=trajectories, paths=paths,
                        rewards=np.asarray(rewards, dtype=np.float64), old_logprobs=old,
                        temperature=cfg.temperature)


def grpo_advantages(rewards: Sequence[float]) -> np.ndarray:
    """r_i - mean(r), without std normalization."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] < 2:
        raise RftError(f"Group-relative advantages need at least 2 rewards, got {rewards.shape[0]}")
    return rewards - rewards.mean()


def offline_advantages(rewards: Sequence[float], group_uid: Optional[int] = None) -> OfflineAdvantage:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] < 2:
        raise RftError(f"Offline advantages need at least 2 rewards, got {rewards.shape[0]}")
    return OfflineAdvantage(matrix=rewards[:, None] - rewards[None, :], group_uid=group_uid)


def offline_logprobs(model: PlannerModel, group: RolloutGroup, temperature: float) -> np.ndarray:
    """Refinement-expert log-prob of every x_i's tokens given every x_j, shape (G, G, L)."""
    g = group.size
    length = model.config.response_len
    rows = np.arange(length)
    out = np.zeros((g, g, length))
    for j, source in enumerate(group.trajectories):
        logits = model.logits(group.context.with_response(source), ExpertId.REFINEMENT)
        logp = tempered_logprobs(logits, temperature)
        for i, target in enumerate(group.trajectories):
            out[i, j] = logp[rows, target]
    return out


def online_refine(model: PlannerModel, group: RolloutGroup, samples: int, temperature: float,
                  rng: np.random.Generator, scorer: TokenScorer) -> OnlineAdvantage:
    """K sampled refinements per trajectory, scored against the trajectory's own reward."""
    if not model.has_refinement:
        raise RftError("online_refine needs a model with refinement blocks")
    g, length = group.size, model.config.response_len
    refined: List[List[np.ndarray]] = []
    rewards = np.zeros((g, samples))
    old = np.zeros((g, samples, length))
    for i, anchor in enumerate(group.trajectories):
        row = []
        for k in range(samples):
            tokens, logp = refine_with_logprobs(anchor, group.context, model, mode="sample",
                                                temperature=temperature, rng=rng)
            row.append(tokens)
            rewards[i, k] = scorer.reward(group.scene, tokens)
            old[i, k] = logp
        refined.append(row)
    return OnlineAdvantage(matrix=rewards - group.rewards[:, None], refined=refined, rewards=rewards,
                           old_logprobs=old, group_uid=group.uid)


# --- objectives ----------------------------------------------------------

def clipped_surrogate(ratio: Tensor, advantage: float, clip_eps: float) -> Tensor:
    """Element-wise min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)."""
    return T.minimum(T.scale(ratio, advantage),
                     T.scale(T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantage))


def categorical_kl(logp: Tensor, ref_logp: np.ndarray) -> Tensor:
    """Sum over rows of KL(p || ref) for row-wise categorical distributions."""
    return T.reduce_sum(T.mul(T.exp(logp), T.sub(logp, T.constant(ref_logp))))


@dataclass
class LossStats:
    clip_frac: float = 0.0
    kl: float = 0.0
    tokens: int = 0
    objective: float = 0.0


def grpo_loss(model: PlannerModel, ref_model: PlannerModel, group: RolloutGroup,
              cfg: RftConfig) -> Tuple[Tensor, LossStats]:
    """Negated clipped surrogate minus the KL penalty, over eligible tokens only."""
    if group.size < 2:
        raise RftError("grpo_loss needs a group of at least 2 rollouts")
    advantages = grpo_advantages(group.rewards)
    objective_terms: List[Tensor] = []
    kl_terms: List[Tensor] = []
    clipped = tokens = 0
    for i, path in enumerate(group.paths):
        per_traj: List[Tensor] = []
        count = 0
        for j in range(path.transitions):
            eligible = path.eligible(j)
            if eligible.size == 0:
                logger.debug("Rollout %d snapshot %d has no eligible tokens", i, j)
                continue
            seq = group.context.with_response(path.snapshots[j])
            logp = T.index_select(_tempered_log_softmax(model.forward(seq, ExpertId.GENERATION),
                                                         group.temperature), eligible)
            chosen = path.snapshots[j + 1][eligible]
            new = T.pick(logp, np.arange(eligible.size), chosen)
            ratio = T.exp(T.sub(new, T.constant(group.old_logprobs[i][j])))
            per_traj.append(T.reduce_sum(clipped_surrogate(ratio, float(advantages[i]), cfg.clip_eps)))
            clipped += int(np.sum(np.abs(ratio.data - 1.0) > cfg.clip_eps))
            count += eligible.size
            if cfg.kl_beta > 0:
                ref_logits = ref_model.logits(seq, ExpertId.GENERATION)[eligible]
                kl_terms.append(categorical_kl(logp, tempered_logprobs(ref_logits, group.temperature)))
        if per_traj:
            objective_terms.append(T.scale(T.add_n(per_traj), 1.0 / count))
        tokens += count
    if not objective_terms:
        raise RftError("grpo_loss: no eligible tokens in the whole group")
    objective = T.scale(T.add_n(objective_terms), 1.0 / group.size)
    loss = T.scale(objective, -1.0)
    kl_value = 0.0
    if kl_terms:
        kl = T.scale(T.add_n(kl_terms), 1.0 / tokens)
        kl_value = kl.item()
        loss = T.add(loss, T.scale(kl, cfg.kl_beta))
    return loss, LossStats(clip_frac=clipped / max(tokens, 1), kl=kl_value, tokens=tokens,
                           objective=objective.item())


def hybrid_objective(offline_new: Optional[Tensor], offline_old: Optional[np.ndarray],
                     offline_adv: Optional[np.ndarray], online_new: Optional[Tensor],
                     online_old: Optional[np.ndarray], online_adv: Optional[np.ndarray],
                     clip_eps: Optional[float] = None) -> Tensor:
    """
    Offline plus online ratio-weighted advantages.

    ``*_new`` are log-prob tensors shaped like the flattened ``*_old``
    arrays: offline (G, G, L) ordered (target i, input j, token), online
    (G, K, L) ordered (anchor i, sample k, token). Each term is averaged
    over tokens and over its pairs. ``clip_eps`` enables the clipped form.
    """
    terms: List[Tensor] = []
    for new, old, adv in ((offline_new, offline_old, offline_adv), (online_new, online_old, online_adv)):
        if new is None:
            continue
        old = np.asarray(old, dtype=np.float64)
        pairs, length = int(np.prod(old.shape[:2])), old.shape[2]
        weights = np.repeat(np.asarray(adv, dtype=np.float64).reshape(-1), length)
        ratio = T.exp(T.sub(new, T.constant(old.reshape(-1))))
        weighted = T.mul(ratio, T.constant(weights))
        if clip_eps is not None:
            bounded = T.mul(T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), T.constant(weights))
            weighted = T.minimum(weighted, bounded)
        terms.append(T.scale(T.reduce_sum(weighted), 1.0 / (pairs * length)))
    if not terms:
        raise RftError("hybrid objective needs the offline or the online term")
    return T.add_n(terms)


def hybrid_loss(model: PlannerModel, group: RolloutGroup, off: Optional[OfflineAdvantage],
                on: Optional[OnlineAdvantage], cfg: RftConfig) -> Tensor:
    """Negated hybrid objective through the refinement expert; no KL term."""
    for adv in (off, on):
        if adv is not None and adv.group_uid is not None and adv.group_uid != group.uid:
            raise RftError(f"Advantages from group {adv.group_uid} applied to group {group.uid}")
    if off is None and on is None:
        raise RftError("hybrid_loss needs offline or online advantages")
    temperature = cfg.refine_temperature
    length = model.config.response_len
    rows = np.arange(length)
    g = group.size

    # one refinement forward per trajectory serves both terms as the input x_j / x_i
    offline_grid: List[List[Optional[Tensor]]] = [[None] * g for _ in range(g)]
    online_rows: List[Tensor] = []
    current_offline = np.zeros((g, g, length))
    for j, source in enumerate(group.trajectories):
        logp = _tempered_log_softmax(model.forward(group.context.with_response(source), ExpertId.REFINEMENT),
                                     temperature)
        if off is not None:
            for i, target in enumerate(group.trajectories):
                picked = T.pick(logp, rows, target)
                current_offline[i, j] = picked.data
                offline_grid[i][j] = picked
        if on is not None:
            for refined in on.refined[j]:
                online_rows.append(T.pick(logp, rows, refined))

    offline_new = offline_old = offline_adv = None
    if off is not None:
        offline_new = T.concat([picked for row in offline_grid for picked in row], axis=0)
        offline_old = off.old_logprobs if off.old_logprobs is not None else current_offline
        offline_adv = off.matrix
    online_new = online_old = online_adv = None
    if on is not None:
        online_new = T.concat(online_rows, axis=0)
        online_old = on.old_logprobs
        online_adv = on.matrix
    objective = hybrid_objective(offline_new, offline_old, offline_adv, online_new, online_old, online_adv,
                                 clip_eps=cfg.clip_eps if cfg.clip_hybrid else None)
    return T.scale(objective, -1.0)


# --- trainer -------------------------------------------------------------

class RftTrainer:
    """Synchronous generator/refiner updates over batches of scenes."""

    def __init__(self, model: PlannerModel, cfg: RftConfig, scorer: TokenScorer,
                 optimizer: Optional[AdamW] = None, schedule_kind: str = "cosine"):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.scorer = scorer
        self.optimizer = optimizer or AdamW()
        self.schedule_kind = schedule_kind
        self.ref_model = model.clone(frozen=True)
        self.steps_done = 0
        self._contexts: Dict[Tuple[int, str, float], TokenSequence] = {}

    def _context(self, scene: Scene) -> TokenSequence:
        # a scene is fully determined by its seed, difficulty and horizon under one sim config
        key = (scene.seed, scene.difficulty, scene.horizon)
        if key not in self._contexts:
            self._contexts[key] = self.scorer.context(scene)
        return self._contexts[key]

    def refresh_reference(self) -> None:
        self.ref_model = self.model.clone(frozen=True)

    def _refinement_enabled(self) -> bool:
        return self.model.has_refinement and (self.cfg.use_offline or self.cfg.use_online)

    def rft_step(self, scenes: Sequence[Scene], rng: np.random.Generator) -> Dict[str, float]:
        """One pass over a batch of scenes; returns averaged metrics."""
        cfg = self.cfg
        partition = self.model.parameter_partition()
        rows: List[Dict[str, float]] = []
        for scene in scenes:
            group = rollout_group(self.model, scene, cfg, rng, self.scorer, context=self._context(scene),
                                  schedule_kind=self.schedule_kind)
            record = {"mean_r": float(group.rewards.mean()), "mean_r_refined": math.nan,
                      "clip_frac": 0.0, "kl": 0.0, "grpo_loss": 0.0, "hybrid_loss": 0.0}
            if cfg.use_grpo:
                for _ in range(cfg.updates_per_group):
                    loss, stats = grpo_loss(self.model, self.ref_model, group, cfg)
                    T.backward(loss)
                    self.optimizer.optimizer_step(self.model.params, partition, GENERATION_LABELS, cfg.lr)
                record.update(clip_frac=stats.clip_frac, kl=stats.kl, grpo_loss=loss.item())

            if self._refinement_enabled():
                off = on = None
                if cfg.use_offline:
                    off = offline_advantages(group.rewards, group.uid)
                    off.old_logprobs = offline_logprobs(self.model, group, cfg.refine_temperature)
                if cfg.use_online:
                    on = online_refine(self.model, group, cfg.online_samples, cfg.refine_temperature,
                                       rng, self.scorer)
                    record["mean_r_refined"] = float(on.rewards.mean())
                for _ in range(cfg.updates_per_group):
                    loss = hybrid_loss(self.model, group, off, on, cfg)
                    T.backward(loss)
                    self.optimizer.optimizer_step(self.model.params, partition, REFINEMENT_LABELS,
                                                  cfg.refine_lr)
                record["hybrid_loss"] = loss.item()
            rows.append(record)

        self.steps_done += 1
        if cfg.ref_refresh_steps and self.steps_done % cfg.ref_refresh_steps == 0:
            self.refresh_reference()
            logger.debug("Reference policy refreshed at step %d", self.steps_done)
        metrics = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]} if rows else {}
        metrics["step"] = self.steps_done
        return metrics
