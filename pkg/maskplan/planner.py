"""
Bidirectional transformer planner with a block-level mixture of experts.

Embeddings and the first ``n_shared_blocks`` blocks are shared. The last
``n_expert_blocks`` blocks exist twice: the generation tail decodes masked
positions, the refinement tail (a replica made by
``init_refinement_from_generation``) re-emits a fully decoded response.
The caller picks the tail explicitly on every forward call.
"""

import copy
import logging
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .codec import MASK_ID
from .config import ModelConfig
from .models import ModelError, TokenSequence
from .tensor import ParameterLabel, ParameterPartition, Tensor

logger = logging.getLogger(__name__)

SHARED_PREFIX = "shared"
GENERATION_PREFIX = "generation"
REFINEMENT_PREFIX = "refinement"
HEAD_PARAMS = ("head.ln.gamma", "head.ln.beta", "head.weight", "head.bias")
MASK_LOGIT = -1e9


class ExpertId(str, Enum):
    GENERATION = "generation"
    REFINEMENT = "refinement"


def patchify(grid: np.ndarray, patch: int) -> np.ndarray:
    """(C, S, S) grid -> (S/patch)^2 rows of C*patch*patch features, row-major over patches."""
    c, s, s2 = grid.shape
    if s != s2 or s % patch:
        raise ModelError(f"Grid of shape {grid.shape} cannot be split into {patch}x{patch} patches")
    n = s // patch
    return grid.reshape(c, n, patch, n, patch).transpose(1, 3, 0, 2, 4).reshape(n * n, c * patch * patch)


class PlannerModel:
    """Parameters live in ``self.params`` keyed by dotted names."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        if config.vocab_size <= 0 or config.response_len <= 0:
            raise ModelError("ModelConfig.vocab_size and response_len must be resolved before building a model")
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self._refinement_ready = config.n_expert_blocks == 0
        rng = np.random.default_rng(seed)
        self._init_embeddings(rng)
        for i in range(config.n_shared_blocks):
            self._init_block(f"{SHARED_PREFIX}.{i}", rng)
        for i in range(config.n_expert_blocks):
            self._init_block(f"{GENERATION_PREFIX}.{i}", rng)
        self._init_head(rng)

    # -- construction -------------------------------------------------------

    def _normal(self, rng: np.random.Generator, *shape) -> np.ndarray:
        return rng.normal(0.0, self.config.init_std, size=shape)

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = T.parameter(data, name=name)

    def _init_embeddings(self, rng: np.random.Generator) -> None:
        cfg = self.config
        self._add("embed.token", self._normal(rng, cfg.vocab_size, cfg.d_model))
        self._add("embed.position", self._normal(rng, cfg.max_context_len + cfg.response_len, cfg.d_model))
        self._add("embed.patch.weight", self._normal(rng, cfg.patch_dim, cfg.d_model))
        self._add("embed.patch.bias", np.zeros(cfg.d_model))

    def _init_block(self, prefix: str, rng: np.random.Generator) -> None:
        d, ff = self.config.d_model, self.config.ff_dim
        self._add(f"{prefix}.ln1.gamma", np.ones(d))
        self._add(f"{prefix}.ln1.beta", np.zeros(d))
        for proj in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.attn.{proj}", self._normal(rng, d, d))
            self._add(f"{prefix}.attn.b{proj[1]}", np.zeros(d))
        self._add(f"{prefix}.ln2.gamma", np.ones(d))
        self._add(f"{prefix}.ln2.beta", np.zeros(d))
        self._add(f"{prefix}.mlp.w1", self._normal(rng, d, ff))
        self._add(f"{prefix}.mlp.b1", np.zeros(ff))
        self._add(f"{prefix}.mlp.w2", self._normal(rng, ff, d))
        self._add(f"{prefix}.mlp.b2", np.zeros(d))

    def _init_head(self, rng: np.random.Generator) -> None:
        cfg = self.config
        self._add("head.ln.gamma", np.ones(cfg.d_model))
        self._add("head.ln.beta", np.zeros(cfg.d_model))
        self._add("head.weight", self._normal(rng, cfg.d_model, cfg.vocab_size))
        self._add("head.bias", np.zeros(cfg.vocab_size))

    @property
    def has_refinement(self) -> bool:
        return self.config.n_expert_blocks > 0 and self._refinement_ready

    def init_refinement_from_generation(self) -> None:
        """Replicate the generation tail into the refinement tail."""
        for name in list(self.params):
            if name.startswith(GENERATION_PREFIX + "."):
                replica = REFINEMENT_PREFIX + name[len(GENERATION_PREFIX):]
                self.params[replica] = T.parameter(self.params[name].data.copy(), name=replica)
        self._refinement_ready = True
        logger.debug("Refinement tail initialized from %d generation blocks", self.config.n_expert_blocks)

    # -- routing ------------------------------------------------------------

    def route(self, expert: ExpertId) -> List[str]:
        """Block prefixes a forward pass traverses for the given expert."""
        cfg = self.config
        tail = GENERATION_PREFIX
        if expert == ExpertId.REFINEMENT and cfg.n_expert_blocks > 0:
            if not self._refinement_ready:
                raise ModelError("Refinement expert requested before init_refinement_from_generation()")
            tail = REFINEMENT_PREFIX
        return ([f"{SHARED_PREFIX}.{i}" for i in range(cfg.n_shared_blocks)]
                + [f"{tail}.{i}" for i in range(cfg.n_expert_blocks)])

    def parameter_partition(self) -> ParameterPartition:
        labels = {}
        for name in self.params:
            if name.startswith(GENERATION_PREFIX + "."):
                labels[name] = ParameterLabel.GENERATION_EXPERT
            elif name.startswith(REFINEMENT_PREFIX + "."):
                labels[name] = ParameterLabel.REFINEMENT_EXPERT
            else:
                labels[name] = ParameterLabel.SHARED
        return ParameterPartition(labels)

    def num_parameters(self, label: Optional[ParameterLabel] = None) -> int:
        partition = self.parameter_partition()
        return int(sum(p.data.size for name, p in self.params.items()
                       if label is None or partition.labels[name] == label))

    # -- forward ------------------------------------------------------------

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        d, heads = self.config.d_model, self.config.n_heads
        dh = d // heads
        h = T.layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
        q = T.add(T.matmul(h, p[f"{prefix}.attn.wq"]), p[f"{prefix}.attn.bq"])
        k = T.add(T.matmul(h, p[f"{prefix}.attn.wk"]), p[f"{prefix}.attn.bk"])
        v = T.add(T.matmul(h, p[f"{prefix}.attn.wv"]), p[f"{prefix}.attn.bv"])
        outs = []
        for i in range(heads):
            qh = T.slice_cols(q, i * dh, (i + 1) * dh)
            kh = T.slice_cols(k, i * dh, (i + 1) * dh)
            vh = T.slice_cols(v, i * dh, (i + 1) * dh)
            # no causal mask: every position attends to every other
            weights = T.softmax(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh)))
            outs.append(T.matmul(weights, vh))
        attended = outs[0] if heads == 1 else T.concat(outs, axis=1)
        x = T.add(x, T.add(T.matmul(attended, p[f"{prefix}.attn.wo"]), p[f"{prefix}.attn.bo"]))
        h = T.layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
        h = T.gelu(T.add(T.matmul(h, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"]))
        h = T.add(T.matmul(h, p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
        return T.add(x, h)

    def _embed(self, seq: TokenSequence) -> Tensor:
        cfg = self.config
        context = np.asarray(seq.context, dtype=np.int64)
        response = np.asarray(seq.response, dtype=np.int64)
        if response.shape != (cfg.response_len,):
            raise ModelError(f"Response has {response.size} tokens, expected {cfg.response_len}")
        n_patches = 0 if seq.grid is None else cfg.n_patches
        if context.size + n_patches > cfg.max_context_len:
            raise ModelError(
                f"Context of {context.size + n_patches} positions exceeds max_context_len {cfg.max_context_len}")
        for ids in (context, response):
            if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
                raise ModelError(f"Token id outside vocabulary [0, {cfg.vocab_size})")
        p = self.params
        parts = []
        if context.size:
            parts.append(T.embedding_lookup(p["embed.token"], context))
        if seq.grid is not None:
            grid = np.asarray(seq.grid, dtype=np.float64)
            if grid.shape != (cfg.grid_channels, cfg.grid_size, cfg.grid_size):
                raise ModelError(f"Grid shape {grid.shape} does not match the model's raster layout")
            patches = T.constant(patchify(grid, cfg.patch_size))
            parts.append(T.add(T.matmul(patches, p["embed.patch.weight"]), p["embed.patch.bias"]))
        parts.append(T.embedding_lookup(p["embed.token"], response))
        x = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        positions = np.arange(x.shape[0])
        return T.add(x, T.index_select(p["embed.position"], positions))

    def forward(self, seq: TokenSequence, expert: ExpertId = ExpertId.GENERATION) -> Tensor:
        """Logits of shape (response_len, vocab_size) at the response positions."""
        route = self.route(expert)
        confine = expert == ExpertId.REFINEMENT and self.config.strict_confinement
        n_shared = self.config.n_shared_blocks
        x = self._embed(seq)
        for index, prefix in enumerate(route):
            if confine and index == n_shared:
                x = T.stop_gradient(x)
            x = self._block(x, prefix)
        if confine and n_shared == len(route):
            x = T.stop_gradient(x)
        length = x.shape[0]
        resp = T.index_select(x, np.arange(length - self.config.response_len, length))
        head = {name: (T.stop_gradient(self.params[name]) if confine else self.params[name]) for name in HEAD_PARAMS}
        h = T.layer_norm(resp, head["head.ln.gamma"], head["head.ln.beta"])
        logits = T.add(T.matmul(h, head["head.weight"]), head["head.bias"])
        # [MASK] is never a decoded token
        bias = np.zeros(self.config.vocab_size)
        bias[MASK_ID] = MASK_LOGIT
        return T.add(logits, T.constant(bias))

    def logits(self, seq: TokenSequence, expert: ExpertId = ExpertId.GENERATION) -> np.ndarray:
        """Graph-free forward pass."""
        with T.no_grad():
            return self.forward(seq, expert).data

    # -- copies and state ---------------------------------------------------

    def clone(self, frozen: bool = False) -> "PlannerModel":
        twin = PlannerModel.__new__(PlannerModel)
        twin.config = copy.deepcopy(self.config)
        twin._refinement_ready = self._refinement_ready
        twin.params = {}
        for name, p in self.params.items():
            twin.params[name] = T.Tensor(p.data.copy(), requires_grad=not frozen, name=name)
        return twin

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if any(name.startswith(REFINEMENT_PREFIX + ".") for name in state):
            self._refinement_ready = True
        for name, data in state.items():
            expected = self.params.get(name)
            if expected is not None and expected.shape != data.shape:
                raise ModelError(f"Parameter {name} has shape {data.shape}, expected {expected.shape}")
            self.params[name] = T.parameter(data, name=name)
        missing = set(self.params) - set(state)
        if missing:
            raise ModelError(f"State is missing parameters: {sorted(missing)[:5]}")
