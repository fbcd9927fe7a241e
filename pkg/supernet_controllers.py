# supernet_controllers.py
"""
The m-candidate, L-layer supernet and its two controllers.

The transformer controller holds one logit vector over the m width
candidates, shared by every layer; the depth controller holds one logit per
"exit after layer j" option. Both are stored as unconstrained logits, i.e.
``log alpha`` and ``log beta``, so Gumbel-softmax can use them directly.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from errors import ConfigError, InvariantError
from model_layers import (
    MAX_GATE_LAYERS,
    BlockSettings,
    candidate_forward,
    embed,
    init_embedding_params,
    init_layer_params,
    make_mask_spec,
    masked_plan,
    padding_mask,
)
from tensor_core import Tensor, add, constant, index, mul, parameter, scale, softmax_rows

logger = logging.getLogger(__name__)

ALPHA = 'arch.alpha'
BETA = 'arch.beta'


@dataclass(frozen=True)
class SupernetConfig:
    """Shape of the search space. Defaults follow the reference hyperparameters."""
    num_items: int
    hidden_size: int = 128
    inner_size: int = 256
    max_seq_len: int = 200
    num_layers: int = 4
    num_heads: int = 4
    gamma_hidden: Tuple[float, ...] = (0.0, 0.25, 0.5)
    gamma_inner: Tuple[float, ...] = (0.0, 0.25, 0.5)
    gate_layers: int = 2
    gate_hidden: int = 0
    gate_scale: float = 2.0
    dropout: float = 0.2
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.num_items < 1:
            raise ConfigError(f"num_items must be at least 1, got {self.num_items}")
        for key in ('hidden_size', 'inner_size', 'max_seq_len', 'num_layers', 'num_heads'):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1, got {getattr(self, key)}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if len(self.gamma_hidden) != len(self.gamma_inner) or not self.gamma_hidden:
            raise ConfigError(
                f"gamma_hidden and gamma_inner must be non-empty lists of equal length, "
                f"got {len(self.gamma_hidden)} and {len(self.gamma_inner)}"
            )
        for gamma in self.gamma_hidden + self.gamma_inner:
            if not 0.0 <= gamma < 1.0:
                raise ConfigError(f"pruning intensities must lie in [0, 1), got {gamma}")
        if not 0 <= self.gate_layers <= MAX_GATE_LAYERS:
            raise ConfigError(f"gate_layers must lie in 0..{MAX_GATE_LAYERS}, got {self.gate_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.gate_scale <= 0:
            raise ConfigError(f"gate_scale must be positive, got {self.gate_scale}")

    @property
    def num_candidates(self):
        return len(self.gamma_hidden)

    @property
    def gate_width(self):
        return self.gate_hidden or self.hidden_size

    def block_settings(self, gate_layers=None):
        return BlockSettings(
            num_heads=self.num_heads,
            gate_layers=self.gate_layers if gate_layers is None else gate_layers,
            gate_scale=self.gate_scale,
            dropout=self.dropout,
            layer_norm_eps=self.layer_norm_eps,
        )


def make_masks(cfg):
    """One MaskSpec per candidate, in candidate order."""
    return tuple(
        make_mask_spec(gh, gi, cfg.hidden_size, cfg.inner_size, cfg.num_heads)
        for gh, gi in zip(cfg.gamma_hidden, cfg.gamma_inner)
    )


def gumbel_softmax(log_weights, tau, rng=None, mode='sample'):
    """
    softmax((log w + g) / tau) with g = -log(-log u), u ~ Uniform(0, 1).

    ``mode='expected'`` drops the noise. Returns the simplex tensor and the
    Gumbel draws used.
    """
    if tau <= 0:
        raise ConfigError(f"Gumbel-softmax temperature must be positive, got {tau}")
    if mode not in ('sample', 'expected'):
        raise ConfigError(f"Gumbel-softmax mode must be 'sample' or 'expected', got '{mode}'")
    log_weights = constant(log_weights)
    if mode == 'sample':
        if rng is None:
            raise ConfigError("Gumbel-softmax sampling needs a random generator")
        tiny = np.finfo(np.float64).tiny
        u = rng.uniform(tiny, 1.0, size=log_weights.shape)
        draws = -np.log(-np.log(u))
    else:
        draws = np.zeros(log_weights.shape)
    return softmax_rows(scale(add(log_weights, draws), 1.0 / tau)), draws


@dataclass(frozen=True)
class FusionWeights:
    """Decision weights of one forward: p over candidates, q over depths."""
    p: Tensor
    q: Tensor
    alpha_draws: np.ndarray
    beta_draws: np.ndarray

    @property
    def p_values(self):
        return self.p.numpy()

    @property
    def q_values(self):
        return self.q.numpy()


def fixed_fusion(p, q):
    """FusionWeights from explicit vectors (no sampling, no gradient)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return FusionWeights(Tensor(p), Tensor(q), np.zeros_like(p), np.zeros_like(q))


@dataclass
class Supernet:
    """Candidate weights, embeddings and controller logits.

    ``weights`` and ``arch`` are replaced wholesale by the optimizer between
    forwards; tensors inside them are never mutated.
    """
    cfg: SupernetConfig
    masks: tuple
    weights: Dict[str, Tensor]
    arch: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def alpha(self):
        return self.arch[ALPHA].numpy()

    @property
    def beta(self):
        return self.arch[BETA].numpy()

    def with_weights(self, weights):
        return replace(self, weights=weights)

    def with_arch(self, arch):
        return replace(self, arch=arch)

    def all_tensors(self):
        tensors = dict(self.weights)
        tensors.update(self.arch)
        return tensors


def candidate_prefix(candidate, layer):
    """Parameter prefix of a candidate's layer; candidate is 0-based, layer 1-based."""
    return f'cand{candidate}.layer{layer}'


def build_supernet(cfg, rng):
    """Initialise every candidate's layers, the embeddings and neutral controllers."""
    masks = make_masks(cfg)
    weights = init_embedding_params(rng, cfg.num_items, cfg.max_seq_len, cfg.hidden_size)
    for i, mask in enumerate(masks):
        for layer in range(1, cfg.num_layers + 1):
            weights.update(init_layer_params(
                rng,
                candidate_prefix(i, layer),
                cfg.hidden_size,
                cfg.inner_size,
                gate_layers=cfg.gate_layers,
                gate_hidden=cfg.gate_width,
                gate_outputs=(mask.d_eff, mask.D_eff),
            ))
    arch = {
        ALPHA: parameter(np.zeros(cfg.num_candidates), name=ALPHA),
        BETA: parameter(np.zeros(cfg.num_layers), name=BETA),
    }
    logger.info(
        f"Built supernet with {cfg.num_candidates} candidates x {cfg.num_layers} layers "
        f"({sum(t.size for t in weights.values())} weights)"
    )
    return Supernet(cfg, masks, weights, arch)


def sample_fusion(net, tau, rng=None, mode='sample'):
    p, alpha_draws = gumbel_softmax(net.arch[ALPHA], tau, rng, mode)
    q, beta_draws = gumbel_softmax(net.arch[BETA], tau, rng, mode)
    return FusionWeights(p, q, alpha_draws, beta_draws)


def supernet_forward(net, item_ids, tau=1.0, rng=None, mode='sample', dropout_mode='eval',
                     dropout_rng=None, fusion: Optional[FusionWeights] = None):
    """
    Y = sum_j q_j * sum_i p_i T_i^(j), where layer j+1 reads the p-fused layer-j state.

    One (p, q) draw serves the whole forward. Pass ``fusion`` to force
    specific decision weights.
    """
    cfg = net.cfg
    if fusion is None:
        fusion = sample_fusion(net, tau, rng, mode)
    if fusion.p.shape != (cfg.num_candidates,) or fusion.q.shape != (cfg.num_layers,):
        raise InvariantError(
            f"fusion weights of shapes {fusion.p.shape}/{fusion.q.shape} do not match "
            f"{cfg.num_candidates} candidates and {cfg.num_layers} layers"
        )
    settings = cfg.block_settings()
    plans = [masked_plan(mask) for mask in net.masks]
    pad = padding_mask(item_ids)
    e = embed(item_ids, net.weights)

    state = e
    y = None
    for layer in range(1, cfg.num_layers + 1):
        fused = None
        for i, plan in enumerate(plans):
            out = candidate_forward(state, e, net.weights, candidate_prefix(i, layer), plan, settings, pad,
                                    dropout_mode, dropout_rng)
            term = mul(out, index(fusion.p, i))
            fused = term if fused is None else add(fused, term)
        state = fused
        contribution = mul(state, index(fusion.q, layer - 1))
        y = contribution if y is None else add(y, contribution)
    return y, fusion


def hard_path_forward(net, item_ids, candidate, depth, dropout_mode='eval', dropout_rng=None):
    """Run one masked candidate alone for its first ``depth`` layers."""
    if not 1 <= depth <= net.cfg.num_layers:
        raise InvariantError(f"depth must lie in 1..{net.cfg.num_layers}, got {depth}")
    settings = net.cfg.block_settings()
    plan = masked_plan(net.masks[candidate])
    pad = padding_mask(item_ids)
    e = embed(item_ids, net.weights)
    state = e
    for layer in range(1, depth + 1):
        state = candidate_forward(state, e, net.weights, candidate_prefix(candidate, layer), plan, settings, pad,
                                  dropout_mode, dropout_rng)
    return state
