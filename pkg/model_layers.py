# model_layers.py
"""
Building blocks of a candidate transformer: embeddings, zero masks,
linear multi-head attention, data-aware gates, the gated feed-forward block,
the weight-tied scoring head and the cross-entropy loss.

All functions read parameters from a flat ``name -> Tensor`` mapping so the
same code drives the masked supernet candidates (``cand{i}.layer{l}.*``) and
the physically compacted model (``layer{l}.*``).
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from errors import ConfigError, DataFormatError, DimensionError
from tensor_core import (
    add,
    elu,
    embedding_lookup,
    gelu,
    get_default_dtype,
    index,
    l2_normalize,
    layer_norm,
    log_softmax_rows,
    matmul,
    mul,
    parameter,
    relu,
    reshape,
    scale,
    sigmoid,
    swapaxes,
    take_channels,
    tensor_mean,
    dropout as apply_dropout,
)

logger = logging.getLogger(__name__)

MAX_GATE_LAYERS = 4


# ---------- ZERO MASKS ----------------------------------------------------------


def _round_half_up(value):
    return int(math.floor(value + 0.5))


def hidden_zero_count(gamma, hidden_size, num_heads):
    """Zeroed hidden channels for intensity ``gamma``: a multiple of the head count, leaving each head one live channel."""
    requested = _round_half_up(gamma * hidden_size)
    head_width = hidden_size // num_heads
    per_head = min(requested // num_heads, head_width - 1)
    return per_head * num_heads


def inner_zero_count(gamma, inner_size):
    return min(_round_half_up(gamma * inner_size), inner_size - 1)


@dataclass(frozen=True)
class MaskSpec:
    """Hidden (d) and inner (D) 0/1 masks of one candidate.

    Zeros sit at the trailing positions of every head slice (hidden) and at
    the trailing positions of the inner vector.
    """
    gamma_hidden: float
    gamma_inner: float
    hidden: np.ndarray
    inner: np.ndarray
    num_heads: int

    @property
    def hidden_size(self):
        return len(self.hidden)

    @property
    def inner_size(self):
        return len(self.inner)

    @property
    def d_eff(self):
        return int(self.hidden.sum())

    @property
    def D_eff(self):
        return int(self.inner.sum())

    @property
    def head_width(self):
        """Live channels per head."""
        return self.d_eff // self.num_heads

    @property
    def hidden_keep(self):
        return np.flatnonzero(self.hidden)

    @property
    def inner_keep(self):
        return np.flatnonzero(self.inner)

    @property
    def hidden_selection(self):
        """d_eff x d matrix scattering live hidden channels back to full width."""
        return _selection_matrix(self.hidden_keep, self.hidden_size)

    @property
    def inner_selection(self):
        return _selection_matrix(self.inner_keep, self.inner_size)


def _selection_matrix(keep, width):
    selection = np.zeros((len(keep), width), dtype=get_default_dtype())
    selection[np.arange(len(keep)), keep] = 1.0
    return selection


def make_mask_spec(gamma_hidden, gamma_inner, hidden_size, inner_size, num_heads):
    """Build the trailing-zero masks for one (gamma, gamma') pair."""
    if num_heads < 1 or hidden_size % num_heads:
        raise ConfigError(f"hidden_size {hidden_size} is not divisible by num_heads {num_heads}")
    for label, gamma in (('gamma_hidden', gamma_hidden), ('gamma_inner', gamma_inner)):
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"{label} must lie in [0, 1), got {gamma}")

    requested = _round_half_up(gamma_hidden * hidden_size)
    zeros = hidden_zero_count(gamma_hidden, hidden_size, num_heads)
    if zeros != requested:
        logger.warning(
            f"Hidden mask for gamma={gamma_hidden} asks for {requested} zero channels, "
            f"which is not a per-head-uniform count. {zeros} channels will be zeroed instead."
        )
    inner_zeros = inner_zero_count(gamma_inner, inner_size)
    if inner_zeros != _round_half_up(gamma_inner * inner_size):
        logger.warning(
            f"Inner mask for gamma'={gamma_inner} would zero every channel. "
            f"{inner_zeros} channels will be zeroed instead."
        )

    head_width = hidden_size // num_heads
    per_head = zeros // num_heads
    dtype = get_default_dtype()
    hidden = np.ones(hidden_size, dtype=dtype)
    for head in range(num_heads):
        end = (head + 1) * head_width
        hidden[end - per_head:end] = 0.0
    inner = np.ones(inner_size, dtype=dtype)
    inner[inner_size - inner_zeros:] = 0.0
    hidden.setflags(write=False)
    inner.setflags(write=False)
    return MaskSpec(gamma_hidden, gamma_inner, hidden, inner, num_heads)


# ---------- PARAMETERS ----------------------------------------------------------


def fan_in_uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_embedding_params(rng, num_items, max_seq_len, hidden_size):
    """Item table (row 0 = padding, all zero) and positional table."""
    item = fan_in_uniform(rng, hidden_size, (num_items + 1, hidden_size))
    item[0] = 0.0
    return {
        'emb.item': parameter(item, name='emb.item'),
        'emb.pos': parameter(fan_in_uniform(rng, hidden_size, (max_seq_len, hidden_size)), name='emb.pos'),
    }


def init_gate_params(rng, prefix, gate_layers, input_size, gate_hidden, output_size):
    """Gate weights ``{prefix}.w{j}``/``{prefix}.b{j}``; the last layer starts at zero."""
    params = {}
    widths = [input_size] + [gate_hidden] * (gate_layers - 1) + [output_size]
    for j in range(gate_layers):
        fan_in, fan_out = widths[j], widths[j + 1]
        last = j == gate_layers - 1
        weight = np.zeros((fan_in, fan_out)) if last else fan_in_uniform(rng, fan_in, (fan_in, fan_out))
        params[f'{prefix}.w{j}'] = parameter(weight, name=f'{prefix}.w{j}')
        params[f'{prefix}.b{j}'] = parameter(np.zeros(fan_out), name=f'{prefix}.b{j}')
    return params


def init_layer_params(rng, prefix, hidden_size, inner_size, gate_layers=0, gate_hidden=None,
                      gate_outputs=None):
    """
    Initialise one full-width transformer layer.

    Args:
        prefix: name prefix, e.g. ``cand0.layer1``
        gate_layers: depth of each data-aware gate (0 = no gate)
        gate_outputs: (gate-1 width, gate-2 width); defaults to (hidden_size, inner_size)

    Returns:
        dict of parameter tensors
    """
    input_size = hidden_size
    gate_hidden = gate_hidden or hidden_size
    gate_outputs = gate_outputs or (hidden_size, inner_size)

    def _weight(name, fan_in, fan_out):
        return parameter(fan_in_uniform(rng, fan_in, (fan_in, fan_out)), name=f'{prefix}.{name}')

    def _const(name, value, width):
        return parameter(np.full(width, value), name=f'{prefix}.{name}')

    params = {
        f'{prefix}.wq': _weight('wq', input_size, hidden_size),
        f'{prefix}.wk': _weight('wk', input_size, hidden_size),
        f'{prefix}.wv': _weight('wv', input_size, hidden_size),
        f'{prefix}.wo': _weight('wo', hidden_size, hidden_size),
        f'{prefix}.ln1.g': _const('ln1.g', 1.0, hidden_size),
        f'{prefix}.ln1.b': _const('ln1.b', 0.0, hidden_size),
        f'{prefix}.wf1': _weight('wf1', hidden_size, inner_size),
        f'{prefix}.bf1': _const('bf1', 0.0, inner_size),
        f'{prefix}.wf2': _weight('wf2', inner_size, hidden_size),
        f'{prefix}.bf2': _const('bf2', 0.0, hidden_size),
        f'{prefix}.ln2.g': _const('ln2.g', 1.0, hidden_size),
        f'{prefix}.ln2.b': _const('ln2.b', 0.0, hidden_size),
    }
    if gate_layers:
        for k, width in zip((1, 2), gate_outputs):
            params.update(init_gate_params(rng, f'{prefix}.gate{k}', gate_layers, input_size, gate_hidden, width))
    return params


# ---------- FORWARD PIECES ----------------------------------------------------------


@dataclass(frozen=True)
class BlockSettings:
    num_heads: int = 4
    gate_layers: int = 2
    gate_scale: float = 2.0
    dropout: float = 0.2
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if not 0 <= self.gate_layers <= MAX_GATE_LAYERS:
            raise ConfigError(f"gate_layers must lie in 0..{MAX_GATE_LAYERS}, got {self.gate_layers}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be at least 1, got {self.num_heads}")


@dataclass(frozen=True)
class ChannelPlan:
    """How one layer treats its channels.

    Masked supernet candidates carry full-width masks and scatter gate
    outputs back to full width; compact layers carry no masks and may read a
    channel slice of a wider input for their residual.
    """
    num_heads: int
    head_width: int
    hidden_mask: Optional[np.ndarray] = None
    inner_mask: Optional[np.ndarray] = None
    hidden_scatter: Optional[np.ndarray] = None
    inner_scatter: Optional[np.ndarray] = None
    input_channels: Optional[np.ndarray] = None


def masked_plan(mask):
    return ChannelPlan(
        num_heads=mask.num_heads,
        head_width=mask.head_width,
        hidden_mask=mask.hidden,
        inner_mask=mask.inner,
        hidden_scatter=mask.hidden_selection,
        inner_scatter=mask.inner_selection,
    )


def compact_plan(mask, first_layer):
    return ChannelPlan(
        num_heads=mask.num_heads,
        head_width=mask.head_width,
        input_channels=mask.hidden_keep if first_layer else None,
    )


def _masked(x, mask):
    return x if mask is None else mul(x, mask)


def padding_mask(item_ids):
    """B x N x 1 array: 1 at real items, 0 at padding."""
    return (np.asarray(item_ids) != 0)[..., None].astype(get_default_dtype())


def embed(item_ids, params):
    """E = item embedding + positional embedding, padded cells forced to zero."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    table = params['emb.item']
    if item_ids.size and item_ids.max() >= table.shape[0]:
        raise DataFormatError(f"item id {item_ids.max()} exceeds the vocabulary size {table.shape[0] - 1}")
    seq_len = item_ids.shape[1]
    if seq_len > params['emb.pos'].shape[0]:
        raise DimensionError(f"window of {seq_len} positions exceeds max_seq_len {params['emb.pos'].shape[0]}")
    items = embedding_lookup(table, item_ids)
    positions = embedding_lookup(params['emb.pos'], np.arange(seq_len))
    return mul(add(items, positions), padding_mask(item_ids))


def linear_attention(q, k, v, dim_scale=None):
    """A1(elu(Q)) (A2(elu(K))^T V), with the d x d product formed first."""
    dim_scale = dim_scale or q.shape[-1]
    q_norm = l2_normalize(elu(q), 'row', dim_scale)
    k_norm = l2_normalize(elu(k), 'col', dim_scale)
    context = matmul(swapaxes(k_norm, -1, -2), v)
    return matmul(q_norm, context)


def _split_heads(x, num_heads):
    batch, seq_len, width = x.shape
    return swapaxes(reshape(x, (batch, seq_len, num_heads, width // num_heads)), 1, 2)


def _merge_heads(x):
    batch, num_heads, seq_len, head_width = x.shape
    return reshape(swapaxes(x, 1, 2), (batch, seq_len, num_heads * head_width))


def multi_head_forward(h, params, prefix, plan, pad, eps=1e-12):
    """S = LayerNorm(H + MHA(H)) with hidden-mask silencing and padded rows re-zeroed."""
    q = _masked(matmul(h, params[f'{prefix}.wq']), plan.hidden_mask)
    k = _masked(matmul(h, params[f'{prefix}.wk']), plan.hidden_mask)
    v = _masked(matmul(h, params[f'{prefix}.wv']), plan.hidden_mask)
    width = q.shape[-1]
    if width % plan.num_heads:
        raise ConfigError(f"hidden width {width} is not divisible by {plan.num_heads} heads")

    heads = linear_attention(
        _split_heads(q, plan.num_heads),
        _split_heads(k, plan.num_heads),
        _split_heads(v, plan.num_heads),
        plan.head_width,
    )
    attended = _masked(matmul(_merge_heads(heads), params[f'{prefix}.wo']), plan.hidden_mask)

    if plan.input_channels is not None:
        residual = take_channels(h, plan.input_channels)
    else:
        residual = _masked(h, plan.hidden_mask)
    normed = layer_norm(add(residual, attended), params[f'{prefix}.ln1.g'], params[f'{prefix}.ln1.b'],
                        eps, mask=plan.hidden_mask)
    return mul(normed, pad)


def gate_forward(x, params, prefix, gate_layers, gate_scale=2.0, scatter=None):
    """
    Data-aware gate: delta = gate_scale * sigmoid(ReLU(...(X W + b)...) W_last + b_last).

    Returns None when ``gate_layers`` is 0 (neutral gate).
    """
    if gate_layers == 0:
        return None
    hidden = x
    for j in range(gate_layers - 1):
        hidden = relu(add(matmul(hidden, params[f'{prefix}.w{j}']), params[f'{prefix}.b{j}']))
    last = gate_layers - 1
    logits = add(matmul(hidden, params[f'{prefix}.w{last}']), params[f'{prefix}.b{last}'])
    delta = scale(sigmoid(logits), gate_scale)
    if scatter is not None:
        delta = matmul(delta, scatter)
    return delta


def candidate_forward(h, e, params, prefix, plan, settings, pad, mode='eval', rng=None):
    """
    One gated transformer layer.

        F1 = GeLU((delta1 * S) W_F1 + b_F1), inner mask applied
        F2 = (delta2 * F1) W_F2 + b_F2, hidden mask applied
        T  = LayerNorm(S + Dropout(F2))

    ``h`` is the previous layer's output (E at the first layer) and ``e`` the
    embedded batch the gates read.
    """
    eps = settings.layer_norm_eps
    s = multi_head_forward(h, params, prefix, plan, pad, eps)

    delta1 = gate_forward(e, params, f'{prefix}.gate1', settings.gate_layers, settings.gate_scale,
                          plan.hidden_scatter)
    delta2 = gate_forward(e, params, f'{prefix}.gate2', settings.gate_layers, settings.gate_scale,
                          plan.inner_scatter)

    ffn_in = s if delta1 is None else mul(delta1, s)
    f1 = _masked(gelu(add(matmul(ffn_in, params[f'{prefix}.wf1']), params[f'{prefix}.bf1'])), plan.inner_mask)
    ffn_mid = f1 if delta2 is None else mul(delta2, f1)
    f2 = _masked(add(matmul(ffn_mid, params[f'{prefix}.wf2']), params[f'{prefix}.bf2']), plan.hidden_mask)

    out = layer_norm(add(s, apply_dropout(f2, settings.dropout, mode, rng)),
                     params[f'{prefix}.ln2.g'], params[f'{prefix}.ln2.b'], eps, mask=plan.hidden_mask)
    return mul(out, pad)


def score_items(y, item_table, channels=None):
    """Logits of every real item (padding excluded) from the last window position."""
    last = index(y, (slice(None), -1))
    table = index(item_table, slice(1, None))
    if channels is not None:
        table = take_channels(table, channels)
    if last.shape[-1] != table.shape[-1]:
        raise DimensionError(f"score_items: representation {last.shape} does not match table {table.shape}")
    return matmul(last, swapaxes(table, -1, -2))


def ce_loss(logits, targets):
    """Mean multiclass cross-entropy; targets are item ids 1..|V|."""
    targets = np.asarray(targets, dtype=np.int64)
    num_items = logits.shape[-1]
    if targets.size and targets.min() < 1:
        raise DataFormatError("cross-entropy target is the padding id 0")
    if targets.size and targets.max() > num_items:
        raise DataFormatError(f"cross-entropy target {targets.max()} exceeds the vocabulary size {num_items}")
    log_probs = log_softmax_rows(logits)
    picked = index(log_probs, (np.arange(len(targets)), targets - 1))
    return scale(tensor_mean(picked), -1.0)


def count_parameters(params: Dict[str, object]):
    return int(sum(t.size for t in params.values()))
