# flops_model.py
"""
Analytic FLOPs of one candidate layer and the dynamic resource penalty.

Accounting constants (per sequence of N positions, batch size 1):

    multiply-accumulate            2 FLOPs
    bias add, residual add,        1 FLOP per element
    gate multiplication
    activation (elu, GeLU,         5 FLOPs per element
    ReLU, sigmoid), layer norm
    L2 normalisation               3 FLOPs per element

Mask multiplications, dropout and embedding lookups are not counted. Widths
are the effective (post-mask) widths, so a masked candidate costs what its
compacted counterpart costs.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import ConfigError, InvariantError
from model_layers import hidden_zero_count, inner_zero_count
from tensor_core import Tensor, matmul, reshape, scale

logger = logging.getLogger(__name__)

MAC_FLOPS = 2
POINTWISE_FLOPS = 1
ACTIVATION_FLOPS = 5
LAYER_NORM_FLOPS = 5
L2_NORM_FLOPS = 3


def _dense(seq_len, fan_in, fan_out, bias=True):
    return MAC_FLOPS * seq_len * fan_in * fan_out + (POINTWISE_FLOPS * seq_len * fan_out if bias else 0)


def layer_flops_breakdown(hidden_size, inner_size, num_heads, d_eff, D_eff, seq_len, gate_layers,
                          gate_hidden=None, input_width=None):
    """
    Per-component FLOPs of one gated linear-attention layer.

    Args:
        input_width: width of the layer input (d at the first layer, d_eff after)

    Returns:
        dict component -> FLOPs
    """
    n = seq_len
    input_width = input_width or d_eff
    gate_hidden = gate_hidden or hidden_size
    head_width = d_eff // num_heads

    parts = {
        'qkv_projection': 3 * _dense(n, input_width, d_eff, bias=False),
        'output_projection': _dense(n, d_eff, d_eff, bias=False),
        # elu and L2 normalisation of Q and K, then K^T V and Q (K^T V) per head
        'attention_core': (
            2 * ACTIVATION_FLOPS * n * d_eff
            + 2 * L2_NORM_FLOPS * n * d_eff
            + num_heads * 2 * MAC_FLOPS * n * head_width * head_width
        ),
        'ffn': (
            _dense(n, d_eff, D_eff) + ACTIVATION_FLOPS * n * D_eff
            + _dense(n, D_eff, d_eff)
        ),
        'residual': 2 * POINTWISE_FLOPS * n * d_eff,
        'layer_norm': 2 * LAYER_NORM_FLOPS * n * d_eff,
        'gates': 0,
    }
    if gate_layers:
        for out_width in (d_eff, D_eff):
            widths = [hidden_size] + [gate_hidden] * (gate_layers - 1) + [out_width]
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                parts['gates'] += _dense(n, fan_in, fan_out) + ACTIVATION_FLOPS * n * fan_out
            parts['gates'] += POINTWISE_FLOPS * n * out_width
    return parts


def flops_of_candidate(cfg, gamma, gamma_prime, seq_len=None, gate_layers=None, layer=1):
    """Total FLOPs of one candidate layer at sequence length ``seq_len`` (defaults to cfg.max_seq_len)."""
    seq_len = cfg.max_seq_len if seq_len is None else seq_len
    gate_layers = cfg.gate_layers if gate_layers is None else gate_layers
    if seq_len < 1:
        raise ConfigError(f"sequence length must be at least 1, got {seq_len}")
    d_eff = cfg.hidden_size - hidden_zero_count(gamma, cfg.hidden_size, cfg.num_heads)
    D_eff = cfg.inner_size - inner_zero_count(gamma_prime, cfg.inner_size)
    parts = layer_flops_breakdown(
        cfg.hidden_size, cfg.inner_size, cfg.num_heads, d_eff, D_eff, seq_len, gate_layers,
        gate_hidden=cfg.gate_width,
        input_width=cfg.hidden_size if layer == 1 else d_eff,
    )
    return int(sum(parts.values()))


@dataclass(frozen=True)
class FlopsTable:
    """FLOPs of candidate i at layer l; ``values[i, l - 1]``."""
    values: np.ndarray

    @property
    def num_candidates(self):
        return self.values.shape[0]

    @property
    def num_layers(self):
        return self.values.shape[1]

    def path_flops(self, candidate, depth):
        """FLOPs of running one candidate for its first ``depth`` layers."""
        return int(self.values[candidate, :depth].sum())

    def scaled(self, flops_scale=0.0):
        """Table as floats divided by ``flops_scale`` (0 = divide by the largest entry)."""
        divisor = float(self.values.max()) if flops_scale <= 0 else float(flops_scale)
        return self.values.astype(float) / divisor

    def to_frame(self):
        rows = [
            {'candidate': i + 1, 'layer': l + 1, 'flops': int(self.values[i, l])}
            for i in range(self.num_candidates)
            for l in range(self.num_layers)
        ]
        return pd.DataFrame(rows, columns=['candidate', 'layer', 'flops'])


def build_flops_table(cfg, gate_layers=None):
    values = np.array([
        [flops_of_candidate(cfg, gh, gi, gate_layers=gate_layers, layer=layer)
         for layer in range(1, cfg.num_layers + 1)]
        for gh, gi in zip(cfg.gamma_hidden, cfg.gamma_inner)
    ], dtype=np.int64)
    return FlopsTable(values)


def resource_loss(p, q, table_values, depth, num_layers):
    """L_RC = (L_t / L) * p^T F q, differentiable in p and q."""
    if not 1 <= depth <= num_layers:
        raise InvariantError(f"dynamic depth must lie in 1..{num_layers}, got {depth}")
    table = Tensor(table_values)
    m, L = table.shape
    if p.shape != (m,) or q.shape != (L,):
        raise InvariantError(f"p/q shapes {p.shape}/{q.shape} do not match a {m}x{L} FLOPs table")
    expected = matmul(matmul(reshape(p, (1, m)), table), reshape(q, (L, 1)))
    return scale(reshape(expected, ()), depth / num_layers)
