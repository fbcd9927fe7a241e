# search_engine.py
"""
Bilevel architecture search: alternating weight and architecture steps under
the dynamic resource constraint, followed by hard selection.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from data_loader import batches_from_examples, build_examples
from errors import ConfigError, DataFormatError, DivergenceError, NumericalError
from flops_model import build_flops_table, resource_loss
from model_layers import count_parameters, score_items, ce_loss
from ranking_metrics import MetricsReport, evaluate_model
from supernet_controllers import build_supernet, supernet_forward
from tensor_core import AdamState, GradTape, adam_step, add, backward, scale

logger = logging.getLogger(__name__)

TAU_DECAY = 0.00005
TAU_FLOOR = 0.01
ARCH_BETA1 = 0.5
ARCH_BETA2 = 0.999


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    arch_learning_rate: float = 0.001
    lambda_: float = 0.1
    search_batch_size: int = 1024
    retrain_batch_size: int = 2048
    search_epochs: int = 50
    retrain_epochs: int = 50
    patience: int = 10
    refresh_every: int = 100
    top_k: int = 10
    flops_scale: float = 0.0
    sliding_windows: bool = False
    exclude_history: bool = False
    progress: bool = False

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lambda_}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.refresh_every < 1:
            raise ConfigError(f"refresh_every must be at least 1, got {self.refresh_every}")
        if min(self.search_batch_size, self.retrain_batch_size) < 1:
            raise ConfigError("batch sizes must be at least 1")


def temperature_at(t):
    """tau = max(0.01, 1 - 0.00005 t)."""
    if t < 0:
        raise ConfigError(f"iteration counter must be non-negative, got {t}")
    return max(TAU_FLOOR, 1.0 - TAU_DECAY * t)


@dataclass
class SearchState:
    t: int = 0
    tau: float = 1.0
    depth: int = 1
    refresh_every: int = 100
    stale_epochs: int = 0


def update_dynamic_depth(state, beta):
    """L_t = 1 + argmax beta (lowest index wins ties)."""
    state.depth = int(np.argmax(np.asarray(beta))) + 1
    return state.depth


@dataclass(frozen=True)
class ArchChoice:
    """Hard-selected architecture; ``candidate`` is 0-based."""
    candidate: int
    layers: int
    gamma: float
    gamma_prime: float
    d_eff: int
    D_eff: int
    flops: int

    def to_descriptor(self, cfg, seed, gate_layers=None):
        """JSON-ready descriptor; ``candidate_index`` is 1-based."""
        return {
            'candidate_index': self.candidate + 1,
            'gamma': self.gamma,
            'gamma_prime': self.gamma_prime,
            'd_eff': self.d_eff,
            'D_eff': self.D_eff,
            'layers': self.layers,
            'flops': self.flops,
            'seed': seed,
            'hidden_size': cfg.hidden_size,
            'inner_size': cfg.inner_size,
            'num_layers': cfg.num_layers,
            'num_heads': cfg.num_heads,
            'num_candidates': cfg.num_candidates,
            'max_seq_len': cfg.max_seq_len,
            'num_items': cfg.num_items,
            'gate_layers': cfg.gate_layers if gate_layers is None else gate_layers,
        }

    @classmethod
    def from_descriptor(cls, descriptor):
        return cls(
            candidate=int(descriptor['candidate_index']) - 1,
            layers=int(descriptor['layers']),
            gamma=float(descriptor['gamma']),
            gamma_prime=float(descriptor['gamma_prime']),
            d_eff=int(descriptor['d_eff']),
            D_eff=int(descriptor['D_eff']),
            flops=int(descriptor['flops']),
        )


def hard_select(alpha, beta, masks, flops_table):
    """k1 = argmax alpha, L_o = 1 + argmax beta, ties to the lowest index."""
    k1 = int(np.argmax(np.asarray(alpha)))
    layers = int(np.argmax(np.asarray(beta))) + 1
    mask = masks[k1]
    return ArchChoice(
        candidate=k1,
        layers=layers,
        gamma=float(mask.gamma_hidden),
        gamma_prime=float(mask.gamma_inner),
        d_eff=mask.d_eff,
        D_eff=mask.D_eff,
        flops=flops_table.path_flops(k1, layers),
    )


def supernet_parameter_count(net):
    return count_parameters(net.weights)


class IterationRecord(NamedTuple):
    t: int
    tau: float
    depth: int
    ce: float
    rc: float
    p: Tuple[float, ...]
    q: Tuple[float, ...]


@dataclass
class SearchResult:
    choice: ArchChoice
    supernet: object
    records: List[IterationRecord]
    flops_table: object
    epochs_run: int
    best_val: Optional[MetricsReport]
    wall_clock: float
    stopped_early: bool = False
    epoch_history: List[dict] = field(default_factory=list)

    def log_frame(self):
        """Per-iteration log: t, tau, L_t, L_CE, L_RC, p1.., q1.."""
        m = self.supernet.cfg.num_candidates
        L = self.supernet.cfg.num_layers
        columns = (['t', 'tau', 'L_t', 'L_CE', 'L_RC']
                   + [f'p{i + 1}' for i in range(m)] + [f'q{j + 1}' for j in range(L)])
        rows = [[r.t, r.tau, r.depth, r.ce, r.rc, *r.p, *r.q] for r in self.records]
        return pd.DataFrame(rows, columns=columns)


class SupernetScorer:
    """Noise-free supernet used for validation during search."""

    def __init__(self, net, tau=1.0):
        self.net = net
        self.tau = tau

    def score(self, item_ids):
        y, _ = supernet_forward(self.net, item_ids, self.tau, mode='expected')
        return score_items(y, self.net.weights['emb.item']).data


def search_loss(net, batch, state, flops_values, lambda_, gumbel_rng, dropout_rng):
    """L_CE + lambda * L_RC for one batch with a fresh (p, q) draw."""
    y, fusion = supernet_forward(net, batch.item_ids, state.tau, gumbel_rng, mode='sample',
                                 dropout_mode='train', dropout_rng=dropout_rng)
    ce = ce_loss(score_items(y, net.weights['emb.item']), batch.targets)
    rc = resource_loss(fusion.p, fusion.q, flops_values, state.depth, net.cfg.num_layers)
    return add(ce, scale(rc, lambda_)), ce, rc, fusion


def weight_step(net, batch, state, flops_values, lambda_, optimizer, gumbel_rng, dropout_rng):
    """One Adam step on the model weights; controller logits are left untouched."""
    with GradTape() as tape:
        loss, ce, rc, fusion = search_loss(net, batch, state, flops_values, lambda_, gumbel_rng, dropout_rng)
    grads = backward(tape, loss).for_params(net.weights)
    return net.with_weights(adam_step(optimizer, net.weights, grads)), ce.item(), rc.item(), fusion


def architecture_step(net, batch, state, flops_values, lambda_, optimizer, gumbel_rng, dropout_rng):
    """One Adam step on the controller logits; model weights are left untouched."""
    with GradTape() as tape:
        loss, ce, rc, fusion = search_loss(net, batch, state, flops_values, lambda_, gumbel_rng, dropout_rng)
    grads = backward(tape, loss).for_params(net.arch)
    return net.with_arch(adam_step(optimizer, net.arch, grads)), ce.item(), rc.item(), fusion


def _divergence_state(net, state, epoch, message):
    return {
        'message': message,
        'iteration': state.t,
        'epoch': epoch,
        'tau': state.tau,
        'dynamic_depth': state.depth,
        'alpha_logits': net.alpha.tolist(),
        'beta_logits': net.beta.tolist(),
    }


def search(cfg, split, train_cfg, streams, max_iterations=None):
    """
    Run the alternating search loop and hard-select the final architecture.

    Per iteration: refresh L_t every ``refresh_every`` iterations, take a
    weight step on a training batch, then an architecture step on a
    validation batch. An epoch is one pass over the training rows; the loop
    stops after ``patience`` epochs without a better validation Recall@k,
    after ``search_epochs`` epochs, or after ``max_iterations`` iterations.
    """
    started = time.time()
    net = build_supernet(cfg, streams.init)
    flops_table = build_flops_table(cfg)
    flops_values = flops_table.scaled(train_cfg.flops_scale)
    logger.info(f"Supernet: {cfg.num_candidates} candidates x {cfg.num_layers} layers, "
                f"{supernet_parameter_count(net)} parameters")

    train_examples = build_examples(split, cfg.max_seq_len, 'train', train_cfg.sliding_windows)
    val_examples = build_examples(split, cfg.max_seq_len, 'val')
    if len(train_examples) == 0:
        raise DataFormatError("No training pairs: every user's training prefix has a single item")

    weight_opt = AdamState(learning_rate=train_cfg.learning_rate)
    arch_opt = AdamState(learning_rate=train_cfg.arch_learning_rate, beta1=ARCH_BETA1, beta2=ARCH_BETA2)
    state = SearchState(refresh_every=train_cfg.refresh_every, depth=cfg.num_layers)
    records: List[IterationRecord] = []
    epoch_history = []
    best_val = None
    stopped_early = False
    epochs_run = 0

    for epoch in range(1, train_cfg.search_epochs + 1):
        train_batches = batches_from_examples(train_examples, train_cfg.search_batch_size, streams.shuffle)
        val_batches = batches_from_examples(val_examples, train_cfg.search_batch_size, streams.shuffle)
        ce_sum = rc_sum = 0.0
        steps = 0
        iterator = tqdm(train_batches, desc=f"search epoch {epoch}", leave=False,
                        disable=not train_cfg.progress)
        for step, batch in enumerate(iterator):
            if max_iterations is not None and state.t >= max_iterations:
                break
            state.tau = temperature_at(state.t)
            if state.t % state.refresh_every == 0:
                update_dynamic_depth(state, net.beta)
            try:
                net, ce, rc, fusion = weight_step(net, batch, state, flops_values, train_cfg.lambda_, weight_opt,
                                                  streams.gumbel, streams.dropout)
                val_batch = val_batches[step % len(val_batches)]
                net, _, _, _ = architecture_step(net, val_batch, state, flops_values, train_cfg.lambda_, arch_opt,
                                                 streams.gumbel, streams.dropout)
            except NumericalError as e:
                message = f"search diverged at iteration {state.t}: {str(e)}"
                raise DivergenceError(message, _divergence_state(net, state, epoch, message)) from e
            if not (np.isfinite(ce) and np.isfinite(rc)):
                message = f"search diverged at iteration {state.t}: non-finite loss"
                raise DivergenceError(message, _divergence_state(net, state, epoch, message))

            records.append(IterationRecord(
                state.t, state.tau, state.depth, ce, rc,
                tuple(fusion.p_values.tolist()), tuple(fusion.q_values.tolist()),
            ))
            ce_sum += ce
            rc_sum += rc
            steps += 1
            state.t += 1

        if steps == 0:
            break
        epochs_run = epoch
        val_report = evaluate_model(SupernetScorer(net, state.tau), split, train_cfg.top_k, 'val',
                                    cfg.max_seq_len, train_cfg.search_batch_size, train_cfg.exclude_history)
        epoch_history.append({'epoch': epoch, 'ce': ce_sum / steps, 'rc': rc_sum / steps,
                              'val_recall': val_report.recall_at_k, 'L_t': state.depth, 'tau': state.tau})
        logger.info(
            f"| search epoch {epoch:3d} | ce {ce_sum / steps:.4f} | rc {rc_sum / steps:.4f} "
            f"| val recall@{train_cfg.top_k} {val_report.recall_at_k:.4f} | L_t {state.depth} | tau {state.tau:.4f}"
        )
        if best_val is None or val_report.recall_at_k > best_val.recall_at_k:
            best_val = val_report
            state.stale_epochs = 0
        else:
            state.stale_epochs += 1
            if state.stale_epochs >= train_cfg.patience:
                logger.info(f"Stopping search: no validation improvement for {train_cfg.patience} epochs")
                stopped_early = True
                break
        if max_iterations is not None and state.t >= max_iterations:
            break

    choice = hard_select(net.alpha, net.beta, net.masks, flops_table)
    logger.info(
        f"Selected candidate {choice.candidate + 1} (gamma={choice.gamma}, gamma'={choice.gamma_prime}) "
        f"with {choice.layers} layers, {choice.flops} FLOPs"
    )
    return SearchResult(
        choice=choice,
        supernet=net,
        records=records,
        flops_table=flops_table,
        epochs_run=epochs_run,
        best_val=best_val,
        wall_clock=time.time() - started,
        stopped_early=stopped_early,
        epoch_history=epoch_history,
    )

