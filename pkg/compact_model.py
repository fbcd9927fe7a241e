# compact_model.py
"""
Physically small model rebuilt from the selected supernet path, and its
retraining loop.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from data_loader import batches_from_examples, build_examples
from errors import DataFormatError, DivergenceError, InvariantError, NumericalError
from model_layers import (
    BlockSettings,
    MaskSpec,
    candidate_forward,
    ce_loss,
    compact_plan,
    count_parameters,
    embed,
    init_gate_params,
    padding_mask,
    score_items,
)
from ranking_metrics import MetricsReport, evaluate_model
from supernet_controllers import candidate_prefix
from tensor_core import AdamState, GradTape, Tensor, adam_step, backward, parameter

logger = logging.getLogger(__name__)

SLICED_SUFFIXES = ('wq', 'wk', 'wv', 'wo', 'wf1', 'bf1', 'wf2', 'bf2', 'ln1.g', 'ln1.b', 'ln2.g', 'ln2.b')


@dataclass
class CompactModel:
    """The selected candidate's first ``choice.layers`` layers at their effective widths."""
    choice: object
    mask: MaskSpec
    params: Dict[str, Tensor]
    settings: BlockSettings
    max_seq_len: int

    @property
    def num_layers(self):
        return self.choice.layers

    def forward(self, item_ids, mode='eval', rng=None):
        pad = padding_mask(item_ids)
        e = embed(item_ids, self.params)
        state = e
        for layer in range(1, self.num_layers + 1):
            plan = compact_plan(self.mask, first_layer=layer == 1)
            state = candidate_forward(state, e, self.params, f'layer{layer}', plan, self.settings, pad, mode, rng)
        return state

    def logits(self, item_ids, mode='eval', rng=None):
        return score_items(self.forward(item_ids, mode, rng), self.params['emb.item'], self.mask.hidden_keep)

    def score(self, item_ids):
        return self.logits(item_ids).data

    def parameter_count(self):
        return count_parameters(self.params)

    def with_params(self, params):
        return replace(self, params=params)


def _copy(array):
    return parameter(np.array(array))


def build_compact_model(net, choice, gate_layers=None, rng=None):
    """
    Slice candidate ``choice.candidate``'s surviving channels into small matrices.

    The embedding table keeps its full width because the gates read the full
    embedded batch; scoring reads only the live channels. With ``gate_layers``
    different from the supernet's, gates are re-initialised (neutral) at the
    new depth instead of transferred.
    """
    cfg = net.cfg
    if not 0 <= choice.candidate < cfg.num_candidates:
        raise InvariantError(f"candidate index {choice.candidate} outside 0..{cfg.num_candidates - 1}")
    if not 1 <= choice.layers <= cfg.num_layers:
        raise InvariantError(f"layer count {choice.layers} outside 1..{cfg.num_layers}")
    mask = net.masks[choice.candidate]
    if (mask.d_eff, mask.D_eff) != (choice.d_eff, choice.D_eff):
        raise InvariantError(
            f"choice widths ({choice.d_eff}, {choice.D_eff}) do not match the candidate's masks "
            f"({mask.d_eff}, {mask.D_eff})"
        )
    keep, inner_keep = mask.hidden_keep, mask.inner_keep
    gate_layers = cfg.gate_layers if gate_layers is None else gate_layers
    if gate_layers != cfg.gate_layers and gate_layers > 0 and rng is None:
        raise InvariantError("re-initialising gates at a new depth needs a random generator")

    w = net.weights
    params = {'emb.item': _copy(w['emb.item'].data), 'emb.pos': _copy(w['emb.pos'].data)}
    for layer in range(1, choice.layers + 1):
        src = candidate_prefix(choice.candidate, layer)
        dst = f'layer{layer}'
        rows = slice(None) if layer == 1 else keep
        sliced = {
            'wq': w[f'{src}.wq'].data[rows][:, keep],
            'wk': w[f'{src}.wk'].data[rows][:, keep],
            'wv': w[f'{src}.wv'].data[rows][:, keep],
            'wo': w[f'{src}.wo'].data[np.ix_(keep, keep)],
            'wf1': w[f'{src}.wf1'].data[np.ix_(keep, inner_keep)],
            'bf1': w[f'{src}.bf1'].data[inner_keep],
            'wf2': w[f'{src}.wf2'].data[np.ix_(inner_keep, keep)],
            'bf2': w[f'{src}.bf2'].data[keep],
            'ln1.g': w[f'{src}.ln1.g'].data[keep],
            'ln1.b': w[f'{src}.ln1.b'].data[keep],
            'ln2.g': w[f'{src}.ln2.g'].data[keep],
            'ln2.b': w[f'{src}.ln2.b'].data[keep],
        }
        for suffix in SLICED_SUFFIXES:
            params[f'{dst}.{suffix}'] = _copy(sliced[suffix])

        if gate_layers == cfg.gate_layers:
            for name, tensor in w.items():
                if name.startswith(f'{src}.gate'):
                    params[dst + name[len(src):]] = _copy(tensor.data)
        elif gate_layers > 0:
            for k, width in ((1, mask.d_eff), (2, mask.D_eff)):
                params.update(init_gate_params(rng, f'{dst}.gate{k}', gate_layers, cfg.hidden_size,
                                               cfg.gate_width, width))

    model = CompactModel(choice, mask, params, cfg.block_settings(gate_layers), cfg.max_seq_len)
    logger.info(
        f"Built compact model: {choice.layers} layers, d_eff={mask.d_eff}, D_eff={mask.D_eff}, "
        f"{model.parameter_count()} parameters"
    )
    return model


@dataclass
class RetrainResult:
    model: CompactModel
    initial_val: MetricsReport
    best_val: MetricsReport
    test: MetricsReport
    loss_history: List[float] = field(default_factory=list)
    epoch_history: List[dict] = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False


def retrain(model, split, train_cfg, streams, max_iterations: Optional[int] = None):
    """
    Train the compact model with cross-entropy only, early-stopping on validation Recall@k.

    The parameters of the best validation epoch are restored before the test
    evaluation.
    """
    k = train_cfg.top_k
    examples = build_examples(split, model.max_seq_len, 'train', train_cfg.sliding_windows)
    if len(examples) == 0:
        raise DataFormatError("No training pairs: every user's training prefix has a single item")

    def _evaluate(current, purpose):
        return evaluate_model(current, split, k, purpose, model.max_seq_len, train_cfg.retrain_batch_size,
                              train_cfg.exclude_history)

    initial_val = _evaluate(model, 'val')
    logger.info(f"| retrain epoch   0 | val recall@{k} {initial_val.recall_at_k:.4f}")
    optimizer = AdamState(learning_rate=train_cfg.learning_rate)
    best_model, best_val = model, initial_val
    loss_history, epoch_history = [], []
    stale = 0
    stopped_early = False
    epochs_run = 0
    iterations = 0

    for epoch in range(1, train_cfg.retrain_epochs + 1):
        batches = batches_from_examples(examples, train_cfg.retrain_batch_size, streams.shuffle)
        losses = []
        for batch in tqdm(batches, desc=f"retrain epoch {epoch}", leave=False, disable=not train_cfg.progress):
            if max_iterations is not None and iterations >= max_iterations:
                break
            try:
                with GradTape() as tape:
                    loss = ce_loss(model.logits(batch.item_ids, 'train', streams.dropout), batch.targets)
                grads = backward(tape, loss).for_params(model.params)
                model = model.with_params(adam_step(optimizer, model.params, grads))
            except NumericalError as e:
                message = f"retraining diverged in epoch {epoch}: {str(e)}"
                raise DivergenceError(message, {'message': message, 'epoch': epoch,
                                                'iteration': iterations}) from e
            losses.append(loss.item())
            iterations += 1
        if not losses:
            break
        epochs_run = epoch
        epoch_loss = float(np.mean(losses))
        loss_history.append(epoch_loss)
        val_report = _evaluate(model, 'val')
        epoch_history.append({'epoch': epoch, 'loss': epoch_loss, 'val_recall': val_report.recall_at_k})
        logger.info(f"| retrain epoch {epoch:3d} | loss {epoch_loss:.4f} | val recall@{k} {val_report.recall_at_k:.4f}")
        if val_report.recall_at_k > best_val.recall_at_k:
            best_model, best_val = model, val_report
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                logger.info(f"Stopping retraining: no validation improvement for {train_cfg.patience} epochs")
                stopped_early = True
                break
        if max_iterations is not None and iterations >= max_iterations:
            break

    test_report = _evaluate(best_model, 'test')
    logger.info(f"Test recall@{k} {test_report.recall_at_k:.4f}, ndcg@{k} {test_report.ndcg_at_k:.4f}")
    return RetrainResult(
        model=best_model,
        initial_val=initial_val,
        best_val=best_val,
        test=test_report,
        loss_history=loss_history,
        epoch_history=epoch_history,
        epochs_run=epochs_run,
        stopped_early=stopped_early,
    )
