# test_artifacts.py
import json
import time

import numpy as np
import pandas as pd
import pytest

from artifacts import (
    LEDGER_COLUMNS,
    append_results_ledger,
    atomic_write_text,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_descriptor,
    save_checkpoint,
    validate_compact_checkpoint,
    validate_supernet_checkpoint,
    write_descriptor,
    write_frame,
    write_manifest,
)
from compact_model import build_compact_model
from errors import CheckpointError
from search_engine import ArchChoice


def _tensors():
    return {
        'b': np.arange(6, dtype=np.float64).reshape(2, 3),
        'a': np.array([1.5, -2.0], dtype=np.float32),
        'ids': np.array([3, 1, 2], dtype=np.int64),
    }


def _descriptor(net, candidate=1, layers=2):
    mask = net.masks[candidate]
    choice = ArchChoice(candidate, layers, mask.gamma_hidden, mask.gamma_inner, mask.d_eff, mask.D_eff, flops=10)
    return choice, choice.to_descriptor(net.cfg, seed=42)


class TestCheckpointEncoding:
    def test_bytes_are_deterministic(self):
        assert encode_checkpoint(_tensors()) == encode_checkpoint(_tensors())

    def test_insertion_order_does_not_matter(self):
        shuffled = dict(reversed(list(_tensors().items())))
        assert encode_checkpoint(shuffled) == encode_checkpoint(_tensors())

    def test_decoded_values_and_dtypes(self):
        decoded = decode_checkpoint(encode_checkpoint(_tensors()))
        assert list(decoded) == ['a', 'b', 'ids']
        for name, array in _tensors().items():
            np.testing.assert_array_equal(decoded[name], array)
            assert decoded[name].dtype == array.dtype

    def test_file_round_trip(self, tmp_path, tiny_net):
        path = tmp_path / 'supernet.ckpt'
        save_checkpoint(path, tiny_net.all_tensors())
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tiny_net.all_tensors())
        np.testing.assert_array_equal(loaded['cand1.layer2.wf1'], tiny_net.weights['cand1.layer2.wf1'].data)

    def test_bad_magic(self):
        payload = bytearray(encode_checkpoint(_tensors()))
        payload[0:8] = b'NOTACKPT'
        with pytest.raises(CheckpointError, match='magic'):
            decode_checkpoint(bytes(payload))

    def test_unsupported_version(self):
        payload = bytearray(encode_checkpoint(_tensors()))
        payload[8] = 9
        with pytest.raises(CheckpointError, match='version'):
            decode_checkpoint(bytes(payload))

    def test_truncated(self):
        payload = encode_checkpoint(_tensors())
        with pytest.raises(CheckpointError, match='truncated'):
            decode_checkpoint(payload[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError, match='trailing'):
            decode_checkpoint(encode_checkpoint(_tensors()) + b'\x00')

    def test_unknown_dtype_code(self):
        payload = bytearray(encode_checkpoint({'a': np.zeros(2)}))
        payload[8 + 6 + 2 + 1] = 7
        with pytest.raises(CheckpointError, match='dtype'):
            decode_checkpoint(bytes(payload))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / 'none.ckpt')


class TestDescriptors:
    def test_written_descriptor_loads(self, tmp_path, tiny_net):
        choice, descriptor = _descriptor(tiny_net)
        write_descriptor(tmp_path / 'architecture.json', descriptor)
        loaded = load_descriptor(tmp_path / 'architecture.json')
        assert ArchChoice.from_descriptor(loaded) == choice

    def test_missing_keys(self, tmp_path):
        with pytest.raises(CheckpointError, match='missing keys'):
            write_descriptor(tmp_path / 'a.json', {'candidate_index': 1})
        (tmp_path / 'b.json').write_text(json.dumps({'gamma': 0.0}))
        with pytest.raises(CheckpointError, match='missing keys'):
            load_descriptor(tmp_path / 'b.json')

    def test_malformed_json(self, tmp_path):
        (tmp_path / 'c.json').write_text('{not json')
        with pytest.raises(CheckpointError):
            load_descriptor(tmp_path / 'c.json')


class TestCheckpointValidation:
    def test_matching_supernet(self, tiny_net):
        _, descriptor = _descriptor(tiny_net)
        tensors = {name: t.data for name, t in tiny_net.all_tensors().items()}
        validate_supernet_checkpoint(descriptor, tensors)

    def test_supernet_shape_mismatch(self, tiny_net):
        _, descriptor = _descriptor(tiny_net)
        tensors = {name: t.data for name, t in tiny_net.all_tensors().items()}
        with pytest.raises(CheckpointError, match='wf1'):
            validate_supernet_checkpoint(dict(descriptor, inner_size=16), tensors)

    def test_supernet_choice_out_of_range(self, tiny_net):
        _, descriptor = _descriptor(tiny_net)
        tensors = {name: t.data for name, t in tiny_net.all_tensors().items()}
        with pytest.raises(CheckpointError, match='candidate_index'):
            validate_supernet_checkpoint(dict(descriptor, candidate_index=3), tensors)

    @pytest.mark.parametrize('depth', [0, 1, 3])
    def test_supernet_gate_depth_mismatch(self, tiny_net, depth):
        _, descriptor = _descriptor(tiny_net)
        tensors = {name: t.data for name, t in tiny_net.all_tensors().items()}
        with pytest.raises(CheckpointError, match='gate'):
            validate_supernet_checkpoint(dict(descriptor, gate_layers=depth), tensors)

    def test_supernet_gate_width_mismatch(self, tiny_net):
        _, descriptor = _descriptor(tiny_net, candidate=1)
        tensors = {name: t.data for name, t in tiny_net.all_tensors().items()}
        tensors['cand1.layer2.gate2.w1'] = np.zeros((8, 8))
        tensors['cand1.layer2.gate2.b1'] = np.zeros(8)
        with pytest.raises(CheckpointError, match='cand1.layer2.gate2'):
            validate_supernet_checkpoint(descriptor, tensors)

    def test_supernet_gate_chain_mismatch(self, tiny_net):
        _, descriptor = _descriptor(tiny_net)
        tensors = {name: t.data for name, t in tiny_net.all_tensors().items()}
        tensors['cand0.layer1.gate1.w1'] = np.zeros((5, 8))
        with pytest.raises(CheckpointError, match='input rows'):
            validate_supernet_checkpoint(descriptor, tensors)

    def test_matching_compact(self, tiny_net):
        choice, descriptor = _descriptor(tiny_net)
        model = build_compact_model(tiny_net, choice)
        validate_compact_checkpoint(descriptor, {n: t.data for n, t in model.params.items()}, 2)

    def test_compact_width_mismatch(self, tiny_net):
        choice, descriptor = _descriptor(tiny_net)
        model = build_compact_model(tiny_net, choice)
        with pytest.raises(CheckpointError):
            validate_compact_checkpoint(dict(descriptor, D_eff=8), {n: t.data for n, t in model.params.items()}, 2)

    def test_compact_gate_depth_mismatch(self, tiny_net):
        choice, descriptor = _descriptor(tiny_net)
        tensors = {n: t.data for n, t in build_compact_model(tiny_net, choice).params.items()}
        with pytest.raises(CheckpointError, match='gate'):
            validate_compact_checkpoint(descriptor, tensors, 0)
        with pytest.raises(CheckpointError, match='gate'):
            validate_compact_checkpoint(descriptor, tensors, 3)


class TestRunFiles:
    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        atomic_write_text(tmp_path / 'sub' / 'x.txt', 'hello')
        assert [p.name for p in (tmp_path / 'sub').iterdir()] == ['x.txt']
        assert (tmp_path / 'sub' / 'x.txt').read_text() == 'hello'

    def test_frame_csv(self, tmp_path):
        write_frame(tmp_path / 'f.csv', pd.DataFrame({'t': [0, 1], 'tau': [1.0, 0.99995]}))
        assert (tmp_path / 'f.csv').read_text() == 't,tau\n0,1.0\n1,0.99995\n'

    def test_ledger_appends(self, tmp_path):
        row = dict(zip(LEDGER_COLUMNS, ['r1', 'compact', 'test', 10, 0.5, 0.25, 0.3, 40, 1000, 42]))
        append_results_ledger(tmp_path / 'results.csv', [row])
        frame = append_results_ledger(tmp_path / 'results.csv', [dict(row, run_id='r2', model='popularity')])
        assert list(frame.columns) == LEDGER_COLUMNS
        assert frame['run_id'].tolist() == ['r1', 'r2']
        assert (tmp_path / 'results.csv').read_text().count('run_id') == 1

    def test_manifest(self, tmp_path):
        started = time.time()
        payload = write_manifest(tmp_path, 'search', 42, 'abc123', 'cfg', 'data', started)
        on_disk = json.loads((tmp_path / 'run_manifest.json').read_text())
        assert on_disk == payload
        assert payload['seed'] == 42 and payload['command'] == 'search'
        assert {'numpy', 'pandas', 'plotly', 'tqdm', 'python'} <= set(payload['versions'])
        assert payload['wall_clock_seconds'] >= 0
