# artifacts.py
"""
Run-directory files: atomic writes, the binary checkpoint layout, the
architecture descriptor, CSV logs and the results ledger.

Checkpoint layout (all integers little-endian):

    magic            8 bytes   b"DNSRCKPT"
    version          u16       1
    tensor count     u32
    per tensor:
      name length    u16, then UTF-8 name bytes
      dtype code     u8        0 = float64, 1 = float32, 2 = int64
      ndim           u8, then ndim x u32 extents
      data           row-major little-endian values
"""
import io
import json
import logging
import os
import platform
import struct
import tempfile
import time
from pathlib import Path

import numpy as np
import pandas as pd

from errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'DNSRCKPT'
CHECKPOINT_VERSION = 1
DTYPE_CODES = {0: np.dtype('<f8'), 1: np.dtype('<f4'), 2: np.dtype('<i8')}
CODE_FOR_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}

DESCRIPTOR_KEYS = ('candidate_index', 'gamma', 'gamma_prime', 'd_eff', 'D_eff', 'layers', 'flops', 'seed',
                   'hidden_size', 'inner_size', 'num_layers', 'num_heads', 'num_candidates', 'max_seq_len',
                   'num_items', 'gate_layers')
LEDGER_COLUMNS = ['run_id', 'model', 'split', 'k', 'recall_at_k', 'mrr_at_k', 'ndcg_at_k', 'count', 'flops', 'seed']


def atomic_write_bytes(path, payload):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))


def write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Error reading {path}: {str(e)}") from e


def write_frame(path, frame):
    """CSV via pandas, written atomically."""
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator='\n')
    atomic_write_text(path, buffer.getvalue())


# ---------- CHECKPOINTS ----------------------------------------------------------


def encode_checkpoint(tensors):
    """Serialise a name -> array (or Tensor) mapping, names in sorted order."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack('<HI', CHECKPOINT_VERSION, len(tensors)))
    for name in sorted(tensors):
        value = tensors[name]
        array = np.asarray(getattr(value, 'data', value))
        if array.dtype.kind == 'f':
            array = array.astype('<f8' if array.dtype.itemsize == 8 else '<f4')
        else:
            array = array.astype('<i8')
        encoded = name.encode('utf-8')
        out.write(struct.pack('<H', len(encoded)))
        out.write(encoded)
        out.write(struct.pack('<BB', CODE_FOR_DTYPE[array.dtype], array.ndim))
        out.write(struct.pack(f'<{array.ndim}I', *array.shape))
        out.write(np.ascontiguousarray(array).tobytes())
    return out.getvalue()


def decode_checkpoint(payload):
    view = memoryview(payload)
    offset = 0

    def _take(size):
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[offset:offset + size]
        offset += size
        return chunk

    if bytes(_take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, count = struct.unpack('<HI', _take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack('<H', _take(2))
        name = bytes(_take(name_len)).decode('utf-8')
        code, ndim = struct.unpack('<BB', _take(2))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor '{name}' has unknown dtype code {code}")
        shape = struct.unpack(f'<{ndim}I', _take(4 * ndim))
        dtype = DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(bytes(_take(size)), dtype=dtype).reshape(shape)
    if offset != len(view):
        raise CheckpointError("checkpoint has trailing bytes")
    return tensors


def save_checkpoint(path, tensors):
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path):
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Error reading checkpoint {path}: {str(e)}") from e
    return decode_checkpoint(payload)


# ---------- DESCRIPTORS ----------------------------------------------------------


def write_descriptor(path, descriptor):
    missing = [key for key in DESCRIPTOR_KEYS if key not in descriptor]
    if missing:
        raise CheckpointError(f"descriptor is missing keys: {', '.join(missing)}")
    write_json(path, descriptor)


def load_descriptor(path):
    descriptor = read_json(path)
    missing = [key for key in DESCRIPTOR_KEYS if key not in descriptor]
    if missing:
        raise CheckpointError(f"descriptor {path} is missing keys: {', '.join(missing)}")
    return descriptor


def _expect_shape(tensors, name, shape):
    if name not in tensors:
        raise CheckpointError(f"checkpoint has no tensor '{name}'")
    if tuple(tensors[name].shape) != tuple(shape):
        raise CheckpointError(
            f"checkpoint tensor '{name}' has shape {tuple(tensors[name].shape)}, descriptor implies {tuple(shape)}"
        )


def validate_supernet_checkpoint(descriptor, tensors):
    """Check a supernet checkpoint against a descriptor before any compute."""
    d, D = descriptor['hidden_size'], descriptor['inner_size']
    m, L = descriptor['num_candidates'], descriptor['num_layers']
    if not 1 <= descriptor['candidate_index'] <= m:
        raise CheckpointError(f"descriptor candidate_index {descriptor['candidate_index']} outside 1..{m}")
    if not 1 <= descriptor['layers'] <= L:
        raise CheckpointError(f"descriptor layers {descriptor['layers']} outside 1..{L}")
    _expect_shape(tensors, 'emb.item', (descriptor['num_items'] + 1, d))
    _expect_shape(tensors, 'emb.pos', (descriptor['max_seq_len'], d))
    _expect_shape(tensors, 'arch.alpha', (m,))
    _expect_shape(tensors, 'arch.beta', (L,))
    for i in range(m):
        for layer in range(1, L + 1):
            prefix = f'cand{i}.layer{layer}'
            _expect_shape(tensors, f'{prefix}.wq', (d, d))
            _expect_shape(tensors, f'{prefix}.wf1', (d, D))
            _expect_shape(tensors, f'{prefix}.wf2', (D, d))
            chosen = i == descriptor['candidate_index'] - 1
            for k, full, live in ((1, d, descriptor['d_eff']), (2, D, descriptor['D_eff'])):
                _check_gate(tensors, f'{prefix}.gate{k}', descriptor['gate_layers'], d, full, live if chosen else None)


def _check_gate(tensors, prefix, gate_layers, input_size, full_width, live_width=None):
    """Gate weights must exist at exactly ``gate_layers`` depth and chain from the input width."""
    if f'{prefix}.w{gate_layers}' in tensors:
        raise CheckpointError(f"checkpoint gate '{prefix}' is deeper than gate_layers={gate_layers}")
    width = input_size
    for j in range(gate_layers):
        name = f'{prefix}.w{j}'
        if name not in tensors:
            raise CheckpointError(f"checkpoint has no tensor '{name}' (gate_layers={gate_layers})")
        if tensors[name].ndim != 2:
            raise CheckpointError(f"checkpoint gate tensor '{name}' is not a matrix")
        rows, out = tensors[name].shape
        if rows != width:
            raise CheckpointError(f"checkpoint gate tensor '{name}' has {rows} input rows, expected {width}")
        width = out
    if gate_layers and not 0 < width <= full_width:
        raise CheckpointError(f"checkpoint gate '{prefix}' has output width {width}, above {full_width}")
    if gate_layers and live_width is not None and width != live_width:
        raise CheckpointError(f"checkpoint gate '{prefix}' has output width {width}, descriptor implies {live_width}")


def validate_compact_checkpoint(descriptor, tensors, gate_layers):
    d = descriptor['hidden_size']
    d_eff, D_eff = descriptor['d_eff'], descriptor['D_eff']
    _expect_shape(tensors, 'emb.item', (descriptor['num_items'] + 1, d))
    _expect_shape(tensors, 'emb.pos', (descriptor['max_seq_len'], d))
    for layer in range(1, descriptor['layers'] + 1):
        prefix = f'layer{layer}'
        _expect_shape(tensors, f'{prefix}.wq', (d if layer == 1 else d_eff, d_eff))
        _expect_shape(tensors, f'{prefix}.wf1', (d_eff, D_eff))
        _expect_shape(tensors, f'{prefix}.wf2', (D_eff, d_eff))
        if gate_layers:
            name = f'{prefix}.gate1.w{gate_layers - 1}'
            if name not in tensors or tensors[name].shape[-1] != d_eff:
                raise CheckpointError(f"checkpoint has no gate tensor '{name}' of output width {d_eff}")
    if gate_layers == 0 and any('.gate' in name for name in tensors):
        raise CheckpointError("checkpoint carries gate weights but the configuration has no gates")


# ---------- LEDGER & MANIFEST ----------------------------------------------------------


def append_results_ledger(path, rows):
    """Append metric rows to the CSV ledger, creating it with a header if needed."""
    path = Path(path)
    new = pd.DataFrame(rows, columns=LEDGER_COLUMNS)
    if path.exists():
        existing = pd.read_csv(path)
        new = pd.concat([existing, new], ignore_index=True)
    write_frame(path, new)
    return new


def package_versions():
    import plotly
    import tqdm
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'pandas': pd.__version__,
        'plotly': plotly.__version__,
        'tqdm': tqdm.__version__,
    }


def write_manifest(out_dir, command, seed, run_id, config_hash, data_hash, started):
    """Provenance of a run directory: seed, input hashes, versions, wall-clock."""
    finished = time.time()
    payload = {
        'command': command,
        'seed': seed,
        'config_sha256': config_hash,
        'data_sha256': data_hash,
        'run_id': run_id,
        'versions': package_versions(),
        'started': time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(started)),
        'wall_clock_seconds': round(finished - started, 3),
    }
    write_json(Path(out_dir) / 'run_manifest.json', payload)
    return payload
