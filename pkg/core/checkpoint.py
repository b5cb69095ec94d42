"""
Model checkpoints.

Layout: 7-byte magic, 1 version byte, little-endian u64 header length, a
JSON header (hyperparameters and segment table), then every parameter
segment as little-endian float64 in header order.
"""
import json
import struct

import numpy as np

from core.shared import CheckpointCorruptError, CheckpointShapeError, CheckpointVersionError
from core.training import LinearHead, Model, ModelSpec, SummationHead, model_parameters
from core.experts import ExpertBank
from core.softmoe_layer import RouterParams, SoftMoELayerState

MAGIC = b'SOFTMOE'
VERSION = 1
PREFIX = struct.Struct('<7sBQ')


def expected_shapes(spec):
    """Segment name -> shape implied by the hyperparameters."""
    h = max(1, spec.hidden_budget // spec.n)
    d, n = spec.token_dim, spec.n
    shapes = {}
    for i in range(spec.layers):
        shapes[f"layer{i}.phi"] = (d, n)
        shapes[f"layer{i}.w1"] = (n, d, h)
        shapes[f"layer{i}.b1"] = (n, h)
        shapes[f"layer{i}.w2"] = (n, h, d)
        shapes[f"layer{i}.b2"] = (n, d)
    if spec.head == 'linear':
        shapes['head.w'] = (spec.tokens * d, spec.classes)
        shapes['head.b'] = (spec.classes,)
    return shapes


def _spec_dict(spec):
    return {
        'layers': spec.layers, 'tokens': spec.tokens, 'token_dim': spec.token_dim, 'n': spec.n,
        'hidden_budget': spec.hidden_budget, 'head': spec.head, 'classes': spec.classes,
    }


def checkpoint_bytes(model):
    params = model_parameters(model)
    segments = []
    offset = 0
    for name, array in params.items():
        segments.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'length': int(array.size)})
        offset += int(array.size)
    header = json.dumps({'model': _spec_dict(model.spec), 'segments': segments}, sort_keys=True).encode('utf-8')
    payload = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for a in params.values())
    return PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, 'wb') as f:
        f.write(data)
    return path


def parse_checkpoint(data):
    if len(data) < PREFIX.size:
        raise CheckpointCorruptError(f"checkpoint is {len(data)} bytes, shorter than its prefix")
    magic, version, header_len = PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    body = data[PREFIX.size:]
    if len(body) < header_len:
        raise CheckpointCorruptError("header is truncated")
    try:
        header = json.loads(body[:header_len].decode('utf-8'))
        spec = ModelSpec(**header['model'])
        segments = header['segments']
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointCorruptError(f"unreadable header: {e}") from e

    payload = body[header_len:]
    total = sum(int(s['length']) for s in segments)
    if len(payload) != total * 8:
        raise CheckpointCorruptError(f"payload has {len(payload)} bytes, header promises {total * 8}")
    values = np.frombuffer(payload, dtype='<f8')

    shapes = expected_shapes(spec)
    if sorted(s['name'] for s in segments) != sorted(shapes):
        raise CheckpointShapeError("segment names do not match the model hyperparameters")
    arrays = {}
    for s in segments:
        shape = tuple(s['shape'])
        if shape != shapes[s['name']] or int(np.prod(shape)) != int(s['length']):
            raise CheckpointShapeError(f"segment {s['name']} has shape {shape}, expected {shapes[s['name']]}")
        start = int(s['offset'])
        if start < 0 or start + int(s['length']) > values.size:
            raise CheckpointCorruptError(
                f"segment {s['name']} spans [{start}, {start + int(s['length'])}) outside {values.size} values")
        arrays[s['name']] = values[start:start + int(s['length'])].reshape(shape).astype(np.float64)
    return spec, arrays


def model_from_arrays(spec, arrays):
    layers = []
    for i in range(spec.layers):
        bank = ExpertBank(
            w1=arrays[f"layer{i}.w1"], b1=arrays[f"layer{i}.b1"],
            w2=arrays[f"layer{i}.w2"], b2=arrays[f"layer{i}.b2"],
            hidden_budget=spec.hidden_budget,
        )
        layers.append(SoftMoELayerState(RouterParams(arrays[f"layer{i}.phi"]), bank))
    head = LinearHead(w=arrays['head.w'], b=arrays['head.b']) if spec.head == 'linear' else SummationHead()
    return Model(spec=spec, layers=layers, head=head)


def load_checkpoint(path):
    with open(path, 'rb') as f:
        data = f.read()
    spec, arrays = parse_checkpoint(data)
    return model_from_arrays(spec, arrays)
