# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Binary checkpoint files.

Layout (all integers little-endian):

    magic       4 bytes   b"L2SA"
    version     u16
    width       u8        element width in bytes, 4 or 8
    graph       u32 length, then the UTF-8 JSON graph description
    metadata    u32 length, then UTF-8 JSON (epoch, seed, metrics, ...)
    count       u32 number of tensors
    tensors     for each: u16 name length, name, u8 rank, rank x u32
                extents, then the raw values

Values are stored exactly, so saving and loading is bit-identical.
"""

__all__ = ['MAGIC', 'VERSION', 'Checkpoint', 'save_checkpoint',
           'load_checkpoint', 'read_checkpoint']

import os
import json
import struct
import logging

import numpy as np
from paranoid.decorators import accepts, returns, paranoidclass, paranoidconfig
from paranoid.types import Maybe, Dict, String, Unchecked

from .autodiff import Parameters
from .model import LayerGraph
from .types import FilePath
from .exceptions import CheckpointError, GraphError

logger = logging.getLogger(__name__)

MAGIC = b"L2SA"
VERSION = 1
_DTYPES = {4 : np.dtype('<f4'), 8 : np.dtype('<f8')}

@paranoidclass
class Checkpoint:
    """A network description, its parameters, and training metadata."""
    def __init__(self, graph, params, metadata=None):
        self.graph = graph
        self.params = params
        self.metadata = dict(metadata or {})
    @staticmethod
    def _test(v):
        assert isinstance(v.graph, LayerGraph)
        assert isinstance(v.params, Parameters)
        assert isinstance(v.metadata, dict)

class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path
    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("%s: truncated checkpoint" % self.path)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk
    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
    def text(self):
        n, = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("%s: corrupt text block" % self.path)

@accepts(LayerGraph, Unchecked(Parameters), FilePath, Maybe(Dict(String, Unchecked())))
@paranoidconfig(unit_test=False)
def save_checkpoint(graph, params, path, metadata=None):
    """Write `graph`, `params` and `metadata` to `path`.

    Every parameter slot of the graph must be present with its declared
    shape, and all tensors must share one element type.
    """
    shapes = graph.parameter_shapes()
    if list(shapes) != params.names():
        raise CheckpointError("Parameters %s do not match graph slots %s" %
                              (params.names(), list(shapes)))
    widths = {params[k].dtype.itemsize for k in shapes}
    if len(widths) != 1 or not widths <= set(_DTYPES):
        raise CheckpointError("Parameters must share one 32 or 64 bit float type")
    width = widths.pop()
    chunks = [MAGIC, struct.pack("<HB", VERSION, width)]
    for block in (graph.to_text(), json.dumps(metadata or {}, sort_keys=True)):
        encoded = block.encode("utf-8")
        chunks += [struct.pack("<I", len(encoded)), encoded]
    chunks.append(struct.pack("<I", len(shapes)))
    for name, shape in shapes.items():
        value = params[name]
        if value.shape != tuple(shape):
            raise CheckpointError("Parameter %s has shape %s, expected %s" % (name, value.shape, shape))
        encoded = name.encode("utf-8")
        chunks += [struct.pack("<H", len(encoded)), encoded,
                   struct.pack("<B%iI" % len(shape), len(shape), *shape),
                   np.ascontiguousarray(value, dtype=_DTYPES[width]).tobytes()]
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)
    logger.info("Saved checkpoint %s (%i tensors)" % (path, len(shapes)))

@accepts(FilePath)
@returns(Checkpoint)
@paranoidconfig(unit_test=False)
def read_checkpoint(path):
    """Read a checkpoint written by save_checkpoint."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError("Cannot read checkpoint %s: %s" % (path, e.strerror))
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError("%s is not a checkpoint (bad magic)" % path)
    version, width = r.unpack("<HB")
    if version != VERSION:
        raise CheckpointError("%s: checkpoint version %i, expected %i" % (path, version, VERSION))
    if width not in _DTYPES:
        raise CheckpointError("%s: invalid element width %i" % (path, width))
    try:
        graph = LayerGraph.from_text(r.text())
        metadata = json.loads(r.text())
    except (GraphError, ValueError) as e:
        raise CheckpointError("%s: %s" % (path, e))
    count, = r.unpack("<I")
    params = Parameters()
    for _ in range(count):
        n, = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="replace")
        rank, = r.unpack("<B")
        shape = r.unpack("<%iI" % rank)
        size = int(np.prod(shape))*width
        params[name] = np.frombuffer(r.take(size), dtype=_DTYPES[width]).reshape(shape) \
                         .astype(_DTYPES[width].newbyteorder('='))
    if r.pos != len(data):
        raise CheckpointError("%s: trailing bytes after tensors" % path)
    expected = graph.parameter_shapes()
    if params.names() != list(expected) or \
       any(params[k].shape != tuple(s) for k,s in expected.items()):
        raise CheckpointError("%s: tensors do not match the graph's parameter slots" % path)
    return Checkpoint(graph, params, metadata)

@accepts(FilePath)
@paranoidconfig(unit_test=False)
def load_checkpoint(path):
    """Return the (graph, parameters) stored at `path`."""
    ckpt = read_checkpoint(path)
    return ckpt.graph, ckpt.params
