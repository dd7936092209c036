############################################################
# misret: offline return-conditioned recommendation        #
# Checkpoint container: length-prefixed JSON header        #
# followed by raw little-endian float32 tensor data.       #
############################################################

import json
import struct
from collections import OrderedDict

import numpy as np
import torch

from .utils import setup_log

log = setup_log("mrCore.checkpoint")

CHECKPOINT_VERSION = 1
TENSOR_DTYPE = "<f4"


class CheckpointError(Exception):
    pass


def write_checkpoint(path, cfg, tensors, extra=None):
    """
    :param path: Output file.
    :param cfg: JSON-serializable model configuration.
    :param tensors: Ordered mapping name -> tensor. Written in this order.
    :param extra: JSON-serializable metadata stored in the header.
    :return: None
    """
    table = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu().numpy()
        arr = np.ascontiguousarray(t, dtype=TENSOR_DTYPE)
        blob = arr.tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": TENSOR_DTYPE,
            "offset": offset,
            "nbytes": len(blob)
        })
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "cfg": cfg,
        "tensors": table,
        "extra": extra or {}
    }, sort_keys=True).encode('utf-8')

    with open(path, 'wb') as f:
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    log.debug("Wrote %d tensors (%d bytes) to %s" % (len(table), offset, path))


def read_header(data):
    if len(data) < 8:
        raise CheckpointError("corrupted header: file too short")
    (n,) = struct.unpack('<Q', data[:8])
    if 8 + n > len(data):
        raise CheckpointError("corrupted header: length %d exceeds file size" % n)
    try:
        header = json.loads(data[8:8 + n].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError("corrupted header: %s" % err)
    if not isinstance(header, dict) or not {"version", "cfg", "tensors"} <= set(header):
        raise CheckpointError("corrupted header: missing version, cfg or tensor table")
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError("checkpoint version %r is not supported (expected %d)"
                              % (header["version"], CHECKPOINT_VERSION))
    return header, 8 + n


def read_checkpoint(path):
    """
    :return: (header dict, OrderedDict name -> float32 torch.Tensor)
    """
    with open(path, 'rb') as f:
        data = f.read()
    header, base = read_header(data)

    tensors = OrderedDict()
    for entry in header["tensors"]:
        name = entry.get("name", "?")
        if entry.get("dtype") != TENSOR_DTYPE:
            raise CheckpointError("tensor %s has unsupported dtype %r" % (name, entry.get("dtype")))
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(data):
            raise CheckpointError("tensor %s is truncated" % name)
        arr = np.frombuffer(data, dtype=TENSOR_DTYPE, count=entry["nbytes"] // 4, offset=start)
        tensors[name] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header, tensors
