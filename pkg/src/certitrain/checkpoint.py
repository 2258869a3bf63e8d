"""Checkpoint container: magic "CTRN", version, JSON header, f64 blobs.

Layout: 4 magic bytes, little-endian u32 version, little-endian u32 header
length, UTF-8 JSON header, then one little-endian float64 blob per parameter
tensor in declaration order.  The header records enough structure to rebuild
the network without consulting the architecture registry.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .net import Affine, Conv2d, Flatten, Network, ReLU

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"CTRN"
VERSION = 1


def _layer_descriptors(net: Network):
    out = []
    for layer in net.layers:
        if isinstance(layer, Affine):
            out.append({"kind": "affine", "out": layer.weight.shape[0],
                        "in": layer.weight.shape[1]})
        elif isinstance(layer, Conv2d):
            out.append({"kind": "conv2d", "shape": list(layer.weight.shape),
                        "stride": layer.stride, "padding": layer.padding})
        elif isinstance(layer, ReLU):
            out.append({"kind": "relu"})
        elif isinstance(layer, Flatten):
            out.append({"kind": "flatten"})
        else:
            raise TypeError(f"cannot serialize layer {layer!r}")
    return out


def save_checkpoint(path, net: Network, meta=None):
    """Write the network (and optional metadata: arch name, seed, epoch)."""
    meta = dict(meta or {})
    header = {
        "meta": meta,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "split_index": net.split_index,
        "layers": _layer_descriptors(net),
        "tensor_shapes": [list(a.shape) for a in net.param_arrays()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for arr in net.param_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into (Network, meta)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = []
        for shape in header["tensor_shapes"]:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated parameter blob")
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    layers = []
    it = iter(arrays)
    for desc in header["layers"]:
        if desc["kind"] == "affine":
            layers.append(Affine(next(it), next(it)))
        elif desc["kind"] == "conv2d":
            layers.append(Conv2d(next(it), next(it), desc["stride"], desc["padding"]))
        elif desc["kind"] == "relu":
            layers.append(ReLU())
        elif desc["kind"] == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"{path}: unknown layer kind {desc['kind']!r}")
    net = Network(layers, header["split_index"], header["num_classes"],
                  tuple(header["input_shape"]))
    return net, header.get("meta", {})
