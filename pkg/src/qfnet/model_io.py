"""Model files: ``<name>.json`` manifest plus ``<name>.bin`` little-endian blob.

The blob concatenates every tensor in declaration order (float32 for float
graphs; uint8 weights and int32 biases for quantized graphs) and ends with
a CRC32 of the preceding bytes. The manifest records, per tensor, its
dtype, shape, byte offset and element count.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .ir import LAYER_TYPES, TENSOR_FIELDS, Graph, infer_shapes, layer_params, layer_tensors
from .quantize import QActivation, QConv, QDense, QGlobalAvgPool, QSoftmax, QuantizedGraph
from .tensor import QuantParams

FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "u8": "u1", "i32": "<i4"}
_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8", np.dtype(np.int32): "i32"}


class ModelFormatError(ValueError):
    pass


def _paths(path):
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


class _BlobWriter:
    def __init__(self):
        self.parts = []
        self.offset = 0

    def add(self, arr: np.ndarray) -> dict:
        tag = _DTYPE_TAGS[np.dtype(arr.dtype)]
        data = np.ascontiguousarray(arr).astype(_DTYPES[tag]).tobytes()
        entry = {"dtype": tag, "shape": list(arr.shape), "offset": self.offset, "length": int(arr.size)}
        self.parts.append(data)
        self.offset += len(data)
        return entry

    def payload(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body))


def _read_blob(path: Path, expected_size: int) -> bytes:
    if not path.exists():
        raise ModelFormatError(f"{path}: weight blob missing")
    raw = path.read_bytes()
    if len(raw) != expected_size + 4:
        raise ModelFormatError(f"{path}: truncated blob ({len(raw)} bytes, expected {expected_size + 4})")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError(f"{path}: checksum failure")
    return body


def _tensor(body: bytes, entry: dict) -> np.ndarray:
    dt = np.dtype(_DTYPES[entry["dtype"]])
    end = entry["offset"] + entry["length"] * dt.itemsize
    if entry["offset"] < 0 or end > len(body):
        raise ModelFormatError("tensor extends past the end of the blob")
    arr = np.frombuffer(body, dt, entry["length"], entry["offset"])
    native = {"f32": np.float32, "u8": np.uint8, "i32": np.int32}[entry["dtype"]]
    return arr.astype(native).reshape(entry["shape"])


def _write(path, manifest: dict, blob: _BlobWriter):
    jpath, bpath = _paths(path)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    payload = blob.payload()
    manifest["blob"] = {"file": bpath.name, "size": len(payload) - 4, "crc32": zlib.crc32(payload[:-4])}
    jpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    bpath.write_bytes(payload)


def _read_manifest(path) -> tuple:
    jpath, bpath = _paths(path)
    try:
        manifest = json.loads(jpath.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{jpath}: invalid JSON ({e})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{jpath}: unsupported format_version {version!r} (reader is v{FORMAT_VERSION})")
    body = _read_blob(bpath, int(manifest["blob"]["size"]))
    return manifest, body


def save_graph(g: Graph, path) -> None:
    blob = _BlobWriter()
    layers = []
    for layer in g.layers:
        entry = {"kind": layer.kind, "params": layer_params(layer), "tensors": {}}
        for name, arr in layer_tensors(layer).items():
            entry["tensors"][name] = blob.add(np.asarray(arr, np.float32))
        layers.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "graph_type": "float",
        "name": g.name,
        "seed": g.seed,
        "notes": list(g.notes),
        "input_shape": list(g.input_shape),
        "layers": layers,
    }
    _write(path, manifest, blob)


def load_graph(path) -> Graph:
    manifest, body = _read_manifest(path)
    if manifest.get("graph_type") != "float":
        raise ModelFormatError(f"{path}: not a float graph (graph_type={manifest.get('graph_type')!r})")
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        cls = LAYER_TYPES.get(entry["kind"])
        if cls is None:
            raise ModelFormatError(f"format v{FORMAT_VERSION}: unknown layer kind {entry['kind']!r} at layer {i}")
        kwargs = dict(entry["params"])
        for name in TENSOR_FIELDS.get(entry["kind"], ()):
            kwargs[name] = _tensor(body, entry["tensors"][name]) if name in entry["tensors"] else None
        layers.append(cls(**kwargs))
    g = Graph(tuple(manifest["input_shape"]), layers, manifest["name"], manifest["seed"], list(manifest["notes"]))
    infer_shapes(g)
    return g


def _qp(q: QuantParams) -> dict:
    return q.to_dict()


def save_quantized(qg: QuantizedGraph, path) -> None:
    blob = _BlobWriter()
    layers = []
    for layer in qg.layers:
        entry = {"kind": layer.kind, "params": {}, "tensors": {}, "qparams": {}}
        if isinstance(layer, (QConv, QDense)):
            if isinstance(layer, QConv):
                entry["params"] = {"stride": layer.stride, "padding": layer.padding}
            entry["tensors"]["weights"] = blob.add(layer.weights.astype(np.uint8))
            entry["tensors"]["bias"] = blob.add(layer.bias.astype(np.int32))
            entry["qparams"] = {"weights": _qp(layer.w_qparams), "input": _qp(layer.in_qparams),
                                "output": _qp(layer.out_qparams)}
        elif isinstance(layer, QActivation):
            entry["params"] = {"act": layer.act}
            entry["qparams"] = {"output": _qp(layer.out_qparams)}
        elif isinstance(layer, QGlobalAvgPool):
            entry["qparams"] = {"input": _qp(layer.in_qparams), "output": _qp(layer.out_qparams)}
        layers.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "graph_type": "quantized",
        "name": qg.name,
        "notes": list(qg.notes),
        "input_shape": list(qg.input_shape),
        "input_qparams": _qp(qg.input_qparams),
        "layers": layers,
    }
    _write(path, manifest, blob)


def load_quantized(path) -> QuantizedGraph:
    manifest, body = _read_manifest(path)
    if manifest.get("graph_type") != "quantized":
        raise ModelFormatError(f"{path}: not a quantized graph")
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        kind = entry["kind"]
        qp = {k: QuantParams.from_dict(v) for k, v in entry.get("qparams", {}).items()}
        if kind in ("conv2d", "depthwise_conv2d"):
            layers.append(QConv(kind, _tensor(body, entry["tensors"]["weights"]), qp["weights"],
                                _tensor(body, entry["tensors"]["bias"]), qp["input"], qp["output"],
                                entry["params"]["stride"], entry["params"]["padding"]))
        elif kind == "dense":
            layers.append(QDense(_tensor(body, entry["tensors"]["weights"]), qp["weights"],
                                 _tensor(body, entry["tensors"]["bias"]), qp["input"], qp["output"]))
        elif kind == "activation":
            layers.append(QActivation(entry["params"]["act"], qp["output"]))
        elif kind == "global_avg_pool":
            layers.append(QGlobalAvgPool(qp["input"], qp["output"]))
        elif kind == "softmax":
            layers.append(QSoftmax())
        else:
            raise ModelFormatError(f"format v{FORMAT_VERSION}: unknown quantized layer kind {kind!r} at layer {i}")
    return QuantizedGraph(tuple(manifest["input_shape"]), QuantParams.from_dict(manifest["input_qparams"]),
                          layers, manifest["name"], list(manifest["notes"]))


def load_any(path):
    """Load a float or quantized model depending on its manifest."""
    jpath, _ = _paths(path)
    kind = json.loads(jpath.read_text()).get("graph_type")
    return load_quantized(path) if kind == "quantized" else load_graph(path)


def quantized_equal(a: QuantizedGraph, b: QuantizedGraph) -> bool:
    if (tuple(a.input_shape), a.input_qparams, len(a.layers)) != (tuple(b.input_shape), b.input_qparams, len(b.layers)):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        for k, va in vars(la).items():
            vb = vars(lb)[k]
            if isinstance(va, np.ndarray):
                if va.dtype != vb.dtype or va.shape != vb.shape or va.tobytes() != vb.tobytes():
                    return False
            elif va != vb:
                return False
    return True
