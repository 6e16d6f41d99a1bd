"""On-disk model format (".dms") and the framework-neutral import format.

Layout (all little-endian):

    magic "DNMS" | version u16 | manifest_len u32 | manifest JSON (UTF-8)
    node_count u32 | node table | tensor blobs (raw float32, node order)

The manifest carries name, input shape, class count, metrics, the
conv-chain edges, and the protected set.  The node table holds one
fixed-size header per node (kind tag + hyperparameters); tensor payloads
follow contiguously in node order, so the byte size of a serialized model
is a pure function of its architecture.  Deserialization errors carry the
byte offset at which parsing failed.

The import format is a directory with a ``manifest.json`` naming each
layer and one raw little-endian float32 blob per tensor, so external
scripts can hand over checkpoints without sharing any code with this
package.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, StructureError
from .graph import ModelGraph, ModelMeta
from .layers import (
    Add,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    layer_tensors,
)

MAGIC = b"DNMS"
VERSION = 1

_TAGS = {"Conv2d": 1, "BatchNorm2d": 2, "Linear": 3, "ReLU": 4,
         "MaxPool2d": 5, "AvgPool2d": 6, "Flatten": 7, "Add": 8}
_KIND_BY_TAG = {v: k for k, v in _TAGS.items()}


def _manifest_json(model: ModelGraph) -> bytes:
    manifest = {
        "name": model.meta.name,
        "input_shape": list(model.meta.input_shape),
        "class_count": model.meta.class_count,
        "metrics": model.meta.metrics,
        "conv_chain": sorted([dst, src] for dst, src in model.conv_chain.items()),
        "protected": sorted(model.protected),
    }
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _node_header(node: Layer) -> bytes:
    tag = _TAGS[type(node).__name__]
    if isinstance(node, Conv2d):
        o, i, kh, kw = node.weight.shape
        return struct.pack("<B6IB", tag, o, i, kh, kw, node.stride, node.padding,
                           1 if node.bias is not None else 0)
    if isinstance(node, BatchNorm2d):
        return struct.pack("<BIf", tag, node.channels, node.eps)
    if isinstance(node, Linear):
        return struct.pack("<B2IB", tag, node.out_features, node.in_features,
                           1 if node.bias is not None else 0)
    if isinstance(node, (MaxPool2d, AvgPool2d)):
        return struct.pack("<B2I", tag, node.kernel_size, node.stride)
    if isinstance(node, Add):
        return struct.pack("<BI", tag, node.other)
    return struct.pack("<B", tag)  # ReLU, Flatten


def serialize(model: ModelGraph) -> bytes:
    """Byte-exact, deterministic encoding of a model."""
    manifest = _manifest_json(model)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(manifest)), manifest,
             struct.pack("<I", len(model.nodes))]
    parts.extend(_node_header(nd) for nd in model.nodes)
    for nd in model.nodes:
        for _, tensor in layer_tensors(nd):
            parts.append(tensor.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated blob while reading {what}", offset=self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").reshape(shape)


def deserialize(data: bytes) -> ModelGraph:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic; not a .dms model", offset=0)
    (version, man_len) = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    man_start = r.pos
    try:
        manifest = json.loads(r.take(man_len, "manifest").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"bad manifest JSON: {e}", offset=man_start) from None
    (node_count,) = r.unpack("<I", "node count")

    headers = []
    for i in range(node_count):
        (tag,) = r.unpack("<B", f"node {i} tag")
        kind = _KIND_BY_TAG.get(tag)
        if kind is None:
            raise FormatError(f"unknown node tag {tag}", offset=r.pos - 1)
        if kind == "Conv2d":
            headers.append((kind, r.unpack("<6IB", f"node {i} conv header")))
        elif kind == "BatchNorm2d":
            headers.append((kind, r.unpack("<If", f"node {i} bn header")))
        elif kind == "Linear":
            headers.append((kind, r.unpack("<2IB", f"node {i} linear header")))
        elif kind in ("MaxPool2d", "AvgPool2d"):
            headers.append((kind, r.unpack("<2I", f"node {i} pool header")))
        elif kind == "Add":
            headers.append((kind, r.unpack("<I", f"node {i} add header")))
        else:
            headers.append((kind, ()))

    nodes: list[Layer] = []
    for i, (kind, h) in enumerate(headers):
        what = f"node {i} tensors"
        if kind == "Conv2d":
            o, c, kh, kw, stride, padding, has_bias = h
            w = r.tensor((o, c, kh, kw), what)
            b = r.tensor((o,), what) if has_bias else None
            nodes.append(Conv2d(w, b, stride=stride, padding=padding))
        elif kind == "BatchNorm2d":
            ch, eps = h
            g, be, mu, var = (r.tensor((ch,), what) for _ in range(4))
            nodes.append(BatchNorm2d(g, be, mu, var, eps=eps))
        elif kind == "Linear":
            o, c, has_bias = h
            w = r.tensor((o, c), what)
            b = r.tensor((o,), what) if has_bias else None
            nodes.append(Linear(w, b))
        elif kind == "MaxPool2d":
            nodes.append(MaxPool2d(*h))
        elif kind == "AvgPool2d":
            nodes.append(AvgPool2d(*h))
        elif kind == "Add":
            nodes.append(Add(h[0]))
        elif kind == "ReLU":
            nodes.append(ReLU())
        else:
            nodes.append(Flatten())
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after model payload", offset=r.pos)

    try:
        meta = ModelMeta(
            name=str(manifest["name"]),
            input_shape=tuple(int(d) for d in manifest["input_shape"]),
            class_count=int(manifest["class_count"]),
            metrics=dict(manifest.get("metrics", {})),
        )
        chain = {int(dst): int(src) for dst, src in manifest.get("conv_chain", [])}
        protected = frozenset(int(p) for p in manifest.get("protected", []))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"manifest missing or malformed field: {e}", offset=man_start) from None
    try:
        return ModelGraph(tuple(nodes), chain, protected, meta)
    except StructureError as e:
        raise FormatError(f"inconsistent model structure: {e}", offset=man_start) from None


def serialized_size(model: ModelGraph) -> int:
    return len(serialize(model))


def save_model(model: ModelGraph, path: str | Path) -> int:
    data = serialize(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: str | Path) -> ModelGraph:
    return deserialize(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# framework-neutral import/export directory format

_TENSOR_FIELDS = {
    "Conv2d": ("weight", "bias"),
    "BatchNorm2d": ("gamma", "beta", "running_mean", "running_var"),
    "Linear": ("weight", "bias"),
}


def export_model_dir(model: ModelGraph, path: str | Path) -> None:
    """Write a model as manifest.json plus one raw f32 blob per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, nd in enumerate(model.nodes):
        entry: dict = {"kind": type(nd).__name__}
        if isinstance(nd, Conv2d):
            entry.update(stride=nd.stride, padding=nd.padding)
        elif isinstance(nd, BatchNorm2d):
            entry.update(eps=nd.eps)
        elif isinstance(nd, (MaxPool2d, AvgPool2d)):
            entry.update(kernel_size=nd.kernel_size, stride=nd.stride)
        elif isinstance(nd, Add):
            entry.update(other=nd.other)
        for name, tensor in layer_tensors(nd):
            fname = f"n{i:03d}.{name}.f32"
            (root / fname).write_bytes(tensor.astype("<f4", copy=False).tobytes())
            entry[name] = fname
            entry[f"{name}_shape"] = list(tensor.shape)
        entries.append(entry)
    manifest = {
        "name": model.meta.name,
        "input_shape": list(model.meta.input_shape),
        "class_count": model.meta.class_count,
        "layers": entries,
        "conv_chain": sorted([d, s] for d, s in model.conv_chain.items()),
        "protected": sorted(model.protected),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _read_blob(root: Path, entry: dict, name: str, required: bool) -> np.ndarray | None:
    fname = entry.get(name)
    if fname is None:
        if required:
            raise FormatError(f"layer entry {entry.get('kind')} missing tensor {name!r}")
        return None
    shape = tuple(int(d) for d in entry[f"{name}_shape"])
    blob = (root / fname).read_bytes()
    want = 4 * int(np.prod(shape))
    if len(blob) != want:
        raise FormatError(f"{fname}: expected {want} bytes for shape {shape}, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4").reshape(shape)


def import_model_dir(path: str | Path) -> ModelGraph:
    """Load a model from the manifest.json + raw-blob directory layout."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: no manifest.json") from None
    except ValueError as e:
        raise FormatError(f"{root}/manifest.json: {e}") from None
    nodes: list[Layer] = []
    for entry in manifest["layers"]:
        kind = entry["kind"]
        if kind == "Conv2d":
            nodes.append(Conv2d(
                _read_blob(root, entry, "weight", True),
                _read_blob(root, entry, "bias", False),
                stride=int(entry.get("stride", 1)),
                padding=int(entry.get("padding", 0)),
            ))
        elif kind == "BatchNorm2d":
            nodes.append(BatchNorm2d(
                _read_blob(root, entry, "gamma", True),
                _read_blob(root, entry, "beta", True),
                _read_blob(root, entry, "running_mean", True),
                _read_blob(root, entry, "running_var", True),
                eps=float(entry.get("eps", 1e-5)),
            ))
        elif kind == "Linear":
            nodes.append(Linear(
                _read_blob(root, entry, "weight", True),
                _read_blob(root, entry, "bias", False),
            ))
        elif kind == "ReLU":
            nodes.append(ReLU())
        elif kind == "MaxPool2d":
            nodes.append(MaxPool2d(int(entry["kernel_size"]), int(entry["stride"])))
        elif kind == "AvgPool2d":
            nodes.append(AvgPool2d(int(entry["kernel_size"]), int(entry["stride"])))
        elif kind == "Flatten":
            nodes.append(Flatten())
        elif kind == "Add":
            nodes.append(Add(int(entry["other"])))
        else:
            raise FormatError(f"unknown layer kind {kind!r} in manifest")
    meta = ModelMeta(
        name=str(manifest.get("name", root.name)),
        input_shape=tuple(int(d) for d in manifest["input_shape"]),
        class_count=int(manifest["class_count"]),
    )
    chain = {int(d): int(s) for d, s in manifest.get("conv_chain", [])}
    protected = frozenset(int(p) for p in manifest.get("protected", []))
    try:
        return ModelGraph(tuple(nodes), chain, protected, meta)
    except StructureError as e:
        raise FormatError(f"inconsistent model structure: {e}") from None
