"""Canonical on-disk model format and abstract graph fingerprinting.

File layout (all integers little-endian):

    offset 0   magic  b"PRNT"
    offset 4   u16    format version (currently 1)
    offset 6   u32    header JSON byte length
    offset 10  u32    CRC-32 of the header JSON bytes
    offset 14  header JSON, space-padded to HEADER_BLOCK bytes
    then       raw float64 parameter blobs, layer order, declared param order

The header is padded to a fixed block so that file size is a pure function
of the architecture skeleton: size = PREAMBLE + HEADER_BLOCK + 8 * params.
That regularity is what the QA gate's size statistics rely on.
"""

from __future__ import annotations

import json
import struct
import zlib
from hashlib import sha256
from pathlib import Path

import numpy as np

from .nn import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool,
    Model,
    ReLU,
    validate_model,
)

MAGIC = b"PRNT"
VERSION = 1
HEADER_BLOCK = 16384
PREAMBLE = 14  # magic + version + length + crc
HEADER_SIZE = PREAMBLE + HEADER_BLOCK


class StoreError(ValueError):
    pass


class BadMagicError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


class HeaderParseError(StoreError):
    pass


class HeaderOverflowError(StoreError):
    pass


class TruncatedBlobError(StoreError):
    pass


class BlobLengthError(StoreError):
    """Header-declared parameter bytes disagree with the file's blob section."""


# ---------------------------------------------------------------------------
# Header encoding
# ---------------------------------------------------------------------------

def _layer_entry(layer):
    if isinstance(layer, Conv2D):
        return {"kind": "Conv2D", "out_channels": layer.out_channels,
                "in_channels": layer.in_channels, "kernel_h": layer.kernel_h,
                "kernel_w": layer.kernel_w, "stride": layer.stride,
                "padding": layer.padding}
    if isinstance(layer, BatchNorm):
        return {"kind": "BatchNorm", "channels": layer.channels, "epsilon": layer.epsilon}
    if isinstance(layer, ReLU):
        return {"kind": "ReLU"}
    if isinstance(layer, MaxPool):
        return {"kind": "MaxPool", "window": layer.window, "stride": layer.stride}
    if isinstance(layer, GlobalAvgPool):
        return {"kind": "GlobalAvgPool"}
    if isinstance(layer, Flatten):
        return {"kind": "Flatten"}
    if isinstance(layer, Dense):
        return {"kind": "Dense", "out_features": layer.out_features,
                "in_features": layer.in_features}
    raise StoreError(f"unknown layer kind {type(layer).__name__}")


def _param_shapes(entry):
    """Parameter tensor shapes implied by a header layer entry, in order."""
    kind = entry["kind"]
    if kind == "Conv2D":
        w = (entry["out_channels"], entry["in_channels"], entry["kernel_h"], entry["kernel_w"])
        return [("weight", w), ("bias", (entry["out_channels"],))]
    if kind == "BatchNorm":
        c = (entry["channels"],)
        return [("gamma", c), ("beta", c), ("running_mean", c), ("running_var", c)]
    if kind == "Dense":
        return [("weight", (entry["out_features"], entry["in_features"])),
                ("bias", (entry["out_features"],))]
    return []


def _layer_from_entry(entry, arrays):
    kind = entry.get("kind")
    if kind == "Conv2D":
        return Conv2D(entry["out_channels"], entry["in_channels"], entry["kernel_h"],
                      entry["kernel_w"], entry["stride"], entry["padding"],
                      weight=arrays["weight"], bias=arrays["bias"])
    if kind == "BatchNorm":
        return BatchNorm(entry["channels"], entry["epsilon"], gamma=arrays["gamma"],
                         beta=arrays["beta"], running_mean=arrays["running_mean"],
                         running_var=arrays["running_var"])
    if kind == "ReLU":
        return ReLU()
    if kind == "MaxPool":
        return MaxPool(entry["window"], entry["stride"])
    if kind == "GlobalAvgPool":
        return GlobalAvgPool()
    if kind == "Flatten":
        return Flatten()
    if kind == "Dense":
        return Dense(entry["out_features"], entry["in_features"],
                     weight=arrays["weight"], bias=arrays["bias"])
    raise HeaderParseError(f"unknown layer kind {kind!r} in header")


def save(model: Model, path) -> None:
    validate_model(model)
    for k, v in model.metadata.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise StoreError("metadata must map str -> str")
    header = {
        "architecture_id": model.architecture_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "metadata": model.metadata,
        "layers": [_layer_entry(layer) for layer in model.layers],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(blob) > HEADER_BLOCK:
        raise HeaderOverflowError(f"header {len(blob)} bytes exceeds block {HEADER_BLOCK}")
    parts = [MAGIC, struct.pack("<HII", VERSION, len(blob), zlib.crc32(blob)),
             blob, b" " * (HEADER_BLOCK - len(blob))]
    for layer in model.layers:
        for _, arr in layer.param_items():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _parse_header(data):
    if len(data) < PREAMBLE:
        raise TruncatedBlobError(f"file has only {len(data)} bytes")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    version, length, crc = struct.unpack("<HII", data[4:PREAMBLE])
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, expected {VERSION}")
    if length > HEADER_BLOCK:
        raise HeaderParseError(f"declared header length {length} exceeds block")
    if len(data) < HEADER_SIZE:
        raise TruncatedBlobError("file shorter than the fixed header block")
    blob = data[PREAMBLE:PREAMBLE + length]
    if zlib.crc32(blob) != crc:
        raise HeaderParseError("header checksum mismatch")
    pad = data[PREAMBLE + length:HEADER_SIZE]
    if pad.strip(b" "):
        raise HeaderParseError("header padding corrupted")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderParseError(f"header JSON unreadable: {e}") from None
    for key in ("architecture_id", "input_shape", "num_classes", "metadata", "layers"):
        if key not in header:
            raise HeaderParseError(f"header missing field {key!r}")
    return header


def load_header(path) -> dict:
    """Parse and verify the header only (no weight blobs)."""
    with open(path, "rb") as fh:
        return _parse_header(fh.read(HEADER_SIZE + 1))


def load(path) -> Model:
    data = Path(path).read_bytes()
    header = _parse_header(data)
    expected = sum(int(np.prod(shape)) for entry in header["layers"]
                   for _, shape in _param_shapes(entry)) * 8
    actual = len(data) - HEADER_SIZE
    if actual < expected:
        raise TruncatedBlobError(f"blob section {actual} bytes, header implies {expected}")
    if actual > expected:
        raise BlobLengthError(f"blob section {actual} bytes, header implies {expected}")
    offset = HEADER_SIZE
    layers = []
    for entry in header["layers"]:
        arrays = {}
        for name, shape in _param_shapes(entry):
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count,
                                         offset=offset).copy().reshape(shape)
            offset += count * 8
        layers.append(_layer_from_entry(entry, arrays))
    model = Model(
        architecture_id=header["architecture_id"],
        input_shape=tuple(header["input_shape"]),
        num_classes=header["num_classes"],
        layers=layers,
        metadata=dict(header["metadata"]),
    )
    validate_model(model)
    return model


def file_size_for(model: Model) -> int:
    """Exact on-disk size: fixed header region plus 8 bytes per parameter."""
    from .nn import parameter_count
    return HEADER_SIZE + 8 * parameter_count(model)


# ---------------------------------------------------------------------------
# Graph fingerprinting
# ---------------------------------------------------------------------------

class GraphFingerprint:
    """Canonical text of the layer skeleton plus its SHA-256 digest.

    Weight values never enter the text; floats (BatchNorm epsilon) are
    excluded so the text is platform-stable.
    """

    __slots__ = ("canonical_text", "digest")

    def __init__(self, canonical_text: str):
        self.canonical_text = canonical_text
        self.digest = sha256(canonical_text.encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return isinstance(other, GraphFingerprint) and self.digest == other.digest

    def __repr__(self):
        return f"GraphFingerprint({self.digest[:12]}...)"


def _skeleton_line(i, layer):
    if isinstance(layer, Conv2D):
        return (f"{i}:Conv2D(out={layer.out_channels},in={layer.in_channels},"
                f"kh={layer.kernel_h},kw={layer.kernel_w},stride={layer.stride},"
                f"pad={layer.padding})")
    if isinstance(layer, BatchNorm):
        return f"{i}:BatchNorm(channels={layer.channels})"
    if isinstance(layer, ReLU):
        return f"{i}:ReLU()"
    if isinstance(layer, MaxPool):
        return f"{i}:MaxPool(window={layer.window},stride={layer.stride})"
    if isinstance(layer, GlobalAvgPool):
        return f"{i}:GlobalAvgPool()"
    if isinstance(layer, Flatten):
        return f"{i}:Flatten()"
    if isinstance(layer, Dense):
        return f"{i}:Dense(out={layer.out_features},in={layer.in_features})"
    raise StoreError(f"unknown layer kind {type(layer).__name__}")


def fingerprint(model: Model) -> GraphFingerprint:
    c, h, w = model.input_shape
    lines = [f"input(channels={c},height={h},width={w})"]
    lines += [_skeleton_line(i, layer) for i, layer in enumerate(model.layers)]
    return GraphFingerprint("\n".join(lines))


def skeleton_id(model: Model) -> str:
    """Digest-derived architecture id for unregistered skeletons."""
    return "arch-" + fingerprint(model).digest[:12]


# ---------------------------------------------------------------------------
# Shipped reference fingerprints
# ---------------------------------------------------------------------------

REFERENCE_TSV = "reference_fingerprints.tsv"


def builtin_reference_dir() -> Path:
    return Path(__file__).parent / "reference_data"


def write_reference_fingerprints(models, out_dir) -> Path:
    """Write per-architecture graph text files and the fingerprint table.

    Table columns: architecture_id, fingerprint digest, SHA-256 of the
    shipped graph text file (which carries a trailing newline, hence the
    two hashes differ).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for model in sorted(models, key=lambda m: m.architecture_id):
        fp = fingerprint(model)
        graph_path = out_dir / f"{model.architecture_id}.graph.txt"
        file_bytes = (fp.canonical_text + "\n").encode("utf-8")
        graph_path.write_bytes(file_bytes)
        rows.append((model.architecture_id, fp.digest, sha256(file_bytes).hexdigest()))
    table = out_dir / REFERENCE_TSV
    with open(table, "w") as fh:
        fh.write("architecture_id\tdigest\tcanonical_text_hash\n")
        for arch, digest, file_hash in rows:
            fh.write(f"{arch}\t{digest}\t{file_hash}\n")
    return table


def load_reference_fingerprints(path=None) -> dict:
    """architecture_id -> (digest, canonical_text_hash)."""
    if path is None:
        path = builtin_reference_dir() / REFERENCE_TSV
    out = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["architecture_id", "digest", "canonical_text_hash"]:
            raise StoreError(f"unexpected reference table header {header}")
        for line in fh:
            arch, digest, file_hash = line.rstrip("\n").split("\t")
            out[arch] = (digest, file_hash)
    return out
