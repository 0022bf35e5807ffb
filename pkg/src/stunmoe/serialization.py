"""Model and calibration container I/O.

Layout (all integers little-endian):

    bytes 0..8    magic "STUNMOE1"
    bytes 8..16   uint64 header length H
    bytes 16..16+H  UTF-8 JSON header
    then          payload blob: tensors back to back, in directory order
    last 4 bytes  uint32 crc32 of the payload blob

The header carries dimensions, activation name, top-k per layer, flags,
free-form metadata (planted partition, sparsity record, ...) and a tensor
directory mapping names to offsets and shapes.  Regular tensors are float32
row-major; mask entries (dtype "bits", names suffixed ".mask") are
bit-packed booleans, most significant bit first.

Headers can be inspected without touching the payload (inspect_header);
loading verifies magic, version, directory consistency, payload length and
checksum before materializing any tensor.
"""

import json
import struct
import zlib

import numpy as np

from stunmoe.errors import (
    ArgumentError,
    ChecksumError,
    FormatError,
    FormatVersionError,
    MagicError,
    TruncatedFileError,
)
from stunmoe.model import MoeLayer, MoeModel

MAGIC = b"STUNMOE1"
FORMAT_VERSION = 1


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _entry_nbytes(entry):
    cells = entry["rows"] * entry["cols"]
    if entry["dtype"] == "f32":
        return cells * 4
    if entry["dtype"] == "bits":
        return (cells + 7) // 8
    raise FormatError(f"unknown tensor dtype {entry['dtype']!r}")


def _write_container(path, header, tensors):
    """tensors: list of (name, dtype, rows, cols, payload_bytes)."""
    directory = []
    offset = 0
    chunks = []
    for name, dtype, rows, cols, payload in tensors:
        directory.append(
            {"name": name, "dtype": dtype, "offset": offset, "rows": rows, "cols": cols}
        )
        chunks.append(payload)
        offset += len(payload)
    header = dict(header)
    header["tensors"] = directory
    blob = b"".join(chunks)
    head = json.dumps(_jsonable(header), separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


def _f32_payload(a):
    out = np.asarray(a, dtype="<f4")
    if not np.isfinite(out).all():
        raise ArgumentError("tensor exceeds float32 range or is non-finite")
    return out.tobytes(order="C")


def _bits_payload(mask):
    return np.packbits(np.asarray(mask, dtype=bool).ravel(order="C")).tobytes()


def read_header(blob_or_path):
    """Parse magic + header from raw bytes; returns (header, header_end)."""
    raw = blob_or_path
    if len(raw) < 16:
        raise TruncatedFileError("file shorter than fixed preamble")
    if raw[:8] != MAGIC:
        raise MagicError("bad magic; not a model container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise TruncatedFileError("declared header extends past end of file")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format version {header.get('format_version')!r}"
        )
    return header, 16 + hlen


def inspect_header(path):
    """Read and validate only the header; the payload is never touched."""
    with open(path, "rb") as f:
        raw = f.read(16)
        if len(raw) < 16:
            raise TruncatedFileError("file shorter than fixed preamble")
        if raw[:8] != MAGIC:
            raise MagicError("bad magic; not a model container")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        head = f.read(hlen)
    if len(head) < hlen:
        raise TruncatedFileError("declared header extends past end of file")
    header, _ = read_header(raw + head)
    return header


def _read_container(path):
    with open(path, "rb") as f:
        raw = f.read()
    header, body_start = read_header(raw)
    entries = header.get("tensors")
    if not isinstance(entries, list):
        raise FormatError("header lacks a tensor directory")
    expected = 0
    seen = set()
    for entry in entries:
        if not isinstance(entry, dict):
            raise FormatError("tensor directory entry is not an object")
        name = entry.get("name")
        if not isinstance(name, str) or name in seen:
            raise FormatError(f"bad or duplicate tensor name {name!r}")
        seen.add(name)
        for field in ("offset", "rows", "cols"):
            v = entry.get(field)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise FormatError(f"tensor {name!r} has bad {field} {v!r}")
        if entry.get("dtype") not in ("f32", "bits"):
            raise FormatError(f"tensor {name!r} has bad dtype {entry.get('dtype')!r}")
        if entry["offset"] != expected:
            raise FormatError(f"tensor {name!r} at unexpected offset")
        expected += _entry_nbytes(entry)
    blob_end = len(raw) - 4
    if blob_end < body_start:
        raise TruncatedFileError("file too short for checksum trailer")
    if blob_end - body_start != expected:
        raise TruncatedFileError(
            f"payload is {blob_end - body_start} bytes, directory declares {expected}"
        )
    blob = raw[body_start:blob_end]
    (stored_crc,) = struct.unpack("<I", raw[blob_end:])
    actual_crc = zlib.crc32(blob)
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"payload crc32 {actual_crc:#010x} != stored {stored_crc:#010x}"
        )
    tensors = {}
    for entry in entries:
        start = entry["offset"]
        nbytes = _entry_nbytes(entry)
        cells = entry["rows"] * entry["cols"]
        buf = blob[start : start + nbytes]
        if entry["dtype"] == "f32":
            a = np.frombuffer(buf, dtype="<f4").astype(np.float64)
            if not np.isfinite(a).all():
                raise FormatError(f"tensor {entry['name']!r} has non-finite entries")
        else:
            a = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=cells).astype(
                bool
            )
        tensors[entry["name"]] = a.reshape(entry["rows"], entry["cols"])
    return header, tensors


def _model_tensor_list(model, masks=None):
    tensors = []
    for m, layer in enumerate(model.layers):
        tensors.append(
            (
                f"layer{m}.router",
                "f32",
                layer.n_experts,
                layer.model_dim,
                _f32_payload(layer.router),
            )
        )
        for e in range(layer.n_experts):
            tensors.append(
                (
                    f"layer{m}.expert{e}.w_in",
                    "f32",
                    layer.hidden_dim,
                    layer.model_dim,
                    _f32_payload(layer.w_in[e]),
                )
            )
            tensors.append(
                (
                    f"layer{m}.expert{e}.w_out",
                    "f32",
                    layer.model_dim,
                    layer.hidden_dim,
                    _f32_payload(layer.w_out[e]),
                )
            )
    if masks:
        for name in sorted(masks):
            mask = np.asarray(masks[name])
            tensors.append(
                (
                    f"{name}.mask",
                    "bits",
                    mask.shape[0],
                    mask.shape[1],
                    _bits_payload(mask),
                )
            )
    return tensors


def save_model(model, path, masks=None):
    """Write a model container; masks is an optional {tensor_name: bool array}."""
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "model_dim": model.model_dim,
        "activation": model.layers[0].activation.value,
        "layers": [
            {
                "n_experts": layer.n_experts,
                "top_k": layer.top_k,
                "hidden_dim": layer.hidden_dim,
            }
            for layer in model.layers
        ],
        "flags": {"renormalize": model.renormalize, "residual": model.residual},
        "metadata": model.metadata,
    }
    _write_container(path, header, _model_tensor_list(model, masks))


def load_model(path, with_masks=False):
    """Load a model container; with_masks=True also returns {name: bool array}."""
    header, tensors = _read_container(path)
    if header.get("kind") != "model":
        raise FormatError(f"container kind {header.get('kind')!r} is not a model")
    layers = []
    # a header that parses but disagrees with itself or the directory must
    # surface as a format problem, never as a stray ValueError/KeyError
    try:
        for m, spec in enumerate(header["layers"]):
            n = spec["n_experts"]
            if not isinstance(n, int) or n < 1:
                raise FormatError(f"layer {m} declares bad expert count {n!r}")
            try:
                router = tensors[f"layer{m}.router"]
                w_in = np.stack([tensors[f"layer{m}.expert{e}.w_in"] for e in range(n)])
                w_out = np.stack(
                    [tensors[f"layer{m}.expert{e}.w_out"] for e in range(n)]
                )
            except KeyError as e:
                raise FormatError(f"directory is missing tensor {e.args[0]!r}") from e
            layers.append(
                MoeLayer(router, w_in, w_out, header["activation"], spec["top_k"])
            )
        flags = header.get("flags", {})
        model = MoeModel(
            layers,
            renormalize=bool(flags.get("renormalize", False)),
            residual=bool(flags.get("residual", True)),
            metadata=header.get("metadata", {}),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"container is internally inconsistent: {e}") from e
    if not with_masks:
        return model
    masks = {
        name[: -len(".mask")]: arr
        for name, arr in tensors.items()
        if name.endswith(".mask")
    }
    return model, masks


def save_calibration(data, path):
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "calibration",
        "model_dim": data.model_dim,
        "metadata": data.metadata,
    }
    tensors = [
        (f"sample{i}", "f32", s.shape[0], s.shape[1], _f32_payload(s))
        for i, s in enumerate(data.samples)
    ]
    _write_container(path, header, tensors)


def load_calibration(path):
    from stunmoe.calibration import CalibrationSet

    header, tensors = _read_container(path)
    if header.get("kind") != "calibration":
        raise FormatError(
            f"container kind {header.get('kind')!r} is not a calibration set"
        )
    try:
        samples = [tensors[f"sample{i}"] for i in range(len(tensors))]
        return CalibrationSet(
            samples, header["model_dim"], metadata=header.get("metadata", {})
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"container is internally inconsistent: {e}") from e
