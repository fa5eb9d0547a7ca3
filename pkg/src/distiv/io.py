"""Model files and CSV helpers.

Model file layout::

    DIVMODEL/1\\n
    <header byte length>\\n
    <JSON header, UTF-8>
    <payload: little-endian float64 arrays, in header["arrays"] order>
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from . import nn
from .errors import InputError, ModelFormatError
from .model import DIVModel, FitConfig, NoiseConfig, Standardizer

MAGIC = "DIVMODEL/1"
_LE_F8 = np.dtype("<f8")


def _model_arrays(model: DIVModel):
    arrays = []
    for tag, net in (("g", model.g_net), ("f", model.f_net)):
        for i, w in enumerate(net.weights):
            arrays.append((f"{tag}.weight{i}", w))
        for i, b in enumerate(net.biases):
            arrays.append((f"{tag}.bias{i}", b))
    for role in sorted(model.standardizer.means):
        arrays.append((f"std.mean.{role}", model.standardizer.means[role]))
        arrays.append((f"std.scale.{role}", model.standardizer.scales[role]))
    return arrays


def dumps_model(model: DIVModel) -> bytes:
    arrays = _model_arrays(model)
    header = {
        "format": MAGIC,
        "dims": model.dims,
        "noise": [model.noise.dim_eps_x, model.noise.dim_eps_y, model.noise.dim_eps_h],
        "outcome_head": model.outcome_head,
        "binary_treatment": model.binary_treatment,
        "names": {k: list(v) for k, v in model.names.items()},
        "config": None if model.config is None else model.config.to_dict(),
        "nets": {
            tag: {
                "layer_dims": list(net.layer_dims),
                "activation": net.activation,
                "use_bias": net.use_bias,
            }
            for tag, net in (("g", model.g_net), ("f", model.f_net))
        },
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype=_LE_F8).tobytes() for _, a in arrays)
    return MAGIC.encode("ascii") + b"\n" + str(len(head)).encode("ascii") + b"\n" + head + payload


def loads_model(blob: bytes) -> DIVModel:
    first, sep, rest = blob.partition(b"\n")
    if not sep or not first.startswith(b"DIVMODEL/"):
        raise ModelFormatError("not a DIV model file")
    if first.decode("ascii", "replace") != MAGIC:
        raise ModelFormatError(f"unsupported model version {first.decode('ascii', 'replace')!r}, expected {MAGIC!r}")
    size, sep, rest = rest.partition(b"\n")
    try:
        head_len = int(size)
        header = json.loads(rest[:head_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None
    payload = memoryview(rest)[head_len:]
    arrays, offset = {}, 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise ModelFormatError("model payload is truncated")
        arrays[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=_LE_F8).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise ModelFormatError("trailing bytes after model payload")

    nets = {}
    for tag in ("g", "f"):
        spec = header["nets"][tag]
        k = len(spec["layer_dims"]) - 1
        nets[tag] = nn.Mlp(
            tuple(spec["layer_dims"]),
            tuple(arrays[f"{tag}.weight{i}"] for i in range(k)),
            tuple(arrays[f"{tag}.bias{i}"] for i in range(k)),
            spec["activation"],
            spec["use_bias"],
        )
    roles = sorted({name.split(".")[2] for name in arrays if name.startswith("std.mean.")})
    standardizer = Standardizer(
        {r: arrays[f"std.mean.{r}"] for r in roles}, {r: arrays[f"std.scale.{r}"] for r in roles}
    )
    config = None if header["config"] is None else FitConfig.from_dict(header["config"])
    return DIVModel(
        nets["g"],
        nets["f"],
        NoiseConfig(*header["noise"]),
        standardizer,
        {k: int(v) for k, v in header["dims"].items()},
        header["outcome_head"],
        bool(header["binary_treatment"]),
        {k: tuple(v) for k, v in header["names"].items()},
        config,
    )


def save_model(model: DIVModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> DIVModel:
    with open(path, "rb") as fh:
        return loads_model(fh.read())


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def fmt_float(v) -> str:
    """17 significant digits: parses back to the identical float64."""
    return format(float(v), ".17g")


def read_csv(path):
    """Return (header, rows as list of str lists)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r]
    return header, rows


def numeric_columns(header, rows, columns, path="input"):
    """Extract named columns as a float matrix, reporting the first bad cell."""
    idx = []
    for c in columns:
        if c not in header:
            raise InputError(f"{path}: column {c!r} not found in header")
        idx.append(header.index(c))
    out = np.empty((len(rows), len(idx)))
    for i, row in enumerate(rows):
        for j, k in enumerate(idx):
            try:
                out[i, j] = float(row[k])
            except (ValueError, IndexError):
                cell = row[k] if k < len(row) else ""
                raise InputError(f"{path}: non-numeric value {cell!r} at row {i + 1}, column {columns[j]!r}") from None
    return out


def write_csv(path, header, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    os.replace(tmp, path)
