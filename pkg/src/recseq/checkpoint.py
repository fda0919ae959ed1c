"""Binary model checkpoints with bit-exact round trips.

Layout (all integers little endian):

    magic      8 bytes  b"RSEQCKPT"
    version    u32
    header_len u64
    header     header_len bytes of UTF-8 JSON (sorted keys)
    n_blocks   u64
    blocks     repeated: name_len u64, name bytes, ndim u64,
               ndim dims as u64, then the float64 payload in C order

The header describes how to rebuild the model (topology, vocabulary,
extractor configuration) plus a step counter and, optionally, the training
generator state, so a run can resume exactly. Nothing time or host
dependent is written: saving the same model twice produces identical
bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .cells import LstmCellParams, RnnCellParams
from .data import atomic_write_bytes
from .errors import DataFormatError
from .features import IdentityExtractor, LinearExtractor, Mlp1Extractor, SmallConvExtractor
from .models import EmbeddingParams, ModelSpec, PredictionParams, Vocabulary

__all__ = ["MAGIC", "VERSION", "CheckpointBundle", "save_checkpoint", "load_checkpoint"]

MAGIC = b"RSEQCKPT"
VERSION = 1


@dataclass
class CheckpointBundle:
    """What a checkpoint file restores."""

    model: ModelSpec
    step: int
    rng: np.random.Generator | None


def _describe_extractor(ext):
    if ext is None:
        return None
    d = {"variant": ext.variant, "input_shape": list(ext.input_shape)}
    if ext.variant != "identity":
        d["out_dim"] = ext.out_dim
    if ext.variant == "mlp1":
        d["hidden_dim"] = ext.hidden_dim
    elif ext.variant == "smallconv":
        d["n_filters"] = ext.n_filters
        d["kernel_size"] = ext.kernel_size
    return d


def _rebuild_extractor(d):
    if d is None:
        return None
    shape = tuple(int(s) for s in d["input_shape"])
    variant = d["variant"]
    if variant == "identity":
        return IdentityExtractor(shape)
    in_dim = int(np.prod(shape))
    out = int(d["out_dim"])
    if variant == "linear":
        return LinearExtractor(shape, np.zeros((out, in_dim)), np.zeros(out))
    if variant == "mlp1":
        hid = int(d["hidden_dim"])
        return Mlp1Extractor(shape, np.zeros((hid, in_dim)), np.zeros(hid), np.zeros((out, hid)), np.zeros(out))
    if variant == "smallconv":
        c, h, w = shape
        f = int(d["n_filters"])
        k = int(d["kernel_size"])
        flat = f * ((h - k + 1) // 2) * ((w - k + 1) // 2)
        return SmallConvExtractor(shape, np.zeros((f, c, k, k)), np.zeros(f), np.zeros((out, flat)), np.zeros(out))
    raise DataFormatError(f"unknown extractor variant {variant!r}")


def _rng_state(rng):
    if rng is None:
        return None
    # A plain dict of ints and strings; JSON keeps the wide integers exact.
    return rng.bit_generator.state


def _describe_model(m: ModelSpec, step: int, rng) -> dict:
    return {
        "task": m.task,
        "cell": m.cell_kind,
        "rnn_nonlinearity": None if m.cell_kind == "lstm" else m.cells[0].nonlinearity,
        "hidden": m.hidden,
        "layer_input_dims": [c.n_input for c in m.cells],
        "factored": m.factored,
        "inject_layer": m.inject_layer,
        "input_dim": m.input_dim,
        "visual_mode": m.visual_mode,
        "visual_blocks": None if m.visual_blocks is None else list(m.visual_blocks),
        "n_out": m.prediction.n_out,
        "vocab": None if m.vocab is None else m.vocab.to_dict(),
        "embed_dim": None if m.embedding is None else m.embedding.dim,
        "extractor": _describe_extractor(m.extractor),
        "step": int(step),
        "rng_state": _rng_state(rng),
    }


def _rebuild_model(header: dict) -> ModelSpec:
    hidden = int(header["hidden"])
    cells = []
    for in_dim in header["layer_input_dims"]:
        if header["cell"] == "lstm":
            cells.append(LstmCellParams.zeros(hidden, int(in_dim)))
        else:
            cells.append(RnnCellParams.zeros(hidden, int(in_dim), header["rnn_nonlinearity"]))
    vocab = None if header["vocab"] is None else Vocabulary.from_dict(header["vocab"])
    embedding = None
    if header["embed_dim"] is not None:
        embedding = EmbeddingParams(np.zeros((int(header["embed_dim"]), vocab.size)))
    prediction = PredictionParams(np.zeros((int(header["n_out"]), hidden)), np.zeros(int(header["n_out"])))
    return ModelSpec(
        header["task"],
        cells,
        prediction,
        extractor=_rebuild_extractor(header["extractor"]),
        vocab=vocab,
        embedding=embedding,
        factored=header["factored"],
        inject_layer=header["inject_layer"],
        input_dim=header["input_dim"],
        visual_mode=header["visual_mode"],
        visual_blocks=header["visual_blocks"],
    )


def save_checkpoint(path, m: ModelSpec, step: int = 0, rng: np.random.Generator | None = None):
    """Write the model (and optional training state) to ``path`` atomically."""
    header = json.dumps(_describe_model(m, step, rng), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = m.blocks()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header]
    parts.append(struct.pack("<Q", len(blocks)))
    for name, arr in blocks:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError("truncated checkpoint", path=self.path)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> CheckpointBundle:
    """Read a checkpoint and rebuild the model it describes."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataFormatError("not a checkpoint file (bad magic)", path=path)
    version = r.u32()
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", path=path)
    try:
        header = json.loads(r.take(r.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"bad checkpoint header: {exc}", path=path) from None
    try:
        m = _rebuild_model(header)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad model description: {exc}", path=path) from None

    views = dict(m.blocks())
    seen = set()
    for _ in range(r.u64()):
        name = r.take(r.u64()).decode("utf-8")
        ndim = r.u64()
        shape = tuple(r.u64() for _ in range(ndim))
        payload = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8").reshape(shape)
        if name not in views:
            raise DataFormatError(f"unexpected parameter block {name!r}", path=path)
        if views[name].shape != shape:
            raise DataFormatError(
                f"block {name!r} has shape {shape}, model expects {views[name].shape}", path=path,
            )
        np.copyto(views[name], payload)
        seen.add(name)
    missing = [n for n in views if n not in seen]
    if missing:
        raise DataFormatError(f"missing parameter blocks: {missing}", path=path)
    if r.pos != len(data):
        raise DataFormatError("trailing bytes after checkpoint payload", path=path)

    rng = None
    if header.get("rng_state") is not None:
        rng = np.random.default_rng()
        state = header["rng_state"]
        inner = {k: int(v) for k, v in state["state"].items()}
        rng.bit_generator.state = {
            "bit_generator": state["bit_generator"],
            "state": inner,
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }
    return CheckpointBundle(m, int(header.get("step", 0)), rng)
