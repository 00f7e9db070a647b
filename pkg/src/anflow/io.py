"""Binary ensemble (LFTC) and checkpoint (LFTW) files.

Both formats are a little-endian body followed by a UTF-8 JSON trailer
whose byte length is stored in the final 8 bytes. Bulk arrays are raw
64-bit floats, so a round trip is bitwise exact.

LFTC::

    b"LFTC" u32 version u32 ndim u32 dims[ndim] u64 n_configs
    f64 data[n_configs * prod(dims)]  trailer  u64 trailer_len

LFTW::

    b"LFTW" u32 version u32 n_tensors
    n_tensors * (u32 name_len, name, u8 tag, u32 rank, u32 dims[rank], f64 data)
    trailer  u64 trailer_len
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .flow import ANALOG, DIGITAL, FlowWeights, MixerConfig
from .samplers import Ensemble

__all__ = ["FORMAT_VERSION", "write_ensemble", "read_ensemble", "write_checkpoint",
           "read_checkpoint", "encode_ensemble", "decode_ensemble", "encode_checkpoint",
           "decode_checkpoint"]

FORMAT_VERSION = 1
_TAGS = {ANALOG: 0, DIGITAL: 1}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}
_F64 = np.dtype("<f8")


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated file: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=_F64).astype(np.float64)


def _split_trailer(buf: bytes, magic: bytes):
    if len(buf) < 20 or buf[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file (bad magic {buf[:4]!r})")
    (tlen,) = struct.unpack("<Q", buf[-8:])
    body_end = len(buf) - 8 - tlen
    if body_end < 8:
        raise FormatError("trailer length exceeds file size")
    try:
        trailer = json.loads(buf[body_end: len(buf) - 8].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt JSON trailer: {e}") from None
    r = _Reader(buf, body_end)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{magic.decode()} version {version} is not supported "
                          f"(expected {FORMAT_VERSION})")
    return r, trailer


def _trailer_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def _floats_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F64).tobytes()


# --------------------------------------------------------------------- LFTC

def encode_ensemble(ens: Ensemble) -> bytes:
    cfg = ens.configs
    dims = cfg.shape[1:]
    head = b"LFTC" + struct.pack("<II", FORMAT_VERSION, len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<Q", len(cfg))
    # per-config arrays go in hex float form so the trailer round-trips exactly
    trailer = {
        "sampler": ens.sampler,
        "seed": ens.seed,
        "meta": ens.meta,
        "actions": [float(v).hex() for v in ens.actions],
        "accepted": [bool(v) for v in ens.accepted],
        "proposal_index": [int(v) for v in ens.proposal_index],
        "log_q": None if ens.log_q is None else [float(v).hex() for v in ens.log_q],
    }
    tb = _trailer_bytes(trailer)
    return head + _floats_bytes(cfg) + tb + struct.pack("<Q", len(tb))


def decode_ensemble(buf: bytes) -> Ensemble:
    r, tr = _split_trailer(buf, b"LFTC")
    (ndim,) = r.unpack("<I")
    dims = r.unpack(f"<{ndim}I")
    (n,) = r.unpack("<Q")
    data = r.floats(n * int(np.prod(dims))).reshape((n,) + tuple(dims))
    if r.pos != r.end:
        raise FormatError("extra bytes between data block and trailer")
    try:
        lq = tr["log_q"]
        return Ensemble(data,
                        np.array([float.fromhex(v) for v in tr["actions"]]),
                        np.array(tr["accepted"], dtype=bool),
                        np.array(tr["proposal_index"], dtype=np.int64),
                        None if lq is None else np.array([float.fromhex(v) for v in lq]),
                        tr["sampler"], tr["seed"], tr["meta"])
    except KeyError as e:
        raise FormatError(f"LFTC trailer missing field {e}") from None


def write_ensemble(path, ens: Ensemble) -> None:
    Path(path).write_bytes(encode_ensemble(ens))


def read_ensemble(path) -> Ensemble:
    return decode_ensemble(Path(path).read_bytes())


# --------------------------------------------------------------------- LFTW

def encode_checkpoint(w: FlowWeights) -> bytes:
    arrays = w.state_arrays()
    out = [b"LFTW", struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr, tag = arrays[name]
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<BI", _TAGS[tag], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(_floats_bytes(arr))
    tb = _trailer_bytes({"config": w.config.to_dict(), "provenance": w.provenance})
    out.append(tb + struct.pack("<Q", len(tb)))
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> FlowWeights:
    r, tr = _split_trailer(buf, b"LFTW")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _TAG_NAMES:
            raise FormatError(f"tensor {name!r}: unknown partition tag {tag}")
        dims = r.unpack(f"<{rank}I")
        arrays[name] = (r.floats(int(np.prod(dims))).reshape(dims), _TAG_NAMES[tag])
    if r.pos != r.end:
        raise FormatError("extra bytes between tensor table and trailer")
    try:
        config = MixerConfig.from_dict(tr["config"])
    except KeyError:
        raise FormatError("LFTW trailer missing config") from None
    return FlowWeights.from_state_arrays(config, arrays, tr.get("provenance"))


def write_checkpoint(path, w: FlowWeights) -> None:
    Path(path).write_bytes(encode_checkpoint(w))


def read_checkpoint(path) -> FlowWeights:
    return decode_checkpoint(Path(path).read_bytes())
