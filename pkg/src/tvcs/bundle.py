"""Binary bundles: a JSON header followed by raw little-endian arrays.

Layout::

    b"TVCSBNDL" | u32 format version | u64 header length | header JSON | payload

The header lists every array with its dtype, shape, byte offset into the payload,
length and SHA-256, plus a SHA-256 of the whole payload and free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problems import Problem, SamplingMask
from .spectral import real_dtype

__all__ = [
    "FORMAT_VERSION",
    "BundleError",
    "ChecksumError",
    "VersionMismatchError",
    "Bundle",
    "save_bundle",
    "load_bundle",
    "save_problem",
    "load_problem",
    "save_state",
    "load_state",
    "data_dir",
    "file_sha256",
]

MAGIC = b"TVCSBNDL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class BundleError(OSError):
    """A bundle cannot be read or written."""


class ChecksumError(BundleError):
    """The file is truncated or its contents do not match the recorded hashes."""


class VersionMismatchError(BundleError):
    pass


@dataclass
class Bundle:
    arrays: dict
    meta: dict = field(default_factory=dict)
    narrowing: dict = field(default_factory=dict)  # name -> max |x - narrow(x)| on load


def data_dir():
    """Default directory for bundles: ``$TVCS_DATA_DIR`` or ``./tvcs-data``."""
    return Path(os.environ.get("TVCS_DATA_DIR", "tvcs-data"))


def _sha(b):
    return hashlib.sha256(b).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_bundle(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray) and JSON-serializable ``meta`` atomically."""
    path = Path(path)
    entries, blocks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if a.dtype.kind not in "biufc":
            raise BundleError(f"array {name!r} has unsupported dtype {a.dtype}")
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw), "sha256": _sha(raw)})
        blocks.append(raw)
        offset += len(raw)
    payload = b"".join(blocks)
    header = {"format_version": FORMAT_VERSION, "endianness": "little", "order": "C",
              "fields": entries, "payload_nbytes": len(payload),
              "payload_sha256": _sha(payload), "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
            fh.write(hbytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_bundle(path, precision=None):
    """Read a bundle, verifying every checksum before returning anything.

    With ``precision='f32'`` floating arrays are narrowed and the largest
    absolute narrowing error of each is recorded in :attr:`Bundle.narrowing`.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise BundleError(f"cannot read bundle {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise ChecksumError(f"{path}: truncated before the header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BundleError(f"{path}: not a bundle file")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise ChecksumError(f"{path}: truncated inside the header")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except ValueError as exc:
        raise ChecksumError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: header version {header.get('format_version')}")
    payload = raw[start:]
    if len(payload) != header["payload_nbytes"]:
        raise ChecksumError(
            f"{path}: payload has {len(payload)} bytes, header promises {header['payload_nbytes']}"
        )
    if _sha(payload) != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    target = None if precision is None else real_dtype(precision)
    arrays, narrowing = {}, {}
    for e in header["fields"]:
        block = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if _sha(block) != e["sha256"]:
            raise ChecksumError(f"{path}: checksum mismatch in field {e['name']!r}")
        a = np.frombuffer(block, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        a = a.astype(a.dtype.newbyteorder("="))
        if target is not None and a.dtype.kind in "fc":
            want = target if a.dtype.kind == "f" else np.result_type(target, np.complex64)
            if a.dtype.itemsize > np.dtype(want).itemsize:
                narrow = a.astype(want)
                narrowing[e["name"]] = float(np.max(np.abs(a - narrow), initial=0.0))
                a = narrow
        arrays[e["name"]] = a
    return Bundle(arrays, header.get("meta", {}), narrowing)


def save_problem(path, problem: Problem, meta=None):
    """Store a measured problem: mask, data and (optionally) the ground truth."""
    m = problem.mask
    arrays = {"observed": m.observed, "data": m.data}
    if problem.truth is not None:
        arrays["truth"] = problem.truth
    info = {"kind": "problem", "shape": list(m.observed.shape), "fraction": m.fraction,
            "seed": m.seed, "symmetric": m.symmetric, "m": m.m}
    info.update(meta or {})
    return save_bundle(path, arrays, info)


def load_problem(path, precision=None):
    b = load_bundle(path, precision)
    if b.meta.get("kind") != "problem":
        raise BundleError(f"{path}: not a problem bundle")
    a = b.arrays
    data = a["data"].astype(np.complex128)  # measurements stay double
    mask = SamplingMask(a["observed"], data, b.meta.get("fraction"), b.meta.get("seed"),
                        b.meta.get("symmetric", True))
    mask.check()
    return Problem(mask, a.get("truth")), b


def save_state(path, state, meta=None):
    """Store a solver state (any method) with its fields and iteration count."""
    arrays = {k: v for k, v in vars(state).items() if isinstance(v, np.ndarray)}
    info = {"kind": "state", "method": state.method, "k": state.k}
    info.update(meta or {})
    return save_bundle(path, arrays, info)


def load_state(path, precision=None):
    from .solvers import AdmmState, DrsState, PdhgState

    b = load_bundle(path, precision)
    if b.meta.get("kind") != "state":
        raise BundleError(f"{path}: not a state bundle")
    cls = {"drs": DrsState, "admm": AdmmState, "pdhg": PdhgState}[b.meta["method"]]
    return cls(**b.arrays, k=int(b.meta["k"])), b
