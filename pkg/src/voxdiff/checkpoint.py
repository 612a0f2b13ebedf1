"""Binary checkpoint persistence: config snapshot plus named f64 tensors.

Layout: magic "OCGC", u16 version, u32 config-text length + bytes,
u32 tensor count, then per tensor (in name-sorted order): u16 name length,
name bytes, u8 rank, u32 per-dim sizes, f64 payload. Little-endian
throughout, so save -> load -> save is byte-identical.
"""
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"OCGC"
VERSION = 1


def save_checkpoint(path, config_text, tensors):
    """tensors: dict name -> ndarray (coerced to f64)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    enc = config_text.encode("utf-8")
    blob += struct.pack("<I", len(enc)) + enc
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def pull(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated at byte %d" % self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.pull(struct.calcsize(fmt)))[0]


def load_checkpoint(path):
    """Returns (config_text, dict name -> f64 ndarray)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.pull(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = r.unpack("<H")
    if version != VERSION:
        raise FormatError("unsupported checkpoint version %d" % version)
    config_text = r.pull(r.unpack("<I")).decode("utf-8")
    count = r.unpack("<I")
    tensors = {}
    prev = None
    for _ in range(count):
        name = r.pull(r.unpack("<H")).decode("utf-8")
        if prev is not None and name <= prev:
            raise FormatError("tensor names out of order: %r after %r" % (name, prev))
        prev = name
        rank = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.pull(8 * n), dtype="<f8").reshape(shape).copy()
        tensors[name] = arr
    if r.pos != len(r.buf):
        raise FormatError("%d trailing bytes after checkpoint payload"
                          % (len(r.buf) - r.pos))
    return config_text, tensors


def pack_state(params, opt, global_step):
    """Flatten model params + optimizer state into the tensor dict."""
    tensors = {}
    for name, p in params.items():
        tensors["param/" + name] = p.data
    for name, m in opt.m.items():
        tensors["opt/m/" + name] = m
    for name, v in opt.v.items():
        tensors["opt/v/" + name] = v
    tensors["opt/t"] = np.float64(opt.t)
    tensors["step"] = np.float64(global_step)
    return tensors


def unpack_state(tensors, params, opt):
    """Load a pack_state() dict back into live params/optimizer.

    Returns the stored global step. Shape or name mismatches are format
    errors: the checkpoint does not describe this model.
    """
    for name, p in params.items():
        key = "param/" + name
        if key not in tensors:
            raise FormatError("checkpoint is missing tensor %r" % key)
        if tensors[key].shape != p.data.shape:
            raise FormatError("checkpoint tensor %r has shape %s, expected %s"
                              % (key, tensors[key].shape, p.data.shape))
        p.data = tensors[key].copy()
    for name in params:
        mk, vk = "opt/m/" + name, "opt/v/" + name
        if mk in tensors:
            opt.m[name] = tensors[mk].copy()
        if vk in tensors:
            opt.v[name] = tensors[vk].copy()
    if "opt/t" in tensors:
        opt.t = int(np.asarray(tensors["opt/t"]).reshape(-1)[0])
    if "step" not in tensors:
        raise FormatError("checkpoint is missing the global step")
    return int(np.asarray(tensors["step"]).reshape(-1)[0])
