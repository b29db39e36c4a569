"""Named-array checkpoint format.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw little-endian arrays back to back. The header maps each name to
``{"shape", "offset", "dtype"}`` (offset relative to the first data byte,
dtype ``"f32"`` or ``"f64"``) and carries a free-form ``meta`` object.
"""
import json
import struct

import numpy as np
import torch

from .errors import CorruptDataError

MAGIC = b"COVTANET"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}

ADAM_KEYS = ("exp_avg", "exp_avg_sq")


class ParameterStore:
    """Ordered mapping of names to float arrays plus JSON-able metadata."""

    def __init__(self, arrays=None, meta=None):
        self.arrays = {}
        self.meta = dict(meta or {})
        for k, v in (arrays or {}).items():
            self[k] = v

    def __setitem__(self, name, value):
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        # np.ascontiguousarray would promote 0-d scalars to shape (1,)
        a = np.array(value, order="C", copy=True)
        if a.dtype not in _CODES:
            a = a.astype(np.float32)
        self.arrays[name] = a

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def names(self, prefix=""):
        return [k for k in self.arrays if k.startswith(prefix)]

    def add_module(self, module, prefix):
        for name, t in module.state_dict().items():
            self[f"{prefix}.{name}"] = t
        return self

    def load_module(self, module, prefix, strict=True):
        pre = prefix + "."
        state = {k[len(pre):]: torch.from_numpy(v.copy())
                 for k, v in self.arrays.items() if k.startswith(pre)}
        module.load_state_dict(state, strict=strict)
        return module

    def add_optimizer(self, optimizer, named_params, prefix="adam"):
        """Store Adam moments keyed by parameter name; the step count goes in ``meta``."""
        steps = {}
        for name, p in named_params:
            state = optimizer.state.get(p)
            if not state:
                continue
            for key in ADAM_KEYS:
                self[f"{prefix}.{key}.{name}"] = state[key]
            steps[name] = int(state["step"])
        self.meta[f"{prefix}.steps"] = steps
        return self

    def load_optimizer(self, optimizer, named_params, prefix="adam"):
        steps = self.meta.get(f"{prefix}.steps", {})
        for name, p in named_params:
            if name not in steps:
                continue
            state = optimizer.state[p]
            state["step"] = torch.tensor(float(steps[name]))
            for key in ADAM_KEYS:
                state[key] = torch.from_numpy(self[f"{prefix}.{key}.{name}"].copy()).to(p.dtype)
        return optimizer

    def to_bytes(self):
        tensors = {}
        offset = 0
        for name, a in self.arrays.items():
            tensors[name] = {"shape": list(a.shape), "offset": offset, "dtype": _CODES[a.dtype]}
            offset += a.nbytes
        header = json.dumps({"meta": self.meta, "tensors": tensors},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(a.astype(DTYPES[_CODES[a.dtype]], copy=False).tobytes() for a in self.arrays.values())
        return MAGIC + struct.pack("<Q", len(header)) + header + body

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < 16 or buf[:8] != MAGIC:
            raise CorruptDataError("not a covtanet checkpoint")
        (hlen,) = struct.unpack("<Q", buf[8:16])
        try:
            header = json.loads(buf[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptDataError(f"bad checkpoint header: {e}")
        data = memoryview(buf)[16 + hlen:]
        store = cls(meta=header.get("meta"))
        # offsets are sorted by construction; keep file order
        for name, info in sorted(header["tensors"].items(), key=lambda kv: kv[1]["offset"]):
            dt = DTYPES.get(info["dtype"])
            if dt is None:
                raise CorruptDataError(f"{name}: unknown dtype {info['dtype']!r}")
            count = int(np.prod(info["shape"], dtype=np.int64))
            end = info["offset"] + count * dt.itemsize
            if end > len(data):
                raise CorruptDataError(f"{name}: checkpoint truncated")
            a = np.frombuffer(data[info["offset"]:end], dtype=dt).reshape(info["shape"])
            store.arrays[name] = a.astype(dt.newbyteorder("="), copy=True)
        return store

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                return cls.from_bytes(fh.read())
        except FileNotFoundError:
            raise CorruptDataError(f"checkpoint {path} not found")

    def equals(self, other):
        return (self.meta == other.meta and list(self.arrays) == list(other.arrays)
                and all(self[k].dtype == other[k].dtype and np.array_equal(self[k], other[k])
                        for k in self.arrays))
