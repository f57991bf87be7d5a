"""Named parameter storage, AdamW updates, and binary checkpoints."""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Gradients, Tape, Tensor

CHECKPOINT_MAGIC = b"TFGC"
CHECKPOINT_VERSION = 1


class OptimizerError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ParameterStore:
    """Uniquely named parameter tensors plus per-parameter AdamW state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def create(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64))
        self.params[name] = t
        self._m[name] = np.zeros(t.shape)
        self._v[name] = np.zeros(t.shape)
        self._step[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params.keys())

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def watch_all(self, tape: Tape):
        """Register every parameter as a leaf on a fresh tape."""
        for t in self.params.values():
            tape.watch(t)

    def grad_map(self, grads: Gradients) -> dict[str, np.ndarray]:
        """Per-parameter gradient arrays; zeros where the loss did not reach."""
        return {name: grads.of(t) for name, t in self.params.items()}

    # -- state (de)serialization helpers ---------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, t in self.params.items():
            out[name] = t.data
            out[f"__opt_m__/{name}"] = self._m[name]
            out[f"__opt_v__/{name}"] = self._v[name]
            out[f"__opt_step__/{name}"] = np.array(float(self._step[name]))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        for name, t in self.params.items():
            if name not in arrays:
                if strict:
                    raise CheckpointError(f"checkpoint missing parameter {name!r}")
                continue
            a = arrays[name]
            if a.shape != t.shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {a.shape} != model shape {t.shape}")
            t.data = a.astype(np.float64).copy()
            m = arrays.get(f"__opt_m__/{name}")
            v = arrays.get(f"__opt_v__/{name}")
            s = arrays.get(f"__opt_step__/{name}")
            if m is not None and m.shape == t.shape:
                self._m[name] = m.copy()
            if v is not None and v.shape == t.shape:
                self._v[name] = v.copy()
            if s is not None:
                self._step[name] = int(s.reshape(()).item())


def adamw_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01):
    """One decoupled-weight-decay Adam update for every parameter in `grads`."""
    b1, b2 = betas
    for name, g in grads.items():
        if name not in store.params:
            raise OptimizerError(f"gradient supplied for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        p = store.params[name]
        store._step[name] += 1
        t = store._step[name]
        m = store._m[name]
        v = store._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    total = total ** 0.5
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# -- checkpoint container ------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic "TFGC" | u32 version | u32 tag_len | tag bytes (utf-8)
#   | u64 entry count | entries
# entry: u32 name_len | name bytes | u32 ndim | u64 dims... | float64 payload

def save_checkpoint(path, arrays: dict[str, np.ndarray], tag: str = ""):
    tag_b = tag.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(tag_b)))
        f.write(tag_b)
        f.write(struct.pack("<Q", len(arrays)))
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<Q", d))
            f.write(a.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    def need(f, n, what):
        b = f.read(n)
        if len(b) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return b

    with open(path, "rb") as f:
        if need(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", need(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (tag_len,) = struct.unpack("<I", need(f, 4, "tag length"))
        tag = need(f, tag_len, "tag").decode("utf-8")
        (count,) = struct.unpack("<Q", need(f, 8, "entry count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", need(f, 4, "name length"))
            name = need(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", need(f, 4, "ndim"))
            shape = tuple(struct.unpack("<Q", need(f, 8, "dim"))[0] for _ in range(ndim))
            nval = int(np.prod(shape)) if shape else 1
            payload = need(f, nval * 8, f"payload of {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return arrays, tag
