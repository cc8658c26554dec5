"""Parameter storage, Adam, learning-rate schedule, gradient checking and the
binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

MAGIC = b"DCAP"
FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """Raised on NaN/Inf in parameters, gradients or losses."""


class ParamStore:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.add(k, v.copy())
        out.step = self.step
        return out

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))

    def check_finite(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"non-finite parameter: {k}")


def init_params(spec: Iterable[tuple], rng: np.random.Generator) -> ParamStore:
    """``spec`` rows are ``(name, shape, scheme)``.

    Schemes: ``("uniform", a)`` draws U(-a, a); ``("normal", fan_in)`` draws
    N(0, 1/fan_in); ``("zeros",)``.
    """
    store = ParamStore()
    for name, shape, scheme in spec:
        kind = scheme[0]
        if kind == "uniform":
            value = rng.uniform(-scheme[1], scheme[1], size=shape)
        elif kind == "normal":
            value = rng.standard_normal(shape) / np.sqrt(scheme[1])
        elif kind == "zeros":
            value = np.zeros(shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        store.add(name, value)
    return store


@dataclass
class OptState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def opt_step(params: ParamStore, state: OptState) -> ParamStore:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient: {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.params.items():
        g = params.grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.check_finite()
    params.step += 1
    params.zero_grad()
    return params


def clip_grad_norm(params: ParamStore, max_norm: float = 5.0) -> float:
    norm = params.grad_norm()
    if norm > max_norm:
        scale = max_norm / norm
        for g in params.grads.values():
            g *= scale
    return norm


def lr_at(epoch: int, base_lr: float = 5e-4) -> float:
    """Step decay: x0.8 every three epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * 0.8 ** (epoch // 3)


def grad_check(loss_fn: Callable[[ParamStore], float], params: ParamStore,
               analytic: dict[str, np.ndarray], eps: float = 1e-5, frac: float = 0.01,
               rng: Optional[np.random.Generator] = None, min_per_tensor: int = 3) -> float:
    """Max relative error of ``analytic`` against central differences.

    Checks a random ``frac`` of coordinates in each tensor (at least
    ``min_per_tensor``). Relative error is ``|a - n| / max(1, |n|)``.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.params.items():
        flat = p.reshape(-1)
        if flat.size == 0:
            continue
        k = min(flat.size, max(min_per_tensor, int(round(frac * flat.size))))
        idx = rng.choice(flat.size, size=k, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn(params)
            flat[i] = old - eps
            lm = loss_fn(params)
            flat[i] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericalError("non-finite loss during grad_check")
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(a_flat[i] - num) / max(1.0, abs(num)))
    return worst


# -- checkpoint format ----------------------------------------------------------

def save_checkpoint(path: str | Path, params: ParamStore, meta: Optional[dict] = None,
                    extra: Optional[dict[str, np.ndarray]] = None) -> str:
    """Write ``path`` (binary tensors) and ``path.json`` (metadata). Returns the checkpoint id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = dict(params.params)
    for k, v in (extra or {}).items():
        tensors[k] = v
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(bytes(buf))
    ckpt_id = hashlib.sha256(bytes(buf)).hexdigest()[:16]
    sidecar = dict(meta or {})
    sidecar["step"] = params.step
    sidecar["checkpoint_id"] = ckpt_id
    sidecar["param_names"] = list(params.params)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
    return ckpt_id


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict, dict[str, np.ndarray]]:
    """Returns (params, sidecar metadata, extra tensors not listed as params)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    tensors: dict[str, np.ndarray] = {}
    while off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        tensors[name] = arr
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    names = meta.get("param_names", list(tensors))
    store = ParamStore()
    for name in names:
        store.add(name, tensors.pop(name))
    store.step = meta.get("step", 0)
    meta.setdefault("checkpoint_id", hashlib.sha256(data).hexdigest()[:16])
    return store, meta, tensors
