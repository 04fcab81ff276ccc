"""Named parameter registry, AdamW, learning-rate schedules, checkpoints.

Checkpoints use a small container format: magic ``OCKP``, u32 version, u64
manifest length, UTF-8 JSON manifest (parameter names, shapes, frozen flags,
training step, optional metadata), then raw little-endian float32 payloads in
manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor, default_dtype
from .errors import MissingGradient, OctgenError, ShapeMismatch

CKPT_MAGIC = b"OCKP"
CKPT_VERSION = 1


class ParameterStore:
    """Insertion-ordered map of unique parameter names to Tensors.

    Frozen parameters never receive optimizer updates and accumulate no
    optimizer state; freezing also clears requires_grad so the tape treats
    them as constants.
    """

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or default_dtype()).type
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def param(self, name: str, value) -> Tensor:
        if name in self._params:
            raise OctgenError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, prefix: str = ""):
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.add(name)
                t.requires_grad = False

    def unfreeze(self, prefix: str = ""):
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.discard(name)
                t.requires_grad = True

    def trainable(self):
        return [(n, t) for n, t in self._params.items() if n not in self._frozen]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_parameters(self, trainable_only=False):
        items = self.trainable() if trainable_only else list(self._params.items())
        return int(sum(t.data.size for _, t in items))

    def state_hash(self, prefix: str = "") -> str:
        """Content hash of parameter values under ``prefix`` (order-sensitive)."""
        import hashlib

        h = hashlib.sha256()
        for name, t in self._params.items():
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


# -- learning-rate schedules ----------------------------------------------


def lr_linear(step: int, total: int, lr0: float = 1e-3, lr1: float = 1e-5) -> float:
    """Linear ramp from lr0 at step 0 to lr1 at step == total."""
    if total <= 0:
        return lr1
    frac = min(max(step / total, 0.0), 1.0)
    return lr0 * (1.0 - frac) + lr1 * frac


def lr_const(lr: float = 1e-4):
    return lr


# -- AdamW -------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam with bias correction."""

    def __init__(self, store: ParameterStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, lr: float | None = None, grads: dict | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self._t += 1
        bc1 = 1.0 - b1**self._t
        bc2 = 1.0 - b2**self._t
        for name, p in self.store.trainable():
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                raise MissingGradient(f"no gradient for trainable parameter '{name}'")
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mh = m / bc1
            vh = v / bc2
            p.data -= lr * (mh / (np.sqrt(vh) + self.eps) + self.weight_decay * p.data)


def adamw_step(params: ParameterStore, grads: dict, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, state: AdamW | None = None) -> AdamW:
    """One AdamW update from an explicit name->gradient map.

    Returns the optimizer (created on first call) so repeated calls share
    moment state.  Frozen parameters in ``params`` are skipped.
    """
    opt = state or AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    opt.step(lr=lr, grads=grads)
    return opt


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, store: ParameterStore, step: int = 0, meta: dict | None = None):
    names = store.names()
    manifest = {
        "params": [
            {"name": n, "shape": list(store[n].data.shape), "frozen": store.is_frozen(n)}
            for n in names
        ],
        "step": int(step),
        "meta": meta or {},
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(store[n].data, dtype="<f4").tobytes())


def load_checkpoint(path, store: ParameterStore | None = None):
    """Load an OCKP file.

    With a store: values are copied into identically named parameters (shapes
    must match) and frozen flags restored.  Without: returns a fresh store
    populated from the file.  Returns (store, step, meta).
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise OctgenError(f"not a checkpoint file (bad magic {magic!r}): {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise OctgenError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        fresh = store is None
        if fresh:
            store = ParameterStore()
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            if fresh:
                store.param(entry["name"], raw)
            else:
                if entry["name"] not in store:
                    raise OctgenError(f"checkpoint parameter '{entry['name']}' missing from store")
                p = store[entry["name"]]
                if p.data.shape != shape:
                    raise ShapeMismatch(
                        f"checkpoint shape {shape} != store shape {p.data.shape} for '{entry['name']}'"
                    )
                p.data[...] = raw.astype(p.data.dtype)
            if entry.get("frozen"):
                store.freeze(entry["name"])
    return store, manifest["step"], manifest.get("meta", {})
