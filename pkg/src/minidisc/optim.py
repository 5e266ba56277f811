"""AdamW with linear warmup and linear decay."""
from __future__ import annotations

import numpy as np

from .model import SharedParamStore


def lr_at(step: int, total: int, base_lr: float, warmup: float) -> float:
    warm = max(1, int(round(warmup * total))) if warmup > 0 else 0
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    if total <= warm:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warm))


class AdamW:
    """Decoupled weight decay on matrices only; ``visible`` restricts updates.

    ``visible`` maps parameter names to boolean arrays (or None for the whole
    array). Entries outside the visible region are left untouched, including by
    weight decay, so a masked candidate never edits weights it cannot see.
    """

    def __init__(self, store: SharedParamStore, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, warmup: float = 0.1,
                 total_steps: int = 1, visible: dict | None = None):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.total_steps = max(1, total_steps)
        self.visible = visible or {}
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}

    @property
    def state_nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())

    def step(self) -> float:
        lr = lr_at(self.t, self.total_steps, self.lr, self.warmup)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            vis = self.visible.get(name)
            if vis is not None:
                g = np.where(vis, g, 0)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim == 2 and not name.endswith("emb"):
                upd = upd + self.weight_decay * p.data
            upd *= lr
            if vis is not None:
                upd = np.where(vis, upd, 0)
            p.data -= upd.astype(p.data.dtype, copy=False)
        return lr
