"""Decoupled-weight-decay adaptive optimizer and the LR schedule.

Updates are lazy: a step only touches parameters whose `.grad` is set.
That is load-bearing for the supernet, where unchosen candidate blocks
must stay bitwise unchanged after a step on some other path; decay on
every parameter would silently train blocks the path never used.

Weight decay applies to matrices only (ndim >= 2); biases and norm
gains/biases are exempt. Moments are kept per parameter name, with a
per-name step count so bias correction stays correct for blocks that
train intermittently. When a tensor changes shape (FFN growth) its
moments are reset to zero.
"""

import numpy as np

from .errors import ContractError


def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_ratio: float = 0.1) -> float:
    """Linear warmup to base_lr, then linear decay to zero."""
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    warmup = max(1, int(total_steps * warmup_ratio))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    remaining = max(0, total_steps - step)
    return base_lr * remaining / max(1, total_steps - warmup)


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict.

    Holds a live reference to the dict, so parameters swapped in by FFN
    growth are picked up automatically; call `reset_state` for those
    names to drop stale moments.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {}
        self._v = {}
        self._t = {}

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def reset_state(self, names) -> None:
        for name in names:
            self._m.pop(name, None)
            self._v.pop(name, None)
            self._t.pop(name, None)

    def step(self, lr: float = None) -> int:
        """Apply one update to every parameter that has a gradient.

        Returns the number of parameters updated.
        """
        lr = self.lr if lr is None else lr
        updated = 0
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(
                    f"{name}: grad shape {g.shape} != param shape {p.data.shape}"
                )
            m = self._m.get(name)
            if m is None or m.shape != p.data.shape:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                t = 0
            else:
                v = self._v[name]
                t = self._t[name]
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data - lr * self.weight_decay * p.data
            self._m[name], self._v[name], self._t[name] = m, v, t
            updated += 1
        return updated

    def state_arrays(self) -> dict:
        """Moment tensors for checkpointing, prefixed opt.m. / opt.v. ."""
        out = {}
        for name, m in self._m.items():
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = self._v[name]
        return out

    def step_counts(self) -> dict:
        return dict(self._t)

    def load_state(self, arrays: dict, counts: dict) -> None:
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self._m[key[len("opt.m."):]] = arr
            elif key.startswith("opt.v."):
                self._v[key[len("opt.v."):]] = arr
        self._t = {k: int(v) for k, v in counts.items()}
