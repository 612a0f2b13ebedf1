"""AdamW with decoupled weight decay, plus the warmup-cosine lr rule."""
import math

import numpy as np


class AdamW:
    """Standard AdamW over a name -> Tensor parameter dict.

    Update per step t (bias-corrected moments, decay decoupled from the
    adaptive term):

        m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
        p <- p - lr [ m_hat / (sqrt(v_hat) + eps) + wd p ]
    """

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr_mult=1.0):
        self.t += 1
        lr = self.lr * lr_mult
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * (upd + self.weight_decay * p.data)


def lr_schedule(step, total, warmup):
    """Multiplier: linear ramp 0 -> 1 over warmup, then cosine decay to 0."""
    if warmup > total:
        raise ValueError("warmup %d exceeds total %d" % (warmup, total))
    if not 0 <= step <= total:
        raise ValueError("step %d outside [0, %d]" % (step, total))
    if warmup > 0 and step <= warmup:
        return step / warmup
    if total == warmup:
        return 1.0
    frac = (step - warmup) / (total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * frac))
