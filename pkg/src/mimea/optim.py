"""In-place optimizers over named parameter tensors."""

import numpy as np

from .errors import ConfigError


class SGD:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p in self.params.values():
            if p in grads:
                p.data -= self.lr * grads[p]


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads[p]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    if name == "adamw":
        return AdamW(params, lr, betas, eps, weight_decay)
    if name == "sgd":
        return SGD(params, lr)
    raise ConfigError(f"unknown optimizer {name!r} (adamw or sgd)")
