import numpy as np


class Adam:
    """Adam with bias correction; parameters are updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=0.0):
        self.params = list(params)
        self.max_grad_norm = max_grad_norm
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)))

    def step(self):
        """One update. Returns the global gradient norm before any clipping."""
        self.t += 1
        norm = self.grad_norm()
        # rescale the whole gradient so one outlier batch cannot inflate v for thousands of steps
        scale = 1.0
        if self.max_grad_norm > 0 and norm > self.max_grad_norm:
            scale = self.max_grad_norm / norm
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
