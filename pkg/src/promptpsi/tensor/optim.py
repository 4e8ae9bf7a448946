import numpy as np

from . import kernels


class Adam:
    """Adam over a list of leaf tensors, updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError(f"Adam.step: got {len(grads)} gradients for {len(self.params)} params")
        self.t += 1
        b1, b2 = self.b1, self.b2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.data.shape != g.shape:
                raise ValueError(f"Adam.step: gradient shape {g.shape} != parameter {p.shape}")
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            kernels.adam_update(p.data.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                                m.reshape(-1), v.reshape(-1), self.lr, b1, b2, c1, c2, self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]
