"""Small learnable building blocks registered in a ParamStore."""

from __future__ import annotations

import numpy as np

from . import engine as E

ACTIVATIONS = {"silu": E.silu, "relu": E.relu, "tanh": E.tanh, "sigmoid": E.sigmoid}


class Linear:
    def __init__(self, store, path, n_in, n_out, rng, bias=True, scale=1.0):
        std = scale * np.sqrt(2.0 / n_in)
        self.W = store.add(f"{path}/W", rng.normal(0.0, std, size=(n_in, n_out)))
        self.b = store.add(f"{path}/b", np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = E.matmul(x, self.W)
        return y if self.b is None else E.add(y, self.b)


class MLP:
    """Stack of Linear layers with an activation between them.

    ``dims = [n_in, h1, ..., n_out]``. The last layer is linear unless
    ``final_act`` names an activation for it.
    """

    def __init__(self, store, path, dims, rng, act="silu", final_act=False, last_scale=1.0):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(Linear(store, f"{path}/{i}", a, b, rng,
                                      scale=last_scale if last else 1.0))
        self.act = ACTIVATIONS[act]
        self.final_act = ACTIVATIONS[final_act] if final_act else None

    def __call__(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = self.act(x)
            elif self.final_act is not None:
                x = self.final_act(x)
        return x


class LayerNorm:
    def __init__(self, store, path, width):
        self.gamma = store.add(f"{path}/gamma", np.ones(width))
        self.beta = store.add(f"{path}/beta", np.zeros(width))

    def __call__(self, x):
        return E.layer_norm(x, self.gamma, self.beta)
