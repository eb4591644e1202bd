"""ADAM with a StepLR learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_size: int = 1000
    gamma: float = 0.1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class Adam:
    """ADAM over every parameter of a ``Sequential`` (or several).

    Parameters are updated in place. After each step the StepLR rule
    multiplies the learning rate by ``gamma`` every ``step_size`` steps.
    """

    def __init__(self, nets, lr=1e-3, step_size=1000, gamma=0.1, betas=(0.9, 0.999), eps=1e-8):
        self.nets = nets if isinstance(nets, (list, tuple)) else [nets]
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, step_size=step_size, gamma=gamma)

    def _named(self):
        for k, net in enumerate(self.nets):
            for name, layer, pname in net.named_parameters():
                yield f"{k}/{name}", layer, pname

    def zero_grad(self):
        for net in self.nets:
            net.zero_grad()

    def step(self):
        st = self.state
        named = list(self._named())
        for _, layer, pname in named:
            if not np.all(np.isfinite(layer.grads[pname])):
                raise FloatingPointError("non-finite gradient")
        st.step += 1
        t = st.step
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for key, layer, pname in named:
            g = layer.grads[pname]
            m = st.m.get(key)
            if m is None:
                m = st.m[key] = np.zeros_like(g)
                st.v[key] = np.zeros_like(g)
            v = st.v[key]
            m *= st.beta1
            m += (1 - st.beta1) * g
            v *= st.beta2
            v += (1 - st.beta2) * g * g
            layer.params[pname] -= st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
        if t % st.step_size == 0:
            st.lr *= st.gamma

    @property
    def lr(self) -> float:
        return self.state.lr

    def state_dict(self) -> dict:
        st = self.state
        out = {f"m:{k}": v for k, v in st.m.items()}
        out.update({f"v:{k}": v for k, v in st.v.items()})
        out["scalars"] = np.array([st.lr, st.step, st.step_size, st.gamma], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict):
        st = self.state
        lr, step, step_size, gamma = state["scalars"]
        st.lr, st.step, st.step_size, st.gamma = float(lr), int(step), int(step_size), float(gamma)
        st.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m:")}
        st.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v:")}
