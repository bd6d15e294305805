"""Adam with a constant learning rate, and EMA parameter shadowing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from casdm.netcore.params import ParamStore


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, lr: float = 1e-4, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p)
            st.v[k] = np.zeros_like(p)
        return st

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], step: int, lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, step=step, **kw)
        for k, a in arrays.items():
            kind, _, name = k.partition("/")
            if kind == "m":
                st.m[name] = np.array(a, copy=True)
            elif kind == "v":
                st.v[name] = np.array(a, copy=True)
            else:
                raise ValueError(f"unexpected optimizer entry {k!r}")
        return st


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update of every parameter in ``params``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ValueError(f"no gradient for parameter(s): {missing[:5]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for k in params:
        g = grads[k]
        p = params[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        params[k] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def ema_update(shadow: ParamStore, live: ParamStore, decay: float) -> None:
    if list(shadow.keys()) != list(live.keys()):
        raise ValueError("EMA shadow and live parameters have different keys")
    for k in shadow:
        shadow[k] = (decay * shadow[k] + (1.0 - decay) * live[k]).astype(shadow[k].dtype)
