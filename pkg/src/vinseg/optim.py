"""Nesterov Adam (primary), Adam and SGD with momentum.

Parameters are ``{name: Tensor}`` dicts and gradients ``{name: ndarray}``;
steps update ``Tensor.data`` in place. A non-finite gradient raises before
anything is mutated.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Union

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class NadamConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.004

    def validate(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0 or self.schedule_decay <= 0:
            raise ValueError("lr, eps and schedule_decay must be positive")


@dataclass
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")


@dataclass
class SGDConfig:
    lr: float = 2e-4
    momentum: float = 0.9

    def validate(self) -> None:
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")


@dataclass
class OptState:
    m: dict = field(default_factory=dict)  # first moment (velocity for SGD)
    v: dict = field(default_factory=dict)
    t: int = 0
    mu_product: float = 1.0


OptConfig = Union[NadamConfig, AdamConfig, SGDConfig]


def _check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")


def _moments(params, state: OptState, keys=("m", "v")) -> None:
    for name, p in params.items():
        for k in keys:
            store = getattr(state, k)
            if name not in store:
                store[name] = np.zeros_like(p.data)
            elif store[name].shape != p.data.shape:
                raise ValueError(f"optimizer state for {name} has shape {store[name].shape}, param {p.data.shape}")


def nadam_momentum(t: int, cfg: NadamConfig) -> float:
    """mu_t = beta1 * (1 - 0.5 * 0.96 ** (t * schedule_decay))."""
    return cfg.beta1 * (1.0 - 0.5 * 0.96 ** (t * cfg.schedule_decay))


def nadam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptState, cfg: NadamConfig) -> OptState:
    _check_finite(grads)
    _moments(params, state)
    t = state.t + 1
    mu_t = nadam_momentum(t, cfg)
    mu_next = nadam_momentum(t + 1, cfg)
    prod_t = state.mu_product * mu_t
    prod_next = prod_t * mu_next
    bias2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(cfg.beta1)
        m += dt(1 - cfg.beta1) * g
        v *= dt(cfg.beta2)
        v += dt(1 - cfg.beta2) * (g * g)
        g_hat = g / dt(1 - prod_t)
        m_hat = m / dt(1 - prod_next)
        v_hat = v / dt(bias2)
        m_bar = dt(1 - mu_t) * g_hat + dt(mu_next) * m_hat
        p.data -= dt(cfg.lr) * m_bar / (np.sqrt(v_hat) + dt(cfg.eps))
    state.t = t
    state.mu_product = prod_t
    return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptState, cfg: AdamConfig) -> OptState:
    _check_finite(grads)
    _moments(params, state)
    t = state.t + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype.type
        m, v = state.m[name], state.v[name]
        m *= dt(cfg.beta1)
        m += dt(1 - cfg.beta1) * g
        v *= dt(cfg.beta2)
        v += dt(1 - cfg.beta2) * (g * g)
        p.data -= dt(cfg.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
    state.t = t
    return state


def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptState, cfg: SGDConfig) -> OptState:
    """velocity <- momentum * velocity + g;  theta <- theta - lr * velocity."""
    _check_finite(grads)
    _moments(params, state, keys=("m",))
    for name, p in params.items():
        g = grads.get(name)
        dt = p.data.dtype.type
        vel = state.m[name]
        vel *= dt(cfg.momentum)
        if g is not None:
            vel += g
        p.data -= dt(cfg.lr) * vel
    state.t += 1
    return state


_STEPS = {"nadam": (NadamConfig, nadam_step), "adam": (AdamConfig, adam_step), "sgd": (SGDConfig, sgd_momentum_step)}


class Optimizer:
    """Binds an optimizer kind, its config and state to a parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], kind: str = "nadam", config: OptConfig = None, state: OptState = None):
        if kind not in _STEPS:
            raise ValueError(f"unknown optimizer {kind!r}; choose from {sorted(_STEPS)}")
        cfg_cls, self._step = _STEPS[kind]
        self.kind = kind
        self.config = config if config is not None else cfg_cls()
        if not isinstance(self.config, cfg_cls):
            raise TypeError(f"{kind} needs a {cfg_cls.__name__}")
        self.config.validate()
        self.params = params
        self.state = state if state is not None else OptState()

    def step(self, grads: Mapping[str, np.ndarray] = None) -> None:
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        self._step(self.params, grads, self.state, self.config)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.state.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.state.v.items()})
        return out

    def meta(self) -> dict:
        return {"kind": self.kind, "config": asdict(self.config), "t": self.state.t, "mu_product": self.state.mu_product}

    @classmethod
    def from_meta(cls, params, meta: dict, arrays: Mapping[str, np.ndarray]) -> "Optimizer":
        cfg_cls = _STEPS[meta["kind"]][0]
        state = OptState(t=int(meta["t"]), mu_product=float(meta["mu_product"]))
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                state.m[key[6:]] = np.array(arr)
            elif key.startswith("opt.v."):
                state.v[key[6:]] = np.array(arr)
        return cls(params, meta["kind"], cfg_cls(**meta["config"]), state)


def make_config(kind: str, lr: float = 2e-4) -> OptConfig:
    cfg = _STEPS[kind][0]()
    cfg.lr = lr
    return cfg

