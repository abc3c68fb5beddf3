"""Shared feature extractor mapping a feature window to a latent vector.

Three kinds are supported:

* ``linear-flatten``: flattened window through affine layers, no activation.
* ``mlp-flatten``: flattened window through affine layers with an activation
  after every hidden layer; the latent layer itself stays affine.
* ``recurrent-mean``: a vanilla recurrent cell run over the window rows, its
  hidden states averaged into the latent vector.

All functions accept a single window ``(window_len, F)`` or a batch
``(N, window_len, F)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import activate, activate_grad, glorot_uniform

KINDS = ("linear-flatten", "mlp-flatten", "recurrent-mean")


@dataclass
class BackboneConfig:
    kind: str = "linear-flatten"
    window_len: int = 5
    feature_dim: int = 16
    hidden_dims: list[int] = field(default_factory=list)
    latent_dim: int = 16
    activation: str = "tanh"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"backbone.kind must be one of {KINDS}, got {self.kind!r}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"backbone.activation must be tanh or relu, got {self.activation!r}")
        if self.latent_dim < 1:
            raise ValueError("backbone.latent_dim must be >= 1")
        if self.window_len < 1:
            raise ValueError("backbone.window_len must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("backbone.feature_dim must be >= 1")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("backbone.hidden_dims entries must be >= 1")
        if self.kind == "recurrent-mean" and self.hidden_dims:
            raise ValueError("recurrent-mean uses latent_dim as its state size; hidden_dims must be empty")

    def layer_dims(self) -> list[int]:
        return [self.window_len * self.feature_dim, *self.hidden_dims, self.latent_dim]


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    config.validate()
    params: dict[str, np.ndarray] = {}
    if config.kind == "recurrent-mean":
        d, f = config.latent_dim, config.feature_dim
        params["Wx"] = glorot_uniform(rng, d, f)
        params["Ws"] = glorot_uniform(rng, d, d)
        params["b"] = np.zeros(d)
        return params
    dims = config.layer_dims()
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"W{i}"] = glorot_uniform(rng, fan_out, fan_in)
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def _as_batch(config: BackboneConfig, window) -> tuple[np.ndarray, bool]:
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.window_len, config.feature_dim):
        raise ValueError(
            f"window shape {np.shape(window)} does not match ({config.window_len}, {config.feature_dim})"
        )
    return x, single


def backbone_forward(config: BackboneConfig, params, window, return_cache: bool = False):
    x, single = _as_batch(config, window)
    n = x.shape[0]
    if config.kind == "recurrent-mean":
        d = config.latent_dim
        s = np.zeros((n, d))
        pres, states = [], []
        for j in range(config.window_len):
            pre = x[:, j] @ params["Wx"].T + s @ params["Ws"].T + params["b"]
            s = activate(config.activation, pre)
            pres.append(pre)
            states.append(s)
        h = np.mean(states, axis=0)
        cache = {"x": x, "pres": pres, "states": states}
    else:
        a = x.reshape(n, -1)
        acts, pres = [a], []
        n_layers = len(config.hidden_dims) + 1
        for i in range(n_layers):
            z = a @ params[f"W{i}"].T + params[f"b{i}"]
            pres.append(z)
            if config.kind == "mlp-flatten" and i < n_layers - 1:
                a = activate(config.activation, z)
            else:
                a = z
            acts.append(a)
        h = a
        cache = {"acts": acts, "pres": pres}
    if single:
        h = h[0]
    return (h, cache) if return_cache else h


def backbone_backward(config: BackboneConfig, params, window, grad_h, cache=None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_h * h)`` with respect to every parameter."""
    x, single = _as_batch(config, window)
    g = np.asarray(grad_h, dtype=np.float64)
    if single:
        g = g[None]
    if g.shape != (x.shape[0], config.latent_dim):
        raise ValueError(f"grad_h shape {np.shape(grad_h)} does not match latent_dim {config.latent_dim}")
    if cache is None:
        _, cache = backbone_forward(config, params, x, return_cache=True)
    grads: dict[str, np.ndarray] = {}
    if config.kind == "recurrent-mean":
        states, pres = cache["states"], cache["pres"]
        w = config.window_len
        gWx = np.zeros_like(params["Wx"])
        gWs = np.zeros_like(params["Ws"])
        gb = np.zeros_like(params["b"])
        ds_next = np.zeros_like(g)
        for j in reversed(range(w)):
            ds = g / w + ds_next
            dpre = ds * activate_grad(config.activation, pres[j], states[j])
            gWx += dpre.T @ x[:, j]
            if j > 0:
                gWs += dpre.T @ states[j - 1]
            gb += dpre.sum(axis=0)
            ds_next = dpre @ params["Ws"]
        grads = {"Wx": gWx, "Ws": gWs, "b": gb}
        return grads
    acts, pres = cache["acts"], cache["pres"]
    n_layers = len(config.hidden_dims) + 1
    delta = g
    for i in reversed(range(n_layers)):
        if config.kind == "mlp-flatten" and i < n_layers - 1:
            delta = delta * activate_grad(config.activation, pres[i], acts[i + 1])
        grads[f"W{i}"] = delta.T @ acts[i]
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params[f"W{i}"]
    return grads
