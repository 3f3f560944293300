"""Stacked GRU with backpropagation through time.

Gate layout follows the common ``(reset, update, new)`` convention::

    r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from magtac.nn.layers import Module, Parameter, ShapeError


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class GruSpec:
    input_size: int = 24
    hidden_size: int = 32
    num_layers: int = 3


class GRULayer(Module):
    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        self.input_size = input_size
        self.hidden_size = hidden_size
        k = 1.0 / np.sqrt(hidden_size)
        self.weight_ih = Parameter(rng.uniform(-k, k, (3 * hidden_size, input_size)).astype(dtype))
        self.weight_hh = Parameter(rng.uniform(-k, k, (3 * hidden_size, hidden_size)).astype(dtype))
        self.bias_ih = Parameter(np.zeros(3 * hidden_size, dtype=dtype), decay=False)
        self.bias_hh = Parameter(np.zeros(3 * hidden_size, dtype=dtype), decay=False)

    def forward(self, x, h0=None):
        """Run over ``x`` of shape (T, B, I); return all hidden states (T, B, H)."""
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError(f"GRU layer expects (T, B, {self.input_size}), got {x.shape}")
        steps, batch, _ = x.shape
        hs = self.hidden_size
        h = np.zeros((batch, hs), dtype=x.dtype) if h0 is None else h0
        gi_all = (x.reshape(steps * batch, -1) @ self.weight_ih.value.T + self.bias_ih.value).reshape(
            steps, batch, 3 * hs
        )
        w_hh = self.weight_hh.value.T
        out = np.empty((steps, batch, hs), dtype=x.dtype)
        cache = []
        for t in range(steps):
            gi = gi_all[t]
            gh = h @ w_hh + self.bias_hh.value
            r = sigmoid(gi[:, :hs] + gh[:, :hs])
            z = sigmoid(gi[:, hs : 2 * hs] + gh[:, hs : 2 * hs])
            gh_n = gh[:, 2 * hs :]
            n = np.tanh(gi[:, 2 * hs :] + r * gh_n)
            cache.append((h, r, z, n, gh_n))
            h = (1.0 - z) * n + z * h
            out[t] = h
        self._cache = (x, cache)
        return out

    def backward(self, dout):
        """``dout``: gradient w.r.t. every output hidden state (T, B, H). Returns dx (T, B, I)."""
        x, cache = self._cache
        steps, batch, _ = x.shape
        hs = self.hidden_size
        w_hh = self.weight_hh.value
        dgi_all = np.empty((steps, batch, 3 * hs), dtype=dout.dtype)
        dh_next = np.zeros((batch, hs), dtype=dout.dtype)
        dw_hh = np.zeros_like(self.weight_hh.value)
        db_hh = np.zeros_like(self.bias_hh.value)
        for t in reversed(range(steps)):
            h_prev, r, z, n, gh_n = cache[t]
            dh = dout[t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dar = dan * gh_n * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dgi = np.concatenate([dar, daz, dan], axis=1)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dgi_all[t] = dgi
            dw_hh += dgh.T @ h_prev
            db_hh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ w_hh
        flat = dgi_all.reshape(steps * batch, -1)
        self.weight_ih.grad += flat.T @ x.reshape(steps * batch, -1)
        self.bias_ih.grad += flat.sum(axis=0)
        self.weight_hh.grad += dw_hh
        self.bias_hh.grad += db_hh
        return (flat @ self.weight_ih.value).reshape(x.shape)


class GRU(Module):
    """Stacked GRU returning the top layer's hidden state at the last time step."""

    def __init__(self, spec: GruSpec = GruSpec(), rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        self.spec = spec
        self.layers = [
            GRULayer(spec.input_size if i == 0 else spec.hidden_size, spec.hidden_size, rng, dtype)
            for i in range(spec.num_layers)
        ]

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] < 1:
            raise ShapeError(f"GRU expects (T>=1, B, {self.spec.input_size}), got {x.shape}")
        finals = []
        for layer in self.layers:
            x = layer.forward(x)
            finals.append(x[-1])
        self.h_n = np.stack(finals)  # (num_layers, B, H)
        self._out_shape = x.shape
        return x[-1]

    def backward(self, dh_last):
        dout = np.zeros(self._out_shape, dtype=dh_last.dtype)
        dout[-1] = dh_last
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout
