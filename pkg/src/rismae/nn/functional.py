"""Stateless forms of the layer rules, taking explicit parameter records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MultiHeadAttention, _layer_norm, gelu


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.gamma.shape != self.beta.shape:
            raise ValueError("gamma and beta must have the same length")


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    num_heads: int = 1

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.num_heads

    def module(self) -> MultiHeadAttention:
        return MultiHeadAttention.from_weights(self.wq, self.wk, self.wv, self.wo,
                                               self.num_heads)


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, d) or self.b2.shape != (d,):
            raise ValueError("inconsistent MLP parameter shapes")


def layer_norm(x, p: LayerNormParams) -> np.ndarray:
    return _layer_norm(x, p.gamma, p.beta, p.eps)[0]


def multi_head_attention(x, p: AttentionParams, return_weights: bool = False):
    return p.module().forward(np.asarray(x), return_weights=return_weights)


def gelu_mlp(x, p: MlpParams) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != p.w1.shape[0]:
        raise ValueError(f"gelu_mlp expects width {p.w1.shape[0]}, got {x.shape[-1]}")
    return gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2
