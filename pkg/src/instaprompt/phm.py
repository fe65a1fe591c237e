"""Kronecker-sum (PHM) linear layers and the down/up prompt projector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConstructionError(ValueError):
    pass


@dataclass
class Dense:
    """Plain affine layer ``y = x W^T + b`` with ``W`` shaped (out, in)."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng, name: str = "dense") -> "Dense":
        std = np.sqrt(2.0 / (d_in + d_out))
        return cls(ad.parameter(rng.normal(0.0, std, (d_out, d_in)), f"{name}.weight"),
                   ad.parameter(np.zeros(d_out), f"{name}.bias"))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def materialize(self) -> Tensor:
        return self.weight

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.DimensionError(f"input width {x.shape[-1]} != layer input {self.d_in}")
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def param_count(self, include_bias: bool = False) -> int:
        return self.weight.data.size + (self.bias.data.size if include_bias else 0)


@dataclass
class PhmLayer:
    """Affine layer whose (k x d) weight is ``sum_i kron(A[i], S[i])``.

    Each ``A[i]`` is n x n and each ``S[i]`` is (k/n) x (d/n).
    """

    A: list[Tensor]
    S: list[Tensor]
    bias: Tensor

    def __post_init__(self):
        n = len(self.A)
        if n < 1 or len(self.S) != n:
            raise ConstructionError(f"need n >= 1 matching A and S factors, got {len(self.A)}/{len(self.S)}")
        for a in self.A:
            if a.shape != (n, n):
                raise ConstructionError(f"A factors must be {n}x{n}, got {a.shape}")
        shapes = {s.shape for s in self.S}
        if len(shapes) != 1:
            raise ConstructionError(f"S factors have differing shapes {shapes}")
        kk, dd = shapes.pop()
        if self.bias.shape != (kk * n,):
            raise ConstructionError(f"bias must have length {kk * n}, got {self.bias.shape}")

    @classmethod
    def init(cls, d_in: int, d_out: int, n: int, rng, name: str = "phm") -> "PhmLayer":
        if n < 1 or d_in % n or d_out % n:
            raise ConstructionError(f"n={n} must divide both d_in={d_in} and d_out={d_out}")
        s_std = np.sqrt(2.0 / (d_in / n + d_out / n))
        A = [ad.parameter(rng.normal(0.0, np.sqrt(1.0 / n), (n, n)), f"{name}.A{i}") for i in range(n)]
        S = [ad.parameter(rng.normal(0.0, s_std, (d_out // n, d_in // n)), f"{name}.S{i}") for i in range(n)]
        return cls(A, S, ad.parameter(np.zeros(d_out), f"{name}.bias"))

    @property
    def n(self) -> int:
        return len(self.A)

    @property
    def d_in(self) -> int:
        return self.S[0].shape[1] * self.n

    @property
    def d_out(self) -> int:
        return self.S[0].shape[0] * self.n

    def materialize(self) -> Tensor:
        M = ad.kron(self.A[0], self.S[0])
        for a, s in zip(self.A[1:], self.S[1:]):
            M = ad.add(M, ad.kron(a, s))
        return M

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.DimensionError(f"input width {x.shape[-1]} != layer input {self.d_in}")
        return ad.add(ad.matmul(x, ad.transpose(self.materialize())), self.bias)

    def parameters(self) -> list[Tensor]:
        return [*self.A, *self.S, self.bias]

    def param_count(self, include_bias: bool = False) -> int:
        return phm_param_count(self.n, self.d_in, self.d_out) + (self.d_out if include_bias else 0)


def phm_param_count(n: int, d_in: int, d_out: int) -> int:
    """n^3 + k*d/n: n factors of n x n plus n factors of (k/n) x (d/n)."""
    return n ** 3 + (d_out * d_in) // n


def ratio_vs_fcn(layer: PhmLayer) -> float:
    return layer.param_count() / (layer.d_in * layer.d_out)


@dataclass
class BottleneckProjector:
    down: PhmLayer | Dense
    up: PhmLayer | Dense

    def __post_init__(self):
        if self.down.d_out != self.up.d_in:
            raise ConstructionError(f"down outputs {self.down.d_out} but up expects {self.up.d_in}")

    @classmethod
    def init(cls, d: int, bottleneck: int, n: int, rng, mlp: bool = False) -> "BottleneckProjector":
        """PHM projector d -> bottleneck -> d, or with ``mlp=True`` a dense one
        whose hidden width is ``bottleneck // n`` (comparable parameter budget)."""
        if mlp:
            h = max(1, bottleneck // n)
            return cls(Dense.init(d, h, rng, "proj.down"), Dense.init(h, d, rng, "proj.up"))
        return cls(PhmLayer.init(d, bottleneck, n, rng, "proj.down"),
                   PhmLayer.init(bottleneck, d, n, rng, "proj.up"))

    def __call__(self, H: Tensor) -> Tensor:
        return self.up(ad.relu(self.down(H)))

    def parameters(self) -> list[Tensor]:
        return self.down.parameters() + self.up.parameters()

    def param_count(self, include_bias: bool = True) -> int:
        return self.down.param_count(include_bias) + self.up.param_count(include_bias)


def phm_forward(layer: PhmLayer, x: Tensor) -> Tensor:
    return layer(x)


def bottleneck_forward(proj: BottleneckProjector, H: Tensor) -> Tensor:
    return proj(H)
