"""Per-node prompts computed from a frozen encoder's own embeddings.

The quantised prompts are added to the node features and the prompted graph
goes back through the same encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, backbone_forward, encode_inputs, propagate, readout_mean
from .phm import BottleneckProjector
from .vq import Codebook, quantize


class ContractError(RuntimeError):
    pass


@dataclass
class PromptModel:
    projector: BottleneckProjector
    codebook: Codebook
    static_prompt: Tensor
    beta: float = 1.0
    no_vq: bool = False
    straight_through: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        d = self.projector.up.d_out
        if self.static_prompt.shape != (d,):
            raise ContractError(f"static prompt must have shape ({d},), got {self.static_prompt.shape}")

    @property
    def mlp_projector(self) -> bool:
        return not hasattr(self.projector.down, "A")

    def parameters(self) -> list[Tensor]:
        """Gradient-trained parameters; the codebook is EMA-only and excluded."""
        return self.projector.parameters() + [self.static_prompt]


@dataclass
class PromptedBatch:
    graph: object
    H: np.ndarray
    p_c: Tensor
    p_q: np.ndarray
    final: Tensor
    indices: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.final.shape[0]


def straight_through_compose(p_c: Tensor, p_q) -> Tensor:
    """Value of ``p_q`` with the gradient routed to ``p_c`` unchanged."""
    return ad.straight_through(p_c, np.asarray(p_q))


def generate_prompts(g, bb: Backbone, pm: PromptModel, rng: np.random.Generator | None = None,
                     indices: np.ndarray | None = None) -> PromptedBatch:
    """First pass: encode, project, quantise and fuse with the static prompt.

    Passing ``indices`` replays a previous draw instead of sampling.
    """
    if not bb.frozen:
        raise ContractError("prompt generation expects a frozen backbone")
    H = backbone_forward(g, bb).data
    p_c = pm.projector(ad.constant(H))
    if pm.no_vq:
        p_q, idx = p_c.data, None
        composed = p_c
    else:
        if indices is not None:
            idx = np.asarray(indices, dtype=np.intp)
            p_q = pm.codebook.E[idx].mean(axis=-2)
        else:
            if rng is None:
                raise ContractError("quantisation needs a random generator")
            p_q, idx = quantize(pm.codebook, p_c.data, rng)
        composed = straight_through_compose(p_c, p_q) if pm.straight_through else ad.constant(p_q)
    final = ad.add(composed, ad.scale(pm.static_prompt, pm.beta))
    return PromptedBatch(g, H, p_c, p_q, final, idx)


def apply_prompts(g, bb: Backbone, prompts: Tensor | PromptedBatch) -> Tensor:
    """Second pass: add prompts to the embedded features, propagate, read out."""
    P = prompts.final if isinstance(prompts, PromptedBatch) else prompts
    X = encode_inputs(g, bb)
    if P.shape != X.shape and P.shape != (X.shape[1],):
        raise ad.DimensionError(f"prompts {P.shape} do not fit embedded features {X.shape}")
    return readout_mean(propagate(ad.add(X, P), g, bb), g)
