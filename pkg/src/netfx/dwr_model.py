"""Attention-based outcome model: encoder, learned exposure, two heads.

The model encodes covariates, scores neighbour pairs by dot products of
the encodings, and normalizes those scores twice: once over neighbours
only (giving the learned exposure ``z_hat = sum_j a_ij t_j``) and once
over the neighbourhood plus a self edge (giving the aggregated
representation ``r_i``).  Outcomes are predicted by two separate heads,
one per treatment arm, each taking ``(r_i, z)`` so counterfactual queries
at arbitrary exposures are a single forward pass.

Ablation flags: ``use_attention=False`` replaces both learned maps by
uniform ones, making the exposure exactly the fraction of treated
neighbours; ``use_weights`` lives in the trainer and controls whether the
outcome loss is reweighted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from netfx.diffcore import (
    ParamBlock,
    affine,
    affine_params,
    as_tensor,
    mlp_params,
    relu,
    segment_softmax,
    segment_sum,
)
from netfx.netgraph import GraphError, Network
from netfx.synthgen import EffectTriple

_Z_TOL = 1e-9


@dataclass(frozen=True)
class ModelArch:
    """Layer widths of the encoder and the two outcome heads."""

    input_dim: int
    encoder_widths: tuple[int, ...] = (32, 64)
    head_widths: tuple[int, ...] = (128, 128, 128)

    def __post_init__(self):
        if self.input_dim < 1 or not self.encoder_widths or not self.head_widths:
            raise ValueError(f"degenerate architecture {self}")

    @property
    def rep_dim(self) -> int:
        return self.encoder_widths[-1]

    def to_jsonable(self) -> dict:
        return {"input_dim": self.input_dim,
                "encoder_widths": list(self.encoder_widths),
                "head_widths": list(self.head_widths)}

    @classmethod
    def from_jsonable(cls, data) -> "ModelArch":
        return cls(input_dim=int(data["input_dim"]),
                   encoder_widths=tuple(data["encoder_widths"]),
                   head_widths=tuple(data["head_widths"]))


@dataclass
class GraphIndex:
    """Torch index tensors for one graph, shared by every forward pass.

    ``rows``/``cols`` enumerate directed edges in CSR order; the ``ext_``
    variants append one self edge ``(i, i)`` per node for the aggregation
    softmax.  Building this once per graph keeps forward passes free of
    python-level graph walks.
    """

    n: int
    rows: torch.Tensor
    cols: torch.Tensor
    ext_rows: torch.Tensor
    ext_cols: torch.Tensor
    degrees: torch.Tensor

    @classmethod
    def from_network(cls, net: Network) -> "GraphIndex":
        if net.n == 0:
            raise GraphError("empty graph")
        if int((net.degrees == 0).sum()):
            bad = int(np.flatnonzero(net.degrees == 0)[0])
            raise GraphError(f"model requires no isolated nodes (node {bad})")
        rows_np, cols_np = net.directed_pairs()
        rows = torch.from_numpy(rows_np)
        cols = torch.from_numpy(cols_np)
        loops = torch.arange(net.n, dtype=torch.int64)
        return cls(
            n=net.n,
            rows=rows,
            cols=cols,
            ext_rows=torch.cat([rows, loops]),
            ext_cols=torch.cat([cols, loops]),
            degrees=torch.from_numpy(net.degrees.astype(np.float64)),
        )


@dataclass
class ForwardState:
    """Intermediate tensors of one forward pass (autograd-connected)."""

    H: torch.Tensor
    attn_neighbor: torch.Tensor
    attn_self: torch.Tensor
    z_hat: torch.Tensor
    R: torch.Tensor


@dataclass
class DropoutPlan:
    """Per-layer inverted-dropout masks for one training step.

    ``encoder[k]`` masks the k-th encoder activation, ``head0``/``head1``
    mask the hidden activations of the respective head (full n-row masks,
    subset-indexed inside the head evaluation).
    """

    encoder: list[torch.Tensor] = field(default_factory=list)
    head0: list[torch.Tensor] = field(default_factory=list)
    head1: list[torch.Tensor] = field(default_factory=list)


class DWRModel:
    """Encoder + attention maps + two outcome heads over one architecture."""

    def __init__(self, arch: ModelArch, rng: np.random.Generator,
                 use_attention: bool = True):
        self.arch = arch
        self.use_attention = bool(use_attention)
        enc_dims = (arch.input_dim,) + arch.encoder_widths
        head_dims = (arch.rep_dim + 1,) + arch.head_widths
        self.encoder = ParamBlock(mlp_params(rng, enc_dims))
        self.head0 = ParamBlock({**mlp_params(rng, head_dims),
                                 **affine_params(rng, arch.head_widths[-1], 1, "out_")})
        self.head1 = ParamBlock({**mlp_params(rng, head_dims),
                                 **affine_params(rng, arch.head_widths[-1], 1, "out_")})

    def blocks(self) -> dict[str, ParamBlock]:
        return {"encoder": self.encoder, "head0": self.head0, "head1": self.head1}

    def parameters(self) -> list[ParamBlock]:
        return [self.encoder, self.head0, self.head1]

    # --- forward pieces -----------------------------------------------------

    def encode(self, X: torch.Tensor, masks: list[torch.Tensor] | None = None) -> torch.Tensor:
        h = as_tensor(X)
        n_layers = len(self.arch.encoder_widths)
        for k in range(1, n_layers + 1):
            h = relu(affine(h, self.encoder[f"l{k}_W"], self.encoder[f"l{k}_b"]))
            if masks:
                h = h * masks[k - 1]
        return h

    def attention_maps(self, H: torch.Tensor, gi: GraphIndex) -> tuple[torch.Tensor, torch.Tensor]:
        """Edge weights ``(neighbor-only, neighborhood + self)``.

        Both normalizations share the raw dot-product scores; with
        attention disabled they are the uniform constants ``1/deg`` and
        ``1/(deg + 1)``.
        """
        if not self.use_attention:
            attn_nb = (1.0 / gi.degrees)[gi.rows]
            attn_self = (1.0 / (gi.degrees + 1.0))[gi.ext_rows]
            return attn_nb, attn_self
        scores = (H[gi.rows] * H[gi.cols]).sum(dim=1)
        self_scores = (H * H).sum(dim=1)
        attn_nb = segment_softmax(scores, gi.rows, gi.n)
        attn_self = segment_softmax(torch.cat([scores, self_scores]), gi.ext_rows, gi.n)
        return attn_nb, attn_self

    def estimated_exposure(self, attn_neighbor: torch.Tensor, gi: GraphIndex,
                           t: torch.Tensor) -> torch.Tensor:
        """Learned peer exposure ``z_hat_i = sum_{j in N(i)} a_ij t_j``.

        With uniform attention this is computed as the treated-neighbour
        fraction directly so it equals the homogeneous exposure exactly,
        not merely up to summation order.
        """
        t = as_tensor(t)
        if not self.use_attention:
            return segment_sum(t[gi.cols], gi.rows, gi.n) / gi.degrees
        return segment_sum(attn_neighbor * t[gi.cols], gi.rows, gi.n)

    def aggregate(self, H: torch.Tensor, attn_self: torch.Tensor,
                  gi: GraphIndex) -> torch.Tensor:
        """Neighbourhood representation ``r_i = relu(sum a_ij h_j)``, self included."""
        if not self.use_attention:
            summed = segment_sum(H[gi.ext_cols], gi.ext_rows, gi.n)
            return relu(summed / (gi.degrees + 1.0).unsqueeze(1))
        weighted = attn_self.unsqueeze(1) * H[gi.ext_cols]
        return relu(segment_sum(weighted, gi.ext_rows, gi.n))

    def forward(self, gi: GraphIndex, X: torch.Tensor, t: torch.Tensor,
                dropout: DropoutPlan | None = None) -> ForwardState:
        H = self.encode(X, dropout.encoder if dropout else None)
        attn_nb, attn_self = self.attention_maps(H, gi)
        z_hat = self.estimated_exposure(attn_nb, gi, t)
        R = self.aggregate(H, attn_self, gi)
        return ForwardState(H=H, attn_neighbor=attn_nb, attn_self=attn_self,
                            z_hat=z_hat, R=R)

    # --- outcome heads ------------------------------------------------------

    def _head_forward(self, head: ParamBlock, U: torch.Tensor,
                      masks: list[torch.Tensor] | None = None,
                      row_ids: torch.Tensor | None = None) -> torch.Tensor:
        h = U
        for k in range(1, len(self.arch.head_widths) + 1):
            h = relu(affine(h, head[f"l{k}_W"], head[f"l{k}_b"]))
            if masks:
                m = masks[k - 1]
                h = h * (m[row_ids] if row_ids is not None else m)
        return affine(h, head["out_W"], head["out_b"])[:, 0]

    def head_outputs(self, R: torch.Tensor, arm: int, z: torch.Tensor,
                     masks: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Evaluate one head at exposure ``z`` for every node."""
        z = _validated_z(z)
        U = torch.cat([R, z.unsqueeze(1)], dim=1)
        head = self.head1 if arm == 1 else self.head0
        return self._head_forward(head, U, masks)

    def predict(self, R: torch.Tensor, t: torch.Tensor, z: torch.Tensor,
                dropout: DropoutPlan | None = None) -> torch.Tensor:
        """Factual prediction ``y_hat_i = head_{t_i}(r_i, z_i)``."""
        t = as_tensor(t)
        detached = t.detach()
        if not bool(((detached == 0) | (detached == 1)).all()):
            raise ValueError("treatments must be binary")
        z = _validated_z(z)
        U = torch.cat([R, z.unsqueeze(1)], dim=1)
        out = torch.zeros(R.shape[0], dtype=R.dtype)
        for arm, head, masks in ((0, self.head0, dropout.head0 if dropout else None),
                                 (1, self.head1, dropout.head1 if dropout else None)):
            ids = (detached == arm).nonzero(as_tuple=True)[0]
            if ids.numel():
                vals = self._head_forward(head, U[ids], masks, row_ids=ids)
                out = out.index_add(0, ids, vals)
        return out

    # --- effects ------------------------------------------------------------

    def effect_estimates(self, gi: GraphIndex, X: np.ndarray,
                         z_eval: np.ndarray) -> EffectTriple:
        """Per-node direct, spillover, and total effect estimates.

        Direct contrasts the arms at ``z_eval_i``; spillover moves the
        control arm from exposure 0 to ``z_eval_i``; total contrasts arm 1
        at full exposure against arm 0 at none.  The representation does
        not depend on treatments, so no resampling is involved.
        """
        with torch.no_grad():
            H = self.encode(as_tensor(X))
            _, attn_self = self.attention_maps(H, gi)
            R = self.aggregate(H, attn_self, gi)
            z_eval_t = _validated_z(as_tensor(z_eval))
            zeros = torch.zeros(gi.n, dtype=torch.float64)
            ones = torch.ones(gi.n, dtype=torch.float64)
            y1_at = self.head_outputs(R, 1, z_eval_t)
            y0_at = self.head_outputs(R, 0, z_eval_t)
            y0_zero = self.head_outputs(R, 0, zeros)
            y1_one = self.head_outputs(R, 1, ones)
        return EffectTriple(
            direct=(y1_at - y0_at).numpy(),
            spillover=(y0_at - y0_zero).numpy(),
            total=(y1_one - y0_zero).numpy(),
        )

    def counterfactual_outcomes(self, gi: GraphIndex, X: np.ndarray,
                                t: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Predicted outcomes at arbitrary (t, z), inference mode."""
        with torch.no_grad():
            H = self.encode(as_tensor(X))
            _, attn_self = self.attention_maps(H, gi)
            R = self.aggregate(H, attn_self, gi)
            return self.predict(R, as_tensor(t), as_tensor(z)).numpy()


def _validated_z(z: torch.Tensor) -> torch.Tensor:
    detached = z.detach()
    if bool((detached < -_Z_TOL).any()) or bool((detached > 1.0 + _Z_TOL).any()):
        bad = float(detached[(detached < -_Z_TOL) | (detached > 1.0 + _Z_TOL)][0])
        raise ValueError(f"exposure {bad} outside [0, 1]")
    return z
