"""The MPSTAN recurrent cell and full forward pass.

Each step runs a GRU over the patch features, a two-layer multi-head graph
attention network over the GRU output, generates epidemic rates from the two
embeddings, advances the observed state one day with (MP-)SIR, and fuses the
physical one-day forecast back into the hidden state.

All tensors are float64.  Weights are stored as ``in x out`` matrices and
applied as ``x @ W``.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data_pipeline import ACTIVE, Scaler, WindowSample, denormalize
from .epi_dynamics import EpiParams, step_channels
from .errors import GraphError, InputError
from .geo_graph import PatchGraph

DTYPE = torch.float64
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ModelDims:
    d_gru: int = 64
    d_gat: int = 32
    heads: int = 2
    c_in: int = 3
    t_out: int = 5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) != v or v < 1:
                raise InputError(f"model dimension {k} must be a positive integer, got {v}")


@dataclass(frozen=True)
class AblationMode:
    use_phy_in_model: bool = True
    use_phy_in_loss: bool = True
    use_mobility: bool = True
    use_mpg: bool = True

    @property
    def uses_physics(self) -> bool:
        return self.use_phy_in_model or self.use_phy_in_loss


class ModelWeights(nn.Module):
    """Every trainable tensor of the model, as named parameters."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        d, g, k, c = dims.d_gru, dims.d_gat, dims.heads, dims.c_in
        # GRU gates are stored side by side (z | r | h); per-gate views below
        shapes = {
            "W_x": (c, 3 * d), "U_zr": (d, 2 * d), "U_h": (d, d), "b_x": (3 * d,),
            "gat1_W": (k, d, g), "gat1_att": (k, 2 * g),
            "gat2_W": (k, g, g), "gat2_att": (k, 2 * g),
            "gen_intra_W": (d, 2), "gen_intra_b": (2,),
            "gen_inter_W": (g, 3), "gen_inter_b": (3,),
            "gen_joint_W": (g, 5), "gen_joint_b": (5,),
            "fuse_in_W": (c, g), "fuse_in_b": (g,),
            "fuse_out_W": (2 * g, d), "fuse_out_b": (d,),
            "head_W": (d, dims.t_out), "head_b": (dims.t_out,),
        }
        for name, shape in shapes.items():
            self.register_parameter(name, nn.Parameter(torch.zeros(shape, dtype=DTYPE)))

    W_z = property(lambda self: self.W_x[:, : self.dims.d_gru])
    W_r = property(lambda self: self.W_x[:, self.dims.d_gru : 2 * self.dims.d_gru])
    W_h = property(lambda self: self.W_x[:, 2 * self.dims.d_gru :])
    U_z = property(lambda self: self.U_zr[:, : self.dims.d_gru])
    U_r = property(lambda self: self.U_zr[:, self.dims.d_gru :])
    b_z = property(lambda self: self.b_x[: self.dims.d_gru])
    b_r = property(lambda self: self.b_x[self.dims.d_gru : 2 * self.dims.d_gru])
    b_h = property(lambda self: self.b_x[2 * self.dims.d_gru :])

    def to_arrays(self) -> dict:
        return {n: p.detach().numpy().copy() for n, p in self.named_parameters()}

    def load_arrays(self, arrays: dict) -> None:
        with torch.no_grad():
            for n, p in self.named_parameters():
                a = np.asarray(arrays[n], dtype=float)
                if a.shape != tuple(p.shape):
                    raise InputError(f"weight {n}: expected shape {tuple(p.shape)}, got {a.shape}")
                p.copy_(torch.as_tensor(a, dtype=DTYPE))


def _glorot_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_weights(dims: ModelDims, seed: int) -> ModelWeights:
    """Glorot-uniform matrices, zero biases, fully determined by ``seed``."""
    w = ModelWeights(dims)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in w.named_parameters():
            if p.ndim == 1:
                continue  # biases stay zero
            if name.endswith("_att"):
                # one attention vector per head over the concatenated pair
                fan_in, fan_out = p.shape[1], 1
            elif name in ("W_x", "U_zr"):
                # fused gate blocks, each its own in x d_gru matrix
                fan_in, fan_out = p.shape[0], dims.d_gru
            else:
                fan_in, fan_out = p.shape[-2], p.shape[-1]
            b = _glorot_bound(fan_in, fan_out)
            p.copy_(torch.as_tensor(rng.uniform(-b, b, size=tuple(p.shape)), dtype=DTYPE))
    return w


@dataclass(frozen=True, eq=False)
class GraphTensors:
    """Torch view of a :class:`PatchGraph` used inside the network."""

    n: int
    dst: torch.Tensor
    src: torch.Tensor
    mobility: torch.Tensor

    def __post_init__(self):
        if self.dst.numel() == 0 or torch.unique(self.dst).numel() != self.n:
            raise GraphError("every patch needs at least one neighbour for attention")

    @classmethod
    def from_graph(cls, g: PatchGraph) -> "GraphTensors":
        dst, src = g.edge_index()
        return cls(
            n=g.n,
            dst=torch.as_tensor(dst),
            src=torch.as_tensor(src),
            mobility=torch.as_tensor(np.array(g.mobility_matrix), dtype=DTYPE),
        )


def _as_graph_tensors(g) -> GraphTensors:
    return g if isinstance(g, GraphTensors) else GraphTensors.from_graph(g)


def gru_step(x_t, h_prev, w: ModelWeights, x_proj=None):
    """GRU update; ``x_proj`` may carry a precomputed ``x_t @ W_x + b_x``."""
    d = w.dims.d_gru
    if x_proj is None:
        x_proj = x_t @ w.W_x + w.b_x
    zr = torch.sigmoid(x_proj[:, : 2 * d] + h_prev @ w.U_zr)
    z, r = zr[:, :d], zr[:, d:]
    h_tilde = torch.tanh(x_proj[:, 2 * d :] + (r * h_prev) @ w.U_h)
    return z * h_prev + (1.0 - z) * h_tilde


def gat_layer(h_in, g, W, att, return_attention: bool = False):
    """One multi-head attention layer over the patch graph.

    ``W`` is K x d_in x d_out and ``att`` is K x 2*d_out.  Scores are
    LeakyReLU(att . [W h_i || W h_j]) for j in the neighbourhood of i,
    softmax-normalized per (i, head); heads are averaged.
    """
    gt = _as_graph_tensors(g)
    k, _, d_out = W.shape
    proj = torch.matmul(h_in, W)  # K x N x d_out
    # column 0 scores the centre patch, column 1 the neighbour
    scores = torch.matmul(proj, att.view(k, 2, d_out).transpose(1, 2))  # K x N x 2
    e = F.leaky_relu(scores[:, gt.dst, 0] + scores[:, gt.src, 1], LEAKY_SLOPE)  # K x E
    # per-row shift for a stable softmax; the shift cancels so it carries no gradient
    idx = gt.dst.expand(k, -1)
    row_max = torch.full((k, gt.n), -torch.inf, dtype=e.dtype).scatter_reduce(
        1, idx, e.detach(), reduce="amax"
    )
    ex = torch.exp(e - row_max[:, gt.dst])
    denom = torch.zeros((k, gt.n), dtype=e.dtype).index_add(1, gt.dst, ex)
    alpha = ex / denom[:, gt.dst]
    msg = alpha[..., None] * proj[:, gt.src, :]  # K x E x d_out
    out = torch.zeros((k, gt.n, d_out), dtype=e.dtype).index_add(1, gt.dst, msg).mean(0)
    if return_attention:
        return out, alpha
    return out


def spatial_embed(h_temp, g, w: ModelWeights):
    h = F.elu(gat_layer(h_temp, g, w.gat1_W, w.gat1_att))
    return gat_layer(h, g, w.gat2_W, w.gat2_att)


def generate_params(h_temp, h_st, w: ModelWeights, mode: AblationMode = AblationMode()) -> EpiParams:
    if mode.use_mpg:
        intra = torch.sigmoid(h_temp @ w.gen_intra_W + w.gen_intra_b)
        inter = torch.sigmoid(h_st @ w.gen_inter_W + w.gen_inter_b)
        return EpiParams(beta=intra[:, 0], gamma=intra[:, 1], d_s=inter[:, 0], d_i=inter[:, 1], d_r=inter[:, 2])
    joint = torch.sigmoid(h_st @ w.gen_joint_W + w.gen_joint_b)
    return EpiParams(*joint.unbind(dim=1))


def fuse(h_st, x_phy_norm, w: ModelWeights):
    """Project the normalized one-day physical forecast and merge it."""
    h_phy = x_phy_norm @ w.fuse_in_W + w.fuse_in_b
    return torch.cat([h_st, h_phy], dim=1) @ w.fuse_out_W + w.fuse_out_b


def fuse_without_physics(h_st, w: ModelWeights):
    # same as fuse() with the physical embedding replaced by zeros
    d_gat = h_st.shape[1]
    return h_st @ w.fuse_out_W[:d_gat] + w.fuse_out_b


@dataclass(frozen=True, eq=False)
class ModelContext:
    """Per-dataset constants the cell needs besides the weights."""

    graph: GraphTensors
    population: torch.Tensor
    scale_lo: torch.Tensor  # N x C
    scale_inv: torch.Tensor  # N x C

    @classmethod
    def build(cls, g: PatchGraph, population, scaler: Scaler) -> "ModelContext":
        return cls(
            graph=GraphTensors.from_graph(g),
            population=torch.as_tensor(np.asarray(population, dtype=float), dtype=DTYPE),
            scale_lo=torch.as_tensor(scaler.lo, dtype=DTYPE),
            scale_inv=torch.as_tensor(scaler.inv_span, dtype=DTYPE),
        )

    def normalize(self, x_raw):
        return (x_raw - self.scale_lo) * self.scale_inv

    def normalize_active(self, y_raw):
        """Normalize an N x T' array of active cases."""
        return (y_raw - self.scale_lo[:, ACTIVE, None]) * self.scale_inv[:, ACTIVE, None]


@dataclass
class CellOutput:
    h: torch.Tensor
    h_temp: torch.Tensor
    h_st: torch.Tensor
    params: Optional[EpiParams]
    x_phy_next: Optional[torch.Tensor]  # N x 3 raw counts


def physical_step(x_raw, ctx: ModelContext, params: EpiParams, mode: AblationMode):
    """One-day (MP-)SIR forecast of an N x 3 raw-count state."""
    mobility = ctx.graph.mobility if mode.use_mobility else None
    return step_channels(x_raw, ctx.population, params, mobility)[0]


def mpstan_cell(
    x_norm, x_raw, h_prev, ctx: ModelContext, w: ModelWeights, mode: AblationMode, x_proj=None
) -> CellOutput:
    h_temp = gru_step(x_norm, h_prev, w, x_proj)
    h_st = spatial_embed(h_temp, ctx.graph, w)
    if not mode.use_phy_in_model:
        return CellOutput(h=fuse_without_physics(h_st, w), h_temp=h_temp, h_st=h_st, params=None, x_phy_next=None)
    params = generate_params(h_temp, h_st, w, mode)
    x_next = physical_step(x_raw, ctx, params, mode)
    h = fuse(h_st, ctx.normalize(x_next), w)
    return CellOutput(h=h, h_temp=h_temp, h_st=h_st, params=params, x_phy_next=x_next)


@dataclass
class ForwardOutput:
    y_st: torch.Tensor  # N x T', normalized
    y_phy: Optional[torch.Tensor]  # N x T', normalized; None without physics
    y_phy_raw: Optional[torch.Tensor]  # the same forecast in person counts
    params: Optional[EpiParams]  # rates generated at the last input step


def _tensor(a):
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(np.array(a), dtype=DTYPE)


def forward(sample: WindowSample, ctx: ModelContext, w: ModelWeights, mode: AblationMode = AblationMode()) -> ForwardOutput:
    """Encode the input window with teacher forcing and emit both forecasts."""
    x_norm = _tensor(sample.input)
    x_raw = _tensor(sample.raw_input)
    n, t_in, _ = x_norm.shape
    h = torch.zeros((n, w.dims.d_gru), dtype=DTYPE)
    x_proj = x_norm @ w.W_x + w.b_x  # input projections for every step at once
    out = None
    for t in range(t_in):
        out = mpstan_cell(x_norm[:, t], x_raw[:, t], h, ctx, w, mode, x_proj[:, t])
        h = out.h
    y_st = h @ w.head_W + w.head_b
    if not mode.uses_physics:
        return ForwardOutput(y_st=y_st, y_phy=None, y_phy_raw=None, params=None)
    params = out.params
    if params is None:
        # physics only in the loss: rates come from the last step's embeddings
        params = generate_params(out.h_temp, out.h_st, w, mode)
    # recursive rollout from the last observed day with the rates frozen
    x = x_raw[:, -1]
    infected = []
    for _ in range(w.dims.t_out):
        x = physical_step(x, ctx, params, mode)
        infected.append(x[:, ACTIVE])
    y_phy_raw = torch.stack(infected, dim=1)
    return ForwardOutput(y_st=y_st, y_phy=ctx.normalize_active(y_phy_raw), y_phy_raw=y_phy_raw, params=params)


class MPSTANModel:
    """Weights bound to a graph, population and scaler."""

    def __init__(self, weights: ModelWeights, graph: PatchGraph, population, scaler: Scaler, mode: AblationMode):
        self.weights = weights
        self.graph = graph
        self.scaler = scaler
        self.mode = mode
        self.ctx = ModelContext.build(graph, population, scaler)

    @property
    def dims(self) -> ModelDims:
        return self.weights.dims

    def __call__(self, sample: WindowSample) -> ForwardOutput:
        return forward(sample, self.ctx, self.weights, self.mode)

    def predict(self, sample: WindowSample):
        """Raw-count forecasts (numpy) for one window: (y_st, y_phy or None)."""
        with torch.no_grad():
            out = self(sample)
        y_st = denormalize(out.y_st.numpy(), self.scaler, channel=ACTIVE)
        y_phy = None if out.y_phy_raw is None else out.y_phy_raw.numpy().copy()
        return y_st, y_phy
