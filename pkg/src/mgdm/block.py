"""One encoder layer: pre-norm, a coarse-grained branch over the whole token
stream and a fine-grained branch that first aggregates each step's
rtg/state/action triplet through a width-3 causal conv, gated SSM scans on
both, LayerNorm fusion, and a projected residual.

Token layout is three tokens per trajectory step, so the sequence length
must be a multiple of 3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor, add, conv1d_causal, layer_norm, linear, mul, parameter, silu
from .ssm import (
    SsmParams,
    discretize,
    init_ssm_params,
    scan,
    selective_project,
    transition_matrix,
)

STEP_CONV_WIDTH = 3  # one rtg/state/action triplet


@dataclass
class BranchParams:
    """Conv + selective SSM of a single branch."""

    conv_w: Tensor  # (D, W) depthwise
    conv_b: Tensor  # (D,)
    ssm: SsmParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.conv_w", self.conv_w
        yield f"{prefix}.conv_b", self.conv_b
        yield from self.ssm.named(f"{prefix}.ssm")


@dataclass
class MGBlockParams:
    """All learnable tensors of one multi-grained block."""

    norm_in_gain: Tensor
    norm_in_bias: Tensor
    step_conv_w: Tensor  # (D, 3) fine-grained triplet conv
    step_conv_b: Tensor
    gate_cg_w: Tensor
    gate_cg_b: Tensor
    gate_fg_w: Tensor
    gate_fg_b: Tensor
    cg: BranchParams
    fg: BranchParams
    norm_fuse_gain: Tensor
    norm_fuse_bias: Tensor
    proj_w: Tensor
    proj_b: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.norm_in_gain", self.norm_in_gain
        yield f"{prefix}.norm_in_bias", self.norm_in_bias
        yield f"{prefix}.step_conv_w", self.step_conv_w
        yield f"{prefix}.step_conv_b", self.step_conv_b
        yield f"{prefix}.gate_cg_w", self.gate_cg_w
        yield f"{prefix}.gate_cg_b", self.gate_cg_b
        yield f"{prefix}.gate_fg_w", self.gate_fg_w
        yield f"{prefix}.gate_fg_b", self.gate_fg_b
        yield from self.cg.named(f"{prefix}.cg")
        yield from self.fg.named(f"{prefix}.fg")
        yield f"{prefix}.norm_fuse_gain", self.norm_fuse_gain
        yield f"{prefix}.norm_fuse_bias", self.norm_fuse_bias
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b


def _branch(d: int, n: int, conv_width: int, rng: np.random.Generator, with_skip: bool) -> BranchParams:
    kw = 1.0 / np.sqrt(conv_width)
    return BranchParams(
        conv_w=parameter(rng.uniform(-kw, kw, size=(d, conv_width))),
        conv_b=parameter(np.zeros(d)),
        ssm=init_ssm_params(d, n, rng, with_skip=with_skip),
    )


def init_block_params(
    d: int,
    n: int,
    rng: np.random.Generator,
    conv_width: int = 4,
    with_skip: bool = True,
    fuse_affine: bool = True,
    proj_init_std: float = 0.02,
) -> MGBlockParams:
    kd = 1.0 / np.sqrt(d)
    k3 = 1.0 / np.sqrt(STEP_CONV_WIDTH)
    return MGBlockParams(
        norm_in_gain=parameter(np.ones(d)),
        norm_in_bias=parameter(np.zeros(d)),
        step_conv_w=parameter(rng.uniform(-k3, k3, size=(d, STEP_CONV_WIDTH))),
        step_conv_b=parameter(np.zeros(d)),
        gate_cg_w=parameter(rng.uniform(-kd, kd, size=(d, d))),
        gate_cg_b=parameter(np.zeros(d)),
        gate_fg_w=parameter(rng.uniform(-kd, kd, size=(d, d))),
        gate_fg_b=parameter(np.zeros(d)),
        cg=_branch(d, n, conv_width, rng, with_skip),
        fg=_branch(d, n, conv_width, rng, with_skip),
        norm_fuse_gain=Tensor(np.ones(d), requires_grad=fuse_affine),
        norm_fuse_bias=Tensor(np.zeros(d), requires_grad=fuse_affine),
        proj_w=parameter(rng.normal(0.0, proj_init_std, size=(d, d))),
        proj_b=parameter(np.zeros(d)),
    )


def fine_grained_conv(h: Tensor, params: MGBlockParams) -> Tensor:
    """Width-3 depthwise causal conv so each token aggregates at most its own
    step's triplet window; causality holds across step boundaries."""
    if h.shape[1] % 3 != 0:
        raise ValueError(f"token length {h.shape[1]} is not a multiple of 3")
    return conv1d_causal(h, params.step_conv_w, params.step_conv_b)


def _branch_mix(h: Tensor, br: BranchParams, rule: str) -> Tensor:
    b_, l_, d_ = h.shape
    u = silu(conv1d_causal(h, br.conv_w, br.conv_b))
    assert u.shape == (b_, l_, d_)
    delta, b_proj, c_proj = selective_project(u, br.ssm)
    n_ = br.ssm.w_b.shape[1]
    assert delta.shape == (b_, l_, d_)
    assert b_proj.shape == (b_, l_, n_) and c_proj.shape == (b_, l_, n_)
    ops = discretize(transition_matrix(br.ssm), b_proj, delta, rule=rule)
    assert ops.abar.shape == (b_, l_, d_, n_) and ops.bbar.shape == (b_, l_, d_, n_)
    out = scan(ops, c_proj, u, skip=br.ssm.skip)
    assert out.shape == (b_, l_, d_)
    return out


def block_forward(
    h_prev: Tensor,
    params: MGBlockParams,
    rule: str = "zoh",
    share_gate: bool = False,
    fg_enabled: bool = True,
) -> Tensor:
    """Run one block on (B, L, D) hidden states; L must be a multiple of 3.

    ``fg_enabled=False`` zeroes the fine-grained branch's gated output,
    leaving a plain pre-norm gated selective-SSM layer.
    """
    b_, l_, d_ = h_prev.shape
    if l_ % 3 != 0:
        raise ValueError(f"token length {l_} is not a multiple of 3")

    h_cg = layer_norm(h_prev, params.norm_in_gain, params.norm_in_bias)
    assert h_cg.shape == (b_, l_, d_)

    z_cg = linear(h_prev, params.gate_cg_w, params.gate_cg_b)
    assert z_cg.shape == (b_, l_, d_)

    if fg_enabled:
        h_fg = fine_grained_conv(h_cg, params)
        assert h_fg.shape == (b_, l_, d_)
        z_fg = z_cg if share_gate else linear(h_prev, params.gate_fg_w, params.gate_fg_b)
        h_fg = mul(_branch_mix(h_fg, params.fg, rule), silu(z_fg))
        assert h_fg.shape == (b_, l_, d_)

    h_cg = mul(_branch_mix(h_cg, params.cg, rule), silu(z_cg))
    assert h_cg.shape == (b_, l_, d_)

    fused = add(h_cg, h_fg) if fg_enabled else h_cg
    h_mg = layer_norm(fused, params.norm_fuse_gain, params.norm_fuse_bias)
    assert h_mg.shape == (b_, l_, d_)
    out = linear(add(h_mg, h_prev), params.proj_w, params.proj_b)
    assert out.shape == (b_, l_, d_)
    return out
