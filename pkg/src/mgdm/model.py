"""The full network: trajectory tokenization, a stack of multi-grained
blocks, and three prediction heads (action, next return-to-go, next state).

Tokens are interleaved per step as (rtg, state, action); the action for
step t is read from the state-token position, the next-rtg and next-state
predictions from the action-token position, which keeps every head causal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .block import MGBlockParams, block_forward, init_block_params


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int
    embed_dim: int = 64
    n_layers: int = 3
    ssm_state: int = 16
    context_len: int = 20
    max_timestep: int = 1024
    dropout: float = 0.1
    action_bound: float = 1.0
    conv_width: int = 4
    share_gate: bool = False
    fuse_affine: bool = True
    skip_enabled: bool = True
    discretize_rule: str = "zoh"
    mg_enabled: bool = True
    proj_init_std: float = 0.02

    def __post_init__(self):
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")

    @property
    def token_len(self) -> int:
        return 3 * self.context_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenSequence:
    """Flattened (rtg, state, action) token stream for a batch of windows."""

    tokens: Tensor          # (B, 3l, D)
    pad_mask: np.ndarray    # (B, 3l) bool, True at left-padded positions
    timesteps: np.ndarray   # (B, l) int


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a caller-supplied generator."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, Tensor(keep))


class DecisionMamba:
    """Policy network over return-conditioned trajectory windows."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        k1 = 1.0
        ks = 1.0 / np.sqrt(cfg.state_dim)
        ka = 1.0 / np.sqrt(cfg.action_dim)
        kd = 1.0 / np.sqrt(d)
        self.emb_rtg_w = parameter(rng.uniform(-k1, k1, size=(1, d)))
        self.emb_rtg_b = parameter(np.zeros(d))
        self.emb_state_w = parameter(rng.uniform(-ks, ks, size=(cfg.state_dim, d)))
        self.emb_state_b = parameter(np.zeros(d))
        self.emb_action_w = parameter(rng.uniform(-ka, ka, size=(cfg.action_dim, d)))
        self.emb_action_b = parameter(np.zeros(d))
        self.pos_table = parameter(rng.normal(0.0, 0.02, size=(cfg.max_timestep, d)))
        self.blocks: list[MGBlockParams] = [
            init_block_params(
                d,
                cfg.ssm_state,
                rng,
                conv_width=cfg.conv_width,
                with_skip=cfg.skip_enabled,
                fuse_affine=cfg.fuse_affine,
                proj_init_std=cfg.proj_init_std,
            )
            for _ in range(cfg.n_layers)
        ]
        self.norm_f_gain = parameter(np.ones(d))
        self.norm_f_bias = parameter(np.zeros(d))
        self.head_action_w = parameter(rng.normal(0.0, 0.02, size=(d, cfg.action_dim)))
        self.head_action_b = parameter(np.zeros(cfg.action_dim))
        self.head_rtg_w = parameter(rng.normal(0.0, 0.02, size=(d, 1)))
        self.head_rtg_b = parameter(np.zeros(1))
        self.head_state_w = parameter(rng.normal(0.0, 0.02, size=(d, cfg.state_dim)))
        self.head_state_b = parameter(np.zeros(cfg.state_dim))

    # -- parameter traversal --------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "emb_rtg_w": self.emb_rtg_w, "emb_rtg_b": self.emb_rtg_b,
            "emb_state_w": self.emb_state_w, "emb_state_b": self.emb_state_b,
            "emb_action_w": self.emb_action_w, "emb_action_b": self.emb_action_b,
            "pos_table": self.pos_table,
        }
        for i, b in enumerate(self.blocks):
            out.update(dict(b.named(f"blocks.{i}")))
        out.update({
            "norm_f_gain": self.norm_f_gain, "norm_f_bias": self.norm_f_bias,
            "head_action_w": self.head_action_w, "head_action_b": self.head_action_b,
            "head_rtg_w": self.head_rtg_w, "head_rtg_b": self.head_rtg_b,
            "head_state_w": self.head_state_w, "head_state_b": self.head_state_b,
        })
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters().items() if t.requires_grad}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
        for name, t in params.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {t.data.shape}")
            t.data[...] = src

    def clone(self) -> "DecisionMamba":
        """Frozen copy: same values, no gradient participation."""
        twin = DecisionMamba(self.cfg, np.random.default_rng(0))
        for name, t in twin.named_parameters().items():
            t.data[...] = self.named_parameters()[name].data
            t.requires_grad = False
            t.grad = None
        return twin

    # -- forward ----------------------------------------------------------

    def embed_trajectory(
        self,
        rtgs: np.ndarray,       # (B, l, 1), already divided by the rtg scale
        states: np.ndarray,     # (B, l, S), already normalized
        actions: np.ndarray,    # (B, l, A)
        timesteps: np.ndarray,  # (B, l) int
        pad: np.ndarray,        # (B, l) bool, True at left-padded steps
    ) -> TokenSequence:
        cfg = self.cfg
        b_, l_ = timesteps.shape
        if np.any(timesteps >= cfg.max_timestep) or np.any(timesteps < 0):
            raise ValueError(f"timestep outside the position table [0, {cfg.max_timestep})")
        assert rtgs.shape == (b_, l_, 1) and states.shape == (b_, l_, cfg.state_dim)
        assert actions.shape == (b_, l_, cfg.action_dim)

        e_r = ad.linear(Tensor(rtgs), self.emb_rtg_w, self.emb_rtg_b)
        e_s = ad.linear(Tensor(states), self.emb_state_w, self.emb_state_b)
        e_a = ad.linear(Tensor(actions), self.emb_action_w, self.emb_action_b)
        e_t = ad.embedding_lookup(self.pos_table, timesteps)
        assert e_r.shape == (b_, l_, cfg.embed_dim)

        # one position vector per step, broadcast to all three of its tokens
        trip = ad.stack([ad.add(e_r, e_t), ad.add(e_s, e_t), ad.add(e_a, e_t)], axis=2)
        tokens = ad.reshape(trip, (b_, 3 * l_, cfg.embed_dim))
        assert tokens.shape == (b_, 3 * l_, cfg.embed_dim)

        pad3 = np.repeat(pad, 3, axis=1)
        keep = np.broadcast_to((~pad3)[..., None], tokens.shape).astype(np.float64)
        tokens = ad.mul(tokens, Tensor(keep.copy()))
        return TokenSequence(tokens=tokens, pad_mask=pad3, timesteps=timesteps)

    def forward(
        self,
        seq: TokenSequence,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (action, next-rtg, next-state) predictions of shapes
        (B, l, action_dim), (B, l, 1), (B, l, state_dim)."""
        cfg = self.cfg
        use_dropout = train and cfg.dropout > 0.0
        if use_dropout and rng is None:
            raise ValueError("training forward needs a dropout generator")

        h = seq.tokens
        if use_dropout:
            h = dropout(h, cfg.dropout, rng)
        for p in self.blocks:
            h = block_forward(
                h, p,
                rule=cfg.discretize_rule,
                share_gate=cfg.share_gate,
                fg_enabled=cfg.mg_enabled,
            )
            if use_dropout:
                h = dropout(h, cfg.dropout, rng)
        h = ad.layer_norm(h, self.norm_f_gain, self.norm_f_bias)

        h_state_tok = h[:, 1::3, :]   # predictions for a_t live on the s_t token
        h_action_tok = h[:, 2::3, :]  # next rtg/state live on the a_t token
        a_hat = ad.tanh(ad.linear(h_state_tok, self.head_action_w, self.head_action_b))
        a_hat = ad.mul(a_hat, Tensor(np.asarray(cfg.action_bound)))
        rtg_hat = ad.linear(h_action_tok, self.head_rtg_w, self.head_rtg_b)
        s_hat = ad.linear(h_action_tok, self.head_state_w, self.head_state_b)
        b_, l3, _ = seq.tokens.shape
        assert a_hat.shape == (b_, l3 // 3, cfg.action_dim)
        assert rtg_hat.shape == (b_, l3 // 3, 1)
        assert s_hat.shape == (b_, l3 // 3, cfg.state_dim)
        return a_hat, rtg_hat, s_hat

    def act(
        self,
        rtgs: np.ndarray,     # (t+1,) raw returns-to-go, rtgs[i] conditions step i
        states: np.ndarray,   # (t+1, S) raw states
        actions: np.ndarray,  # (t, A) actions taken so far
        stats,                # DatasetStats for normalization
        first_timestep: int = 0,
    ) -> np.ndarray:
        """Greedy action for the latest step, from the last context_len steps.

        The final step's action slot is left as a zero token; causal readout
        means it cannot influence the returned action. ``first_timestep`` is
        the absolute step index of the first history entry (for callers
        passing a pre-truncated history).
        """
        cfg = self.cfg
        t = len(states) - 1
        if states.shape[1] != cfg.state_dim:
            raise ValueError(f"state dim {states.shape[1]} != model {cfg.state_dim}")
        lo = max(0, t + 1 - cfg.context_len)
        n = t + 1 - lo
        l = cfg.context_len

        win_states = np.zeros((1, l, cfg.state_dim))
        win_actions = np.zeros((1, l, cfg.action_dim))
        win_rtgs = np.zeros((1, l, 1))
        win_t = np.zeros((1, l), dtype=np.int64)
        pad = np.ones((1, l), dtype=bool)
        pad[0, l - n:] = False
        win_states[0, l - n:] = (states[lo:] - stats.state_mean) / stats.state_std
        win_rtgs[0, l - n:, 0] = np.asarray(rtgs[lo:]) / stats.rtg_scale
        filled = len(actions) - lo
        if filled > 0:
            win_actions[0, l - n:l - n + filled] = actions[lo:]
        win_t[0, l - n:] = first_timestep + np.arange(lo, t + 1)

        with ad.no_grad():
            seq = self.embed_trajectory(win_rtgs, win_states, win_actions, win_t, pad)
            a_hat, _, _ = self.forward(seq, train=False)
        return a_hat.data[0, -1].copy()


class BCPolicy:
    """Behavior-cloning baseline: a 3-layer MLP from state to bounded action."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int, action_bound: float,
                 rng: np.random.Generator):
        k1 = 1.0 / np.sqrt(state_dim)
        k2 = 1.0 / np.sqrt(hidden)
        self.action_bound = action_bound
        self.w1 = parameter(rng.uniform(-k1, k1, size=(state_dim, hidden)))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(rng.uniform(-k2, k2, size=(hidden, hidden)))
        self.b2 = parameter(np.zeros(hidden))
        self.w3 = parameter(np.zeros((hidden, action_dim)))
        self.b3 = parameter(np.zeros(action_dim))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def trainable_parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def forward(self, states: Tensor) -> Tensor:
        h = ad.relu(ad.linear(states, self.w1, self.b1))
        h = ad.relu(ad.linear(h, self.w2, self.b2))
        out = ad.tanh(ad.linear(h, self.w3, self.b3))
        return ad.mul(out, Tensor(np.asarray(self.action_bound)))

    def act(self, state: np.ndarray, stats) -> np.ndarray:
        x = (state - stats.state_mean) / stats.state_std
        with ad.no_grad():
            return self.forward(Tensor(x[None, :])).data[0].copy()
