"""Vote module guided by a memory bank of class-agnostic geometric prototypes.

The bank holds K feature vectors updated by a momentum moving average of
foreground point features (hard nearest-prototype assignment by default,
similarity-weighted soft assignment as an ablation). Seed features are
refined by multi-head cross-attention with the prototypes as keys/values,
then a small per-seed transform predicts center offsets and feature
residuals.

The bank is deliberately non-gradient state: it changes only through the
momentum update, never through backpropagation (a self-learning variant is
available behind a flag for the ablation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear
from .tensor import Tensor


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometric prototype bank


class GeometricPrototypeBank:
    """K class-agnostic d-dim prototypes with momentum state."""

    def __init__(self, k: int, dim: int, gamma: float = 0.999, seed: int = 0):
        if k < 1:
            raise ConfigError(f"bank size must be >= 1, got {k}")
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA8E)))
        self.prototypes = rng.standard_normal((k, dim)) / np.sqrt(dim)
        self.gamma = gamma
        self.assignment_counts = np.zeros(k, dtype=np.int64)

    @property
    def k(self) -> int:
        return len(self.prototypes)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def state_dict(self) -> dict:
        return {"prototypes": self.prototypes.copy(),
                "gamma": self.gamma,
                "assignment_counts": self.assignment_counts.copy()}

    def load_state_dict(self, state: dict):
        self.prototypes = np.asarray(state["prototypes"], dtype=np.float64).copy()
        self.gamma = float(state["gamma"])
        self.assignment_counts = np.asarray(state["assignment_counts"],
                                            dtype=np.int64).copy()


def hard_assign(features: np.ndarray, bank: GeometricPrototypeBank) -> np.ndarray:
    """Nearest prototype per feature by Euclidean distance, ties to the
    lowest prototype index."""
    d2 = (np.sum(features ** 2, axis=1, keepdims=True)
          - 2.0 * features @ bank.prototypes.T
          + np.sum(bank.prototypes ** 2, axis=1)[None, :])
    return np.argmin(d2, axis=1)  # argmin takes the first occurrence on ties


def momentum_update(bank: GeometricPrototypeBank, features: np.ndarray,
                    assignments: np.ndarray):
    """Blend each assigned prototype toward the mean of its group:
    g_k <- gamma * g_k + (1 - gamma) * mean(assigned features).
    Prototypes with no assigned features stay bit-unchanged."""
    if len(features) == 0:
        return
    sums = np.zeros_like(bank.prototypes)
    counts = np.zeros(bank.k, dtype=np.int64)
    np.add.at(sums, assignments, features)
    np.add.at(counts, assignments, 1)
    hit = counts > 0
    means = sums[hit] / counts[hit, None]
    bank.prototypes[hit] = bank.gamma * bank.prototypes[hit] + (1.0 - bank.gamma) * means
    bank.assignment_counts += counts


def soft_assign_update(bank: GeometricPrototypeBank, features: np.ndarray,
                       temperature: float):
    """Ablation path: per-point softmax similarity over prototypes (dot
    product / temperature); each prototype blends toward its
    similarity-weighted feature average."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if len(features) == 0:
        return
    scores = features @ bank.prototypes.T / temperature
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)          # rows sum to 1
    totals = w.sum(axis=0)                     # per-prototype weight mass
    hit = totals > 1e-12
    means = (w[:, hit].T @ features) / totals[hit, None]
    bank.prototypes[hit] = bank.gamma * bank.prototypes[hit] + (1.0 - bank.gamma) * means
    bank.assignment_counts += np.bincount(np.argmax(w, axis=1), minlength=bank.k)


def foreground_mask(positions: np.ndarray, boxes) -> np.ndarray:
    """Points inside any ground-truth box count as foreground."""
    mask = np.zeros(len(positions), dtype=bool)
    for b in boxes:
        mask |= b.contains(positions)
    return mask


# ---------------------------------------------------------------------------
# prototype-guided cross-attention


@dataclass
class AttentionConfig:
    dim: int
    heads: int = 4
    residual: bool = True
    scale_scores: bool = False  # off: raw dot-product scores
    ffn_hidden_factor: int = 2

    def validate(self):
        if self.heads < 1:
            raise ConfigError(f"need >= 1 head, got {self.heads}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")


class CrossAttention:
    """Multi-head cross-attention: queries against an external key/value set,
    per-head maps Q, U (key), V and output map W, followed by a two-layer
    feed-forward block with a residual connection."""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator,
                 name: str = "attn"):
        config.validate()
        self.config = config
        d = config.dim
        dh = d // config.heads
        self.q = [Linear(d, dh, rng, name=f"{name}.q{h}") for h in range(config.heads)]
        self.u = [Linear(d, dh, rng, name=f"{name}.u{h}") for h in range(config.heads)]
        self.v = [Linear(d, dh, rng, name=f"{name}.v{h}") for h in range(config.heads)]
        self.w = [Linear(dh, d, rng, name=f"{name}.w{h}") for h in range(config.heads)]
        hidden = config.ffn_hidden_factor * d
        self.ffn1 = Linear(d, hidden, rng, name=f"{name}.ffn1")
        self.ffn2 = Linear(hidden, d, rng, name=f"{name}.ffn2")
        # damp the output and feed-forward projections so the block starts
        # close to the identity on its residual path; refinement then grows
        # only as far as training pushes it
        for lin in [*self.w, self.ffn2]:
            lin.w.data *= 0.1
            lin.b.data *= 0.1

    def params(self) -> list[Tensor]:
        out = []
        for group in (self.q, self.u, self.v, self.w):
            for lin in group:
                out.extend(lin.params())
        return out + self.ffn1.params() + self.ffn2.params()

    def __call__(self, queries: Tensor, keys_values) -> Tensor:
        """Refine (M, d) queries with a (K, d) key/value set. The key/value
        rows are canonically ordered internally, so the output is exactly
        invariant to their permutation."""
        cfg = self.config
        if isinstance(keys_values, Tensor):
            kv = keys_values
        else:
            kv = Tensor(np.asarray(keys_values, dtype=np.float64))
        if kv.shape[1] != cfg.dim or queries.shape[1] != cfg.dim:
            raise ConfigError(f"attention dim mismatch: queries {queries.shape}, "
                              f"keys {kv.shape}, dim {cfg.dim}")
        canon = np.lexsort(kv.data.T[::-1])  # row-lexicographic order
        kv = T.gather_rows(kv, canon)

        dh = cfg.dim // cfg.heads
        scale = 1.0 / np.sqrt(dh) if cfg.scale_scores else 1.0
        head_sum = None
        for h in range(cfg.heads):
            qf = self.q[h](queries)              # (M, dh)
            ug = self.u[h](kv)                   # (K, dh)
            vg = self.v[h](kv)                   # (K, dh)
            scores = T.matmul(qf, transpose(ug))
            if scale != 1.0:
                scores = T.scale(scores, scale)
            attn = T.softmax(scores, axis=1)     # rows sum to 1
            out_h = T.matmul(T.matmul(attn, vg), self.w[h].w)
            out_h = T.add(out_h, self.w[h].b)
            head_sum = out_h if head_sum is None else T.add(head_sum, out_h)

        refined = T.add(queries, head_sum) if cfg.residual else head_sum
        ff = self.ffn2(T.relu(self.ffn1(refined)))
        return T.add(refined, ff)

    def attention_weights(self, queries: Tensor, keys_values) -> list[np.ndarray]:
        """Per-head (M, K) attention weight matrices in the caller's
        key order (diagnostics only)."""
        kv = keys_values.data if isinstance(keys_values, Tensor) else np.asarray(keys_values)
        out = []
        for h in range(self.config.heads):
            qf = queries.data @ self.q[h].w.data + self.q[h].b.data
            ug = kv @ self.u[h].w.data + self.u[h].b.data
            scores = qf @ ug.T
            if self.config.scale_scores:
                scores /= np.sqrt(self.config.dim // self.config.heads)
            scores -= scores.max(axis=1, keepdims=True)
            e = np.exp(scores)
            out.append(e / e.sum(axis=1, keepdims=True))
        return out


def transpose(t: Tensor) -> Tensor:
    out = Tensor(t.data.T, _parents=(t,) if t.requires_grad or t._parents else ())
    if out._parents:
        out._backward = lambda g: t._accumulate(g.T)
    return out


def naive_cross_attention(queries: np.ndarray, kv: np.ndarray,
                          attn: CrossAttention) -> np.ndarray:
    """Single-loop reference implementation of the attention formula, used
    as an oracle for the vectorized path."""
    cfg = attn.config
    out = np.array(queries, dtype=np.float64)
    refined = np.zeros_like(out)
    for j in range(len(queries)):
        acc = np.zeros(cfg.dim)
        for h in range(cfg.heads):
            qf = queries[j] @ attn.q[h].w.data + attn.q[h].b.data
            exps = []
            for g in kv:
                ug = g @ attn.u[h].w.data + attn.u[h].b.data
                s = float(qf @ ug)
                if cfg.scale_scores:
                    s /= np.sqrt(cfg.dim // cfg.heads)
                exps.append(s)
            exps = np.asarray(exps)
            weights = np.exp(exps - exps.max())
            weights /= weights.sum()
            agg = np.zeros(cfg.dim // cfg.heads)
            for k, g in enumerate(kv):
                vg = g @ attn.v[h].w.data + attn.v[h].b.data
                agg += weights[k] * vg
            acc += agg @ attn.w[h].w.data + attn.w[h].b.data
        refined[j] = queries[j] + acc if cfg.residual else acc
    ffn = np.maximum(refined @ attn.ffn1.w.data + attn.ffn1.b.data, 0.0)
    return refined + ffn @ attn.ffn2.w.data + attn.ffn2.b.data


# ---------------------------------------------------------------------------
# vote layer


@dataclass
class VoteOutput:
    offsets: Tensor            # (M, 3)
    residuals: Tensor          # (M, d)
    centers: Tensor            # (M, 3) positions + offsets
    updated_features: Tensor   # (M, d) features + residuals
    positions: np.ndarray      # (M, 3) seed positions (constant)


class VoteLayer:
    """Per-seed transform producing a center offset and feature residual."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or dim
        self.fc1 = Linear(dim, hidden, rng, name="vote.fc1")
        # zero output init: votes start at the identity (centers == seed
        # positions, untouched features) and learn offsets from there
        self.fc2 = Linear(hidden, 3 + dim, rng, name="vote.fc2", zero_init=True)
        self.dim = dim

    def params(self) -> list[Tensor]:
        return self.fc1.params() + self.fc2.params()

    def __call__(self, features: Tensor, positions: np.ndarray) -> VoteOutput:
        h = T.relu(self.fc1(features))
        out = self.fc2(h)
        m = out.shape[0]
        flat = T.reshape(out, (m * (3 + self.dim),))
        cols = np.arange(m * (3 + self.dim)).reshape(m, 3 + self.dim)
        offsets = T.reshape(T.gather_rows(flat, cols[:, :3].reshape(-1)), (m, 3))
        residuals = T.reshape(T.gather_rows(flat, cols[:, 3:].reshape(-1)), (m, self.dim))
        centers = T.add(offsets, Tensor(positions))
        updated = T.add(features, residuals)
        return VoteOutput(offsets, residuals, centers, updated, positions)


# ---------------------------------------------------------------------------
# assignment histogram diagnostics


def assignment_histogram(features_by_class: dict[int, np.ndarray],
                         bank: GeometricPrototypeBank) -> dict[int, np.ndarray]:
    """Per-class counts of hard assignments over prototype indices."""
    out = {}
    for cid, feats in sorted(features_by_class.items()):
        if len(feats) == 0:
            raise ValueError(f"class {cid} has no foreground features")
        idx = hard_assign(feats, bank)
        out[cid] = np.bincount(idx, minlength=bank.k)
    return out


def histogram_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))
