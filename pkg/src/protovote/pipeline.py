"""End-to-end detector: backbone -> prototype-guided vote module ->
vote sampling & grouping -> class-prototype head -> box predictions.

The four forward modes mirror the component ablation: ``baseline`` skips
both attention stages, ``pvm_only``/``phm_only`` enable one, ``full``
both. All stages keep their shape contracts in every mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, fps
from .phm import (ClassPrototypeSet, PredictionHead, ProposalSet, decode_detections,
                  refine_proposals, suppress)
from .pvm import (AttentionConfig, CrossAttention, GeometricPrototypeBank, VoteLayer,
                  foreground_mask, hard_assign, momentum_update, soft_assign_update)
from .tensor import Tensor

MODES = ("baseline", "pvm_only", "phm_only", "full")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_classes: int = 3            # roster size R
    bank_size: int = 120
    gamma: float = 0.999
    heads: int = 4
    proposals: int = 32           # T cluster centers
    group_radius: float = 1.0
    nms_iou: float = 0.25
    assignment: str = "hard"      # or "soft"
    soft_temperature: float = 1.0
    attention_residual: bool = True
    attention_scaling: bool = False
    bank_self_learning: bool = False

    def validate(self):
        self.backbone.validate()
        if self.assignment not in ("hard", "soft"):
            raise ConfigError(f"unknown assignment mode {self.assignment!r}")
        if self.n_classes < 1 or self.proposals < 1:
            raise ConfigError("n_classes and proposals must be >= 1")


@dataclass
class ForwardResult:
    seed_positions: np.ndarray
    seed_features: Tensor        # pre-attention backbone features
    refined_seeds: Tensor        # post-PVM features (== seed_features in baseline)
    votes: object                # VoteOutput
    proposals: ProposalSet
    raw: dict                    # prediction head output slices
    detections: list             # post-NMS Detections
    detections_pre_nms: list


class Model:
    """All learnable state for the detector plus the prototype bank."""

    def __init__(self, config: ModelConfig, anchor_size: np.ndarray, seed: int = 0):
        config.validate()
        self.config = config
        self.anchor_size = np.asarray(anchor_size, dtype=np.float64)
        d = config.backbone.feature_dim
        ss = np.random.SeedSequence((seed, 0x30DE1))
        r_backbone, r_pvm, r_vote, r_phm, r_head = \
            [np.random.default_rng(s) for s in ss.spawn(5)]
        self.backbone = Backbone(config.backbone, r_backbone)
        attn_cfg = AttentionConfig(dim=d, heads=config.heads,
                                   residual=config.attention_residual,
                                   scale_scores=config.attention_scaling)
        self.pvm_attention = CrossAttention(attn_cfg, r_pvm, name="pvm")
        self.vote_layer = VoteLayer(d, r_vote)
        self.phm_attention = CrossAttention(attn_cfg, r_phm, name="phm")
        self.head = PredictionHead(d, config.n_classes, r_head)
        self.bank = GeometricPrototypeBank(config.bank_size, d,
                                           gamma=config.gamma, seed=seed)
        if config.bank_self_learning:
            self.bank_param = Tensor(self.bank.prototypes.copy(), requires_grad=True,
                                     name="bank")
        else:
            self.bank_param = None

    # -- parameters ---------------------------------------------------------

    def param_groups(self) -> dict[str, list[Tensor]]:
        groups = {
            "backbone": self.backbone.params(),
            "pvm_attention": self.pvm_attention.params(),
            "vote": self.vote_layer.params(),
            "phm_attention": self.phm_attention.params(),
            "head": self.head.params(),
        }
        if self.bank_param is not None:
            groups["bank"] = [self.bank_param]
        return groups

    def params(self) -> list[Tensor]:
        return [p for g in self.param_groups().values() for p in g]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params())

    # -- stages -------------------------------------------------------------

    def _bank_keys(self):
        if self.bank_param is not None:
            return self.bank_param
        return self.bank.prototypes.copy()  # constant snapshot, no gradient

    def extract_refined(self, points: np.ndarray, mode: str = "full"):
        """Shared trunk for query and support paths: backbone features plus
        PVM attention when the mode enables it."""
        seeds = self.backbone.extract(points)
        if mode in ("pvm_only", "full"):
            refined = self.pvm_attention(seeds.features, self._bank_keys())
        else:
            refined = seeds.features
        return seeds, refined

    def sample_and_group(self, votes, t: int | None = None,
                         radius: float | None = None) -> ProposalSet:
        """FPS over predicted vote centers, nearest-selected-center grouping
        within ``radius`` (unassigned votes dropped), max-pooled features and
        mean member centers per proposal."""
        t = t or self.config.proposals
        radius = radius or self.config.group_radius
        centers = votes.centers.data
        m = len(centers)
        if t > m:
            raise ConfigError(f"{t} proposals requested from {m} votes")
        sel = fps(centers, t, start_index=0)
        d2 = np.sum((centers[:, None, :] - centers[sel][None, :, :]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)
        dist = np.sqrt(d2[np.arange(m), nearest])
        members = [np.nonzero((nearest == ci) & (dist <= radius))[0]
                   for ci in range(t)]
        # each selected center is itself a vote at distance 0, so nonempty
        cap = max(len(g) for g in members)
        idx = np.zeros((t, cap), dtype=np.intp)
        mask = np.zeros((t, cap), dtype=bool)
        for gi, g in enumerate(members):
            idx[gi, :len(g)] = g
            mask[gi, :len(g)] = True
        feats3 = T.gather_rows(votes.updated_features, idx)   # (t, cap, d)
        cent3 = T.gather_rows(votes.centers, idx)             # (t, cap, 3)
        return ProposalSet(centers=T.masked_mean(cent3, mask),
                           features=T.masked_max(feats3, mask),
                           member_indices=members)

    def forward(self, points: np.ndarray,
                class_prototypes: ClassPrototypeSet | None,
                mode: str = "full") -> ForwardResult:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}, expected one of {MODES}")
        seeds, refined = self.extract_refined(points, mode)
        votes = self.vote_layer(refined, seeds.positions)
        proposals = self.sample_and_group(votes)
        if mode in ("phm_only", "full") and class_prototypes is not None:
            feats = refine_proposals(proposals, class_prototypes, self.phm_attention)
        else:
            feats = proposals.features
        raw = self.head(feats)
        class_ids = (class_prototypes.class_ids if class_prototypes is not None
                     else list(range(self.config.n_classes)))
        pre = decode_detections(raw, proposals.centers.data, self.anchor_size,
                                class_ids)
        post = suppress(pre, iou_threshold=self.config.nms_iou)
        return ForwardResult(seeds.positions, seeds.features, refined, votes,
                             proposals, raw, post, pre)

    # -- bank maintenance ---------------------------------------------------

    def update_bank(self, seed_positions: np.ndarray, seed_features: Tensor,
                    boxes) -> int:
        """Momentum-update the bank from foreground seed features (no
        gradient flow). Returns the number of foreground seeds used."""
        if self.config.bank_self_learning:
            return 0  # ablation: bank learns by gradient instead
        fg = foreground_mask(seed_positions, boxes)
        if not fg.any():
            return 0
        feats = seed_features.data[fg]
        if self.config.assignment == "hard":
            momentum_update(self.bank, feats, hard_assign(feats, self.bank))
        else:
            soft_assign_update(self.bank, feats, self.config.soft_temperature)
        return int(fg.sum())

    # -- persistence --------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for group, params in self.param_groups().items():
            for i, p in enumerate(params):
                out[f"{group}.{i}.{p.name or 'p'}"] = p
        return out

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_tensors().items()}
        state["__bank__"] = self.bank.state_dict()
        return state

    def load_state_dict(self, state: dict):
        for name, p in self.named_tensors().items():
            p.data = np.asarray(state[name], dtype=np.float64).reshape(p.data.shape).copy()
        self.bank.load_state_dict(state["__bank__"])
