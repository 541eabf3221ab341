"""Head module: episodic class prototypes, proposal refinement, predictions.

Class prototypes are built per episode by running support scenes through
the same trunk as the query path (backbone + vote-module attention),
max-pooling the seed features inside each support instance's ground-truth
box and averaging over the K shots of a class. Proposal features are then
refined by cross-attention against these class prototypes (independent
parameters from the vote module's attention) before the prediction layer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes3d import nms3d
from .layers import Linear
from .tensor import Tensor


class EpisodeError(ValueError):
    pass


@dataclass
class ClassPrototypeSet:
    prototypes: Tensor      # (R, d), roster order
    class_ids: list[int]    # sorted roster ids


@dataclass
class ProposalSet:
    centers: Tensor          # (T, 3) aggregated vote centers
    features: Tensor         # (T, d)
    member_indices: list     # per-proposal vote index arrays


@dataclass
class Detection:
    center: np.ndarray
    size: np.ndarray
    objectness: float        # probability in [0, 1]
    class_logits: np.ndarray  # (R,)
    class_id: int            # roster class id at argmax


def build_class_prototypes(episode, dataset, extract_refined) -> ClassPrototypeSet:
    """e_r = mean over shots of max-pool over in-box refined seed features.

    ``extract_refined(points)`` must run the shared trunk (backbone plus
    vote-module refinement when enabled) and return (positions, features).
    Support instances whose box captures no seeds are skipped with a
    warning; a class with all shots skipped raises.
    """
    pooled_rows = []
    class_ids = sorted(episode.support)
    seed_cache: dict[str, tuple] = {}
    for cid in class_ids:
        shots = []
        for scene_id, box_index in episode.support[cid]:
            scene = dataset.scene(scene_id)
            if scene_id not in seed_cache:
                seed_cache[scene_id] = extract_refined(scene.points)
            positions, feats = seed_cache[scene_id]
            inside = scene.boxes[box_index].contains(positions)
            if not inside.any():
                warnings.warn(f"support instance {scene_id}[{box_index}] of class "
                              f"{cid} has no in-box seeds; skipped")
                continue
            rows = T.gather_rows(feats, np.nonzero(inside)[0])
            shots.append(T.max_pool_set(rows))
        if not shots:
            raise EpisodeError(f"class {cid}: every support instance lost its seeds")
        stacked = T.concat([T.reshape(s, (1, s.shape[0])) for s in shots], axis=0)
        pooled_rows.append(T.mean(stacked, axis=0))
    protos = T.concat([T.reshape(r, (1, r.shape[0])) for r in pooled_rows], axis=0)
    return ClassPrototypeSet(protos, class_ids)


def refine_proposals(proposals: ProposalSet, class_prototypes: ClassPrototypeSet,
                     attention) -> Tensor:
    """Cross-attention with proposal features as queries and class
    prototypes as keys/values."""
    if len(class_prototypes.class_ids) == 0:
        raise EpisodeError("empty class prototype set")
    return attention(proposals.features, class_prototypes.prototypes)


class PredictionHead:
    """Final layer: center offset, log-size (about a class-agnostic anchor),
    2-way objectness logits and R class logits per proposal."""

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        self.n_classes = n_classes
        self.fc1 = Linear(dim, dim, rng, name="head.fc1")
        self.fc2 = Linear(dim, 3 + 3 + 2 + n_classes, rng, name="head.fc2")
        # small output init: untrained boxes stay near the proposal center at
        # roughly anchor size instead of decoding arbitrary offsets
        self.fc2.w.data *= 0.05
        self.fc2.b.data *= 0.05

    def params(self) -> list[Tensor]:
        return self.fc1.params() + self.fc2.params()

    def __call__(self, features: Tensor) -> dict:
        """Raw per-proposal outputs split into named slices (all Tensors)."""
        out = self.fc2(T.relu(self.fc1(features)))
        t = out.shape[0]
        width = 8 + self.n_classes
        flat = T.reshape(out, (t * width,))
        cols = np.arange(t * width).reshape(t, width)

        def pick(sl):
            idx = cols[:, sl].reshape(-1)
            return T.reshape(T.gather_rows(flat, idx), (t, sl.stop - sl.start))

        return {
            "center_offset": pick(slice(0, 3)),
            "log_size": pick(slice(3, 6)),
            "objectness_logits": pick(slice(6, 8)),
            "class_logits": pick(slice(8, width)),
        }


def decode_detections(raw: dict, proposal_centers: np.ndarray,
                      anchor_size: np.ndarray, class_ids: list[int]) -> list[Detection]:
    """Numeric decode of the raw head outputs (no gradient flow)."""
    centers = proposal_centers + raw["center_offset"].data
    sizes = np.exp(raw["log_size"].data) * anchor_size
    ol = raw["objectness_logits"].data
    shifted = ol - ol.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e[:, 1] / e.sum(axis=1)
    # the roster occupies the first len(class_ids) logit slots; any spare
    # slots in a fixed-width head never carry a decodable class
    cls = raw["class_logits"].data[:, :len(class_ids)]
    out = []
    for i in range(len(centers)):
        arg = int(np.argmax(cls[i]))
        out.append(Detection(centers[i].copy(), sizes[i].copy(), float(probs[i]),
                             cls[i].copy(), class_ids[arg]))
    return out


def suppress(detections: list[Detection], iou_threshold: float = 0.25) -> list[Detection]:
    if not detections:
        return []
    centers = np.asarray([d.center for d in detections])
    sizes = np.asarray([d.size for d in detections])
    scores = np.asarray([d.objectness for d in detections])
    kept = nms3d(centers, sizes, scores, iou_threshold=iou_threshold)
    return [detections[i] for i in kept]
