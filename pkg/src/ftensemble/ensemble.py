"""Feature-transformation branches built from random orthogonal projections.

Each branch owns a fixed projection E with orthonormal rows: E's rows are
the eigenvectors of a random symmetric matrix, ordered by descending
eigenvalue with the last one dropped, so E maps the m-dimensional backbone
features onto an (m-1)-dimensional subspace without expanding norms. The
projections are frozen once generated and never trained. Ensemble
prediction is the arithmetic mean of the branch soft-max outputs.

Ensemble checkpoint (External interface): the same FTEM framing as single
network checkpoints; the header lists every array shape, the payload holds
each branch's projection followed by its parameters (a shared backbone is
stored once).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .errors import ContractError, DataError
from .linalg import RngStream, random_symmetric, sym_eig

__all__ = [
    "Projection",
    "Branch",
    "EnsembleModel",
    "make_projection",
    "transform",
    "branch_predict",
    "branch_features",
    "ensemble_predict",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class Projection:
    """Fixed orthogonal feature transform of one branch.

    ``matrix`` is (m-1) x m with orthonormal rows; ``source_seed`` and
    ``source_stream`` identify the stream that generated it.
    """

    matrix: np.ndarray
    source_seed: int
    source_stream: int


def make_projection(m: int, stream: RngStream) -> Projection:
    """Projection from the eigenvectors of a random symmetric matrix.

    Rows are the eigenvectors for the m-1 largest eigenvalues (descending);
    the trailing eigenvector is dropped.
    """
    z = random_symmetric(m, stream.generator())
    _, v = sym_eig(z)
    e = np.ascontiguousarray(v[:, : m - 1].T)
    return Projection(e, stream.seed, stream.stream_id)


def transform(projection: Projection, features: np.ndarray) -> np.ndarray:
    """Apply the branch projection row-wise: each feature f becomes E f."""
    features = np.asarray(features, dtype=np.float64)
    e = projection.matrix
    if features.ndim != 2 or features.shape[1] != e.shape[1]:
        raise ContractError(
            f"feature width {features.shape} does not match projection {e.shape}"
        )
    return features @ e.T


@dataclass
class Branch:
    """One ensemble member: index, frozen projection, trainable parameters."""

    index: int
    projection: Projection
    params: nw.NetParams


@dataclass
class EnsembleModel:
    """M branches over a common backbone architecture and class count.

    With ``shared_backbone`` the branch params alias one set of backbone
    arrays; otherwise every branch owns an independent backbone.
    """

    backbone_cfg: nw.BackboneConfig
    n_classes: int
    branches: list[Branch]
    shared_backbone: bool = False
    meta: dict = field(default_factory=dict)


def branch_features(
    model: EnsembleModel, branch: Branch, inputs: np.ndarray
) -> np.ndarray:
    """Projected features of one branch for a batch of inputs."""
    feats = nw.forward_features(branch.params, model.backbone_cfg, inputs)
    return transform(branch.projection, feats)


def branch_predict(model: EnsembleModel, branch: Branch, inputs: np.ndarray) -> np.ndarray:
    feats = branch_features(model, branch, inputs)
    return nw.classify(branch.params.clf_w, branch.params.clf_b, feats)


def ensemble_predict(model: EnsembleModel, inputs: np.ndarray) -> np.ndarray:
    """Mean of the branch soft-max outputs; rows remain distributions."""
    if not model.branches:
        raise ContractError("ensemble has no branches")
    acc = None
    for branch in model.branches:
        probs = branch_predict(model, branch, inputs)
        acc = probs if acc is None else acc + probs
    return acc / len(model.branches)


# ---------------------------------------------------------------------------
# checkpointing


def save_model(path, model: EnsembleModel) -> None:
    arrays: list[np.ndarray] = []
    branches_hdr = []
    if model.shared_backbone and model.branches:
        shared = model.branches[0].params
        for w, b in zip(shared.weights, shared.biases):
            arrays.append(w)
            arrays.append(b)
        backbone_shapes = [list(a.shape) for a in arrays]
    else:
        backbone_shapes = []
    for branch in model.branches:
        entry = {
            "index": branch.index,
            "projection_shape": list(branch.projection.matrix.shape),
            "source_seed": branch.projection.source_seed,
            "source_stream": branch.projection.source_stream,
        }
        arrays.append(branch.projection.matrix)
        if model.shared_backbone:
            entry["shapes"] = [
                list(branch.params.clf_w.shape),
                list(branch.params.clf_b.shape),
            ]
            arrays.append(branch.params.clf_w)
            arrays.append(branch.params.clf_b)
        else:
            entry["shapes"] = nw.params_shapes(branch.params)
            arrays.extend(nw.params_to_arrays(branch.params))
        branches_hdr.append(entry)
    header = {
        "kind": "ensemble",
        "backbone": nw.backbone_cfg_to_dict(model.backbone_cfg),
        "n_classes": model.n_classes,
        "shared_backbone": model.shared_backbone,
        "backbone_shapes": backbone_shapes,
        "branches": branches_hdr,
        "meta": model.meta,
    }
    nw.write_framed(path, header, arrays)


def load_model(path) -> EnsembleModel:
    header, payload = nw.read_framed(path)
    if header.get("kind") != "ensemble":
        raise DataError(f"expected an ensemble checkpoint, got {header.get('kind')!r}")
    cfg = nw.backbone_cfg_from_dict(header["backbone"])
    shared = bool(header["shared_backbone"])
    pos = 0
    shared_weights: list[np.ndarray] = []
    shared_biases: list[np.ndarray] = []
    if shared:
        flat = []
        for shape in header["backbone_shapes"]:
            arr, pos = nw._take(payload, pos, shape)
            flat.append(arr.copy())
        shared_weights = flat[0::2]
        shared_biases = flat[1::2]
    branches = []
    for entry in header["branches"]:
        proj_arr, pos = nw._take(payload, pos, entry["projection_shape"])
        projection = Projection(
            proj_arr.copy(), int(entry["source_seed"]), int(entry["source_stream"])
        )
        if shared:
            clf_w, pos = nw._take(payload, pos, entry["shapes"][0])
            clf_b, pos = nw._take(payload, pos, entry["shapes"][1])
            params = nw.NetParams(shared_weights, shared_biases, clf_w.copy(), clf_b.copy())
        else:
            params, pos = nw.params_from_payload(payload, pos, entry["shapes"])
        branches.append(Branch(int(entry["index"]), projection, params))
    if pos != payload.size:
        raise DataError(f"checkpoint payload has {payload.size - pos} trailing floats")
    return EnsembleModel(
        backbone_cfg=cfg,
        n_classes=int(header["n_classes"]),
        branches=branches,
        shared_backbone=shared,
        meta=dict(header.get("meta", {})),
    )
