"""Experiment orchestration: spectrally regularized pre-training on the
source split, per-episode fine-tuning on the target split (optionally
transductive and/or on an augmented support set), prediction with optional
test-time augmentation and label propagation, and the episode evaluation
loop.

Reproducibility: every random decision draws from its own counter-based
stream derived from the base seed as

    stream_id = purpose << 56 | a << 32 | b << 16 | c

where (a, b, c) index episode/branch/epoch as appropriate, so runs are pure
functions of (config, datasets, seed) no matter how work is scheduled.
Episode evaluation can fan out over processes (FT_THREADS env var); results
are collected by episode index, so parallel runs produce byte-identical
reports.

Image datasets are resized to the configured augmentation output size: once
up front for pre-training, per episode for fine-tuning and prediction (the
augmented path resizes inside its variants). Vector datasets skip
augmentation entirely; a report note records that.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import network as nw
from .augment import AugmentParams, apply_variant, expand_support, parse_compound_mode, resize_bilinear
from .config import ExperimentConfig
from .data_io import load_dataset
from .ensemble import (
    Branch,
    EnsembleModel,
    branch_features,
    branch_predict,
    make_projection,
)
from .episodes import Dataset, Episode, EvalReport, evaluate, sample_episode
from .errors import ConfigError, NumericalError
from .labelprop import LPConfig, lp_refine
from .linalg import BACKEND, RngStream

__all__ = [
    "RunArtifacts",
    "stream_for",
    "pretrain",
    "finetune",
    "predict_episode",
    "run_single_episode",
    "evaluate_model",
    "run_experiment",
]

PURPOSE_PROJECTION = 1
PURPOSE_PRETRAIN_INIT = 2
PURPOSE_PRETRAIN_SHUFFLE = 3
PURPOSE_EPISODE = 4
PURPOSE_FINETUNE_INIT = 5
PURPOSE_FINETUNE_SHUFFLE = 6
PURPOSE_AUGMENT = 7
PURPOSE_TTA = 8


def stream_for(seed: int, purpose: int, a: int = 0, b: int = 0, c: int = 0) -> RngStream:
    """Derive the stream for one (purpose, episode, branch, epoch) slot."""
    if not (0 <= a < (1 << 24) and 0 <= b < (1 << 16) and 0 <= c < (1 << 16)):
        raise ConfigError(f"stream indices out of range: a={a} b={b} c={c}")
    return RngStream(seed, (purpose << 56) | (a << 32) | (b << 16) | c)


def _augment_params(cfg: ExperimentConfig) -> AugmentParams:
    return AugmentParams(
        out_size=cfg.aug_out_size,
        crop_area=(cfg.crop_area_min, cfg.crop_area_max),
        crop_ratio=(cfg.crop_ratio_min, cfg.crop_ratio_max),
    )


def _scale_batch(inputs: np.ndarray, out_size: int) -> np.ndarray:
    if inputs.shape[2] == out_size and inputs.shape[3] == out_size:
        return inputs
    return np.stack([resize_bilinear(img, out_size, out_size) for img in inputs])


def _backbone_config(dataset: Dataset, cfg: ExperimentConfig) -> nw.BackboneConfig:
    if dataset.is_image:
        shape = (dataset.inputs.shape[1], cfg.aug_out_size, cfg.aug_out_size)
    else:
        shape = (dataset.inputs.shape[1],)
    return nw.BackboneConfig(
        input_shape=shape,
        hidden_widths=cfg.hidden_widths,
        conv_channels=cfg.conv_channels,
        feature_dim=cfg.feature_dim,
    )


def _relabel(labels: np.ndarray) -> np.ndarray:
    classes = np.unique(labels)
    lookup = {int(c): i for i, c in enumerate(classes)}
    return np.array([lookup[int(y)] for y in labels], dtype=np.int64)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _check_finite(parts: dict, context: str) -> None:
    if not math.isfinite(parts["total"]):
        raise NumericalError(f"training loss diverged ({parts['total']}) at {context}")


def _effective_branches(cfg: ExperimentConfig) -> int:
    return cfg.branches if cfg.ensemble else 1


# ---------------------------------------------------------------------------
# pre-training (source domain)


def _pretrain_branch(x, y, n_classes, bc, cfg, index):
    projection = make_projection(
        bc.feature_dim, stream_for(cfg.seed, PURPOSE_PROJECTION, b=index)
    )
    params = nw.init_params(
        bc,
        n_classes,
        stream_for(cfg.seed, PURPOSE_PRETRAIN_INIT, b=index).generator(),
        clf_in_dim=bc.feature_dim - 1,
    )
    opt = nw.OptState(lr=cfg.lr_pretrain, weight_decay=cfg.weight_decay)
    lam = cfg.bsr_weight if cfg.bsr else 0.0
    spec = nw.LossSpec(bsr_weight=lam, projection=projection.matrix)
    log = []
    for epoch in range(cfg.pretrain_epochs):
        g = stream_for(cfg.seed, PURPOSE_PRETRAIN_SHUFFLE, b=index, c=epoch).generator()
        order = g.permutation(len(y))
        sums = {"ce": 0.0, "bsr": 0.0, "total": 0.0}
        n_batches = 0
        for idx in _batches(order, cfg.batch_size):
            grads, parts = nw.backward(params, bc, x[idx], y[idx], spec)
            _check_finite(parts, f"pretrain branch {index} epoch {epoch}")
            params, opt = nw.sgd_step(params, grads, opt)
            for key in sums:
                sums[key] += parts[key]
            n_batches += 1
        log.append(
            {"branch": index, "epoch": epoch}
            | {key: sums[key] / n_batches for key in sums}
        )
    return Branch(index, projection, params), log


def _pretrain_shared(x, y, n_classes, bc, cfg, n_branches):
    m = bc.feature_dim
    backbone = nw.init_params(
        bc,
        n_classes,
        stream_for(cfg.seed, PURPOSE_PRETRAIN_INIT, a=1).generator(),
        clf_in_dim=m - 1,
    )
    weights, biases = backbone.weights, backbone.biases
    projections = [
        make_projection(m, stream_for(cfg.seed, PURPOSE_PROJECTION, b=i))
        for i in range(n_branches)
    ]
    heads = [
        nw.init_classifier(
            stream_for(cfg.seed, PURPOSE_PRETRAIN_INIT, b=i).generator(), n_classes, m - 1
        )
        for i in range(n_branches)
    ]
    lam = cfg.bsr_weight if cfg.bsr else 0.0
    log = _joint_train(
        weights,
        biases,
        heads,
        projections,
        bc,
        cfg,
        lr=cfg.lr_pretrain,
        freeze_backbone=False,
        epochs=cfg.pretrain_epochs,
        x=x,
        y=y,
        query=None,
        bsr_weight=lam,
        ent_weight=0.0,
        shuffle_stream=lambda epoch: stream_for(
            cfg.seed, PURPOSE_PRETRAIN_SHUFFLE, a=1, c=epoch
        ),
        context="shared pretrain",
    )
    branches = [
        Branch(i, projections[i], nw.NetParams(weights, biases, heads[i][0], heads[i][1]))
        for i in range(n_branches)
    ]
    return branches, log


def _joint_train(
    weights,
    biases,
    heads,
    projections,
    bc,
    cfg,
    *,
    lr,
    freeze_backbone,
    epochs,
    x,
    y,
    query,
    bsr_weight,
    ent_weight,
    shuffle_stream,
    context,
):
    """Train branch heads plus one shared backbone.

    Each branch head follows the gradient of its own branch loss; the
    shared backbone follows the branch-averaged gradient (so its update
    scale matches single-branch training). Mutates ``weights``, ``biases``
    and ``heads`` in place; returns the per-epoch loss log.
    """
    n_branches = len(heads)
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    vel_heads = [
        (np.zeros_like(hw), np.zeros_like(hb)) for hw, hb in heads
    ]
    momentum, decay = 0.9, cfg.weight_decay
    nq = len(query) if query is not None else 0
    qpos = 0
    log = []
    for epoch in range(epochs):
        g = shuffle_stream(epoch).generator()
        order = g.permutation(len(y))
        qorder = g.permutation(nq) if nq else None
        sums = {"ce": 0.0, "bsr": 0.0, "ent": 0.0, "total": 0.0}
        n_batches = 0
        for idx in _batches(order, cfg.batch_size):
            qx = None
            if nq:
                take = min(cfg.batch_size, nq)
                qidx = qorder[[(qpos + t) % nq for t in range(take)]]
                qpos = (qpos + take) % nq
                qx = query[qidx]
            grad_w_acc = None
            grad_b_acc = None
            batch_parts = {"ce": 0.0, "bsr": 0.0, "ent": 0.0, "total": 0.0}
            for i in range(n_branches):
                params = nw.NetParams(weights, biases, heads[i][0], heads[i][1])
                spec = nw.LossSpec(
                    bsr_weight=bsr_weight,
                    ent_weight=ent_weight,
                    projection=projections[i].matrix,
                    query_inputs=qx,
                )
                grads, parts = nw.backward(params, bc, x[idx], y[idx], spec)
                _check_finite(parts, f"{context} branch {i} epoch {epoch}")
                for key in batch_parts:
                    batch_parts[key] += parts[key] / n_branches
                hw, vhw = nw._step_array(
                    heads[i][0], grads.clf_w, vel_heads[i][0], lr, momentum, decay
                )
                hb, vhb = nw._step_array(
                    heads[i][1], grads.clf_b, vel_heads[i][1], lr, momentum, 0.0
                )
                heads[i] = (hw, hb)
                vel_heads[i] = (vhw, vhb)
                if grad_w_acc is None:
                    grad_w_acc = [gw / n_branches for gw in grads.weights]
                    grad_b_acc = [gb / n_branches for gb in grads.biases]
                else:
                    for k in range(len(grad_w_acc)):
                        grad_w_acc[k] += grads.weights[k] / n_branches
                        grad_b_acc[k] += grads.biases[k] / n_branches
            if not freeze_backbone:
                for k in range(len(weights)):
                    weights[k], vel_w[k] = nw._step_array(
                        weights[k], grad_w_acc[k], vel_w[k], lr, momentum, decay
                    )
                    biases[k], vel_b[k] = nw._step_array(
                        biases[k], grad_b_acc[k], vel_b[k], lr, momentum, 0.0
                    )
            for key in sums:
                sums[key] += batch_parts[key]
            n_batches += 1
        log.append(
            {"epoch": epoch} | {key: sums[key] / n_batches for key in sums}
        )
    return log


def pretrain(source: Dataset, cfg: ExperimentConfig) -> tuple[EnsembleModel, list[dict]]:
    """Train the branch networks on the full source split.

    Each branch minimizes cross-entropy plus the weighted spectral penalty
    on its projected feature batches with momentum SGD over shuffled
    mini-batches. Returns the model and the per-epoch loss log.
    """
    bc = _backbone_config(source, cfg)
    x = _scale_batch(source.inputs, cfg.aug_out_size) if source.is_image else source.inputs
    y = _relabel(source.labels)
    n_classes = int(np.unique(y).size)
    n_branches = _effective_branches(cfg)
    if cfg.shared_backbone:
        branches, log = _pretrain_shared(x, y, n_classes, bc, cfg, n_branches)
    else:
        branches, log = [], []
        for i in range(n_branches):
            branch, branch_log = _pretrain_branch(x, y, n_classes, bc, cfg, i)
            branches.append(branch)
            log.extend(branch_log)
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "pretrain_classes": n_classes}
    model = EnsembleModel(
        backbone_cfg=bc,
        n_classes=n_classes,
        branches=branches,
        shared_backbone=cfg.shared_backbone,
        meta=meta,
    )
    return model, log


# ---------------------------------------------------------------------------
# fine-tuning (target domain, one episode)


def _episode_training_data(model, episode, cfg, episode_index):
    """Support batch (augmented when configured), plus the query batch for
    the entropy term (None when the term is off)."""
    if model.backbone_cfg.is_image:
        if cfg.da:
            mode = parse_compound_mode(cfg.aug_modes)
            g = stream_for(cfg.seed, PURPOSE_AUGMENT, a=episode_index).generator()
            sx, sy = expand_support(
                episode.support_x, episode.support_y, mode, g, _augment_params(cfg)
            )
        else:
            sx, sy = _scale_batch(episode.support_x, cfg.aug_out_size), episode.support_y
        qx = _scale_batch(episode.query_x, cfg.aug_out_size) if cfg.ent else None
    else:
        sx, sy = episode.support_x, episode.support_y
        qx = episode.query_x if cfg.ent else None
    return sx, sy, qx


def _finetune_branch(branch, bc, cfg, sx, sy, qx, episode_index):
    params = branch.params.copy()
    g_init = stream_for(
        cfg.seed, PURPOSE_FINETUNE_INIT, a=episode_index, b=branch.index
    ).generator()
    params.clf_w, params.clf_b = nw.init_classifier(g_init, cfg.n_way, bc.feature_dim - 1)
    opt = nw.OptState(
        lr=cfg.lr_finetune,
        weight_decay=cfg.weight_decay,
        freeze_backbone=cfg.freeze_backbone,
    )
    beta = cfg.ent_weight if cfg.ent else 0.0
    nq = len(qx) if qx is not None else 0
    qpos = 0
    for epoch in range(cfg.finetune_epochs):
        g = stream_for(
            cfg.seed, PURPOSE_FINETUNE_SHUFFLE, a=episode_index, b=branch.index, c=epoch
        ).generator()
        order = g.permutation(len(sy))
        qorder = g.permutation(nq) if nq else None
        for idx in _batches(order, cfg.batch_size):
            batch_q = None
            if beta > 0.0 and nq:
                take = min(cfg.batch_size, nq)
                qidx = qorder[[(qpos + t) % nq for t in range(take)]]
                qpos = (qpos + take) % nq
                batch_q = qx[qidx]
            spec = nw.LossSpec(
                bsr_weight=0.0,
                ent_weight=beta,
                projection=branch.projection.matrix,
                query_inputs=batch_q,
            )
            grads, parts = nw.backward(params, bc, sx[idx], sy[idx], spec)
            _check_finite(
                parts, f"finetune episode {episode_index} branch {branch.index} epoch {epoch}"
            )
            params, opt = nw.sgd_step(params, grads, opt)
    return Branch(branch.index, branch.projection, params)


def finetune(
    model: EnsembleModel, episode: Episode, cfg: ExperimentConfig, episode_index: int = 0
) -> EnsembleModel:
    """Fine-tune a fresh copy of every branch on one episode's support set.

    The classifier head is re-initialized to n_way outputs (episode classes
    are novel); the backbone trains unless ``freeze_backbone``. With the
    entropy term on, shuffled query batches are cycled alongside the
    support batches. The input model is not modified.
    """
    bc = model.backbone_cfg
    sx, sy, qx = _episode_training_data(model, episode, cfg, episode_index)
    beta = cfg.ent_weight if cfg.ent else 0.0
    if model.shared_backbone:
        weights = [w.copy() for w in model.branches[0].params.weights]
        biases = [b.copy() for b in model.branches[0].params.biases]
        heads = []
        for branch in model.branches:
            g_init = stream_for(
                cfg.seed, PURPOSE_FINETUNE_INIT, a=episode_index, b=branch.index
            ).generator()
            heads.append(nw.init_classifier(g_init, cfg.n_way, bc.feature_dim - 1))
        projections = [branch.projection for branch in model.branches]
        _joint_train(
            weights,
            biases,
            heads,
            projections,
            bc,
            cfg,
            lr=cfg.lr_finetune,
            freeze_backbone=cfg.freeze_backbone,
            epochs=cfg.finetune_epochs,
            x=sx,
            y=sy,
            query=qx if beta > 0.0 else None,
            bsr_weight=0.0,
            ent_weight=beta,
            shuffle_stream=lambda epoch: stream_for(
                cfg.seed, PURPOSE_FINETUNE_SHUFFLE, a=episode_index, c=epoch
            ),
            context=f"shared finetune episode {episode_index}",
        )
        branches = [
            Branch(b.index, b.projection, nw.NetParams(weights, biases, hw, hb))
            for b, (hw, hb) in zip(model.branches, heads)
        ]
    else:
        branches = [
            _finetune_branch(branch, bc, cfg, sx, sy, qx, episode_index)
            for branch in model.branches
        ]
    return EnsembleModel(
        backbone_cfg=bc,
        n_classes=cfg.n_way,
        branches=branches,
        shared_backbone=model.shared_backbone,
        meta=dict(model.meta),
    )


# ---------------------------------------------------------------------------
# prediction


def predict_episode(
    model: EnsembleModel, episode: Episode, cfg: ExperimentConfig, episode_index: int = 0
) -> tuple[np.ndarray, list[str]]:
    """Predicted class per query row, plus per-episode flags.

    Branch scores are soft-max outputs, averaged over the augmented query
    variants when query-side augmentation is on. With label propagation,
    each branch's scores are refined on that branch's own projected query
    features and the refined matrices are averaged (or, with
    ``lp_on_ensemble``, propagation runs once on concatenated features and
    averaged scores). A degenerate graph falls back to the unrefined scores
    and flags the episode.
    """
    bc = model.backbone_cfg
    flags: list[str] = []
    is_image = bc.is_image
    canonical = (
        _scale_batch(episode.query_x, cfg.aug_out_size) if is_image else episode.query_x
    )
    use_tta = is_image and cfg.da and cfg.da_query
    variant_batches = None
    if use_tta:
        mode = parse_compound_mode(cfg.aug_modes)
        g = stream_for(cfg.seed, PURPOSE_TTA, a=episode_index).generator()
        params = _augment_params(cfg)
        variant_batches = [
            np.stack([apply_variant(v, img, g, params) for img in episode.query_x])
            for v in mode
        ]
    branch_scores = []
    branch_feats = []
    for branch in model.branches:
        if use_tta:
            acc = None
            for batch in variant_batches:
                probs = branch_predict(model, branch, batch)
                acc = probs if acc is None else acc + probs
            scores = acc / len(variant_batches)
        else:
            scores = branch_predict(model, branch, canonical)
        branch_scores.append(scores)
        if cfg.lp:
            branch_feats.append(branch_features(model, branch, canonical))
    if not cfg.lp:
        mean_scores = sum(branch_scores) / len(branch_scores)
        return np.argmax(mean_scores, axis=1), flags

    lp_cfg = LPConfig(
        k=cfg.knn_k,
        conf_fraction=cfg.conf_fraction,
        alpha=cfg.lp_alpha,
        gamma_sq=cfg.rbf_gamma_sq,
    )
    dump_dir = Path(cfg.lp_dump) / f"episode{episode_index:04d}" if cfg.lp_dump else None
    if cfg.lp_on_ensemble:
        feats = np.concatenate(branch_feats, axis=1)
        base = sum(branch_scores) / len(branch_scores)
        refined, fell_back = lp_refine(feats, base, lp_cfg, dump_dir=dump_dir)
        if fell_back:
            flags.append("lp_fallback")
        return np.argmax(refined, axis=1), flags
    refined_sum = None
    for branch, feats, scores in zip(model.branches, branch_feats, branch_scores):
        refined, fell_back = lp_refine(
            feats, scores, lp_cfg, dump_dir=dump_dir, dump_tag=f"branch{branch.index}_"
        )
        if fell_back:
            flags.append(f"lp_fallback_branch{branch.index}")
        refined_sum = refined if refined_sum is None else refined_sum + refined
    return np.argmax(refined_sum / len(model.branches), axis=1), flags


# ---------------------------------------------------------------------------
# evaluation loop


def run_single_episode(
    model: EnsembleModel, target: Dataset, cfg: ExperimentConfig, episode_index: int
) -> tuple[float, list[str]]:
    episode = sample_episode(
        target,
        cfg.n_way,
        cfg.n_shot,
        cfg.n_query,
        stream_for(cfg.seed, PURPOSE_EPISODE, a=episode_index).generator(),
    )
    tuned = finetune(model, episode, cfg, episode_index)
    preds, flags = predict_episode(tuned, episode, cfg, episode_index)
    accuracy = float((preds == episode.query_y).mean())
    return accuracy, flags


_WORKER_CTX: tuple | None = None


def _worker_init(model, cfg, target):
    global _WORKER_CTX
    _WORKER_CTX = (model, cfg, target)


def _worker_run(episode_index: int):
    model, cfg, target = _WORKER_CTX
    accuracy, flags = run_single_episode(model, target, cfg, episode_index)
    return episode_index, accuracy, flags


def threads_from_env() -> int:
    raw = os.environ.get("FT_THREADS", "1").strip()
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"FT_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"FT_THREADS must be >= 1, got {value}")
    return value


def evaluate_model(
    model: EnsembleModel, cfg: ExperimentConfig, target: Dataset
) -> EvalReport:
    """Run the episodic protocol and aggregate mean accuracy and ci95.

    Episode work can fan out over FT_THREADS worker processes; each episode
    derives its streams from its own index, and results are ordered by
    index, so the report content does not depend on scheduling.
    """
    if model.backbone_cfg.is_image and model.backbone_cfg.input_shape[1] != cfg.aug_out_size:
        raise ConfigError(
            f"model expects {model.backbone_cfg.input_shape[1]}x-sized inputs but "
            f"aug_out_size is {cfg.aug_out_size}"
        )
    notes = []
    if cfg.da and not target.is_image:
        notes.append("da requested but dataset is vector mode; augmentation skipped")
    n_threads = threads_from_env()
    results: list[tuple[float, list[str]] | None] = [None] * cfg.episodes
    if n_threads > 1:
        with ProcessPoolExecutor(
            max_workers=n_threads, initializer=_worker_init, initargs=(model, cfg, target)
        ) as pool:
            for index, accuracy, flags in pool.map(
                _worker_run, range(cfg.episodes), chunksize=4
            ):
                results[index] = (accuracy, flags)
    else:
        for index in range(cfg.episodes):
            results[index] = run_single_episode(model, target, cfg, index)
    accuracies = [acc for acc, _ in results]
    flags = [fl for _, fl in results]
    mean, ci95 = evaluate(accuracies)
    return EvalReport(
        accuracies=accuracies,
        flags=flags,
        mean=mean,
        ci95=ci95,
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        backend=BACKEND,
        notes=notes,
    )


@dataclass
class RunArtifacts:
    """Everything a run produces; every piece echoes config hash and seed."""

    model: EnsembleModel
    report: EvalReport
    pretrain_log: list[dict]


def run_experiment(
    cfg: ExperimentConfig, source: Dataset | None = None, target: Dataset | None = None
) -> RunArtifacts:
    """Pre-train once on the source split, then evaluate the episodic
    protocol on the target split."""
    if source is None:
        if not cfg.source_data:
            raise ConfigError("source_data path is required")
        source = load_dataset(cfg.source_data, role="source")
    if target is None:
        if not cfg.target_data:
            raise ConfigError("target_data path is required")
        target = load_dataset(cfg.target_data, role="target")
    model, log = pretrain(source, cfg)
    report = evaluate_model(model, cfg, target)
    return RunArtifacts(model=model, report=report, pretrain_log=log)
