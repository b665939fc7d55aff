"""
Per-session chain: GLM betas, condition sums, positive-beta masking,
registration to the reference and atlas pooling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from apa.extract import (ProcessedSession, apply_beta_mask, partition_conditions,
                         pool_atlas_features, sum_condition)
from apa.glm import (HrfParams, NoiseModel, OnsetTable, build_design_matrix, estimate_gls,
                     positive_mask)
from apa.register import (AffineTransform, SearchConfig, SimilarityMetric, register_image,
                          resample_trilinear)
from apa.volume import AtlasVolume, SessionMeta, Volume3D, Volume4D, check_same_geometry

logger = logging.getLogger(__name__)

REGISTRATION_MODES = ("per_condition", "identity")


@dataclass(frozen=True)
class PipelineConfig:
    hrf: HrfParams = HrfParams()
    noise: NoiseModel = NoiseModel()
    lag_scans: int = 2
    registration: str = "per_condition"
    metric: SimilarityMetric = SimilarityMetric()
    # condition images are noisy and already near the reference: rigid, smoothed search
    search: SearchConfig = SearchConfig(dof=6, smoothing=2.0)

    def __post_init__(self):
        if self.registration not in REGISTRATION_MODES:
            raise ValueError(f"registration must be one of {REGISTRATION_MODES}, got {self.registration!r}")
        if self.lag_scans < 0:
            raise ValueError("lag_scans must be >= 0")


@dataclass
class SessionArtifacts:
    """Intermediate products kept for inspection and for the CLI's stage outputs."""

    betas: object = None
    positive: object = None
    masked: list = field(default_factory=list)
    registered: list = field(default_factory=list)


def register_condition(image: Volume3D, reference: Volume3D | None, cfg: PipelineConfig):
    if cfg.registration == "identity" or reference is None:
        return image, AffineTransform.identity()
    if not image.data.any() or image.data.min() == image.data.max():
        # nothing to align; keep the image where it is
        return resample_trilinear(image, AffineTransform.identity(), reference.geometry), AffineTransform.identity()
    reg = register_image(image, reference, cfg.metric, cfg.search)
    return reg.image, reg.transform


def process_session(data: Volume4D, onsets: OnsetTable, meta: SessionMeta, atlas: AtlasVolume,
                    reference: Volume3D | None = None, cfg: PipelineConfig = PipelineConfig(),
                    artifacts: SessionArtifacts | None = None) -> ProcessedSession:
    if len(meta.categories) != onsets.n_categories:
        raise ValueError(f"session lists {len(meta.categories)} categories, onsets use {onsets.n_categories}")
    if reference is not None:
        check_same_geometry(reference, atlas, "reference/atlas")
    elif cfg.registration != "identity":
        raise ValueError("per-condition registration needs a reference volume")
    design = build_design_matrix(onsets, cfg.hrf, data.n_scans, meta.tr_seconds)
    betas = estimate_gls(data, design, cfg.noise)
    pos = positive_mask(betas)
    features = []
    for cond in partition_conditions(data, onsets, meta.tr_seconds, cfg.lag_scans):
        masked = apply_beta_mask(sum_condition(cond), pos)
        image, t = register_condition(masked.image, reference, cfg)
        if artifacts is not None:
            artifacts.masked.append(masked)
            artifacts.registered.append((masked.category_index, masked.condition_index, t))
        features.append(pool_atlas_features(image, atlas, masked.category_index, masked.condition_index,
                                            meta.subject_id, meta.session_id))
    if artifacts is not None:
        artifacts.betas, artifacts.positive = betas, pos
    logger.info("%s/%s: %d condition features", meta.subject_id, meta.session_id, len(features))
    return ProcessedSession(meta.subject_id, meta.session_id, tuple(meta.categories), atlas.atlas_id,
                            tuple(features))
