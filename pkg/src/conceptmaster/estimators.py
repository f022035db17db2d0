"""scikit-learn style wrappers: generator (fit/sample/predict), curation filter, bench scorer."""

from dataclasses import fields

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import ModelConfig, param_group
from .conditioning import ConceptRef, ConditioningConfig
from .datapipe import BackendSuite, CurateConfig, Taxonomy, DEFAULT_TAXONOMY, run_pipeline, success_rate
from .errors import EmptyDatasetError, ValidationError
from .evalbench import METRICS, EvalCase, aggregate, evaluate_case
from .flowmatch import FreezePolicy, Trainer
from .model import ConceptMaster
from .validation import check_probability, check_video


def _check_samples(X):
    X = list(X)
    if not X:
        raise EmptyDatasetError("fit needs at least one sample")
    for i, s in enumerate(X):
        if not isinstance(s, dict) or ("video" not in s and "image" not in s):
            raise ValidationError(f"sample {i} must be a dict with a 'video' or 'image' entry")
    return X


def _as_refs(refs):
    return [r if isinstance(r, ConceptRef) else ConceptRef(*r) for r in refs]


class ConceptMasterGenerator(BaseEstimator):
    """Trains the toy video model on sample dicts and generates videos from (refs, caption)."""

    def __init__(
        self,
        depth=2,
        width=64,
        heads=4,
        patch_t=2,
        concept_dim=64,
        visual_dim=128,
        steps=100,
        batch_size=8,
        lr=1e-3,
        p_caption=0.5,
        p_refs=0.33,
        frozen=("temporal_attn",),
        video_shape=(8, 32, 32, 3),
        sample_steps=100,
        cfg_scale=7.5,
        random_state=0,
    ):
        self.depth = depth
        self.width = width
        self.heads = heads
        self.patch_t = patch_t
        self.concept_dim = concept_dim
        self.visual_dim = visual_dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.p_caption = p_caption
        self.p_refs = p_refs
        self.frozen = frozen
        self.video_shape = video_shape
        self.sample_steps = sample_steps
        self.cfg_scale = cfg_scale
        self.random_state = random_state

    def _build(self):
        torch.manual_seed(int(self.random_state))
        mc = ModelConfig(
            depth=self.depth, width=self.width, heads=self.heads, patch_t=self.patch_t, concept_dim=self.concept_dim
        )
        cc = ConditioningConfig(concept_dim=self.concept_dim, visual_dim=self.visual_dim)
        return ConceptMaster(mc, cc)

    def fit(self, X, y=None):
        X = _check_samples(X)
        check_probability(self.p_caption, "p_caption")
        check_probability(self.p_refs, "p_refs")
        if self.steps < 0 or self.batch_size < 1:
            raise ValidationError("steps must be >= 0 and batch_size >= 1")
        self.model_ = self._build()
        groups = {g: True for g in self.frozen}
        trainer = Trainer(self.model_, self.lr, FreezePolicy(groups), param_group)
        rng = np.random.default_rng(self.random_state)
        self.loss_history_ = []
        for _ in range(self.steps):
            idx = rng.integers(0, len(X), self.batch_size)
            batch = self.model_.make_batch(
                [X[i] for i in idx], rng, self.p_caption, self.p_refs, video_shape=self.video_shape
            )
            self.loss_history_.append(trainer.step(lambda: self.model_.loss(batch)))
        return self

    def sample(self, refs, caption, seed=0):
        check_is_fitted(self, "model_")
        return self.model_.sample(
            _as_refs(refs), caption, tuple(self.video_shape), self.sample_steps, self.cfg_scale, seed
        )

    def predict(self, X):
        """One video per ``(refs, caption)`` prompt, seeded by prompt position."""
        return [self.sample(refs, caption, seed=i) for i, (refs, caption) in enumerate(X)]


class CurationFilter(BaseEstimator, TransformerMixin):
    """Stateless curation pipeline; ``transform`` yields records, ``predict`` the accept flags."""

    def __init__(self, scene_cut_threshold=0.3, min_flow=2e-4, min_contrast=0.025, iou_threshold=0.5, taxonomy=None):
        self.scene_cut_threshold = scene_cut_threshold
        self.min_flow = min_flow
        self.min_contrast = min_contrast
        self.iou_threshold = iou_threshold
        self.taxonomy = taxonomy

    def _config(self):
        names = {f.name for f in fields(CurateConfig)}
        return CurateConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.taxonomy_ = Taxonomy(self.taxonomy or DEFAULT_TAXONOMY)
        self.suite_ = BackendSuite()
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        return [
            run_pipeline(check_video(v), self.suite_, self.taxonomy_, self.config_, video_id=f"video_{i:05d}")
            for i, v in enumerate(X)
        ]

    def predict(self, X):
        return np.array([r.accepted for r in self.transform(X)], dtype=bool)

    def score(self, X, y):
        """Success rate against ground-truth label sets ``y`` (one per video)."""
        records = self.transform(X)
        return success_rate(records, {r.video_id: set(g) for r, g in zip(records, y)})


class DecouplingScorer(BaseEstimator):
    """Scores eval cases; ``transform`` gives one row per case in benchmark column order."""

    def fit(self, X=None, y=None):
        self.columns_ = [f"{a}.{m}" for a, m in METRICS]
        return self

    def _reports(self, X):
        return [evaluate_case(c if isinstance(c, EvalCase) else EvalCase(**c)) for c in X]

    def transform(self, X):
        check_is_fitted(self, "columns_")
        return np.array([[r[a][m] for a, m in METRICS] for r in self._reports(X)])

    def summary(self, X):
        return aggregate(self._reports(X))

    def score(self, X, y=None):
        """1 - mixing_rate over all cases (higher is better)."""
        return 1.0 - self.summary(X)["overall"]["decoupling"]["mixing_rate"]
