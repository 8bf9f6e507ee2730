"""End-to-end run: synthesize, fit the proposal generator, tune NMS, apply it, evaluate.

The summary reports test-set mAP with NMS disabled, with default parameters
and with the tuned parameters. Validation and test scenes come from two
seeds derived from the top-level seed, so one seed pins the whole run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import io
from .evaluation import EvalConfig, evaluate
from .nms import run_nms_batch
from .optim import optimize_params
from .pgpg import fit_model
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 0
    validation_images: int = 300
    test_images: int = 300
    synth: dict = field(default_factory=dict)   # SynthConfig fields except seed / n_images
    optim: dict = field(default_factory=dict)   # OptimConfig fields
    k: int = 15
    components: int = 3
    min_samples: int = 20
    pckh_alpha: float = 0.5
    threads: int = 1

    FIELDS = ("seed", "validation_images", "test_images", "synth", "optim", "k",
              "components", "min_samples", "pckh_alpha", "threads")

    @classmethod
    def from_dict(cls, d: dict, strict: bool = True) -> "PipelineConfig":
        io._fields(d, "pipeline_config", (), cls.FIELDS, strict)
        return cls(**{k: v for k, v in d.items() if k in cls.FIELDS})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _split_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def synth_config(cfg: PipelineConfig, seed: int, n_images: int) -> SynthConfig:
    d = dict(cfg.synth, seed=seed, n_images=n_images)
    return io.synth_config_from_dict(d)


def run_pipeline(cfg: PipelineConfig) -> dict:
    val_seed, test_seed = _split_seeds(cfg.seed)
    eval_cfg = EvalConfig(cfg.pckh_alpha)
    val_gts, val_props = generate(synth_config(cfg, val_seed, cfg.validation_images))
    test_gts, test_props = generate(synth_config(cfg, test_seed, cfg.test_images))
    log.info("generated %d/%d validation and %d/%d test proposals/people",
             len(val_props), sum(len(a.people) for a in val_gts),
             len(test_props), sum(len(a.people) for a in test_gts))

    model = fit_model(val_gts, val_props, k=cfg.k, components=cfg.components,
                      seed=cfg.seed, min_samples=cfg.min_samples)

    optim_cfg = io.optim_config_from_dict(dict(cfg.optim, threads=cfg.threads))
    result = optimize_params(val_props, val_gts, optim_cfg, eval_cfg)

    defaults = optim_cfg.initial
    map_none = evaluate(test_props, test_gts, eval_cfg).map
    map_default = evaluate(run_nms_batch(test_props, defaults, cfg.threads), test_gts, eval_cfg).map
    map_opt = evaluate(run_nms_batch(test_props, result.params, cfg.threads), test_gts, eval_cfg).map

    return {
        "seed": cfg.seed,
        "validation": {"images": cfg.validation_images, "proposals": len(val_props),
                       "people": sum(len(a.people) for a in val_gts)},
        "test": {"images": cfg.test_images, "proposals": len(test_props),
                 "people": sum(len(a.people) for a in test_gts)},
        "pgpg": {"k": model.k, "components": cfg.components,
                 "cluster_sizes": model.cluster_sizes,
                 "fallback_clusters": [i for i, d in enumerate(model.degenerate) if d],
                 "dataset_hash": model.metadata["dataset_hash"]},
        "default_params": defaults.to_dict(),
        "optimized_params": result.params.to_dict(),
        "optimization_trace": result.trace,
        "validation_map_optimized": result.best_map,
        "map_without_nms": map_none,
        "map_default_nms": map_default,
        "map_optimized_nms": map_opt,
    }


def report_text(report: dict) -> str:
    return io.dumps(io.envelope("pipeline_report", report))

