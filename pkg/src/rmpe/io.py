"""JSON file formats.

Every file is a UTF-8 JSON object::

    {"format_version": "1", "kind": "<kind>", "schema": {...joint schema...}, "payload": {...}}

Floats are written with ``repr`` precision so save/load round-trips exactly.
NaN and infinities are rejected in both directions. Unknown fields raise in
strict mode and only warn otherwise.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from pathlib import Path
from typing import Any

import numpy as np

from .core import (MPII_SCHEMA, BBox, GroundTruth, ImageAnnotation, JointSchema, Pose,
                   PoseProposal, RMPEError)
from .evaluation import EvalReport
from .nms import NmsParams
from .optim import OptimConfig, OptimResult
from .pgpg import AtomicPoseModel, OffsetGMM
from .synth import DEFAULT_OFFSET_MODELS, SynthConfig

FORMAT_VERSION = "1"


class FormatError(RMPEError, ValueError):
    code = "format_error"


class VersionError(FormatError):
    code = "version_mismatch"


class SchemaError(FormatError):
    code = "schema_mismatch"


class InvalidValueError(RMPEError, ValueError):
    """A well-formed document whose values break a domain constraint."""
    code = "invalid_value"


def _reject_constant(name):
    raise FormatError(f"non-finite number {name} in document")


def _check(cond, msg, exc=FormatError):
    if not cond:
        raise exc(msg)


def _fields(d: dict, where: str, required=(), optional=(), strict=True) -> dict:
    _check(isinstance(d, dict), f"{where}: expected an object")
    missing = [k for k in required if k not in d]
    _check(not missing, f"{where}: missing fields {missing}")
    unknown = sorted(set(d) - set(required) - set(optional))
    if unknown:
        if strict:
            raise FormatError(f"{where}: unknown fields {unknown}")
        warnings.warn(f"{where}: ignoring unknown fields {unknown}", stacklevel=3)
    return d


def _num(v, where) -> float:
    _check(isinstance(v, (int, float)) and not isinstance(v, bool), f"{where}: expected a number")
    _check(math.isfinite(v), f"{where}: non-finite number")
    return float(v)


def _validated(build, where):
    try:
        return build()
    except (FormatError, InvalidValueError):
        raise
    except ValueError as e:
        raise InvalidValueError(f"{where}: {e}") from e
    except (TypeError, KeyError) as e:
        raise FormatError(f"{where}: {e}") from e


# -- envelope ---------------------------------------------------------------

def envelope(kind: str, payload: Any, schema: JointSchema = MPII_SCHEMA) -> dict:
    return {"format_version": FORMAT_VERSION, "kind": kind,
            "schema": schema.to_dict(), "payload": payload}


def dumps(doc: dict) -> str:
    try:
        return json.dumps(doc, indent=1, allow_nan=False) + "\n"
    except ValueError as e:
        raise FormatError(str(e)) from e


def open_envelope(doc: dict, kind: str, strict: bool = True) -> tuple[JointSchema, Any]:
    _fields(doc, "envelope", ("format_version", "kind", "schema", "payload"), strict=strict)
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(f"format_version {doc['format_version']!r} != {FORMAT_VERSION!r}")
    _check(doc["kind"] == kind, f"expected a {kind!r} file, got {doc['kind']!r}", SchemaError)
    s = _fields(doc["schema"], "schema", ("name", "joints", "torso", "head"), strict=strict)
    schema = _validated(lambda: JointSchema.from_dict(s), "schema")
    return schema, doc["payload"]


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f, parse_constant=_reject_constant)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON ({e})") from e


def write_text(path, text: str):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# -- poses / boxes ----------------------------------------------------------

def pose_to_json(p: Pose) -> dict:
    return {"joints": [[float(x), float(y), float(c), bool(v)]
                       for (x, y), c, v in zip(p.xy, p.conf, p.visible)],
            "score": p.score}


def pose_from_json(d: dict, schema: JointSchema, where: str, strict: bool) -> Pose:
    _fields(d, where, ("joints", "score"), strict=strict)
    joints = d["joints"]
    _check(isinstance(joints, list), f"{where}: joints must be a list")
    if len(joints) != schema.m:
        raise SchemaError(f"{where}: {len(joints)} joints, schema {schema.name!r} has {schema.m}")
    xy, conf, vis = [], [], []
    for j, row in enumerate(joints):
        _check(isinstance(row, list) and len(row) == 4 and isinstance(row[3], bool),
               f"{where}.joints[{j}]: expected [x, y, confidence, visible]")
        xy.append((_num(row[0], where), _num(row[1], where)))
        conf.append(_num(row[2], where))
        vis.append(row[3])
    score = _num(d["score"], f"{where}.score")
    return _validated(lambda: Pose(xy, conf, vis, score), where)


def box_from_json(v, where: str) -> BBox:
    _check(isinstance(v, list) and len(v) == 4, f"{where}: box must be [x_min, y_min, x_max, y_max]")
    vals = [_num(x, where) for x in v]
    return _validated(lambda: BBox(*vals), where)


# -- proposals --------------------------------------------------------------

def proposals_to_doc(props, schema: JointSchema = MPII_SCHEMA) -> dict:
    return envelope("proposals", {"proposals": [
        {"image_id": p.image_id, "box": list(p.box.as_tuple()), "pose": pose_to_json(p.pose)}
        for p in props]}, schema)


def proposals_from_doc(doc: dict, strict: bool = True) -> tuple[list[PoseProposal], JointSchema]:
    schema, payload = open_envelope(doc, "proposals", strict)
    _fields(payload, "payload", ("proposals",), strict=strict)
    out = []
    for i, d in enumerate(payload["proposals"]):
        where = f"proposals[{i}]"
        _fields(d, where, ("image_id", "box", "pose"), strict=strict)
        out.append(PoseProposal(str(d["image_id"]), box_from_json(d["box"], where),
                                pose_from_json(d["pose"], schema, where, strict)))
    return out, schema


def save_proposals(path, props, schema: JointSchema = MPII_SCHEMA):
    write_text(path, dumps(proposals_to_doc(props, schema)))


def load_proposals(path, strict: bool = True) -> list[PoseProposal]:
    return proposals_from_doc(read_json(path), strict)[0]


# -- annotations ------------------------------------------------------------

def annotations_to_doc(anns, schema: JointSchema = MPII_SCHEMA) -> dict:
    return envelope("annotations", {"images": [
        {"image_id": a.image_id, "width": a.width, "height": a.height,
         "people": [{"pose": pose_to_json(g.pose), "box": list(g.box.as_tuple()),
                     "head_size": g.head_size} for g in a.people]}
        for a in anns]}, schema)


def annotations_from_doc(doc: dict, strict: bool = True) -> tuple[list[ImageAnnotation], JointSchema]:
    schema, payload = open_envelope(doc, "annotations", strict)
    _fields(payload, "payload", ("images",), strict=strict)
    out = []
    for i, d in enumerate(payload["images"]):
        where = f"images[{i}]"
        _fields(d, where, ("image_id", "width", "height", "people"), strict=strict)
        people = []
        for k, g in enumerate(d["people"]):
            w = f"{where}.people[{k}]"
            _fields(g, w, ("pose", "box", "head_size"), strict=strict)
            pose = pose_from_json(g["pose"], schema, w, strict)
            box = box_from_json(g["box"], w)
            hs = _num(g["head_size"], w)
            people.append(_validated(lambda: GroundTruth(pose, box, hs), w))
        out.append(_validated(lambda: ImageAnnotation(
            str(d["image_id"]), _num(d["width"], where), _num(d["height"], where), tuple(people)),
            where))
    return out, schema


def save_annotations(path, anns, schema: JointSchema = MPII_SCHEMA):
    write_text(path, dumps(annotations_to_doc(anns, schema)))


def load_annotations(path, strict: bool = True) -> list[ImageAnnotation]:
    return annotations_from_doc(read_json(path), strict)[0]


# -- NMS parameters ---------------------------------------------------------

def params_to_doc(p: NmsParams) -> dict:
    return envelope("nms_params", {"sigma1": p.sigma1, "sigma2": p.sigma2,
                                   "lambda": p.lam, "eta": p.eta})


def params_from_doc(doc: dict, strict: bool = True) -> NmsParams:
    _, payload = open_envelope(doc, "nms_params", strict)
    _fields(payload, "nms_params", ("sigma1", "sigma2", "lambda", "eta"), strict=strict)
    vals = {k: _num(payload[k], f"nms_params.{k}") for k in ("sigma1", "sigma2", "lambda", "eta")}
    return _validated(lambda: NmsParams(vals["sigma1"], vals["sigma2"], vals["lambda"], vals["eta"]),
                      "nms_params")


def save_params(path, p: NmsParams):
    write_text(path, dumps(params_to_doc(p)))


def load_params(path, strict: bool = True) -> NmsParams:
    return params_from_doc(read_json(path), strict)


# -- offset mixtures / atomic pose model -------------------------------------

def gmm_to_json(g: OffsetGMM) -> dict:
    return {"weights": g.weights.tolist(), "means": g.means.tolist(),
            "variances": g.variances.tolist(), "log_likelihood": list(g.log_likelihood),
            "converged": g.converged}


def gmm_from_json(d: dict, where: str, strict: bool = True) -> OffsetGMM:
    _fields(d, where, ("weights", "means", "variances"), ("log_likelihood", "converged"), strict)
    arrs = {}
    for k in ("weights", "means", "variances"):
        a = np.asarray(d[k], dtype=float)
        _check(np.all(np.isfinite(a)), f"{where}.{k}: non-finite values")
        arrs[k] = a
    return _validated(lambda: OffsetGMM(arrs["weights"], arrs["means"], arrs["variances"],
                                        list(d.get("log_likelihood", [])),
                                        bool(d.get("converged", True))), where)


MODEL_SCHEMA_VERSION = 1


def model_to_doc(model: AtomicPoseModel, schema: JointSchema = MPII_SCHEMA) -> dict:
    return envelope("atomic_pose_model", {
        "model_version": MODEL_SCHEMA_VERSION,
        "k": model.k,
        "torso": list(model.torso),
        "centers": model.centers.tolist(),
        "center_masks": model.center_masks.tolist(),
        "gmms": [None if g is None else gmm_to_json(g) for g in model.gmms],
        "global_gmm": gmm_to_json(model.global_gmm),
        "cluster_sizes": list(model.cluster_sizes),
        "metadata": model.metadata,
    }, schema)


def model_from_doc(doc: dict, strict: bool = True) -> AtomicPoseModel:
    schema, p = open_envelope(doc, "atomic_pose_model", strict)
    keys = ("model_version", "k", "torso", "centers", "center_masks", "gmms", "global_gmm",
            "cluster_sizes", "metadata")
    _fields(p, "model", keys, strict=strict)
    if p["model_version"] != MODEL_SCHEMA_VERSION:
        raise VersionError(f"model_version {p['model_version']} != {MODEL_SCHEMA_VERSION}")
    centers = np.asarray(p["centers"], dtype=float)
    masks = np.asarray(p["center_masks"], dtype=float)
    if centers.shape != (p["k"], 2 * schema.m) or masks.shape != centers.shape:
        raise SchemaError(f"model centers have shape {centers.shape}, expected ({p['k']}, {2 * schema.m})")
    _check(len(p["gmms"]) == p["k"], "model: one mixture entry per atomic pose expected")
    gmms = [None if g is None else gmm_from_json(g, f"gmms[{i}]", strict)
            for i, g in enumerate(p["gmms"])]
    return AtomicPoseModel(centers, masks, gmms, gmm_from_json(p["global_gmm"], "global_gmm", strict),
                           tuple(p["torso"]), list(p["cluster_sizes"]), dict(p["metadata"]))


def save_model(path, model: AtomicPoseModel, schema: JointSchema = MPII_SCHEMA):
    write_text(path, dumps(model_to_doc(model, schema)))


def load_model(path, strict: bool = True) -> AtomicPoseModel:
    return model_from_doc(read_json(path), strict)


# -- evaluation report ------------------------------------------------------

def report_to_doc(r: EvalReport, schema: JointSchema = MPII_SCHEMA) -> dict:
    return envelope("eval_report", {
        "ap_per_joint": [[j, ap] for j, ap in r.ap_per_joint],
        "map": r.map, "matched_counts": r.matched_counts}, schema)


def report_from_doc(doc: dict, strict: bool = True) -> EvalReport:
    _, p = open_envelope(doc, "eval_report", strict)
    _fields(p, "eval_report", ("ap_per_joint", "map", "matched_counts"), strict=strict)
    ap = [(int(j), _num(a, "ap_per_joint")) for j, a in p["ap_per_joint"]]
    return EvalReport(ap, _num(p["map"], "map"), dict(p["matched_counts"]))


def save_report(path, r: EvalReport, schema: JointSchema = MPII_SCHEMA):
    write_text(path, dumps(report_to_doc(r, schema)))


def load_report(path, strict: bool = True) -> EvalReport:
    return report_from_doc(read_json(path), strict)


# -- configs ----------------------------------------------------------------

_OPTIM_FIELDS = ("grid_sigma1", "grid_sigma2", "grid_lam", "grid_eta", "sigma1_range",
                 "sigma2_range", "lam_range", "eta_range", "max_rounds", "tol", "seed",
                 "threads", "initial")


def optim_config_to_doc(cfg: OptimConfig) -> dict:
    return envelope("optim_config", cfg.to_dict())


def optim_config_from_dict(d: dict, strict: bool = True) -> OptimConfig:
    _fields(d, "optim_config", (), _OPTIM_FIELDS, strict)
    d = {k: v for k, v in d.items() if k in _OPTIM_FIELDS}
    if "initial" in d:
        _fields(d["initial"], "optim_config.initial", (), ("sigma1", "sigma2", "lam", "eta"), strict)
    return _validated(lambda: OptimConfig.from_dict(d), "optim_config")


def optim_config_from_doc(doc: dict, strict: bool = True) -> OptimConfig:
    _, p = open_envelope(doc, "optim_config", strict)
    return optim_config_from_dict(p, strict)


def save_optim_config(path, cfg: OptimConfig):
    write_text(path, dumps(optim_config_to_doc(cfg)))


def load_optim_config(path, strict: bool = True) -> OptimConfig:
    return optim_config_from_doc(read_json(path), strict)


def optim_result_to_doc(res: OptimResult) -> dict:
    return envelope("optim_trace", res.to_dict())


_SYNTH_FIELDS = ("seed", "n_images", "image_size", "persons_per_image", "person_height",
                 "duplicate_rate", "miss_rate", "fp_rate", "joint_noise", "noise_gain",
                 "pose_jitter", "offset_scale", "conf_jitter", "occlusion_rate", "gt_box_pad",
                 "min_separation", "templates", "offset_models")


def synth_config_to_dict(cfg: SynthConfig) -> dict:
    d = {k: getattr(cfg, k) for k in _SYNTH_FIELDS if k != "offset_models"}
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    d["offset_models"] = {t: {"weights": g.weights.tolist(), "means": g.means.tolist(),
                              "variances": g.variances.tolist()}
                          for t, g in cfg.offset_models.items()}
    return d


def synth_config_from_dict(d: dict, strict: bool = True) -> SynthConfig:
    _fields(d, "synth_config", ("seed",), _SYNTH_FIELDS, strict)
    kw = {k: v for k, v in d.items() if k in _SYNTH_FIELDS}
    if "offset_models" in kw:
        given = {t: gmm_from_json(g, f"offset_models.{t}", strict)
                 for t, g in kw["offset_models"].items()}
        kw["offset_models"] = {**DEFAULT_OFFSET_MODELS, **given}
    return _validated(lambda: SynthConfig(**kw), "synth_config")


def synth_config_to_doc(cfg: SynthConfig) -> dict:
    return envelope("synth_config", synth_config_to_dict(cfg))


def synth_config_from_doc(doc: dict, strict: bool = True) -> SynthConfig:
    _, p = open_envelope(doc, "synth_config", strict)
    return synth_config_from_dict(p, strict)


def save_synth_config(path, cfg: SynthConfig):
    write_text(path, dumps(synth_config_to_doc(cfg)))


def load_synth_config(path, strict: bool = True) -> SynthConfig:
    return synth_config_from_doc(read_json(path), strict)


def config_path(cli_value: str | None, env_var: str = "RMPE_CONFIG") -> str | None:
    """Config file path: the command-line value wins, then ``$RMPE_CONFIG``."""
    return cli_value or os.environ.get(env_var) or None
