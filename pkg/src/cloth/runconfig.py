"""Run configuration files: strict JSON schema, defaults, environment overrides.

A run file is a flat JSON object holding every :class:`TrainConfig` field plus
``dataset`` (a tagged object), ``out`` and ``ablation_row``. ``seed`` and
``dataset`` are required; everything else has a default. Environment
variables named ``CLOTH_<KEY>`` override top-level keys and
``CLOTH_DATASET__<KEY>`` override dataset keys; values are parsed as JSON and
fall back to plain strings.
"""
import dataclasses
import json
import os
from dataclasses import dataclass

from .data import SyntheticSpec, load_cache, load_idx, make_gaussian_shift, make_two_moons_rotated
from .engine import TrainConfig, apply_ablation
from .errors import ClothError, ConfigError

ENV_PREFIX = "CLOTH_"
RUN_KEYS = {"dataset", "out", "ablation_row"}
TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
NUMBER_OR_NULL = {"hmm_scale"}

DATASET_KINDS = {
    "gaussian_shift": {f.name: f for f in dataclasses.fields(SyntheticSpec)},
    "two_moons": {"n": int, "angle_deg": float, "noise": float, "seed": int},
    "idx": {"source_images": str, "source_labels": str, "target_images": str, "target_labels": str,
            "downsample_to": int, "limit": int, "num_classes": int},
    "cache": {"source": str, "target": str},
}
DATASET_REQUIRED = {
    "idx": {"source_images", "source_labels", "target_images", "target_labels"},
    "cache": {"source", "target"},
}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_type(name, value, kind):
    """kind is a python type or an example default value."""
    if isinstance(kind, type):
        target = kind
    else:
        target = type(kind)
    if target is bool:
        ok = isinstance(value, bool)
    elif target is int:
        ok = _is_int(value)
    elif target is float:
        ok = _is_number(value)
    elif target is str:
        ok = isinstance(value, str)
    elif target is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(name, f"expected {target.__name__}, got {json.dumps(value)}")


def _field_kind(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return int  # seed


@dataclass
class RunConfig:
    train: TrainConfig
    dataset: dict
    out: str = "runs/cloth"
    ablation_row: object = None

    def effective_train(self):
        return self.train if self.ablation_row is None else apply_ablation(self.train, self.ablation_row)

    def to_dict(self):
        d = self.train.to_dict()
        d.update(dataset=self.dataset, out=self.out, ablation_row=self.ablation_row)
        return d


def _validate_dataset(ds):
    if not isinstance(ds, dict):
        raise ConfigError("dataset", "must be an object with a 'kind' key")
    kind = ds.get("kind")
    if kind not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"must be one of {sorted(DATASET_KINDS)}, got {json.dumps(kind)}")
    schema = DATASET_KINDS[kind]
    for key, value in ds.items():
        if key == "kind":
            continue
        if key not in schema:
            raise ConfigError(f"dataset.{key}", f"unknown key for dataset kind '{kind}'")
        if value is None and key in ("limit",):
            continue
        kind_of = schema[key]
        if isinstance(kind_of, dataclasses.Field):
            if key == "covariances":
                continue
            kind_of = _field_kind(kind_of)
        _check_type(f"dataset.{key}", value, kind_of)
    missing = DATASET_REQUIRED.get(kind, set()) - set(ds)
    if missing:
        raise ConfigError(f"dataset.{sorted(missing)[0]}", "required")


def validate_document(doc):
    """Check a raw run document against the schema and build a :class:`RunConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "run configuration must be a JSON object")
    for key in doc:
        if key not in TRAIN_FIELDS and key not in RUN_KEYS:
            raise ConfigError(key, "unknown key")
    for key in ("seed", "dataset"):
        if key not in doc:
            raise ConfigError(key, "required")
    kwargs = {}
    for key, f in TRAIN_FIELDS.items():
        if key not in doc:
            continue
        value = doc[key]
        if key in NUMBER_OR_NULL:
            if value is not None and not _is_number(value):
                raise ConfigError(key, f"expected a number or null, got {json.dumps(value)}")
        else:
            _check_type(key, value, _field_kind(f))
        if isinstance(value, list) and not all(_is_int(v) for v in value):
            raise ConfigError(key, "expected a list of integers")
        kwargs[key] = value
    train = TrainConfig(**kwargs)
    train.validate()
    _validate_dataset(doc["dataset"])
    out = doc.get("out", RunConfig.out)
    _check_type("out", out, str)
    row = doc.get("ablation_row")
    if row is not None:
        if not _is_int(row) or not 1 <= row <= 7:
            raise ConfigError("ablation_row", "must be null or an integer in 1..7")
    return RunConfig(train, dict(doc["dataset"]), out, row)


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env(doc, environ=None):
    """Overlay ``CLOTH_*`` environment variables onto a raw document (copy)."""
    environ = os.environ if environ is None else environ
    doc = json.loads(json.dumps(doc))
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        value = _parse_env_value(environ[name])
        if key.startswith("dataset__"):
            sub = key[len("dataset__"):]
            if not isinstance(doc.get("dataset"), dict):
                raise ConfigError(name, "dataset override without a dataset object")
            doc["dataset"][sub] = value
        elif key in TRAIN_FIELDS or key in RUN_KEYS:
            doc[key] = value
        else:
            raise ConfigError(name, "environment override names an unknown key")
    return doc


def load_document(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def resolve(path=None, environ=None, overrides=None):
    """File, then environment, then explicit overrides (e.g. command-line flags)."""
    doc = load_document(path) if path is not None else {}
    doc = apply_env(doc, environ)
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    return validate_document(doc)


def default_document(seed=0):
    d = TrainConfig(seed=seed).to_dict()
    d.update(dataset={"kind": "gaussian_shift"}, out=RunConfig.out, ablation_row=None)
    return d


def build_datasets(dataset, seed):
    """(source, target) for a validated dataset object; generator seeds default to the run seed."""
    ds = dict(dataset)
    kind = ds.pop("kind")
    try:
        if kind == "gaussian_shift":
            ds.setdefault("seed", seed)
            return make_gaussian_shift(SyntheticSpec(**ds))
        if kind == "two_moons":
            ds.setdefault("seed", seed)
            return make_two_moons_rotated(**ds)
        if kind == "idx":
            common = {k: ds[k] for k in ("downsample_to", "limit", "num_classes") if k in ds}
            src = load_idx(ds["source_images"], ds["source_labels"], domain="source", **common)
            tgt = load_idx(ds["target_images"], ds["target_labels"], domain="target", **common)
            return src, tgt
        return load_cache(ds["source"], "source"), load_cache(ds["target"], "target")
    except FileNotFoundError as e:
        raise ConfigError(f"dataset.{kind}", f"no such file: {e.filename}") from None
    except ClothError:
        raise
    except ValueError as e:
        raise ConfigError("dataset", str(e)) from None
