import json

import pytest

from cloth import runconfig
from cloth.errors import ConfigError


def _doc(**kw):
    d = {"seed": 3, "dataset": {"kind": "gaussian_shift", "n": 60}}
    d.update(kw)
    return d


def test_minimal_document_gets_defaults():
    rc = runconfig.validate_document(_doc())
    assert rc.train.seed == 3 and rc.train.q == 3 and rc.out == "runs/cloth"


@pytest.mark.parametrize("doc,field", [
    ({"dataset": {"kind": "gaussian_shift"}}, "seed"),
    ({"seed": 0}, "dataset"),
    (_doc(bogus=1), "bogus"),
    (_doc(q="3"), "q"),
    (_doc(lr=True), "lr"),
    (_doc(g_hidden=[1.5]), "g_hidden"),
    (_doc(dataset={"kind": "nope"}), "dataset.kind"),
    (_doc(dataset={"kind": "gaussian_shift", "extra": 1}), "dataset.extra"),
    (_doc(dataset={"kind": "idx", "source_images": "a"}), "dataset.source_labels"),
    (_doc(ablation_row=9), "ablation_row"),
    (_doc(hmm_scale="big"), "hmm_scale"),
])
def test_schema_violations_name_the_field(doc, field):
    with pytest.raises(ConfigError) as info:
        runconfig.validate_document(doc)
    assert info.value.field == field


def test_precedence_file_then_env_then_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(_doc(q=2, lr=0.01)))
    env = {"CLOTH_Q": "4", "CLOTH_LR": "0.02", "CLOTH_DATASET__N": "90", "HOME": "/x"}
    rc = runconfig.resolve(path, env, {"lr": 0.05, "seed": None})
    assert rc.train.q == 4 and rc.train.lr == 0.05 and rc.dataset["n"] == 90 and rc.train.seed == 3


def test_env_string_fallback_and_unknown_key():
    doc = runconfig.apply_env(_doc(), {"CLOTH_OUT": "runs/x"})
    assert doc["out"] == "runs/x"
    with pytest.raises(ConfigError):
        runconfig.apply_env(_doc(), {"CLOTH_NOT_A_KEY": "1"})


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        runconfig.resolve(bad, {})
    with pytest.raises(ConfigError):
        runconfig.resolve(tmp_path / "missing.json", {})


def test_default_document_round_trips():
    doc = runconfig.default_document(7)
    rc = runconfig.validate_document(doc)
    assert rc.to_dict() == doc


def test_dataset_seed_defaults_to_run_seed():
    a, _ = runconfig.build_datasets({"kind": "gaussian_shift", "n": 30}, 5)
    b, _ = runconfig.build_datasets({"kind": "gaussian_shift", "n": 30, "seed": 5}, 0)
    assert (a.features == b.features).all()


def test_effective_train_applies_row():
    rc = runconfig.validate_document(_doc(ablation_row=1))
    assert rc.effective_train().alpha == 0 and rc.train.alpha > 0
