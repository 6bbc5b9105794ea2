import numpy as np
import pytest

from Service.Evaluation.Metrics import evaluate
from Service.Evaluation.Predict import assign, predictControl
from Service.File.Artifact import ARTIFACT_VERSION, extractArtifact, restoreArtifact
from Service.File.File import FileMgr
from Service.errorResponse import ArtifactError, ConfigError, SchemaError

"""模型文件"""


def _numbers(info: dict) -> dict:
    keys = ("ari", "pehe", "policy_risk", "control_rmse")
    flat = {key: info[key] for key in keys}
    for item in info["sate_per_cluster"]:
        flat[f"sate{item['cluster']}"] = item["estimate"]
    return flat


def testArtifactRoundTrip(tmp_path, fittedModel):
    model, ds = fittedModel
    fileMgr = FileMgr(str(tmp_path))
    fileMgr.writeJson(extractArtifact(model), "model.json")
    restored = restoreArtifact(fileMgr.readJson("model.json"))

    assert restored.finalElbo == model.finalElbo
    np.testing.assert_array_equal(restored.posterior.mean, model.posterior.mean)
    np.testing.assert_allclose(restored.tauHat, model.tauHat, atol=1e-12)
    np.testing.assert_allclose(assign(restored, ds).probs, assign(model, ds).probs, atol=1e-9)
    np.testing.assert_allclose(predictControl(restored, ds), predictControl(model, ds), atol=1e-9)
    before, after = _numbers(evaluate(model, ds).toDict()), _numbers(evaluate(restored, ds).toDict())
    for key, value in before.items():
        assert after[key] == pytest.approx(value, abs=1e-9)


def testArtifactRejectsBadContent(fittedModel):
    model, _ = fittedModel
    info = extractArtifact(model)
    with pytest.raises(ArtifactError, match="version"):
        restoreArtifact({**info, "version": ARTIFACT_VERSION + 1})
    with pytest.raises(ArtifactError):
        restoreArtifact({key: value for key, value in info.items() if key != "gp"})
    truncated = {"mean": info["posterior"]["mean"][:-1], "log_sd": info["posterior"]["log_sd"][:-1]}
    with pytest.raises(ArtifactError, match="posterior length"):
        restoreArtifact({**info, "posterior": truncated})
    with pytest.raises(ArtifactError):
        restoreArtifact({**info, "config": {**info["config"], "K": 0}})


"""文件"""


def testSchemaSidecar(tmp_path, smallFrame, schema):
    fileMgr = FileMgr(str(tmp_path))
    dataPath, schemaPath = fileMgr.writeDataset(smallFrame, schema, "data/sim.csv")
    assert schemaPath.endswith("data/sim.schema.json")
    assert fileMgr.readSchema(dataPath) == schema
    with pytest.raises(SchemaError, match="schema file not found"):
        fileMgr.readSchema("data/other.csv")


def testReadConfig(tmp_path):
    fileMgr = FileMgr(str(tmp_path))
    (tmp_path / "empty.yaml").write_text("", encoding="utf-8")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n", encoding="utf-8")
    (tmp_path / "ok.json").write_text('{"K": 3, "restarts": 2}', encoding="utf-8")
    assert fileMgr.readConfig("empty.yaml") == {}
    assert fileMgr.readConfig("ok.json") == {"K": 3, "restarts": 2}
    with pytest.raises(ConfigError):
        fileMgr.readConfig("list.yaml")
    with pytest.raises(FileNotFoundError):
        FileMgr(str(tmp_path / "missing"))
