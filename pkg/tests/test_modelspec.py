import json

import jsonschema
import numpy as np
import pytest

from hecnn.modelspec import (
    REFERENCE_COUNTS,
    LayerKind,
    LayerSpec,
    ModelSpec,
    Policy,
    builtin_models,
    check_weights,
    load_model,
    model_from_dict,
    random_input,
    random_weights,
    read_input,
    read_weights,
    write_input,
    write_weights,
)
from hecnn.slotvec import ShapeError

import published


def test_builtin_models_load():
    models = builtin_models()
    assert set(models) == {"cryptonets-hs", "me", "ce"}
    assert all(m.output_size == 10 for m in models.values())


def test_me_parameters():
    me = load_model("me")
    conv1 = me.layers[0]
    assert (conv1.kind, conv1.k, conv1.s) == (LayerKind.CONV, 3, 1)
    dense1 = next(layer for layer in me.layers if layer.label == "Dense1")
    assert dense1.units == 32
    assert me.shapes()[-2] == (32,)


def test_shapes_chain():
    ce = load_model("ce")
    shapes = dict(zip([layer.label for layer in ce.layers], ce.shapes()))
    assert shapes["Conv2"] == (18, 10, 10)  # input to the sub-convolution
    assert ce.input_shape == (3, 32, 32)


def test_round_trip_through_dict():
    for model in builtin_models().values():
        again = model_from_dict(json.loads(json.dumps(model.to_dict())))
        assert again == model


def test_unknown_field_rejected():
    data = load_model("me").to_dict()
    data["layers"][0]["padding"] = 1
    with pytest.raises(jsonschema.ValidationError):
        model_from_dict(data)


def test_layer_validation():
    with pytest.raises(ValueError):
        LayerSpec(LayerKind.CONV, "c", k=3)  # no out_channels
    with pytest.raises(ValueError):
        LayerSpec(LayerKind.SQUARE, "s", k=3)
    with pytest.raises(ValueError):
        LayerSpec(LayerKind.SQUARE, "s", policy=Policy.HS)
    with pytest.raises(ValueError):
        LayerSpec(LayerKind.DENSE, "d", units=3, policy=Policy.CONV_PACK)
    assert LayerSpec(LayerKind.AVGPOOL, "p", k=2).s == 1


def test_non_power_of_two_slots_rejected():
    with pytest.raises(ValueError):
        ModelSpec("x", (1, 4, 4), 100, [LayerSpec(LayerKind.SQUARE, "s")])


def test_model_dir_lookup(tmp_path, monkeypatch):
    data = load_model("me").to_dict()
    data["name"] = "mine"
    (tmp_path / "mine.json").write_text(json.dumps(data))
    monkeypatch.setenv("HECNN_MODEL_DIR", str(tmp_path))
    assert load_model("mine").name == "mine"


def test_missing_model():
    with pytest.raises(FileNotFoundError):
        load_model("does-not-exist")


def test_weights_file_round_trip(tmp_path):
    model = load_model("cryptonets-hs")
    weights = random_weights(model, 0)
    write_weights(tmp_path / "w.bin", model, weights)
    back = read_weights(tmp_path / "w.bin", model)
    for label, (w, b) in weights.items():
        assert np.allclose(back[label][0], w, atol=1e-6)
        assert np.allclose(back[label][1], b, atol=1e-6)
    x = random_input(model, 0)
    write_input(tmp_path / "x.bin", x)
    assert np.allclose(read_input(tmp_path / "x.bin", model), x, atol=1e-6)


def test_weights_file_length_checked(tmp_path):
    model = load_model("me")
    np.zeros(10, dtype="<f4").tofile(tmp_path / "short.bin")
    with pytest.raises(ShapeError):
        read_weights(tmp_path / "short.bin", model)


def test_check_weights_shapes():
    model = load_model("me")
    weights = random_weights(model, 0)
    weights["Dense2"] = (np.ones((10, 31)), np.ones(10))
    with pytest.raises(ShapeError):
        check_weights(model, weights)


def test_reference_counts_consistent():
    for name, table in REFERENCE_COUNTS.items():
        for label, row in table.items():
            if name == "lola-mnist" and label in ("Conv2-Dense1", "Total"):
                # kept as published: the Conv2-Dense1 total reads 492 though
                # its parts sum to 505, and the Total row inherits the gap
                assert sum(row[1:]) - row[0] == 13
                continue
            assert row[0] == sum(row[1:])
        body = [row for label, row in table.items() if label != "Total"]
        assert tuple(map(sum, zip(*body))) == table["Total"]
    assert REFERENCE_COUNTS["lola-mnist"]["Total"][5] == 380


@pytest.mark.skipif(not published.SOURCE.is_file(), reason="source text not available")
def test_reference_counts_match_published_tables():
    assert published.table_counts() == REFERENCE_COUNTS
