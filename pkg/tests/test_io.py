import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scoreflow.io import (HEADER, load_world_config, montage, quantize, read_dataset, read_kv, read_pgm,
                          save_world_config, score_column, write_dataset, write_kv, write_pgm)
from scoreflow.toyworld.world import ATTRIBUTES, WorldConfig, sample_dataset


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 1)))
def test_pgm_roundtrip_equals_quantize(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(path, img)
    np.testing.assert_array_equal(read_pgm(path), quantize(img))


def test_pgm_header_and_clipping(tmp_path):
    path = tmp_path / "x.pgm"
    write_pgm(path, np.array([[-1.0, 0.5, 2.0]]))
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n3 1\n255\n")
    assert list(blob[-3:]) == [0, 128, 255]


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(read_pgm(path), [[0.0, 1.0]])


def test_sixteen_bit_pgm(tmp_path):
    path = tmp_path / "w.pgm"
    path.write_bytes(b"P5 1 1 65535\n" + (65535).to_bytes(2, "big"))
    assert read_pgm(path)[0, 0] == 1.0


def test_pgm_errors(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="not a binary PGM"):
        read_pgm(bad)
    short = tmp_path / "short.pgm"
    short.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(short)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


def test_montage_layout():
    out = montage([np.zeros((2, 2)), np.ones((2, 2)) * 0.5], gap=1, fill=1.0)
    assert out.shape == (2, 5)
    np.testing.assert_array_equal(out[:, 2], [1.0, 1.0])
    np.testing.assert_array_equal(out[:, 3:], 0.5)
    with pytest.raises(ValueError):
        montage([])


def test_kv_roundtrip_and_comments(tmp_path):
    path = tmp_path / "a.cfg"
    write_kv(path, {"a": 1, "b": True, "c": 0.1})
    path.write_text("# note\n\n" + path.read_text())
    assert read_kv(path) == {"a": "1", "b": "true", "c": "0.1"}
    path.write_text("junk\n")
    with pytest.raises(ValueError, match="key=value"):
        read_kv(path)


def test_world_config_roundtrip(tmp_path):
    cfg = WorldConfig(seed=3, n=77, adult_only=True, covariate_scale=0.25)
    save_world_config(tmp_path / "w.cfg", cfg, sample_seed=9)
    back, values = load_world_config(tmp_path / "w.cfg")
    assert back == cfg
    assert values["world_hash"] == cfg.world_hash() and values["sample_seed"] == "9"


def test_dataset_roundtrip(tmp_path):
    data = sample_dataset(6, seed=2)
    data.images = quantize(data.images)
    tsv = write_dataset(tmp_path, data)
    assert tsv.read_text().splitlines()[0].split("\t") == HEADER
    back = read_dataset(tmp_path)
    np.testing.assert_array_equal(back.params, data.params)
    np.testing.assert_array_equal(back.images, data.images)
    for attr in ATTRIBUTES:
        np.testing.assert_array_equal(back.scores[attr], data.scores[attr])


def test_dataset_errors(tmp_path):
    (tmp_path / "dataset.tsv").write_text("wrong\theader\n")
    with pytest.raises(ValueError, match="header"):
        read_dataset(tmp_path)
    (tmp_path / "dataset.tsv").write_text("\t".join(HEADER) + "\n")
    with pytest.raises(ValueError, match="no rows"):
        read_dataset(tmp_path)


def test_score_columns():
    assert score_column("trustworthiness") == "score_trust"
    assert score_column("attr") == "score_attr"
