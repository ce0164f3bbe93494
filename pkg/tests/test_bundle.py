import json
import struct

import numpy as np
import pytest

from scoreflow.bundle import (BUNDLE_MAGIC, ConfigHashError, CorruptBundleError, ModelBundle, dump_bundle,
                              load_bundle, parse_bundle, save_bundle)
from scoreflow.flow import forward_map
from scoreflow.predictor import predict_score
from scoreflow.toyworld.encoder import EncoderModel, encode
from scoreflow.toyworld.world import WorldConfig


@pytest.fixture(scope="module")
def blob(pipeline):
    return pipeline.bundle_path.read_bytes()


def _repack(blob, edit_header):
    n = struct.unpack_from("<II", blob, 8)[1]
    header = json.loads(blob[16:16 + n])
    edit_header(header)
    raw = json.dumps(header, sort_keys=True).encode()
    return BUNDLE_MAGIC + struct.pack("<II", 1, len(raw)) + raw + blob[16 + n:]


def test_roundtrip_is_byte_identical(blob):
    assert dump_bundle(parse_bundle(blob)) == blob


def test_roundtrip_predictions_are_bit_identical(bundle, blob, eval_set, tmp_path):
    path = tmp_path / "copy.bin"
    save_bundle(bundle, path)
    back = load_bundle(path)
    probes = eval_set.images[:10]
    np.testing.assert_array_equal(encode(back.encoder, probes), encode(bundle.encoder, probes))
    w = encode(bundle.encoder, probes)
    for attr in ("trustworthiness", "dominance", "attractiveness"):
        np.testing.assert_array_equal(predict_score(back.regressor(attr), probes),
                                      predict_score(bundle.regressor(attr), probes))
        np.testing.assert_array_equal(forward_map(back.flow(attr), w, 0.5), forward_map(bundle.flow(attr), w, 0.5))


def test_contents(bundle):
    assert sorted(bundle.regressors) == sorted(bundle.flows) == ["attractiveness", "dominance", "trustworthiness"]
    assert bundle.versions()["bundle"] == 1


def test_truncated(blob):
    with pytest.raises(CorruptBundleError):
        parse_bundle(blob[:-100])
    with pytest.raises(CorruptBundleError):
        parse_bundle(blob[:12])


def test_bad_magic(blob):
    with pytest.raises(CorruptBundleError, match="magic"):
        parse_bundle(b"NOTABNDL" + blob[8:])


def test_flipped_payload_byte(blob):
    bad = bytearray(blob)
    bad[-5] ^= 0xFF
    with pytest.raises(CorruptBundleError, match="checksum"):
        parse_bundle(bytes(bad))


def test_component_world_hash_mismatch(blob):
    def edit(header):
        header["components"][-1]["world_hash"] = "0" * 16
    with pytest.raises(ConfigHashError, match="trained for world"):
        parse_bundle(_repack(blob, edit))


def test_world_config_hash_mismatch(blob):
    def edit(header):
        header["world"]["seed"] += 1
    with pytest.raises(ConfigHashError):
        parse_bundle(_repack(blob, edit))


def test_missing_components_raise_key_error():
    world = WorldConfig(seed=0)
    b = parse_bundle(dump_bundle(ModelBundle(world, EncoderModel.create(world.mixing()))))
    with pytest.raises(KeyError, match="train-attr"):
        b.regressor("trust")
    with pytest.raises(KeyError, match="train-mapper"):
        b.flow("dominance")
