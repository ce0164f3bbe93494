"""Model bundles: encoder plus per-attribute regressors and flows in one file.

Layout: magic "IMPBNDL1", little-endian u32 format version, u32 header
length, a JSON header, then the component blobs in header order. Every
component records the hash of the world it was trained in; loading a
bundle whose components disagree fails.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .flow import CnfModel, dump_model, parse_model
from .predictor import RegressorModel, dump_regressor, parse_regressor
from .toyworld.encoder import EncoderModel, dump_encoder, parse_encoder
from .toyworld.world import AttributeKind, WorldConfig

BUNDLE_MAGIC = b"IMPBNDL1"
BUNDLE_VERSION = 1


class CorruptBundleError(ValueError):
    pass


class ConfigHashError(ValueError):
    pass


@dataclass
class ModelBundle:
    world: WorldConfig
    encoder: EncoderModel
    regressors: dict = field(default_factory=dict)  # attribute value -> RegressorModel
    flows: dict = field(default_factory=dict)  # attribute value -> CnfModel
    component_hashes: dict = field(default_factory=dict)  # component key -> world hash

    @property
    def world_hash(self) -> str:
        return self.world.world_hash()

    def set_regressor(self, attr, model: RegressorModel) -> None:
        key = AttributeKind.parse(attr).value
        self.regressors[key] = model
        self.component_hashes[f"regressor:{key}"] = self.world_hash

    def set_flow(self, attr, model: CnfModel) -> None:
        key = AttributeKind.parse(attr).value
        self.flows[key] = model
        self.component_hashes[f"flow:{key}"] = self.world_hash

    def regressor(self, attr) -> RegressorModel:
        key = AttributeKind.parse(attr).value
        if key not in self.regressors:
            raise KeyError(f"bundle has no {key} regressor; run train-attr first")
        return self.regressors[key]

    def flow(self, attr) -> CnfModel:
        key = AttributeKind.parse(attr).value
        if key not in self.flows:
            raise KeyError(f"bundle has no {key} flow; run train-mapper first")
        return self.flows[key]

    def versions(self) -> dict:
        return {"package": __version__, "bundle": BUNDLE_VERSION, "flow": 1, "regressor": 1, "encoder": 1}


def dump_bundle(bundle: ModelBundle) -> bytes:
    blobs = [("encoder", None, dump_encoder(bundle.encoder))]
    blobs += [("regressor", a, dump_regressor(bundle.regressors[a])) for a in sorted(bundle.regressors)]
    blobs += [("flow", a, dump_model(bundle.flows[a])) for a in sorted(bundle.flows)]
    components = []
    for kind, attr, blob in blobs:
        key = kind if attr is None else f"{kind}:{attr}"
        components.append({
            "kind": kind, "attribute": attr, "length": len(blob),
            "sha256": hashlib.sha256(blob).hexdigest(),
            "world_hash": bundle.component_hashes.get(key, bundle.world_hash),
        })
    header = json.dumps({
        "versions": bundle.versions(),
        "world": asdict(bundle.world),
        "world_hash": bundle.world_hash,
        "components": components,
    }, sort_keys=True).encode()
    return b"".join([BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(header)), header,
                     *(b for _, _, b in blobs)])


def parse_bundle(blob: bytes) -> ModelBundle:
    if blob[:8] != BUNDLE_MAGIC:
        raise CorruptBundleError("not a model bundle (bad magic)")
    if len(blob) < 16:
        raise CorruptBundleError("corrupt bundle: truncated header")
    version, n_header = struct.unpack_from("<II", blob, 8)
    if version != BUNDLE_VERSION:
        raise CorruptBundleError(f"unsupported bundle version {version}")
    try:
        header = json.loads(blob[16:16 + n_header].decode())
        world = WorldConfig(**header["world"])
        components = header["components"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptBundleError(f"corrupt bundle header: {exc}") from None
    off = 16 + n_header
    if off + sum(c["length"] for c in components) != len(blob):
        raise CorruptBundleError("corrupt bundle: length mismatch (truncated or padded file)")
    if world.world_hash() != header.get("world_hash"):
        raise ConfigHashError("bundle world config does not match its recorded hash")
    bundle = None
    for c in components:
        part = blob[off:off + c["length"]]
        off += c["length"]
        if hashlib.sha256(part).hexdigest() != c["sha256"]:
            raise CorruptBundleError(f"corrupt bundle: checksum mismatch in {c['kind']} component")
        if c["world_hash"] != header["world_hash"]:
            raise ConfigHashError(f"{c['kind']} component was trained for world {c['world_hash']}, "
                                  f"bundle world is {header['world_hash']}")
        try:
            if c["kind"] == "encoder":
                bundle = ModelBundle(world, parse_encoder(part))
            elif bundle is None:
                raise CorruptBundleError("corrupt bundle: encoder must come first")
            elif c["kind"] == "regressor":
                bundle.set_regressor(c["attribute"], parse_regressor(part))
            elif c["kind"] == "flow":
                bundle.set_flow(c["attribute"], parse_model(part))
            else:
                raise CorruptBundleError(f"unknown bundle component {c['kind']!r}")
        except CorruptBundleError:
            raise
        except ValueError as exc:
            raise CorruptBundleError(f"corrupt bundle: {exc}") from None
    if bundle is None:
        raise CorruptBundleError("corrupt bundle: no encoder")
    return bundle


def save_bundle(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(dump_bundle(bundle))


def load_bundle(path) -> ModelBundle:
    return parse_bundle(Path(path).read_bytes())
