import json
import random
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tee_fabric import crypto
from tee_fabric.errors import SchemaError, UnknownPolicy, UnknownResourceType
from tee_fabric.manifest import (
    POLICIES,
    RESOURCE_TYPES,
    ManifestBuilder,
    example_manifest,
    format_size,
    manifest_from_doc,
    parse_manifest,
    parse_size,
    serialize_manifest,
    sign_manifest,
    verify_manifest,
)

EXAMPLE = Path(__file__).resolve().parents[1] / "scenarios" / "manifests" / "example_enclave.json"
KEY = crypto.generate_keypair(bytes([9]) * 32, "ed25519")
OTHER = crypto.generate_keypair(bytes([10]) * 32, "ed25519")


def test_example_file_parses_to_two_requests():
    m = parse_manifest(EXAMPLE.read_bytes())
    assert len(m.resources) == 2
    cpu, ai = m.resources
    assert (cpu.resource_type, cpu.cores, cpu.memory, cpu.policies) == ("CPU", 2, 256 << 20, {"no-HT"})
    assert (ai.resource_type, ai.cores, ai.memory) == ("AI_Accelerator", 20, 16 << 30)
    assert ai.policies == {"memIsolation", "cachePartitioned"}
    assert m == example_manifest()


def test_empty_resource_list():
    doc = json.loads(EXAMPLE.read_text())
    doc["Resource"] = []
    with pytest.raises(SchemaError):
        manifest_from_doc(doc)


def test_unknown_resource_type():
    doc = json.loads(EXAMPLE.read_text())
    doc["Resource"][0]["Resource type"] = "Quantum"
    with pytest.raises(UnknownResourceType):
        manifest_from_doc(doc)


def test_unknown_policy():
    doc = json.loads(EXAMPLE.read_text())
    doc["Resource"][0]["Policies"] = ["telepathy"]
    with pytest.raises(UnknownPolicy):
        manifest_from_doc(doc)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("Enclave"),
        lambda d: d.__setitem__("Version", 3),
        lambda d: d["Resource"][0].pop("Cores"),
        lambda d: d["Resource"][0].__setitem__("Cores", True),
        lambda d: d["Resource"][0].__setitem__("Memory", "lots"),
        lambda d: d["Resource"][0].__setitem__("Memory", 0),
        lambda d: d["Resource"][0].__setitem__("Kind", "Other"),
        lambda d: d.__setitem__("Code", ["zz"]),
        lambda d: d.__setitem__("Code", ["00" * 32]),
    ],
)
def test_schema_errors(mutate):
    doc = json.loads(EXAMPLE.read_text())
    mutate(doc)
    with pytest.raises(SchemaError):
        manifest_from_doc(doc)


def test_not_json():
    with pytest.raises(SchemaError):
        parse_manifest(b"{nope")


def test_sign_and_verify():
    m = sign_manifest(example_manifest(), KEY)
    assert verify_manifest(m, KEY.public)
    assert not verify_manifest(m, OTHER.public)
    assert not verify_manifest(sign_manifest(example_manifest(), OTHER), KEY.public)
    assert not verify_manifest(example_manifest(), KEY.public)


def test_policy_mutation_after_signing_fails():
    doc = sign_manifest(example_manifest(), KEY).to_doc()
    doc["Resource"][0]["Policies"] = ["debug"]
    assert not verify_manifest(manifest_from_doc(doc), KEY.public)


def test_signed_roundtrip_through_bytes():
    m = sign_manifest(example_manifest(), KEY)
    again = parse_manifest(serialize_manifest(m))
    assert again == m
    assert verify_manifest(again, KEY.public)


def test_sizes():
    assert parse_size("256M") == 256 << 20
    assert parse_size("16g") == 16 << 30
    assert parse_size("4KB") == 4096
    assert parse_size(100) == 100
    assert format_size(16 << 30) == "16G"
    assert format_size(1000) == "1000"
    for bad in (True, "1T", "-1", 1.5):
        with pytest.raises(SchemaError):
            parse_size(bad)


resource_st = st.fixed_dictionaries(
    {
        "Resource type": st.sampled_from(sorted(RESOURCE_TYPES)),
        "Policies": st.lists(st.sampled_from(sorted(POLICIES)), unique=True, max_size=4),
        "Cores": st.integers(1, 64),
        "Memory": st.one_of(st.integers(1, 1 << 40), st.sampled_from(["1K", "256M", "16G"])),
    }
)
doc_st = st.fixed_dictionaries(
    {
        "Enclave": st.text(max_size=12),
        "Enclave Vendor": st.text(max_size=12),
        "Version": st.text(max_size=6),
        "Resource": st.lists(resource_st, min_size=1, max_size=4),
    }
)


def _shuffled(doc, rng):
    if isinstance(doc, dict):
        items = list(doc.items())
        rng.shuffle(items)
        return {k: _shuffled(v, rng) for k, v in items}
    if isinstance(doc, list):
        return [_shuffled(v, rng) for v in doc]
    return doc


@given(doc_st, st.integers(0, 1000))
def test_canonical_roundtrip_and_key_order(doc, seed):
    m = manifest_from_doc(doc)
    assert parse_manifest(serialize_manifest(m)) == m
    again = parse_manifest(serialize_manifest(parse_manifest(serialize_manifest(m))))
    assert again == m
    shuffled = manifest_from_doc(_shuffled(doc, random.Random(seed)))
    assert shuffled.manifest_id == m.manifest_id


def test_builder():
    m = ManifestBuilder().add("CPU", 2, "256M", ["no-HT"]).add("GPU", 8, "32M", kind="NonTEE").build(KEY)
    assert verify_manifest(m, KEY.public)
    assert [r.tee for r in m.resources] == [True, False]
    assert m.primary_cpu_index() == 0
    with pytest.raises(SchemaError):
        ManifestBuilder().build()
