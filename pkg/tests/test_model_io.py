import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixemb import model_io
from pixemb.data import synthetic
from pixemb.model_io import (BadMagicError, CheckpointError, FormatError, TruncatedError,
                             VersionError, load, save, sections, size_report)
from pixemb.network import PRESETS, build_model, forward
from pixemb.quant import QuantConfig
from pixemb.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def images():
    return synthetic(12, 10, seed=3).images


@pytest.fixture(scope="module")
def trained():
    """A pixemb-first model with non-initial weights and running statistics."""
    data = synthetic(32, 10, seed=5)
    m = build_model("pixemb-first", seed=2)
    train(m, data, TrainConfig(batch_size=16, total_steps=3, lr_decay_steps=(), augment=False))
    return m


def infer_modes(model):
    return ["infer-float"] if model.preset == "fp-first" else ["infer-float", "infer-packed"]


@pytest.mark.parametrize("preset", PRESETS)
def test_train_roundtrip(images, preset):
    m = build_model(preset, seed=1)
    data = save(m)
    back = load(data)
    assert save(back) == data
    assert [lc.to_json() for lc in back.layers] == [lc.to_json() for lc in m.layers]
    for key, v in m.params.items():
        assert back.params[key].tobytes() == v.tobytes()
    for mode in infer_modes(m):
        assert forward(back, images, mode).tobytes() == forward(m, images, mode).tobytes()


@pytest.mark.parametrize("preset", PRESETS)
def test_infer_roundtrip(images, preset):
    m = build_model(preset, seed=1)
    data = save(m, "infer")
    back = load(data)
    assert save(back, "infer") == data
    assert data[6] == 1 and save(m)[6] == 0
    for mode in infer_modes(m):
        assert forward(back, images, mode).tobytes() == forward(m, images, mode).tobytes()


def test_trained_model_roundtrip(trained, images):
    for mode in ("train", "infer"):
        back = load(save(trained, mode))
        for name, st in trained.bn.items():
            np.testing.assert_array_equal(back.bn[name].mean, st.mean)
            np.testing.assert_array_equal(back.bn[name].var, st.var)
        for path in ("infer-float", "infer-packed"):
            assert forward(back, images, path).tobytes() == forward(trained, images, path).tobytes()


def test_float_head_roundtrip(images):
    m = build_model("iwq-first", float_head=True)
    back = load(save(m, "infer"))
    assert {s.key: s.tag for s in sections(save(m, "infer"))}["fc.w"] == "float"
    assert forward(back, images, "infer-packed").tobytes() == forward(m, images, "infer-packed").tobytes()


def test_merged_section_is_512_bytes():
    info = {s.key: s for s in sections(save(build_model("pixemb-first", d=8), "infer"))}
    merged = info["embed.merged"]
    assert merged.tag == "merged" and merged.payload_bytes == 512
    assert "embed.table" not in info


@pytest.mark.parametrize("d", [1, 4, 16])
@pytest.mark.parametrize("bits", [1, 2, 3])
def test_merged_payload_formula(d, bits):
    m = build_model("pixemb-first", d=d, quant=QuantConfig(activation_bits=bits))
    info = {s.key: s for s in sections(save(m, "infer"))}
    assert info["embed.merged"].payload_bytes == -(-256 * d * bits // 8)


def test_section_layout(trained):
    data = save(trained, "infer")
    info = sections(data)
    keys = [s.key for s in info]
    assert keys == sorted(keys)
    tags = {s.key: s.tag for s in info}
    assert tags["conv1.w"] == "packed" and tags["fc.w"] == "packed"
    assert tags["bn1.gamma"] == "float" and tags["bn1.stats"] == "bn"
    assert all(data[s.offset] in (1, 2, 3, 4, 5) for s in info)


def test_fp_first_bundle_flags_float_layer():
    tags = {s.key: s.tag for s in sections(save(build_model("fp-first"), "infer"))}
    assert tags["conv1.w"] == "float-first"
    assert tags["stage1.block1.conv1.w"] == "packed"


def test_header_fields():
    data = save(build_model("iwq-first"))
    assert data[:4] == b"PXEB"
    assert struct.unpack_from("<HB", data, 4) == (1, 0)


def test_bundle_cannot_be_saved_as_training_checkpoint():
    back = load(save(build_model("pixemb-first"), "infer"))
    with pytest.raises(ValueError, match="bundle"):
        save(back, "train")
    with pytest.raises(ValueError, match="mode"):
        save(back, "fast")


def test_size_report():
    rep = size_report(build_model("pixemb-first", d=8))
    assert rep["embed.merged_bytes"] == 512 and rep["embed.table.float_bytes"] == 8192
    assert rep["conv1.float_bytes"] == 16 * 24 * 9 * 4
    assert rep["conv1.packed_bytes"] < rep["conv1.float_bytes"]


def test_file_helpers(tmp_path):
    m = build_model("wq-first")
    n = model_io.save_file(m, tmp_path / "m.pxeb", "infer")
    assert n == (tmp_path / "m.pxeb").stat().st_size
    assert save(model_io.load_file(tmp_path / "m.pxeb"), "infer") == save(m, "infer")


# ---------------------------------------------------------------- strict parsing

@pytest.fixture(scope="module")
def blob():
    return save(build_model("pixemb-first", d=2), "infer")


def test_bad_magic(blob):
    with pytest.raises(BadMagicError) as e:
        load(b"PXEC" + blob[4:])
    assert e.value.offset == 0


def test_version_mismatch(blob):
    with pytest.raises(VersionError) as e:
        load(blob[:4] + struct.pack("<H", 2) + blob[6:])
    assert e.value.offset == 4


def test_unknown_mode(blob):
    with pytest.raises(FormatError) as e:
        load(blob[:6] + b"\x07" + blob[7:])
    assert e.value.offset == 6


def test_unknown_tag(blob):
    first = sections(blob)[0]
    bad = bytearray(blob)
    bad[first.offset] = 9
    with pytest.raises(FormatError, match="tag") as e:
        load(bytes(bad))
    assert e.value.offset == first.offset


def test_trailing_bytes(blob):
    with pytest.raises(FormatError, match="trailing") as e:
        load(blob + b"\x00")
    assert e.value.offset == len(blob)


@settings(max_examples=60)
@given(st.data())
def test_every_prefix_is_rejected(blob, data):
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises(CheckpointError):
        load(blob[:cut])


def test_truncated_section_reports_offset(blob):
    last = sections(blob)[-1]
    with pytest.raises(TruncatedError) as e:
        load(blob[:last.offset + 3])
    assert last.offset <= e.value.offset <= len(blob)


def test_missing_section(blob):
    info = sections(blob)
    i = next(k for k, s in enumerate(info) if s.key == "fc.w")
    body = bytearray(blob[:info[i].offset] + blob[info[i + 1].offset:])
    # the section count sits right before the first section
    (n,) = struct.unpack_from("<I", body, info[0].offset - 4)
    struct.pack_into("<I", body, info[0].offset - 4, n - 1)
    with pytest.raises(FormatError, match="missing"):
        load(bytes(body))


def test_nonzero_sign_padding_rejected(blob):
    info = {s.key: s for s in sections(blob)}
    s = info["conv1.w"]  # 6 input channels: lanes 6..63 are padding
    key_len = len(b"conv1.w")
    signs_at = s.offset + 1 + 2 + key_len + 16 + 4 * 16
    bad = bytearray(blob)
    bad[signs_at + 7] |= 0x80
    with pytest.raises(FormatError, match="padded"):
        load(bytes(bad))


def test_merged_size_field_checked(blob):
    s = {x.key: x for x in sections(blob)}["embed.merged"]
    size_at = s.offset + 1 + 2 + len(b"embed.merged") + 4 + 1
    bad = bytearray(blob)
    struct.pack_into("<I", bad, size_at, 129)
    with pytest.raises(FormatError, match="expected 128"):
        load(bytes(bad))


def test_garbage_is_a_checkpoint_error(rng):
    for n in (0, 3, 7, 64):
        with pytest.raises(CheckpointError):
            load(bytes(rng.integers(0, 256, n, dtype=np.uint8)))
