import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pseg import persistence as P
from tests import golden_cases


# -- netpbm -----------------------------------------------------------------


def test_white_pixel_p6_bytes():
    px = np.full((1, 1, 3), 255, np.uint8)
    assert P.encode_pnm(px) == b"P6\n1 1\n255\n\xff\xff\xff"


def test_p5_sixteen_bit_is_big_endian():
    data = P.encode_pnm(np.array([[258]], np.uint16), maxval=65535)
    assert data == b"P5\n1 1\n65535\n\x01\x02"


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.uint16, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20)))
def test_label_map_round_trip(labels):
    out = P.decode_pnm(P.encode_pnm(labels, maxval=65535))
    np.testing.assert_array_equal(out, labels)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3))))
def test_pixmap_round_trip(pixels):
    np.testing.assert_array_equal(P.decode_pnm(P.encode_pnm(pixels)), pixels)


def test_header_comments_are_skipped():
    data = b"P5\n# made by hand\n2 1\n# depth\n255\n\x07\x09"
    np.testing.assert_array_equal(P.decode_pnm(data), [[7, 9]])


@pytest.mark.parametrize(
    "data,err",
    [
        (b"P3\n1 1\n255\n", P.FormatError),
        (b"P5\n2 2\n255\n\x00\x00\x00", P.TruncatedFile),
        (b"P5\n1 1\n255\n\x00\x00", P.FormatError),
        (b"P5\n1 1\n0\n\x00", P.FormatError),
        (b"P5\n1", P.FormatError),
    ],
)
def test_bad_netpbm(data, err):
    with pytest.raises(err):
        P.decode_pnm(data)


def test_image_quantization_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(3, 5, 4)).astype(np.float32)
    P.write_image(tmp_path / "a.ppm", img)
    back = P.read_image(tmp_path / "a.ppm")
    assert back.shape == img.shape and back.dtype == np.float32
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
    P.write_image(tmp_path / "b.ppm", back)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_labels_file_round_trip(tmp_path):
    lab = np.random.default_rng(1).integers(0, 70000, (6, 7))
    lab = np.minimum(lab, 65535)
    P.write_labels(tmp_path / "l.pgm", lab)
    np.testing.assert_array_equal(P.read_labels(tmp_path / "l.pgm"), lab)
    with pytest.raises(ValueError):
        P.write_labels(tmp_path / "x.pgm", np.array([[70000]]))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    P.atomic_write(tmp_path / "f.bin", b"abc")
    P.atomic_write(tmp_path / "f.bin", b"xyz")
    assert (tmp_path / "f.bin").read_bytes() == b"xyz"
    assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    state = golden_cases.checkpoint_state()
    P.save_checkpoint(state, tmp_path / "m.ckpt")
    back = P.load_checkpoint(tmp_path / "m.ckpt")
    assert back.model.config == state.model.config
    assert (back.step, back.epoch, back.seed, back.lr, back.opt.t) == (12, 4, 9, 3e-4, 12)
    assert back.running == state.running
    assert back.history[0]["lg"] == 0.03125 and back.history[0]["degenerate"] == 3
    for name, p in state.model.params.items():
        np.testing.assert_array_equal(back.model[name].data, p.data)
        np.testing.assert_array_equal(back.opt.m[name], state.opt.m[name])
        np.testing.assert_array_equal(back.opt.v[name], state.opt.v[name])
    P.save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()


def test_corrupted_payload_fails_crc():
    data = bytearray(P.encode_checkpoint("a=1\n", {"w": np.arange(6, dtype=np.float32)}))
    data[-8] ^= 0x01
    with pytest.raises(P.ChecksumError):
        P.decode_checkpoint(bytes(data))


def test_future_version_rejected():
    data = bytearray(P.encode_checkpoint("", {}))
    data[4] = P.VERSION + 1
    with pytest.raises(P.UnknownVersion):
        P.decode_checkpoint(bytes(data))


def test_truncated_and_foreign_checkpoint():
    data = P.encode_checkpoint("a=1\n", {"w": np.ones((2, 3), np.float32)})
    with pytest.raises(P.FormatError):
        P.decode_checkpoint(data[:30])
    with pytest.raises(P.TruncatedFile):
        P.decode_checkpoint(data[:5])
    with pytest.raises(P.FormatError):
        P.decode_checkpoint(b"NOPE" + data[4:])


def test_checkpoint_tensor_shapes_and_config_text():
    tensors = {"a": np.zeros((2, 3, 1), np.float32), "scalar": np.float32(2.5) * np.ones((), np.float32)}
    text, back = P.decode_checkpoint(P.encode_checkpoint("k=v\n", tensors))
    assert text == "k=v\n"
    assert back["a"].shape == (2, 3, 1) and back["scalar"].shape == () and back["scalar"] == 2.5


# -- run configuration ------------------------------------------------------


def test_run_config_text_round_trip():
    cfg = golden_cases.run_config()
    assert P.RunConfig.from_text(cfg.to_text()) == cfg
    assert P.RunConfig.from_text("") == P.RunConfig()


def test_run_config_parsing():
    cfg = P.RunConfig.from_text("# comment\nseed = 4\nsize=32, 32\nablate=lg ls\nsigned_segment_space=yes\n")
    assert cfg.seed == 4 and cfg.size == (32, 32) and cfg.ablate == ("lg", "ls") and cfg.signed_segment_space
    assert cfg.model_config().input_size == (32, 32)
    assert cfg.loss_config().disabled == frozenset({"lg", "ls"})


@pytest.mark.parametrize("text", ["bogus=1\n", "seed=abc\n", "no equals sign\n", "straight_through=maybe\n"])
def test_run_config_rejects_bad_text(text):
    with pytest.raises(P.FormatError):
        P.RunConfig.from_text(text)


# -- golden files -----------------------------------------------------------


@pytest.mark.parametrize("name", ["scene.ppm", "labels.pgm", "config.txt", "model.ckpt"])
def test_golden_files_bit_exact(name):
    expected = (golden_cases.GOLDEN / name).read_bytes()
    assert golden_cases.files()[name] == expected


def test_golden_files_decode_and_reencode(tmp_path):
    g = golden_cases.GOLDEN
    img = P.read_image(g / "scene.ppm")
    P.write_image(tmp_path / "scene.ppm", img)
    assert (tmp_path / "scene.ppm").read_bytes() == (g / "scene.ppm").read_bytes()
    lab = P.read_labels(g / "labels.pgm")
    P.write_labels(tmp_path / "labels.pgm", lab)
    assert (tmp_path / "labels.pgm").read_bytes() == (g / "labels.pgm").read_bytes()
    cfg = P.RunConfig.load(g / "config.txt")
    assert cfg.to_text().encode() == (g / "config.txt").read_bytes()
    state = P.load_checkpoint(g / "model.ckpt")
    P.save_checkpoint(state, tmp_path / "model.ckpt")
    assert (tmp_path / "model.ckpt").read_bytes() == (g / "model.ckpt").read_bytes()
