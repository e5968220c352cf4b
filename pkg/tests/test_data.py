import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchfeas import pnm
from patchfeas.archspec import LayerSpec, NetworkSpec, load_spec
from patchfeas.segnet.data import NUM_CLASSES, gen_shapes_dataset, load_dataset, save_dataset
from patchfeas.segnet.engine import Network, init_params
from patchfeas.segnet.train import TrainConfig, pixel_accuracy, train


# -- PNM -------------------------------------------------------------------------


@settings(max_examples=30)
@given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2**32 - 1))
def test_pnm_round_trip(h, w, color, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3) if color else (h, w), dtype=np.uint8)
    np.testing.assert_array_equal(pnm.decode(pnm.encode(img)), img)


def test_pnm_header_comments():
    data = b"P5\n# a comment\n2 1\n# another\n255\n\x07\x09"
    np.testing.assert_array_equal(pnm.decode(data), [[7, 9]])


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n1 2 3", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P6\n1"])
def test_pnm_rejects(blob):
    with pytest.raises(pnm.PNMError):
        pnm.decode(blob)


def test_float_conversion_round_trip():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    np.testing.assert_array_equal(pnm.to_uint8(pnm.from_uint8(raw)), raw)


# -- synthetic shapes ------------------------------------------------------------


def test_dataset_is_deterministic():
    a = gen_shapes_dataset(5, 32, seed=4)
    b = gen_shapes_dataset(5, 32, seed=4)
    c = gen_shapes_dataset(5, 32, seed=5)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)


def test_dataset_content():
    ds = gen_shapes_dataset(40, 64, seed=0)
    assert ds.images.shape == (40, 3, 64, 64) and ds.images.dtype == np.float32
    assert ds.labels.max() < NUM_CLASSES
    assert set(np.unique(ds.labels)) == set(range(NUM_CLASSES))
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    # every image holds at least one shape
    assert all((lab > 0).any() for lab in ds.labels)


def test_prefix_stable_across_counts():
    np.testing.assert_array_equal(gen_shapes_dataset(3, 32, 1).images, gen_shapes_dataset(6, 32, 1).images[:3])


def test_small_images_rejected():
    with pytest.raises(ValueError):
        gen_shapes_dataset(1, 16)


def test_save_load_bit_identical(tmp_path):
    ds = gen_shapes_dataset(4, 32, seed=9)
    written = save_dataset(ds, tmp_path)
    assert len(written) == 9
    back = load_dataset(tmp_path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.seed == 9


# -- training --------------------------------------------------------------------


def tiny_spec():
    return NetworkSpec("tiny", (3, 32, 32), (
        LayerSpec("conv", (3, 3), 1, 3, 4), LayerSpec("relu"), LayerSpec("conv", (1, 1), 1, 4, 4),
    ))


def test_zero_learning_rate_keeps_weights():
    ds = gen_shapes_dataset(8, 32)
    params, hist = train(tiny_spec(), ds, cfg=TrainConfig(epochs=1, lr=0.0))
    assert params.to_bytes() == init_params(tiny_spec(), 0).to_bytes()
    assert len(hist.train_loss) == 1


def test_training_is_deterministic():
    ds = gen_shapes_dataset(16, 32)
    cfg = TrainConfig(epochs=2, lr=0.05, seed=3)
    a, ha = train(tiny_spec(), ds, cfg=cfg)
    b, hb = train(tiny_spec(), ds, cfg=cfg)
    assert a.to_bytes() == b.to_bytes()
    assert ha.train_loss == hb.train_loss


def test_training_reduces_loss():
    ds = gen_shapes_dataset(32, 32)
    _, hist = train(tiny_spec(), ds, cfg=TrainConfig(epochs=4, lr=0.05))
    assert hist.train_loss[-1] < hist.train_loss[0]


def test_train_rejects_wrong_output_width():
    spec = NetworkSpec("bad", (3, 32, 32), (LayerSpec("conv", (3, 3), 1, 3, 5),))
    with pytest.raises(ValueError):
        train(spec, gen_shapes_dataset(2, 32), cfg=TrainConfig(epochs=1))


def test_pixel_accuracy_bounds():
    ds = gen_shapes_dataset(4, 64)
    acc = pixel_accuracy(Network(init_params(load_spec("unet_toy"), 0)), ds)
    assert 0.0 <= acc <= 1.0


def test_count_zero_is_empty():
    ds = gen_shapes_dataset(0, 32)
    assert len(ds) == 0 and ds.images.shape == (0, 3, 32, 32)


def test_labels_follow_topmost_shape():
    # pixels whose colour differs strongly from the background are labelled as a shape
    ds = gen_shapes_dataset(20, 64, seed=2)
    for img, lab in zip(ds.images, ds.labels):
        bg = np.median(img[:, lab == 0], axis=1)
        far = np.abs(img - bg[:, None, None]).mean(axis=0) > 0.2
        assert (lab[far] > 0).mean() > 0.99
