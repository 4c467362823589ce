import numpy as np
import pytest

from decentflow import datasets as D
from decentflow import denoiser as dn
from decentflow.datafile import write_samples


def test_two_component_labels_balanced():
    ss = D.make_dataset(D.ToySpec(components=2, samples=1000, shape=(3,)))
    assert ss.samples.shape == (1000, 3)
    n1 = int(ss.labels.sum())
    assert abs(n1 - 500) <= 3 * np.sqrt(1000 * 0.25)


def test_fixed_seed_identical_files(tmp_path):
    spec = D.ToySpec(samples=64, seed=11)
    write_samples(D.make_dataset(spec), tmp_path / "a")
    write_samples(D.make_dataset(spec), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    write_samples(D.make_dataset(D.ToySpec(samples=64, seed=12)), tmp_path / "c")
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


def test_grid_shapes_match_nano_latent():
    ss = D.make_dataset(D.ToySpec(kind="grid-shapes", components=4, samples=20))
    assert ss.sample_shape == dn.preset("dit-nano").input_shape
    # components differ by where their square sits
    means = D.component_means(D.ToySpec(kind="grid-shapes", components=4))
    assert len({tuple(np.flatnonzero(np.abs(m).sum(axis=0))) for m in means}) == 4


def test_held_out_draws_differ_from_training():
    spec = D.ToySpec(samples=32)
    a, _ = D.sample(spec, 32)
    b, _ = D.sample(spec, 32, "held-out")
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, D.make_dataset(spec).samples)


def test_samples_are_float32_representable():
    x = D.make_dataset(D.ToySpec(samples=8)).samples
    np.testing.assert_array_equal(x, x.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("kw", [dict(kind="spirals"), dict(components=0), dict(samples=0),
                                dict(kind="grid-shapes", shape=(16,)), dict(components=2, weights=(1.0,))])
def test_invalid_spec(kw):
    with pytest.raises(D.ConfigError):
        D.ToySpec(**kw)


def test_spec_roundtrip():
    spec = D.ToySpec(components=3, weights=(1, 2, 3), shape=(2, 4, 4))
    assert D.ToySpec.from_dict(spec.to_dict()) == spec
