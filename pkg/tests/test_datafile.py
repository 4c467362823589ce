import numpy as np
import pytest

from decentflow import datasets as D
from decentflow.datafile import DataFileError, SampleSet, read_data_header, read_samples, sample_digests, write_samples


def test_roundtrip(tmp_path):
    ss = D.make_dataset(D.ToySpec(components=3, samples=50, seed=4))
    write_samples(ss, tmp_path / "d.bin")
    back = read_samples(tmp_path / "d.bin")
    np.testing.assert_array_equal(back.samples, ss.samples)
    np.testing.assert_array_equal(back.labels, ss.labels)
    np.testing.assert_array_equal(back.global_ids, np.arange(50))
    head = read_data_header(tmp_path / "d.bin")
    assert head["shape"] == [4, 8, 8] and head["count"] == 50 and head["seed"] == 4


def test_corruption_detected(tmp_path):
    write_samples(SampleSet(np.ones((4, 2))), tmp_path / "d.bin")
    blob = bytearray((tmp_path / "d.bin").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "d.bin").write_bytes(bytes(blob))
    with pytest.raises(DataFileError):
        read_samples(tmp_path / "d.bin")


def test_sample_digests_distinguish_rows():
    d = sample_digests(np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]))
    assert d[0] == d[2] != d[1]
