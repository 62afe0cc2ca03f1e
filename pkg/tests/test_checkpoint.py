import numpy as np
import pytest

from cec_cnn.arch import ArchitectureSpec, build_network
from cec_cnn.checkpoint import SpecHashMismatch, load_checkpoint, read_manifest, save_checkpoint
from cec_cnn.tensor import Tensor


@pytest.fixture
def perturbed_model():
    m = build_network(ArchitectureSpec(), seed=3)
    rng = np.random.default_rng(0)
    for bn in m.batchnorms():
        bn.running_mean[:] = rng.normal(size=bn.channels)
        bn.running_var[:] = rng.uniform(0.5, 2.0, bn.channels)
        bn.num_batches_tracked = 7
    return m


def test_round_trip_is_bit_exact(tmp_path, perturbed_model):
    save_checkpoint(perturbed_model, tmp_path / "model", {"epoch": "5"})
    back = load_checkpoint(tmp_path / "model")
    a, b = perturbed_model.state(), back.state()
    assert [k for k, _ in a] == [k for k, _ in b]
    for (k, x), (_, y) in zip(a, b):
        assert x.tobytes() == y.tobytes(), k
    assert all(bn.num_batches_tracked == 7 for bn in back.batchnorms())
    x = Tensor(np.random.default_rng(1).random((2, 1, 32, 32), dtype=np.float32))
    perturbed_model.eval()
    back.eval()
    assert perturbed_model(x).data.tobytes() == back(x).data.tobytes()


def test_manifest_layout(tmp_path, perturbed_model):
    save_checkpoint(perturbed_model, tmp_path / "model", {"epoch": "5"})
    header, entries = read_manifest(tmp_path / "model")
    assert header["format"] == "float32-le"
    assert header["meta.epoch"] == "5"
    assert header["spec_hash"] == ArchitectureSpec().spec_hash()
    names = [k for k, _ in perturbed_model.state()]
    assert list(entries) == names
    offset = 0
    for name, arr in perturbed_model.state():
        dims, off, length = entries[name]
        assert dims == arr.shape and off == offset and length == 4 * arr.size
        offset += length
    assert (tmp_path / "model.bin").stat().st_size == offset
    raw = np.fromfile(tmp_path / "model.bin", dtype="<f4")
    first = names[0]
    np.testing.assert_array_equal(raw[:entries[first][2] // 4], dict(perturbed_model.state())[first].ravel())


def test_spec_hash_mismatch(tmp_path, perturbed_model):
    save_checkpoint(perturbed_model, tmp_path / "model")
    with pytest.raises(SpecHashMismatch):
        load_checkpoint(tmp_path / "model", spec=ArchitectureSpec(input_size=64))
    (tmp_path / "model.arch.ini").write_text(ArchitectureSpec(stem_channels=4).to_ini())
    with pytest.raises(SpecHashMismatch):
        load_checkpoint(tmp_path / "model")


def test_save_twice_is_byte_identical(tmp_path, perturbed_model):
    save_checkpoint(perturbed_model, tmp_path / "a")
    save_checkpoint(perturbed_model, tmp_path / "b")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.manifest").read_text().replace("a.bin", "b.bin") == (tmp_path / "b.manifest").read_text()
