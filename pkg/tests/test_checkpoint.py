import zipfile

import numpy as np
import pytest

from gifl.checkpoint import check_compatible, config_hash, load_archive, save_archive
from gifl.errors import FormatError, VersionError


def _arrays():
    rng = np.random.default_rng(0)
    return {"b.weight": rng.standard_normal((3, 4)).astype(np.float32), "a": np.arange(5)}


def test_round_trip(tmp_path):
    save_archive(tmp_path / "c.npz", _arrays(), {"step": 3})
    arrays, header = load_archive(tmp_path / "c.npz")
    assert set(arrays) == {"a", "b.weight"}
    for k, v in _arrays().items():
        np.testing.assert_array_equal(arrays[k], v)
        assert arrays[k].dtype == v.dtype
    assert header["step"] == 3 and header["shapes"]["b.weight"] == [3, 4]


def test_bytes_are_content_addressed(tmp_path):
    save_archive(tmp_path / "1.npz", _arrays(), {"x": 1})
    rev = dict(reversed(list(_arrays().items())))
    save_archive(tmp_path / "2.npz", rev, {"x": 1})
    assert (tmp_path / "1.npz").read_bytes() == (tmp_path / "2.npz").read_bytes()


def test_numpy_can_read_members(tmp_path):
    save_archive(tmp_path / "c.npz", _arrays(), {})
    with np.load(tmp_path / "c.npz") as data:
        np.testing.assert_array_equal(data["a"], np.arange(5))


def test_bad_archives(tmp_path):
    (tmp_path / "x.npz").write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_archive(tmp_path / "x.npz")
    with zipfile.ZipFile(tmp_path / "y.npz", "w") as zf:
        zf.writestr("a.npy", b"")
    with pytest.raises(FormatError):
        load_archive(tmp_path / "y.npz")
    save_archive(tmp_path / "z.npz", {}, {})
    with zipfile.ZipFile(tmp_path / "z.npz", "w") as zf:
        zf.writestr("header.json", '{"format_version": 99}')
    with pytest.raises(VersionError):
        load_archive(tmp_path / "z.npz")


def test_config_hash_guard():
    cfg = {"uflt": {"dim": 16}, "encoder": {"dim": 16}}
    header = {"config_hash": config_hash(cfg)}
    check_compatible(header, {"encoder": {"dim": 16}, "uflt": {"dim": 16}})
    with pytest.raises(VersionError, match=config_hash(cfg)):
        check_compatible(header, {"uflt": {"dim": 32}, "encoder": {"dim": 16}})
