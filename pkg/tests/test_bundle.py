import numpy as np
import pytest

from tvcs.bundle import (
    BundleError,
    ChecksumError,
    VersionMismatchError,
    _PREFIX,
    load_bundle,
    load_problem,
    load_state,
    save_bundle,
    save_problem,
    save_state,
)
from tvcs.problems import make_problem, shepp_logan
from tvcs.solvers import SolverConfig, initial_state, run


@pytest.fixture
def problem():
    return make_problem(shepp_logan((16, 16)).image, 0.3, seed=0)


def test_roundtrip_bit_exact(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.integers(0, 9, 5), "c": rng.standard_normal(4) + 1j}
    p = save_bundle(tmp_path / "x.tvcs", arrays, {"k": 1})
    b = load_bundle(p)
    assert b.meta == {"k": 1}
    for k, v in arrays.items():
        assert b.arrays[k].dtype == v.dtype
        assert b.arrays[k].tobytes() == v.tobytes()


def test_problem_roundtrip(tmp_path, problem):
    p = save_problem(tmp_path / "p.tvcs", problem)
    prob, _ = load_problem(p)
    np.testing.assert_array_equal(prob.mask.observed, problem.mask.observed)
    assert prob.mask.data.tobytes() == problem.mask.data.tobytes()
    assert prob.truth.tobytes() == problem.truth.tobytes()
    assert prob.mask.seed == 0 and prob.mask.fraction == 0.3


def test_state_roundtrip(tmp_path, problem):
    res = run(problem, SolverConfig("admm", tau=0.1, max_iters=5))
    p = save_state(tmp_path / "s.tvcs", res.state)
    st, _ = load_state(p)
    assert st.method == "admm" and st.k == 5
    np.testing.assert_array_equal(st.x, res.state.x)
    with pytest.raises(BundleError):
        load_problem(p)


@pytest.mark.parametrize("cut", [4, _PREFIX.size + 3, -1, -100])
def test_truncation(tmp_path, problem, cut):
    p = save_problem(tmp_path / "p.tvcs", problem)
    raw = p.read_bytes()
    p.write_bytes(raw[:cut])
    with pytest.raises(ChecksumError):
        load_problem(p)


def test_corruption(tmp_path, problem):
    p = save_problem(tmp_path / "p.tvcs", problem)
    raw = bytearray(p.read_bytes())
    raw[-10] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_bundle(p)


def test_version_mismatch(tmp_path, problem):
    p = save_problem(tmp_path / "p.tvcs", problem)
    raw = bytearray(p.read_bytes())
    magic, _, hlen = _PREFIX.unpack_from(raw)
    raw[:_PREFIX.size] = _PREFIX.pack(magic, 99, hlen)
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_bundle(p)


def test_not_a_bundle(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"x" * 64)
    with pytest.raises(BundleError):
        load_bundle(p)
    with pytest.raises(BundleError):
        load_bundle(tmp_path / "missing")


def test_narrowing(tmp_path, rng):
    x = rng.standard_normal(100)
    p = save_bundle(tmp_path / "n.tvcs", {"x": x, "i": np.arange(3)})
    b = load_bundle(p, precision="f32")
    assert b.arrays["x"].dtype == np.float32
    assert b.arrays["i"].dtype == np.arange(3).dtype
    assert b.narrowing["x"] == pytest.approx(np.max(np.abs(x - x.astype(np.float32))))
    assert 0 < b.narrowing["x"] < 1e-6


def test_f32_state_runs(tmp_path, problem):
    st = initial_state("pdhg", problem.mask, 0.1)
    p = save_state(tmp_path / "s.tvcs", st)
    st32, b = load_state(p, precision="f32")
    assert st32.u.dtype == np.float32
    res = run(problem, SolverConfig("pdhg", tau=0.1, max_iters=3, precision="f32"), state=st32)
    assert res.state.u.dtype == np.float32
