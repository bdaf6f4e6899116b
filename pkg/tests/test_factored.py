import dataclasses
import struct

import numpy as np
import pytest

from tnlcfrs.factored import (discontinuity_mass, from_explicit, precompute, random_factored,
                              validate_factors)
from tnlcfrs.grammar import GrammarDims, NumericError, materialize, normalize_random, validate
from tnlcfrs.neural import (SHARED_MLPS, forward, load_factored, load_params, save_factored,
                            save_params, xavier_init, zero_params)

DIMS = GrammarDims(2, 2, 3, 5)
RANKS = (3, 2, 3, 2)


def arrays(fg):
    return {k: np.asarray(v) for k, v in fg.factors().items()}


def test_zero_params_give_uniform_factors():
    fg = forward(zero_params(DIMS, RANKS, 8))
    r1, r2, r3, r4 = RANKS
    np.testing.assert_allclose(fg.U1, 1 / (r1 + r2), rtol=1e-15)
    np.testing.assert_allclose(fg.U2, 1 / (r1 + r2), rtol=1e-15)
    np.testing.assert_allclose(fg.U3, 1 / (r3 + r4), rtol=1e-15)
    np.testing.assert_allclose(fg.V1, 1 / DIMS.m, rtol=1e-15)
    np.testing.assert_allclose(fg.W2, 1 / DIMS.m2, rtol=1e-15)
    np.testing.assert_allclose(fg.P, 0.25, rtol=1e-15)
    np.testing.assert_allclose(fg.s, 1 / DIMS.m1, rtol=1e-15)
    np.testing.assert_allclose(fg.Q, 1 / DIMS.v, rtol=1e-15)


def test_prior_discontinuity_mass_at_zero_params():
    fg = forward(zero_params(DIMS, RANKS, 8))
    r1, r2, r3, r4 = RANKS
    mass = discontinuity_mass(fg)
    assert mass["n1"] == pytest.approx(r2 / (r1 + r2), abs=1e-15)
    assert mass["n2"] == pytest.approx(r4 / (r3 + r4), abs=1e-15)


@pytest.mark.parametrize("name,factors", [
    ("fV13.b2", ("V1", "V3")), ("fW24.b2", ("W2", "W4")),
    ("fP.bo", ("P",)), ("fs.bo", ("s",)), ("fQ.bo", ("Q",)),
])
def test_shift_invariance(name, factors):
    params = xavier_init(DIMS, RANKS, 8, seed=1, dtype=np.float64)
    base = arrays(forward(params))
    shifted = dict(params.arrays)
    if name.endswith(".bo"):
        shifted[name] = shifted[name] + 3.7       # same constant for every output
    else:
        # feature shift adds <b, R_j> to every row of column j
        shifted[name] = shifted[name] + np.random.default_rng(0).normal(size=8)
    moved = arrays(forward(params.replace(shifted)))
    for f in factors:
        np.testing.assert_allclose(moved[f], base[f], rtol=0, atol=1e-12)


def test_xavier_seed_seven_is_valid():
    params = xavier_init(DIMS, RANKS, 16, seed=7, dtype=np.float64)
    fg = forward(params)
    assert validate_factors(fg).violations == []
    assert not validate(materialize(fg))


def test_xavier_is_deterministic():
    a = xavier_init(DIMS, RANKS, 16, seed=7)
    b = xavier_init(DIMS, RANKS, 16, seed=7)
    for k in a.arrays:
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()
    fa, fb = arrays(forward(a)), arrays(forward(b))
    for k in fa:
        assert fa[k].tobytes() == fb[k].tobytes()


def test_shared_mlps_are_single_objects():
    params = zero_params(DIMS, RANKS, 4)
    for name in SHARED_MLPS:
        assert f"{name}.W1" in params.arrays
    assert not any(k.startswith(("fU1.", "fU2.", "fV1.", "fW3.")) for k in params.arrays)


def test_forward_checks_dims():
    with pytest.raises(ValueError):
        forward(zero_params(DIMS, RANKS, 4), dims=GrammarDims(3, 2, 3, 5))


def test_forward_reports_non_finite_scores():
    params = zero_params(DIMS, RANKS, 4)
    bad = dict(params.arrays)
    bad["fs.bo"] = np.array([np.inf, 0.0])
    with pytest.raises(NumericError, match="s"):
        forward(params.replace(bad))


def test_large_scores_do_not_overflow():
    params = zero_params(DIMS, RANKS, 4)
    big = dict(params.arrays)
    big["fQ.bo"] = np.linspace(0, 5000, DIMS.v)
    fg = forward(params.replace(big))
    assert np.isfinite(fg.Q).all()
    assert not validate_factors(fg)


def test_zeroed_column_is_flagged():
    fg = random_factored(DIMS, RANKS, 0)
    V1 = np.array(fg.V1)
    V1[:, 1] = 0.0
    report = validate_factors(dataclasses.replace(fg, V1=V1))
    assert [(v.rule, v.index) for v in report] == [("V1 column", (1,))]
    assert report.violations[0].residual == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_valid_factors_materialize_to_valid_grammar(seed):
    fg = random_factored(GrammarDims(2, 3, 2, 4), (2, 3, 1, 2), seed)
    assert not validate_factors(fg)
    assert not validate(materialize(fg))


def test_uniform_kernel_closed_form():
    fg = forward(zero_params(DIMS, RANKS, 8))
    ks = precompute(fg)
    r1, r2 = RANKS[:2]
    want = DIMS.m1 * (1 / DIMS.m) * (1 / (r1 + r2))
    for o in (1, 2, 3, 4):
        np.testing.assert_allclose(ks.F[o], want, rtol=1e-14)
        assert ks.F[o].shape == (RANKS[o - 1], r1)
        assert ks.G[o].shape == (RANKS[o - 1], r2)


def test_kernels_match_definitions():
    fg = random_factored(DIMS, RANKS, 3)
    ks = precompute(fg)
    m1 = DIMS.m1
    np.testing.assert_allclose(ks.F[2], fg.V2[:m1].T @ fg.U1, rtol=1e-14)
    np.testing.assert_allclose(ks.I[3], fg.W3[:m1].T @ fg.U2, rtol=1e-14)
    np.testing.assert_allclose(ks.K[4], fg.W4.T @ fg.U4, rtol=1e-14)
    np.testing.assert_allclose(ks.R1, fg.s @ fg.U1, rtol=1e-14)
    np.testing.assert_allclose(ks.R2, fg.s @ fg.U2, rtol=1e-14)
    for name in ("F", "G", "H", "I", "J", "K"):
        for mat in getattr(ks, name).values():
            assert (mat >= 0).all() and (mat <= DIMS.m).all()


def test_kernels_are_bitwise_deterministic():
    fg = random_factored(DIMS, RANKS, 3)
    a, b = precompute(fg), precompute(fg)
    for o in a.F:
        assert a.F[o].tobytes() == b.F[o].tobytes()


def test_kernel_perturbation_bound():
    fg = random_factored(DIMS, RANKS, 4)
    m1 = DIMS.m1
    rng = np.random.default_rng(0)
    for _ in range(20):
        dV = rng.normal(scale=1e-3, size=fg.V1.shape)
        moved = precompute(dataclasses.replace(fg, V1=fg.V1 + dV))
        dF = moved.F[1] - precompute(fg).F[1]
        lhs = np.linalg.norm(dF, 2)
        rhs = np.linalg.norm(dV[:m1], 2) * np.linalg.norm(fg.U1, 2)
        assert lhs <= rhs * (1 + 1e-12)


def test_from_explicit_round_trip():
    g = normalize_random(DIMS, 7)
    fg = from_explicit(g)
    assert not validate_factors(fg)
    back = materialize(fg)
    for name, arr in g.arrays().items():
        np.testing.assert_allclose(back.arrays()[name], arr, rtol=0, atol=1e-15)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    params = xavier_init(DIMS, RANKS, 8, seed=2, dtype=dtype)
    path = tmp_path / "m.npm"
    save_params(path, params, extra={"note": np.arange(3.0)})
    raw = path.read_bytes()
    assert raw.startswith(b"LCFRS2-NPM\0")
    version, code = struct.unpack_from("<II", raw, 11)
    assert version == 1 and code == (0 if dtype == np.float32 else 1)
    back, extra = load_params(path)
    assert back.dtype == np.dtype(dtype)
    for k, v in params.arrays.items():
        assert np.array_equal(back.arrays[k], v)
    assert np.array_equal(extra["note"], np.arange(3.0))


def test_factored_snapshot_round_trip(tmp_path):
    fg = forward(xavier_init(DIMS, RANKS, 8, seed=3, dtype=np.float64))
    path = tmp_path / "fg.npm"
    save_factored(path, fg)
    back = load_factored(path)
    for k, v in arrays(fg).items():
        assert np.array_equal(np.asarray(getattr(back, k)), v)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "x.npm"
    path.write_bytes(b"LCFRS2-EXP\0" + bytes(100))
    with pytest.raises(ValueError):
        load_params(path)
