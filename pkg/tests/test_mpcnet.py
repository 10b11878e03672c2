import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cpcl.mpcnet import (
    DOMAINS,
    REFERENCE,
    TOLERANCE,
    DomainError,
    MPCEngine,
    PartyId,
    Topology,
    Tracer,
    TripleReuseError,
    joint_uniform,
    pair_seeds,
    pairwise_mask,
    poly_gadget,
    read_trace,
    reconstruct,
    reconstruct_raw,
    secure_clip_factor,
    share,
)
from cpcl.mpcnet.trace import cost_report, scaling_exponent
from cpcl.ringnum import CONTINUOUS_CODEC, DISCRETE_CODEC, SHARE_CODEC, FixedCodec, encode_array
from cpcl.sampler import UniformSource

CLIENT = PartyId("client", 0)


def engine(m=2, seed=0, codec=SHARE_CODEC, debug=False):
    return MPCEngine(m, UniformSource(seed, 3), codec, debug=debug)


def test_party_ids():
    assert str(PartyId("server", 2)) == "server2"
    with pytest.raises(ValueError):
        PartyId("observer", 0)
    with pytest.raises(ValueError):
        PartyId("client", -1)
    topo = Topology(4, 2, semi_trusted=True)
    assert len(topo.clients) == 4 and topo.helper not in topo.servers
    assert Topology(4, 2).helper is None


def test_share_round_trip_examples():
    src = UniformSource(1)
    parts = share([42.0], 3, src)
    assert reconstruct(parts) == pytest.approx([42.0])
    zero = share(np.zeros(8), 3, src)
    assert np.all(reconstruct_raw(zero) == 0)
    assert np.any(zero[0].values != 0)
    with pytest.raises(ValueError):
        share([1.0], 1, src)


def test_missing_share_names_holder():
    parts = share(np.ones(3), 3, UniformSource(1))
    with pytest.raises(ValueError, match="server1"):
        reconstruct([parts[0], parts[2]])


@pytest.mark.parametrize("codec", [CONTINUOUS_CODEC, DISCRETE_CODEC, SHARE_CODEC])
def test_round_trip_every_codec(codec):
    rng = np.random.default_rng(0)
    lim = min(codec.max_value, 1000.0)
    x = rng.uniform(-lim, lim, 10_000)
    parts = share(x, 3, UniformSource(2), codec)
    np.testing.assert_array_equal(reconstruct_raw(parts), encode_array(x, codec))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.lists(st.integers(-2 ** 20, 2 ** 20), min_size=1, max_size=20), st.integers(0, 2 ** 31))
def test_share_linearity(m, ints, seed):
    x = np.asarray(ints, dtype=np.float64)
    a = share(x, m, UniformSource(seed, 1))
    b = share(2 * x, m, UniformSource(seed, 2))
    codec = SHARE_CODEC
    summed = [type(s)(s.owner, (s.values + t.values) & np.uint64(codec.mask), codec, s.index, s.of)
              for s, t in zip(a, b)]
    np.testing.assert_array_equal(reconstruct(summed), 3 * x)


def test_proper_subset_of_shares_is_uniform():
    # 10^5 sharings of the same secret; the top byte of share 0 is uniform
    codec = CONTINUOUS_CODEC
    parts = share(np.full(100_000, 0.5), 2, UniformSource(4), codec)
    top = (parts[0].values >> np.uint64(24)).astype(np.int64)
    counts = np.bincount(top, minlength=256)
    assert stats.chisquare(counts).pvalue > 0.01


def test_pairwise_mask_examples():
    codec = DISCRETE_CODEC
    seeds = pair_seeds(2, UniformSource(5))
    m1 = pairwise_mask(encode_array([5.0], codec), 0, [0, 1], seeds, codec)
    m2 = pairwise_mask(encode_array([7.0], codec), 1, [0, 1], seeds, codec)
    assert int((m1.values[0] + m2.values[0]) & np.uint64(codec.mask)) == 12
    alone = pairwise_mask(encode_array([3.0], codec), 0, [0], {}, codec)
    assert int(alone.values[0]) == 3
    with pytest.raises(ValueError, match="no mask seed"):
        pairwise_mask(encode_array([3.0], codec), 0, [0, 1], {}, codec)


def test_pairwise_masks_cancel_for_ten_clients():
    codec = CONTINUOUS_CODEC
    rng = np.random.default_rng(1)
    xs = rng.uniform(-2, 2, (10, 50))
    seeds = pair_seeds(10, UniformSource(6))
    total = np.zeros(50, dtype=np.uint64)
    for i in range(10):
        mv = pairwise_mask(encode_array(xs[i], codec), i, range(10), seeds, codec, round_id=3)
        assert np.any(mv.values != encode_array(xs[i], codec))
        total = (total + mv.values) & np.uint64(codec.mask)
    expected = np.zeros(50, dtype=np.uint64)
    for i in range(10):
        expected = (expected + encode_array(xs[i], codec)) & np.uint64(codec.mask)
    np.testing.assert_array_equal(total, expected)


def test_beaver_examples():
    e = engine(codec=FixedCodec(32, 0))
    x = e.input(CLIENT, [6.0], frac=0)
    y = e.input(CLIENT, [7.0], frac=0)
    assert e.peek(e.mul(x, y)) == pytest.approx([42.0])
    e = engine()
    h = e.input(CLIENT, [0.5])
    assert abs(e.peek(e.mul(h, h))[0] - 0.25) <= 2 ** -16


def test_beaver_random_pairs_within_one_ulp():
    e = engine(m=3)
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-100, 100, (2, 10_000))
    got = e.peek(e.mul(e.input(CLIENT, a), e.input(CLIENT, b)))
    exact = np.rint(a * 2 ** 16) * np.rint(b * 2 ** 16) / 2 ** 32
    assert np.max(np.abs(got - exact)) <= 2 ** -16


def test_beaver_round_and_message_counts():
    e = engine(m=3)
    x = e.input(CLIENT, np.ones(5))
    before = {s: (e.tracer.rows[("Setup", str(s))].rounds, e.tracer.rows[("Setup", str(s))].bytes)
              for s in e.servers if ("Setup", str(s)) in e.tracer.rows}
    assert not before
    e.mul(x, x, out_frac=32)  # no truncation, so just the product
    for s in e.servers:
        row = e.tracer.rows[("Setup", str(s))]
        assert row.rounds == 1
        assert row.messages == 2
        assert row.bytes == 2 * 2 * 5 * 8


def test_triple_reuse_detected():
    e = engine()
    t = e.dealer.triple((3,))
    e.dealer.consume(t)
    with pytest.raises(TripleReuseError):
        e.dealer.consume(t)


def test_matmul_matches_plaintext():
    e = engine()
    rng = np.random.default_rng(3)
    a, b = rng.uniform(-1, 1, (6, 4)), rng.uniform(-1, 1, (4, 3))
    got = e.peek(e.matmul(e.input(CLIENT, a), e.input(CLIENT, b)))
    np.testing.assert_allclose(got, a @ b, atol=1e-4)
    with pytest.raises(ValueError):
        e.matmul(e.input(CLIENT, a), e.input(CLIENT, a))


def test_truncation_domain_checked_in_debug():
    e = engine(debug=True)
    big = e.constant([1.5 * 2.0 ** 46])  # raw value above 2^62
    with pytest.raises(DomainError):
        e.truncate(big, 4)


def test_reveal_charges_receivers():
    e = engine(m=3)
    x = e.input(CLIENT, np.arange(4.0))
    got = e.reveal(x, [CLIENT, PartyId("client", 1)])
    np.testing.assert_allclose(got, np.arange(4.0))
    assert e.tracer.rows[("Setup", "server0")].messages == 2


def _uniform_chisquare(u, bins=100):
    counts = np.histogram(u, bins=bins, range=(0, 1))[0]
    return stats.chisquare(counts).pvalue


def test_joint_uniform_with_one_honest_server():
    e = engine(m=3)
    adversarial = {1: np.uint64(0x5555), 2: np.uint64(0x7FFF)}
    u = e.peek(joint_uniform(e, (100_000,), contributions=adversarial))
    assert u.min() > 0 and u.max() < 1
    assert _uniform_chisquare(u) > 0.01


def test_joint_uniform_all_zero_is_clamped_and_flagged():
    e = engine()
    u = e.peek(joint_uniform(e, (10,), contributions={0: np.uint64(0), 1: np.uint64(0)}))
    assert np.all(u == 2.0 ** -16)
    assert e.tracer.flags["uniform_clamp"] == 10


def test_joint_uniform_is_replayable_and_fresh():
    a, b = engine(seed=4), engine(seed=4)
    ua, ub = joint_uniform(a, (64,)), joint_uniform(b, (64,))
    np.testing.assert_array_equal(a.peek(ua), b.peek(ub))
    assert not np.array_equal(a.peek(ua), a.peek(joint_uniform(a, (64,))))


def test_gadget_examples():
    e = engine()
    assert e.peek(poly_gadget(e, "sqrt", e.input(CLIENT, [4.0])))[0] == pytest.approx(2.0, abs=1e-3)
    assert e.peek(poly_gadget(e, "log", e.input(CLIENT, [1.0])))[0] == pytest.approx(0.0, abs=1e-3)
    with pytest.raises(ValueError, match="unknown gadget"):
        poly_gadget(e, "tanh", e.input(CLIENT, [1.0]))


@pytest.mark.parametrize("fn", sorted(DOMAINS))
def test_gadget_sweep(fn):
    lo, hi = DOMAINS[fn]
    x = np.geomspace(lo, hi, 1000) if lo > 0 else np.linspace(lo, hi, 1000)
    e = engine()
    got = e.peek(poly_gadget(e, fn, e.input(CLIENT, x)))
    want = REFERENCE[fn](np.rint(x * 2 ** 16) / 2 ** 16)
    assert np.max(np.abs(got - want)) <= TOLERANCE


def test_gadget_product_rounds():
    # degree 9 needs ceil(log2 9) = 4 rounds of products for the powers
    from cpcl.mpcnet.gadgets import powers

    e = engine()
    t = e.input(CLIENT, [0.5])
    before = e.tracer.rows.get(("Setup", "server0"))
    start = before.rounds if before else 0
    pw = powers(e, t, 9)
    assert e.peek(pw[-1])[0] == pytest.approx(0.5 ** 9, abs=1e-4)
    # each product round is one Beaver exchange plus one truncation opening
    assert e.tracer.rows[("Setup", "server0")].rounds - start == 4 * 2


def test_gadget_domain_errors():
    e = engine(debug=True)
    with pytest.raises(DomainError, match="outside declared domain"):
        poly_gadget(e, "log", e.input(CLIENT, [-1.0]))
    e = engine()
    poly_gadget(e, "sqrt", e.input(CLIENT, [2.0 ** 12]))
    assert e.tracer.flags["sqrt_out_of_domain"] == 1


def test_clip_factor_examples():
    e = engine()
    f = e.peek(secure_clip_factor(e, e.input(CLIENT, [25.0, 0.25, 1.0]), 1.0))
    assert f[0] == pytest.approx(0.2, abs=5e-3)
    assert f[1] == pytest.approx(1.0, abs=5e-3)
    assert f[2] == pytest.approx(1.0, abs=5e-3)
    zero = e.peek(secure_clip_factor(e, e.constant([0.0]), 1.0, mode="oracle"))
    assert zero[0] == 1.0
    with pytest.raises(ValueError):
        secure_clip_factor(e, e.constant([1.0]), 0.0)
    with pytest.raises(ValueError):
        secure_clip_factor(e, e.constant([1.0]), 1.0, mode="sharp")


def test_clip_factor_bounds_norms():
    rng = np.random.default_rng(5)
    norms = np.exp(rng.uniform(np.log(0.01), np.log(100), 1000))
    e = engine()
    f = e.peek(secure_clip_factor(e, e.input(CLIENT, norms ** 2), 1.0))
    exact = np.minimum(1.0, 1.0 / norms)
    assert np.max(np.abs(f - exact)) <= 5e-3
    assert np.all(f * norms <= 1.0 * (1 + 1e-2))
    oracle = engine()
    g = oracle.peek(secure_clip_factor(oracle, oracle.input(CLIENT, norms ** 2), 1.0, mode="oracle"))
    np.testing.assert_allclose(g, exact, atol=2e-5)
    assert oracle.tracer.rows[("Setup", "server0")].oracle_calls == 1


def test_trace_bytes_and_csv_round_trip(tmp_path):
    t = Tracer()
    with t.phase("Protect"):
        t.message("client0", 40, count=3)
        t.ops("client0", ring=7)
    with t.phase("Aggregate"):
        t.ops("server0", plain=5)
    with pytest.raises(ValueError):
        with t.phase("Lunch"):
            pass
    row = t.rows[("Protect", "client0")]
    assert row.messages == 3 and row.bytes == 120
    t.write(tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert [(r.phase, r.party, r.bytes) for r in back] == [("Protect", "client0", 120), ("Aggregate", "server0", 0)]
    report = cost_report(t)
    assert report["Protect"]["ops_share"] == pytest.approx(7 / 12)
    assert scaling_exponent(30, 60) == pytest.approx(1.0)


def test_seeded_trace_is_identical():
    def run():
        e = engine(seed=9)
        x = e.input(CLIENT, np.linspace(0.1, 3, 20))
        secure_clip_factor(e, e.mul(x, x), 1.0)
        return e.tracer.to_csv(), e.peek(x)

    (a, xa), (b, xb) = run(), run()
    assert a == b
    np.testing.assert_array_equal(xa, xb)
