import itertools
import math

import pytest

from hiermem.coarsen import RhoSpec, make_representative
from hiermem.core import Unit
from hiermem.errors import (
    CyclicTaskGraph,
    EmptyContent,
    InvalidEpsilon,
    InvalidGroupCount,
    InvalidRatio,
    InvalidTable,
    UnknownVariable,
)
from hiermem.langmodel import BigramLM
from hiermem.measure import (
    JointTable,
    SSReport,
    TierOrder,
    best_estimator_error,
    check_monotonicity,
    check_routing_monotonicity,
    conditional_entropy,
    entropy,
    fano_error_lower_bound,
    fano_max_groups,
    min_depth,
    mutual_information,
    optimal_branching,
    pairwise,
    random_pairwise,
    relabel,
    ss_exact,
    ss_q_exact,
    ss_theta,
    theta_flags,
)
from hiermem.synthworld import gen_routing_task, gen_world, iid_bits_world

BITS2 = JointTable(("X1", "X2"), {(a, b): 0.25 for a in (0, 1) for b in (0, 1)})


def xor(v):
    return v[0] ^ v[1]


# ---------------------------------------------------------------------------
# tables, entropy, MI
# ---------------------------------------------------------------------------


def test_entropy_examples():
    assert entropy(JointTable(("X",), {(i,): 0.25 for i in range(4)}), "X") == 2.0
    assert entropy(JointTable(("X",), {(0,): 1.0}), "X") == 0.0
    assert entropy(JointTable(("X",), {(0,): 0.5, (1,): 0.25, (2,): 0.25}), "X") == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(UnknownVariable):
        entropy(BITS2, "Y")


def test_mutual_information_examples():
    assert mutual_information(BITS2, "X1", "X2") == 0.0
    assert mutual_information(BITS2, "X1", "X1") == pytest.approx(1.0)
    t = BITS2.derive("B", ["X1", "X2"], xor)
    # enumerate: B is uniform, and (X1, X2) determines B
    assert len(t) == 4 and sorted(t.marginal("B").values()) == [0.5, 0.5]
    assert mutual_information(t, ["X1", "X2"], "B") == pytest.approx(1.0, abs=1e-12)
    assert conditional_entropy(t, ["X1", "X2"], "B") == pytest.approx(1.0, abs=1e-12)


def test_table_validation():
    with pytest.raises(InvalidTable):
        JointTable(("X",), {(0,): 0.5, (1,): 0.4})
    with pytest.raises(InvalidTable):
        JointTable(("X",), {(0,): 1.5, (1,): -0.5})
    with pytest.raises(InvalidTable):
        JointTable(("X", "X"), {(0, 0): 1.0})
    with pytest.raises(InvalidTable):
        JointTable(("X",), [((0,), 0.5), ((0,), 0.5)])


def test_table_text_round_trip():
    t = BITS2.derive("B", ["X1", "X2"], xor)
    back = JointTable.loads(t.dumps())
    assert back.variables == t.variables and back.rows == t.rows


# ---------------------------------------------------------------------------
# SS family
# ---------------------------------------------------------------------------


def test_ss_exact_fixtures():
    assert ss_exact(BITS2, ["X1", "X2"], xor) == pytest.approx(0.5, abs=1e-9)
    assert ss_exact(BITS2, ["X1", "X2"], lambda v: v) == pytest.approx(1.0, abs=1e-9)
    assert ss_exact(BITS2, ["X1", "X2"], lambda v: 0) == pytest.approx(0.0, abs=1e-9)
    point = JointTable(("X",), {(1,): 1.0})
    assert ss_exact(point, ["X"], lambda v: 0) == 1.0


def test_ss_q_xor_is_tight():
    res = ss_q_exact(BITS2, ["X1", "X2"], xor, "X1")
    assert res.ss_q == pytest.approx(0.0, abs=1e-12)
    assert res.r_q == pytest.approx(0.5, abs=1e-12)
    assert res.bound == pytest.approx(0.0, abs=1e-12)


def test_ss_q_conventions():
    assert ss_q_exact(BITS2, ["X1", "X2"], lambda v: v, "X2").ss_q == pytest.approx(1.0)
    t = JointTable(("Q", "X"), {(q, x): 0.25 for q in (0, 1) for x in (0, 1)})
    res = ss_q_exact(t, ["X"], lambda v: 0, "Q")
    assert res.ss_q == 1.0 and res.bound is None


def test_ss_report_check():
    assert SSReport(ss=0.5, ss_q=0.2, r_q=0.5, bound=0.0).check() == []
    assert SSReport(ss=0.5, ss_q=0.2, r_q=0.5, bound=0.3).check()


SENTENCES = [
    "the cat sat on the warm mat",
    "a small cat chased the grey mouse",
    "the river runs past the old mill",
    "rain filled the river near the mill",
    "the baker sold fresh bread at dawn",
]
GROUPS = [[0, 1], [2, 3], [4]]
LABELS = ["cat", "river", "bread"]


def _members(g):
    return [Unit(id=f"s{i}", content=SENTENCES[i], entities={LABELS[GROUPS.index(g)]}) for i in g]


@pytest.fixture(scope="module")
def lm():
    return BigramLM(SENTENCES)


def test_ss_theta_spectrum(lm):
    for g in GROUPS:
        mem = _members(g)
        text = [u.content for u in mem]
        rep = {k: make_representative(mem, RhoSpec(k, k=3 if k == "truncate" else None)).content for k in ("concat", "truncate", "label")}
        concat, trunc, label = (ss_theta(text, rep[k], lm) for k in ("concat", "truncate", "label"))
        empty = ss_theta(text, "", lm)
        assert concat >= trunc >= label >= empty
        assert abs(empty) <= 0.05


def test_ss_theta_corrupted_representative(lm):
    for gi, g in enumerate(GROUPS):
        text = [SENTENCES[i] for i in g]
        other = GROUPS[(gi + 1) % len(GROUPS)]
        swapped = " ".join(SENTENCES[i] for i in other)
        assert ss_theta(text, swapped, lm) < ss_theta(text, " ".join(text), lm)


def test_ss_theta_errors_and_flags(lm):
    with pytest.raises(EmptyContent):
        ss_theta(["", " "], "x", lm)
    assert theta_flags(-0.2) == ["negative"]
    assert theta_flags(12.0) == ["unstable"]
    assert theta_flags(0.3) == []


# ---------------------------------------------------------------------------
# monotonicity
# ---------------------------------------------------------------------------


def test_xor_world_entropies():
    rep = check_monotonicity(iid_bits_world(4), [pairwise("xor"), pairwise("xor")])
    assert rep.entropies == pytest.approx([4.0, 2.0, 1.0], abs=1e-12)
    assert rep.ok and rep.lossy == [True, True]
    assert rep.mutual_info == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)


def test_relabel_flagged_non_lossy():
    rep = check_monotonicity(iid_bits_world(3), [relabel(), pairwise("and")])
    assert rep.ok
    assert rep.entropies[0] == pytest.approx(rep.entropies[1])
    assert rep.to_dict()["non_lossy_levels"] == [1]


def _brute_entropy_of_image(world, maps):
    """Push the atom marginal through the maps by explicit enumeration."""
    dist = world.table.marginal(list(world.atom_vars))
    hs = []
    for m in [None] + list(maps):
        if m is not None:
            nxt = {}
            for v, p in dist.items():
                nxt[m(v)] = nxt.get(m(v), 0.0) + p
            dist = nxt
        hs.append(-sum(p * math.log2(p) for p in dist.values() if p > 0))
    return hs


@pytest.mark.parametrize("seed", range(10))
def test_random_worlds_monotone(seed):
    world = gen_world(levels=1, arity=8, emission_entropy=0.3 + 0.05 * seed, seed=seed)
    maps = [random_pairwise(4, seed), random_pairwise(2, seed + 1), random_pairwise(1, seed + 2)]
    rep = check_monotonicity(world, maps)
    assert rep.ok, rep.violations
    assert rep.entropies == pytest.approx(_brute_entropy_of_image(world, maps), abs=1e-9)
    for a, b in zip(rep.mutual_info, rep.mutual_info[1:]):
        assert b <= a + 1e-9


# ---------------------------------------------------------------------------
# Fano, branching, depth
# ---------------------------------------------------------------------------


def test_fano_max_groups():
    assert fano_max_groups(3, 0.2) == 32.0
    assert fano_max_groups(0, 0) == 2.0
    assert fano_max_groups(1, 0) == 4.0
    with pytest.raises(InvalidEpsilon):
        fano_max_groups(1, 1.0)


def test_fano_error_lower_bound():
    assert fano_error_lower_bound(0, 16) == 0.75
    assert fano_error_lower_bound(3, 16) == 0.0
    assert fano_error_lower_bound(1, 8) == pytest.approx(1 / 3)
    with pytest.raises(InvalidGroupCount):
        fano_error_lower_bound(0, 1)


def _exhaustive_best_error(table):
    """Minimum error over every deterministic estimator g: O -> Z."""
    zs = sorted({z for z, _ in table.rows})
    os_ = sorted({o for _, o in table.rows})
    best = 1.0
    for choice in itertools.product(zs, repeat=len(os_)):
        g = dict(zip(os_, choice))
        err = sum(p for (z, o), p in table.rows.items() if g[o] != z)
        best = min(best, err)
    return best


def test_routing_task_examples():
    t, n = gen_routing_task(8, 3)
    assert mutual_information(t, "Z", "O") == pytest.approx(3.0)
    assert fano_error_lower_bound(3.0, n) == 0.0 and best_estimator_error(t, "Z", "O") == 0.0
    t, n = gen_routing_task(8, 0)
    assert mutual_information(t, "Z", "O") == pytest.approx(0.0, abs=1e-12)
    assert fano_error_lower_bound(0.0, 8) == pytest.approx(2 / 3)
    t, _ = gen_routing_task(2, 1)
    assert best_estimator_error(t, "Z", "O") == 0.0


@pytest.mark.parametrize("n_k,bits,noise", [(4, 1, 0.0), (5, 1, 0.2), (6, 2, 0.1), (3, 0, 0.0)])
def test_map_estimator_is_exhaustive_best(n_k, bits, noise):
    t, _ = gen_routing_task(n_k, bits, noise=noise)
    assert best_estimator_error(t, "Z", "O") == pytest.approx(_exhaustive_best_error(t), abs=1e-12)


def test_fano_holds_on_sweep():
    for n_k in range(2, 33):
        for bits in range(6):
            for noise in (0.0, 0.25):
                t, _ = gen_routing_task(n_k, bits, noise=noise)
                i = mutual_information(t, "Z", "O")
                assert best_estimator_error(t, "Z", "O") >= fano_error_lower_bound(i, n_k) - 1e-9


def test_branching():
    vals = {b: b / math.log(b) for b in range(2, 65)}
    assert min(vals, key=vals.get) == 3
    assert optimal_branching(1000) == (3, 7)
    assert math.ceil(math.log(1000) / math.log(3)) == 7
    assert optimal_branching(1000, fano_cap=2)[0] == 2
    assert optimal_branching(1000, fano_cap=2.9)[0] == 2
    assert optimal_branching(2)[1] == 1


def test_min_depth():
    assert min_depth(100_000, 1000, 10) == 2
    assert min_depth(500, 1000, 10) == 0
    assert 5**4 < 1000 <= 5**5
    assert min_depth(10**6, 10**3, 5) == 5
    with pytest.raises(InvalidRatio):
        min_depth(10, 1, 1.0)


# ---------------------------------------------------------------------------
# routing monotonicity
# ---------------------------------------------------------------------------


def test_routing_monotonicity():
    order = TierOrder.chain(["tier1", "tier2"])
    assert check_routing_monotonicity([("t", "u")], order, {"t": "tier2", "u": "tier1"}) == []
    assert check_routing_monotonicity([("t", "u")], order, {"t": "tier1", "u": "tier2"}) == [("t", "u")]


def test_routing_incomparable_and_transitive():
    order = TierOrder([("low", "a"), ("low", "b")])
    assert check_routing_monotonicity([("t", "u")], order, {"t": "a", "u": "b"}) == [("t", "u")]
    chain = TierOrder.chain(["t1", "t2", "t3"])
    dag = [("x", "y"), ("y", "z")]
    assert check_routing_monotonicity(dag, chain, {"x": "t1", "y": "t1", "z": "t3"}) == [("x", "z"), ("y", "z")]


def test_routing_cycle():
    with pytest.raises(CyclicTaskGraph):
        check_routing_monotonicity([("a", "b"), ("b", "a")], TierOrder.chain(["t"]), {"a": "t", "b": "t"})
