import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resadapt import layers as L
from resadapt.adapters import AdapterSpec, Placement
from resadapt.autodiff import Tensor
from resadapt.conformer import ConformerConfig, init_encoder
from resadapt.errors import ConfigError, DegenerateAdapterError, DimensionError, PreconditionError
from resadapt.finetune import attach
from resadapt.sites import Site
from resadapt import stats as S
from resadapt.stats import ActivationStats, StatSite

CFG = ConformerConfig(num_blocks=2, d_model=8, heads=2, conv_kernel=3, ffn_expansion=2)


def model(placement=Placement.TPA, width=6, seed=0):
    m = attach(CFG, init_encoder(CFG), 3, AdapterSpec(placement, width), seed)
    rng = np.random.default_rng(seed + 100)
    for _, _, p in m.adapters.items():
        p.up.weight.data[...] = 0.3 * rng.standard_normal(p.up.weight.shape)
    return m


def data(n=8, T=6, seed=0):
    return np.random.default_rng(seed).standard_normal((n, T, CFG.d_model))


def stats_of(counts, total, site=StatSite(0, "adapter", Site.FFN1)):
    return ActivationStats(site, np.array(counts), total)


# rates and fractions --------------------------------------------------------------

def test_rates_and_fraction():
    s = stats_of([0, 5, 10], 10)
    np.testing.assert_array_equal(S.activation_rate(s), [0, 0.5, 1.0])
    assert S.fraction_active(s) == pytest.approx(2 / 3)
    assert S.fraction_active(stats_of([0, 0], 4)) == 0.0


def test_empty_stats_rejected():
    with pytest.raises(PreconditionError):
        S.activation_rate(ActivationStats.empty(StatSite(0, "adapter", Site.FFN1), 3))


def test_keep_mask_threshold_semantics():
    s = stats_of([0, 1, 5, 10], 10)
    np.testing.assert_array_equal(S.keep_mask(s, 0.0), [False, True, True, True])
    np.testing.assert_array_equal(S.keep_mask(s, 0.5), [False, False, False, True])
    assert not S.keep_mask(s, 1.01).any()


def test_ffn_exact_mask_requires_silent_output():
    site = StatSite(0, "ffn", Site.FFN1)
    s = ActivationStats(site, np.array([0, 0, 3]), 10, np.array([0.0, 0.2, 1.0]))
    # neuron 1 never fired but swish leaked a non-zero output: not exactly prunable
    np.testing.assert_array_equal(S.keep_mask(s), [False, True, True])
    np.testing.assert_array_equal(S.keep_mask(s, exact=False), [False, False, True])


# collection -----------------------------------------------------------------------

def test_planted_neurons():
    m = model()
    p = m.adapters.blocks[1][Site.FFN2]
    p.down.weight.data[:, 0] = 0.0
    p.down.bias.data[0] = -0.5
    p.down.weight.data[:, 1] = 0.0
    p.down.bias.data[1] = 0.5
    x = data()
    st_ = S.collect_stats(m, x)[StatSite(1, "adapter", Site.FFN2)]
    assert st_.positive_count[0] == 0
    assert st_.positive_count[1] == st_.total_frames == x.shape[0] * x.shape[1]


def test_unknown_site_rejected():
    with pytest.raises(ConfigError):
        S.collect_stats(model(), data(), [StatSite(0, "adapter", Site.CONV)])
    with pytest.raises(ConfigError):
        StatSite.parse(0, "adapter.nowhere")


def test_available_sites():
    m = model(Placement.SERIAL)
    assert S.available_sites(m) == [StatSite(0, "adapter", Site.AFTER_BLOCK), StatSite(1, "adapter", Site.AFTER_BLOCK)]
    assert len(S.available_sites(m, include_ffn=True)) == 2 + 2 * CFG.num_blocks


@pytest.mark.parametrize("placement", [Placement.SERIAL, Placement.PARALLEL_FFN1, Placement.TPA, Placement.PARALLEL_CONV])
def test_instrumentation_is_transparent(placement):
    m = model(placement)
    x = data()
    before = m.forward(x).data
    S.collect_stats(m, x, S.available_sites(m, include_ffn=True), chunk=3)
    assert m.forward(x).data.tobytes() == before.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 7), st.integers(0, 1000))
def test_merge_of_shards_equals_whole(cut, seed):
    m = model(seed=seed % 5)
    x = data(8, 4, seed)
    sites = S.available_sites(m, include_ffn=True)
    whole = S.collect_stats(m, x, sites)
    merged = S.merge_stats(S.collect_stats(m, x[:cut], sites), S.collect_stats(m, x[cut:], sites))
    assert merged == whole


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 50), min_size=4, max_size=4), st.integers(50, 60)),
                min_size=3, max_size=3))
def test_merge_commutative_and_associative(shards):
    a, b, c = (stats_of(counts, total) for counts, total in shards)
    assert a.merge(b) == b.merge(a)
    assert a.merge(b).merge(c) == a.merge(b.merge(c))
    assert a.merge(b).positive_count.dtype == np.int64


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 7))
def test_fraction_active_monotone_in_data(cut):
    m = model()
    x = data(8, 4, 3)
    small = S.collect_stats(m, x[:cut])
    big = S.collect_stats(m, x)
    for s in small:
        assert S.fraction_active(big[s]) >= S.fraction_active(small[s])


def test_merge_rejects_different_sites():
    with pytest.raises(ConfigError):
        stats_of([1], 2).merge(stats_of([1], 2, StatSite(1, "adapter", Site.FFN1)))


# pruning --------------------------------------------------------------------------

def test_prune_set_preserves_outputs_on_stats_data():
    m = model()
    p = m.adapters.blocks[0][Site.FFN1]
    p.down.weight.data[:, 2] = 0.0
    p.down.bias.data[2] = -1.0
    x = data(40, 8)
    st_ = S.collect_stats(m, x)
    before = m.forward(x).data
    pruned, summary = S.prune_adapter_set(m.adapters, st_, 0.0)
    assert sum(s.kept for s in summary) < sum(s.total for s in summary)
    m.adapters = pruned
    np.testing.assert_allclose(m.forward(x).data, before, rtol=0, atol=1e-9)


def test_prune_set_refuses_to_empty_a_site():
    m = model()
    with pytest.raises(DegenerateAdapterError, match="allow_empty"):
        S.prune_adapter_set(m.adapters, S.collect_stats(m, data()), 1.01)
    pruned, summary = S.prune_adapter_set(m.adapters, S.collect_stats(m, data()), 1.01, allow_empty=True)
    assert all(s.kept == 0 for s in summary)
    assert all(p.collapsed for _, _, p in pruned.items())


def test_prune_set_width_mismatch():
    m = model(width=6)
    bad = {StatSite(0, "adapter", Site.FFN1): stats_of([1, 1], 3)}
    with pytest.raises(DimensionError):
        S.prune_adapter_set(m.adapters, bad)


def test_prune_ffn_exact_for_silent_neuron():
    rng = np.random.default_rng(0)
    p = L.init_ffn(rng, 4, 2)
    p.inner.weight.data[:, 3] = 0.0
    p.inner.bias.data[3] = 0.0
    x = Tensor(rng.standard_normal((7, 4)))
    keep = np.ones(8, bool)
    keep[3] = False
    np.testing.assert_array_equal(L.ffn_forward(S.prune_ffn(p, keep), x).data, L.ffn_forward(p, x).data)
    full = S.prune_ffn(p, np.ones(8, bool))
    np.testing.assert_array_equal(L.ffn_forward(full, x).data, L.ffn_forward(p, x).data)
    with pytest.raises(DegenerateAdapterError):
        S.prune_ffn(p, np.zeros(8, bool))


def test_prune_encoder_ffn_from_stats_within_tolerance():
    m = model()
    blk = m.encoder[1]
    blk.ffn2.inner.weight.data[:, :3] = 0.0
    blk.ffn2.inner.bias.data[:3] = 0.0
    x = data(20, 6)
    sites = [StatSite(1, "ffn", Site.FFN2)]
    st_ = S.collect_stats(m, x, sites)[sites[0]]
    keep = S.keep_mask(st_)
    assert keep.sum() <= keep.size - 3
    before = m.forward(x).data
    blk.ffn2 = S.prune_ffn(blk.ffn2, keep)
    np.testing.assert_allclose(m.forward(x).data, before, rtol=0, atol=1e-6)


# reports --------------------------------------------------------------------------

def test_report_rows_schema_and_scopes():
    m = model()
    one = S.collect_stats(m, data(4, 4, 1))
    two = S.collect_stats(m, data(4, 4, 2))
    rows = S.activation_report(one)
    assert len(rows) == CFG.num_blocks * 2
    assert {tuple(r) for r in rows} == {tuple(S.REPORT_COLUMNS)}
    rows = S.activation_report(S.merge_stats(one, two), [one, two])
    assert {r["scope"] for r in rows} == {"all_tasks", "single_task_max"}
    for r in rows:
        assert r["fraction_active"] == r["neurons_active"] / r["neurons_total"]


def test_neuron_csv_roundtrip(tmp_path):
    m = model()
    st_ = S.collect_stats(m, data(), S.available_sites(m, include_ffn=True))
    path = tmp_path / "n.csv"
    S.write_rows(S.neuron_rows(st_, tag="x"), path, [*S.NEURON_COLUMNS, "tag"])
    back, rows = S.read_neuron_stats(path)
    assert back == st_ and rows[0]["tag"] == "x"


def test_neuron_csv_schema_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        S.read_neuron_stats(path)
