import csv
import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from modnet import evalkit
from modnet.dataset import load
from modnet.evalkit import (DecompositionTable, RoutingRecord, collapse_metrics, normalized_entropy,
                            render_identities, report, routing_table, table_from_records)
from modnet.modules import ModulePool
from modnet.trainer import fit
from oracles import histogram_entropy


def small_pool(seed=0, n=3, m=2):
    torch.manual_seed(seed)
    return ModulePool(m=m, n=n, u=3, k=2, image_shape=(32, 32, 3), channels=(4, 4, 8, 8), hidden=16)


# -- collapse metrics -----------------------------------------------------------

def test_entropy_extremes():
    assert normalized_entropy([10, 0, 0, 0, 0]) == 0.0
    assert normalized_entropy([7, 7, 7, 7, 7]) == pytest.approx(1.0, abs=1e-15)
    assert normalized_entropy([0, 0]) == 0.0
    assert normalized_entropy([4]) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.integers(0, n - 1), min_size=1,
                                                                             max_size=200))))
def test_entropy_matches_histogram_oracle(case):
    n, idents = case
    records = [RoutingRecord(i, 0, 1, j) for i, j in enumerate(idents)]
    got = collapse_metrics(records, n=n, m=2)["identity_entropy"]
    assert abs(got - histogram_entropy(idents, n)) <= 1e-12
    assert 0.0 <= got <= 1.0


def test_collapse_all_on_one_identity():
    records = [RoutingRecord(i, i % 2, 3, 0) for i in range(10)]
    cm = collapse_metrics(records, n=5, m=2)
    assert cm["identity_entropy"] == 0.0 and cm["full_collapse"]
    assert cm["identity_usage"] == [10, 0, 0, 0, 0] and cm["identities_unused"] == 4
    assert cm["subset_masks"] == [1, 2, 3] and cm["subset_usage"] == [0, 0, 10]


def test_collapse_uniform():
    records = [RoutingRecord(i, 0, 1 + i % 3, i % 5) for i in range(15)]
    cm = collapse_metrics(records, n=5, m=2)
    assert cm["identity_entropy"] == pytest.approx(1.0, abs=1e-12)
    assert cm["subset_entropy"] == pytest.approx(1.0, abs=1e-12)
    assert not cm["full_collapse"] and cm["combinations_used"] == 15


def test_collapse_empty():
    with pytest.raises(ValueError):
        collapse_metrics([], n=2, m=2)


# -- decomposition table -------------------------------------------------------

def test_table_rows_sum_to_100():
    rng = np.random.default_rng(0)
    records = [RoutingRecord(i, int(rng.integers(3)), 1, int(rng.integers(5))) for i in range(301)]
    table = table_from_records(records, 5, ["a", "b", "c"])
    np.testing.assert_allclose(table.percent.sum(axis=1), 100.0, atol=0.01)
    assert table.counts.sum() == 301


def test_table_format_and_csv():
    records = [RoutingRecord(0, 0, 1, 0), RoutingRecord(1, 1, 1, 2), RoutingRecord(2, 1, 1, 1)]
    table = table_from_records(records, 5, ["cylinder", "cube"])
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["shape", "m_1", "m_2", "m_3", "m_4", "m_5"]
    assert rows[1] == ["cylinder", "100.0", "0", "0", "0", "0"]
    assert rows[2] == ["cube", "0", "50", "50", "0", "0"]
    assert table.purity().tolist() == [100.0, 50.0]
    md = table.to_markdown().splitlines()
    assert md[0].startswith("| GT shape | m_1 (%)") and md[2] == "| cylinder | 100.0 | 0 | 0 | 0 | 0 |"


def test_single_image_table():
    table = table_from_records([RoutingRecord(0, 1, 1, 3)], 4, ["a", "b", "c"])
    rows = list(table.rows())
    assert len(rows) == 1 and rows[0][0] == "b"
    assert rows[0][1].tolist() == [0, 0, 0, 100.0]


def test_routing_table_is_deterministic(tiny_data):
    pool = small_pool()
    ds = load(tiny_data)
    idx = np.arange(0, 64, 3)
    t1, r1 = routing_table(pool, ds, idx, max_pairs=1, seed=4)
    t2, r2 = routing_table(pool, ds, idx, max_pairs=1, seed=4, batch_size=5)
    assert r1 == r2 and np.array_equal(t1.counts, t2.counts)
    assert [r.sample for r in r1] == idx.tolist()
    assert [r.shape_id for r in r1] == ds.shape_ids(idx).tolist()
    np.testing.assert_allclose(t1.percent.sum(axis=1), 100.0, atol=0.01)
    assert t1.shape_names == ["square", "circle"]


def test_routing_table_single_image(tiny_data):
    table, records = routing_table(small_pool(), load(tiny_data), [5])
    assert len(records) == 1
    assert sorted(table.percent[records[0].shape_id].tolist())[-1] == 100.0


def test_routing_table_empty(tiny_data):
    with pytest.raises(ValueError):
        routing_table(small_pool(), load(tiny_data), [])


# -- identity renders ----------------------------------------------------------

@pytest.mark.parametrize("n", [1, 3, 5])
def test_render_count_and_files(tmp_path, n):
    imgs, paths = render_identities(small_pool(n=n), tmp_path)
    assert imgs.shape == (n, 3, 32, 32)
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(
        [f"identity_{j}.png" for j in range(1, n + 1)] + ["identities_grid.png"])
    assert len(paths) == n + 1


def test_untrained_renders_nearly_identical():
    imgs, _ = render_identities(small_pool(n=5))
    assert max(evalkit.pairwise_mse(imgs).values()) <= 1e-3


def test_render_is_deterministic(tmp_path):
    pool = small_pool()
    render_identities(pool, tmp_path / "a")
    render_identities(pool, tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_pairwise_mse_oracle():
    imgs = np.zeros((3, 1, 2, 2))
    imgs[1] += 0.5
    imgs[2] += 1.0
    assert evalkit.pairwise_mse(imgs) == {(0, 1): 0.25, (0, 2): 1.0, (1, 2): 0.25}


# -- report --------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, tiny_data):
    from modnet.trainer import TrainConfig
    from conftest import TINY_CONFIG

    run = tmp_path_factory.mktemp("run")
    res = fit(TrainConfig(**TINY_CONFIG), tiny_data, run)
    pool = res.state.pool
    ds = load(tiny_data)
    table, records = routing_table(pool, ds, ds.split()[1], max_pairs=1)
    render_identities(pool, run / "eval" / "identities")
    return run, table, collapse_metrics(records, pool.n, pool.m)


def test_report_complete(tmp_path, trained_run):
    run, table, collapse = trained_run
    path = report(run / "metrics.jsonl", table, run / "eval" / "identities", collapse, tmp_path)
    text = path.read_text()
    for heading in ("## Loss curves", "## Shape decomposition", "## Identity reconstructions", "## Module collapse"):
        assert heading in text
    assert "## Omitted" not in text
    assert (tmp_path / "loss_curves.png").exists()
    assert "identities_grid.png" in text and "m_1 (%)" in text


def test_report_missing_renders(tmp_path, trained_run):
    run, table, collapse = trained_run
    text = report(run / "metrics.jsonl", table, tmp_path / "nothing", collapse, tmp_path).read_text()
    assert "## Omitted" in text and "identity renders: not available" in text


def test_report_all_missing(tmp_path):
    text = report(tmp_path / "none.jsonl", out_dir=tmp_path).read_text()
    assert text.count(": not available") == 4


def test_report_rerun_identical(tmp_path, trained_run):
    run, table, collapse = trained_run
    a = report(run / "metrics.jsonl", table, run / "eval" / "identities", collapse, tmp_path / "a",
               header_note="Generated at time one").read_text()
    b = report(run / "metrics.jsonl", table, run / "eval" / "identities", collapse, tmp_path / "b",
               header_note="Generated at time two").read_text()
    body = lambda t: t.split("## Loss curves", 1)[1]  # noqa: E731
    assert body(a).replace("../a", "") == body(b).replace("../b", "")
    assert (tmp_path / "a" / "loss_curves.png").read_bytes() == (tmp_path / "b" / "loss_curves.png").read_bytes()


def test_table_dataclass_rows_skip_empty_shapes():
    t = DecompositionTable(["a", "b"], np.array([[100.0, 0.0], [0.0, 0.0]]), np.array([[2, 0], [0, 0]]))
    assert [name for name, _ in t.rows()] == ["a"]
    assert np.isnan(t.purity()[1])
