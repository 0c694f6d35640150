import json

import numpy as np
import pytest

from effserve import numkit as nk
from effserve import oodkit as ok
from effserve.errors import SimulationTimeout
from effserve.pipeline import (
    Broker, Counters, PredictionRecord, ResultTable, ScalingPolicy, SimConfig, Topology,
    autoscale_step, consume_step, flush_dead_letters, process, query_results, query_tables, run,
)
from effserve.pipeline.compare import compare_topologies, co_prediction_rate
from effserve.pipeline.consumer import PipelineSpec
from effserve.pipeline.sim import write_manifest, write_tables

from conftest import TASKS


def sample_items(domain, n=100, labels=("Normal", "Dirt", "Defect")):
    sub = domain.test.with_labels(list(labels))
    return list(zip(sub.ids[:n], sub.X[:n]))


# records -----------------------------------------------------------------

def test_record_invariants():
    with pytest.raises(ValueError):
        PredictionRecord("s", "t", "predicted")
    with pytest.raises(ValueError):
        PredictionRecord("s", "t", "predicted", (("a", 0.2), ("b", 0.5)))
    with pytest.raises(ValueError):
        PredictionRecord("s", "t", "rejected", (("a", 0.2),))
    rec = PredictionRecord("s", "t", "predicted", (("a", 0.6), ("b", 0.3)), 1.5, 3, "r0", "m", 1)
    assert PredictionRecord.from_json(rec.to_json()) == rec
    assert list(json.loads(rec.to_json())) == ["sample_id", "table", "verdict", "topn", "ood_score",
                                              "timestamp", "replica", "message_id", "delivery"]


def test_table_query_and_round_trip(tmp_path):
    t = ResultTable("u")
    t.append(PredictionRecord("a", "u", "rejected", timestamp=1))
    t.append(PredictionRecord("a", "u", "predicted", (("x", 0.9),), timestamp=4))
    t.append(PredictionRecord("b", "u", "rejected", timestamp=2))
    assert [r.timestamp for r in query_results(t, "a")] == [4, 1]
    assert query_results(t, "zzz") == []
    t.write(tmp_path / "u.jsonl", ["seed=1"])
    back = ResultTable.read(tmp_path / "u.jsonl")
    assert back.sorted_records() == t.sorted_records()


# consumer ------------------------------------------------------------------

def test_gate_rejects_without_classifying(trained, domain):
    model = trained["unified"]
    spec = PipelineSpec("u", model, tau=1e9, n=2)
    out = process(spec, domain.test.X[0])
    assert out.verdict == "rejected" and out.topn == ()
    assert (out.detector_calls, out.classifier_calls) == (1, 0)


def test_in_distribution_top2(trained, domain):
    spec = PipelineSpec("u", trained["unified"], n=2)
    i = domain.test.label_names().index("Dirt")
    out = process(spec, domain.test.X[i])
    assert out.verdict == "predicted" and len(out.topn) == 2
    assert out.topn[0][0] == "Dirt"
    assert out.classifier_calls == 1
    assert out.score == pytest.approx(ok.max_logit_score(nk.forward(trained["unified"], domain.test.X[i])[0]))


def test_consume_step_writes_and_acks(trained, domain):
    b = Broker(["u"])
    b.publish(0, sample_items(domain, 3))
    spec = PipelineSpec("u", trained["unified"], n=2)
    table, c = ResultTable("u"), Counters()
    rec = consume_step("r0", b, spec, table, c, 0)
    assert rec.verdict == "predicted" and len(table) == 1
    assert c.inferences == 1 and b.counts()["acked"] == 1


def test_dimension_mismatch_is_dead_lettered(trained):
    b = Broker(["u"], max_deliveries=3)
    b.publish(0, [("bad", np.zeros(3))])
    spec = PipelineSpec("u", trained["unified"])
    table, c = ResultTable("u"), Counters()
    for t in range(3):
        assert consume_step("r0", b, spec, table, c, t) is None
    recs = flush_dead_letters(b, {"u": table}, {"u": c}, 3)
    assert [r.verdict for r in recs] == ["failed"]
    assert c.failed == 1 and b.drained()


# simulation ----------------------------------------------------------------

def test_efficiency_run_counts(trained, domain):
    items = sample_items(domain, 100)
    m, tables = run(Topology.efficiency_centric(trained["unified"]), [(0, items)], ScalingPolicy())
    assert m.total_inferences == 100 and m.messages == 100
    assert len(tables) == 1 and len(tables["unified"]) == 100
    assert m.duplicate_inferences == 0
    assert len(m.backlog) == len(m.replicas) == m.ticks


def test_task_centric_run_counts(trained, domain):
    items = sample_items(domain, 100)
    topo = Topology.task_centric([(t, trained[t.name], float("-inf")) for t in TASKS])
    m, tables = run(topo, [(0, items)], ScalingPolicy())
    assert m.total_inferences == 200
    assert m.duplicate_inferences == 100
    assert all(len(t) == 100 for t in tables.values())
    sid = items[0][0]
    assert len(query_tables(tables.values(), sid)) == 2


def test_task_centric_routing_counts(trained, domain):
    items = sample_items(domain, 60)
    only_dirt = {sid for sid, _ in items[:20]}
    topo = Topology.task_centric(
        [(t, trained[t.name], float("-inf")) for t in TASKS],
        route=lambda sid: ["dirt"] if sid in only_dirt else ["dirt", "defect"])
    m, _ = run(topo, [(0, items)], ScalingPolicy())
    assert m.total_inferences == 60 + 40
    assert m.duplicate_inferences == 40


def test_rejections_plus_inferences_cover_every_sample(trained, domain):
    model = trained["unified"]
    tau = ok.select_threshold(ok.max_logit_scores(model, domain.train.X), 0.95)
    items = sample_items(domain, 50) + [(s.id, s.features) for s in domain.ood[:50]]
    m, tables = run(Topology.efficiency_centric(model, tau), [(0, items)], ScalingPolicy())
    assert m.total_inferences + m.rejected == 100
    assert m.rejected >= 45
    verdicts = {r.sample_id: r.verdict for r in tables["unified"].records()}
    assert all(verdicts[s.id] == "rejected" for s in domain.ood[:50])


def test_timeout_carries_partial_metrics(trained, domain):
    with pytest.raises(SimulationTimeout) as info:
        run(Topology.efficiency_centric(trained["unified"]), [(0, sample_items(domain, 100))],
            ScalingPolicy(max_replicas=1), SimConfig(max_ticks=10))
    # one replica, one tick per message, and the first job finishes at tick 1
    assert info.value.metrics.processed == 9
    assert len(info.value.tables["unified"]) == 9
    assert "91 message(s)" in str(info.value)


def test_crashes_are_redelivered_and_conservation_holds(trained, domain):
    items = sample_items(domain, 150)
    seen = []

    def check(t, broker):
        seen.append(broker.conserved())

    m, tables = run(Topology.efficiency_centric(trained["unified"]), [(0, items)], ScalingPolicy(),
                    SimConfig(crash_rate=0.1, seed=3), on_tick=check)
    assert all(seen) and len(seen) == m.ticks
    assert m.crashes > 0 and m.redeliveries > 0
    assert len(tables["unified"]) == m.messages == 150
    assert m.processed + m.failed == 150


def replay_replicas(policy, backlog, replicas):
    current, last = policy.min_replicas, None
    for t, (b, r) in enumerate(zip(backlog, replicas)):
        if t % policy.poll_interval == 0:
            new = autoscale_step(policy, b, current, t, last)
            if new != current:
                current, last = new, t
        if r != current:
            return False
    return True


def test_replica_trace_follows_policy_and_decays_after_burst(trained, domain):
    policy = ScalingPolicy(target_backlog_per_replica=5, min_replicas=1, max_replicas=8, cooldown=6)
    batches = [(0, sample_items(domain, 80)), (60, sample_items(domain, 40, ("Seats", "Dashboard")))]
    m, _ = run(Topology.efficiency_centric(trained["unified"]), batches, policy)
    per = m.per_pipeline["unified"]
    assert replay_replicas(policy, per["backlog"], per["replicas"])
    assert max(per["replicas"][:20]) == 8
    assert per["replicas"][59] == 1
    assert max(per["replicas"][60:]) > 1
    assert all(1 <= r <= 8 for r in m.replicas)


def test_identical_seeds_replay_byte_for_byte(trained, domain, tmp_path):
    items = sample_items(domain, 80)
    outs = []
    for name in ("a", "b"):
        m, tables = run(Topology.efficiency_centric(trained["unified"]), [(0, items)],
                        ScalingPolicy(), SimConfig(crash_rate=0.2, seed=7))
        d = tmp_path / name
        d.mkdir()
        write_tables(tables, d)
        m.write(d / "metrics.csv")
        outs.append(d)
    for f in ("results_unified.jsonl", "metrics.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_metrics_file_layout(trained, domain, tmp_path):
    m, _ = run(Topology.efficiency_centric(trained["unified"]), [(0, sample_items(domain, 10))],
               ScalingPolicy())
    m.write(tmp_path / "m.csv", ["seed=0"])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "tick,backlog,replicas,cumulative_inferences"
    assert lines[2 + m.ticks] == "# summary"
    assert "total_inferences,10" in lines


def test_manifest_names_models(trained, tmp_path):
    topo = Topology.efficiency_centric(trained["unified"], 0.5)
    man = write_manifest(tmp_path / "m.json", topo, ScalingPolicy(), SimConfig(seed=4))
    assert man["sim"]["seed"] == 4
    assert len(man["topology"]["pipelines"][0]["model_sha256"]) == 64


def test_topology_validation(trained):
    with pytest.raises(ValueError):
        Topology.task_centric([])
    with pytest.raises(ValueError):
        Topology("efficiency-centric", (PipelineSpec("a", trained["unified"]),) * 2)


# compare ---------------------------------------------------------------------

def test_compare_duplicates_and_tables(trained, domain):
    items = sample_items(domain, 50)
    report, _, _ = compare_topologies(items, TASKS, 2, trained["unified"],
                                      [trained["dirt"], trained["defect"]], ScalingPolicy())
    assert report["task"]["duplicate_inferences"] == 50 == report["duplicates_closed_form"]
    assert report["efficiency"]["total_inferences"] == 50
    assert report["task"]["total_inferences"] == 100
    assert (report["efficiency"]["tables"], report["task"]["tables"]) == (1, 2)


def test_compare_reports_metrics_and_coprediction(trained, domain):
    sub = domain.test.with_labels(["Normal", "Dirt", "Defect"])
    ood = {k: np.array([s.features for s in v]) for k, v in domain.ood_groups().items()}
    report, (_, t_eff), (_, t_tc) = compare_topologies(
        list(zip(sub.ids, sub.X)), TASKS, 2, trained["unified"], [trained["dirt"], trained["defect"]],
        ScalingPolicy(), multilabel=domain.multilabel, eval_data=sub, ood_groups=ood)
    assert {r["task"] for r in report["task_metrics"]} == {"dirt", "defect"}
    assert set(report["rejection_auroc"]) == {"Receipts", "Documents"}
    assert report["co_prediction"]["efficiency"] >= 0.8
    # a multi-label sample appears in every task table
    sid = domain.multilabel[0].id
    assert len(query_tables(t_tc.values(), sid)) == 2
    assert len(query_tables(t_eff.values(), sid)) == 1


def test_co_prediction_rate_counts_cover():
    from effserve.synthdomain import SyntheticSample

    t = ResultTable("u")
    t.append(PredictionRecord("a", "u", "predicted", (("Dirt", 0.5), ("Defect", 0.4))))
    t.append(PredictionRecord("b", "u", "predicted", (("Dirt", 0.5), ("Seats", 0.4))))
    samples = [SyntheticSample(i, np.zeros(1), ("Dirt", "Defect")) for i in ("a", "b")]
    assert co_prediction_rate([t], samples) == 0.5


# live ------------------------------------------------------------------------

def test_live_mode_processes_everything(trained, domain):
    from effserve.pipeline.live import LiveRunner

    items = sample_items(domain, 60)
    runner = LiveRunner(Topology.efficiency_centric(trained["unified"]), ScalingPolicy())
    m, tables = runner.run(items, timeout=30)
    assert m.processed == 60 and m.total_inferences == 60
    assert len(tables["unified"]) == 60
    assert {r.sample_id for r in tables["unified"].records()} == {sid for sid, _ in items}
    assert runner.broker.conserved() and runner.broker.drained()


def test_live_task_centric_counts(trained, domain):
    from effserve.pipeline.live import LiveRunner

    topo = Topology.task_centric([(t, trained[t.name], float("-inf")) for t in TASKS])
    m, _ = LiveRunner(topo, ScalingPolicy()).run(sample_items(domain, 30), timeout=30)
    assert m.total_inferences == 60 and m.duplicate_inferences == 30
