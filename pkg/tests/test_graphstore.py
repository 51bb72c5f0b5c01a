import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tasktrio import wire
from tasktrio.graphstore import (
    CorruptSnapshot,
    DuplicateName,
    GraphStore,
    NotAssigned,
    TaskState,
    UnknownDependency,
)

import graph_oracle

S = TaskState


def T(name, payload=""):
    return wire.TaskSpec(name, payload)


def names(resp):
    return [t.name for t in resp.tasks]


@pytest.fixture
def store():
    return GraphStore()


class TestCreate:
    def test_no_deps_goes_ready(self, store):
        assert store.create(T("A")) is S.READY
        assert list(store.ready) == ["A"]

    def test_pending_dep_waits(self, store):
        store.create(T("A"))
        assert store.create(T("B"), ["A"]) is S.WAITING
        assert store.join_counter("B") == 1
        assert store.successors("A") == ["B"]

    def test_join_waits_for_both(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A"])
        store.create(T("C"), ["A", "B"])
        assert store.join_counter("C") == 2
        assert names(store.steal("w")) == ["A"]
        store.complete("w", "A")
        assert store.state("C") is S.WAITING
        assert names(store.steal("w")) == ["B"]
        store.complete("w", "B")
        assert store.state("C") is S.READY

    def test_done_dep_counts_as_satisfied(self, store):
        store.create(T("A"))
        store.steal("w")
        store.complete("w", "A")
        assert store.create(T("B"), ["A"]) is S.READY
        assert store.successors("A") == []

    def test_errors(self, store):
        store.create(T("A"))
        with pytest.raises(DuplicateName):
            store.create(T("A"))
        with pytest.raises(UnknownDependency):
            store.create(T("B"), ["nope"])
        assert "B" not in store.tasks

    def test_duplicate_deps_count_once(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A", "A"])
        assert store.join_counter("B") == 1

    def test_create_after_error_is_errored(self, store):
        store.create(T("A"))
        store.steal("w")
        store.complete("w", "A", ok=False)
        assert store.create(T("B"), ["A"]) is S.ERRORED


class TestSteal:
    def test_oldest_first_batch(self, store):
        for n in "ABC":
            store.create(T(n))
        resp = store.steal("w", 2)
        assert names(resp) == ["A", "B"]
        assert store.assigned("w") == ["A", "B"]
        assert store.state("A") is S.ASSIGNED

    def test_notfound_while_waiting(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A"])
        store.steal("w")
        assert isinstance(store.steal("v"), wire.NotFoundResp)

    def test_exit_when_all_finished(self, store):
        assert isinstance(store.steal("w"), wire.ExitResp)
        store.create(T("A"))
        store.create(T("B"), ["A"])
        store.steal("w")
        store.complete("w", "A", ok=False)
        assert isinstance(store.steal("w"), wire.ExitResp)

    def test_bad_count(self, store):
        with pytest.raises(ValueError):
            store.steal("w", 0)

    def test_fifo_single_worker(self, store):
        rng = random.Random(3)
        order = []
        pending = []
        for i in range(60):
            deps = rng.sample(pending, min(len(pending), rng.randint(0, 2)))
            if store.create(T(f"t{i}"), deps) is S.READY:
                order.append(f"t{i}")
            pending.append(f"t{i}")
            if rng.random() < 0.5:
                resp = store.steal("w")
                if isinstance(resp, wire.TasksResp):
                    t = resp.tasks[0].name
                    assert t == order.pop(0)
                    order.extend(store.complete("w", t))
        while isinstance(resp := store.steal("w"), wire.TasksResp):
            t = resp.tasks[0].name
            assert t == order.pop(0)
            order.extend(store.complete("w", t))
        assert not order


class TestComplete:
    def test_wakes_successor(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A"])
        store.steal("w")
        assert store.complete("w", "A") == ["B"]
        assert list(store.ready) == ["B"]

    def test_successors_ready_in_list_order(self, store):
        store.create(T("A"))
        for n in "DCB":
            store.create(T(n), ["A"])
        store.create(T("X"))
        store.steal("w")
        store.complete("w", "A")
        assert list(store.ready) == ["X", "D", "C", "B"]

    def test_failure_closes_over_chain(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A"])
        store.create(T("C"), ["B"])
        store.create(T("D"))
        store.steal("w")
        assert sorted(store.complete("w", "A", ok=False)) == ["B", "C"]
        assert [store.state(n) for n in "ABCD"] == [S.ERRORED, S.ERRORED, S.ERRORED, S.READY]

    def test_twice_is_not_assigned(self, store):
        store.create(T("A"))
        store.steal("w")
        store.complete("w", "A")
        with pytest.raises(NotAssigned):
            store.complete("w", "A")

    def test_wrong_worker(self, store):
        store.create(T("A"))
        store.steal("w")
        with pytest.raises(NotAssigned):
            store.complete("v", "A")
        assert store.state("A") is S.ASSIGNED


class TestTransfer:
    def test_to_waiting(self, store):
        store.create(T("A"))
        store.create(T("B"))
        store.create(T("C"), ["B"])
        store.steal("w", 2)
        store.transfer("w", "A", ["C"])
        assert store.state("A") is S.WAITING
        assert store.join_counter("A") == 1
        assert store.assigned("w") == ["B"]

    def test_satisfied_goes_to_front(self, store):
        store.create(T("D"))
        store.steal("w")
        store.complete("w", "D")
        store.create(T("A"))
        store.steal("w")
        store.create(T("X"))
        store.transfer("w", "A", ["D"])
        assert list(store.ready) == ["A", "X"]
        assert names(store.steal("v")) == ["A"]

    def test_cycle_deadlocks_visibly(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A"])
        store.steal("w")
        assert store.transfer("w", "A", ["B"]) is S.WAITING
        for _ in range(3):
            assert isinstance(store.steal("w"), wire.NotFoundResp)
        stats = store.stats()
        assert stats.stalled
        assert stats.counts["waiting"] == 2

    def test_errors(self, store):
        store.create(T("A"))
        with pytest.raises(NotAssigned):
            store.transfer("w", "A", [])
        store.steal("w")
        with pytest.raises(UnknownDependency):
            store.transfer("w", "A", ["zzz"])
        assert store.state("A") is S.ASSIGNED

    def test_transfer_onto_errored_dep(self, store):
        store.create(T("A"))
        store.create(T("B"))
        store.create(T("C"), ["B"])
        store.steal("w", 2)
        store.complete("w", "A", ok=False)
        store.transfer("w", "B", ["A"])
        assert store.state("B") is S.ERRORED
        assert store.state("C") is S.ERRORED


class TestExitWorker:
    def test_recovered_tasks_go_first(self, store):
        for n in "ABC":
            store.create(T(n))
        store.steal("w", 2)
        store.exit_worker("w")
        assert list(store.ready) == ["A", "B", "C"]
        assert store.assigned("w") == []
        assert names(store.steal("v", 2)) == ["A", "B"]

    def test_unknown_worker_is_noop(self, store):
        store.create(T("A"))
        before = store.tables(), list(store.ready)
        assert store.exit_worker("ghost") == []
        assert (store.tables(), list(store.ready)) == before

    def test_recovery_beats_existing_queue(self, store):
        store.create(T("A"))
        store.steal("w")
        store.create(T("X"))
        store.create(T("Y"))
        store.exit_worker("w")
        assert [names(store.steal("v"))[0] for _ in range(3)] == ["A", "X", "Y"]


class TestStats:
    def test_empty(self, store):
        s = store.stats()
        assert s.total == 0 and s.deque == 0 and s.assignments == 0
        assert all(v == 0 for v in s.counts.values())

    def test_counts(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A"])
        s = store.stats()
        assert s.counts["ready"] == 1 and s.counts["waiting"] == 1
        assert not s.stalled


class TestApply:
    def test_errors_become_err_responses(self, store):
        assert isinstance(store.apply(wire.CreateReq(T("A"))), wire.OkResp)
        resp = store.apply(wire.CreateReq(T("A")))
        assert isinstance(resp, wire.ErrResp) and resp.message.startswith("DuplicateName")
        assert isinstance(store.apply(wire.CompleteReq("w", "A")), wire.ErrResp)
        assert isinstance(store.apply(wire.OkResp()), wire.ErrResp)

    def test_responses_are_legal(self, store):
        rng = random.Random(5)
        reqs = [
            wire.CreateReq(T("A")),
            wire.CreateReq(T("B"), ("A",)),
            wire.StealReq("w", 2),
            wire.CompleteReq("w", "A", True),
            wire.TransferReq("w", "B", ()),
            wire.ExitReq("w"),
            wire.StatReq(),
        ]
        for _ in range(200):
            req = rng.choice(reqs)
            assert wire.is_legal_response(req, store.apply(req))


@pytest.mark.parametrize("seed", range(30))
def test_oracle_random_workload(seed):
    h = graph_oracle.run_local(seed, max_nodes=80)
    assert h.stats.ops > 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_counts_sum_to_creates(seed):
    rng = random.Random(seed)
    store = GraphStore()
    h = graph_oracle.Harness(store.apply, rng, graph_oracle.random_dag(rng, 40), 3)
    h.interleave()
    assert store.stats().total == len(h.names)


class TestSnapshot:
    def test_empty_round_trip(self, store, tmp_path):
        path = tmp_path / "s.db"
        store.snapshot(path)
        restored = GraphStore.restore(path)
        assert restored.tables() == {} and restored.stats() == store.stats()

    def test_assigned_comes_back_ready(self, store, tmp_path):
        store.create(T("A", "echo a"))
        store.create(T("B"), ["A"])
        store.steal("w")
        path = tmp_path / "s.db"
        store.snapshot(path)
        restored = GraphStore.restore(path)
        assert restored.state("A") is S.READY
        assert restored.assignments == {}
        assert restored.tables() == store.tables()
        assert names(restored.steal("v")) == ["A"]
        restored.complete("v", "A")
        assert restored.state("B") is S.READY

    def test_stream_sink_and_format(self, store):
        store.create(T("A"))
        store.create(T("B"), ["A"])
        buf = io.StringIO()
        store.snapshot(buf)
        lines = buf.getvalue().splitlines()
        assert json.loads(lines[0])["tasks"] == 2
        row = json.loads(lines[2])
        assert row["name"] == "B" and row["state"] == "waiting" and row["join_counter"] == 1
        assert "sha256" in json.loads(lines[-1])
        restored = GraphStore.restore(io.StringIO(buf.getvalue()))
        assert restored.tables() == store.tables()

    def test_checksum_detects_tampering(self, store, tmp_path):
        store.create(T("A"))
        path = tmp_path / "s.db"
        store.snapshot(path)
        text = path.read_text().replace('"ready"', '"done"')
        path.write_text(text)
        with pytest.raises(CorruptSnapshot):
            GraphStore.restore(path)

    @pytest.mark.parametrize("text", ["", "garbage\n", '{"format":"tasktrio-graph"}\n'])
    def test_garbage(self, text):
        with pytest.raises(CorruptSnapshot):
            GraphStore.restore(io.StringIO(text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            GraphStore.restore(tmp_path / "absent")

    def test_random_midpoints_preserve_tables(self, tmp_path):
        for seed in range(20):
            rng = random.Random(seed)
            store = GraphStore()
            h = graph_oracle.Harness(store.apply, rng, graph_oracle.random_dag(rng, 60), 4)
            h.interleave(rng.randint(0, 80))
            path = tmp_path / f"{seed}.db"
            store.snapshot(path)
            restored = GraphStore.restore(path)
            assert restored.tables() == store.tables()
            assert restored.assignments == {}
            ready = [n for n, r in restored.tasks.items() if r.state is S.READY]
            assert sorted(restored.ready) == sorted(ready)
