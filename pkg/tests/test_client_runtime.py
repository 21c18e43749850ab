"""Policy decisions and the session effect stream, against a scripted server.

The driver here is the minimal legal implementation of the effect
contract: synchronous exchanges, prefetch replies delivered between
effects.  If these tests pass, both simulators drive the same behaviour.
"""

import pytest

from taskfarm.client_runtime import (
    AwaitDelivery,
    Backoff,
    Busy,
    ClientState,
    Exchange,
    Idle,
    Request,
    RequestAsync,
    RunTask,
    StartPrefetch,
    accept_tasks,
    deliver_pending,
    next_action,
    run_task,
    session_process,
)
from taskfarm.domain import CheckpointRecord, PolicyConfig, PolicyMode
from taskfarm.kernels import mc_make_payload, mc_run_chunk
from taskfarm.protocol import (
    Ack,
    AckStatus,
    Drained,
    Final,
    Hello,
    Partial,
    RequestTasks,
    TaskAssignment,
    Tasks,
)


def assignment(task_id="t1", iterations=100, seed=1, checkpoint=None, payload=None):
    if payload is None:
        payload = mc_make_payload(iterations, seed)
    return TaskAssignment(task_id=task_id, kernel_id="monte_carlo_pi", payload=payload, checkpoint=checkpoint)


def sync_state(**kwargs):
    return ClientState(policy=PolicyConfig(mode=PolicyMode.SYNC_SINGLE, **kwargs))


# ---------------------------------------------------------------- next_action


def test_sync_single_requests_one_when_empty():
    state = sync_state()
    assert next_action(state) == Request(1)
    state.buffer.append(assignment())
    assert isinstance(next_action(state), RunTask)


def test_batch_requests_full_batch_when_empty():
    state = ClientState(policy=PolicyConfig(mode=PolicyMode.BATCH, batch_size=5))
    assert next_action(state) == Request(5)
    state.buffer.append(assignment())
    assert isinstance(next_action(state), RunTask)  # no mid-buffer refills


def test_async_prefetch_triggers_exactly_at_threshold():
    state = ClientState(
        policy=PolicyConfig(mode=PolicyMode.ASYNC_PREFETCH, batch_size=5, prefetch_threshold=2)
    )
    state.buffer = [assignment(f"t{i}") for i in range(3)]
    assert isinstance(next_action(state), RunTask)  # above threshold: just run
    state.buffer.pop(0)
    assert next_action(state) == RequestAsync(5)  # dropped 3 -> 2: fire
    state.prefetch_in_flight = True
    assert isinstance(next_action(state), RunTask)  # and run, same instant
    state.buffer.pop(0)
    assert isinstance(next_action(state), RunTask)  # single flight: no re-fire below


def test_async_prefetch_idles_only_with_request_in_flight():
    state = ClientState(
        policy=PolicyConfig(mode=PolicyMode.ASYNC_PREFETCH, batch_size=3, prefetch_threshold=1)
    )
    assert next_action(state) == Request(3)  # empty, nothing in flight: block
    state.prefetch_in_flight = True
    assert isinstance(next_action(state), Idle)


def test_buffer_cap_accounts_for_prefetch_overlap():
    state = ClientState(
        policy=PolicyConfig(mode=PolicyMode.ASYNC_PREFETCH, batch_size=5, prefetch_threshold=2)
    )
    state.buffer = [assignment(f"t{i}") for i in range(2)]
    accept_tasks(state, Tasks([assignment(f"p{i}") for i in range(5)]))
    assert len(state.buffer) == 7  # threshold + batch, the documented cap


def test_accept_tasks_drained_flag():
    state = sync_state()
    assert accept_tasks(state, Drained()) is False
    assert state.server_drained


# ------------------------------------------------------------------ run_task


def drive(gen, replies):
    """Run a generator to completion feeding scripted replies to exchanges."""
    effects = []
    try:
        effect = next(gen)
        while True:
            effects.append(effect)
            if isinstance(effect, Exchange):
                effect = gen.send(replies.pop(0))
            else:
                effect = gen.send(None)
    except StopIteration:
        return effects


def test_run_task_no_checkpoints():
    state = sync_state()
    effects = drive(run_task(state, assignment(iterations=100)), [Ack("t1", AckStatus.ACCEPTED)])
    assert [type(e) for e in effects] == [Busy, Exchange]
    assert effects[0].units == 100
    final = effects[1].message
    assert isinstance(final, Final)
    assert final.sequence == 1
    assert final.payload["done_iterations"] == 100
    assert state.tasks_completed == 1
    assert state.busy_units_executed == 100


def test_run_task_checkpoint_cadence():
    # 200 units, checkpoint every 50: partials at 50, 100, 150, then final
    state = ClientState(policy=PolicyConfig(checkpoint_every=50))
    replies = [Ack("t1", AckStatus.APPLIED)] * 3 + [Ack("t1", AckStatus.ACCEPTED)]
    effects = drive(run_task(state, assignment(iterations=200)), replies)
    kinds = [type(e) for e in effects]
    assert kinds == [Busy, Exchange, Busy, Exchange, Busy, Exchange, Busy, Exchange]
    partials = [e.message for e in effects if isinstance(e, Exchange)][:3]
    assert [p.sequence for p in partials] == [1, 2, 3]
    assert [p.progress_units for p in partials] == [50, 100, 150]
    assert all(isinstance(p, Partial) for p in partials)
    assert not any(e.idle for e in effects if isinstance(e, Exchange) and isinstance(e.message, Partial))
    final = effects[-1].message
    assert final.sequence == 4
    assert final.payload["hits"] == partials_free_run_hits(200)


def partials_free_run_hits(n):
    p = mc_make_payload(n, 1)
    mc_run_chunk(p, n)
    return p["hits"]


def test_run_task_checkpoint_interval_beyond_size_means_no_partials():
    state = ClientState(policy=PolicyConfig(checkpoint_every=1000))
    effects = drive(run_task(state, assignment(iterations=100)), [Ack("t1", AckStatus.ACCEPTED)])
    assert [type(e) for e in effects] == [Busy, Exchange]


def test_run_task_resumes_only_remaining_units():
    base = mc_make_payload(200, 1)
    mc_run_chunk(base, 100)
    checkpoint = CheckpointRecord(2, {"hits": base["hits"], "done_iterations": 100}, 100)
    resumed_payload = mc_make_payload(200, 1)
    resumed_payload.update(checkpoint.partial_payload)
    state = ClientState(policy=PolicyConfig(checkpoint_every=50))
    effects = drive(
        run_task(state, assignment(payload=resumed_payload, checkpoint=checkpoint)),
        [Ack("t1", AckStatus.APPLIED), Ack("t1", AckStatus.ACCEPTED)],
    )
    assert state.busy_units_executed == 100  # not 200
    exchanges = [e.message for e in effects if isinstance(e, Exchange)]
    assert exchanges[0].sequence == 3  # continues past the stored sequence
    assert exchanges[0].progress_units == 150
    whole = mc_make_payload(200, 1)
    mc_run_chunk(whole, 200)
    assert exchanges[-1].payload["hits"] == whole["hits"]


def test_run_task_stale_ack_keeps_computing():
    state = ClientState(policy=PolicyConfig(checkpoint_every=50))
    replies = [Ack("t1", AckStatus.STALE), Ack("t1", AckStatus.ACCEPTED)]
    effects = drive(run_task(state, assignment(iterations=100)), replies)
    assert isinstance(effects[-1].message, Final)
    assert state.tasks_completed == 1


def test_run_task_already_complete_abandons_without_final():
    state = ClientState(policy=PolicyConfig(checkpoint_every=50))
    effects = drive(
        run_task(state, assignment(iterations=100)),
        [Ack("t1", AckStatus.ALREADY_COMPLETE)],
    )
    assert isinstance(effects[-1].message, Partial)  # stopped right there
    assert state.tasks_completed == 0


def test_run_task_duplicate_final_not_counted():
    state = sync_state()
    drive(run_task(state, assignment(iterations=10)), [Ack("t1", AckStatus.DUPLICATE)])
    assert state.tasks_completed == 0


def test_fully_checkpointed_task_goes_straight_to_final():
    payload = mc_make_payload(100, 1)
    mc_run_chunk(payload, 100)
    checkpoint = CheckpointRecord(2, {"hits": payload["hits"], "done_iterations": 100}, 100)
    state = sync_state()
    effects = drive(
        run_task(state, assignment(payload=payload, checkpoint=checkpoint)),
        [Ack("t1", AckStatus.ACCEPTED)],
    )
    assert [type(e) for e in effects] == [Exchange]
    assert state.busy_units_executed == 0


# ------------------------------------------------------------ session_process


class ScriptedServer:
    """Drives a session generator like a driver would, with canned tasks."""

    def __init__(self, batches, acks=None):
        self.batches = list(batches)
        self.fed_prefetches = []

    def reply(self, message):
        if isinstance(message, Hello):
            return None
        if isinstance(message, RequestTasks):
            if self.batches:
                return Tasks(self.batches.pop(0))
            return Drained()
        if isinstance(message, (Partial, Final)):
            status = AckStatus.APPLIED if isinstance(message, Partial) else AckStatus.ACCEPTED
            return Ack(message.task_id, status)
        raise AssertionError(f"unexpected message {message}")

    def run(self, state, max_steps=500):
        gen = session_process(state)
        effects = []
        pending_prefetch = None
        try:
            effect = next(gen)
            for _ in range(max_steps):
                effects.append(effect)
                if isinstance(effect, Exchange):
                    reply = self.reply(effect.message)
                    effect = gen.send(reply)
                elif isinstance(effect, StartPrefetch):
                    pending_prefetch = self.reply(effect.message)
                    effect = gen.send(None)
                elif isinstance(effect, AwaitDelivery):
                    assert pending_prefetch is not None, "idle with nothing in flight"
                    deliver_pending(state, pending_prefetch)
                    self.fed_prefetches.append(pending_prefetch)
                    pending_prefetch = None
                    effect = gen.send(None)
                else:  # Busy / Backoff
                    if pending_prefetch is not None:
                        deliver_pending(state, pending_prefetch)
                        self.fed_prefetches.append(pending_prefetch)
                        pending_prefetch = None
                    effect = gen.send(None)
            raise AssertionError("session never finished")
        except StopIteration:
            return effects


def test_session_completes_everything_then_stops():
    batches = [[assignment("a", 10)], [assignment("b", 10)]]
    server = ScriptedServer(batches)
    state = sync_state()
    effects = server.run(state)
    assert state.tasks_completed == 2
    assert isinstance(effects[0].message, Hello)
    finals = [e.message for e in effects if isinstance(e, Exchange) and isinstance(e.message, Final)]
    assert [f.task_id for f in finals] == ["a", "b"]
    # last exchange was the request answered with Drained
    assert isinstance(effects[-1].message, RequestTasks)


def test_session_hello_and_requests_are_idle_spans():
    server = ScriptedServer([[assignment("a", 10)]])
    state = sync_state()
    effects = server.run(state)
    for effect in effects:
        if isinstance(effect, Exchange) and isinstance(effect.message, (Hello, RequestTasks)):
            assert effect.idle


def test_async_session_prefetches_and_never_awaits_with_fast_delivery():
    batches = [
        [assignment(f"t{i}", 10) for i in range(3)],
        [assignment(f"u{i}", 10) for i in range(3)],
    ]
    state = ClientState(
        policy=PolicyConfig(mode=PolicyMode.ASYNC_PREFETCH, batch_size=3, prefetch_threshold=1)
    )
    server = ScriptedServer(batches)
    effects = server.run(state)
    assert state.tasks_completed == 6
    assert any(isinstance(e, StartPrefetch) for e in effects)
    # prefetch replies landed during Busy spans, so the session never idled
    assert not any(isinstance(e, AwaitDelivery) for e in effects)


def test_session_backs_off_on_empty_tasks_reply():
    class DryThenDrained(ScriptedServer):
        def __init__(self):
            super().__init__([])
            self.calls = 0

        def reply(self, message):
            if isinstance(message, RequestTasks):
                self.calls += 1
                return Tasks([]) if self.calls == 1 else Drained()
            return super().reply(message)

    server = DryThenDrained()
    state = sync_state()
    effects = server.run(state)
    assert any(isinstance(e, Backoff) for e in effects)
    assert server.calls == 2


def test_session_abandons_on_kernel_failure_and_moves_on():
    bad = TaskAssignment(task_id="bad", kernel_id="monte_carlo_pi", payload={"junk": 1})
    server = ScriptedServer([[bad], [assignment("good", 10)]])
    state = sync_state()
    effects = server.run(state)
    assert state.tasks_completed == 1
    finals = [e.message for e in effects if isinstance(e, Exchange) and isinstance(e.message, Final)]
    assert [f.task_id for f in finals] == ["good"]
