import asyncio

import pytest

from services.scheduler import SchedulerService


def test_catch_up_runs_missed_slots_in_order():
    scheduler = SchedulerService()
    calls = []
    scheduler.add_job("tick", lambda slot: calls.append(("tick", slot)), 10, start=0)
    scheduler.add_job("weekly", lambda slot: calls.append(("weekly", slot)), 25, start=0)

    executed = scheduler.run_due(30)
    assert executed == [("tick", 0), ("weekly", 0), ("tick", 10), ("tick", 20), ("weekly", 25), ("tick", 30)]
    assert calls == executed
    assert scheduler.get_job_status("tick")["next_run"] == 40
    assert scheduler.run_due(39) == []


def test_failing_job_is_rescheduled():
    scheduler = SchedulerService()

    def boom(slot):
        raise RuntimeError(f"failed at {slot}")

    scheduler.add_job("boom", boom, 5, start=0)
    assert scheduler.run_due(7) == [("boom", 0), ("boom", 5)]
    status = scheduler.get_job_status("boom")
    assert status["last_run"] is None
    assert status["next_run"] == 10


def test_deferred_first_run():
    scheduler = SchedulerService()
    scheduler.add_job("late", lambda slot: None, 60, start=100, run_immediately=False)
    assert scheduler.run_due(159) == []
    assert scheduler.run_due(160) == [("late", 160)]


def test_remove_job_and_status():
    scheduler = SchedulerService()
    scheduler.add_job("a", lambda slot: None, 1, start=0)
    assert set(scheduler.get_all_jobs()) == {"a"}
    scheduler.remove_job("a")
    scheduler.remove_job("a")
    assert scheduler.get_job_status("a") is None
    assert scheduler.run_due(100) == []


def test_interval_must_be_positive():
    with pytest.raises(ValueError):
        SchedulerService().add_job("bad", lambda slot: None, 0, start=0)


def test_async_loop_runs_due_jobs():
    scheduler = SchedulerService()
    slots = []
    scheduler.add_job("job", slots.append, 3600, start=1_000)

    async def scenario():
        await scheduler.start(clock=lambda: 1_000.0)
        for _ in range(100):
            if slots:
                break
            await asyncio.sleep(0.01)
        await scheduler.stop()

    asyncio.run(scenario())
    assert slots == [1_000]
    assert not scheduler.running
    assert scheduler.tasks == []
