import math
import random
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from livekv.engine import (MAX_VALUE, BadArgument, CapacityExceeded, Engine, KeyMissing,
                           LockManager, LockTimeout, Transaction, TxnState, TxnStateError)
from livekv.functions import TRANSFORM_VALUE, default_functions
from livekv.generations import PAGE_SIZE, create_store
from livekv.patches import make_patch, PatchCategory


def engine(**kw):
    s = create_store(default_functions(), 16)
    s.pin([range(0, 16)])
    return Engine(s, **kw)


def test_set_get_delete():
    e = engine()
    e.set("a", "1")
    assert e.get("a") == "1"
    e.delete("a")
    with pytest.raises(KeyMissing):
        e.get("a")
    with pytest.raises(KeyMissing):
        e.delete("a")


def test_key_and_value_bounds():
    e = engine()
    with pytest.raises(BadArgument):
        e.set("", "x")
    with pytest.raises(BadArgument):
        e.set("k" * 257, "x")
    with pytest.raises(BadArgument):
        e.set("ké", "x")
    with pytest.raises(BadArgument):
        e.set("k", "x" * (MAX_VALUE + 1))
    e.set("k" * 256, "x" * MAX_VALUE)


def test_large_value_allocates_about_100_pages():
    e = engine()
    before = e.page_count
    e.set("big", "x" * (400 * 1024))
    grown = e.page_count - before
    assert 100 <= grown <= 102
    assert e.get("big") == "x" * (400 * 1024)


def test_page_accounting_monotone_with_slack():
    e = engine()
    total = 0
    last = 0
    for i in range(200):
        v = "y" * random.Random(i).randint(1, 3000)
        e.set(f"k{i}", v)
        total += len(v) + len(f"k{i}")
        assert e.page_count >= last
        last = e.page_count
    assert math.ceil(total / PAGE_SIZE) <= e.page_count <= 2 * math.ceil(total / PAGE_SIZE)


def test_commit_and_rollback():
    e = engine()
    e.set("a", "old")
    t = e.begin()
    e.set("a", "new", t)
    assert e.get("a") == "old"  # uncommitted write invisible outside
    assert e.get("a", t) == "new"
    e.commit(t)
    assert e.get("a") == "new" and t.state is TxnState.COMMITTED and not t.locks
    t = e.begin()
    e.set("a", "again", t)
    e.delete("a", t)
    with pytest.raises(KeyMissing):
        e.get("a", t)
    e.rollback(t)
    assert e.get("a") == "new"
    with pytest.raises(TxnStateError):
        e.commit(t)


def test_reentrant_lock():
    e = engine()
    t = e.begin()
    e.lock(t, "k")
    e.lock(t, "k")
    assert e.locks.holder("k") is t
    e.commit(t)
    assert e.locks.holder("k") is None


def test_fifo_grant_order():
    lm = LockManager(5.0)
    t1, t2, t3 = Transaction(), Transaction(), Transaction()
    lm.acquire(t1, "k")
    order = []

    def waiter(t, name):
        lm.acquire(t, "k")
        order.append(name)
        time.sleep(0.01)
        lm.release_all(t)

    a = threading.Thread(target=waiter, args=(t2, "t2"))
    a.start()
    while len(lm.waiters("k")) < 1:
        time.sleep(0.001)
    b = threading.Thread(target=waiter, args=(t3, "t3"))
    b.start()
    while len(lm.waiters("k")) < 2:
        time.sleep(0.001)
    assert lm.waiters("k") == [t2, t3]
    lm.release_all(t1)
    a.join(5)
    b.join(5)
    assert order == ["t2", "t3"]


def test_lock_timeout_aborts_transaction():
    e = engine(lock_wait_timeout=0.05)
    t1, t2 = e.begin(), e.begin()
    e.lock(t1, "k")
    start = time.monotonic()
    with pytest.raises(LockTimeout):
        e.lock(t2, "k")
    assert time.monotonic() - start >= 0.05
    assert t2.state is TxnState.ABORTED
    assert e.locks.waiters("k") == []
    e.commit(t1)


def test_wait_hook_brackets_lock_wait():
    e = engine(lock_wait_timeout=0.02)
    t1, t2 = e.begin(), e.begin()
    e.lock(t1, "k")
    seen = []

    class Hook:
        def __enter__(self):
            seen.append("enter")

        def __exit__(self, *a):
            seen.append("exit")

    with pytest.raises(LockTimeout):
        e.lock(t2, "k", wait=Hook)
    assert seen == ["enter", "exit"]


def test_sleep_query():
    e = engine()
    start = time.monotonic()
    e.sleep_query(0)
    e.sleep_query(30)
    assert time.monotonic() - start >= 0.03
    with pytest.raises(BadArgument):
        e.sleep_query(-1)


def test_preload():
    e = engine()
    e.preload(1000)
    assert e.page_count == 1000
    with pytest.raises(BadArgument):
        e.preload(10)
    e.preload(1000)
    small = engine(max_pages=50)
    with pytest.raises(CapacityExceeded):
        small.preload(51)


def test_clone_cost_tracks_preloaded_state():
    costs = {}
    for pages in (500, 4000):
        e = engine()
        e.preload(pages)
        reps = []
        for _ in range(3):
            e.store.clone_generation(0)
            reps.append(e.store.clone_cost)
        costs[pages] = min(reps)
    assert 4 <= costs[4000] / costs[500] <= 16


def test_transform_follows_generation():
    e = engine()
    e.set("a", "abc")
    p = make_patch("up", PatchCategory.THREAD_LOCAL, 64, [("transform_value", "v1-upper")])
    g = e.store.clone_generation(0)
    e.store.apply_patch_to_generation(g, p)
    assert e.get("a", gen=0) == "abc"
    assert e.get("a", gen=g) == "ABC#v1-upper"
    assert e.store.resolve(g, TRANSFORM_VALUE).tag == "v1-upper"


def test_scan_unchanged_by_patching():
    e = engine()
    for i in range(50):
        e.set(f"k{i}", str(i))
    before = e.scan()
    g = e.store.clone_generation(0)
    e.store.apply_patch_to_generation(
        g, make_patch("x", PatchCategory.THREAD_LOCAL, 8000, [("render_version", "x")]))
    e.store.apply_patch_in_place(
        make_patch("y", PatchCategory.PROCESS, 8000, [("render_version", "y")]))
    assert e.scan() == before


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_counter_transactions_serializable(nthreads, nkeys, seed):
    """Concurrent read-modify-write transactions on shared counters never lose updates."""
    e = engine(lock_wait_timeout=5.0)
    keys = [f"c{i}" for i in range(nkeys)]
    for k in keys:
        e.set(k, "0")
    committed = {k: 0 for k in keys}
    mu = threading.Lock()

    def worker(i):
        rng = random.Random(seed + i)
        for _ in range(15):
            touch = sorted(rng.sample(keys, rng.randint(1, nkeys)))
            t = e.begin()
            for k in touch:
                v = int(e.get(k, t))
                e.set(k, str(v + 1), t)
            if rng.random() < 0.3:
                e.rollback(t)
                continue
            e.commit(t)
            with mu:
                for k in touch:
                    committed[k] += 1

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(nthreads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(30)
    assert {k: int(v) for k, v in e.scan().items()} == committed


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["set", "del", "txn-set", "txn-rollback"]),
                          st.sampled_from(["a", "b", "c"]), st.text("xyz", max_size=5)),
                max_size=30))
def test_sequential_model(ops):
    e = engine()
    model = {}
    for op, k, v in ops:
        if op == "set":
            e.set(k, v)
            model[k] = v
        elif op == "del":
            if k in model:
                e.delete(k)
                del model[k]
            else:
                with pytest.raises(KeyMissing):
                    e.delete(k)
        elif op == "txn-set":
            t = e.begin()
            e.set(k, v, t)
            e.commit(t)
            model[k] = v
        else:
            t = e.begin()
            e.set(k, v + "!", t)
            e.rollback(t)
    assert e.scan() == model
