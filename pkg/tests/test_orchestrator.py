import random
import time

import pytest

from dpcache.catalog import Catalog
from dpcache.core import PromptLayout, derive_ranges, prefix_keys
from dpcache.engine import EngineCost, MockEngine
from dpcache.orchestrator import (
    CaseLabel,
    ClientConfig,
    EdgeClient,
    LatencyBreakdown,
    SyncWorker,
    probe_ranges,
    sync_loop,
)
from dpcache.simclock import DeviceProfile, TransferModel
from dpcache.store import LocalConnector, ServerState, StateBlob, TcpConnector

from conftest import random_layout

PROFILE = DeviceProfile(
    "test",
    EngineCost(prefill_ms_per_token=10, response_ms_per_token=50, sample_ms_per_token=2, tokenize_ms=1),
    TransferModel(fixed_rtt_ms=5, bytes_per_ms=1000),
    state_bytes_per_token=100,
    state_base_bytes=1000,
    bloom_probe_ms=0.1,
    reference_tokens=50,
)


def layout(seed=0, n_examples=3, question=None):
    rng = random.Random(seed)
    seg = lambda n: tuple(rng.randrange(1, 1000) for _ in range(n))  # noqa: E731
    q = seg(6) if question is None else question
    return PromptLayout(seg(8), tuple(seg(12) for _ in range(n_examples)), q)


def make_client(meta, state=None, config=None, name="c"):
    state = state if state is not None else ServerState(Catalog.new(1000, 0.01))
    conn = LocalConnector(state)
    return EdgeClient(meta, PROFILE, conn, Catalog(state.catalog.params), config, name=name), state


def reference_answer(meta, lay, max_new=1):
    eng = MockEngine(meta.vocab_size, PROFILE.engine_cost)
    s, _ = eng.prefill(eng.empty_state(), lay.full())
    return eng.generate(s, max_new).tokens


def test_cold_query_uploads_every_range(meta):
    client, state = make_client(meta)
    lay = layout()
    res = client.run_query(lay)
    assert res.case is CaseLabel.CASE1_MISS
    assert res.matched_tokens == 0
    assert res.uploads_performed == 4 == len(state)
    assert res.breakdown.p_decode_ms == 10 * len(lay)
    assert res.breakdown.store_ms == 0
    assert res.answer_tokens == reference_answer(meta, lay)


def test_single_example_uploads_three(meta):
    client, state = make_client(meta)
    assert client.run_query(layout(n_examples=1)).uploads_performed == 3


def test_repeat_is_full_hit(meta):
    client, _ = make_client(meta)
    lay = layout()
    first = client.run_query(lay)
    again = client.run_query(lay)
    assert again.case is CaseLabel.CASE5_FULL
    assert again.breakdown.p_decode_ms == 0
    assert again.matched_tokens == len(lay)
    assert again.answer_tokens == first.answer_tokens
    assert again.uploads_performed == 0
    assert again.breakdown.store_ms == PROFILE.transfer_ms_for_tokens(len(lay))
    assert again.probes == 1


def test_same_domain_new_question_hits_examples(meta):
    client, _ = make_client(meta)
    a = layout(question=(1, 2, 3))
    b = layout(question=(4, 5, 6, 7))
    client.run_query(a)
    res = client.run_query(b)
    assert res.case is CaseLabel.CASE4_INSTR_ALL_EXAMPLES
    assert res.matched_tokens == len(b) - 4
    assert res.breakdown.p_decode_ms == 10 * 4
    assert res.uploads_performed == 1
    assert res.answer_tokens == reference_answer(meta, b)


def test_peer_benefits_after_sync(meta):
    state = ServerState(Catalog.new(1000, 0.01))
    a, _ = make_client(meta, state, name="a")
    b, _ = make_client(meta, state, name="b")
    lay = layout()
    a.run_query(lay)
    assert not b.catalog.contains(prefix_keys(meta, lay.full(), [len(lay)])[0])
    SyncWorker(b.catalog, b.connector).step()
    assert b.run_query(lay).case is CaseLabel.CASE5_FULL


def test_probe_ranges_ordering_and_threshold(meta):
    lay = layout()
    ranges = derive_ranges(lay)
    keys = prefix_keys(meta, lay.full(), [r.end_index for r in ranges])
    got = probe_ranges(ranges, keys, lambda k: True)
    assert [r.label for r, _ in got] == sorted((r.label for r in ranges), reverse=True)
    only_instr = {keys[0]}
    assert probe_ranges(ranges, keys, only_instr.__contains__, min_match_tokens=len(lay.instruction) + 1) == []
    assert probe_ranges(ranges, keys, lambda k: False) == []


def test_bloom_cost_per_probe_and_no_network_on_negatives(meta):
    client, state = make_client(meta)
    conn = client.connector
    res = client.run_query(layout())
    assert res.probes == 4
    assert res.breakdown.bloom_ms == pytest.approx(4 * PROFILE.bloom_probe_ms)
    assert res.downloads == 0 and res.breakdown.store_ms == 0
    # only the uploads touched the store
    assert conn.requests == res.uploads_performed


def test_min_match_threshold_skips_short_ranges(meta):
    lay = layout()
    client, _ = make_client(meta, config=ClientConfig(min_match_tokens=len(lay.instruction) + 1))
    client.run_query(layout(question=(1,)))
    # only the shared instruction range would qualify by content; it is below threshold
    other = PromptLayout(lay.instruction, ((5,) * 12,), (6,))
    res = client.run_query(other)
    assert res.case is CaseLabel.CASE1_MISS


def test_injected_false_positive_adds_one_download(meta):
    lay = layout()
    full_key = prefix_keys(meta, lay.full(), [len(lay)])[0]
    cfg = ClientConfig()
    client, _ = make_client(meta, config=cfg)
    # force the full-prompt probe (and only it) to report present
    real = client.probe
    client.probe = lambda k: True if k == full_key else real(k)
    clean, _ = make_client(meta)
    base = clean.run_query(lay)
    res = client.run_query(lay)
    assert res.false_positives == 1 and res.downloads == 1
    assert res.breakdown.store_ms - base.breakdown.store_ms == pytest.approx(PROFILE.transfer_ms_for_tokens(len(lay)))
    for field in ("token_ms", "bloom_ms", "p_decode_ms", "r_decode_ms", "sample_ms"):
        assert getattr(res.breakdown, field) == getattr(base.breakdown, field)
    assert res.answer_tokens == base.answer_tokens
    assert res.case is base.case
    assert res.uploads_performed == base.uploads_performed


def test_fp_falls_back_to_shorter_range(meta):
    client, state = make_client(meta)
    a = layout(question=(1, 2))
    client.run_query(a)
    b = layout(question=(3, 4))
    full_key = prefix_keys(meta, b.full(), [len(b)])[0]
    real = client.probe
    client.probe = lambda k: True if k == full_key else real(k)
    res = client.run_query(b)
    assert res.false_positives == 1
    assert res.case is CaseLabel.CASE4_INSTR_ALL_EXAMPLES


def test_full_decode_on_fp_skips_shorter_to_full_decode(meta):
    client, state = make_client(meta, config=ClientConfig(full_decode_on_fp=True))
    client.run_query(layout(question=(1, 2)))
    b = layout(question=(3, 4))
    full_key = prefix_keys(meta, b.full(), [len(b)])[0]
    real = client.probe
    client.probe = lambda k: True if k == full_key else real(k)
    res = client.run_query(b)
    assert res.case is CaseLabel.CASE1_MISS
    assert res.breakdown.p_decode_ms == 10 * len(b)
    assert res.answer_tokens == reference_answer(meta, b)


def test_forged_blob_is_treated_as_miss(meta):
    client, state = make_client(meta)
    lay = layout()
    key = prefix_keys(meta, lay.full(), [len(lay)])[0]
    # digest matches the key but the stored prefix is someone else's
    forged = StateBlob(key.digest, (1, 2, 3), MockEngine().save_state(MockEngine().empty_state()))
    state.put(key, forged.encode())
    SyncWorker(client.catalog, client.connector).step()
    res = client.run_query(lay)
    assert res.false_positives == 1
    assert res.case is CaseLabel.CASE1_MISS
    assert res.answer_tokens == reference_answer(meta, lay)
    # the bad entry was replaced by a good one
    assert client.run_query(lay).case is CaseLabel.CASE5_FULL


def test_store_unavailable_degrades(meta):
    client, state = make_client(meta)
    lay = layout()
    client.run_query(lay)
    client.connector.available = False
    res = client.run_query(lay)
    assert res.degraded and res.case is CaseLabel.CASE1_MISS
    assert res.uploads_performed == 0
    assert res.answer_tokens == reference_answer(meta, lay)


def test_no_store_at_all(meta):
    client = EdgeClient(meta, PROFILE, None, Catalog.new(1000, 0.01))
    res = client.run_query(layout())
    assert res.case is CaseLabel.CASE1_MISS and res.degraded and res.uploads_performed == 0


def test_upload_attribution_modes(meta):
    bg, _ = make_client(meta)
    tt, _ = make_client(meta, config=ClientConfig(upload_attribution="ttft"))
    lay = layout()
    a, b = bg.run_query(lay), tt.run_query(lay)
    expected = sum(PROFILE.transfer_ms_for_tokens(r.end_index) for r in derive_ranges(lay))
    assert a.breakdown.upload_ms == pytest.approx(expected)
    assert a.breakdown.store_ms == 0
    assert b.breakdown.store_ms == pytest.approx(expected)
    assert b.breakdown.ttft_ms - a.breakdown.ttft_ms == pytest.approx(expected)


def test_breakdown_identities():
    bd = LatencyBreakdown(1, 2, 3, 4, 5, 6, upload_ms=100)
    assert bd.ttft_ms == 10 and bd.ttlt_ms == 21


def test_output_equivalence_under_faults(meta):
    rng = random.Random(21)
    prompts = [random_layout(rng) for _ in range(10)]
    stream = [rng.choice(prompts) for _ in range(80)]
    expected = [reference_answer(meta, p) for p in stream]
    client, _ = make_client(meta, config=ClientConfig(inject_fp_rate=0.3, fp_seed=4))
    got = []
    for p in stream:
        client.connector.available = rng.random() > 0.2
        got.append(client.run_query(p).answer_tokens)
    assert got == expected


def test_sync_worker_step_and_not_modified(meta):
    state = ServerState(Catalog.new(1000, 0.01))
    peer, _ = make_client(meta, state)
    local = Catalog(state.catalog.params)
    worker = SyncWorker(local, LocalConnector(state))
    assert worker.step() is False and worker.bytes_received == 0
    lay = layout()
    peer.run_query(lay)
    assert worker.step() is True
    key = prefix_keys(meta, lay.full(), [len(lay)])[0]
    assert local.contains(key)
    before = worker.bytes_received
    assert worker.step() is False
    assert worker.bytes_received == before


def test_sync_worker_survives_outage(meta):
    state = ServerState(Catalog.new(1000, 0.01))
    conn = LocalConnector(state)
    local = Catalog(state.catalog.params)
    worker = SyncWorker(local, conn)
    conn.available = False
    for _ in range(3):
        assert worker.step() is False
    assert worker.failures == 3
    state.put(*_one_blob(meta))
    conn.available = True
    assert worker.step() is True


def _one_blob(meta):
    from dpcache.core import cache_key

    blob = StateBlob.build(meta, [1, 2], b"p")
    return cache_key(meta, [1, 2]), blob.encode()


def test_sync_loop_thread_over_tcp(server, meta):
    local = Catalog(server.state.catalog.params)
    worker = sync_loop(local, TcpConnector(server.address), interval_s=0.01)
    try:
        key, raw = _one_blob(meta)
        with TcpConnector(server.address) as c:
            c.put_raw(key, raw)
        deadline = time.time() + 5
        while not local.contains(key) and time.time() < deadline:
            time.sleep(0.005)
        assert local.contains(key)
    finally:
        worker.stop()


def test_sync_replaces_catalog_on_param_change(meta):
    state = ServerState(Catalog.new(5000, 0.01))
    state.put(*_one_blob(meta))
    local = Catalog.new(1000, 0.01)
    SyncWorker(local, LocalConnector(state)).step()
    assert local.params.same_shape(state.catalog.params)
    assert local.contains(_one_blob(meta)[0])
