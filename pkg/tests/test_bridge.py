"""Broker/client tests: delivery, ordering, typing, delays, bag round trips."""

import threading
import time

import numpy as np
import pytest

from rovtwin.bag import Bag, BagFormatError, BagRecorder, bag_replay, load_bag
from rovtwin.bridge import (
    Broker,
    BridgeClient,
    DelayCollector,
    MissingTrafficError,
    build_delay_report,
    measure_delays,
)
from rovtwin.messages import (
    ImageFrame,
    MsgType,
    PointCloud,
    Pose,
    Wrench,
)


@pytest.fixture()
def broker():
    b = Broker(tcp_port=0, ws_port=0).start()
    yield b
    b.stop()


def connect(broker, transport="tcp", **kw):
    if transport == "ws":
        host, port = broker.ws_address
    else:
        host, port = broker.tcp_address
    return BridgeClient(host, port, transport=transport, **kw)


class Sink:
    def __init__(self):
        self.envelopes = []
        self.event = threading.Event()
        self.want = 0

    def expect(self, n):
        self.want = n
        if len(self.envelopes) >= n:
            self.event.set()
        else:
            self.event.clear()

    def __call__(self, env):
        self.envelopes.append(env)
        if self.want and len(self.envelopes) >= self.want:
            self.event.set()

    def wait(self, timeout=10.0):
        assert self.event.wait(timeout), f"got {len(self.envelopes)}/{self.want}"


def test_thousand_wrenches_delivered_in_order(broker):
    sub = connect(broker, name="sub")
    sink = Sink()
    sink.expect(1000)
    sub.subscribe("cmd/wrench", sink)
    pub = connect(broker, name="pub")
    for i in range(1000):
        pub.publish("cmd/wrench", MsgType.WRENCH, Wrench((float(i), 0, 0)))
    sink.wait()
    assert len(sink.envelopes) == 1000
    assert [e.seq for e in sink.envelopes] == list(range(1000))
    assert [e.payload.force[0] for e in sink.envelopes] == [float(i) for i in range(1000)]
    pub.close()
    sub.close()


def test_publish_without_subscribers_is_fine(broker):
    pub = connect(broker)
    seq = pub.publish("lonely", MsgType.WRENCH, Wrench())
    assert seq == 0
    time.sleep(0.05)
    assert pub.errors == []
    pub.close()


def test_type_conflict_reported(broker):
    pub = connect(broker)
    pub.publish("typed", MsgType.WRENCH, Wrench())
    pub.publish("typed", MsgType.POSE, Pose((0, 0, 0)))
    deadline = time.time() + 5
    while not pub.errors and time.time() < deadline:
        time.sleep(0.01)
    assert pub.errors and pub.errors[0]["code"] == "TYPE_CONFLICT"
    pub.close()


def test_no_replay_of_past_messages(broker):
    pub = connect(broker)
    for _ in range(5):
        pub.publish("past", MsgType.WRENCH, Wrench())
    time.sleep(0.1)
    sub = connect(broker)
    sink = Sink()
    sub.subscribe("past", sink)
    pub.publish("past", MsgType.WRENCH, Wrench())
    sink.expect(1)
    sink.wait()
    assert len(sink.envelopes) == 1
    assert sink.envelopes[0].seq == 5
    pub.close()
    sub.close()


def test_two_subscribers_identical_streams(broker):
    subs, sinks = [], []
    for i in range(2):
        c = connect(broker, name=f"sub{i}")
        s = Sink()
        s.expect(200)
        c.subscribe("fan", s)
        subs.append(c)
        sinks.append(s)
    pub = connect(broker)
    for i in range(200):
        pub.publish("fan", MsgType.WRENCH, Wrench((i, 0, 0)))
    for s in sinks:
        s.wait()
    assert sinks[0].envelopes == sinks[1].envelopes
    for c in subs + [pub]:
        c.close()


def test_unsubscribe_stops_delivery(broker):
    sub = connect(broker)
    sink = Sink()
    sink.expect(3)
    sub.subscribe("onoff", sink)
    pub = connect(broker)
    for _ in range(3):
        pub.publish("onoff", MsgType.WRENCH, Wrench())
    sink.wait()
    sub.unsubscribe("onoff")
    for _ in range(3):
        pub.publish("onoff", MsgType.WRENCH, Wrench())
    time.sleep(0.2)
    assert len(sink.envelopes) == 3
    pub.close()
    sub.close()


def test_websocket_transport_end_to_end(broker):
    sub = connect(broker, transport="ws", name="wssub")
    sink = Sink()
    sink.expect(50)
    sub.subscribe("wstopic", sink)
    pub = connect(broker, transport="ws", name="wspub")
    cloud = PointCloud(np.random.default_rng(0).normal(size=(500, 3)), 1, 0)
    for i in range(50):
        pub.publish("wstopic", MsgType.POINTCLOUD, cloud)
    sink.wait()
    assert len(sink.envelopes) == 50
    assert sink.envelopes[0].payload == cloud
    pub.close()
    sub.close()


def test_mixed_transports_share_topics(broker):
    ws_sub = connect(broker, transport="ws")
    sink = Sink()
    sink.expect(5)
    ws_sub.subscribe("mixed", sink)
    tcp_pub = connect(broker, transport="tcp")
    for i in range(5):
        tcp_pub.publish("mixed", MsgType.WRENCH, Wrench((i, 0, 0)))
    sink.wait()
    assert [e.payload.force[0] for e in sink.envelopes] == [0, 1, 2, 3, 4]
    ws_sub.close()
    tcp_pub.close()


def test_pubacks_count_commands(broker):
    pub = connect(broker)
    for _ in range(100):
        pub.publish("acked", MsgType.WRENCH, Wrench())
    deadline = time.time() + 5
    while pub.puback_count < 100 and time.time() < deadline:
        time.sleep(0.01)
    assert pub.puback_count == 100
    pub.close()


def test_echo_round_trip(broker):
    c = connect(broker)
    rtt = c.echo()
    assert 0 < rtt < 1.0
    c.close()


def test_queue_overflow_closes_subscriber():
    b = Broker(tcp_port=0, ws_port=None, queue_limit=8).start()
    try:
        sub = connect(b, name="slowsub")
        blocker = threading.Event()
        first = threading.Event()

        def slow(env):
            first.set()
            blocker.wait(20)

        sub.subscribe("burst", slow)
        pub = connect(b, name="burstpub")
        # ~190 KB frames; volume far beyond the OS socket buffers plus the
        # 8-slot queue, so the broker must hit the overflow path
        payload = PointCloud(np.zeros((12_000, 3)), 0, 0)
        for i in range(300):
            pub.publish("burst", MsgType.POINTCLOUD, payload)
        first.wait(5)
        # broker must evict the stuck subscriber rather than drop frames
        deadline = time.time() + 10
        while b.topic_stats()["burst"]["subscribers"] > 0 and time.time() < deadline:
            time.sleep(0.02)
        assert b.topic_stats()["burst"]["subscribers"] == 0
        blocker.set()  # unblock the client reader so it can observe the close
        deadline = time.time() + 10
        while sub.alive and time.time() < deadline:
            time.sleep(0.02)
        assert not sub.alive
        pub.close()
    finally:
        b.stop()


# -- delay measurement --------------------------------------------------------


def test_measure_delays_collects_window(broker):
    collector = DelayCollector()
    sub = connect(broker, name="meter", collector=collector)
    for topic in ("d/cloud", "d/img", "d/pose", "d/wrench"):
        sub.subscribe(topic)
    pub = connect(broker)
    stop = threading.Event()

    def traffic():
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.normal(size=(2000, 3)), 0, 0)
        img = ImageFrame(64, 48, bytes(64 * 48))
        while not stop.is_set():
            pub.publish("d/cloud", MsgType.POINTCLOUD, cloud)
            pub.publish("d/img", MsgType.IMAGE, img)
            for _ in range(2):
                pub.publish("d/pose", MsgType.POSE, Pose((0, 0, -5)))
                pub.publish("d/wrench", MsgType.WRENCH, Wrench())
            time.sleep(0.01)

    t = threading.Thread(target=traffic, daemon=True)
    t.start()
    try:
        report = measure_delays(collector, window=15, timeout=20.0)
    finally:
        stop.set()
        t.join()
    by_type = report.by_type()
    assert set(by_type) == {"POINTCLOUD", "IMAGE", "POSE", "WRENCH"}
    for s in by_type.values():
        assert s.n >= 15
        assert s.mean_ms > 0
    assert by_type["POINTCLOUD"].mean_bytes > by_type["IMAGE"].mean_bytes
    csv_text = report.to_csv()
    assert csv_text.splitlines()[0] == "msg_type,n,mean_ms,median_ms,p95_ms,mean_bytes"
    assert len(csv_text.splitlines()) == 5
    pub.close()
    sub.close()


def test_measure_delays_missing_type(broker):
    collector = DelayCollector()
    sub = connect(broker, collector=collector)
    sub.subscribe("only/wrench")
    pub = connect(broker)
    pub.publish("only/wrench", MsgType.WRENCH, Wrench())
    with pytest.raises(MissingTrafficError) as err:
        measure_delays(collector, window=1, timeout=0.3)
    assert err.value.msg_type in ("POINTCLOUD", "IMAGE", "POSE")
    pub.close()
    sub.close()


def test_equal_payload_control_experiment(broker):
    """With identical tiny payloads the per-type delays should be comparable."""
    collector = DelayCollector()
    sub = connect(broker, name="ctrl", collector=collector)
    for topic in ("c/cloud", "c/img", "c/pose", "c/wrench"):
        sub.subscribe(topic)
    pub = connect(broker)
    cloud = PointCloud(np.zeros((4, 3)), 0, 0)  # ~100-byte payloads everywhere
    img = ImageFrame(8, 6, bytes(48))
    for _ in range(60):
        pub.publish("c/cloud", MsgType.POINTCLOUD, cloud)
        pub.publish("c/img", MsgType.IMAGE, img)
        pub.publish("c/pose", MsgType.POSE, Pose((0, 0, -5)))
        pub.publish("c/wrench", MsgType.WRENCH, Wrench())
        time.sleep(0.002)
    report = measure_delays(collector, window=50, timeout=20.0)
    means = [s.mean_ms for s in report.stats]
    assert max(means) <= 3 * min(means) + 0.2  # small absolute floor for jitter
    pub.close()
    sub.close()


# -- bag record / replay --------------------------------------------------------


def test_bag_record_replay_round_trip(broker, tmp_path):
    recorder = BagRecorder()
    sub = connect(broker, name="rec")
    sub.subscribe("bag/topic", recorder.on_envelope)
    pub = connect(broker)
    rng = np.random.default_rng(1)
    for i in range(100):
        pub.publish("bag/topic", MsgType.POINTCLOUD, PointCloud(rng.normal(size=(10, 3)), i, i))
    deadline = time.time() + 10
    while len(recorder.bag) < 100 and time.time() < deadline:
        time.sleep(0.01)
    bag = recorder.snapshot()
    assert len(bag) == 100

    path = tmp_path / "run.jsonl"
    bag.save(path)
    loaded = load_bag(path)
    assert len(loaded) == 100
    assert [e.payload for _, e in loaded.records] == [e.payload for _, e in bag.records]

    sink = Sink()
    sink.expect(100)
    sub2 = connect(broker, name="replay-sub")
    sub2.subscribe("bag/topic", sink)
    summary = bag_replay(loaded, rate=100.0, publisher=pub)
    assert summary.count == 100
    sink.wait()
    assert [e.payload for e in sink.envelopes] == [e.payload for _, e in bag.records]
    pub.close()
    sub.close()
    sub2.close()


def test_bag_replay_rate_scales_duration(broker):
    bag = Bag(created_ns=0)
    t0 = 1_000_000_000
    for i in range(21):
        bag.records.append((t0 + i * 20_000_000, _wrench_env(i)))  # 20 ms gaps, 0.4 s span
    pub = connect(broker)
    summary = bag_replay(bag, rate=2.0, publisher=pub)
    assert summary.count == 21
    assert abs(summary.duration_s - 0.2) <= 0.02 + 0.1 * 0.2
    pub.close()


def _wrench_env(i):
    from rovtwin.messages import Envelope

    return Envelope("bag/w", MsgType.WRENCH, i, 0, Wrench((i, 0, 0)))


def test_empty_bag_replay(broker, tmp_path):
    bag = Bag(created_ns=5)
    path = tmp_path / "empty.jsonl"
    bag.save(path)
    loaded = load_bag(path)
    pub = connect(broker)
    summary = bag_replay(loaded, rate=1.0, publisher=pub)
    assert summary.count == 0
    pub.close()


def test_malformed_bag_line_reports_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"created_ns":0,"topics":{},"count":2}\n'
        '{"recv_ns":1,"envelope":{"topic":"t","msg_type":"WRENCH","seq":0,"stamp_ns":0,'
        '"payload":{"force":[0,0,0],"torque":[0,0,0],"stamp_ns":0}}}\n'
        "not json at all\n"
    )
    with pytest.raises(BagFormatError) as err:
        load_bag(path)
    assert err.value.line == 3
