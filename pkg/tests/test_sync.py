import numpy as np
import pytest

from mclivo.errors import EmptyFrameList, ImuGap, UnsyncedFrames
from mclivo.sync import (CameraFrame, ImuSample, LidarPoints, PacketAssembler,
                         TimedPoint, assemble_packet, assign_point,
                         assign_points, load_sequence, read_pgm, write_pgm,
                         write_sequence)


def imu_stream(t0, t1, rate=200.0):
    n = int(round((t1 - t0) * rate)) + 1
    return [ImuSample(t0 + k / rate, np.zeros(3), np.array([0, 0, 9.81]))
            for k in range(n)]


def frames_at(t, n=4):
    return [CameraFrame(i, np.zeros((4, 4)), 0.01, t) for i in range(n)]


def test_assign_tie_goes_to_earlier():
    assert assign_point(0.10, [0.0, 0.2]) == 0
    assert assign_point(0.19, [0.0, 0.2]) == 1


def test_assign_empty():
    with pytest.raises(EmptyFrameList):
        assign_point(0.1, [])


def test_assign_matches_brute_force():
    rng = np.random.default_rng(0)
    frames = np.sort(rng.uniform(0, 10, 25))
    ts = rng.uniform(-1, 11, 10_000)
    ts[:50] = frames[rng.integers(0, 24, 50)] + np.diff(frames)[rng.integers(0, 24, 50)] / 2
    fast = assign_points(ts, frames)
    for t, got in zip(ts, fast):
        d = np.abs(t - frames)
        want = int(np.flatnonzero(d == d.min())[0])
        assert got == want
        assert assign_point(t, list(frames)) == want


def test_assign_order_independent():
    rng = np.random.default_rng(1)
    frames = np.sort(rng.uniform(0, 1, 5))
    ts = rng.uniform(0, 1, 200)
    perm = rng.permutation(200)
    np.testing.assert_array_equal(assign_points(ts, frames)[perm],
                                  assign_points(ts[perm], frames))


def test_assemble_valid_packet():
    pts = [TimedPoint(np.array([1.0, 0, 0]), t) for t in np.linspace(0.01, 0.1, 10)]
    pkt = assemble_packet(pts, imu_stream(0.0, 0.1), frames_at(0.1), t_prev=0.0, epoch=1)
    assert len(pkt.points) == 10
    assert set(pkt.segment.tolist()) == {0, 1}
    assert pkt.trigger == 0.1


def test_assemble_unsynced():
    frames = frames_at(0.1)
    frames[2].t = 0.105
    with pytest.raises(UnsyncedFrames):
        assemble_packet([], imu_stream(0.0, 0.1), frames, t_prev=0.0)


def test_assemble_imu_gap():
    imu = imu_stream(0.0, 0.1)
    del imu[5:9]
    with pytest.raises(ImuGap):
        assemble_packet([], imu, frames_at(0.1), t_prev=0.0, nominal_period=0.005)


def test_stream_partition_and_imu_overlap():
    rng = np.random.default_rng(2)
    ts = np.sort(rng.uniform(0.0, 0.3, 3000))
    pts = LidarPoints(rng.normal(size=(3000, 3)), ts)
    imu = imu_stream(0.0, 0.3)
    asm = PacketAssembler(pts, imu, nominal_period=0.005)
    packets = [asm.packet(k, 0.1 * (k - 1), frames_at(0.1 * k)) for k in (1, 2, 3)]
    total = sum(len(p.points) for p in packets)
    assert total == np.count_nonzero(ts > 0.0)
    seen = np.concatenate([p.points.t for p in packets])
    assert len(np.unique(seen)) == len(seen)
    for a, b in zip(packets, packets[1:]):
        assert a.imu[-1] is b.imu[0]
        assert a.imu[-2] is not b.imu[1]
    for p in packets:
        assert p.imu[0].t <= p.t_prev + 1e-12 and p.imu[-1].t >= p.t - 1e-12
        assert p.points.t.min() >= p.imu[0].t and p.points.t.max() <= p.imu[-1].t
        # replay oracle for the within-packet segmentation
        want = [0 if (t - p.t_prev) <= (p.t - t) else 1 for t in p.points.t]
        np.testing.assert_array_equal(p.segment, want)


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 48).reshape(6, 8)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img, atol=1 / 65535)


def test_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    ts = np.sort(rng.uniform(0.0, 0.2, 50))
    pts = LidarPoints(rng.normal(size=(50, 3)), ts, rng.uniform(size=50))
    imu = imu_stream(0.0, 0.2)
    frames = [[CameraFrame(i, rng.uniform(size=(5, 7)), 0.01 * (i + 1), t) for i in range(2)]
              for t in (0.0, 0.1, 0.2)]
    write_sequence(tmp_path, pts, imu, frames)
    p2, imu2, frames2 = load_sequence(tmp_path)
    np.testing.assert_allclose(p2.xyz, pts.xyz)
    np.testing.assert_allclose(p2.t, pts.t)
    assert len(imu2) == len(imu)
    assert len(frames2) == 3 and len(frames2[0]) == 2
    np.testing.assert_allclose(frames2[2][1].image, frames[2][1].image, atol=1e-4)
    assert frames2[1][1].exposure == pytest.approx(0.02)
