import random

import pytest

from bench import calc
from bench.calc import Bandwidth, BitErrorRate, LatencyClass, PacketLossRate, Rtt
from errors import CalcError


def approx(x, rel=1e-9):
    return pytest.approx(x, rel=rel)


def test_bdp_of_a_100gbps_transcontinental_path():
    # 100 Gbps x 74 ms / 8
    assert calc.compute_bdp(Bandwidth.gbps(100), Rtt.ms(74)) == 925_000_000


def test_bdp_of_1gbps_at_100ms():
    assert calc.compute_bdp(Bandwidth.gbps(1), Rtt.ms(100)) == 12_500_000


def test_bdp_is_zero_without_delay():
    assert calc.compute_bdp(Bandwidth.gbps(400), Rtt(0)) == 0


def test_bdp_is_linear_in_each_argument():
    bw, rtt = Bandwidth.gbps(10), Rtt.ms(50)
    base = calc.compute_bdp(bw, rtt)
    assert calc.compute_bdp(Bandwidth(2 * bw.bits_per_second), rtt) == 2 * base
    assert calc.compute_bdp(bw, Rtt(2 * rtt.microseconds)) == 2 * base


def test_window_ceiling_of_default_64k_window():
    ceiling = calc.window_ceiling(64 * 1024, Rtt.ms(100))
    assert ceiling.bits_per_second == 5_242_880


def test_window_ceiling_inverts_bdp_example():
    assert calc.window_ceiling(925_000_000, Rtt.ms(74)).bits_per_second == 100 * 10**9


def test_window_ceiling_of_empty_window():
    assert calc.window_ceiling(0, Rtt.ms(10)).bits_per_second == 0


def test_window_ceiling_rejects_zero_rtt():
    with pytest.raises(CalcError):
        calc.window_ceiling(65536, Rtt(0))


def test_ceiling_of_bdp_recovers_bandwidth():
    rng = random.Random(20240501)
    for _ in range(500):
        bw = Bandwidth(rng.randint(10**9, 4 * 10**11))
        rtt = Rtt(rng.randint(10_000, 300_000))
        ceiling = calc.window_ceiling(calc.compute_bdp(bw, rtt), rtt)
        assert ceiling.bits_per_second == pytest.approx(bw.bits_per_second, rel=1e-6)


def test_ber_from_observed_frame_loss():
    ber = calc.ber_from_packet_loss(PacketLossRate(4.6e-5), 1500)
    assert ber.ratio == approx(3.8333333e-9, rel=1e-6)


def test_ber_from_one_in_22000_frames():
    ber = calc.ber_from_packet_loss(PacketLossRate(1 / 22000), 1500)
    assert ber.ratio == approx(3.7879e-9, rel=1e-4)


def test_ber_of_lossless_link_is_zero():
    assert calc.ber_from_packet_loss(PacketLossRate(0.0), 1500).ratio == 0.0


def test_packet_loss_from_ber_round_trips_worked_example():
    loss = calc.packet_loss_from_ber(BitErrorRate(3.83e-9), 1500)
    assert loss.ratio == approx(4.596e-5, rel=1e-3)
    assert not loss.saturated


def test_packet_loss_for_jumbo_frames():
    assert calc.packet_loss_from_ber(BitErrorRate(1e-10), 9018).ratio == approx(7.2144e-6)


def test_packet_loss_saturates_instead_of_exceeding_one():
    loss = calc.packet_loss_from_ber(BitErrorRate(0.5), 1500)
    assert loss.ratio == 1.0
    assert loss.saturated


def test_loss_conversion_round_trip_property():
    rng = random.Random(7)
    for _ in range(500):
        p = rng.random()
        frame = rng.randint(64, 9018)
        back = calc.packet_loss_from_ber(calc.ber_from_packet_loss(PacketLossRate(p), frame), frame)
        assert back.ratio == pytest.approx(p, rel=1e-9, abs=1e-300)


@pytest.mark.parametrize("frame", [0, -1])
def test_conversions_reject_empty_frames(frame):
    with pytest.raises(CalcError):
        calc.ber_from_packet_loss(PacketLossRate(0.1), frame)
    with pytest.raises(CalcError):
        calc.packet_loss_from_ber(BitErrorRate(0.1), frame)


@pytest.mark.parametrize("ratio", [-0.1, 1.1, float("nan")])
def test_rates_must_be_ratios(ratio):
    with pytest.raises(CalcError):
        PacketLossRate(ratio)
    with pytest.raises(CalcError):
        BitErrorRate(ratio)


def test_bandwidth_rejects_negative_and_fractional_rates():
    with pytest.raises(CalcError):
        Bandwidth(-1)
    with pytest.raises(CalcError):
        Bandwidth(1.5)


@pytest.mark.parametrize(
    "gbps, exact_tb, rounded_tb",
    [(1, 10.8, 10), (10, 108, 100), (100, 1080, 1000)],
)
def test_daily_volume_at_common_speeds(gbps, exact_tb, rounded_tb):
    volume = calc.daily_volume(Bandwidth.gbps(gbps))
    assert calc.decimal_tb(volume) == approx(exact_tb)
    assert calc.rounded_tb(volume) == rounded_tb


def test_daily_volume_is_exactly_proportional():
    assert calc.daily_volume(Bandwidth(0)) == 0
    assert calc.daily_volume(Bandwidth(8)) == 86_400
    assert calc.daily_volume(Bandwidth.gbps(40)) == 4 * calc.daily_volume(Bandwidth.gbps(10))


def test_transfer_time_of_a_multi_petabyte_dataset():
    assert calc.transfer_time(4_800 * 10**12, Bandwidth.gbps(100)) == approx(384_000)


def test_transfer_time_needs_bandwidth():
    with pytest.raises(CalcError):
        calc.transfer_time(1, Bandwidth(0))


@pytest.mark.parametrize(
    "one_way_us, expected",
    [
        (500, LatencyClass.LOCAL),
        (5_000, LatencyClass.METROPOLITAN),
        (10_000, LatencyClass.METROPOLITAN),
        (37_000, LatencyClass.INTERSTATE),
        (74_000, LatencyClass.CROSS_CONTINENT),
        (150_000, LatencyClass.INTERCONTINENTAL),
    ],
)
def test_latency_classes(one_way_us, expected):
    assert calc.classify_latency(one_way_us) == expected


def test_netem_queue_holds_the_emulated_pipe():
    # 10 Gbps x 50 ms = 62.5 MB -> 41666 full-size packets plus headroom
    assert calc.netem_queue_limit(Bandwidth.gbps(10), 50_000) == 42_666


def test_netem_queue_never_below_default():
    assert calc.netem_queue_limit(Bandwidth(10**6), 1_000) == 1000
