import pytest

from mlecs import comms, models


def test_adapter_count_from_topology(rng):
    backbone = models.Backbone.build(8, 3, 6, 2, 2, rng)
    assert comms.adapter_parameter_count(backbone.adapters) == 3 * 2 * 16
    assert comms.adapter_parameter_count(backbone.topology()) == 3 * 2 * 16
    assert comms.adapter_parameter_count([]) == 0


def test_rank_is_linear():
    topology = [(3 * 1280, 1280), (1280, 1280)] * 4
    low = comms.adapter_parameter_count([shape + (8,) for shape in topology])
    high = comms.adapter_parameter_count([shape + (24,) for shape in topology])
    assert high == 3 * low


def test_uplink_and_downlink_by_mode():
    assert comms.uplink_parameters(100, 'mlecs') == 101
    assert comms.uplink_parameters(100, 'mlecs_wo_mma') == 101
    assert comms.uplink_parameters(100, 'mlecs_wo_seccl') == 101
    assert comms.uplink_parameters(100, 'fedavg_uniform') == 100
    assert comms.uplink_parameters(100, 'standalone') == 0
    assert comms.downlink_parameters(100, 20, 8, 'mlecs') == 100 + 160
    assert comms.downlink_parameters(100, 20, 8, 'fedavg_uniform') == 100
    assert comms.downlink_parameters(100, 20, 8, 'standalone') == 0
    with pytest.raises(comms.AccountingError):
        comms.uplink_parameters(100, 'gossip')
    with pytest.raises(comms.AccountingError):
        comms.downlink_parameters(100, 20, 8, 'gossip')


def test_bytes_are_four_per_float():
    assert comms.to_bytes(0) == 0
    assert comms.to_bytes(2211841) == 8847364


def test_comm_ratio():
    assert comms.comm_ratio(500, 500) == 1.0
    assert comms.comm_ratio(0, 500) == 0.0
    assert comms.comm_ratio(1, 4) == 0.25
    with pytest.raises(comms.AccountingError):
        comms.comm_ratio(1, 0)
    with pytest.raises(comms.AccountingError):
        comms.comm_ratio(-1, 10)


def test_large_model_fixture():
    fixture = comms.LargeModelFixture()
    assert fixture.adapter_params() == 2211840
    assert fixture.uplink() == 2211841
    assert fixture.downlink() == 2211840 + 2597 * 256
    assert fixture.ratio() == pytest.approx(2876672 / 720e6)
    assert 0.001 < fixture.ratio() < 0.01
    rows = dict(fixture.rows())
    assert rows['uplink_bytes'] == 4 * 2211841
    assert rows['total_params'] == 720 * 10 ** 6

# end
