import numpy as np

from mlecs import verification


def test_determinism_runs_inline_and_threaded(tiny_config, monkeypatch):
    seen = []
    real = verification.metrics_stream

    def recording(config):
        seen.append(config.workers)
        return real(config)
    monkeypatch.setattr(verification, 'metrics_stream', recording)
    results = verification.determinism_checks(tiny_config)
    assert sorted(set(seen)) == [1, tiny_config.n_devices]
    assert seen.count(1) == 1
    assert [r.name for r in results] == ['replay_identical',
                                         'schedule_independent']
    assert all(r.passed for r in results)


def test_schedule_check_catches_divergence(tiny_config, monkeypatch):
    monkeypatch.setattr(verification, 'metrics_stream',
                        lambda config: 'workers=%s' % (config.workers > 1))
    results = dict((r.name, r.passed)
                   for r in verification.determinism_checks(tiny_config))
    assert results == {'replay_identical': True,
                       'schedule_independent': False}


def test_kt_checks():
    results = dict((r.name, r) for r in verification.kt_checks())
    assert set(results) == {'kt_identity_zero', 'kt_nonnegative',
                            'kt_positions_min_length', 'kt_direct_oracle'}
    failed = [str(r) for r in results.values() if not r.passed]
    assert failed == []


def test_direct_kt_pools_leading_bins_wider():
    dist = verification._pooled_distribution(
        [0.0, 5.0, 1.0, 3.0, 2.0, 4.0, 6.0, 7.0], 3)
    means = [(7 + 6 + 5) / 3.0, (4 + 3 + 2) / 3.0, (1 + 0) / 2.0]
    expected = np.exp(means) / np.exp(means).sum()
    np.testing.assert_allclose(dist, expected, rtol=1e-12)

# end
