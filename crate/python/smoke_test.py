"""Smoke test for the numa_cna_py extension module."""

import numa_cna_py as cna


def main():
    assert cna.encode_tail(0, 0) != 0
    assert cna.decode_tail(cna.encode_tail(1023, 3)) == (1023, 3)
    assert cna.decode_tail(0) is None
    assert abs(cna.fairness_factor([40, 30, 20, 10]) - 0.7) < 1e-12

    config = cna.CnaConfig(seed=7)
    assert config.threshold == 0xFFFF and not config.shuffle_reduction
    assert cna.CnaConfig.optimized().shuffle_reduction
    try:
        cna.CnaConfig(threshold=6)
    except ValueError:
        pass
    else:
        raise AssertionError("threshold 6 is not a mask")

    trace = cna.two_socket_example()
    assert trace.grant_order() == [0, 3, 4, 0, 1, 2, 5, 6]
    assert trace.handover_ratio(through_grant=5) == 0.75

    order = cna.reference_grant_order([(0, 0), (1, 1), (2, 0)], draws=[1])
    assert order == [0, 2, 1], order
    assert cna.reference_grant_order([(0, 0), (1, 1), (2, 0)], discipline="fifo") == [0, 1, 2]

    a = cna.simulate([0, 1, 0, 1], acquisitions=3, seed=11, config=config)
    b = cna.simulate([0, 1, 0, 1], acquisitions=3, schedule=a.schedule, config=config)
    assert a.to_lines() == b.to_lines()
    assert sorted(a.grant_order()) == sorted([0, 1, 2, 3] * 3)

    report = cna.run_bench("cna", mode="raw", threads=2, ops_per_thread=1000)
    assert report["total_ops"] == 2000 and report["lock"] == "cna"
    sim = cna.run_bench("cna", mode="sim", threads=4, sim_handovers=10000, seed=3)
    assert 0.5 <= sim["fairness"] <= 1.0
    assert "word-cna" in cna.LOCK_KINDS

    print("numa_cna_py smoke test passed")


if __name__ == "__main__":
    main()
