import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epinet import (
    Event,
    EventKind,
    EventLog,
    EventLogError,
    Parameters,
    PhaseSchedule,
    Status,
    StepHazard,
    rate_lookup,
)
from conftest import ground_truth


def empty_log(n=4, horizon=10.0, edges=(), statuses=None):
    return EventLog(
        horizon=horizon,
        initial_statuses=tuple(statuses or [Status.S] * n),
        initial_edges=frozenset(edges),
        schedule=PhaseSchedule.single(horizon),
        events=(),
    )


class TestReplay:
    def test_empty_log_identity(self):
        log = empty_log(edges=[(0, 1)])
        statuses, adj = log.replay(log.horizon)
        assert statuses == [Status.S] * 4
        assert adj == {(0, 1)}

    def test_single_link_event(self):
        log = empty_log()
        log = EventLog(log.horizon, log.initial_statuses, log.initial_edges,
                       log.schedule, (Event(1.0, EventKind.LINK_ON, 0, partner=1),))
        assert (0, 1) not in log.replay(0.5)[1]
        assert (0, 1) in log.replay(1.5)[1]
        assert (0, 1) in log.replay(1.0)[1]  # events with time <= t apply

    def test_prefix_consistency_oracle(self, truth):
        """Replay at t equals replaying a prefix then continuing by hand."""
        from epinet import SimConfig, simulate

        config = SimConfig(n=12, schedule=PhaseSchedule.split(5.0, 20.0),
                           network=0.3, initial_infected=2,
                           covariates=np.zeros((12, 0)))
        params = truth.replace(b_s=np.zeros(0), alpha=np.full((2, 3), 2e-2),
                               omega=np.full((2, 3), 2e-2))
        log = simulate(params, config, np.random.default_rng(5)).log
        assert len(log.events) >= 100
        rng = np.random.default_rng(0)
        for t in rng.uniform(0, 20.0, size=20):
            t_mid = t * rng.random()
            statuses, adj = log.replay(t_mid)
            # continue applying events in (t_mid, t] manually
            for ev in log.events:
                if not t_mid < ev.time <= t:
                    continue
                if ev.kind.is_link:
                    pair = tuple(sorted((ev.actor, ev.partner)))
                    if ev.kind is EventKind.LINK_ON:
                        adj.add(pair)
                    else:
                        adj.discard(pair)
                elif ev.kind is EventKind.EXPOSURE:
                    statuses[ev.actor] = Status.E
                elif ev.kind is EventKind.RECOVERY:
                    statuses[ev.actor] = Status.R
                else:
                    statuses[ev.actor] = ev.subtype
            full_statuses, full_adj = log.replay(t)
            assert statuses == full_statuses
            assert adj == full_adj

    def test_replay_determinism(self, small_dataset):
        log = small_dataset.log
        a = log.replay(17.3)
        b = log.replay(17.3)
        assert a == b

    def test_status_monotonicity(self, small_dataset):
        """Per individual the replayed sequence follows S->E->I->R."""
        order = {Status.S: 0, Status.E: 1, Status.IA: 2, Status.IS: 2, Status.R: 3}
        log = small_dataset.log
        last = [order[s] for s in log.initial_statuses]
        for ev in log.events:
            if ev.kind.is_link:
                continue
            statuses, _ = log.replay(ev.time)
            now = order[statuses[ev.actor]]
            assert now >= last[ev.actor]
            last[ev.actor] = now


class TestValidation:
    def test_tied_timestamps_rejected(self):
        events = (Event(1.0, EventKind.LINK_ON, 0, partner=1),
                  Event(1.0, EventKind.LINK_OFF, 0, partner=1))
        log = EventLog(10.0, (Status.S,) * 3, frozenset(), PhaseSchedule.single(10.0), events)
        with pytest.raises(EventLogError) as err:
            log.validate()
        assert err.value.index == 1

    def test_double_activation_rejected(self):
        events = (Event(1.0, EventKind.LINK_ON, 0, partner=1),
                  Event(2.0, EventKind.LINK_ON, 1, partner=0))
        log = EventLog(10.0, (Status.S,) * 3, frozenset(), PhaseSchedule.single(10.0), events)
        with pytest.raises(EventLogError) as err:
            log.validate()
        assert err.value.index == 1

    def test_bad_epidemic_transition(self):
        events = (Event(1.0, EventKind.RECOVERY, 0),)
        log = EventLog(10.0, (Status.S,) * 2, frozenset(), PhaseSchedule.single(10.0), events)
        with pytest.raises(EventLogError) as err:
            log.validate()
        assert err.value.index == 0

    def test_subtype_required(self):
        events = (Event(1.0, EventKind.MANIFESTATION, 0),)
        log = EventLog(10.0, (Status.E,) * 2, frozenset(), PhaseSchedule.single(10.0), events)
        with pytest.raises(EventLogError):
            log.validate()

    def test_simulated_log_passes(self, small_dataset):
        small_dataset.log.validate()


class TestRateLookup:
    def test_ground_truth_values(self):
        params = ground_truth()
        assert rate_lookup(params, Status.S, Status.IA, False, 1) == pytest.approx(2e-4)
        assert rate_lookup(params, Status.IS, Status.R, True, 1) == pytest.approx(50e-3)

    def test_symmetry(self):
        params = ground_truth()
        pairs = [(Status.S, Status.IA), (Status.E, Status.IS),
                 (Status.R, Status.S), (Status.IA, Status.IS)]
        for a, b in pairs:
            for connected in (False, True):
                for phase in (0, 1):
                    assert rate_lookup(params, a, b, connected, phase) == \
                        rate_lookup(params, b, a, connected, phase)


class TestPhaseSchedule:
    def test_total_measure(self):
        s = PhaseSchedule.split(15.0, 60.0)
        assert s.measure(0) + s.measure(1) == pytest.approx(60.0)

    def test_boundary_belongs_to_earlier_interval(self):
        s = PhaseSchedule.split(15.0, 60.0)
        assert s.phase_at(15.0) == 0
        assert s.phase_at(15.0 + 1e-12) == 1
        assert s.phase_at(60.0) == 1

    def test_segments_split(self):
        s = PhaseSchedule.split(15.0, 60.0)
        segs = list(s.segments(10.0, 20.0))
        assert segs == [(5.0, 0), (5.0, 1)]
        assert sum(d for d, _ in s.segments(0.0, 60.0)) == pytest.approx(60.0)

    def test_gap_rejected(self):
        with pytest.raises(ValueError):
            PhaseSchedule([(0.0, 5.0, 0), (6.0, 10.0, 1)])

    def test_must_start_at_zero(self):
        with pytest.raises(ValueError):
            PhaseSchedule([(1.0, 5.0, 0)])


class TestStepHazard:
    def test_exact_integral(self):
        h = StepHazard([0.0, 2.0, 5.0], [1.0, 0.5])
        assert h.total_integral() == pytest.approx(2.0 + 1.5)
        assert h.integral_to(3.0) == pytest.approx(2.5)
        assert h.level_at(4.0) == 0.5

    def test_from_changes(self):
        h = StepHazard.from_changes(0.0, 10.0, [(3.0, 2.0), (7.0, 0.0)], 1.0)
        assert list(h.edges) == [0.0, 3.0, 7.0, 10.0]
        assert list(h.levels) == [1.0, 2.0, 0.0]

    def test_negative_level_rejected(self):
        with pytest.raises(ValueError):
            StepHazard([0.0, 1.0], [-0.1])

    @given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=6),
           st.lists(st.floats(0.01, 3.0), min_size=7, max_size=7))
    @settings(max_examples=50, deadline=None)
    def test_integral_matches_sum(self, levels, gaps):
        edges = np.cumsum([0.0] + gaps[:len(levels)])
        h = StepHazard(edges, levels)
        expected = float(np.sum(np.asarray(levels) * np.diff(edges)))
        assert h.total_integral() == pytest.approx(expected, rel=1e-12)


class TestParameters:
    def test_pack_unpack_roundtrip(self):
        p = ground_truth()
        q = Parameters.unpack(p.pack(), p.covariate_dim)
        assert np.allclose(p.pack(), q.pack())
        assert p.names()[:5] == ["beta", "exp_eta", "phi", "gamma", "p_s"]

    def test_external_roundtrip(self):
        p = ground_truth().replace(xi=1e-3, b_e=np.array([0.1, -0.2]))
        q = Parameters.unpack(p.pack(), 2, external=True)
        assert np.allclose(p.pack(), q.pack())
        assert len(p.names()) == 17 + 2 + 3

    def test_validate_rejects_bad(self):
        with pytest.raises(ValueError):
            ground_truth().replace(beta=-1.0).validate()
        with pytest.raises(ValueError):
            ground_truth().replace(p_s=1.0).validate()

    def test_eta_scale(self):
        assert ground_truth().eta == pytest.approx(0.2)


class TestStatus:
    def test_binary_view(self):
        assert {s for s in Status if s.infectious} == {Status.IA, Status.IS}
        assert {s for s in Status if s.healthy} == {Status.S, Status.E, Status.R}
