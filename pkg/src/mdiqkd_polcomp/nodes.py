"""Protocol endpoints and transports for a compensation session.

Three nodes take part: two user nodes (alice, bob) that own their
compensator hardware and feedback state, and the measurement node that
owns the fiber drift, samples detections, and announces per-window
misalignment estimates.  Nodes exchange length-prefixed JSON frames in
both transports: the in-process transport moves the encoded bytes
through in-memory queues, the networked transport moves the same bytes
over TCP sockets with each user in its own process.  All randomness is
consumed at the measurement node, so both transports produce identical
reports for identical configurations.

Per window the exchange is: each user sends its compensator state, the
measurement node simulates the window under the resulting channels and
replies with a misalignment announcement plus a bookkeeping summary,
and each user runs its local control step, which becomes the next
window's compensator state.
"""

from __future__ import annotations

import multiprocessing
import socket
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .compensation import (ControllerState, EstimatorWindow,
                           MisalignmentEstimate, ReferenceTracker,
                           control_step, estimate_theta)
from .polarization import (DriftProcess, SqueezerBank, misalignment_angles,
                           random_misalignment, squeezer_unitary)
from .session import (SessionConfig, SessionError, SessionReport, USERS,
                      WindowTrace, analyze_tallies, recycle_singles,
                      sample_window_slots, sift, summarize_sifted)
from .decoy import TallySet
from .wire import (CompensatorState, FrameDecoder, MisalignmentAnnouncement,
                   SessionEnd, WindowSummary, encode_message)

SOCKET_TIMEOUT_S = 60.0

# Seed-stream tags keep the independent random streams decoupled while
# remaining pure functions of the session seed.
_STREAM_INIT_A = 0xA0
_STREAM_INIT_B = 0xB0
_STREAM_DRIFT_A = 0xA1
_STREAM_DRIFT_B = 0xB1
_STREAM_SAMPLER = 0xC0


class UserNode:
    """One sender's protocol endpoint: compensator plus feedback memory."""

    def __init__(self, name: str, config: SessionConfig):
        if name not in USERS:
            raise SessionError(f"unknown user {name!r}")
        self.name = name
        self.config = config
        self.bank = SqueezerBank()
        self.controller = ControllerState(n_squeezers=len(self.bank))
        self.last_theta = {"Z": None, "X": None}
        self._fresh = {"Z": False, "X": False}
        self.finished = False

    def _compensator_state(self, window: int, triggered: bool) -> CompensatorState:
        return CompensatorState(user=self.name, window=window,
                                retardances=tuple(float(r)
                                                  for r in self.bank.retardances),
                                triggered=triggered)

    def initial_message(self) -> CompensatorState:
        return self._compensator_state(0, False)

    def handle(self, message) -> list:
        """React to one message from the measurement node."""
        if isinstance(message, MisalignmentAnnouncement):
            if message.user != self.name:
                raise SessionError(
                    f"{self.name} received an announcement addressed to "
                    f"{message.user!r}")
            if message.theta_z is not None:
                self.last_theta["Z"] = message.theta_z
                self._fresh["Z"] = True
            if message.theta_x is not None:
                self.last_theta["X"] = message.theta_x
                self._fresh["X"] = True
            triggered = False
            # Evaluate the feedback only on coherent estimates: both basis
            # angles measured since the last evaluation.  Judging a step
            # against a half-stale error signal produces phantom
            # worsened/improved verdicts and direction churn.
            if self.config.compensation_enabled and all(self._fresh.values()):
                estimate = MisalignmentEstimate(theta_z=self.last_theta["Z"],
                                                theta_x=self.last_theta["X"])
                record = control_step(self.controller, estimate,
                                      self.config.controller, self.bank)
                triggered = record is not None
                self._fresh = {"Z": False, "X": False}
            return [self._compensator_state(message.window + 1, triggered)]
        if isinstance(message, WindowSummary):
            return []
        if isinstance(message, SessionEnd):
            self.finished = True
            return []
        raise SessionError(
            f"{self.name} cannot handle message type {type(message).__name__}")


@dataclass
class _WindowLedger:
    """Measurement-node bookkeeping for one window awaiting trigger flags."""

    trace_fields: dict
    triggered: dict = field(default_factory=dict)


class CharlieNode:
    """The measurement node: drift, detection sampling, and announcements."""

    def __init__(self, config: SessionConfig):
        self.config = config
        self.windows = config.windows()
        self.classes = {
            "alice": engine.DecisionClasses.build(config.table_a),
            "bob": engine.DecisionClasses.build(config.table_b),
        }
        init_a = random_misalignment(config.initial_misalignment_a,
                                     seed=[config.seed, _STREAM_INIT_A])
        init_b = random_misalignment(config.initial_misalignment_b,
                                     seed=[config.seed, _STREAM_INIT_B])
        self.drift = {
            "alice": DriftProcess(config.drift_rate_a,
                                  seed=[config.seed, _STREAM_DRIFT_A],
                                  initial=init_a),
            "bob": DriftProcess(config.drift_rate_b,
                                seed=[config.seed, _STREAM_DRIFT_B],
                                initial=init_b),
        }
        self.rng = np.random.default_rng([config.seed, _STREAM_SAMPLER])
        self.trackers = {user: ReferenceTracker(
            smoothing=config.reference_smoothing) for user in USERS}
        self.tallies = {"Z": TallySet(), "X": TallySet()}
        self.traces: list = []
        self._ledgers: dict = {}
        self._pending_states: dict = {}
        self._next_window = 0
        self.finished = False
        self.report: SessionReport | None = None
        self._final_retardances: dict = {}

    # -- protocol surface --------------------------------------------------

    def handle(self, message) -> list:
        """React to one message from a user; returns (dest, message) pairs."""
        if not isinstance(message, CompensatorState):
            raise SessionError(
                f"measurement node cannot handle {type(message).__name__}")
        if message.window != self._next_window:
            raise SessionError(
                f"{message.user} sent compensator state for window "
                f"{message.window}, expected {self._next_window}")
        if message.user in self._pending_states:
            raise SessionError(
                f"duplicate compensator state from {message.user} for "
                f"window {message.window}")
        self._pending_states[message.user] = message
        self._record_trigger(message)
        if set(self._pending_states) != set(USERS):
            return []
        states = self._pending_states
        self._pending_states = {}
        if self._next_window >= len(self.windows):
            self._finish(states)
            return [(user, SessionEnd(reason="schedule complete"))
                    for user in USERS]
        out = self._run_window(self._next_window, states)
        self._next_window += 1
        return out

    def _record_trigger(self, message: CompensatorState) -> None:
        """A window-w state carries the user's reaction to window w - 1."""
        ledger = self._ledgers.get(message.window - 1)
        if ledger is not None:
            ledger.triggered[message.user] = message.triggered
            if set(ledger.triggered) == set(USERS):
                self._freeze_trace(message.window - 1)

    def _freeze_trace(self, index: int) -> None:
        ledger = self._ledgers.pop(index)
        self.traces.append(WindowTrace(triggered=dict(ledger.triggered),
                                       **ledger.trace_fields))

    # -- physics -----------------------------------------------------------

    def _run_window(self, index: int, states: dict) -> list:
        t_start, dt, meas_basis = self.windows[index]
        n_slots = self.config.slots_in(dt)
        channels = {}
        for user in USERS:
            bank = SqueezerBank(retardances=np.asarray(
                states[user].retardances, dtype=float))
            channels[user] = self.drift[user].step(dt) @ squeezer_unitary(bank)
        if self.config.sampling == "per-slot":
            combo_counts, outcome_counts, singles = self._sample_slots(
                index, n_slots, meas_basis, channels)
        else:
            class_probs = engine.window_class_probabilities(
                self.classes["alice"], self.classes["bob"],
                channels["alice"], channels["bob"], meas_basis,
                self.config.detector, self.config.n_phase)
            combo_counts, outcome_counts = engine.sample_window_counts(
                n_slots, self.classes["alice"], self.classes["bob"],
                class_probs, self.rng)
            singles = {
                user: engine.recycled_singles(
                    self.classes["alice"], self.classes["bob"], meas_basis,
                    outcome_counts, "A" if user == "alice" else "B")
                for user in USERS}
        engine.accumulate_tallies(self.tallies[meas_basis],
                                  self.classes["alice"], self.classes["bob"],
                                  meas_basis, combo_counts, outcome_counts)
        counts = engine.conservation_counts(
            self.classes["alice"], self.classes["bob"], meas_basis,
            combo_counts, outcome_counts)
        total = sum(counts.values())
        if total != n_slots:
            raise SessionError(
                f"window {index} accounting violation: conservation classes "
                f"sum to {total}, expected {n_slots}")

        est_theta = {}
        estimator_counts = {}
        out = []
        for user in USERS:
            window = EstimatorWindow(duration=dt)
            for label, (n_wrong, n_total) in sorted(singles[user].items()):
                reference = self.trackers[user].update((meas_basis, label),
                                                       n_total)
                window.add(meas_basis, label, n_wrong, reference)
            estimate = estimate_theta(window)
            theta = estimate.theta(meas_basis)
            est_theta[user] = theta
            estimator_counts[user] = window.pooled(meas_basis)
            out.append((user, MisalignmentAnnouncement(
                user=user, window=index,
                theta_z=theta if meas_basis == "Z" else None,
                theta_x=theta if meas_basis == "X" else None)))
        summary = WindowSummary(window=index, meas_basis=meas_basis,
                                counts={k: int(v) for k, v in counts.items()})
        out.extend((user, summary) for user in USERS)

        true_theta = {user: misalignment_angles(channels[user])
                      for user in USERS}
        self._ledgers[index] = _WindowLedger(trace_fields=dict(
            index=index, t_start=t_start, duration=dt, meas_basis=meas_basis,
            n_slots=n_slots, est_theta=est_theta, true_theta=true_theta,
            estimator_counts=estimator_counts,
            counts={k: int(v) for k, v in counts.items()}))
        return out

    def _sample_slots(self, index: int, n_slots: int, meas_basis: str,
                      channels: dict):
        """Per-slot backend: full protocol materialization plus cross-checks."""
        announcements, reveals, bit_reveals, truth = sample_window_slots(
            self.config, index, n_slots, meas_basis,
            channels["alice"], channels["bob"], self.rng)
        singles = recycle_singles(announcements, reveals["alice"],
                                  reveals["bob"], bit_reveals["alice"],
                                  bit_reveals["bob"], meas_basis)
        for user, sender in (("alice", "A"), ("bob", "B")):
            from_counts = engine.recycled_singles(
                self.classes["alice"], self.classes["bob"], meas_basis,
                truth["outcome_counts"], sender)
            if from_counts != singles[user]:
                raise SessionError(
                    f"window {index}: slot-level recycling disagrees with "
                    f"aggregate counts for {user}")
        kept, summary = sift(announcements, reveals["alice"], reveals["bob"],
                             meas_basis, truth["bits"]["alice"],
                             truth["bits"]["bob"])
        key_candidates = engine.conservation_counts(
            self.classes["alice"], self.classes["bob"], meas_basis,
            truth["combo_counts"], truth["outcome_counts"])["key_candidate"]
        if summary["n_sifted"] != key_candidates:
            raise SessionError(
                f"window {index}: sifted slot count {summary['n_sifted']} "
                f"disagrees with accounting ({key_candidates})")
        revealed = set()
        for user in USERS:
            revealed.update(bit_reveals[user])
        if revealed & set(kept):
            raise SessionError(
                f"window {index}: privacy violation - revealed bits overlap "
                "the sifted key")
        return truth["combo_counts"], truth["outcome_counts"], singles

    # -- completion ----------------------------------------------------------

    def _finish(self, final_states: dict) -> None:
        for user, state in final_states.items():
            self._final_retardances[user] = tuple(state.retardances)
        for index in sorted(self._ledgers):
            ledger = self._ledgers[index]
            for user in USERS:
                ledger.triggered.setdefault(user, False)
        for index in sorted(self._ledgers):
            self._freeze_trace(index)
        self.traces.sort(key=lambda trace: trace.index)
        bounds, rates = analyze_tallies(self.config, self.tallies)
        self.report = SessionReport(
            duration_s=self.config.duration_s, seed=self.config.seed,
            mode=self.config.mode, sampling=self.config.sampling,
            windows=self.traces, tallies=self.tallies,
            sifted=summarize_sifted(self.tallies), bounds=bounds,
            rates=rates, final_retardances=dict(self._final_retardances))
        self.finished = True


# ---------------------------------------------------------------------------
# In-process transport
# ---------------------------------------------------------------------------

class _LoopbackLink:
    """One direction of an in-memory byte pipe with its frame decoder."""

    def __init__(self):
        self.decoder = FrameDecoder()
        self._pending = b""

    def send(self, message) -> None:
        self._pending += encode_message(message)

    def receive(self) -> list:
        data = self._pending
        self._pending = b""
        return self.decoder.feed(data)


def run_in_process(config: SessionConfig) -> SessionReport:
    """Drive all three nodes in one process through the loopback transport."""
    users = {name: UserNode(name, config) for name in USERS}
    charlie = CharlieNode(config)
    to_charlie = {name: _LoopbackLink() for name in USERS}
    to_user = {name: _LoopbackLink() for name in USERS}

    for name in USERS:
        to_charlie[name].send(users[name].initial_message())
    # Round-robin until the measurement node finishes; the fixed order
    # (alice, then bob) makes message processing deterministic.
    for _ in range(4 * (len(charlie.windows) + 2) + 8):
        progress = False
        for name in USERS:
            for message in to_charlie[name].receive():
                progress = True
                for dest, reply in charlie.handle(message):
                    to_user[dest].send(reply)
        for name in USERS:
            for message in to_user[name].receive():
                progress = True
                for reply in users[name].handle(message):
                    to_charlie[name].send(reply)
        if charlie.finished and all(users[name].finished for name in USERS):
            break
        if not progress:
            raise SessionError("session deadlocked: no node can make progress")
    else:
        raise SessionError("session did not terminate within the message budget")
    assert charlie.report is not None
    return charlie.report


# ---------------------------------------------------------------------------
# Networked transport
# ---------------------------------------------------------------------------

def _user_process_main(name: str, config: SessionConfig, port: int) -> None:
    node = UserNode(name, config)
    decoder = FrameDecoder()
    with socket.create_connection(("127.0.0.1", port),
                                  timeout=SOCKET_TIMEOUT_S) as conn:
        conn.sendall(encode_message(node.initial_message()))
        while not node.finished:
            data = conn.recv(65536)
            if not data:
                raise SessionError(f"{name}: connection closed mid-session")
            for message in decoder.feed(data):
                for reply in node.handle(message):
                    conn.sendall(encode_message(reply))


class _UserConnection:
    """Server-side view of one connected user."""

    def __init__(self, conn: socket.socket):
        self.conn = conn
        self.decoder = FrameDecoder()
        self.inbox: list = []

    def read_message(self):
        """Block until one decoded message is available, then return it."""
        while not self.inbox:
            data = self.conn.recv(65536)
            if not data:
                raise SessionError("user connection closed mid-session")
            self.inbox.extend(self.decoder.feed(data))
        return self.inbox.pop(0)


def run_networked(config: SessionConfig) -> SessionReport:
    """Users in child processes, measurement node in this one, over TCP."""
    charlie = CharlieNode(config)
    # fork keeps the child free of any __main__ re-import requirement;
    # the children only run socket I/O plus small-array bookkeeping.
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    with socket.create_server(("127.0.0.1", 0)) as server:
        server.settimeout(SOCKET_TIMEOUT_S)
        port = server.getsockname()[1]
        procs = [ctx.Process(target=_user_process_main,
                             args=(name, config, port), daemon=True)
                 for name in USERS]
        for proc in procs:
            proc.start()
        try:
            connections = {}
            for _ in USERS:
                conn, _addr = server.accept()
                conn.settimeout(SOCKET_TIMEOUT_S)
                wrapped = _UserConnection(conn)
                first = wrapped.read_message()
                if not isinstance(first, CompensatorState):
                    raise SessionError("user connection must open with its "
                                       "compensator state")
                connections[first.user] = (wrapped, first)
            if set(connections) != set(USERS):
                raise SessionError("both users must connect exactly once")

            # Replay the opening messages in fixed user order, then keep
            # serving windows until the node reports completion.
            pending = {name: [connections[name][1]] for name in USERS}
            while not charlie.finished:
                for name in USERS:
                    wrapped = connections[name][0]
                    message = (pending[name].pop(0) if pending[name]
                               else wrapped.read_message())
                    for dest, reply in charlie.handle(message):
                        connections[dest][0].conn.sendall(encode_message(reply))
            for name in USERS:
                connections[name][0].conn.close()
        finally:
            for proc in procs:
                proc.join(timeout=30.0)
                if proc.is_alive():
                    proc.terminate()
                    proc.join()
    assert charlie.report is not None
    return charlie.report
