"""Leader-based log replication over a deterministic simulated network.

Single-threaded discrete-event loop.  Time is an integer tick; message
delays, drops and election timeouts come from one seeded ``random.Random``,
so a run is a pure function of (config, scenario).

Persistent per-node state survives crashes: term, vote, log, commit index
and applied index (the applied state machine is treated as durable).
Timestamp-window admission is checked by the leader when a request arrives;
followers re-check signatures only, so lagging nodes can catch up on old
entries.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field

from ..errors import ConfigError
from .messages import NodeIdentity, check_signature, digest

FOLLOWER, CANDIDATE, LEADER = "follower", "candidate", "leader"


@dataclass
class SimConfig:
    n_nodes: int = 5
    seed: int = 0
    delay: tuple[int, int] = (1, 10)
    drop: float = 0.0
    crashes: list[tuple[int, int]] = field(default_factory=list)  # (node, tick)
    election_timeout: tuple[int, int] = (150, 300)
    heartbeat: int = 50
    window: int = 500
    max_ticks: int = 10_000
    retry_interval: int = 100
    request_timeout: int = 3000
    gamma: float = 0.7
    max_batch: int = 64
    max_reissues: int = 3

    def __post_init__(self):
        self.delay = tuple(self.delay)
        self.election_timeout = tuple(self.election_timeout)
        self.crashes = [tuple(c) for c in self.crashes]
        if self.n_nodes < 1:
            raise ConfigError("need at least one node")
        if not 0 <= self.drop <= 1:
            raise ConfigError("drop probability must lie in [0, 1]")
        if not 0 <= self.delay[0] <= self.delay[1]:
            raise ConfigError(f"bad delay range {self.delay}")
        if not 0 < self.election_timeout[0] <= self.election_timeout[1]:
            raise ConfigError(f"bad election timeout range {self.election_timeout}")
        if self.heartbeat <= 0 or self.heartbeat >= self.election_timeout[0]:
            raise ConfigError("heartbeat must be positive and below the election timeout")
        if self.max_reissues < 0:
            raise ConfigError("max_reissues must be non-negative")


@dataclass
class LedgerEntry:
    term: int
    index: int
    payload: object  # PublishMsg | ClaimMsg | Attestation | None (leader no-op)
    digest: bytes

    @property
    def kind(self) -> str:
        return getattr(self.payload, "kind", "noop")


@dataclass
class Node:
    ident: NodeIdentity
    term: int = 0
    voted_for: int | None = None
    log: list[LedgerEntry] = field(default_factory=list)
    commit_index: int = 0
    last_applied: int = 0
    role: str = FOLLOWER
    leader_id: int | None = None
    alive: bool = True
    timer_gen: int = 0
    votes: set = field(default_factory=set)
    next_index: dict = field(default_factory=dict)
    match_index: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)  # digest -> request state
    rejected: set = field(default_factory=set)

    @property
    def id(self) -> int:
        return self.ident.node_id

    def last_term(self) -> int:
        return self.log[-1].term if self.log else 0

    def committed(self) -> list[LedgerEntry]:
        return self.log[: self.commit_index]

    def has_digest(self, d: bytes) -> bool:
        return any(e.digest == d for e in self.log)


class Cluster:
    """Nodes, network and event queue.

    ``on_apply(node, entry)`` fires per committed entry; ``on_reject(node, digest,
    reason)`` fires when a client learns its request was refused.
    """

    def __init__(self, cfg: SimConfig, on_apply=None, admit=None, on_reject=None):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.nodes = [Node(NodeIdentity.derive(i, cfg.seed)) for i in range(cfg.n_nodes)]
        self.registry = {n.ident.public: n.id for n in self.nodes}
        self.now = 0
        self.trace: list[dict] = []
        self.violations: list[dict] = []
        self._queue: list = []
        self._seq = 0
        self.on_apply = on_apply
        self.admit = admit
        self.on_reject = on_reject
        self.outcomes: dict[bytes, dict] = {}
        for n in self.nodes:
            self._reset_election_timer(n)
        for node, tick in cfg.crashes:
            self.schedule(tick, "crash", node)

    # ---- plumbing -------------------------------------------------------------

    @property
    def majority(self) -> int:
        return self.cfg.n_nodes // 2 + 1

    def log(self, node, event, **kw):
        rec = {"tick": self.now, "node": node, "event": event}
        rec.update(kw)
        self.trace.append(rec)

    def schedule(self, tick, kind, *args):
        self._seq += 1
        heapq.heappush(self._queue, (tick, self._seq, kind, args))

    def send(self, src: Node, dst: int, msg: dict):
        dropped = self.rng.random() < self.cfg.drop
        self.log(src.id, "send", to=dst, type=msg["type"], term=msg["term"], dropped=dropped)
        if not dropped:
            self.schedule(self.now + self.rng.randint(*self.cfg.delay), "deliver", dst, msg)

    def peers(self, node):
        return [n.id for n in self.nodes if n.id != node.id]

    def _reset_election_timer(self, node):
        node.timer_gen += 1
        self.schedule(self.now + self.rng.randint(*self.cfg.election_timeout), "election", node.id, node.timer_gen)

    # ---- main loop --------------------------------------------------------------

    def run_until(self, tick: int):
        while self._queue and self._queue[0][0] <= tick:
            t, _, kind, args = heapq.heappop(self._queue)
            self.now = t
            getattr(self, "_on_" + kind)(*args)
        self.now = max(self.now, tick)

    def _on_deliver(self, dst, msg):
        node = self.nodes[dst]
        if not node.alive:
            return
        getattr(self, "_h_" + msg["type"])(node, msg)

    def _on_election(self, nid, gen):
        node = self.nodes[nid]
        if not node.alive or gen != node.timer_gen or node.role == LEADER:
            return
        node.term += 1
        node.role = CANDIDATE
        node.voted_for = node.id
        node.votes = {node.id}
        node.leader_id = None
        self.log(nid, "election", term=node.term)
        self._reset_election_timer(node)
        if len(node.votes) >= self.majority:
            self._become_leader(node)
            return
        for p in self.peers(node):
            self.send(node, p, {"type": "vote_req", "term": node.term, "from": nid,
                                "last_index": len(node.log), "last_term": node.last_term()})

    def _on_heartbeat(self, nid, gen):
        node = self.nodes[nid]
        if not node.alive or node.role != LEADER or gen != node.timer_gen:
            return
        self._broadcast_append(node)
        self.schedule(self.now + self.cfg.heartbeat, "heartbeat", nid, gen)

    def _on_crash(self, nid):
        if nid == "leader":
            leaders = [n for n in self.nodes if n.alive and n.role == LEADER]
            if not leaders:
                self.log(None, "crash-skipped", reason="no-leader")
                return
            nid = max(leaders, key=lambda n: n.term).id
        node = self.nodes[nid]
        if not node.alive:
            return
        node.alive = False
        node.role = FOLLOWER
        node.votes = set()
        node.timer_gen += 1
        self.log(nid, "crash")

    def _on_recover(self, nid):
        node = self.nodes[nid]
        if node.alive:
            return
        node.alive = True
        node.role = FOLLOWER
        node.leader_id = None
        self.log(nid, "recover")
        self._reset_election_timer(node)

    def _on_retry(self, nid, d):
        node = self.nodes[nid]
        req = node.pending.get(d)
        if req is None or req["done"]:
            return
        if not node.alive:
            # resume retrying once recovered; deadline still applies
            self.schedule(self.now + self.cfg.retry_interval, "retry", nid, d)
            return
        if self.now >= req["deadline"]:
            req["done"] = True
            self.outcomes[d] = {"status": "failed", "reason": "timeout", "tick": self.now}
            self.log(nid, "request-failed", digest=d.hex(), reason="timeout")
            return
        self._broadcast_request(node, req["payload"])
        self.schedule(self.now + self.cfg.retry_interval, "retry", nid, d)

    def _on_action(self, fn):
        fn()

    # ---- client requests ------------------------------------------------------

    def submit(self, nid: int, payload) -> bytes:
        """Client ``nid`` broadcasts a signed payload for replication."""
        node = self.nodes[nid]
        d = digest(payload)
        if not node.alive:
            self.outcomes[d] = {"status": "failed", "reason": "client-down", "tick": self.now}
            self.log(nid, "request-failed", digest=d.hex(), reason="client-down")
            return d
        node.pending[d] = {"payload": payload, "deadline": self.now + self.cfg.request_timeout,
                           "done": False}
        self.outcomes[d] = {"status": "pending", "tick": self.now}
        self.log(nid, "submit", kind=payload.kind, digest=d.hex())
        self._broadcast_request(node, payload)
        self.schedule(self.now + self.cfg.retry_interval, "retry", nid, d)
        return d

    def _broadcast_request(self, node, payload):
        msg = {"type": "client_req", "term": node.term, "from": node.id, "payload": payload}
        self._h_client_req(node, msg)
        for p in self.peers(node):
            self.send(node, p, msg)

    def _admission(self, node, payload):
        if payload.sender not in self.registry:
            return "unknown-sender"
        if not check_signature(payload):
            return "bad-signature"
        if payload.kind == "publish" and abs(payload.time - self.now) > self.cfg.window:
            return "stale-timestamp"
        if self.admit is not None:
            return self.admit(node, payload)
        return None

    def _h_client_req(self, node, msg):
        if node.role != LEADER:
            return
        payload = msg["payload"]
        d = digest(payload)
        if node.has_digest(d):
            return
        reason = self._admission(node, payload)
        if reason is not None:
            if d not in node.rejected:
                node.rejected.add(d)
                self.log(node.id, "reject", digest=d.hex(), reason=reason)
                self.send(node, msg["from"], {"type": "client_reply", "term": node.term,
                                              "digest": d, "ok": False, "reason": reason})
            return
        entry = LedgerEntry(node.term, len(node.log) + 1, payload, d)
        node.log.append(entry)
        node.match_index[node.id] = len(node.log)
        self.log(node.id, "append", index=entry.index, term=entry.term, kind=entry.kind, digest=d.hex())
        self._broadcast_append(node)
        self._advance_commit(node)

    def _h_client_reply(self, node, msg):
        req = node.pending.get(msg["digest"])
        if req is None or req["done"] or msg["ok"]:
            return
        req["done"] = True
        self.outcomes[msg["digest"]] = {"status": "rejected", "reason": msg["reason"], "tick": self.now}
        self.log(node.id, "request-failed", digest=msg["digest"].hex(), reason=msg["reason"])
        if self.on_reject is not None:
            self.on_reject(node, msg["digest"], msg["reason"])

    # ---- elections ---------------------------------------------------------------

    def _step_down(self, node, term):
        if term > node.term:
            node.term = term
            node.voted_for = None
        if node.role != FOLLOWER:
            node.role = FOLLOWER
            node.votes = set()
            self._reset_election_timer(node)

    def _h_vote_req(self, node, msg):
        if msg["term"] > node.term:
            self._step_down(node, msg["term"])
        up_to_date = (msg["last_term"], msg["last_index"]) >= (node.last_term(), len(node.log))
        grant = (msg["term"] == node.term and node.voted_for in (None, msg["from"]) and up_to_date)
        if grant:
            node.voted_for = msg["from"]
            self._reset_election_timer(node)
        self.send(node, msg["from"], {"type": "vote_reply", "term": node.term, "from": node.id,
                                      "granted": grant})

    def _h_vote_reply(self, node, msg):
        if msg["term"] > node.term:
            self._step_down(node, msg["term"])
            return
        if node.role != CANDIDATE or msg["term"] != node.term or not msg["granted"]:
            return
        node.votes.add(msg["from"])
        if len(node.votes) >= self.majority:
            self._become_leader(node)

    def _become_leader(self, node):
        node.role = LEADER
        node.leader_id = node.id
        node.timer_gen += 1
        node.next_index = {p: len(node.log) + 1 for p in self.peers(node)}
        node.match_index = {p: 0 for p in self.peers(node)}
        self.log(node.id, "leader", term=node.term)
        # no-op in the new term lets earlier-term entries commit
        entry = LedgerEntry(node.term, len(node.log) + 1, None, b"\0" * 32)
        node.log.append(entry)
        node.match_index[node.id] = len(node.log)
        self._advance_commit(node)
        self._broadcast_append(node)
        self.schedule(self.now + self.cfg.heartbeat, "heartbeat", node.id, node.timer_gen)

    # ---- replication ----------------------------------------------------------------

    def _broadcast_append(self, node):
        for p in self.peers(node):
            self._send_append(node, p)

    def _send_append(self, node, peer):
        nxt = node.next_index[peer]
        prev = nxt - 1
        entries = node.log[prev: prev + self.cfg.max_batch]
        self.send(node, peer, {"type": "append", "term": node.term, "from": node.id,
                               "prev_index": prev,
                               "prev_term": node.log[prev - 1].term if prev > 0 else 0,
                               "entries": entries, "commit": node.commit_index})

    def _h_append(self, node, msg):
        if msg["term"] < node.term:
            self.send(node, msg["from"], {"type": "append_reply", "term": node.term, "from": node.id,
                                          "ok": False, "match": 0, "hint": len(node.log) + 1})
            return
        if msg["term"] > node.term or node.role != FOLLOWER:
            self._step_down(node, msg["term"])
        node.leader_id = msg["from"]
        self._reset_election_timer(node)
        prev = msg["prev_index"]
        if prev > len(node.log) or (prev > 0 and node.log[prev - 1].term != msg["prev_term"]):
            hint = len(node.log) + 1 if prev > len(node.log) else prev
            self.send(node, msg["from"], {"type": "append_reply", "term": node.term, "from": node.id,
                                          "ok": False, "match": 0, "hint": hint})
            return
        for e in msg["entries"]:
            if e.payload is not None and not check_signature(e.payload):
                self.violations.append({"tick": self.now, "node": node.id, "kind": "bad-signature",
                                        "index": e.index})
                break
            if e.index <= len(node.log):
                if node.log[e.index - 1].term == e.term:
                    continue
                if e.index <= node.commit_index:
                    self.violations.append({"tick": self.now, "node": node.id,
                                            "kind": "truncate-committed", "index": e.index})
                del node.log[e.index - 1:]
            node.log.append(e)
        match = prev + len(msg["entries"])
        new_commit = min(msg["commit"], match)
        if new_commit > node.commit_index:
            self._commit_to(node, new_commit)
        self.send(node, msg["from"], {"type": "append_reply", "term": node.term, "from": node.id,
                                      "ok": True, "match": match, "hint": match + 1})

    def _h_append_reply(self, node, msg):
        if msg["term"] > node.term:
            self._step_down(node, msg["term"])
            return
        if node.role != LEADER or msg["term"] != node.term:
            return
        peer = msg["from"]
        if msg["ok"]:
            if msg["match"] > node.match_index[peer]:
                node.match_index[peer] = msg["match"]
            node.next_index[peer] = node.match_index[peer] + 1
            self._advance_commit(node)
            if node.next_index[peer] <= len(node.log):
                self._send_append(node, peer)
        else:
            node.next_index[peer] = max(1, min(msg["hint"], node.next_index[peer] - 1))
            self._send_append(node, peer)

    def _advance_commit(self, node):
        for n in range(len(node.log), node.commit_index, -1):
            if node.log[n - 1].term != node.term:
                break
            count = sum(1 for v in node.match_index.values() if v >= n)
            if node.id not in node.match_index:
                count += 1
            if count >= self.majority:
                self._commit_to(node, n)
                break

    def _commit_to(self, node, index):
        for i in range(node.commit_index + 1, index + 1):
            e = node.log[i - 1]
            self.log(node.id, "commit", index=i, term=e.term, kind=e.kind, digest=e.digest.hex())
        node.commit_index = index
        while node.last_applied < node.commit_index:
            node.last_applied += 1
            e = node.log[node.last_applied - 1]
            req = node.pending.get(e.digest)
            if req is not None and not req["done"]:
                req["done"] = True
                self.outcomes[e.digest] = {"status": "committed", "tick": self.now,
                                           "index": e.index, "term": e.term}
                self.log(node.id, "confirmed", index=e.index, digest=e.digest.hex())
            if self.on_apply is not None and e.payload is not None:
                self.on_apply(node, e)

    # ---- inspection -------------------------------------------------------------------

    def leader(self) -> Node | None:
        leaders = [n for n in self.nodes if n.alive and n.role == LEADER]
        return max(leaders, key=lambda n: n.term) if leaders else None

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.trace)


def committed_divergence(trace) -> list[dict]:
    """(index, digests) pairs where nodes committed different entries."""
    seen: dict[int, set] = {}
    for r in trace:
        if r["event"] == "commit":
            seen.setdefault(r["index"], set()).add((r["term"], r["digest"]))
    return [{"index": i, "entries": sorted(v)} for i, v in sorted(seen.items()) if len(v) > 1]
