"""Publish / Claim ownership protocol on top of the replicated log."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .. import nn
from ..errors import ConfigError, MtlmarkError, ParseError
from ..keys import WatermarkKey
from ..verification import verify
from .messages import Attestation, BlobNotFound, BlobStore, ClaimMsg, PublishMsg, digest, sha256
from .raft import Cluster, LedgerEntry, SimConfig

ACTIONS = ("publish", "claim", "crash", "recover", "resolve")


def handle_claim(ident, claim: ClaimMsg, publishes: list[LedgerEntry], blobs: BlobStore,
                 gamma: float) -> Attestation:
    """Independent ownership check of one claim by one community member."""
    claim_d = digest(claim)

    def attest(ok, reason, report_digest=b"\0" * 32, entry=None):
        return Attestation.create(ident, claim_digest=claim_d, outcome=ok, reason=reason,
                                  report_digest=report_digest,
                                  publish_term=entry.term if entry else 0,
                                  publish_index=entry.index if entry else 0)

    try:
        model_bytes = blobs.get(claim.model_ref)
    except BlobNotFound:
        return attest(False, "missing-model")
    if sha256(model_bytes) != claim.model_hash:
        return attest(False, "tampered-model")
    try:
        model = nn.deserialize(model_bytes)
    except (ParseError, MtlmarkError):
        return attest(False, "malformed-model")
    try:
        head_bytes = blobs.get(claim.cwm_ref)
    except BlobNotFound:
        return attest(False, "missing-watermark")
    cwm_hash = sha256(head_bytes)
    # the Publish must come from the claimant and commit to this exact head
    match = next((e for e in publishes
                  if e.payload.cwm_hash == cwm_hash and e.payload.sender == claim.sender), None)
    if match is None:
        return attest(False, "unregistered-watermark")
    try:
        head = nn.deserialize_head(head_bytes)
        key = WatermarkKey.from_bytes(match.payload.key)
        report = verify(model, key, head, gamma)
    except (ParseError, MtlmarkError):
        return attest(False, "structural-mismatch", entry=match)
    rd = sha256(report.to_json().encode())
    if not report.passed:
        return attest(False, "test-failed", rd, match)
    return attest(True, "ok", rd, match)


@dataclass
class Resolution:
    winner: LedgerEntry | None
    verifying: list[LedgerEntry] = field(default_factory=list)


def resolve_redeclaration(publishes: list[LedgerEntry], model: nn.MultiTaskModel, blobs: BlobStore,
                          gamma: float) -> Resolution:
    """Earliest committed timestamp among Publishes whose watermark verifies on ``model``.

    Ties go to the lexicographically smaller sender public key.
    """
    ok = []
    for e in publishes:
        try:
            head = nn.deserialize_head(blobs.get(e.payload.cwm_hash))
            key = WatermarkKey.from_bytes(e.payload.key)
            if verify(model, key, head, gamma).passed:
                ok.append(e)
        except (BlobNotFound, ParseError, MtlmarkError):
            continue
    winner = min(ok, key=lambda e: (e.payload.time, e.payload.sender)) if ok else None
    return Resolution(winner, ok)


class NotarySim:
    """A community of notary nodes sharing one blob store."""

    def __init__(self, cfg: SimConfig, blobs: BlobStore | None = None):
        self.cfg = cfg
        self.blobs = blobs if blobs is not None else BlobStore()
        self.cluster = Cluster(cfg, on_apply=self._apply, on_reject=self._rejected)
        # publishes a client may re-sign after a stale-timestamp refusal
        self._reissue: dict[bytes, dict] = {}
        self.superseded: dict[bytes, bytes] = {}
        self.publishes: dict[int, list[LedgerEntry]] = {n.id: [] for n in self.cluster.nodes}
        self.attestations: list[tuple[int, Attestation]] = []
        self.resolutions: list[dict] = []

    @property
    def nodes(self):
        return self.cluster.nodes

    def identity(self, nid):
        return self.nodes[nid].ident

    def _apply(self, node, entry: LedgerEntry):
        if entry.kind == "publish":
            self.publishes[node.id].append(entry)
        elif entry.kind == "claim":
            att = handle_claim(node.ident, entry.payload, self.publishes[node.id], self.blobs, self.cfg.gamma)
            self.attestations.append((node.id, att))
            claimant = self.cluster.registry.get(entry.payload.sender)
            self.cluster.log(node.id, "attest", claim=att.claim_digest.hex(), claimant=claimant,
                             outcome=att.outcome, reason=att.reason,
                             publish=[att.publish_term, att.publish_index])

    # ---- client operations -------------------------------------------------------

    def publish(self, nid: int, key: WatermarkKey, head: nn.WatermarkHead | bytes, time: int | None = None,
                reissues: int | None = None) -> bytes:
        """Sign and submit a Publish stamped ``time`` (default: now).

        If the leader refuses it as stale, which happens when an election
        outlasts the window, the client re-signs with the current time, up to
        ``reissues`` times (default ``cfg.max_reissues``).  ``status`` follows
        the chain from the returned digest.  An explicit ``time`` is taken as
        deliberate and never re-signed unless ``reissues`` says so.
        """
        head_bytes = head if isinstance(head, bytes) else nn.serialize_head(head)
        cwm_hash = self.blobs.put(head_bytes)
        t = self.cluster.now if time is None else time
        msg = PublishMsg.create(key.to_bytes(), t, cwm_hash, self.identity(nid))
        d = self.cluster.submit(nid, msg)
        if reissues is None:
            reissues = self.cfg.max_reissues if time is None else 0
        left = reissues
        if left > 0:
            self._reissue[d] = {"nid": nid, "key": key, "head": head_bytes, "left": left}
        return d

    def _rejected(self, node, d, reason):
        job = self._reissue.pop(d, None)
        if job is None or reason != "stale-timestamp":
            return
        new = self.publish(job["nid"], job["key"], job["head"], reissues=job["left"] - 1)
        self.superseded[d] = new
        self.cluster.log(node.id, "reissue", old=d.hex(), new=new.hex())

    def claim(self, nid: int, model_ref: bytes, cwm_ref: bytes, model_hash: bytes | None = None) -> bytes:
        if model_hash is None:
            model_hash = sha256(self.blobs.get(model_ref))
        msg = ClaimMsg.create(model_ref, model_hash, cwm_ref, self.identity(nid))
        return self.cluster.submit(nid, msg)

    def resolve(self, nid: int, model_ref: bytes) -> Resolution:
        model = nn.deserialize(self.blobs.get(model_ref))
        res = resolve_redeclaration(self.publishes[nid], model, self.blobs, self.cfg.gamma)
        w = res.winner
        rec = {"model": model_ref.hex(), "resolver": nid,
               "winner": self.cluster.registry.get(w.payload.sender) if w else None,
               "winner_time": w.payload.time if w else None,
               "candidates": [self.cluster.registry.get(e.payload.sender) for e in res.verifying]}
        self.resolutions.append(rec)
        self.cluster.log(nid, "resolution", **{k: v for k, v in rec.items() if k != "resolver"})
        return res

    def latest(self, d: bytes) -> bytes:
        """Digest of the most recent re-signed version of request ``d``."""
        while d in self.superseded:
            d = self.superseded[d]
        return d

    def status(self, d: bytes) -> str:
        return self.cluster.outcomes.get(self.latest(d), {}).get("status", "unknown")

    def run_until(self, tick):
        self.cluster.run_until(tick)

    def at(self, tick, fn):
        self.cluster.schedule(tick, "action", fn)

    @property
    def trace(self):
        return self.cluster.trace


def _hex(v, what):
    try:
        return bytes.fromhex(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a hex string, got {v!r}") from exc


def parse_scenario(doc) -> list[dict]:
    if isinstance(doc, (bytes, str)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise ConfigError("scenario must be a JSON list of actions")
    out = []
    for i, a in enumerate(doc):
        if not isinstance(a, dict) or a.get("action") not in ACTIONS:
            raise ConfigError(f"scenario[{i}]: unknown or missing action")
        if not isinstance(a.get("tick"), int) or a["tick"] < 0:
            raise ConfigError(f"scenario[{i}]: tick must be a non-negative integer")
        need = {"publish": ("node", "key", "cwm"), "claim": ("node", "model", "cwm"),
                "crash": ("node",), "recover": ("node",), "resolve": ("node", "model")}[a["action"]]
        missing = [k for k in need if k not in a]
        if missing:
            raise ConfigError(f"scenario[{i}]: missing {missing}")
        out.append(a)
    return out


@dataclass
class SimResult:
    trace: list[dict]
    outcomes: dict
    attestations: list
    resolutions: list
    sim: NotarySim

    def trace_jsonl(self) -> str:
        return self.sim.cluster.trace_jsonl()

    def summary(self) -> dict:
        return {"outcomes": {d.hex(): o for d, o in sorted(self.outcomes.items())},
                "attestations": [{"verifier": nid, "claim": a.claim_digest.hex(), "outcome": a.outcome,
                                  "reason": a.reason} for nid, a in self.attestations],
                "resolutions": self.resolutions}


def run_simulation(cfg: SimConfig, scenario, blobs: BlobStore | None = None,
                   until: int | None = None) -> SimResult:
    """Replay a scenario; deterministic for a given (config, scenario, blobs)."""
    actions = parse_scenario(scenario)
    sim = NotarySim(cfg, blobs)
    c = sim.cluster
    for a in actions:
        kind = a["action"]
        if kind == "publish":
            k = a["key"]
            key = WatermarkKey(_hex(k["secret"], "key.secret"), int(k["n"]), k.get("m"))
            cwm = _hex(a["cwm"], "cwm")
            fn = (lambda a=a, key=key, cwm=cwm:
                  sim.publish(a["node"], key, sim.blobs.get(cwm), a.get("time")))
        elif kind == "claim":
            fn = (lambda a=a: sim.claim(a["node"], _hex(a["model"], "model"), _hex(a["cwm"], "cwm"),
                                        _hex(a["model_hash"], "model_hash") if "model_hash" in a else None))
        elif kind == "crash":
            c.schedule(a["tick"], "crash", a["node"])
            continue
        elif kind == "recover":
            c.schedule(a["tick"], "recover", a["node"])
            continue
        else:
            fn = lambda a=a: sim.resolve(a["node"], _hex(a["model"], "model"))
        sim.at(a["tick"], fn)
    sim.run_until(cfg.max_ticks if until is None else until)
    return SimResult(sim.trace, dict(c.outcomes), sim.attestations, sim.resolutions, sim)
