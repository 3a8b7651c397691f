"""End-to-end ownership dispute on the simulated notary.

The host publishes its watermark, an adversary steals the model, overwrites
it with its own watermark and publishes too, both parties claim the stolen
copy, and a third node resolves the dispute.  The trace is written as JSONL.

    python scripts/ownership_story.py --seed 11 --trace story.jsonl
"""
import argparse
import json

from mtlmark import attacks, nn
from mtlmark.attacks import AttackConfig
from mtlmark.experiment import ExperimentConfig, run_host
from mtlmark.keys import WatermarkKey
from mtlmark.notary.raft import SimConfig
from mtlmark.notary.protocol import NotarySim


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--drop", type=float, default=0.05)
    ap.add_argument("--overwrite-epochs", type=int, default=50)
    ap.add_argument("--trace", default=None)
    args = ap.parse_args(argv)

    run = run_host(ExperimentConfig().validate())
    sim = NotarySim(SimConfig(seed=args.seed, drop=args.drop, max_ticks=9000))
    adv_key = WatermarkKey(b"thief", run.key.n, run.key.m)
    st = {}

    def steal():
        stolen, head, rep = attacks.overwrite(
            run.watermarked, adv_key, run.adversary,
            AttackConfig(kind="overwrite", epoch_grid=(args.overwrite_epochs,)), run.watermarked.c_wm)
        st["ref"] = sim.blobs.put(nn.serialize(stolen.published()))
        st["adv_cwm"] = nn.head_hash(head)
        st["adv_pub"] = sim.publish(1, adv_key, head)

    sim.at(400, lambda: st.setdefault("host_pub", sim.publish(0, run.key, run.watermarked.c_wm)))
    sim.at(2500, steal)
    sim.at(4500, lambda: (sim.claim(0, st["ref"], nn.head_hash(run.watermarked.c_wm)),
                          sim.claim(1, st["ref"], st["adv_cwm"])))
    sim.at(7000, lambda: st.setdefault("res", sim.resolve(3, st["ref"])))
    sim.run_until(9000)

    res = st["res"]
    registry = sim.cluster.registry
    print(json.dumps({
        "publishes": {"host": sim.status(st["host_pub"]), "adversary": sim.status(st["adv_pub"])},
        "attestations": [{"verifier": nid, "claim": a.claim_digest.hex()[:16], "outcome": a.outcome,
                          "reason": a.reason} for nid, a in sim.attestations],
        "verifying_publishers": [registry.get(e.payload.sender) for e in res.verifying],
        "winner": registry.get(res.winner.payload.sender) if res.winner else None,
    }, indent=2))
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write(sim.cluster.trace_jsonl())


if __name__ == "__main__":
    main()
