from .messages import (Attestation, BlobNotFound, BlobStore, ClaimMsg, NodeIdentity, PublishMsg,
                       sign, verify_sig)
from .protocol import NotarySim, SimResult, handle_claim, parse_scenario, resolve_redeclaration, run_simulation
from .raft import Cluster, LedgerEntry, SimConfig, committed_divergence
