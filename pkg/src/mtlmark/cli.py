"""Command-line entry point: ``mtlmark <command> ...``.

Exit codes: 0 success / verification passed, 1 verification failed,
2 configuration or structural error, 3 training or attack error.
Diagnostics go to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import attacks, nn
from .errors import (AttackError, ConfigError, MtlmarkError, NumericalError, ParseError,
                     StructuralError, TrainingError, VerificationError)
from .experiment import (ABLATIONS, ablation_config, fresh_model, load_config, load_data, run_host,
                         wm_data)
from .keys import DomainEncoder, WatermarkKey, default_bits, min_domain_bits
from .notary import BlobStore, committed_divergence, run_simulation
from .training import train_primary
from .verification import (GammaCalibration, calibrate_null, chernoff_bound, optimize_lambda,
                           recommend_gamma, verify)

OUT_ENV = "MTLMARK_OUT_DIR"


class Exit(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


def _diag(kind, message, **kw):
    print(json.dumps({"error": kind, "message": message, **kw}, sort_keys=True), file=sys.stderr)


def _out_dir(cfg) -> Path:
    out = Path(os.environ.get(OUT_ENV) or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, data):
    path.write_bytes(data if isinstance(data, bytes) else data.encode())


def _config(args):
    return load_config(args.config, args.set)


def _read_model(path) -> nn.MultiTaskModel:
    try:
        return nn.deserialize(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise Exit(2, "not-found", f"model file not found: {path}") from exc


def _save_host(out: Path, run):
    _write(out / "model.json", nn.serialize(run.watermarked))
    _write(out / "published.json", nn.serialize(run.watermarked.published()))
    _write(out / "cwm.json", nn.serialize_head(run.watermarked.c_wm))
    _write(out / "clean.json", nn.serialize(run.clean.published()))
    report = {"primary": dataclasses.asdict(run.primary_report),
              "embed": dataclasses.asdict(run.embed_report),
              "clean_test_accuracy": run.primary_report.accuracies.get("primary_test")}
    _write(out / "train_report.json", json.dumps(report, sort_keys=True, indent=2))


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    if args.ablation:
        tr, te, _ = load_data(cfg)
        clean = train_primary(fresh_model(cfg), tr, cfg.train, te)
        for name in ABLATIONS:
            run = run_host(cfg, ablation_config(cfg.train, name), clean=clean)
            sub = out / "ablation" / name
            sub.mkdir(parents=True, exist_ok=True)
            _save_host(sub, run)
            print(f"{name}: wm={run.embed_report.accuracies['wm']:.4f} "
                  f"primary={run.embed_report.accuracies['primary_test']:.4f}")
        return 0
    run = run_host(cfg)
    _save_host(out, run)
    print(json.dumps({"out_dir": str(out), **run.embed_report.accuracies,
                      "clean_primary_test": run.primary_report.accuracies.get("primary_test")},
                     sort_keys=True))
    return 0


def cmd_verify(args):
    model = _read_model(args.model)
    try:
        head = nn.deserialize_head(Path(args.cwm).read_bytes())
    except FileNotFoundError as exc:
        raise Exit(2, "not-found", f"c_wm file not found: {args.cwm}") from exc
    key = WatermarkKey(args.secret.encode(), args.n, args.m)
    enc = DomainEncoder.vector(model.input_dim, key.m)
    report = verify(model, key, head, args.gamma, enc)
    print(report.to_json())
    return 0 if report.passed else 1


def _default_attacks():
    return [attacks.AttackConfig("ft"), attacks.AttackConfig("fp"), attacks.AttackConfig("np"),
            attacks.AttackConfig("overwrite")]


def cmd_attack(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    model = _read_model(out / "model.json")
    if model.c_wm is None:
        raise Exit(2, "structural", "model.json carries no watermark head; run `train` first")
    _, te, ad = load_data(cfg)
    key = cfg.key.key()
    wm = wm_data(cfg, key)
    gamma = cfg.verify.gamma
    reports = []
    for acfg in cfg.attacks or _default_attacks():
        if acfg.kind in ("ft", "ftll", "rtll"):
            after = attacks.fine_tune(model, ad, acfg)
            rep = attacks.evaluate_attack(acfg.kind, model, after, model.c_wm, wm.inputs, wm.labels, te)
        elif acfg.kind == "fp":
            after = attacks.fine_prune(model, ad, acfg)
            rep = attacks.evaluate_attack("fp", model, after, model.c_wm, wm.inputs, wm.labels, te)
            rep.extra["rho"] = acfg.rho
        elif acfg.kind == "np":
            rep = attacks.prune_to_break(model, key, model.c_wm, gamma, acfg.rho_grid, te, cfg.encoder(key))
            _write(out / "np_sweep.csv", rep.sweep_csv())
        elif acfg.kind == "overwrite":
            adv_key = WatermarkKey(acfg.adversary_secret.encode(), key.n, key.m)
            probe = lambda m: attacks.wm_accuracy(m, model.c_wm, wm.inputs, wm.labels)
            _, _, rep = attacks.overwrite(model, adv_key, ad, acfg, model.c_wm, probe, cfg.encoder(adv_key))
            _write(out / "overwrite_fluctuation.csv", rep.fluctuation_csv())
        else:  # forge
            fkey = WatermarkKey(acfg.adversary_secret.encode(), acfg.forge_n, key.m)
            taps = acfg.forge_taps or model.c_wm.taps
            before = nn.model_hash(model)
            head, acc, ok = attacks.forge(model, fkey, taps, acfg.forge_iters, acfg.forge_lr,
                                          cfg.encoder(fkey))
            vr = verify(model, fkey, head, gamma, cfg.encoder(fkey))
            rep = attacks.AttackReport("forge", wm_after=acc,
                                       extra={"separated": ok, "verify_passed": vr.passed,
                                              "model_hash_unchanged": nn.model_hash(model) == before})
        reports.append(dataclasses.asdict(rep))
        print(f"{acfg.kind}: wm_before={rep.wm_before} wm_after={rep.wm_after} "
              f"primary_after={rep.primary_after}")
    _write(out / "attacks.json", json.dumps(reports, sort_keys=True, indent=2))
    return 0


def _table(rows):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows)


def cmd_bounds(args):
    rows = [("N", "m_default", f"m_min(tau={args.tau})", "p", "gamma", "lambda", "bound")]
    for n in args.n:
        lam = args.lam if args.lam is not None else optimize_lambda(args.p, args.gamma)
        rows.append((n, default_bits(n), min_domain_bits(n, args.tau), args.p, args.gamma,
                     f"{lam:.4f}", f"{chernoff_bound(args.p, args.gamma, n, lam):.4e}"))
    print(_table(rows))
    g, b = recommend_gamma(args.p, max(args.n), args.target)
    print(f"recommended gamma (0.05 grid, target {args.target:g}, N={max(args.n)}): {g} "
          f"(bound {b:.3e})" if g else f"no grid gamma reaches target {args.target:g}")
    return 0


def cmd_calibrate(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    model = _read_model(out / "model.json")
    if model.c_wm is None:
        raise Exit(2, "structural", "model.json carries no watermark head")
    v = cfg.verify
    cal = calibrate_null(model, model.c_wm, v.trials, v.seed, cfg.key.n, cfg.key.m, v.target, v.mode)
    _write(out / "calibration.json", cal.to_json())
    _write(out / "calibration_quantiles.csv", cal.quantiles_csv())
    print(json.dumps({"p_max": cal.p_max, "gamma": cal.gamma, "bound": cal.certified_bound,
                      "quantiles": cal.quantiles}, sort_keys=True))
    return 0


def _resolve_refs(obj, blobs, base: Path):
    """Replace ``"@path"`` strings with the hex address of the loaded file."""
    if isinstance(obj, str) and obj.startswith("@"):
        p = Path(obj[1:])
        p = p if p.is_absolute() else base / p
        try:
            return blobs.put(p.read_bytes()).hex()
        except FileNotFoundError as exc:
            raise ConfigError(f"blob file not found: {p}") from exc
    if isinstance(obj, list):
        return [_resolve_refs(v, blobs, base) for v in obj]
    if isinstance(obj, dict):
        return {k: _resolve_refs(v, blobs, base) for k, v in obj.items()}
    return obj


def cmd_notary(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    scen_path = Path(args.scenario)
    try:
        scenario = json.loads(scen_path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {scen_path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
    blobs = BlobStore()
    scenario = _resolve_refs(scenario, blobs, scen_path.parent)
    res = run_simulation(cfg.sim, scenario, blobs)
    _write(out / "trace.jsonl", res.trace_jsonl())
    summary = res.summary()
    summary["divergence"] = committed_divergence(res.trace)
    _write(out / "notary_summary.json", json.dumps(summary, sort_keys=True, indent=2))
    for r in res.resolutions:
        print(f"resolution for {r['model'][:16]}..: winner node {r['winner']} at t={r['winner_time']}")
    print(f"trace: {len(res.trace)} events -> {out / 'trace.jsonl'}")
    return 0


def cmd_report(args):
    run = Path(args.run_dir)
    report = {}
    if (run / "train_report.json").exists():
        tr = json.loads((run / "train_report.json").read_text())
        report["train"] = {"embed_accuracies": tr["embed"]["accuracies"],
                           "clean_test_accuracy": tr.get("clean_test_accuracy"),
                           "delta_max": tr["embed"]["delta_max"]}
    if (run / "calibration.json").exists():
        cal = GammaCalibration(**json.loads((run / "calibration.json").read_text()))
        counts, _ = cal.histogram()
        report["calibration"] = {"p_max": cal.p_max, "gamma": cal.gamma, "trials": len(cal.samples),
                                 "histogram_total": int(counts.sum())}
        _write(run / "null_histogram.csv", cal.histogram_csv())
    if (run / "attacks.json").exists():
        atk = json.loads((run / "attacks.json").read_text())
        report["attacks"] = atk
        for a in atk:
            if a["kind"] == "np":
                _write(run / "np_sweep.csv", attacks.AttackReport(**{**a, "sweep": a["sweep"]}).sweep_csv())
            if a["kind"] == "overwrite":
                _write(run / "overwrite_fluctuation.csv", attacks.AttackReport(**a).fluctuation_csv())
    if (run / "notary_summary.json").exists():
        report["notary"] = json.loads((run / "notary_summary.json").read_text())
    if run.exists():
        _write(run / "report.json", json.dumps(report, sort_keys=True, indent=2))
    print(json.dumps({k: (len(v) if isinstance(v, list) else "ok") for k, v in report.items()},
                     sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtlmark", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field by dotted path (repeatable)")
        return p

    p = with_config(sub.add_parser("train", help="train primary task and embed the watermark"))
    p.add_argument("--ablation", action="store_true", help="emit none/rfunc/rda/both models")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("verify", help="ownership test of a model against a key")
    p.add_argument("--model", required=True)
    p.add_argument("--cwm", required=True)
    p.add_argument("--secret", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--gamma", type=float, default=0.7)
    p.set_defaults(fn=cmd_verify)

    p = with_config(sub.add_parser("attack", help="run configured attacks on a trained model"))
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("bounds", help="domain-size and Chernoff bound table")
    p.add_argument("--n", type=int, nargs="+", default=[600])
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--p", type=float, default=0.575)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--target", type=float, default=1e-6)
    p.set_defaults(fn=cmd_bounds)

    p = with_config(sub.add_parser("calibrate", help="null accuracy distribution and gamma"))
    p.set_defaults(fn=cmd_calibrate)

    p = with_config(sub.add_parser("notary", help="run the notary simulation on a scenario"))
    p.add_argument("--scenario", required=True)
    p.set_defaults(fn=cmd_notary)

    p = sub.add_parser("report", help="consolidate a run directory")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exit as e:
        _diag(e.kind, str(e))
        return e.code
    except (ConfigError, ParseError, StructuralError, VerificationError) as e:
        _diag(type(e).__name__, str(e))
        return 2
    except (TrainingError, NumericalError, AttackError) as e:
        _diag(type(e).__name__, str(e))
        return 3
    except MtlmarkError as e:
        _diag(type(e).__name__, str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
