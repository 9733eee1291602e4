"""Config-driven pipeline: simulate, synthesize, evaluate utility and risk, report.

The config is a YAML (or JSON) document; see ``docs/config.md`` for the key
reference. Every file written here carries the config hash and the seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .dataset import Codebook, DataValidationError, drop_incomplete, load_csv
from .dpmpm import (DpmpmHyperparams, generate_replicates, load_draws, run_chain, save_draws)
from .risk import risk_report
from .simulate import SimSpec, simulate
from .utility import utility_report

log = logging.getLogger(__name__)

UTILITY_SCHEMA_ID = "catsynth.utility_report/1"
RISK_SCHEMA_ID = "catsynth.risk_report/1"
REPORT_SCHEMA_ID = "catsynth.report/1"
MANIFEST_SCHEMA_ID = "catsynth.manifest/1"

_SAMPLER_KEYS = {"K", "a_alpha", "b_alpha", "dirichlet_a", "nrun", "burn", "thin", "m", "seed",
                 "selection"}


class ConfigError(ValueError):
    """Raised for invalid pipeline configuration."""


def read_document(path) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def dump_json(obj, path) -> None:
    """Canonical JSON (sorted keys, no NaN) so reruns are byte-identical."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class PipelineConfig:
    input: Path
    codebook: Codebook
    sampler: DpmpmHyperparams
    sensitive_vars: list[str]
    output: Path
    utility: dict = field(default_factory=dict)
    risk: dict = field(default_factory=dict)
    id_column: str | None = None
    missing_tokens: tuple[str, ...] = ("",)
    delimiter: str = ","
    snapshot_format: str = "npz"
    conditioning: str = "unsynthesized"

    @property
    def seed(self) -> int:
        return self.sampler.seed

    def hash(self) -> str:
        """Digest of everything that determines the outputs (not the output path)."""
        doc = {"input_sha256": _file_digest(self.input) if self.input.exists() else None,
               "codebook": self.codebook.to_dict(), "sampler": self.sampler.to_dict(),
               "sensitive_vars": self.sensitive_vars, "utility": self.utility,
               "risk": self.risk, "id_column": self.id_column,
               "missing_tokens": list(self.missing_tokens), "delimiter": self.delimiter,
               "snapshot_format": self.snapshot_format, "conditioning": self.conditioning}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}


def _check_vars(codebook: Codebook, names, where: str) -> list[str]:
    if names is None:
        return []
    if isinstance(names, str):
        names = [names]
    unknown = [nm for nm in names if nm not in codebook.names]
    if unknown:
        raise ConfigError(f"{where}: unknown variables {unknown}")
    return list(names)


def _level_code(codebook: Codebook, var: str, level, where: str) -> int:
    spec = codebook[var]
    if isinstance(level, int) and not isinstance(level, bool):
        if not 1 <= level <= spec.d:
            raise ConfigError(f"{where}: level {level} out of range for '{var}'")
        return level
    if str(level) in spec.levels:
        return spec.levels.index(str(level)) + 1
    raise ConfigError(f"{where}: '{level}' is not a level of '{var}'")


def parse_config(doc: Mapping[str, Any], base_dir: Path = Path("."),
                 seed: int | None = None, output: Path | None = None) -> PipelineConfig:
    """Validate a config mapping; relative paths resolve against ``base_dir``."""
    doc = dict(doc)
    for key in ("input", "codebook", "sampler", "synthesis"):
        if key not in doc:
            raise ConfigError(f"config is missing required key '{key}'")
    cb_doc = doc["codebook"]
    if isinstance(cb_doc, str):
        cb_doc = read_document(base_dir / cb_doc)
    try:
        codebook = Codebook.from_dict(cb_doc)
    except DataValidationError as exc:
        raise ConfigError(f"codebook: {exc}") from None

    sampler = dict(doc["sampler"] or {})
    unknown = set(sampler) - _SAMPLER_KEYS
    if unknown:
        raise ConfigError(f"sampler: unknown keys {sorted(unknown)}")
    if seed is not None:
        sampler["seed"] = seed
    if "seed" not in sampler:
        raise ConfigError("sampler.seed is required")
    try:
        hyper = DpmpmHyperparams(**sampler)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampler: {exc}") from None

    synthesis = doc["synthesis"] or {}
    sens = _check_vars(codebook, synthesis.get("sensitive_vars"), "synthesis.sensitive_vars")
    if not sens:
        raise ConfigError("synthesis.sensitive_vars must list at least one variable")
    not_flagged = [nm for nm in sens if not codebook[nm].sensitive]
    if not_flagged:
        raise ConfigError(f"synthesis.sensitive_vars not flagged sensitive: {not_flagged}")
    if len(sens) == codebook.r:
        raise ConfigError("partial synthesis needs at least one unsynthesized variable")

    utility = dict(doc.get("utility") or {})
    orders = [int(t) for t in utility.get("orders", [1, 2, 3])]
    if any(t not in (1, 2, 3) for t in orders):
        raise ConfigError("utility.orders must be drawn from 1, 2, 3")
    utility["orders"] = orders
    if "pmse_variables" in utility:
        utility["pmse_variables"] = _check_vars(codebook, utility["pmse_variables"],
                                                "utility.pmse_variables") or None
    est = []
    for i, e in enumerate(utility.get("estimands", []) or []):
        var = _check_vars(codebook, [e["variable"]], f"utility.estimands[{i}]")[0]
        est.append({"variable": var, "level": _level_code(codebook, var, e.get("level", 1),
                                                          f"utility.estimands[{i}]")})
    utility["estimands"] = est
    regs = []
    for i, r in enumerate(utility.get("regressions", []) or []):
        where = f"utility.regressions[{i}]"
        target = _check_vars(codebook, [r["target"]], where)[0]
        preds = _check_vars(codebook, r["predictors"], where)
        if codebook[target].d != 2:
            raise ConfigError(f"{where}: target '{target}' must be binary")
        regs.append({"target": target, "predictors": preds,
                     "event_level": _level_code(codebook, target, r.get("event_level", 1), where)})
    utility["regressions"] = regs

    risk = dict(doc.get("risk") or {})
    risk["known_vars"] = _check_vars(codebook, risk.get("known_vars"), "risk.known_vars")
    risk["linkage_keys"] = _check_vars(codebook, risk.get("linkage_keys"), "risk.linkage_keys")
    risk["linkage_threshold"] = float(risk.get("linkage_threshold", 0.0))
    if risk.get("cap"):
        c = dict(risk["cap"])
        c["keys"] = _check_vars(codebook, c.get("keys"), "risk.cap.keys")
        c["target"] = _check_vars(codebook, [c.get("target")], "risk.cap.target")[0]
        if c["target"] in c["keys"]:
            raise ConfigError("risk.cap.target must not be a key")
        c.setdefault("undefined", "exclude")
        risk["cap"] = c
    if risk.get("classification"):
        c = dict(risk["classification"])
        c["target"] = _check_vars(codebook, [c.get("target")], "risk.classification.target")[0]
        c["predictors"] = _check_vars(codebook, c.get("predictors"),
                                      "risk.classification.predictors")
        risk["classification"] = c

    out = output if output is not None else base_dir / doc.get("output", "out")
    fmt = doc.get("snapshot_format", "npz")
    if fmt not in ("npz", "json"):
        raise ConfigError("snapshot_format must be 'npz' or 'json'")
    return PipelineConfig(
        input=base_dir / doc["input"], codebook=codebook, sampler=hyper, sensitive_vars=sens,
        output=Path(out), utility=utility, risk=risk, id_column=doc.get("id_column"),
        missing_tokens=tuple(doc.get("missing_tokens", [""])),
        delimiter=doc.get("delimiter", ","), snapshot_format=fmt,
        conditioning=synthesis.get("conditioning", "unsynthesized"))


def load_config(path, seed: int | None = None, output=None) -> PipelineConfig:
    path = Path(path)
    return parse_config(read_document(path), path.parent, seed,
                        Path(output) if output is not None else None)


def load_input(cfg: PipelineConfig):
    if not cfg.input.exists():
        raise ConfigError(f"input file not found: {cfg.input}")
    raw = load_csv(cfg.input, cfg.codebook, cfg.missing_tokens, cfg.delimiter, cfg.id_column)
    data = drop_incomplete(raw)
    log.info("%d of %d rows retained after removing incomplete records", data.n, raw.n)
    return data


def _progress_logger(every: int):
    def report(t, total):
        if t % every == 0 or t == total:
            log.info("sweep %d / %d", t, total)
    return report


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(spec: SimSpec, out_dir, seed: int | None = None) -> dict:
    """Write ``data.csv``, ``codebook.json`` and ``truth.json`` for a simulated dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        spec = SimSpec(spec.codebook, spec.pi, spec.theta, spec.n, seed)
    data, z = simulate(spec)
    spec_hash = hashlib.sha256(
        json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()
    tag = [f"config_hash={spec_hash}", f"seed={spec.seed}"]
    data.to_csv(out / "data.csv", header_comments=tag)
    dump_json(spec.codebook.to_dict(), out / "codebook.json")
    dump_json({"config_hash": spec_hash, "seed": spec.seed, "spec": spec.to_dict(),
               "z": z.tolist()}, out / "truth.json")
    return {"data": out / "data.csv", "truth": out / "truth.json", "n": data.n}


def replicate_path(cfg: PipelineConfig, l: int) -> Path:
    return cfg.output / "replicates" / f"synthetic_{l}.csv"


def cmd_synthesize(cfg: PipelineConfig, quiet: bool = False) -> dict:
    """Fit the sampler, write the draws snapshot, the replicates and a manifest."""
    data = load_input(cfg)
    hyper = cfg.sampler
    if hyper.m > hyper.n_retained:
        raise ConfigError(
            f"sampler.m={hyper.m} exceeds the {hyper.n_retained} retained draws; "
            "lower m or lengthen the chain (nrun - burn) / thin")
    progress = None if quiet else _progress_logger(max(hyper.nrun // 10, 1))
    draws = run_chain(data, hyper, progress=progress)
    reps = generate_replicates(data, hyper, cfg.sensitive_vars, draws, cfg.conditioning)
    prov = cfg.provenance()
    (cfg.output / "replicates").mkdir(parents=True, exist_ok=True)
    tag = [f"config_hash={prov['config_hash']}", f"seed={prov['seed']}"]
    files = []
    for l, rep in enumerate(reps.datasets, start=1):
        path = replicate_path(cfg, l)
        rep.to_csv(path, header_comments=tag + [f"replicate={l}",
                                                f"draw_index={reps.draw_indices[l - 1]}"])
        files.append(str(path.relative_to(cfg.output)))
    snap = cfg.output / f"draws.{cfg.snapshot_format}"
    save_draws(draws, snap, cfg.snapshot_format)
    manifest = {"schema": MANIFEST_SCHEMA_ID, **prov,
                "replicates": files, "draws": snap.name,
                "draw_indices": reps.draw_indices, "n": data.n,
                "sensitive_vars": cfg.sensitive_vars, "conditioning": cfg.conditioning,
                "sampler": hyper.to_dict(),
                "occupied_classes": {"mean": float(np.mean(draws.occupied_counts)),
                                     "min": int(draws.occupied_counts.min()),
                                     "max": int(draws.occupied_counts.max())},
                "replicate_provenance": reps.provenance()}
    dump_json(manifest, cfg.output / "manifest.json")
    return manifest


def load_replicates(cfg: PipelineConfig):
    man_path = cfg.output / "manifest.json"
    if not man_path.exists():
        raise ConfigError(f"no manifest at {man_path}; run 'synthesize' first")
    manifest = json.loads(man_path.read_text())
    reps = []
    for rel in manifest["replicates"]:
        path = cfg.output / rel
        if not path.exists():
            raise ConfigError(f"replicate file missing: {path}")
        reps.append(load_csv(path, cfg.codebook, (), ",", "record_id"))
    return manifest, reps


def cmd_utility(cfg: PipelineConfig) -> dict:
    data = load_input(cfg)
    _, reps = load_replicates(cfg)
    u = cfg.utility
    rep = utility_report(data, reps, orders=u["orders"], synthesized=cfg.sensitive_vars,
                         full_enumeration=bool(u.get("full_enumeration", False)),
                         pmse_variables=u.get("pmse_variables"), estimands=u["estimands"],
                         regressions=u["regressions"], ci_level=float(u.get("ci_level", 0.95)))
    prov = cfg.provenance()
    doc = {"schema": UTILITY_SCHEMA_ID, **prov, "m": len(reps), "report": rep.to_dict()}
    dump_json(doc, cfg.output / "utility_report.json")
    if u.get("deviation_csv", True):
        for t, summaries in sorted(rep.deviations.items()):
            with open(cfg.output / f"utility_deviations_t{t}.csv", "w", newline="") as fh:
                fh.write(f"# config_hash={prov['config_hash']}\n# seed={prov['seed']}\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["replicate", "variables", "cell", "d"])
                for l, s in enumerate(summaries, start=1):
                    for (vars_, cell), d in zip(s.cells, s.d.tolist()):
                        w.writerow([l, "|".join(vars_), "|".join(map(str, cell)), repr(d)])
    return doc


def cmd_risk(cfg: PipelineConfig) -> dict:
    data = load_input(cfg)
    _, reps = load_replicates(cfg)
    r = cfg.risk
    cap_cfg = r.get("cap") or {}
    rep = risk_report(data, reps, known_vars=r["known_vars"], linkage_keys=r["linkage_keys"],
                      linkage_threshold=r["linkage_threshold"], cap_keys=cap_cfg.get("keys"),
                      cap_target=cap_cfg.get("target"),
                      cap_undefined=cap_cfg.get("undefined", "exclude"),
                      classification=r.get("classification"), seed=cfg.seed)
    prov = cfg.provenance()
    doc = {"schema": RISK_SCHEMA_ID, **prov, "m": len(reps), "report": rep.to_dict()}
    dump_json(doc, cfg.output / "risk_report.json")
    header = f"# config_hash={prov['config_hash']}\n# seed={prov['seed']}\n"
    if rep.cap_baseline is not None:
        with open(cfg.output / "cap_records.csv", "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["record_id", "target", "cap_confidential"]
                       + [f"cap_synthetic_{l}" for l in range(1, len(rep.cap) + 1)])
            tgt = data.column(cap_cfg["target"])
            cols = [rep.cap_baseline.values] + [c.values for c in rep.cap]
            for i, rid in enumerate(data.record_ids):
                w.writerow([rid, int(tgt[i])] + ["" if np.isnan(c[i]) else repr(float(c[i]))
                                                 for c in cols])
    if rep.linkage_baseline is not None:
        with open(cfg.output / "linkage_pairs.csv", "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "confidential_id", "synthetic_id", "weight", "true_link"])
            for l, res in enumerate([rep.linkage_baseline] + rep.linkage):
                for a, b, wt in res.links:
                    w.writerow([l, a, b, repr(wt), int(a == b)])
    return doc


def cmd_report(cfg: PipelineConfig) -> dict:
    """Concatenate the manifest and the utility and risk reports into ``report.json``."""
    parts = {}
    for name in ("manifest", "utility_report", "risk_report"):
        path = cfg.output / f"{name}.json"
        if not path.exists():
            raise ConfigError(f"missing {path}; run the corresponding command first")
        parts[name] = json.loads(path.read_text())
    doc = {"schema": REPORT_SCHEMA_ID, **cfg.provenance(), **parts}
    dump_json(doc, cfg.output / "report.json")
    return doc


def reload_draws(cfg: PipelineConfig):
    """Draws snapshot written by :func:`cmd_synthesize`."""
    return load_draws(cfg.output / f"draws.{cfg.snapshot_format}")
