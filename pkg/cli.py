"""
Batch front door: sample, verify, oracle, report.

    python cli.py sample --config model1-quartic-d1-L4 --seed 7 --out runs/m1
    python cli.py verify --config quartic-single-site-N2 --suite ibp,flow --inline
    python cli.py oracle --config harmonic-ring-L4
    python cli.py report --out runs/m1

Data goes to files in --out; progress and log events go to stderr as JSON lines.
"""

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import psutil
from pydantic import BaseModel, Field, ValidationError, field_validator
from tqdm import tqdm

import config
from errors import CapacityError, ConfigurationError, DependencyError, DomainError, GibbsLabError
from gibbs import (
    ChainConfig,
    ShiftDirection,
    SampleWriter,
    matsubara,
    read_checkpoint,
    read_samples,
    run_chain,
    truncate_samples,
    write_checkpoint,
)
from interaction import Model, ModelSpec, PolynomialPotential, site_key
from loop_core import OscillatorParams, green_report
from oracle import (
    QuadratureSpec,
    ed_matsubara,
    harmonic_lattice_cov,
    quadrature_ibp_residuals,
    quadrature_moments,
)
from verify import (
    TestVerdict,
    conditions_verdicts,
    default_directions,
    dlr_test,
    flow_test,
    function_catalog,
    holder_scaling,
    ibp_test,
    langevin_agreement,
    moment_suite,
    temperedness_report,
    volume_ladder_models,
)

logger = logging.getLogger(__name__)

SUITES = ("ibp", "flow", "dlr", "moments", "holder", "matsubara", "langevin", "conditions")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2


# ---------------------------------------------------------
# Logging
# ---------------------------------------------------------
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonLinesFormatter(logging.Formatter):
    """One JSON object per line: ts, level, logger, event and any extra= fields."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "event": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED:
                payload[key] = value
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(verbose: bool = False):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLinesFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# ---------------------------------------------------------
# Manifest
# ---------------------------------------------------------
class RunManifest(BaseModel):
    command: Literal["sample", "verify", "oracle", "report"]
    model: Optional[str] = None
    chain: ChainConfig = Field(default_factory=ChainConfig)
    suites: List[str] = Field(default_factory=list)
    out: str = config.OUTPUT_DIR
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, ge=1)
    resume: Optional[str] = None
    inline: bool = False
    quiet: bool = False

    @field_validator("suites")
    @classmethod
    def _known_suites(cls, v):
        out = []
        for s in v:
            if s == "all":
                out.extend(SUITES)
            elif s in SUITES:
                out.append(s)
            else:
                raise ValueError(f"unknown suite {s!r}; choose from {', '.join(SUITES + ('all',))}")
        return list(dict.fromkeys(out))

    @field_validator("resume")
    @classmethod
    def _resume_exists(cls, v):
        if v is not None and not Path(v).exists():
            raise ValueError(f"checkpoint {v} does not exist")
        return v


def resolve_config(name_or_path: str) -> Path:
    path = Path(name_or_path)
    if path.suffix != ".json":
        path = config.PRESET_DIR / f"{name_or_path}.json"
    if not path.exists():
        raise ConfigurationError(f"model config not found: {name_or_path}")
    return path


def load_document(name_or_path: str) -> Tuple[Model, Dict[str, Any]]:
    """Compiled model plus the raw document (its optional "chain" block seeds ChainConfig)."""
    path = resolve_config(name_or_path)
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    try:
        spec = ModelSpec.from_file(path)
    except ValidationError as e:
        raise ConfigurationError(_pointed(e, path.name)) from None
    return spec.compile(), raw


def _pointed(e: ValidationError, where: str) -> str:
    parts = [f"{'.'.join(str(x) for x in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
    return f"{where}: " + "; ".join(parts)


def build_manifest(args: argparse.Namespace) -> Tuple[RunManifest, Optional[Model]]:
    model, raw = (None, {})
    if getattr(args, "config", None):
        model, raw = load_document(args.config)
    chain = dict(raw.get("chain", {}))
    for flag, key in (("sampler", "sampler"), ("step", "step"), ("dt", "dt"), ("sweeps", "n_sweeps"),
                      ("burn_in", "burn_in"), ("thin", "thin"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            chain[key] = value
    if getattr(args, "no_adapt", False):
        chain["adapt_step"] = False
    chain["seed"] = args.seed
    out = args.out or str(Path(config.OUTPUT_DIR) / (f"{model.spec.name}-{model.hash[:8]}" if model else "report"))
    try:
        manifest = RunManifest(
            command=args.command, model=getattr(args, "config", None), chain=ChainConfig(**chain),
            suites=[s for s in (getattr(args, "suite", "") or "").split(",") if s],
            out=out, seed=args.seed, workers=getattr(args, "workers", None) or default_workers(),
            resume=getattr(args, "resume", None), inline=getattr(args, "inline", False),
            quiet=getattr(args, "quiet", False),
        )
    except ValidationError as e:
        raise ConfigurationError(_pointed(e, "manifest")) from None
    return manifest, model


def default_workers() -> int:
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def _stamp(model: Optional[Model], manifest: RunManifest) -> Dict[str, Any]:
    return {"model_hash": model.hash if model else None, "version": config.version_string(), "seed": manifest.seed}


def _write_json(path: Path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_finite(payload), f, indent=2, sort_keys=True, default=_plain)


def _plain(obj):
    return obj.item() if hasattr(obj, "item") else str(obj)


def _finite(obj):
    """Non-finite floats become strings so the files stay strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_manifest(out: Path, manifest: RunManifest, model: Optional[Model]):
    payload = {**_stamp(model, manifest), "manifest": manifest.model_dump(mode="json")}
    if model is not None:
        payload["model_spec"] = json.loads(model.spec.canonical_json())
    _write_json(out / "manifest.json", payload)


# ---------------------------------------------------------
# Chains in a worker pool
# ---------------------------------------------------------
def _chain_job(spec_json: str, base_dir: Optional[str], cfg: Dict[str, Any]) -> Tuple[np.ndarray, Dict[str, Any]]:
    spec = ModelSpec.model_validate_json(spec_json)
    spec._base_dir = Path(base_dir) if base_dir else None
    model = spec.compile()
    result = run_chain(model, ChainConfig(**cfg), version=config.version_string())
    return result.samples, result.report.model_dump()


def run_chains(jobs: List[Tuple[Model, ChainConfig]], workers: int, seed: int,
               quiet: bool = True) -> List[Tuple[np.ndarray, Dict[str, Any]]]:
    """Independent chains, each seeded from its own SeedSequence child; results in submission order."""
    children = np.random.SeedSequence(seed).spawn(len(jobs))
    payloads = []
    for (model, cfg), child in zip(jobs, children):
        job_cfg = cfg.model_copy(update={"seed": int(child.generate_state(1, dtype=np.uint64)[0])})
        base = getattr(model.spec, "_base_dir", None)
        payloads.append((model.spec.model_dump_json(), str(base) if base else None, job_cfg.model_dump()))
    disable = quiet or not sys.stderr.isatty()
    if workers <= 1 or len(jobs) <= 1:
        return [_chain_job(*p) for p in tqdm(payloads, desc="chains", disable=disable, file=sys.stderr)]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(_chain_job, *p) for p in payloads]
        return [f.result() for f in tqdm(futures, desc="chains", disable=disable, file=sys.stderr)]


# ---------------------------------------------------------
# sample
# ---------------------------------------------------------
def cmd_sample(manifest: RunManifest, model: Model) -> int:
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, manifest, model)
    samples_path, ckpt_path = out / "samples.bin", out / "checkpoint.bin"
    cfg = manifest.chain

    resume, previous = None, None
    if manifest.resume:
        resume = read_checkpoint(manifest.resume, model.n_sites, model.n_coeffs)
        if samples_path.exists():
            truncate_samples(samples_path, model.n_sites, model.n_coeffs, resume.sweep)
            _, previous = read_samples(samples_path, model.n_sites, model.n_coeffs)
        logger.info("resuming", extra={"sweep": resume.sweep, "previous_samples": 0 if previous is None else len(previous)})

    t0 = time.perf_counter()
    with SampleWriter(samples_path, model.n_sites, model.n_coeffs, append=resume is not None) as writer:
        result = run_chain(
            model, cfg, resume=resume, previous_samples=previous, sample_sink=writer,
            checkpoint_sink=lambda ck: write_checkpoint(ckpt_path, ck),
            progress=not manifest.quiet and sys.stderr.isatty(), version=config.version_string(),
        )

    _write_json(out / "samples.json", {
        **_stamp(model, manifest), "n_sites": model.n_sites, "n_coeffs": model.n_coeffs,
        "sites": [site_key(s) for s in model.sites], "record": "u64 sweep + little-endian f64 coefficients",
    })
    _write_json(out / "chain_report.json", {
        **_stamp(model, manifest),
        "report": result.report.model_dump(),
        "resources": {
            "seconds": round(time.perf_counter() - t0, 3),
            "rss_mb": round(psutil.Process().memory_info().rss / 2**20, 1),
        },
    })
    return EXIT_OK


def load_samples(manifest: RunManifest, model: Model) -> np.ndarray:
    path = Path(manifest.out) / "samples.bin"
    if not path.exists():
        if not manifest.inline:
            raise DependencyError(f"no samples at {path}; run `sample` first or pass --inline")
        cmd_sample(manifest, model)
    _, samples = read_samples(path, model.n_sites, model.n_coeffs)
    return samples


# ---------------------------------------------------------
# verify
# ---------------------------------------------------------
def _matsubara_verdicts(model: Model, manifest: RunManifest) -> List[TestVerdict]:
    """MC + Feynman-Kac at N and 2N, extrapolated, against exact diagonalization."""
    if model.n_sites != 1 or model.coupling.is_active:
        raise DomainError("matsubara suite compares against one-site exact diagonalization")
    beta = model.params.beta
    taus = [0.0, 0.25 * beta, 0.5 * beta]
    fine = model.with_modes(2 * max(1, model.n_modes))
    runs = run_chains([(model, manifest.chain), (fine, manifest.chain)], manifest.workers, manifest.seed,
                      manifest.quiet)
    site = model.sites[0]
    q = lambda v: v
    verdicts = []
    for tau in taus:
        coarse = matsubara(model, runs[0][0], [(site, q), (site, q)], [0.0, tau])
        refined = matsubara(fine, runs[1][0], [(site, q), (site, q)], [0.0, tau])
        value = 2.0 * refined.value - coarse.value
        se = math.sqrt(4.0 * refined.se**2 + coarse.se**2)
        gap = abs(refined.value - coarse.value)
        exact = ed_matsubara(model.potentials[0], model.params, [0.0, tau], [[0.0, 1.0], [0.0, 1.0]]).value
        diff = value - exact
        z = diff / se if se > 0 else (0.0 if diff == 0 else math.inf)
        verdicts.append(TestVerdict(
            test="matsubara", equation="<q(0) q(tau)> by Feynman-Kac = trace formula", statistic=diff, se=se,
            z=z, passed=bool(abs(diff) <= config.Z_THRESHOLD * se + gap), n=int(len(runs[0][0])),
            seed=manifest.seed, model_hash=model.hash, bound=gap,
            metadata={"tau": tau, "mc_extrapolated": value, "mc_N": coarse.value, "mc_2N": refined.value,
                      "ed": exact, "truncation_gap": gap, "statistical_gap": config.Z_THRESHOLD * se},
        ))
    return verdicts


def _langevin_verdicts(model: Model, manifest: RunManifest) -> List[TestVerdict]:
    """pCN chain against Langevin chains at dt and dt/2; quadrature joins in when the model fits it."""
    cfg = manifest.chain
    dt = cfg.dt
    coarse = cfg.model_copy(update={"sampler": "langevin", "dt": dt})
    fine = cfg.model_copy(update={"sampler": "langevin", "dt": 0.5 * dt})
    pcn = cfg.model_copy(update={"sampler": "pcn"})
    runs = run_chains([(model, pcn), (model, coarse), (model, fine)], manifest.workers, manifest.seed,
                      manifest.quiet)
    exact = None
    if model.n_sites <= 2 and model.n_modes <= 2:
        exact = quadrature_moments(model).second_moments[0][model.n_modes]
    return langevin_agreement(model, runs[0][0], runs[1][0], runs[2][0], dt, exact, seed=manifest.seed)


def _moment_verdicts(model: Model, manifest: RunManifest, out: Path) -> List[TestVerdict]:
    v = model.spec.verification
    models = volume_ladder_models(model, v.volume_ladder)
    runs = run_chains([(m, manifest.chain) for m in models], manifest.workers, manifest.seed, manifest.quiet)
    rows, verdicts = moment_suite(models, [r[0] for r in runs], v.moment_Q, v.moment_alpha)
    _write_json(out / "moments.json", {**_stamp(model, manifest), "rows": [r.model_dump() for r in rows]})
    return verdicts


def run_suite(name: str, model: Model, manifest: RunManifest, out: Path,
              samples_cache: Dict[str, np.ndarray]) -> List[TestVerdict]:
    v = model.spec.verification

    def samples():
        if "main" not in samples_cache:
            samples_cache["main"] = load_samples(manifest, model)
        return samples_cache["main"]

    if name == "ibp":
        return ibp_test(model, samples(), default_directions(model), function_catalog(model), seed=manifest.seed)
    if name == "flow":
        direction = ShiftDirection(model.sites[0], 0)
        return flow_test(model, samples(), direction, v.flow_theta, seed=manifest.seed)
    if name == "dlr":
        sub = v.dlr_subvolume or [tuple(b) for b in model.geometry.box]
        return dlr_test(model, samples(), [tuple(b) for b in sub], step=manifest.chain.step, seed=manifest.seed)
    if name == "holder":
        fits, verdicts = holder_scaling(model, samples(), seed=manifest.seed)
        _write_json(out / "holder.json", {**_stamp(model, manifest), "fits": [f.model_dump() for f in fits]})
        return verdicts
    if name == "moments":
        return _moment_verdicts(model, manifest, out)
    if name == "matsubara":
        return _matsubara_verdicts(model, manifest)
    if name == "langevin":
        return _langevin_verdicts(model, manifest)
    if name == "conditions":
        table, verdicts = conditions_verdicts(model)
        tempered = temperedness_report(model, samples_cache.get("main"))
        _write_json(out / "conditions.json", {
            **_stamp(model, manifest), "constants": [c.model_dump() for c in table],
            "temperedness": [t.model_dump() for t in tempered],
        })
        return verdicts
    raise ConfigurationError(f"unknown suite {name!r}")


VERDICT_COLUMNS = ["test", "equation", "statistic", "se", "z", "pass", "n", "seed", "model_hash", "version", "detail"]


def _verdict_record(v: TestVerdict, version: str) -> Dict[str, Any]:
    rec = v.model_dump(by_alias=True)
    rec["version"] = version
    return rec


def _csv_row(rec: Dict[str, Any]) -> Dict[str, Any]:
    row = {k: rec.get(k) for k in VERDICT_COLUMNS if k != "detail"}
    detail = rec.get("metadata") or {}
    if "error" in rec:
        detail = {"error": rec["error"], "message": rec.get("message")}
    row["detail"] = json.dumps(_finite(detail), sort_keys=True, default=str)
    return _finite(row)


def write_verdicts(out: Path, records: List[Dict[str, Any]]):
    _write_json(out / "verdicts.json", records)
    with open(out / "verdicts.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=VERDICT_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(_csv_row(rec))


def cmd_verify(manifest: RunManifest, model: Model) -> int:
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    suites = manifest.suites or list(SUITES)
    version = config.version_string()
    records: List[Dict[str, Any]] = []
    cache: Dict[str, np.ndarray] = {}
    for name in suites:
        try:
            verdicts = run_suite(name, model, manifest, out, cache)
            records.extend(_verdict_record(v, version) for v in verdicts)
            logger.info("suite done", extra={"suite": name, "verdicts": len(verdicts),
                                             "failed": sum(not v.passed for v in verdicts)})
        except GibbsLabError as e:
            logger.error("suite error", extra={"suite": name, "error": type(e).__name__, "detail": str(e)})
            records.append({"test": name, "equation": "", "statistic": None, "se": None, "z": None,
                            "pass": False, "n": 0, "seed": manifest.seed, "model_hash": model.hash,
                            "version": version, "error": type(e).__name__, "message": str(e)})
    _write_manifest(out, manifest, model)
    write_verdicts(out, records)
    failed = sum(not r["pass"] for r in records)
    logger.info("verify done", extra={"verdicts": len(records), "failed": failed, "out": str(out)})
    return EXIT_OK if failed == 0 else EXIT_FAILED


# ---------------------------------------------------------
# oracle
# ---------------------------------------------------------
def _is_quadratic(model: Model) -> bool:
    return all(isinstance(p, PolynomialPotential) and p.degree <= 2 for p in model.potentials)


def cmd_oracle(manifest: RunManifest, model: Model) -> int:
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, manifest, model)
    stamp = _stamp(model, manifest)
    beta = model.params.beta
    taus = [0.0, 0.25 * beta, 0.5 * beta]
    written = []

    _write_json(out / "oracle_green.json", {**stamp, "method": "green", "report": green_report(model.params)})

    if model.n_sites <= 2 and model.n_modes <= 2:
        orders = model.spec.verification.quadrature_orders
        spec = QuadratureSpec(orders=orders) if orders else QuadratureSpec.for_model(model)
        spec.check(model)
        table = quadrature_moments(model, spec, taus=taus)
        payload = {**stamp, "method": "quadrature", "parameters": spec.model_dump(), "result": table.model_dump()}
        if model.n_sites == 1:
            residuals = quadrature_ibp_residuals(model, function_catalog(model), default_directions(model), spec)
            payload["ibp_residuals"] = [r.model_dump() for r in residuals]
        _write_json(out / "oracle_quadrature.json", payload)
        written.append("quadrature")

    if model.n_sites == 1 and not model.coupling.is_active and isinstance(model.potentials[0], PolynomialPotential):
        rows = []
        for tau in taus:
            res = ed_matsubara(model.potentials[0], model.params, [0.0, tau], [[0.0, 1.0], [0.0, 1.0]], certify=True)
            rows.append({"tau": tau, **res.model_dump()})
        _write_json(out / "oracle_ed.json", {**stamp, "method": "ed", "parameters": {"observable": "q q"},
                                             "rows": rows})
        written.append("ed")

    if _is_quadratic(model):
        try:
            tables = [harmonic_lattice_cov(model, 0.0, t).model_dump() for t in taus]
        except DomainError as e:
            logger.info("harmonic oracle skipped", extra={"detail": str(e)})
        else:
            _write_json(out / "oracle_harmonic.json", {**stamp, "method": "harmonic",
                                                       "parameters": {"cutoff": model.n_modes}, "tables": tables})
            written.append("harmonic")

    if not written:
        raise CapacityError("model is outside the capacity of every oracle (quadrature: <=2 sites, N<=2; "
                            "ED: one polynomial site; harmonic: quadratic periodic lattice)")
    logger.info("oracle done", extra={"tables": written, "out": str(out)})
    return EXIT_OK


# ---------------------------------------------------------
# report
# ---------------------------------------------------------
def cmd_report(manifest: RunManifest) -> int:
    out = Path(manifest.out)
    if not out.is_dir():
        raise DependencyError(f"nothing to report: {out} is not a directory")
    rows, green_blocks, failed = [], {}, 0
    for path in sorted(out.rglob("verdicts.json")):
        with open(path, "r", encoding="utf-8") as f:
            records = json.load(f)
        run = str(path.parent.relative_to(out)) or "."
        for rec in records:
            row = _csv_row(rec)
            row["run"] = run
            rows.append(row)
            failed += not rec.get("pass", False)
        man_path = path.parent / "manifest.json"
        if man_path.exists():
            with open(man_path, "r", encoding="utf-8") as f:
                man = json.load(f)
            if "model_spec" in man:
                osc = ModelSpec.model_validate(man["model_spec"]).oscillator
                green_blocks[run] = green_report(OscillatorParams(osc.m, osc.a, osc.beta))

    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["run"] + VERDICT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out / "report.json", {
        "version": config.version_string(), "seed": manifest.seed, "runs": sorted({r["run"] for r in rows}),
        "verdicts": len(rows), "failed": failed, "green": green_blocks,
    })
    logger.info("report done", extra={"verdicts": len(rows), "failed": failed})
    return EXIT_OK if failed == 0 else EXIT_FAILED


# ---------------------------------------------------------
# Entry point
# ---------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gibbs-lab", description="Euclidean Gibbs sampler and verification lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="model JSON document or preset name")
        p.add_argument("--seed", type=int, default=0, help="u64 seed recorded in every output")
        p.add_argument("--out", default=None, help=f"output directory (default under {config.OUTPUT_DIR})")
        p.add_argument("--quiet", action="store_true", help="no progress bars")
        p.add_argument("--verbose", action="store_true", help="debug log events")

    def chain_flags(p):
        p.add_argument("--sampler", choices=["pcn", "langevin"], default=None)
        p.add_argument("--step", type=float, default=None, help="pCN step s in (0, 1]")
        p.add_argument("--dt", type=float, default=None, help="Langevin time step")
        p.add_argument("--sweeps", type=int, default=None)
        p.add_argument("--burn-in", dest="burn_in", type=int, default=None)
        p.add_argument("--thin", type=int, default=None)
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
        p.add_argument("--no-adapt", dest="no_adapt", action="store_true", help="keep the pCN step fixed")
        p.add_argument("--workers", type=int, default=None, help="worker processes (default: physical cores)")

    p = sub.add_parser("sample", help="run a chain and write samples, checkpoint and report")
    common(p)
    chain_flags(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("verify", help="run verification suites")
    common(p)
    chain_flags(p)
    p.add_argument("--suite", default="all", help=f"comma list of {', '.join(SUITES)} or all")
    p.add_argument("--inline", action="store_true", help="sample first when no samples exist")

    p = sub.add_parser("oracle", help="write exact reference tables")
    common(p)

    p = sub.add_parser("report", help="aggregate an output directory")
    common(p, needs_config=False)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config.validate_config()
        manifest, model = build_manifest(args)
        if manifest.command == "sample":
            return cmd_sample(manifest, model)
        if manifest.command == "verify":
            return cmd_verify(manifest, model)
        if manifest.command == "oracle":
            return cmd_oracle(manifest, model)
        return cmd_report(manifest)
    except (GibbsLabError, ValueError) as e:
        logger.error("run failed", extra={"error": type(e).__name__, "detail": str(e)})
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
