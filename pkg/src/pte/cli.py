"""Operator surface: config loading, subcommand dispatch, run directories.

Exit codes: 0 success, 2 usage or configuration problem, 3 backend failure,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dp_accounting import DEFAULT_DELTA, PrivacyBudget, calibrate_sigma
from .dp_voting import EmbeddingSet, read_embeddings, write_embeddings
from .errors import BackendError, ConfigError, InternalError
from .evaluation import W1_MAX_POINTS, distance_report, exact_wasserstein1, frechet_distance, gaussian_stats, subsample
from .evolution import Origin, RunConfig, load_candidates, run_spti
from .model_api import (
    HttpBackendSuite,
    HttpSuiteConfig,
    MixtureComponent,
    MockWorld,
    MockWorldConfig,
    RecordingTransport,
    ReplayTransport,
    load_template,
    serialize_vector,
)
from .seeding import DOMAIN_PRIVATE_DATA, substream

logger = logging.getLogger(__name__)

_RUN_KEYS = {
    "num_samples_schedule": True,
    "iterations": True,
    "epsilon": True,
    "seed": True,
    "backend": True,
    "private_data": True,
    "delta": False,
    "lookahead_degree": False,
    "selection_multiplicity": False,
    "initial_variation_api_fold": False,
    "next_variation_api_fold": False,
    "metric": False,
    "voting_space": False,
    "normalize_lookahead": False,
}

_MOCK_BACKEND_KEYS = {
    "kind": True,
    "latent_dim": True,
    "variation_scale": True,
    "render_matrix_seed": True,
    "private_mixture": True,
}

_HTTP_BACKEND_KEYS = {
    "kind": True,
    "chat_model": False,
    "caption_model": False,
    "image_model": False,
    "embed_model": False,
    "random_template_file": False,
    "variation_template_file": False,
    "caption_instruction_file": False,
    "max_inflight": False,
    "timeout": False,
    "retries": False,
    "backoff": False,
    "transcript": False,
}


@dataclass
class AppConfig:
    """Validated run configuration: the run knobs plus backend and data wiring."""

    run: RunConfig
    backend: dict
    private_data: dict

    def to_dict(self) -> dict:
        run = self.run
        return {
            "num_samples_schedule": run.population,
            "iterations": run.iterations,
            "lookahead_degree": run.lookahead_degree,
            "selection_multiplicity": run.selection_multiplicity,
            "initial_variation_api_fold": run.initial_variation_api_fold,
            "next_variation_api_fold": run.next_variation_api_fold,
            "epsilon": run.budget.epsilon if run.budget else None,
            "delta": run.budget.delta if run.budget else None,
            "metric": run.metric,
            "voting_space": run.voting_space,
            "seed": run.seed,
            "normalize_lookahead": run.normalize_lookahead,
            "backend": self.backend,
            "private_data": self.private_data,
        }


def _check_keys(obj: dict, schema: dict[str, bool], context: str, problems: list[str]) -> None:
    for key in obj:
        if key not in schema:
            problems.append(f"{context}: unknown key {key!r}")
    for key, required in schema.items():
        if required and key not in obj:
            problems.append(f"{context}: missing required key {key!r}")


def _expect(obj, key, types, context, problems, predicate=None, describe=""):
    if key not in obj:
        return None
    value = obj[key]
    if not isinstance(value, types) or isinstance(value, bool) and bool not in (
        types if isinstance(types, tuple) else (types,)
    ):
        problems.append(f"{context}: {key!r} has invalid type {type(value).__name__}")
        return None
    if predicate is not None and not predicate(value):
        problems.append(f"{context}: {key!r} {describe}, got {value!r}")
        return None
    return value


def _parse_population(obj: dict, problems: list[str]) -> int | None:
    value = obj.get("num_samples_schedule")
    if isinstance(value, bool) or value is None:
        if value is not None:
            problems.append("config: 'num_samples_schedule' must be an integer or list of integers")
        return None
    if isinstance(value, int):
        if value < 1:
            problems.append(f"config: 'num_samples_schedule' must be >= 1, got {value}")
            return None
        return value
    if isinstance(value, list) and value and all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        if len(set(value)) != 1:
            problems.append(
                "config: non-constant 'num_samples_schedule' is not supported; use a single value"
            )
            return None
        if value[0] < 1:
            problems.append(f"config: 'num_samples_schedule' must be >= 1, got {value[0]}")
            return None
        return value[0]
    problems.append("config: 'num_samples_schedule' must be an integer or list of integers")
    return None


def _validate_backend(spec, problems: list[str]) -> dict | None:
    if not isinstance(spec, dict):
        problems.append("config: 'backend' must be an object")
        return None
    kind = spec.get("kind")
    if kind == "mock":
        _check_keys(spec, _MOCK_BACKEND_KEYS, "backend", problems)
        _expect(spec, "latent_dim", int, "backend", problems, lambda v: v >= 1, "must be >= 1")
        _expect(
            spec, "variation_scale", (int, float), "backend", problems, lambda v: v > 0, "must be > 0"
        )
        _expect(spec, "render_matrix_seed", int, "backend", problems)
        mixture = spec.get("private_mixture")
        if not isinstance(mixture, list) or not mixture:
            problems.append("backend: 'private_mixture' must be a non-empty list")
        else:
            for i, comp in enumerate(mixture):
                if not isinstance(comp, dict):
                    problems.append(f"backend: mixture component {i} must be an object")
                    continue
                _check_keys(
                    comp,
                    {"mean": True, "std": True, "weight": True},
                    f"backend.private_mixture[{i}]",
                    problems,
                )
    elif kind == "http":
        _check_keys(spec, _HTTP_BACKEND_KEYS, "backend", problems)
    else:
        problems.append(f"backend: 'kind' must be 'mock' or 'http', got {kind!r}")
        return None
    return spec


def _validate_private_data(spec, problems: list[str]) -> dict | None:
    if not isinstance(spec, dict):
        problems.append("config: 'private_data' must be an object")
        return None
    source = spec.get("source")
    if source == "mixture":
        _check_keys(spec, {"source": True, "num_samples": True}, "private_data", problems)
        _expect(
            spec, "num_samples", int, "private_data", problems, lambda v: v >= 1, "must be >= 1"
        )
    elif source == "files":
        _check_keys(spec, {"source": True, "embeddings": True}, "private_data", problems)
        _expect(spec, "embeddings", str, "private_data", problems)
    elif source == "image_dir":
        _check_keys(spec, {"source": True, "path": True}, "private_data", problems)
        _expect(spec, "path", str, "private_data", problems)
    else:
        problems.append(
            f"private_data: 'source' must be 'mixture', 'files' or 'image_dir', got {source!r}"
        )
        return None
    return spec


def parse_config(doc: dict) -> AppConfig:
    """Validate the declarative run document, reporting every problem at once."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    _check_keys(doc, _RUN_KEYS, "config", problems)

    population = _parse_population(doc, problems)
    iterations = _expect(doc, "iterations", int, "config", problems, lambda v: v >= 0, "must be >= 0")
    epsilon = _expect(
        doc, "epsilon", (int, float), "config", problems, lambda v: v > 0, "must be > 0"
    )
    delta = _expect(
        doc, "delta", (int, float), "config", problems, lambda v: 0 < v < 1, "must be in (0, 1)"
    )
    seed = _expect(doc, "seed", int, "config", problems, lambda v: 0 <= v < 2**64, "must fit in 64 bits")
    backend = _validate_backend(doc.get("backend"), problems) if "backend" in doc else None
    private_data = (
        _validate_private_data(doc.get("private_data"), problems) if "private_data" in doc else None
    )
    lookahead = _expect(
        doc, "lookahead_degree", int, "config", problems, lambda v: v >= 0, "must be >= 0"
    )
    multiplicity = _expect(
        doc, "selection_multiplicity", int, "config", problems, lambda v: v >= 1, "must be >= 1"
    )
    initial_fold = _expect(
        doc, "initial_variation_api_fold", int, "config", problems, lambda v: v >= 0, "must be >= 0"
    )
    next_fold = _expect(
        doc, "next_variation_api_fold", int, "config", problems, lambda v: v >= 1, "must be >= 1"
    )
    metric = _expect(
        doc, "metric", str, "config", problems,
        lambda v: v in ("euclidean", "cosine"), "must be 'euclidean' or 'cosine'",
    )
    voting_space = _expect(
        doc, "voting_space", str, "config", problems,
        lambda v: v in ("image", "text"), "must be 'image' or 'text'",
    )
    normalize_lookahead = _expect(doc, "normalize_lookahead", bool, "config", problems)

    if (
        backend is not None
        and private_data is not None
        and private_data.get("source") == "mixture"
        and backend.get("kind") != "mock"
    ):
        problems.append("private_data: source 'mixture' requires the mock backend")

    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))

    run = RunConfig(
        population=population,
        iterations=iterations,
        lookahead_degree=lookahead if lookahead is not None else 0,
        selection_multiplicity=multiplicity if multiplicity is not None else 1,
        initial_variation_api_fold=initial_fold if initial_fold is not None else 0,
        next_variation_api_fold=next_fold if next_fold is not None else 1,
        budget=PrivacyBudget(epsilon=float(epsilon), delta=float(delta) if delta is not None else DEFAULT_DELTA),
        metric=metric if metric is not None else "euclidean",
        voting_space=voting_space if voting_space is not None else "image",
        seed=seed,
        normalize_lookahead=bool(normalize_lookahead) if normalize_lookahead is not None else False,
    )
    return AppConfig(run=run, backend=backend, private_data=private_data)


def load_config(path: str | Path) -> AppConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)


def _mock_world(app: AppConfig) -> MockWorld:
    spec = app.backend
    mixture = tuple(
        MixtureComponent(mean=tuple(float(x) for x in c["mean"]), std=float(c["std"]), weight=float(c["weight"]))
        for c in spec["private_mixture"]
    )
    config = MockWorldConfig(
        latent_dim=spec["latent_dim"],
        variation_scale=float(spec["variation_scale"]),
        render_matrix_seed=spec["render_matrix_seed"],
        private_mixture=mixture,
    )
    return MockWorld(config, seed=app.run.seed, metric=app.run.metric)


def _http_suite(app: AppConfig) -> HttpBackendSuite:
    spec = dict(app.backend)
    spec.pop("kind")
    transcript = spec.pop("transcript", None)
    overrides = {}
    for key in ("chat_model", "caption_model", "image_model", "embed_model"):
        if key in spec:
            overrides[key] = spec.pop(key)
    for src_key, cfg_key in (
        ("random_template_file", "random_template"),
        ("variation_template_file", "variation_template"),
        ("caption_instruction_file", "caption_instruction"),
    ):
        if src_key in spec:
            overrides[cfg_key] = load_template(spec.pop(src_key))
    for key in ("max_inflight", "retries"):
        if key in spec:
            overrides[key] = int(spec.pop(key))
    for key in ("timeout", "backoff"):
        if key in spec:
            overrides[key] = float(spec.pop(key))
    config = HttpSuiteConfig.from_env(metric=app.run.metric, **overrides)
    transport = None
    if transcript:
        mode = transcript.get("mode")
        path = transcript.get("path")
        if mode == "replay":
            transport = ReplayTransport(path)
        elif mode == "record":
            transport = RecordingTransport(HttpBackendSuite(config).transport, path)
        else:
            raise ConfigError(f"backend.transcript: mode must be 'record' or 'replay', got {mode!r}")
    return HttpBackendSuite(config, transport=transport)


def _load_private_images(app: AppConfig, world: MockWorld | None):
    spec = app.private_data
    source = spec["source"]
    if source == "mixture":
        if world is None:
            raise ConfigError("private_data source 'mixture' requires the mock backend")
        rng = substream(app.run.seed, DOMAIN_PRIVATE_DATA)
        latents, _ = world.sample_private_latents(spec["num_samples"], rng)
        return world.render_private(latents)
    if source == "files":
        return read_embeddings(spec["embeddings"], metric=app.run.metric).vectors
    paths = sorted(Path(spec["path"]).iterdir())
    images = [p.read_bytes() for p in paths if p.is_file()]
    if not images:
        raise ConfigError(f"private_data: no files under {spec['path']}")
    return images


def write_manifest(run_dir: Path, app: AppConfig, sigma: float) -> None:
    manifest = {
        "engine_version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "seed": app.run.seed,
        "calibrated_sigma": sigma,
        "config": app.to_dict(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    budget = PrivacyBudget(epsilon=args.epsilon, delta=args.delta)
    schedule = calibrate_sigma(budget, args.iterations)
    print(f"{schedule.sigma:.12g}")
    return 0


def cmd_run(args) -> int:
    if args.run_dir is None:
        raise ConfigError("run requires --run-dir")
    app = load_config(args.config)
    if args.seed is not None:
        app = AppConfig(
            run=RunConfig(
                **{**app.run.__dict__, "seed": args.seed},
            ),
            backend=app.backend,
            private_data=app.private_data,
        )
    run_dir = Path(args.run_dir)
    if (run_dir / "manifest.json").exists():
        raise ConfigError(f"{run_dir} already contains a run manifest; choose a fresh directory")
    run_dir.mkdir(parents=True, exist_ok=True)

    world = None
    if app.backend["kind"] == "mock":
        world = _mock_world(app)
        backends = world.suite()
    else:
        backends = _http_suite(app).suite()

    sigma = (
        calibrate_sigma(app.run.budget, app.run.iterations).sigma
        if app.run.budget is not None and app.run.iterations >= 1
        else 0.0
    )
    write_manifest(run_dir, app, sigma)

    private_images = _load_private_images(app, world)
    result = run_spti(private_images, app.run, backends, run_dir=run_dir)
    print(
        f"run complete: {len(result.synthetic_texts)} synthetic texts over "
        f"{app.run.iterations} generations in {run_dir}"
    )
    return 0


def _w1_against_private(private: EmbeddingSet, rows: EmbeddingSet | None, seed: int) -> float | None:
    if rows is None or len(rows) < 1:
        return None
    n = min(len(private), len(rows), W1_MAX_POINTS)
    return exact_wasserstein1(subsample(private, n, seed), subsample(rows, n, seed + 1))


def _generation_rows(run_dir: Path):
    g = 0
    while (run_dir / f"gen_{g}" / "histogram.json").exists():
        gen_dir = run_dir / f"gen_{g}"
        candidates = load_candidates(gen_dir / "candidates.jsonl")
        embeddings = read_embeddings(gen_dir / "embeddings.bin")
        yield g, candidates, embeddings
        g += 1


def cmd_evaluate(args) -> int:
    private = read_embeddings(args.private)
    if args.run_dir is not None:
        run_dir = Path(args.run_dir)
        out_path = args.csv if args.csv else run_dir / "metrics.csv"
        private_stats = gaussian_stats(private)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generation", "fid_core", "w1_voted", "w1_variants"])
            for g, candidates, embeddings in _generation_rows(run_dir):
                fid = frechet_distance(private_stats, gaussian_stats(embeddings))
                voted_idx = [i for i, c in enumerate(candidates) if c.origin is Origin.VOTED]
                variant_idx = [i for i, c in enumerate(candidates) if c.origin is Origin.VARIANT]
                w1_voted = _w1_against_private(
                    private, embeddings.select(voted_idx) if voted_idx else None, seed=2 * g
                )
                w1_variants = _w1_against_private(
                    private, embeddings.select(variant_idx) if variant_idx else None, seed=2 * g + 1
                )
                writer.writerow(
                    [
                        g,
                        f"{fid:.9g}",
                        "" if w1_voted is None else f"{w1_voted:.9g}",
                        "" if w1_variants is None else f"{w1_variants:.9g}",
                    ]
                )
        print(f"wrote {out_path}")
        return 0
    if args.synthetic is None:
        raise ConfigError("evaluate requires --synthetic (or --run-dir for per-generation CSV)")
    synthetic = read_embeddings(args.synthetic)
    report = distance_report(private, synthetic, include_w1=args.w1)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_mockgen(args) -> int:
    app = load_config(args.config)
    if app.backend["kind"] != "mock":
        raise ConfigError("mockgen requires a config with the mock backend")
    seed = args.seed if args.seed is not None else app.run.seed
    world = _mock_world(app)
    rng = substream(seed, DOMAIN_PRIVATE_DATA)
    latents, _ = world.sample_private_latents(args.samples, rng)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_embeddings(out_dir / "embeddings.bin", world.render_private(latents))
    captions = [serialize_vector(t) for t in latents]
    (out_dir / "captions.txt").write_text("".join(t + "\n" for t in captions))
    print(f"wrote {args.samples} samples to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pte", description="Private evolution over textual intermediaries")
    parser.add_argument("--run-dir", default=None, help="run directory (required for `run`)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--log-level", default="WARNING", help="logging level (DEBUG..CRITICAL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="print the per-iteration noise scale for a budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--iterations", type=int, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="execute the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="compare synthetic embeddings against private ones")
    p.add_argument("--private", required=True)
    p.add_argument("--synthetic", default=None)
    p.add_argument("--w1", action="store_true", help="also compute exact Wasserstein-1")
    p.add_argument("--csv", default=None, help="output CSV path for --run-dir mode")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mockgen", help="synthesize a mock private dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mockgen)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except InternalError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
