"""The private-evolution loop over textual candidates.

Each generation renders/embeds the candidate pool, lets private embeddings
vote for their nearest candidates, privatizes the histogram, and selects
the next pool from the resulting distribution. Private data enters the
loop only as the first argument of the vote histogram; everything
downstream is post-processing of the privatized counts.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import dp_voting
from .dp_accounting import PrivacyBudget, calibrate_sigma
from .dp_voting import (
    METRICS,
    EmbeddingSet,
    SelectionDistribution,
    dump_histogram,
    histogram_record,
    write_embeddings,
)
from .errors import BackendError, ConfigError, InternalError
from .model_api import BackendSuite
from .seeding import DOMAIN_PRIVATIZE, DOMAIN_SELECT, substream

logger = logging.getLogger(__name__)

VOTING_SPACES = ("image", "text")


class Origin(str, Enum):
    RANDOM_INIT = "random_init"
    VOTED = "voted"
    VARIANT = "variant"


@dataclass(frozen=True)
class Candidate:
    """One text with its lineage; origin random_init means no parent."""

    id: int
    text: str
    generation: int
    parent_id: int | None
    origin: Origin

    def __post_init__(self):
        if self.origin is Origin.RANDOM_INIT and self.parent_id is not None:
            raise ValueError("random_init candidates cannot have a parent")
        if self.origin is not Origin.RANDOM_INIT and self.parent_id is None:
            raise ValueError(f"{self.origin.value} candidates need a parent")

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "generation": self.generation,
            "parent_id": self.parent_id,
            "origin": self.origin.value,
        }


@dataclass
class CandidatePool:
    candidates: list[Candidate]
    generation: int

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate pool cannot be empty")
        ids = [c.id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be unique within a pool")

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def texts(self) -> list[str]:
        return [c.text for c in self.candidates]


@dataclass(frozen=True)
class RunConfig:
    """Knobs of one evolutionary run.

    ``budget=None`` disables privatization entirely (sigma = 0); that mode
    exists for mock-world verification and carries no privacy guarantee.
    """

    population: int
    iterations: int
    lookahead_degree: int = 0
    selection_multiplicity: int = 1
    initial_variation_api_fold: int = 0
    next_variation_api_fold: int = 1
    budget: PrivacyBudget | None = None
    metric: str = "euclidean"
    voting_space: str = "image"
    seed: int = 0
    normalize_lookahead: bool = False

    def __post_init__(self):
        problems = []
        if self.population < 1:
            problems.append(f"population must be >= 1, got {self.population}")
        if self.iterations < 0:
            problems.append(f"iterations must be >= 0, got {self.iterations}")
        if self.lookahead_degree < 0:
            problems.append(f"lookahead_degree must be >= 0, got {self.lookahead_degree}")
        if self.selection_multiplicity < 1:
            problems.append(f"selection_multiplicity must be >= 1, got {self.selection_multiplicity}")
        if self.initial_variation_api_fold < 0:
            problems.append(f"initial_variation_api_fold must be >= 0, got {self.initial_variation_api_fold}")
        if self.next_variation_api_fold < 1:
            problems.append(f"next_variation_api_fold must be >= 1, got {self.next_variation_api_fold}")
        if self.metric not in METRICS:
            problems.append(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.voting_space not in VOTING_SPACES:
            problems.append(f"voting_space must be one of {VOTING_SPACES}, got {self.voting_space!r}")
        if not (0 <= self.seed < 2**64):
            problems.append(f"seed must fit in 64 bits, got {self.seed}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class SelectionOutcome:
    next_pool: CandidatePool
    voted: list[Candidate]
    voted_source_ids: list[int]


@dataclass
class GenerationRecord:
    """Everything observed while processing one generation."""

    generation: int
    sigma: float
    pool: list[Candidate]
    embeddings: EmbeddingSet
    counts_raw: np.ndarray
    counts_noisy: np.ndarray
    probs: np.ndarray
    voted: list[Candidate]
    voted_source_ids: list[int]
    variant_ids: list[int]


@dataclass
class RunTrace:
    seed: int
    sigma: float
    generations: list[GenerationRecord] = field(default_factory=list)
    final_pool: CandidatePool | None = None


@dataclass
class AugPeResult:
    final_texts: list[str]
    trace: RunTrace


@dataclass
class SpTiResult:
    synthetic_images: Any
    synthetic_texts: list[str]
    trace: RunTrace


class _IdAllocator:
    def __init__(self):
        self._counter = itertools.count()

    def take(self) -> int:
        return next(self._counter)


def _initial_pool(config: RunConfig, backends: BackendSuite, ids: _IdAllocator) -> CandidatePool:
    """Random seeds plus the configured rounds of generation-0 expansion.

    Each expansion round appends one fresh variant of every seed, so the
    pool grows to population * (1 + initial_variation_api_fold).
    """
    seed_texts = backends.random_api(config.population)
    seeds = [
        Candidate(ids.take(), text, 0, None, Origin.RANDOM_INIT) for text in seed_texts
    ]
    candidates = list(seeds)
    for _ in range(config.initial_variation_api_fold):
        child_texts = backends.variation_api([c.text for c in seeds], 1)
        candidates.extend(
            Candidate(ids.take(), text, 0, seeds[i].id, Origin.VARIANT)
            for i, text in enumerate(child_texts)
        )
    return CandidatePool(candidates=candidates, generation=0)


def select_next(
    pool: CandidatePool,
    probs: SelectionDistribution,
    config: RunConfig,
    rng: np.random.Generator,
    variation_api,
    ids: _IdAllocator,
) -> SelectionOutcome:
    """Form the next pool from the selection distribution.

    With selection_multiplicity 1, the voted set is drawn i.i.d. with
    replacement and the next pool consists purely of its variations. With
    multiplicity above 1, the voted set is the top-population candidates by
    probability (ties to the lower index), joined by lookahead_degree - 1
    variation batches.
    """
    if len(probs) != len(pool):
        raise InternalError(
            f"probability vector of length {len(probs)} does not match pool of {len(pool)}"
        )
    n = config.population
    fold = config.next_variation_api_fold
    next_gen = pool.generation + 1

    if config.selection_multiplicity == 1:
        chosen = rng.choice(len(pool), size=n, replace=True, p=probs.probs)
    else:
        chosen = np.argsort(-probs.probs, kind="stable")[:n]

    voted = [
        Candidate(ids.take(), pool.candidates[i].text, next_gen, pool.candidates[i].id, Origin.VOTED)
        for i in chosen
    ]
    voted_texts = [c.text for c in voted]

    def variant_batch() -> list[Candidate]:
        child_texts = variation_api(voted_texts, fold)
        return [
            Candidate(ids.take(), text, next_gen, voted[i // fold].id, Origin.VARIANT)
            for i, text in enumerate(child_texts)
        ]

    if config.selection_multiplicity == 1:
        next_candidates = variant_batch()
    else:
        next_candidates = list(voted)
        for _ in range(max(config.lookahead_degree - 1, 0)):
            next_candidates.extend(variant_batch())

    return SelectionOutcome(
        next_pool=CandidatePool(candidates=next_candidates, generation=next_gen),
        voted=voted,
        voted_source_ids=[pool.candidates[i].id for i in chosen],
    )


def _embed_texts(texts: Sequence[str], config: RunConfig, backends: BackendSuite) -> EmbeddingSet:
    """Candidate-side embedding along the configured voting space."""
    if config.voting_space == "image":
        embedded = backends.encode_image(backends.text_to_image(texts))
    else:
        embedded = backends.encode_text(texts)
    if embedded.metric != config.metric:
        raise ConfigError(
            f"backend produced metric {embedded.metric!r} but the run uses {config.metric!r}"
        )
    return embedded


def _pool_embeddings(pool: CandidatePool, config: RunConfig, backends: BackendSuite) -> EmbeddingSet:
    """Embed the pool directly, or through averaged lookahead variations."""
    if config.lookahead_degree == 0:
        return _embed_texts(pool.texts, config, backends)
    variant_sets = []
    for _ in range(config.lookahead_degree):
        variant_texts = backends.variation_api(pool.texts, 1)
        variant_sets.append(_embed_texts(variant_texts, config, backends))
    return dp_voting.lookahead_average(variant_sets, normalize_rows=config.normalize_lookahead)


def run_aug_pe(
    private_images,
    config: RunConfig,
    backends: BackendSuite,
    private_texts: Sequence[str] | None = None,
    run_dir: str | Path | None = None,
) -> AugPeResult:
    """Run the full voting loop and return the final pool's texts plus the trace.

    The noise scale is calibrated for the exact number of iterations before
    any private data is touched; with iterations = 0 the initial pool is
    returned untouched and private data is never read.
    """
    if config.budget is not None and config.iterations >= 1:
        sigma = calibrate_sigma(config.budget, config.iterations).sigma
    else:
        sigma = 0.0
        if config.budget is None and config.iterations >= 1:
            logger.warning("no privacy budget configured: running with sigma = 0 (not private)")

    ids = _IdAllocator()
    pool = _initial_pool(config, backends, ids)
    trace = RunTrace(seed=config.seed, sigma=sigma)

    if config.iterations > 0:
        if config.voting_space == "image":
            private_side = backends.encode_image(private_images)
        else:
            if private_texts is None:
                raise ValueError("text voting requires the private captions")
            private_side = backends.encode_text(private_texts)
        if private_side.metric != config.metric:
            raise ConfigError(
                f"backend produced metric {private_side.metric!r} but the run uses {config.metric!r}"
            )

        for g in range(config.iterations):
            try:
                embeddings = _pool_embeddings(pool, config, backends)
                raw = dp_voting.nn_histogram(private_side, embeddings)
                noisy = dp_voting.privatize(
                    raw, sigma, substream(config.seed, DOMAIN_PRIVATIZE, g)
                )
                probs = dp_voting.normalize(noisy)
                outcome = select_next(
                    pool,
                    probs,
                    config,
                    substream(config.seed, DOMAIN_SELECT, g),
                    backends.variation_api,
                    ids,
                )
            except BackendError as exc:
                raise BackendError(f"generation {g}: {exc}") from exc
            record = GenerationRecord(
                generation=g,
                sigma=sigma,
                pool=list(pool.candidates),
                embeddings=embeddings,
                counts_raw=raw.counts.copy(),
                counts_noisy=noisy.counts.copy(),
                probs=probs.probs.copy(),
                voted=outcome.voted,
                voted_source_ids=outcome.voted_source_ids,
                variant_ids=[c.id for c in outcome.next_pool.candidates if c.origin is Origin.VARIANT],
            )
            trace.generations.append(record)
            if run_dir is not None:
                persist_generation(run_dir, record)
            pool = outcome.next_pool
            logger.info(
                "generation %d: %d votes over %d candidates, pool -> %d",
                g, int(raw.counts.sum()), len(raw.counts), len(pool),
            )

    trace.final_pool = pool
    if run_dir is not None:
        persist_pool(run_dir, pool)
    return AugPeResult(final_texts=pool.texts, trace=trace)


def run_spti(
    private_images,
    config: RunConfig,
    backends: BackendSuite,
    run_dir: str | Path | None = None,
) -> SpTiResult:
    """Caption private images, evolve texts privately, render the result.

    Captions are always computed and persisted; image voting does not
    consume them, text voting embeds them as the private vote side. The
    rendered output depends on private data only through the privatized
    histograms.
    """
    captions = backends.caption(private_images)
    if run_dir is not None:
        private_dir = Path(run_dir) / "private"
        private_dir.mkdir(parents=True, exist_ok=True)
        (private_dir / "captions.txt").write_text("".join(t + "\n" for t in captions))

    result = run_aug_pe(
        private_images, config, backends, private_texts=captions, run_dir=run_dir
    )
    images = backends.text_to_image(result.final_texts)
    if run_dir is not None:
        final_dir = Path(run_dir) / "final"
        final_dir.mkdir(parents=True, exist_ok=True)
        (final_dir / "texts.txt").write_text("".join(t + "\n" for t in result.final_texts))
        _persist_images(final_dir, images)
    return SpTiResult(synthetic_images=images, synthetic_texts=result.final_texts, trace=result.trace)


# ---------------------------------------------------------------------------
# Trace persistence
# ---------------------------------------------------------------------------


def _write_candidates(path: Path, candidates: Sequence[Candidate]) -> None:
    with open(path, "w") as fh:
        for c in candidates:
            fh.write(json.dumps(c.to_json_dict()) + "\n")


def persist_generation(run_dir: str | Path, record: GenerationRecord) -> None:
    gen_dir = Path(run_dir) / f"gen_{record.generation}"
    gen_dir.mkdir(parents=True, exist_ok=True)
    _write_candidates(gen_dir / "candidates.jsonl", record.pool)
    _write_candidates(gen_dir / "voted.jsonl", record.voted)
    dump_histogram(
        gen_dir / "histogram.json",
        histogram_record(
            record.generation,
            record.sigma,
            dp_voting.VoteHistogram(record.counts_raw, int(record.counts_raw.sum())),
            dp_voting.VoteHistogram(record.counts_noisy, int(record.counts_raw.sum())),
            SelectionDistribution(record.probs),
        ),
    )
    write_embeddings(gen_dir / "embeddings.bin", record.embeddings)


def persist_pool(run_dir: str | Path, pool: CandidatePool) -> None:
    gen_dir = Path(run_dir) / f"gen_{pool.generation}"
    gen_dir.mkdir(parents=True, exist_ok=True)
    _write_candidates(gen_dir / "candidates.jsonl", pool.candidates)


def _persist_images(final_dir: Path, images) -> None:
    if isinstance(images, np.ndarray) and images.ndim == 2:
        write_embeddings(final_dir / "images.bin", images)
    else:
        for i, img in enumerate(images):
            if isinstance(img, bytes):
                (final_dir / f"image_{i:05d}.png").write_bytes(img)


def load_candidates(path: str | Path) -> list[Candidate]:
    """Read back a candidates.jsonl file."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(
            Candidate(
                id=obj["id"],
                text=obj["text"],
                generation=obj["generation"],
                parent_id=obj["parent_id"],
                origin=Origin(obj["origin"]),
            )
        )
    return out
