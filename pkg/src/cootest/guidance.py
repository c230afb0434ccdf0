"""Guided test generation: rank transformed scenes by how strongly the
cooperative output diverges from what the ego vehicle sees on its own.

The raw priority of a transformed scene is the negated mean, over ego
detections, of the confidence-weighted fraction of each ego box's volume
covered by cooperative boxes, additionally divided by the cooperative box
count to discount multi-box pileups:

    raw = - sum_i  s_i / (n_ego * n_coop) * overlap(b_i, coop) / vol(b_i)

Raw scores are <= 0; zero overlap is the highest priority.  A scene where
the ego detects nothing carries no signal and gets a -inf sentinel that
always ranks last.  Batch min-max normalization maps raw scores onto
[0, 1] for reporting without changing the selection order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .errors import TransformError
from .geometry import intersection_volume
from .operators import TransformSpec, apply, sample_params
from .perception import DetectionResult, DetectorConfig, get_pred
from .rng import SplitMix64, derive_seed
from .scene import Scene

log = logging.getLogger(__name__)

SENTINEL = float("-inf")


def raw_priority(
    ego_result: DetectionResult, cp_result: DetectionResult
) -> float:
    """Raw (unnormalized) priority; SENTINEL when the ego detects nothing."""
    n_ego = len(ego_result.boxes)
    n_cp = len(cp_result.boxes)
    if n_ego == 0:
        return SENTINEL
    if n_cp == 0:
        return 0.0
    total = 0.0
    for ego_box in ego_result.boxes:
        overlap = sum(intersection_volume(ego_box, cp_box) for cp_box in cp_result.boxes)
        total += ego_box.confidence / (n_ego * n_cp) * overlap / ego_box.volume()
    return -total


def normalize_scores(raw_scores: Sequence[float]) -> list[float]:
    """Batch min-max map onto [0, 1].

    Sentinels map to 0; a constant batch maps to 0.5 everywhere.  The map
    is monotone, so ranking by normalized score equals ranking by raw.
    """
    if len(raw_scores) == 0:
        raise ValueError("cannot normalize an empty batch")
    finite = [s for s in raw_scores if s != SENTINEL]
    if not finite:
        return [0.0] * len(raw_scores)
    lo, hi = min(finite), max(finite)
    span = hi - lo
    out = []
    for s in raw_scores:
        if s == SENTINEL:
            out.append(0.0)
        elif span == 0.0:
            out.append(0.5)
        else:
            out.append((s - lo) / span)
    return out


@dataclass(frozen=True)
class Candidate:
    """A transformed scene with its spec and (optionally) its scores."""

    transformed_scene: Scene
    spec: TransformSpec
    gui_raw: Optional[float] = None
    gui_pri: Optional[float] = None
    ego_result: Optional[DetectionResult] = None
    cp_result: Optional[DetectionResult] = None

    def sort_key(self):
        # Descending raw score (sentinel last), then scene id, then spec
        # digest; total order, so top-k selection is deterministic.
        raw = self.gui_raw if self.gui_raw is not None else SENTINEL
        return (-raw, self.transformed_scene.scene_id, self.spec.digest())


def _transformed_id(seed_id: str, kind: str) -> str:
    return f"{seed_id}--{kind.lower()}"


def _make_candidate(
    seed_scene: Scene, kind: str, master_seed: int, ordinal: int = 0
) -> Candidate:
    spec_seed = derive_seed(master_seed, seed_scene.scene_id, kind, ordinal)
    spec = sample_params(kind, spec_seed)
    transformed = apply(spec, seed_scene)
    new_id = _transformed_id(seed_scene.scene_id, kind)
    if ordinal:
        new_id = f"{new_id}-{ordinal}"
    transformed = replace(transformed, scene_id=new_id)
    return Candidate(transformed_scene=transformed, spec=spec)


def guided_generate(
    detector: DetectorConfig,
    operator_kinds: Sequence[str],
    seeds: Sequence[Scene],
    num_gen: int,
    master_seed: int,
) -> list[Candidate]:
    """Score every (seed, operator) pair and keep the num_gen best.

    A bounded candidate list is maintained while scanning: candidates are
    appended until the budget fills, after which an incoming candidate
    replaces the current worst iff it ranks strictly higher, and the list
    is re-sorted.  The result equals a global sort of all scored
    candidates truncated to num_gen.
    """
    if num_gen < 1:
        raise ValueError("num_gen must be >= 1")
    if not operator_kinds:
        raise ValueError("operator set must not be empty")
    kept: list[Candidate] = []
    all_raw: list[float] = []
    scored: list[Candidate] = []
    for seed_scene in seeds:
        for kind in operator_kinds:
            try:
                candidate = _make_candidate(seed_scene, kind, master_seed)
            except TransformError as exc:
                log.warning(
                    "skipping %s on %s: %s", kind, seed_scene.scene_id, exc
                )
                continue
            ego_result, cp_result = get_pred(detector, candidate.transformed_scene)
            raw = raw_priority(ego_result, cp_result)
            candidate = replace(
                candidate, gui_raw=raw, ego_result=ego_result, cp_result=cp_result
            )
            all_raw.append(raw)
            scored.append(candidate)
            if len(kept) < num_gen:
                kept.append(candidate)
                kept.sort(key=Candidate.sort_key)
            elif candidate.sort_key() < kept[-1].sort_key():
                kept[-1] = candidate
                kept.sort(key=Candidate.sort_key)
    normalized = normalize_scores(all_raw) if all_raw else []
    pri_by_key = {c.sort_key(): p for c, p in zip(scored, normalized)}
    return [replace(c, gui_pri=pri_by_key[c.sort_key()]) for c in kept]


def random_generate(
    operator_kinds: Sequence[str],
    seeds: Sequence[Scene],
    num_gen: int,
    master_seed: int,
) -> list[Candidate]:
    """Baseline: sample (seed, operator, params) uniformly, no scoring."""
    if num_gen < 1:
        raise ValueError("num_gen must be >= 1")
    if not operator_kinds or not seeds:
        raise ValueError("operator set and seed set must not be empty")
    stream = SplitMix64(derive_seed(master_seed, "random-baseline"))
    out: list[Candidate] = []
    occurrences: dict[tuple[str, str], int] = {}
    attempts = 0
    max_attempts = num_gen * 50
    while len(out) < num_gen:
        attempts += 1
        if attempts > max_attempts:
            raise TransformError(
                f"random generation stalled after {attempts} attempts"
            )
        seed_scene = seeds[stream.randbelow(len(seeds))]
        kind = operator_kinds[stream.randbelow(len(operator_kinds))]
        key = (seed_scene.scene_id, kind)
        ordinal = occurrences.get(key, 0)
        try:
            candidate = _make_candidate(seed_scene, kind, stream.next_u64(), ordinal)
        except TransformError as exc:
            log.warning("skipping %s on %s: %s", kind, seed_scene.scene_id, exc)
            continue
        occurrences[key] = ordinal + 1
        out.append(candidate)
    return out
