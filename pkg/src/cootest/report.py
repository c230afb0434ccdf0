"""Suite reports: canonical JSON, CSV, and Markdown renderings.

The JSON document is the canonical record; aggregates embedded in it are
recomputable exactly from the per-scene records.  Rendering is a pure
function of the report value, so identical runs produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .jsonio import canonical_json
from .metrics import (
    LONG_RANGE,
    MIDDLE_RANGE,
    OVERALL_RANGE,
    SHORT_RANGE,
    BucketScore,
    RangeBuckets,
)
from .operators import TransformSpec

HARNESS_VERSION = "0.1.0"

RANGE_BUCKET_BOUNDS = {
    "short": list(SHORT_RANGE),
    "middle": list(MIDDLE_RANGE),
    "long": list(LONG_RANGE),
    "overall": list(OVERALL_RANGE),
}

_BUCKET_NAMES = ("short", "middle", "long", "overall")


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    spec: Optional[TransformSpec]  # transform that produced the scene
    ap_overall: float
    ap_by_range: RangeBuckets
    mce_count: int
    mr_violated: Optional[bool]  # None when no seed counterpart exists
    gui_pri: Optional[float]

    @property
    def kind(self) -> str:
        return self.spec.kind if self.spec is not None else "original"

    def to_json_obj(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "spec": self.spec.to_json_obj() if self.spec else None,
            "ap_overall": self.ap_overall,
            "ap_by_range": self.ap_by_range.to_json_obj(),
            "mce_count": self.mce_count,
            "mr_violated": self.mr_violated,
            "gui_pri": self.gui_pri,
        }


@dataclass(frozen=True)
class SuiteReport:
    per_scene: tuple[SceneRecord, ...]
    config: dict

    def sorted_records(self) -> list[SceneRecord]:
        return sorted(self.per_scene, key=lambda r: r.scene_id)

    def violation_count(self) -> int:
        return sum(1 for r in self.per_scene if r.mr_violated)

    def to_json_obj(self) -> dict:
        return {
            "harness_version": HARNESS_VERSION,
            "config": dict(self.config, range_buckets=RANGE_BUCKET_BOUNDS),
            "per_scene": [r.to_json_obj() for r in self.sorted_records()],
            "aggregates": compute_aggregates(self.per_scene),
        }


def _mean(values: Sequence[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def _bucket(record: SceneRecord, name: str) -> BucketScore:
    return getattr(record.ap_by_range, name)


def compute_aggregates(records: Sequence[SceneRecord]) -> dict:
    """Per-operator and per-range rollups of the per-scene records.

    Bucket means skip scenes whose bucket saw neither ground truth nor
    predictions (their 1.0 placeholder would skew means).
    """
    kinds = sorted({r.kind for r in records})
    by_kind = {}
    for kind in kinds:
        group = [r for r in records if r.kind == kind]
        entry = {
            "scene_count": len(group),
            "mean_ap_overall": _mean([r.ap_overall for r in group]),
            "total_mce": sum(r.mce_count for r in group),
            "mr_violations": sum(1 for r in group if r.mr_violated),
        }
        for name in _BUCKET_NAMES:
            scored = [_bucket(r, name).ap for r in group if not _bucket(r, name).empty]
            entry[f"mean_ap_{name}"] = _mean(scored)
        by_kind[kind] = entry
    by_range = {}
    for name in _BUCKET_NAMES:
        scored = [_bucket(r, name).ap for r in records if not _bucket(r, name).empty]
        by_range[name] = {
            "mean_ap": _mean(scored),
            "scene_count": len(scored),
        }
    return {"by_kind": by_kind, "by_range": by_range}


# ---------------------------------------------------------------------------
# renderers


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(report: SuiteReport) -> str:
    header = (
        "scene_id,kind,ap_overall,ap_short,ap_middle,ap_long,"
        "mce_count,mr_violated,gui_pri"
    )
    lines = [header]
    for r in report.sorted_records():
        lines.append(
            ",".join(
                [
                    r.scene_id,
                    r.kind,
                    _fmt(r.ap_overall),
                    _fmt(r.ap_by_range.short.ap),
                    _fmt(r.ap_by_range.middle.ap),
                    _fmt(r.ap_by_range.long.ap),
                    _fmt(r.mce_count),
                    _fmt(r.mr_violated),
                    _fmt(r.gui_pri),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _md_cell(value: Optional[float]) -> str:
    return f"{value:.3f}" if value is not None else "-"


def render_markdown(report: SuiteReport) -> str:
    aggregates = compute_aggregates(report.per_scene)
    by_kind = aggregates["by_kind"]
    original = by_kind.get("original")
    lines = [
        "# Suite report",
        "",
        f"Scenes: {len(report.per_scene)}; "
        f"MR violations: {report.violation_count()}; "
        f"total MCE: {sum(r.mce_count for r in report.per_scene)}",
        "",
        "## AP by perceiving range (before = untransformed seeds)",
        "",
        "| Operator | Short before | Short after | Middle before | Middle after "
        "| Long before | Long after | Overall before | Overall after | MCE |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for kind in sorted(by_kind):
        if kind == "original":
            continue
        entry = by_kind[kind]
        row = [kind]
        for name in ("short", "middle", "long", "overall"):
            row.append(_md_cell(original[f"mean_ap_{name}"] if original else None))
            row.append(_md_cell(entry[f"mean_ap_{name}"]))
        row.append(str(entry["total_mce"]))
        lines.append("| " + " | ".join(row) + " |")
    if original:
        lines += [
            "",
            f"Untransformed seeds: {original['scene_count']} scenes, "
            f"overall AP {_md_cell(original['mean_ap_overall'])}.",
        ]
    lines.append("")
    return "\n".join(lines)


def render_report(report: SuiteReport, fmt: str) -> str:
    if fmt == "json":
        return canonical_json(report.to_json_obj())
    if fmt == "csv":
        return render_csv(report)
    if fmt == "md":
        return render_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")
