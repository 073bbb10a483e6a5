"""Patient-level data model, endpoint classification, and CSV ingestion.

A patient's record holds the baseline tumour size and the per-visit sizes
up to their last observed visit.  New-lesion progression terminates the
record (the size at the progression visit is still measured); tumour-growth
progression is detected from the recorded log size ratios and only affects
endpoint classification.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import NonPositiveSize, ParseError, ValidationError

RESPONSE_THRESHOLD = math.log(0.7)
GROWTH_THRESHOLD = math.log(1.2)

PROGRESSION_NONE = "none"
PROGRESSION_NEW_LESION = "new_lesion"
PROGRESSION_GROWTH = "tumour_growth"


@dataclass(frozen=True)
class Progression:
    cause: str
    time: int | None  # 1-based visit index, None if no progression


@dataclass(frozen=True)
class PatientRecord:
    """One patient's baseline size, visit sizes, and new-lesion flags."""

    id: str
    z0: float
    sizes: tuple[float, ...]
    new_lesion: tuple[int, ...]
    arm: int | None = None

    def __post_init__(self):
        if self.z0 <= 0 or not math.isfinite(self.z0):
            raise NonPositiveSize(f"patient {self.id}: baseline size {self.z0}")
        if any(s <= 0 or not math.isfinite(s) for s in self.sizes):
            raise NonPositiveSize(f"patient {self.id}: non-positive visit size")
        if len(self.sizes) != len(self.new_lesion):
            raise ValidationError(f"patient {self.id}: sizes/new_lesion length mismatch")
        if any(d not in (0, 1) for d in self.new_lesion):
            raise ValidationError(f"patient {self.id}: new_lesion entries must be 0/1")
        if any(d == 1 for d in self.new_lesion[:-1]):
            raise ValidationError(
                f"patient {self.id}: record continues after new-lesion progression"
            )
        if self.arm not in (None, 0, 1):
            raise ValidationError(f"patient {self.id}: arm must be 0/1")

    @property
    def last_observed(self) -> int:
        return len(self.sizes)

    @property
    def new_lesion_time(self) -> int | None:
        if self.sizes and self.new_lesion[-1] == 1:
            return self.last_observed
        return None


def log_ratios(p: PatientRecord):
    """y_t = log(size_t / baseline) for the observed visits."""
    return [math.log(s / p.z0) for s in p.sizes]


def detect_progression(p: PatientRecord, growth_threshold: float = GROWTH_THRESHOLD):
    """First progression event: new lesions or >20% growth from baseline.

    Growth and a new lesion on the same visit count as new-lesion
    progression (new lesions are assessed first).
    """
    y = log_ratios(p)
    growth_time = next((t for t, v in enumerate(y, start=1) if v > growth_threshold), None)
    nl_time = p.new_lesion_time
    if nl_time is not None and (growth_time is None or nl_time <= growth_time):
        return Progression(PROGRESSION_NEW_LESION, nl_time)
    if growth_time is not None:
        return Progression(PROGRESSION_GROWTH, growth_time)
    return Progression(PROGRESSION_NONE, None)


def classify_fixed(
    p: PatientRecord,
    t: int,
    response_threshold: float = RESPONSE_THRESHOLD,
    growth_threshold: float = GROWTH_THRESHOLD,
    check_intermediate_growth: bool = False,
) -> int:
    """Responder indicator at a fixed visit t.

    1 iff the patient is observed at t with no new-lesion progression
    through t and log size ratio below the threshold at t.  With
    ``check_intermediate_growth`` the stricter reading also requiring no
    tumour-growth progression before t is applied.
    """
    if p.last_observed < t:
        return 0
    if any(p.new_lesion[:t]):
        return 0
    y = log_ratios(p)
    if check_intermediate_growth and any(v > growth_threshold for v in y[: t - 1]):
        return 0
    return int(y[t - 1] < response_threshold)


def _bor_horizon(p: PatientRecord, growth_threshold: float) -> int:
    """Last visit eligible for a best-observed-response claim."""
    prog = detect_progression(p, growth_threshold)
    horizon = p.last_observed
    if prog.cause == PROGRESSION_GROWTH:
        horizon = min(horizon, prog.time)
    elif prog.cause == PROGRESSION_NEW_LESION:
        horizon = min(horizon, prog.time - 1)
    return horizon


def classify_bor(
    p: PatientRecord,
    confirmation: bool = False,
    response_threshold: float = RESPONSE_THRESHOLD,
    growth_threshold: float = GROWTH_THRESHOLD,
) -> int:
    """Best-observed-response indicator, optionally requiring confirmation
    at two consecutive visits before progression."""
    horizon = _bor_horizon(p, growth_threshold)
    y = log_ratios(p)
    hits = [v < response_threshold for v in y[:horizon]]
    if not confirmation:
        return int(any(hits))
    return int(any(hits[i] and hits[i + 1] for i in range(len(hits) - 1)))


@dataclass(frozen=True)
class TrialDataset:
    """All patients of one trial plus the classification configuration."""

    patients: tuple[PatientRecord, ...]
    T: int
    response_threshold: float = RESPONSE_THRESHOLD
    growth_threshold: float = GROWTH_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        if self.T < 1:
            raise ValidationError("T must be at least 1")
        if self.response_threshold >= self.growth_threshold:
            raise ValidationError("response threshold must lie below growth threshold")
        for p in self.patients:
            if p.last_observed > self.T:
                raise ValidationError(f"patient {p.id}: more visits than T={self.T}")
        arms = {p.arm for p in self.patients}
        if None in arms and len(arms) > 1:
            raise ValidationError("mixed single-arm and two-arm records")
        if arms == {0, 1}:
            for a in (0, 1):
                if sum(1 for p in self.patients if p.arm == a) < 2:
                    raise ValidationError(f"arm {a} has fewer than 2 patients")

    @property
    def n(self) -> int:
        return len(self.patients)

    @property
    def two_arm(self) -> bool:
        return any(p.arm is not None for p in self.patients)

    def classify(self, kind: str, confirmation: bool = False):
        """Per-patient binary endpoint under the dataset thresholds."""
        if kind == "fixed_time":
            return [
                classify_fixed(p, self.T, self.response_threshold, self.growth_threshold)
                for p in self.patients
            ]
        return [
            classify_bor(p, confirmation, self.response_threshold, self.growth_threshold)
            for p in self.patients
        ]


_CSV_HEADER = ["patient_id", "arm", "visit", "size_mm", "new_lesion"]


def load_csv(
    path,
    T: int | None = None,
    response_threshold: float = RESPONSE_THRESHOLD,
    growth_threshold: float = GROWTH_THRESHOLD,
) -> TrialDataset:
    """Read one-row-per-patient-visit CSV data (visit 0 is baseline).

    T defaults to the largest visit index present.  Sidecar configuration
    (T, thresholds) is passed by the caller; see the CLI flags.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [h.strip() for h in header] != _CSV_HEADER:
            raise ParseError(f"{path}: expected header {','.join(_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            pid, arm_s, visit_s, size_s, nl_s = (c.strip() for c in row)
            try:
                visit = int(visit_s)
                size = float(size_s)
                nl = int(nl_s)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            arm = None if arm_s == "" else int(arm_s)
            rows.append((lineno, pid, arm, visit, size, nl))

    by_patient: dict[str, list] = {}
    for entry in rows:
        by_patient.setdefault(entry[1], []).append(entry)

    patients = []
    for pid, entries in by_patient.items():
        entries.sort(key=lambda e: e[3])
        visits = [e[3] for e in entries]
        if visits != list(range(len(entries))):
            raise ValidationError(
                f"patient {pid}: visits must be consecutive from 0, got {visits}"
            )
        baseline = entries[0]
        if baseline[5] != 0:
            raise ValidationError(f"patient {pid}: new_lesion must be 0 at baseline")
        arms = {e[2] for e in entries}
        if len(arms) > 1:
            raise ValidationError(f"patient {pid}: inconsistent arm labels")
        nls = [e[5] for e in entries[1:]]
        if any(d == 1 for d in nls[:-1]):
            raise ValidationError(f"patient {pid}: record after new-lesion progression")
        try:
            patients.append(
                PatientRecord(
                    id=pid,
                    arm=baseline[2],
                    z0=baseline[4],
                    sizes=tuple(e[4] for e in entries[1:]),
                    new_lesion=tuple(nls),
                )
            )
        except NonPositiveSize as exc:
            raise ValidationError(str(exc)) from None

    if T is None:
        T = max((p.last_observed for p in patients), default=1)
    return TrialDataset(
        patients=tuple(patients),
        T=T,
        response_threshold=response_threshold,
        growth_threshold=growth_threshold,
    )


def write_csv(dataset: TrialDataset, path) -> None:
    """Inverse of load_csv; round-trips field-for-field."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for p in dataset.patients:
            arm = "" if p.arm is None else p.arm
            writer.writerow([p.id, arm, 0, repr(float(p.z0)), 0])
            for t, (size, nl) in enumerate(zip(p.sizes, p.new_lesion), start=1):
                writer.writerow([p.id, arm, t, repr(float(size)), int(nl)])
