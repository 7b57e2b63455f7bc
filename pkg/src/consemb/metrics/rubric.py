"""Rule-based scoring of generated plans against case fields."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

from ..grammar import CaseFields, extract_plan, plan_vocabulary, tokenize

RUBRICS = ("r1_laterality", "r2_surgery_aim", "r3_scope", "r4_dose_scheme", "r5_hallucination")


@dataclass(frozen=True)
class RubricResult:
    r1_laterality: int = 0
    r2_surgery_aim: int = 0
    r3_scope: int = 0
    r4_dose_scheme: int = 0
    r5_hallucination: int = 0
    parse_failure: bool = False

    @property
    def total(self) -> int:
        return sum(getattr(self, r) for r in RUBRICS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


@lru_cache(maxsize=1)
def _sanctioned() -> frozenset:
    return frozenset(plan_vocabulary())


def score_plan_rubrics(generated_plan: str, gt_fields: CaseFields) -> RubricResult:
    """R1 laterality, R2 surgery/aim, R3 nodal scope, R4 dose, R5 no extra content.

    R1 needs the header and the aim clause to agree with the reference sides.
    R5 is 1 only if every token is sanctioned plan vocabulary and every
    sentence is a recognised, non-repeated clause.
    """
    ex = extract_plan(generated_plan)
    if ex.n_clauses == 0:
        return RubricResult(parse_failure=True)
    clean = ex.well_formed and set(tokenize(generated_plan)) <= _sanctioned()
    return RubricResult(
        r1_laterality=int(ex.laterality == gt_fields.laterality and ex.aim_sides == gt_fields.sides),
        r2_surgery_aim=int(ex.surgery == gt_fields.surgery),
        r3_scope=int(ex.nodal_involvement == gt_fields.nodal_involvement),
        r4_dose_scheme=int(ex.dose_scheme == gt_fields.dose_scheme),
        r5_hallucination=int(clean),
    )
