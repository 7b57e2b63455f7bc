"""Closed template grammar for the synthetic clinical corpus.

Plans are a bijection of :class:`CaseFields`; summaries are the compact
restatement of everything the plan depends on except the dose, which a plan
writer has to infer from the clinical fields (see :func:`recommend_dose`).
"""
from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from .errors import ConfigurationError, PlanParseError

TOKEN_RE = re.compile(r"\d+\.\d+|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text.lower())


def detokenize(tokens) -> str:
    text = " ".join(tokens)
    return re.sub(r" ([.,:;])", r"\1", text)


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Laterality(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    BILATERAL = "bilateral"


class Surgery(str, enum.Enum):
    BREAST_CONSERVING = "breast_conserving"
    TOTAL_MASTECTOMY = "total_mastectomy"


class Nodal(str, enum.Enum):
    NONE = "none"
    AXILLARY = "axillary"
    SUPRACLAVICULAR = "supraclavicular"
    INTERNAL_MAMMARY = "internal_mammary"


@dataclass(frozen=True)
class DoseScheme:
    total_gy: float
    fractions: int

    @property
    def gy_text(self) -> str:
        return f"{self.total_gy:g}"


DOSE_CATALOG: tuple[DoseScheme, ...] = (
    DoseScheme(26.0, 5),
    DoseScheme(40.05, 15),
    DoseScheme(42.56, 16),
    DoseScheme(50.0, 25),
)


@dataclass(frozen=True)
class CaseFields:
    laterality: Laterality
    surgery: Surgery
    nodal_involvement: Nodal
    stage_t: int
    stage_n: int
    dose_scheme: DoseScheme

    def __post_init__(self):
        # accept plain strings from JSON
        object.__setattr__(self, "laterality", Laterality(self.laterality))
        object.__setattr__(self, "surgery", Surgery(self.surgery))
        object.__setattr__(self, "nodal_involvement", Nodal(self.nodal_involvement))
        if not 0 <= self.stage_t <= 4:
            raise ConfigurationError(f"stage_t out of range: {self.stage_t}")
        if not 0 <= self.stage_n <= 3:
            raise ConfigurationError(f"stage_n out of range: {self.stage_n}")
        if self.dose_scheme not in DOSE_CATALOG:
            raise ConfigurationError(f"dose scheme not in catalog: {self.dose_scheme}")

    @property
    def sides(self) -> tuple[str, ...]:
        if self.laterality is Laterality.BILATERAL:
            return ("left", "right")
        return (self.laterality.value,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["laterality"] = self.laterality.value
        d["surgery"] = self.surgery.value
        d["nodal_involvement"] = self.nodal_involvement.value
        d["dose_scheme"] = {"total_gy": self.dose_scheme.total_gy,
                            "fractions": self.dose_scheme.fractions}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CaseFields":
        d = dict(d)
        d["dose_scheme"] = DoseScheme(float(d["dose_scheme"]["total_gy"]),
                                      int(d["dose_scheme"]["fractions"]))
        return cls(**d)


def all_case_fields():
    """Every valid CaseFields combination (2560 of them)."""
    for lat, surg, nodal, t, n, dose in itertools.product(
            Laterality, Surgery, Nodal, range(5), range(4), DOSE_CATALOG):
        yield CaseFields(lat, surg, nodal, t, n, dose)


def recommend_dose(fields: CaseFields) -> DoseScheme:
    """Dose rule the generator uses, so the plan writer has something to learn."""
    if fields.nodal_involvement is not Nodal.NONE:
        return DoseScheme(50.0, 25)
    if fields.surgery is Surgery.TOTAL_MASTECTOMY:
        return DoseScheme(42.56, 16)
    if fields.stage_t <= 1:
        return DoseScheme(26.0, 5)
    return DoseScheme(40.05, 15)


# -- plan -------------------------------------------------------------------

_AIM = {Surgery.BREAST_CONSERVING: "definitive", Surgery.TOTAL_MASTECTOMY: "postoperative"}
_TARGET = {Surgery.BREAST_CONSERVING: "whole breast", Surgery.TOTAL_MASTECTOMY: "chest wall"}
_SURGERY_PHRASE = {Surgery.BREAST_CONSERVING: "breast conserving surgery",
                   Surgery.TOTAL_MASTECTOMY: "total mastectomy"}
_NODAL_PHRASE = {Nodal.NONE: "none", Nodal.AXILLARY: "axillary",
                 Nodal.SUPRACLAVICULAR: "supraclavicular",
                 Nodal.INTERNAL_MAMMARY: "internal mammary"}


def _header(fields: CaseFields) -> str:
    return (f"{fields.laterality.value.capitalize()} breast cancer, "
            f"cT{fields.stage_t} N{fields.stage_n}.")


def _aim_clause(fields: CaseFields) -> str:
    s = fields.surgery
    parts = [f"the {side} {_TARGET[s]} after {_SURGERY_PHRASE[s]}" for side in fields.sides]
    return f"{_AIM[s].capitalize()} RT to " + ", and to ".join(parts) + "."


def render_plan(fields: CaseFields) -> str:
    return " ".join([
        _header(fields),
        _aim_clause(fields),
        f"Regional nodes: {_NODAL_PHRASE[fields.nodal_involvement]}.",
        f"Dose: {fields.dose_scheme.gy_text} Gy in {fields.dose_scheme.fractions} fx.",
    ])


def render_summary(fields: CaseFields) -> str:
    s = _SURGERY_PHRASE[fields.surgery]
    surgery = " and ".join(f"{side} {s}" for side in fields.sides)
    return " ".join([
        _header(fields),
        f"Status post {surgery}.",
        f"Nodal involvement: {_NODAL_PHRASE[fields.nodal_involvement]}.",
    ])


def _sentences(text: str) -> list[str]:
    toks = tokenize(text)
    out, cur = [], []
    for tok in toks:
        if tok == ".":
            if cur:
                out.append(" ".join(cur))
            cur = []
        else:
            cur.append(tok)
    if cur:
        out.append(" ".join(cur))
    return out


_HEADER_RE = re.compile(r"^(left|right|bilateral) breast cancer , ct([0-4]) n([0-3])$")
_NODES_RE = re.compile(r"^regional nodes : (none|axillary|supraclavicular|internal mammary)$")
_DOSE_RE = re.compile(r"^dose : (\d+(?:\.\d+)?) gy in (\d+) fx$")
_NODAL_BY_PHRASE = {v: k for k, v in _NODAL_PHRASE.items()}


def _aim_variants():
    """Normalized aim clause -> (surgery, sides) for every grammatical variant."""
    table = {}
    for s in Surgery:
        for sides in (("left",), ("right",), ("left", "right")):
            parts = [f"the {side} {_TARGET[s]} after {_SURGERY_PHRASE[s]}" for side in sides]
            table[normalize(f"{_AIM[s]} RT to " + ", and to ".join(parts))] = (s, sides)
    return table


_AIM_TABLE = _aim_variants()


@dataclass
class PlanExtraction:
    """Lenient field extraction from possibly malformed plan text.

    Fields the parser could not recover are ``None``. ``well_formed`` is False
    when any sentence falls outside the grammar or a clause kind repeats.
    """
    laterality: Laterality | None = None
    surgery: Surgery | None = None
    nodal_involvement: Nodal | None = None
    stage_t: int | None = None
    stage_n: int | None = None
    dose_scheme: DoseScheme | None = None
    aim_sides: tuple[str, ...] | None = None
    well_formed: bool = True
    n_clauses: int = 0


def extract_plan(text: str) -> PlanExtraction:
    ex = PlanExtraction()
    seen = set()
    for sent in _sentences(text):
        kind = None
        if m := _HEADER_RE.match(sent):
            kind = "header"
            ex.laterality = Laterality(m.group(1))
            ex.stage_t, ex.stage_n = int(m.group(2)), int(m.group(3))
        elif sent in _AIM_TABLE:
            kind = "aim"
            ex.surgery, ex.aim_sides = _AIM_TABLE[sent]
        elif m := _NODES_RE.match(sent):
            kind = "nodes"
            ex.nodal_involvement = _NODAL_BY_PHRASE[m.group(1)]
        elif m := _DOSE_RE.match(sent):
            kind = "dose"
            dose = DoseScheme(float(m.group(1)), int(m.group(2)))
            if dose in DOSE_CATALOG:
                ex.dose_scheme = dose
            else:
                ex.well_formed = False
        if kind is None or kind in seen:
            ex.well_formed = False
        if kind is not None:
            seen.add(kind)
            ex.n_clauses += 1
    return ex


def parse_plan(text: str) -> CaseFields:
    """Strict inverse of :func:`render_plan`."""
    ex = extract_plan(text)
    values = (ex.laterality, ex.surgery, ex.nodal_involvement, ex.stage_t,
              ex.stage_n, ex.dose_scheme)
    if not ex.well_formed or any(v is None for v in values):
        raise PlanParseError(f"not a well-formed plan: {text!r}")
    fields = CaseFields(*values)
    if ex.aim_sides != fields.sides:
        raise PlanParseError(f"aim clause sides {ex.aim_sides} disagree with header")
    return fields


def plan_vocabulary() -> set[str]:
    """Tokens a well-formed plan may contain."""
    vocab = set()
    for f in all_case_fields():
        vocab.update(tokenize(render_plan(f)))
    return vocab


# -- reports ----------------------------------------------------------------

SIZE_TOKENS = tuple(f"{x / 10:.1f}" for x in range(5, 81))


def _tumor_size(stage_t: int, rng: np.random.Generator) -> str:
    lo, hi = {1: (5, 20), 2: (21, 50), 3: (51, 80), 4: (15, 80)}[stage_t]
    return f"{rng.integers(lo, hi + 1) / 10:.1f}"


def _positive_nodes(stage_n: int, rng: np.random.Generator) -> int:
    lo, hi = {0: (0, 0), 1: (1, 3), 2: (4, 9), 3: (10, 15)}[stage_n]
    return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class TemplateGrammar:
    """Wording tables for verbose reports."""
    surgery_synonyms: dict = field(default_factory=lambda: {
        Surgery.BREAST_CONSERVING: ("breast conserving surgery", "partial mastectomy", "lumpectomy"),
        Surgery.TOTAL_MASTECTOMY: ("total mastectomy", "modified radical mastectomy"),
    })
    node_regions: dict = field(default_factory=lambda: {
        Nodal.AXILLARY: "axillary", Nodal.SUPRACLAVICULAR: "supraclavicular",
        Nodal.INTERNAL_MAMMARY: "internal mammary",
    })
    mass_words: tuple = ("enhancing mass", "irregular enhancing lesion", "spiculated mass")
    us_words: tuple = ("hypoechoic mass", "irregular hypoechoic lesion")
    histology: tuple = ("invasive ductal carcinoma", "invasive lobular carcinoma",
                        "invasive carcinoma of no special type")
    bpe: tuple = ("minimal", "mild", "moderate")
    receptor: tuple = ("positive", "negative")

    def check_coverage(self, lateralities=tuple(Laterality)):
        for lat, surg, nodal in itertools.product(lateralities, Surgery, Nodal):
            if not self.surgery_synonyms.get(surg):
                raise ConfigurationError(
                    f"no report template for ({lat.value}, {surg.value}, {nodal.value}): "
                    f"missing surgery wording")
            if nodal is not Nodal.NONE and not self.node_regions.get(nodal):
                raise ConfigurationError(
                    f"no report template for ({lat.value}, {surg.value}, {nodal.value}): "
                    f"missing nodal region wording")
        for name in ("mass_words", "us_words", "histology", "bpe", "receptor"):
            if not getattr(self, name):
                raise ConfigurationError(f"template table {name!r} is empty")

    def phrases(self) -> list[str]:
        out = list(self.mass_words + self.us_words + self.histology + self.bpe + self.receptor)
        out += list(self.node_regions.values())
        out += [s for syn in self.surgery_synonyms.values() for s in syn]
        return out

    def render_report(self, fields: CaseFields, rng: np.random.Generator) -> str:
        """Verbose multi-section report; section order and wording vary with ``rng``."""
        pick = lambda seq: seq[int(rng.integers(len(seq)))]  # noqa: E731
        lat = fields.laterality.value
        side_words = " and ".join(fields.sides)
        breast = "breasts" if len(fields.sides) > 1 else "breast"

        if fields.stage_t == 0:
            mri = (f"MRI: no residual enhancing lesion in the {side_words} {breast} "
                   f"after neoadjuvant chemotherapy.")
            size = None
        else:
            size = _tumor_size(fields.stage_t, rng)
            mri = f"MRI: {size} cm {pick(self.mass_words)} in the {side_words} {breast}"
            mri += ", with chest wall invasion." if fields.stage_t == 4 else "."
        mri += f" Background parenchymal enhancement is {pick(self.bpe)}."
        if fields.laterality is not Laterality.BILATERAL and rng.random() < 0.5:
            other = "right" if lat == "left" else "left"
            mri += f" No suspicious finding in the {other} breast."

        clock = int(rng.integers(1, 13))
        if size is None:
            us = f"US: post treatment change at {clock} o'clock of the {side_words} {breast}."
        else:
            us = (f"US: {pick(self.us_words)} at {clock} o'clock of the "
                  f"{side_words} {breast}, {size} cm.")
        if fields.nodal_involvement is Nodal.NONE:
            us += " No suspicious lymph node."
        else:
            us += (f" Suspicious lymph nodes in the "
                   f"{self.node_regions[fields.nodal_involvement]} region.")

        k = _positive_nodes(fields.stage_n, rng)
        m = k + int(rng.integers(1, 11))
        path = (f"Pathology: {pick(self.histology)}, histologic grade {int(rng.integers(1, 4))}. "
                f"{k} of {m} lymph nodes positive. ER {pick(self.receptor)}, "
                f"PR {pick(self.receptor)}, HER2 {pick(self.receptor)}.")

        surg = pick(self.surgery_synonyms[fields.surgery])
        op = "Operation: " + " and ".join(f"{side} {surg}" for side in fields.sides) + "."

        sections = [mri, us, path, op]
        order = rng.permutation(len(sections))
        return " ".join(sections[i] for i in order)


def vocabulary() -> list[str]:
    """Every token the grammar can emit, sorted."""
    fragments = [
        "MRI: no residual enhancing lesion in the left and right breasts after neoadjuvant "
        "chemotherapy, with chest wall invasion. Background parenchymal enhancement is",
        "No suspicious finding in the breast. US: post treatment change at o'clock of the",
        "No suspicious lymph node. Suspicious lymph nodes in the region. cm",
        "Pathology: histologic grade of lymph nodes positive. ER PR HER2",
        "Operation: and",
        "summarize the clinical report: suggest the radiotherapy plan:",
        " ".join(TemplateGrammar().phrases()),
        " ".join(SIZE_TOKENS),
        " ".join(str(i) for i in range(0, 31)),
    ]
    vocab = set()
    for frag in fragments:
        vocab.update(tokenize(frag))
    for f in all_case_fields():
        vocab.update(tokenize(render_plan(f)))
        vocab.update(tokenize(render_summary(f)))
    return sorted(vocab)


def corrupt(fields: CaseFields, field: str) -> CaseFields:
    """Change one rubric-bearing field to a different valid value."""
    if field == "laterality":
        flip = {Laterality.LEFT: Laterality.RIGHT, Laterality.RIGHT: Laterality.LEFT,
                Laterality.BILATERAL: Laterality.LEFT}
        return replace(fields, laterality=flip[fields.laterality])
    if field == "surgery":
        other = [s for s in Surgery if s is not fields.surgery][0]
        return replace(fields, surgery=other)
    if field == "nodal_involvement":
        order = list(Nodal)
        return replace(fields, nodal_involvement=order[(order.index(fields.nodal_involvement) + 1) % 4])
    if field == "dose_scheme":
        i = DOSE_CATALOG.index(fields.dose_scheme)
        return replace(fields, dose_scheme=DOSE_CATALOG[(i + 1) % len(DOSE_CATALOG)])
    raise ValueError(f"no rubric-bearing field named {field!r}")
