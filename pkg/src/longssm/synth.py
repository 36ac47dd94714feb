"""Deterministic synthetic longitudinal visits with planted long-range facts.

Every visit is a dated sequence of templated notes. A subset of thirteen
eligibility criteria is planted as rare multi-word fact sentences; a late
"Case review" note (pretraining corpora only) restates all thirteen as
Yes/No lines plus a random visit code, so predicting those answer tokens
needs context reaching back to the fact, 1k-12k tokens earlier. Lengths are
log-normal (median 4632, sigma 0.35, i.e. mean ~4924 tokens).

Per-visit randomness comes from ``numpy.random.default_rng([seed, index])``,
so any visit can be regenerated independently of the others.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from longssm.data import Note, NoteType, VisitRecord, aggregate_text, separator

# note counts from MIMIC-III's NOTEEVENTS table, and mean words per note
NOTE_COUNTS = {
    NoteType.NURSING: 506528, NoteType.RADIOLOGY: 338834, NoteType.ECG: 123042,
    NoteType.PHYSICIAN: 92426, NoteType.DISCHARGE_SUMMARY: 47572, NoteType.ECHO: 34064,
    NoteType.RESPIRATORY: 32798, NoteType.NUTRITION: 7971, NoteType.GENERAL: 7710,
    NoteType.REHAB_SERVICES: 5321, NoteType.SOCIAL_WORK: 2294, NoteType.CASE_MANAGEMENT: 939,
    NoteType.PHARMACY: 97, NoteType.CONSULT: 78,
}
NOTE_WORDS = {
    NoteType.NURSING: 241, NoteType.RADIOLOGY: 449, NoteType.ECG: 43, NoteType.PHYSICIAN: 1369,
    NoteType.DISCHARGE_SUMMARY: 2195, NoteType.ECHO: 464, NoteType.RESPIRATORY: 205,
    NoteType.NUTRITION: 602, NoteType.GENERAL: 290, NoteType.REHAB_SERVICES: 622,
    NoteType.SOCIAL_WORK: 446, NoteType.CASE_MANAGEMENT: 260, NoteType.PHARMACY: 512,
    NoteType.CONSULT: 1206,
}


@dataclass(frozen=True)
class Criterion:
    key: str
    display: str
    facts: tuple[str, ...]


CRITERIA: tuple[Criterion, ...] = (
    Criterion("ABDOMINAL", "abdominal surgery", (
        "History of intra-abdominal surgery, status post small bowel resection.",
        "Prior abdominal surgery: laparoscopic colectomy for diverticulitis.")),
    Criterion("ADVANCED-CAD", "advanced coronary disease", (
        "Advanced coronary artery disease, three vessel disease with prior stenting.",
        "Known advanced coronary artery disease on two antianginal agents.")),
    Criterion("ALCOHOL-ABUSE", "alcohol abuse", (
        "Reports heavy alcohol use, drinks a pint of vodka daily.",
        "Ongoing alcohol abuse, last drink the morning of admission.")),
    Criterion("ASP-FOR-MI", "aspirin for infarct prevention", (
        "Takes aspirin daily to prevent myocardial infarction.",
        "On aspirin for primary prevention of myocardial infarction.")),
    Criterion("CREATININE", "elevated creatinine", (
        "Serum creatinine above the upper limit of normal at 2.4.",
        "Creatinine elevated beyond normal range, peaked at 2.1.")),
    Criterion("DIETSUPP-2MOS", "dietary supplement", (
        "Started a dietary supplement, fish oil capsules, within the past two months.",
        "Began taking a vitamin D dietary supplement six weeks ago.")),
    Criterion("DRUG-ABUSE", "drug abuse", (
        "History of intravenous heroin abuse, in a methadone program.",
        "Admits to recent cocaine abuse, smoked crack last week.")),
    Criterion("ENGLISH", "speaks English", (
        "Patient speaks English fluently, no interpreter required.",
        "English speaking, communicates needs without an interpreter.")),
    Criterion("HBA1C", "hemoglobin A1c in range", (
        "Most recent hemoglobin A1c 7.8 percent.",
        "Hemoglobin A1c measured at 8.4 percent last month.")),
    Criterion("KETO-1YR", "recent ketoacidosis", (
        "Hospitalized for diabetic ketoacidosis eight months ago.",
        "Episode of diabetic ketoacidosis within the past year.")),
    Criterion("MAJOR-DIABETES", "major diabetes complication", (
        "Major diabetes complication: biopsy proven diabetic nephropathy.",
        "Diabetic retinopathy requiring laser therapy, a major diabetes complication.")),
    Criterion("MAKES-DECISIONS", "makes own decisions", (
        "Patient is alert and able to make her own medical decisions.",
        "Has capacity and makes his own medical decisions.")),
    Criterion("MI-6MOS", "recent myocardial infarction", (
        "Myocardial infarction within the past six months, treated with stenting.",
        "Suffered a non ST elevation myocardial infarction four months ago.")),
)

SHOT_REGIMES = {"cohort": 89, "code-rare": 5, "code-common": 918}

REVIEW_HEADER = "Case review"
REVIEW_BUDGET = 600  # upper bound on review note length in tokens

SURNAMES = ("Abbott", "Barrera", "Castillo", "Dunlap", "Espinoza", "Fairbanks", "Galloway",
            "Hendricks", "Ingram", "Jablonski", "Kowalczyk", "Lindqvist", "Moriarty", "Nakamura",
            "Okonkwo", "Petrakis", "Quintero", "Rasmussen", "Szabo", "Thibodeaux", "Underhill",
            "Vasquez", "Whitfield", "Xiong", "Yamamoto", "Zielinski")
DOCTORS = ("Dr. Alvarez", "Dr. Brennan", "Dr. Chu", "Dr. Delgado", "Dr. Eriksen", "Dr. Farouk",
           "Dr. Grant", "Dr. Huang", "Dr. Iyer", "Dr. Jensen")
MEDS = ("metoprolol", "lisinopril", "furosemide", "atorvastatin", "heparin", "pantoprazole",
        "vancomycin", "ceftriaxone", "insulin glargine", "warfarin", "levetiracetam",
        "amiodarone", "piperacillin", "famotidine", "haloperidol", "propofol", "fentanyl",
        "norepinephrine", "albuterol", "prednisone", "amlodipine", "hydralazine")
DIAGNOSES = ("pneumonia", "sepsis", "congestive heart failure", "COPD exacerbation",
             "gastrointestinal bleed", "acute kidney injury", "stroke", "pancreatitis",
             "cellulitis", "pulmonary embolism", "urinary tract infection", "respiratory failure")
CODE_ALPHABET = "ABCDEFGHJKLMNPQRSTUVWXYZ23456789"

TEMPLATES = {
    "common": (
        "Pt is a {age} yo {sex} admitted with {dx}.",
        "{Pron} remains on {med1} and {med2}.",
        "HR {hr}, BP {sbp}/{dbp}, RR {rr}, SpO2 {spo2}% on {o2}.",
        "Temp {temp} F, afebrile overnight.",
        "Labs: WBC {wbc}, Hgb {hgb}, Plt {plt}, Na {na}, K {k}, glucose {glu}.",
        "Continue {med1}, monitor closely.",
        "Plan discussed with {doc}.",
        "Family at bedside, updated on plan of care.",
        "{Name} slept in short intervals, pain {pain}/10.",
        "Will reassess at {time}.",
    ),
    NoteType.NURSING: (
        "Neuro: alert and oriented x{ao}, follows commands.",
        "CV: sinus rhythm, HR {hr}, no ectopy noted.",
        "Resp: lungs {lungs} bilaterally, on {o2}.",
        "GI/GU: abdomen soft, foley draining {uo} cc/hr clear yellow urine.",
        "Skin: intact, turned q2h.",
        "Access: {lines} in place, site clean and dry.",
        "Given {med1} at {time} for {sym}.",
        "Mr./Ms. {Name} ambulated in hall with assist x1.",
    ),
    NoteType.RADIOLOGY: (
        "CHEST (PORTABLE AP): {cxr}.",
        "Comparison is made to the prior study from {days} days ago.",
        "The cardiomediastinal silhouette is {cms}.",
        "There is {effusion} pleural effusion.",
        "No pneumothorax is identified.",
        "IMPRESSION: {cxr}.",
        "CT HEAD WITHOUT CONTRAST: no acute intracranial hemorrhage.",
    ),
    NoteType.ECG: (
        "Sinus rhythm at {hr} bpm. Normal axis.",
        "Nonspecific ST-T wave changes. Compared to prior, no significant change.",
        "PR {pr} ms, QRS {qrs} ms, QTc {qtc} ms.",
    ),
    NoteType.PHYSICIAN: (
        "Assessment: {age} yo {sex} with {dx}, hospital day {hd}.",
        "# {dx}: continue {med1}, follow cultures.",
        "# Hypertension: hold {med2} for SBP < 100.",
        "# FEN: repleting lytes, K goal > 4.0.",
        "# Access: {lines}.",
        "# Code status: full code, confirmed with {Name} family.",
        "Exam: {lungs} breath sounds, RRR, no murmurs.",
        "Attending {doc} saw and examined the patient.",
    ),
    NoteType.DISCHARGE_SUMMARY: (
        "Admission Date: [**{y}-{mo}-{d}**]  Discharge Date: [**{y}-{mo}-{d2}**]",
        "Brief Hospital Course: {age} yo {sex} admitted for {dx}.",
        "Discharge Medications: {med1}, {med2}, {med3}.",
        "Discharge Condition: stable, ambulating with assistance.",
        "Followup Instructions: see {doc} in {days} days.",
        "Discharge Disposition: home with services.",
    ),
    NoteType.ECHO: (
        "LEFT VENTRICLE: ejection fraction {ef}%.",
        "Mild mitral regurgitation. Trace tricuspid regurgitation.",
        "The aortic valve leaflets are mildly thickened.",
        "IMPRESSION: LVEF {ef}%, no pericardial effusion.",
    ),
    NoteType.RESPIRATORY: (
        "Pt on {vent}, FiO2 {fio2}%, PEEP {peep}.",
        "Suctioned for {sec} secretions.",
        "ABG {ph}/{pco2}/{po2}.",
        "Plan to wean as tolerated.",
    ),
}
TEMPLATE_FALLBACK = ("common",)


@dataclass
class GenProfile:
    seed: int = 0
    n_visits: int = 1000
    note_weights: Optional[dict] = None
    length_median: float = 4632.0
    length_sigma: float = 0.35
    min_tokens: int = 2000
    words_to_tokens: float = 1.5
    fact_prob: float = 0.5
    gap_min: int = 1000
    gap_max: int = 12000
    recall_window: tuple = (0.75, 1.0)
    include_review: bool = True
    code_length: int = 6
    id_prefix: str = "V"
    criteria_plan: Optional[list] = None   # per-visit list of criterion keys, overrides fact_prob
    split_plan: Optional[list] = None      # per-visit split tag recorded in metadata

    def __post_init__(self):
        if self.note_weights is None:
            self.note_weights = {t.value: c for t, c in NOTE_COUNTS.items()}
        if self.n_visits < 0:
            raise ValueError("n_visits must be non-negative")
        if not 0 <= self.fact_prob <= 1:
            raise ValueError("fact_prob must lie in [0, 1]")
        if self.gap_min >= self.gap_max:
            raise ValueError("gap_min must be below gap_max")
        # the shortest visit must leave room for a review note after the shortest gap
        if self.min_tokens - REVIEW_BUDGET < self.gap_min + 200:
            raise ValueError("infeasible profile: recall position can fall before gap_min tokens")
        for plan in (self.criteria_plan, self.split_plan):
            if plan is not None and len(plan) != self.n_visits:
                raise ValueError("per-visit plans must have n_visits entries")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenProfile":
        d = dict(d)
        if "recall_window" in d:
            d["recall_window"] = tuple(d["recall_window"])
        return cls(**d)


@dataclass
class VisitMeta:
    visit_id: str
    patient_id: str
    length: int
    criteria: dict
    facts: list
    code: str
    code_offset: int
    code_recall_offset: Optional[int]
    review_date: Optional[str]
    split: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _pick(*options):
    return lambda v, r: options[r.integers(len(options))]


# slot name -> draw(visit, rng); per-visit entities stay fixed, readings vary
SLOT_DRAWS = {
    "age": lambda v, r: v.age, "sex": lambda v, r: "F" if v.female else "M",
    "Pron": lambda v, r: "She" if v.female else "He", "Name": lambda v, r: v.name,
    "dx": lambda v, r: v.dx, "med1": lambda v, r: v.meds[0], "med2": lambda v, r: v.meds[1],
    "med3": lambda v, r: v.meds[2], "doc": lambda v, r: v.doc,
    "hr": lambda v, r: v.hr0 + int(r.integers(-8, 9)),
    "sbp": lambda v, r: v.sbp0 + int(r.integers(-10, 11)),
    "dbp": lambda v, r: int(r.integers(50, 90)), "rr": lambda v, r: int(r.integers(12, 28)),
    "spo2": lambda v, r: int(r.integers(88, 101)), "o2": _pick("RA", "2L NC", "4L NC", "face mask"),
    "temp": lambda v, r: f"{r.uniform(97.0, 101.5):.1f}", "wbc": lambda v, r: f"{r.uniform(3, 22):.1f}",
    "hgb": lambda v, r: f"{r.uniform(7, 15):.1f}", "plt": lambda v, r: int(r.integers(60, 450)),
    "na": lambda v, r: int(r.integers(128, 147)), "k": lambda v, r: f"{r.uniform(3.0, 5.6):.1f}",
    "glu": lambda v, r: int(r.integers(70, 320)), "pain": lambda v, r: int(r.integers(0, 11)),
    "time": lambda v, r: f"{int(r.integers(0, 24)):02d}00", "ao": lambda v, r: int(r.integers(1, 4)),
    "lungs": _pick("clear", "coarse", "diminished", "crackles at bases"),
    "uo": lambda v, r: int(r.integers(20, 150)), "lines": _pick("PIV x2", "R IJ CVL", "PICC", "A-line"),
    "sym": _pick("pain", "agitation", "nausea", "fever"),
    "cxr": _pick("low lung volumes with bibasilar atelectasis", "no acute cardiopulmonary process",
                 "right lower lobe opacity concerning for pneumonia", "mild pulmonary vascular congestion"),
    "days": lambda v, r: int(r.integers(1, 30)), "cms": _pick("normal", "enlarged", "stable"),
    "effusion": _pick("no", "a small left", "a small right", "moderate bilateral"),
    "pr": lambda v, r: int(r.integers(120, 220)), "qrs": lambda v, r: int(r.integers(70, 130)),
    "qtc": lambda v, r: int(r.integers(380, 500)), "hd": lambda v, r: int(r.integers(1, 15)),
    "y": lambda v, r: int(r.integers(2100, 2200)), "mo": lambda v, r: int(r.integers(1, 13)),
    "d": lambda v, r: int(r.integers(1, 15)), "d2": lambda v, r: int(r.integers(15, 29)),
    "ef": lambda v, r: v.ef + int(r.integers(-3, 4)),
    "vent": _pick("AC 450x14", "PSV 10/5", "CPAP", "high flow"),
    "fio2": lambda v, r: int(r.integers(30, 80)), "peep": lambda v, r: int(r.integers(5, 12)),
    "sec": _pick("thick white", "thin clear", "tan", "bloody"),
    "ph": lambda v, r: f"{r.uniform(7.2, 7.5):.2f}", "pco2": lambda v, r: int(r.integers(30, 60)),
    "po2": lambda v, r: int(r.integers(60, 200)),
}


class _Slots(dict):
    """Draws only the slots a template actually uses."""

    def __init__(self, visit: "_Visit"):
        super().__init__()
        self.visit = visit

    def __missing__(self, key):
        value = SLOT_DRAWS[key](self.visit, self.visit.rng)
        self[key] = value
        return value


class _Visit:
    """Slot values that stay fixed for one visit."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.name = SURNAMES[rng.integers(len(SURNAMES))]
        self.female = bool(rng.integers(2))
        self.age = int(rng.integers(25, 90))
        self.meds = [MEDS[i] for i in rng.choice(len(MEDS), size=3, replace=False)]
        self.doc = DOCTORS[rng.integers(len(DOCTORS))]
        self.dx = DIAGNOSES[rng.integers(len(DIAGNOSES))]
        self.hr0 = int(rng.integers(60, 110))
        self.sbp0 = int(rng.integers(95, 160))
        self.ef = int(rng.integers(25, 70))

    def slots(self) -> "_Slots":
        return _Slots(self)

    def sentence(self, note_type: NoteType) -> str:
        pool = TEMPLATES.get(note_type)
        if pool is None or self.rng.random() < 0.35:
            pool = TEMPLATES["common"]
        return pool[self.rng.integers(len(pool))].format_map(self.slots())


def _note_sentences(v: _Visit, note_type: NoteType, target: int) -> list[str]:
    out, size = [], 0
    while size < target or not out:
        s = v.sentence(note_type)
        out.append(s)
        size += len(s) + 1
    return out


def _code(rng: np.random.Generator, n: int) -> str:
    return "".join(CODE_ALPHABET[i] for i in rng.integers(len(CODE_ALPHABET), size=n))


def review_text(name: str, present: dict, code: str) -> str:
    lines = [f"{REVIEW_HEADER} for {name}."]
    lines += [f"{c.display}: {'Yes' if present[c.key] else 'No'}." for c in CRITERIA]
    lines.append(f"Visit code: {code}.")
    return "\n".join(lines)


def generate_visit(profile: GenProfile, index: int) -> tuple[VisitRecord, VisitMeta]:
    rng = np.random.default_rng([profile.seed, index])
    v = _Visit(rng)
    visit_id = f"{profile.id_prefix}{profile.seed}-{index:06d}"
    patient_id = f"P{int(rng.integers(10 ** 7)):07d}"
    target = max(profile.min_tokens, int(rng.lognormal(math.log(profile.length_median),
                                                       profile.length_sigma)))
    if profile.criteria_plan is not None:
        chosen = set(profile.criteria_plan[index])
        unknown = chosen - {c.key for c in CRITERIA}
        if unknown:
            raise ValueError(f"unknown criteria in plan: {sorted(unknown)}")
        present = {c.key: c.key in chosen for c in CRITERIA}
    else:
        present = {c.key: bool(rng.random() < profile.fact_prob) for c in CRITERIA}
    code = _code(rng, profile.code_length)
    review = review_text(v.name, present, code) if profile.include_review else None
    review_len = len(separator(NoteType.GENERAL)) + 2 + len(review) if review else 0

    # filler notes in chronological order
    names = list(profile.note_weights)
    w = np.array([profile.note_weights[n] for n in names], dtype=float)
    w /= w.sum()
    notes: list[list] = []  # [note_type, sentences]
    planted = [(c.key, c.facts[rng.integers(len(c.facts))]) for c in CRITERIA if present[c.key]]
    planted.append(("CODE", f"Visit code assigned: {code}."))
    budget = target - review_len - sum(len(x) + 1 for _, x in planted)
    budget = max(budget, profile.gap_min + 300)  # short visits run slightly over target
    used = 0
    while used < budget:
        nt = NoteType.parse(names[rng.choice(len(names), p=w)])
        size = NOTE_WORDS[nt] * profile.words_to_tokens * rng.lognormal(0.0, 0.3)
        size = int(min(max(size, 80), max(80, budget - used)))
        sents = _note_sentences(v, nt, size)
        notes.append([nt, sents])
        used += len(separator(nt)) + 2 + sum(len(s) + 1 for s in sents)

    def boundaries():
        """(note index, sentence index, offset) for every sentence start."""
        out, pos = [], 0
        for i, (nt, sents) in enumerate(notes):
            pos += len(separator(nt)) + 1
            for j, s in enumerate(sents):
                out.append((i, j, pos))
                pos += len(s) + 1
        return out, pos

    bounds, filler_len = boundaries()
    lo, hi = profile.recall_window
    recall_target = int(filler_len * rng.uniform(lo, hi))
    recall_target = min(filler_len, max(recall_target, bounds[0][2] + profile.gap_min + 100))
    # review goes at the first note boundary after the recall target
    note_starts = [0]
    for i, (nt, sents) in enumerate(notes[:-1]):
        note_starts.append(note_starts[-1] + len(separator(nt)) + 2 + sum(len(s) + 1 for s in sents))
    review_after = max(0, max(i for i, s in enumerate(note_starts) if s <= recall_target))
    review_pos = note_starts[review_after + 1] if review_after + 1 < len(notes) else filler_len + 1
    head = bounds[0][2]
    if review_pos - head < profile.gap_min:
        raise ValueError(f"visit {visit_id}: recall position {review_pos} leaves no room for a "
                         f"{profile.gap_min}-token gap")

    inserts = []
    for key, sentence in planted:
        gap = rng.uniform(profile.gap_min, min(profile.gap_max, review_pos - head))
        pos = review_pos - gap
        # last sentence start at or before pos, so the realized gap only grows
        cand = [b for b in bounds if b[2] <= pos and b[2] < review_pos]
        i, j, _ = cand[-1] if cand else bounds[0]
        inserts.append((i, j, key, sentence))
    for i, j, key, sentence in sorted(inserts, key=lambda x: (x[0], x[1]), reverse=True):
        notes[i][1].insert(j, sentence)

    # dates: strictly increasing in layout order
    start = datetime(2100 + int(rng.integers(100)), int(rng.integers(1, 13)), int(rng.integers(1, 28)),
                     int(rng.integers(0, 24)), int(rng.integers(0, 60)))
    layout = [(nt, " ".join(sents) if nt is NoteType.ECG else "\n".join(sents)) for nt, sents in notes]
    review_date = None
    if review is not None:
        layout.insert(review_after + 1, (NoteType.GENERAL, review))
    records, t = [], start
    for k, (nt, text) in enumerate(layout):
        t = t + timedelta(minutes=int(rng.integers(20, 600)))
        records.append(Note(nt, t, text))
        if review is not None and k == review_after + 1:
            review_date = t.isoformat()
    text = aggregate_text(records)

    facts = []
    for key, sentence in planted:
        if key == "CODE":
            continue
        crit = next(c for c in CRITERIA if c.key == key)
        off = text.index(sentence)
        rec = None
        if review is not None:
            rec = text.index(f"\n{crit.display}: ", text.index(REVIEW_HEADER)) + len(crit.display) + 3
        facts.append({"criterion": key, "offset": off, "recall_offset": rec,
                      "gap": None if rec is None else rec - off})
    code_off = text.index(f"Visit code assigned: {code}.") + len("Visit code assigned: ")
    code_rec = None
    if review is not None:
        code_rec = text.index(f"Visit code: {code}.", text.index(REVIEW_HEADER)) + len("Visit code: ")

    order = rng.permutation(len(records))  # emit out of chronological order
    visit = VisitRecord(visit_id, patient_id, [records[k] for k in order])
    split = None if profile.split_plan is None else profile.split_plan[index]
    meta = VisitMeta(visit_id, patient_id, len(text.encode("utf-8")), present, facts, code,
                     code_off, code_rec, review_date, split)
    return visit, meta


def generate(profile: GenProfile) -> Iterator[tuple[VisitRecord, VisitMeta]]:
    """Yield (visit, metadata) for each of ``profile.n_visits`` visits."""
    for i in range(profile.n_visits):
        yield generate_visit(profile, i)


def write_corpus(profile: GenProfile, out_dir) -> tuple[Path, Path]:
    from longssm.data import note_record

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes_path, meta_path = out / "notes.jsonl", out / "metadata.jsonl"
    with open(notes_path, "w", encoding="utf-8") as fn, open(meta_path, "w", encoding="utf-8") as fm:
        for visit, meta in generate(profile):
            for note in visit.notes:
                fn.write(json.dumps(note_record(visit, note), ensure_ascii=False) + "\n")
            fm.write(meta.to_json() + "\n")
    (out / "profile.json").write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n")
    return notes_path, meta_path


def read_metadata(path) -> list[VisitMeta]:
    with open(path, encoding="utf-8") as f:
        return [VisitMeta(**json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# labeled tasks


@dataclass
class LabeledVisit:
    visit: VisitRecord
    labels: dict  # criterion key -> 0/1
    split: str


@dataclass
class LabeledTasks:
    criteria: tuple
    train: list
    dev: list
    test: list

    def shots(self) -> dict:
        return {c: sum(v.labels[c] for v in self.train) for c in self.criteria}


FACT_PATTERN = re.compile("|".join(re.escape(f) for c in CRITERIA for f in c.facts))


def strip_review(visit: VisitRecord, meta: VisitMeta) -> VisitRecord:
    if meta.review_date is None:
        return visit
    keep = [n for n in visit.notes if n.chart_date.isoformat() != meta.review_date]
    return VisitRecord(visit.visit_id, visit.patient_id, keep)


def oracle_labels(visit: VisitRecord) -> dict:
    """Labels recovered by matching fact sentences in the raw note text."""
    found = {c.key: 0 for c in CRITERIA}
    for note in visit.notes:
        for m in FACT_PATTERN.finditer(note.text):
            for c in CRITERIA:
                if m.group(0) in c.facts:
                    found[c.key] = 1
    return found


def label_tasks(corpus: Sequence[tuple[VisitRecord, VisitMeta]], k_criteria: int = 13,
                shots: Optional[int] = None) -> LabeledTasks:
    """Binary labels per criterion from generation metadata.

    Review notes are removed so answers are never stated near the question.
    Visits are assigned to splits by their metadata ``split`` tag (default
    ``test``). When ``shots`` is given, every criterion must have exactly that
    many positive training visits.
    """
    if not 1 <= k_criteria <= len(CRITERIA):
        raise ValueError(f"k_criteria must lie in [1, {len(CRITERIA)}]")
    keys = tuple(c.key for c in CRITERIA[:k_criteria])
    parts = {"train": [], "dev": [], "test": []}
    for visit, meta in corpus:
        labels = {k: int(bool(meta.criteria[k])) for k in keys}
        split = meta.split or "test"
        parts[split].append(LabeledVisit(strip_review(visit, meta), labels, split))
    tasks = LabeledTasks(keys, parts["train"], parts["dev"], parts["test"])
    if shots is not None:
        bad = {k: n for k, n in tasks.shots().items() if n != shots}
        if bad:
            raise ValueError(f"training shot counts differ from {shots}: {bad}")
    return tasks


def cohort_profile(shots: int = 5, n_dev: int = 13, n_test: int = 39, seed: int = 1000,
                   k_criteria: int = 13, test_prob: float = 0.5, **kw) -> GenProfile:
    """Profile for a few-shot cohort benchmark.

    Training visits follow a cyclic design: visit i is positive for criteria
    i, i+1, ..., i+shots-1 (mod k), so every criterion has exactly ``shots``
    positive and ``k - shots`` negative training visits. Dev and test facts
    are independent coin flips with ``test_prob``, balanced per criterion.
    """
    k = k_criteria
    keys = [c.key for c in CRITERIA[:k]]
    if not 1 <= shots <= k:
        raise ValueError("cyclic design needs 1 <= shots <= k_criteria")
    plan, splits = [], []
    for i in range(k):
        plan.append([keys[(i + j) % k] for j in range(shots)])
        splits.append("train")
    rng = np.random.default_rng([seed, 7])
    for split, n in (("dev", n_dev), ("test", n_test)):
        # each criterion positive in exactly round(test_prob * n) visits
        cols = []
        for _ in keys:
            col = np.zeros(n, dtype=bool)
            col[rng.permutation(n)[: int(round(test_prob * n))]] = True
            cols.append(col)
        for r in range(n):
            plan.append([keys[c] for c in range(k) if cols[c][r]])
            splits.append(split)
    kw.setdefault("include_review", False)
    kw.setdefault("id_prefix", "C")
    return GenProfile(seed=seed, n_visits=len(plan), criteria_plan=plan, split_plan=splits, **kw)
