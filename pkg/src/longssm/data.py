"""Longitudinal document construction from per-visit clinical notes.

A visit's notes are stably sorted by chart date and joined, each preceded by
a header line ``- - {NoteType} note  - -`` (two spaces before the closing
dashes). Text casing is left untouched. Documents are capped at 16384 tokens.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from longssm.tokenizer import ByteTokenizer

log = logging.getLogger(__name__)

MAX_TOKENS = 16384


class NoteType(Enum):
    NURSING = "Nursing"
    RADIOLOGY = "Radiology"
    ECG = "ECG"
    PHYSICIAN = "Physician"
    DISCHARGE_SUMMARY = "Discharge summary"
    ECHO = "Echo"
    RESPIRATORY = "Respiratory"
    NUTRITION = "Nutrition"
    GENERAL = "General"
    REHAB_SERVICES = "Rehab Services"
    SOCIAL_WORK = "Social Work"
    CASE_MANAGEMENT = "Case Management"
    PHARMACY = "Pharmacy"
    CONSULT = "Consult"

    @classmethod
    def parse(cls, value: "str | NoteType") -> "NoteType":
        if isinstance(value, NoteType):
            return value
        for member in cls:
            if value in (member.value, member.name) or value.lower() == member.value.lower():
                return member
        raise ValueError(f"unknown note type {value!r}")


@dataclass(frozen=True)
class Note:
    note_type: NoteType
    chart_date: datetime
    text: str


@dataclass
class VisitRecord:
    visit_id: str
    patient_id: str
    notes: list[Note]

    def __post_init__(self):
        if not self.notes:
            raise ValueError(f"visit {self.visit_id} has no notes")


@dataclass
class Document:
    visit_id: str
    text: str
    tokens: list[int] = field(default_factory=list)
    truncated: bool = False

    @property
    def token_count(self) -> int:
        return len(self.tokens)


def separator(note_type: NoteType, double_space: bool = True) -> str:
    gap = "  " if double_space else " "
    return f"- - {note_type.value} note{gap}- -"


def aggregate_text(notes: Sequence[Note], double_space: bool = True) -> str:
    if not notes:
        raise ValueError("cannot aggregate a visit without notes")
    ordered = sorted(notes, key=lambda n: n.chart_date)  # sorted() is stable
    return "\n".join(f"{separator(n.note_type, double_space)}\n{n.text}" for n in ordered)


def aggregate_visit(visit: VisitRecord, tokenizer=None, double_space: bool = True) -> Document:
    if not visit.notes:
        raise ValueError(f"visit {visit.visit_id} has no notes")
    tokenizer = tokenizer or ByteTokenizer()
    text = aggregate_text(visit.notes, double_space)
    return Document(visit.visit_id, text, tokenizer.encode(text))


def truncate(doc: Document, max_tokens: int = MAX_TOKENS, tokenizer=None) -> Document:
    """Keep the first ``max_tokens`` tokens. Idempotent."""
    if doc.token_count <= max_tokens:
        return doc
    tokenizer = tokenizer or ByteTokenizer()
    kept = doc.tokens[:max_tokens]
    return Document(doc.visit_id, tokenizer.decode(kept), kept, truncated=True)


def model_tokens(doc: Document, eot_id: int) -> list[int]:
    """Token sequence the model sees for a document: the delimiter, then text."""
    return [eot_id] + list(doc.tokens)


# ---------------------------------------------------------------------------
# statistics


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile (q in (0, 100])."""
    if not values:
        raise ValueError("empty sample")
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class CorpusStats:
    count: int
    mean: float
    median: float
    p99: float
    max: int
    truncated: int
    note_types: dict = field(default_factory=dict)  # name -> (notes, % of visits, mean words)

    @property
    def truncation_rate(self) -> float:
        return self.truncated / self.count

    def rows(self) -> list[tuple[str, str]]:
        out = [("documents", str(self.count)), ("tokens_mean", f"{self.mean:.2f}"),
               ("tokens_median", f"{self.median:g}"), ("tokens_p99", f"{self.p99:g}"),
               ("tokens_max", str(self.max)), ("truncated", str(self.truncated)),
               ("truncation_rate", f"{self.truncation_rate:.4f}")]
        for name, (n, pct, words) in self.note_types.items():
            out.append((f"notes[{name}]", str(n)))
            out.append((f"visit_pct[{name}]", f"{pct:.1f}"))
            out.append((f"mean_words[{name}]", f"{words:.1f}"))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["statistic", "value"])
            w.writerows(self.rows())


def corpus_stats(docs: Sequence[Document], visits: Optional[Sequence[VisitRecord]] = None) -> CorpusStats:
    if not docs:
        raise ValueError("corpus is empty")
    lengths = [d.token_count for d in docs]
    types: dict = {}
    if visits:
        n_notes, n_visits, words = Counter(), Counter(), defaultdict(int)
        for v in visits:
            present = set()
            for note in v.notes:
                n_notes[note.note_type] += 1
                words[note.note_type] += len(note.text.split())
                present.add(note.note_type)
            for t in present:
                n_visits[t] += 1
        for t in NoteType:
            if n_notes[t]:
                types[t.value] = (n_notes[t], 100.0 * n_visits[t] / len(visits), words[t] / n_notes[t])
    return CorpusStats(
        count=len(lengths),
        mean=float(np.mean(lengths)),
        median=float(np.median(lengths)),
        p99=float(nearest_rank(lengths, 99)),
        max=int(max(lengths)),
        truncated=sum(d.truncated for d in docs),
        note_types=types,
    )


def split_heldout(docs: Sequence[Document], heldout_ids: Iterable[str]):
    """Partition by visit id into (train, heldout)."""
    ids = set(heldout_ids)
    train = [d for d in docs if d.visit_id not in ids]
    held = [d for d in docs if d.visit_id in ids]
    if docs and not train:
        log.error("every document is held out; the training split is empty")
    return train, held


# ---------------------------------------------------------------------------
# file formats


def note_record(visit: VisitRecord, note: Note) -> dict:
    return {
        "visit_id": visit.visit_id,
        "patient_id": visit.patient_id,
        "note_type": note.note_type.value,
        "chart_date": note.chart_date.isoformat(),
        "text": note.text,
    }


def write_notes(visits: Iterable[VisitRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for v in visits:
            for note in v.notes:
                f.write(json.dumps(note_record(v, note), ensure_ascii=False) + "\n")
                n += 1
    return n


def read_notes(path) -> list[VisitRecord]:
    """Group newline-delimited note records into visits (first-seen order)."""
    grouped: dict[str, list[Note]] = {}
    patients: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                vid = str(rec["visit_id"])
                note = Note(NoteType.parse(rec["note_type"]),
                            datetime.fromisoformat(rec["chart_date"]), rec["text"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad note record ({exc})") from exc
            grouped.setdefault(vid, []).append(note)
            patients.setdefault(vid, str(rec.get("patient_id", "")))
    return [VisitRecord(vid, patients[vid], notes) for vid, notes in grouped.items()]


def write_packed(docs: Sequence[Document], out_dir, vocab_size: int, eot_id: int,
                 pad_id: Optional[int] = None) -> Path:
    """tokens.bin (little-endian ids, each document preceded by ``eot_id``)
    plus index.csv (visit_id, offset, length, truncated) and meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype("<u2") if vocab_size <= 1 << 16 else np.dtype("<u4")
    offset = 0
    with open(out / "tokens.bin", "wb") as fb, open(out / "index.csv", "w", newline="") as fi:
        w = csv.writer(fi)
        w.writerow(["visit_id", "offset", "length", "truncated"])
        for d in docs:
            arr = np.asarray(model_tokens(d, eot_id), dtype=dtype)
            fb.write(arr.tobytes())
            w.writerow([d.visit_id, offset, len(arr), int(d.truncated)])
            offset += len(arr)
    meta = {"dtype": dtype.str, "vocab_size": vocab_size, "eot_id": eot_id, "pad_id": pad_id,
            "documents": len(docs),
            "tokens": offset}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def read_packed(out_dir) -> tuple[list[str], list[np.ndarray], dict]:
    out = Path(out_dir)
    meta = json.loads((out / "meta.json").read_text())
    flat = np.fromfile(out / "tokens.bin", dtype=np.dtype(meta["dtype"]))
    ids, seqs = [], []
    with open(out / "index.csv", newline="") as f:
        for row in csv.DictReader(f):
            s, n = int(row["offset"]), int(row["length"])
            ids.append(row["visit_id"])
            seqs.append(flat[s:s + n].astype(np.int64))
    return ids, seqs, meta
