"""Record files and state snapshots.

Record files are CSV with the header

    day,vuln_id,n_e,ahl,phl,<type>_total,<type>_neg,...

where ``ahl`` and ``phl`` hold ``;``-separated Hurt levels (empty when there
were no incidents) and an empty ``n_e`` means the incident count was not
recorded.  See ``docs/record_format.md`` for the grammar.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .model import SCHEMA_VERSION, DailyRecord, GlobalState, ModelError, VulnerabilityState

BASE_COLUMNS = ("day", "vuln_id", "n_e", "ahl", "phl")
LIST_SEP = ";"


class RecordParseError(ValueError):
    def __init__(self, row: int, column: Optional[str], reason: str):
        where = f"row {row}" + (f", column {column!r}" if column else "")
        super().__init__(f"{where}: {reason}")
        self.row = row
        self.column = column
        self.reason = reason


class SnapshotError(ValueError):
    pass


def _obs_types_from_header(header: Sequence[str]) -> list:
    if tuple(header[:len(BASE_COLUMNS)]) != BASE_COLUMNS:
        raise RecordParseError(1, None, f"header must start with {','.join(BASE_COLUMNS)}")
    rest = list(header[len(BASE_COLUMNS):])
    if len(rest) % 2:
        raise RecordParseError(1, None, "observation columns must come in _total/_neg pairs")
    types = []
    for tot, neg in zip(rest[::2], rest[1::2]):
        if not (tot.endswith("_total") and neg.endswith("_neg")) or tot[:-6] != neg[:-4]:
            raise RecordParseError(1, None, f"expected <type>_total,<type>_neg, got {tot},{neg}")
        types.append(tot[:-6])
    if len(set(types)) != len(types):
        raise RecordParseError(1, None, "duplicate observation type")
    return types


def _int(value: str, row: int, column: str, allow_empty=False):
    try:
        return int(value)   # int() itself tolerates surrounding whitespace
    except ValueError:
        if allow_empty and not value.strip():
            return None
        raise RecordParseError(row, column, f"not an integer: {value!r}") from None


def _levels(value: str, row: int, column: str) -> tuple:
    if not value or value.isspace():
        return ()
    try:
        return tuple(map(int, value.split(LIST_SEP)))
    except ValueError:
        return tuple(_int(v, row, column) for v in value.split(LIST_SEP))


def parse_records(lines: Iterable[str]) -> tuple[list, list]:
    """Parse record-file text; returns (obs_types, [(day, [DailyRecord])])."""
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        return [], []
    types = _obs_types_from_header([h.strip() for h in header])
    width = len(BASE_COLUMNS) + 2 * len(types)
    batches: list = []
    seen = set()
    last_day = None
    for row_no, row in enumerate(reader, start=2):
        if not row or (not row[0].strip() and all(not c.strip() for c in row)):
            continue
        if len(row) != width:
            raise RecordParseError(row_no, None, f"expected {width} fields, got {len(row)}")
        day = _int(row[0], row_no, "day")
        vid = row[1].strip()
        if not vid:
            raise RecordParseError(row_no, "vuln_id", "empty vulnerability identifier")
        if day < 1:
            raise RecordParseError(row_no, "day", "days are numbered from 1")
        if last_day is not None and day < last_day:
            raise RecordParseError(row_no, "day", f"rows must be sorted by day ({day} after {last_day})")
        if (day, vid) in seen:
            raise RecordParseError(row_no, "vuln_id", f"duplicate record for {vid} on day {day}")
        seen.add((day, vid))
        n_e = _int(row[2], row_no, "n_e", allow_empty=True)
        ahl = _levels(row[3], row_no, "ahl")
        phl = _levels(row[4], row_no, "phl")
        obs = {}
        for t, x in enumerate(types):
            c_tot, c_neg = f"{x}_total", f"{x}_neg"
            tot = _int(row[5 + 2 * t], row_no, c_tot, allow_empty=True)
            neg = _int(row[6 + 2 * t], row_no, c_neg, allow_empty=True)
            if tot is None and neg is None:
                continue
            obs[x] = (tot or 0, neg or 0)
        try:
            rec = DailyRecord(vid, day, n_e, ahl, phl, obs)
        except ModelError as exc:
            raise RecordParseError(row_no, None, str(exc)) from None
        if day != last_day:
            batches.append((day, []))
            last_day = day
        batches[-1][1].append(rec)
    return types, batches


def ingest_records(path) -> list:
    """Per-day batches ``[(day, [DailyRecord, ...]), ...]`` from a record file."""
    with open(path, newline="") as fh:
        return parse_records(fh)[1]


def record_types(path) -> list:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    return [] if header is None else _obs_types_from_header([h.strip() for h in header])


def format_record_rows(records: Iterable[DailyRecord], obs_types: Sequence[str]) -> list:
    rows = [list(BASE_COLUMNS) + [f"{x}_{s}" for x in obs_types for s in ("total", "neg")]]
    for r in records:
        row = [str(r.day), r.vuln_id, "" if r.n_e is None else str(r.n_e),
               LIST_SEP.join(map(str, r.ahl)), LIST_SEP.join(map(str, r.phl))]
        for x in obs_types:
            tot, neg = r.obs.get(x, (0, 0))
            row += [str(tot), str(neg)]
        rows.append(row)
    return rows


def write_records(path, records: Iterable[DailyRecord], obs_types: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(format_record_rows(records, obs_types))


# -- snapshots -----------------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    state: GlobalState
    created_day: int
    meta: Mapping = field(default_factory=dict)   # e.g. the sampler seed


def state_to_dict(state: GlobalState) -> dict:
    return {
        "obs_types": list(state.obs_types),
        "xi": list(state.xi),
        "day": state.day,
        # a list, so the vulnerability order survives key sorting
        "vulns": [
            {
                "id": vid,
                "alpha": list(vs.alpha),
                "gamma_k": vs.gamma_k,
                "gamma_theta": vs.gamma_theta,
                "beta_ab": {x: list(ab) for x, ab in vs.beta_ab.items()},
                "rate_product": None if vs.rate_product is None else list(vs.rate_product),
            }
            for vid, vs in state.vulns.items()
        ],
    }


def state_from_dict(d: Mapping) -> GlobalState:
    vulns = {
        str(v["id"]): VulnerabilityState(
            alpha=tuple(v["alpha"]), gamma_k=v["gamma_k"], gamma_theta=v["gamma_theta"],
            beta_ab={x: tuple(ab) for x, ab in v["beta_ab"].items()},
            rate_product=None if v.get("rate_product") is None else tuple(v["rate_product"]),
        )
        for v in d["vulns"]
    }
    if len(vulns) != len(d["vulns"]):
        raise SnapshotError("duplicate vulnerability identifiers in snapshot")
    return GlobalState(obs_types=tuple(d["obs_types"]), xi=tuple(d["xi"]), vulns=vulns,
                       day=int(d["day"]))


def save_snapshot(state: GlobalState, path, meta: Optional[Mapping] = None) -> None:
    doc = {
        "schema_version": state.schema_version,
        "created_day": state.day,
        "meta": dict(meta or {}),
        "state": state_to_dict(state),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_snapshot(path) -> Snapshot:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"{path}: not valid JSON ({exc})") from None
    version = doc.get("schema_version")
    if not isinstance(version, int):
        raise SnapshotError(f"{path}: missing schema_version")
    if version > SCHEMA_VERSION:
        raise SnapshotError(f"{path}: schema version {version} is newer than the supported "
                            f"version {SCHEMA_VERSION}")
    try:
        state = state_from_dict(doc["state"])
    except (KeyError, TypeError, ModelError) as exc:
        raise SnapshotError(f"{path}: malformed snapshot ({exc!r})") from None
    return Snapshot(state, int(doc.get("created_day", state.day)), doc.get("meta", {}))
