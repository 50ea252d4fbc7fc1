"""On-disk formats: match files, result tables and run manifests.

Match files are JSON Lines. The first line is a header
``{"schema":"threshfit.matches","version":1}``; every following line is one
pair::

    {"id":"p0","pts_a":[[x,y],...],"pts_b":[[x,y],...],"K_a":[[...]],"K_b":[[...]]}

``K_a``/``K_b`` are optional but come together. ``R_gt``/``t_gt`` may carry a
ground-truth relative pose for benchmarking. Numbers are written with
``repr`` precision, so saving a loaded canonical file reproduces it byte for
byte.

Result tables are CSV preceded by one ``# schema: ...`` comment line. Missing
values are written as ``null``. Manifests are sorted ``key=value`` lines.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, MatchSet, RelativePose

__all__ = [
    "MATCH_SCHEMA",
    "MATCH_SCHEMA_VERSION",
    "RESULT_SCHEMA",
    "SUMMARY_SCHEMA",
    "HISTFIT_SCHEMA",
    "MANIFEST_SCHEMA",
    "MatchFileError",
    "MatchPair",
    "MatchFile",
    "ResultRow",
    "CellSummary",
    "load_matches",
    "save_matches",
    "dump_matches",
    "write_table",
    "read_table",
    "write_manifest",
    "read_manifest",
]

MATCH_SCHEMA = "threshfit.matches"
MATCH_SCHEMA_VERSION = 1
RESULT_SCHEMA = "threshfit.results/1"
SUMMARY_SCHEMA = "threshfit.summary/1"
HISTFIT_SCHEMA = "threshfit.histfit/1"
MANIFEST_SCHEMA = "threshfit.manifest/1"
NULL = "null"


class MatchFileError(ValueError):
    """Malformed or invalid match file content.

    ``line`` is the 1-based line number, ``pair_id`` the offending pair.
    """

    def __init__(self, message, line=None, pair_id=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if pair_id is not None:
            where.append(f"pair {pair_id!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.pair_id = pair_id


@dataclass(frozen=True, eq=False)
class MatchPair:
    id: str
    matches: MatchSet
    gt_pose: RelativePose | None = None


@dataclass
class MatchFile:
    pairs: list
    # (pair id, reason) for records dropped in lenient mode
    rejected: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def _matrix(value, shape, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def _parse_pair(rec):
    if not isinstance(rec, dict):
        raise ValueError("record must be an object")
    if "id" not in rec:
        raise ValueError("record has no id")
    pid = str(rec["id"])
    try:
        a = np.asarray(rec["pts_a"], dtype=float).reshape(-1, 2)
        b = np.asarray(rec["pts_b"], dtype=float).reshape(-1, 2)
    except (KeyError, ValueError, TypeError) as exc:
        raise MatchFileError(f"bad point arrays ({exc})", pair_id=pid) from None
    if len(a) != len(b):
        raise MatchFileError(f"pts_a has {len(a)} points but pts_b has {len(b)}", pair_id=pid)
    has_a, has_b = "K_a" in rec, "K_b" in rec
    if has_a != has_b:
        raise MatchFileError("intrinsics must be given for both images or neither", pair_id=pid)
    try:
        Ka = Kb = None
        if has_a:
            Ka = CameraIntrinsics.from_matrix(_matrix(rec["K_a"], (3, 3), "K_a"))
            Kb = CameraIntrinsics.from_matrix(_matrix(rec["K_b"], (3, 3), "K_b"))
        pose = None
        if "R_gt" in rec or "t_gt" in rec:
            pose = RelativePose(_matrix(rec["R_gt"], (3, 3), "R_gt"),
                                _matrix(rec["t_gt"], (3,), "t_gt"))
        ms = MatchSet(a, b, Ka, Kb)
    except (KeyError, ValueError, TypeError) as exc:
        raise MatchFileError(str(exc), pair_id=pid) from None
    return MatchPair(pid, ms, pose)


def load_matches(path, strict=False):
    """Read a match file.

    Lines that are not valid JSON, or a bad header, raise
    :class:`MatchFileError` with the line number. Records that parse but
    violate pair invariants are dropped into ``MatchFile.rejected`` unless
    ``strict`` is set, in which case the first one raises.
    """
    pairs, rejected = [], []
    with open(path, encoding="utf-8") as fh:
        header = None
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MatchFileError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if header is None:
                if not (isinstance(rec, dict) and rec.get("schema") == MATCH_SCHEMA):
                    raise MatchFileError("missing match-file header", line=lineno)
                if rec.get("version") != MATCH_SCHEMA_VERSION:
                    raise MatchFileError(f"unsupported version {rec.get('version')!r}",
                                         line=lineno)
                header = rec
                continue
            try:
                pairs.append(_parse_pair(rec))
            except MatchFileError as exc:
                err = MatchFileError(str(exc).split(": ", 1)[-1], line=lineno,
                                     pair_id=exc.pair_id)
                if strict:
                    raise err from None
                rejected.append((exc.pair_id, str(err)))
            except ValueError as exc:
                raise MatchFileError(str(exc), line=lineno) from None
    if header is None:
        raise MatchFileError("empty match file")
    return MatchFile(pairs, rejected)


def _pair_record(pair):
    m = pair.matches
    rec = {"id": pair.id, "pts_a": m.pts_a.tolist(), "pts_b": m.pts_b.tolist()}
    if m.calibrated:
        rec["K_a"] = m.intrinsics_a.matrix.tolist()
        rec["K_b"] = m.intrinsics_b.matrix.tolist()
    if pair.gt_pose is not None:
        rec["R_gt"] = pair.gt_pose.rotation.tolist()
        rec["t_gt"] = pair.gt_pose.translation.tolist()
    return rec


def dump_matches(match_file):
    """Canonical text of a match file."""
    lines = [json.dumps({"schema": MATCH_SCHEMA, "version": MATCH_SCHEMA_VERSION},
                        separators=(",", ":"))]
    for pair in match_file.pairs:
        lines.append(json.dumps(_pair_record(pair), separators=(",", ":")))
    return "\n".join(lines) + "\n"


def save_matches(match_file, path):
    Path(path).write_text(dump_matches(match_file), encoding="utf-8")


@dataclass
class ResultRow:
    pair_id: str
    method: str
    tau0: float | None = None
    tau_star: float | None = None
    sigma_hat: float | None = None
    converged: bool | None = None
    n_inliers: int | None = None
    rot_err_deg: float | None = None
    trans_err_deg: float | None = None
    runtime_ms: float | None = None
    error: str | None = None

    @property
    def pose_err_deg(self):
        if self.rot_err_deg is None or self.trans_err_deg is None:
            return math.inf
        return max(self.rot_err_deg, self.trans_err_deg)


@dataclass
class CellSummary:
    method: str
    tau0: float
    n_pairs: int
    n_failed: int
    auc5: float | None
    auc10: float | None
    auc20: float | None
    tau_star_median: float | None
    sigma_hat_mean: float | None
    sigma_hat_median: float | None


def _cell(value):
    if value is None:
        return NULL
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return NULL
        return repr(value)
    return str(value)


def write_table(rows, path, schema):
    """Write dataclass rows as CSV with a schema comment line."""
    rows = list(rows)
    cols = [f.name for f in fields(rows[0])] if rows else []
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = asdict(r)
        w.writerow([_cell(d[c]) for c in cols])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_table(path):
    """Read a table written by :func:`write_table`; returns (schema, list of dicts)."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# schema: "):
        raise ValueError(f"{path}: missing schema line")
    schema = text[0][len("# schema: "):]
    rows = list(csv.DictReader(text[1:]))
    return schema, rows


def write_manifest(params, path):
    """Flat ``key=value`` manifest, keys sorted, schema version included."""
    items = dict(params)
    items.setdefault("schema", MANIFEST_SCHEMA)
    lines = [f"{k}={_cell(items[k])}" for k in sorted(items)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out
