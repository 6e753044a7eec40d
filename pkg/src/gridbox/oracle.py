"""Centralised brute-force evaluator used to check federated answers.

Deliberately shares no evaluation code with the query engine: rows are
flattened to path -> value dicts and Kleene logic is computed numerically
(0 false, 0.5 unknown, 1 true; AND = min, OR = max, NOT = 1 - x).
"""

from __future__ import annotations

from .formal import And, Cmp, Exists, FormalQuery, Not, Or, Ref, referenced_algs

F, U, T = 0.0, 0.5, 1.0


def _patient_row(p) -> dict:
    return {
        "patient.pseudoid": p.pseudoid,
        "patient.age": p.age,
        "patient.sex": p.sex,
        "patient.hrt": p.hrt,
        "patient.site": p.site,
    }


def _image_row(img) -> dict:
    row = {
        "image.gid": str(img.gid),
        "image.view": img.view,
        "image.laterality": img.laterality,
        "image.study_date": img.study_date,
        "image.rows": img.rows,
        "image.cols": img.cols,
        "image.modality": img.modality,
    }
    for name, value in img.derived.items():
        row[f"alg.{name}.value"] = value
    return row


def _episode_row(alias: str, ep) -> dict:
    return {
        f"{alias}.laterality": ep.laterality,
        f"{alias}.diagnosis": ep.diagnosis,
        f"{alias}.therapy_outcome": ep.therapy_outcome,
        f"{alias}.date": ep.date,
        f"{alias}.therapy_end_date": ep.therapy_end_date,
    }


def _cmp(op, a, b) -> float:
    if a is None or b is None:
        return U
    table = {
        "=": a == b,
        "!=": a != b,
        "<": a < b,
        "<=": a <= b,
        ">": a > b,
        ">=": a >= b,
    }
    return T if table[op] else F


def _truth(e, row: dict, episodes: list) -> float:
    if isinstance(e, Cmp):
        rhs = row.get(e.value.path) if isinstance(e.value, Ref) else e.value
        return _cmp(e.op, row.get(e.path), rhs)
    if isinstance(e, And):
        return min(_truth(x, row, episodes) for x in e.items)
    if isinstance(e, Or):
        return max(_truth(x, row, episodes) for x in e.items)
    if isinstance(e, Not):
        return 1.0 - _truth(e.item, row, episodes)
    if isinstance(e, Exists):
        return max([_truth(e.body, {**row, **_episode_row(e.alias, ep)}, episodes) for ep in episodes] or [F])
    raise TypeError(e)


def _fmt(v) -> str:
    if v is None:
        return ""
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def oracle_answer(q: FormalQuery, snapshots) -> dict:
    """gid -> tuple of (field, value) over the union of all site snapshots."""
    patients, images, episodes = {}, {}, {}
    for snap in snapshots:
        patients.update(snap.patients)
        images.update(snap.images)
        for pgid, eps in snap.episodes.items():
            episodes.setdefault(pgid, []).extend(eps)
    out = {}
    if q.target == "PATIENTS":
        cols = ["patient.pseudoid", "patient.age", "patient.sex", "patient.hrt", "patient.site"]
        for gid, p in patients.items():
            row = _patient_row(p)
            if _truth(q.predicate, row, episodes.get(gid, [])) == T:
                out[gid] = tuple((c, _fmt(row[c])) for c in cols)
    else:
        cols = ["image.gid", "image.view", "image.laterality", "image.study_date", "patient.pseudoid", "patient.age"]
        cols += [f"alg.{n}.value" for n in referenced_algs(q.predicate)]
        for gid, img in images.items():
            p = patients.get(img.patient)
            if p is None:
                continue
            row = {**_patient_row(p), **_image_row(img)}
            if _truth(q.predicate, row, episodes.get(img.patient, [])) == T:
                out[gid] = tuple((c, _fmt(row.get(c))) for c in cols)
    return out
