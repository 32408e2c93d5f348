"""Versioned JSON bundles and the self-contained HTML rendered from them.

JSON is canonical. The HTML is a pure function of a bundle: the same
bundle always renders to the same bytes, numbers are shown to four
decimals and every rendered number sits in a ``class="num"`` element whose
value is present (at full precision) in the JSON.
"""
from __future__ import annotations

import html
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__

SCHEMA_VERSION = "1.0"
KINDS = ("plan", "fit", "tune", "audit", "dlsi", "simulate")

BUNDLE_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "leakguard bundle",
    "type": "object",
    "required": ["schema_version", "tool_version", "kind", "payload", "config", "plan_hash", "created"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "tool_version": {"type": "string"},
        "kind": {"enum": list(KINDS)},
        "payload": {"type": "object"},
        "config": {"type": "object"},
        "plan_hash": {"type": ["string", "null"], "pattern": "^[0-9a-f]{12}$"},
        "created": {"type": "string"},
    },
}


class ReportError(ValueError):
    pass


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; NaN and infinities become ``null``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return str(obj)


def make_bundle(kind: str, payload: dict, config: dict | None = None, plan_hash: str | None = None,
                created: str | None = None) -> dict:
    if kind not in KINDS:
        raise ReportError(f"unknown bundle kind {kind!r}")
    if created is None:
        created = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "kind": kind,
        "payload": to_jsonable(payload),
        "config": to_jsonable(config or {}),
        "plan_hash": plan_hash,
        "created": created,
    }


def check_bundle(bundle: dict) -> None:
    """Structural check used at load time (the test-suite also runs the full JSON schema)."""
    if not isinstance(bundle, dict):
        raise ReportError("bundle must be a JSON object")
    missing = [k for k in BUNDLE_SCHEMA["required"] if k not in bundle]
    if missing:
        raise ReportError(f"bundle lacks {', '.join(missing)}")
    if bundle["schema_version"] != SCHEMA_VERSION:
        raise ReportError(f"schema version {bundle['schema_version']!r} is not {SCHEMA_VERSION!r}")
    if bundle["kind"] not in KINDS:
        raise ReportError(f"unknown bundle kind {bundle['kind']!r}")


def dumps(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False, ensure_ascii=False) + "\n"


def write_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_bundle(path: str | Path, kind: str | None = None) -> dict:
    b = read_json(path)
    check_bundle(b)
    if kind is not None and b["kind"] != kind:
        raise ReportError(f"{path}: expected a {kind} bundle, found {b['kind']}")
    return b


# -- HTML ---------------------------------------------------------------------

_CSS = """
body{font-family:sans-serif;max-width:60em;margin:2em auto;color:#222}
table{border-collapse:collapse;margin:.5em 0 1.5em}
td,th{border:1px solid #bbb;padding:.2em .6em;text-align:left}
td.num,span.num{font-family:monospace;text-align:right}
.banner{background:#fde8c8;border:1px solid #d08a2b;padding:.5em 1em;margin:1em 0}
.flag{font-weight:bold;color:#a00}
"""


def fmt_num(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, bool):
        return str(x).upper()
    if isinstance(x, int):
        return str(x)
    return f"{x:.4f}"


def _esc(s) -> str:
    return html.escape(str(s), quote=True)


def _num(x, tag="td") -> str:
    if x is None:
        return f"<{tag}>NA</{tag}>"
    return f'<{tag} class="num">{fmt_num(x)}</{tag}>'


def _cell(x) -> str:
    if isinstance(x, bool) or x is None or isinstance(x, str):
        return f"<td>{_esc(fmt_num(x) if not isinstance(x, str) else x)}</td>"
    return _num(x)


def _table(header: list[str], rows: list[list]) -> str:
    out = ["<table>", "<tr>" + "".join(f"<th>{_esc(h)}</th>" for h in header) + "</tr>"]
    for r in rows:
        out.append("<tr>" + "".join(_cell(x) for x in r) + "</tr>")
    out.append("</table>")
    return "\n".join(out)


def _kv_table(d: dict) -> str:
    rows = []
    for k in sorted(d):
        v = d[k]
        if isinstance(v, (dict, list)):
            v = json.dumps(v, sort_keys=True)
        rows.append([k, v])
    return _table(["key", "value"], rows)


def _audit_sections(p: dict) -> list[str]:
    out = []
    ov = p.get("overview", {})
    out.append("<h2>Overview</h2>")
    out.append(_kv_table({k: v for k, v in ov.items() if not isinstance(v, dict)}))

    perm = p["permutation"]
    out.append("<h2>Permutation test</h2>")
    out.append(_table(
        ["metric", "method", "B", "observed", "perm mean", "perm sd", "gap", "p"],
        [[perm["metric"], perm["method"], perm["B"], perm["observed"], perm["perm_mean"],
          perm["perm_sd"], perm["gap"], perm["p_value"]]],
    ))
    if perm.get("message"):
        out.append(f"<p>{_esc(perm['message'])}</p>")

    out.append("<h2>Batch / study association</h2>")
    assoc = p.get("associations", [])
    if not assoc:
        out.append("<p>No batch or study columns were tested.</p>")
    else:
        out.append(_table(
            ["column", "repeat", "chi2", "df", "p", "Cramer's V", "note"],
            [[a["column"], a["repeat"], a["chi2"], a["df"], a["p_value"], a["cramers_v"], a["note"]] for a in assoc],
        ))

    out.append("<h2>Target leakage scan</h2>")
    ts = p.get("target_scan", {})
    uni = ts.get("univariate")
    if uni is None:
        out.append("<p>Univariate scan not run.</p>")
    else:
        out.append(f'<p>Univariate rescaled-AUC scan, threshold <span class="num">{fmt_num(uni["threshold"])}</span>; '
                   f'flagged <span class="num">{uni["n_flagged"]}</span>.</p>')
        out.append(_table(["feature", "score", "flagged"],
                          [[f["name"], f["score"], f["flagged"]] for f in uni["features"]]))
    multi = ts.get("multivariate")
    if multi is not None:
        if multi["available"]:
            out.append(_table(["multivariate statistic", "p", "PCs", "B"],
                              [[multi["statistic"], multi["p_value"], multi["n_pc"], multi["B_perm"]]]))
        else:
            out.append(f"<p>Multivariate scan not available: {_esc(multi['reason'])}</p>")

    out.append("<h2>Near-duplicates</h2>")
    dup = p.get("duplicates")
    if dup is None:
        out.append("<p>Duplicate scan not run.</p>")
    elif not dup["pairs"]:
        out.append("<p>No near-duplicates detected.</p>")
    else:
        out.append(_table(["row a", "row b", "similarity", "crosses train/test"],
                          [[d["row_a"], d["row_b"], d["similarity"],
                            any(c["row_a"] == d["row_a"] and c["row_b"] == d["row_b"] for c in dup["cross_fold_pairs"])]
                           for d in dup["pairs"]]))

    out.append("<h2>Mechanism Risk Assessment</h2>")
    mech = p["mechanisms"]
    out.append(_table(["mechanism", "flagged", "evidence"],
                      [[m, mech[m]["flagged"], mech[m]["evidence"]] for m in mech]))
    return out


def _dlsi_sections(p: dict) -> list[str]:
    out = ["<h2>Delta-LSI</h2>"]
    if p["tier"].startswith("D"):
        out.append('<div class="banner">inference suppressed (unpaired/insufficient repeats)</div>')
    ci_m = p.get("ci_metric") or [None, None]
    ci_l = p.get("ci_lsi") or [None, None]
    out.append(_table(
        ["quantity", "estimate", "ci low", "ci high"],
        [["leaky mean", p["leaky_mean"], None, None],
         ["guarded mean", p["guarded_mean"], None, None],
         ["delta_metric", p["delta_metric"], ci_m[0], ci_m[1]],
         ["delta_lsi", p["delta_lsi"], ci_l[0], ci_l[1]]],
    ))
    out.append(_table(["metric", "R_eff", "paired", "exchangeability", "sign-flip p", "tier"],
                      [[p["metric"], p["R_eff"], p["paired"], p["exchangeability"], p["p_signflip"], p["tier"]]]))
    if p.get("deltas"):
        out.append("<h3>Repeat deltas</h3>")
        out.append(_table(["repeat", "delta"], [[str(i + 1), d] for i, d in enumerate(p["deltas"])]))
    for n in p.get("notes", []):
        out.append(f"<p>{_esc(n)}</p>")
    return out


def _generic_sections(p: dict) -> list[str]:
    out = ["<h2>Payload</h2>"]
    flat = {k: v for k, v in p.items() if not isinstance(v, (dict, list))}
    out.append(_kv_table(flat))
    agg = p.get("aggregate")
    if isinstance(agg, dict):
        out.append("<h3>Aggregate metrics</h3>")
        out.append(_table(["metric", "mean", "sd", "ci low", "ci high", "folds"],
                          [[m, a["mean"], a["sd"], a["ci_lo"], a["ci_hi"], a["n_folds"]] for m, a in agg.items()]))
    cells = p.get("cells")
    if isinstance(cells, list) and cells:
        keys = list(cells[0])
        out.append("<h3>Cells</h3>")
        out.append(_table(keys, [[c[k] for k in keys] for c in cells]))
    return out


def render_html(bundle: dict) -> str:
    """Deterministic single-file HTML for ``bundle``; no external assets."""
    check_bundle(bundle)
    kind = bundle["kind"]
    p = bundle["payload"]
    parts = [
        "<!DOCTYPE html>",
        '<html lang="en"><head><meta charset="utf-8">',
        f"<title>leakguard {kind} report</title>",
        f"<style>{_CSS}</style></head><body>",
        f"<h1>leakguard {_esc(kind)} report</h1>",
        f"<p>tool {_esc(bundle['tool_version'])}, schema {_esc(bundle['schema_version'])}, "
        f"plan {_esc(bundle['plan_hash'] or 'NA')}, created {_esc(bundle['created'])}</p>",
    ]
    if kind == "audit":
        parts += _audit_sections(p)
    elif kind == "dlsi":
        parts += _dlsi_sections(p)
    else:
        parts += _generic_sections(p)
    parts.append("<h2>Configuration</h2>")
    parts.append(_kv_table(bundle["config"]) if bundle["config"] else "<p>(none)</p>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def write_html(bundle: dict, path: str | Path) -> None:
    Path(path).write_text(render_html(bundle), encoding="utf-8")
