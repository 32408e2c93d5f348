from __future__ import annotations

import json
import re
from pathlib import Path

import jsonschema
import pytest

from leakguard import cli
from leakguard.data import write_csv
from leakguard.report import BUNDLE_SCHEMA, fmt_num, make_bundle, read_json, render_html

from conftest import make_dataset

FIXTURES = Path(__file__).parent / "fixtures"
DATA_ARGS = ["--outcome", "outcome", "--positive", "case", "--subject", "subject", "--batch", "batch"]


def run(*argv) -> int:
    return cli.main([str(a) for a in argv] + ["--quiet"])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A CSV plus plan, guarded and leaky fits, an audit and a Delta-LSI bundle."""
    d = tmp_path_factory.mktemp("cli")
    write_csv(make_dataset(p=6, signal=1.5), d / "data.csv")
    data = ["--data", d / "data.csv", *DATA_ARGS]
    assert run("split", *data, "--mode", "subject_grouped", "--v", 5, "--repeats", 3, "--out", d / "plan.json") == 0
    fit = ["fit", *data, "--plan", d / "plan.json", "--learner", "logistic_glm", "--save-predictions"]
    assert run(*fit, "--out", d / "fit.json") == 0
    assert run(*fit, "--leaky", "--out", d / "fit_leaky.json") == 0
    assert run("audit", *data, "--fit", d / "fit.json", "--plan", d / "plan.json", "--B", 40,
               "--out", d / "audit.json") == 0
    assert run("dlsi", "--leaky", d / "fit_leaky.json", "--guarded", d / "fit.json", "--m-boot", 200,
               "--out", d / "dlsi.json") == 0
    return d


def _numbers(obj, out):
    if isinstance(obj, bool) or obj is None:
        return out
    if isinstance(obj, (int, float)):
        out.add(fmt_num(obj))
    elif isinstance(obj, dict):
        for v in obj.values():
            _numbers(v, out)
    elif isinstance(obj, list):
        for v in obj:
            _numbers(v, out)
    return out


def test_schema_is_pinned():
    assert BUNDLE_SCHEMA == json.loads((FIXTURES / "bundle_schema.json").read_text())


@pytest.mark.parametrize("name", ["fit.json", "fit_leaky.json", "audit.json", "dlsi.json"])
def test_bundles_validate(workdir, name):
    jsonschema.validate(read_json(workdir / name), BUNDLE_SCHEMA)


def test_schema_rejects_bad_bundles():
    b = make_bundle("fit", {}, plan_hash="abc")
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(b, BUNDLE_SCHEMA)
    b = make_bundle("fit", {})
    b["extra"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(b, BUNDLE_SCHEMA)


def test_split_writes_five_folds(workdir):
    plan = read_json(workdir / "plan.json")
    assert plan["v"] == 5 and plan["repeats"] == 3
    assert re.fullmatch(r"[0-9a-f]{12}", plan["hash"])


def test_bundles_are_nan_free_and_carry_plan_hash(workdir):
    plan = read_json(workdir / "plan.json")
    for name in ("fit.json", "audit.json", "dlsi.json"):
        text = (workdir / name).read_text()
        assert "NaN" not in text and "Infinity" not in text
        assert json.loads(text)["plan_hash"] == plan["hash"]


def test_audit_html(workdir, tmp_path):
    assert run("report", "--audit", workdir / "audit.json", "--out", tmp_path / "a.html") == 0
    html = (tmp_path / "a.html").read_text()
    assert "Mechanism Risk Assessment" in html
    assert "Permutation test" in html and "Target leakage scan" in html
    assert "http" not in html.replace("http-equiv", "")


def test_html_is_deterministic_and_numbers_trace_to_json(workdir):
    for name in ("audit.json", "dlsi.json", "fit.json"):
        b = read_json(workdir / name)
        html = render_html(b)
        assert html == render_html(json.loads(json.dumps(b)))
        shown = re.findall(r'class="num">([^<]*)<', html)
        assert shown
        assert set(shown) <= _numbers(b, set())


def test_tier_d_banner():
    payload = {"metric": "auc", "leaky_mean": 0.8, "guarded_mean": 0.7, "delta_metric": 0.1,
               "delta_lsi": 0.1, "ci_metric": None, "ci_lsi": None, "R_eff": 2, "paired": False,
               "exchangeability": "iid", "p_signflip": None, "tier": "D_insufficient", "deltas": []}
    html = render_html(make_bundle("dlsi", payload))
    assert "inference suppressed (unpaired/insufficient repeats)" in html


def test_repeated_runs_are_identical(workdir, tmp_path):
    data = ["--data", workdir / "data.csv", *DATA_ARGS]
    for k in (1, 2):
        assert run("split", *data, "--v", 5, "--out", tmp_path / f"p{k}.json") == 0
        assert run("fit", *data, "--plan", tmp_path / f"p{k}.json", "--learner", "logistic_glm",
                   "--out", tmp_path / f"f{k}.json") == 0
    assert (tmp_path / "p1.json").read_text() == (tmp_path / "p2.json").read_text()
    f1, f2 = read_json(tmp_path / "f1.json"), read_json(tmp_path / "f2.json")
    f1.pop("created"), f2.pop("created")
    f1["config"].pop("plan"), f2["config"].pop("plan")
    assert f1 == f2


def test_exit_codes(workdir, tmp_path, monkeypatch, capsys):
    data = ["--data", workdir / "data.csv", *DATA_ARGS]
    assert run("split", *data, "--mode", "no_such_mode", "--out", tmp_path / "x.json") == 2
    assert run("split", "--out", tmp_path / "x.json") == 2
    assert run("fit", *data, "--plan", tmp_path / "missing.json", "--out", tmp_path / "x.json") == 2
    assert run("report", "--bundle", workdir / "data.csv", "--out", tmp_path / "x.html") == 2

    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(cli, "fit_resample", boom)
    assert run("fit", *data, "--plan", workdir / "plan.json", "--out", tmp_path / "x.json") == 1
    assert "solver exploded" in capsys.readouterr().err


def test_stale_plan_exits_with_usage_error(workdir, tmp_path, capsys):
    write_csv(make_dataset(n_subjects=30, p=6), tmp_path / "other.csv")
    rc = run("fit", "--data", tmp_path / "other.csv", *DATA_ARGS, "--plan", workdir / "plan.json",
             "--out", tmp_path / "x.json")
    assert rc == 2
    err = capsys.readouterr().err
    assert read_json(workdir / "plan.json")["hash"] in err


def test_simulate_cli(tmp_path):
    rc = run("simulate", "--mechanisms", "none,peek_norm", "--n", 60, "--p", 4, "--seeds", 1, "--B", 20,
             "--out", tmp_path / "t.csv", "--json", tmp_path / "t.json")
    assert rc == 0
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 3
    jsonschema.validate(read_json(tmp_path / "t.json"), BUNDLE_SCHEMA)


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "leakguard", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("leakguard ")
