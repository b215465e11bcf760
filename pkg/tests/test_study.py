import math

import numpy as np
import pytest

from ivcox.errors import InputError
from ivcox.study import StudyConfig, replicate_seed, run_study, summarize


@pytest.fixture(scope="module")
def tiny():
    return StudyConfig(case=1, replicates=4, methods=("complier", "naive", "kappa", "kappa_v_tr"), B=5)


def test_rows_independent_of_workers(tiny):
    a = run_study(tiny)
    b = run_study(tiny.with_(workers=2))
    assert [r["method"] for r in a] == [r["method"] for r in b]
    for x, y in zip(a, b):
        assert x.get("beta") == y.get("beta") and x.get("se_boot") == y.get("se_boot")


def test_summary_fields(tiny):
    rows = run_study(tiny)
    s = {(r["method"], r["coef"]): r for r in summarize(rows, tiny)}
    assert s["kappa", "d"]["coverage_se"] == "se_analytic"
    assert s["kappa_v_tr", "d"]["coverage_se"] == "se_boot"
    assert s["naive", "d"]["coverage_se"] == "se_model"
    assert s["complier", "d"]["truth"] == -0.5
    k = s["kappa_v_tr", "d"]
    betas = [r["beta"][0] for r in rows if r["method"] == "kappa_v_tr"]
    assert k["mean"] == pytest.approx(np.mean(betas))
    assert k["mc_se"] == pytest.approx(np.std(betas, ddof=1) / 2)


def test_single_replicate_sd_is_nan():
    cfg = StudyConfig(case=1, replicates=1, methods=("naive",), bootstrap_methods=())
    s = summarize(run_study(cfg), cfg)
    assert math.isnan(s[0]["sd"]) and math.isnan(s[0]["mc_se"])


def test_seed_streams_differ():
    assert len({replicate_seed(0, r, k) for r in range(50) for k in range(3)}) == 150
    assert replicate_seed(0, 1) == replicate_seed(0, 1)


def test_config_validation():
    with pytest.raises(InputError):
        StudyConfig(methods=("bogus",))
    with pytest.raises(InputError):
        StudyConfig(replicates=0)
    with pytest.raises(InputError):
        StudyConfig(case=9)
