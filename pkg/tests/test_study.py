import json

import numpy as np

from mdrf import study

TINY = study.StudyConfig(
    n_obs=30, width=4, n_interior=30, n_per_piece=5, step1_iters=4, step2_iters=4,
    checkpoint_every=2, eval_points=500, n_times=2,
)


def test_tiny_study_tables_and_artifacts(tmp_path):
    res = study.run_study([0, 1], TINY)
    assert [s.seed for s in res.seeds] == [0, 1]
    for m in ("full", "no_mechanism"):
        assert np.all(np.isfinite(res.rmse_table(m, "p")))
    assert np.all(np.isnan(res.rmse_table("gpr", "p")))
    assert np.all(np.isfinite(res.rmse_table("gpr", "tau", "data")))
    assert res.coeff_table("zeta").shape == (2,)
    res.write(tmp_path)
    summ = json.loads((tmp_path / "summary.json").read_text())
    assert summ["rmse"]["gpr"]["p"] == [None, None]
    assert (tmp_path / "seed1_trace.csv").read_text().startswith("iter,e_data")
    assert (tmp_path / "seed0_report_region_rmse.csv").exists()


def test_run_seed_is_deterministic():
    a = study.run_seed(3, TINY)
    b = study.run_seed(3, TINY)
    assert a.coeffs == b.coeffs
    assert a.rmse("full", "tau") == b.rmse("full", "tau")
