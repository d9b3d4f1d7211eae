import csv

import pytest

from xreid.ablation import ABLATE_HEADER, Runner, ablate, grid_variants, mean_map, run_grid
from xreid.synthdata import SynthConfig, generate
from xreid.trainer import TrainConfig


@pytest.fixture(scope="module")
def ds():
    return generate(SynthConfig(n_ids=4, clips_per_modality=4, seed=2))


QUICK = TrainConfig(epochs=1, steps_per_epoch=2)


def test_grid_shapes():
    assert [n for n, _ in grid_variants("components")] == ["baseline", "+cpc", "+cpc+mii"]
    rows = grid_variants("toggles")
    assert len(rows) == 8 and rows[0][0] == "none" and rows[-1][0] == "sii+lii+cii"
    assert len({n for n, _ in rows}) == 8
    assert [o["sii_stride"] for _, o in grid_variants("sii_stride")] == [1, 2, 3, 4]
    assert [o["lii_stride"] for _, o in grid_variants("lii_stride")] == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        grid_variants("bogus")


def test_components_grid_csv_and_figure(ds, tmp_path):
    res = ablate(ds, QUICK, tmp_path, grids=("components",), seeds=(1,))
    rows = list(csv.reader(open(tmp_path / "components.csv")))
    assert tuple(rows[0]) == ABLATE_HEADER
    assert len(rows) == 1 + 3 * 2
    assert {(r[0], r[1]) for r in rows[1:]} == {(v, p) for v in ("baseline", "+cpc", "+cpc+mii") for p in ("I2V", "V2I")}
    assert (tmp_path / "components.png").stat().st_size > 0
    assert set(mean_map(res["components"])) == {(r[0], r[1]) for r in rows[1:]}


def test_all_off_toggle_row_equals_cpc_row(ds):
    runner = Runner(ds)
    comp = run_grid(runner, "components", QUICK, seeds=(1,))
    # fresh runner so the equality is not an artifact of the cache
    tog = run_grid(Runner(ds), "toggles", QUICK, seeds=(1,))
    cpc = [r for r in comp if r["variant"] == "+cpc"]
    none = [r for r in tog if r["variant"] == "none"]
    assert [{k: v for k, v in r.items() if k != "variant"} for r in cpc] == \
           [{k: v for k, v in r.items() if k != "variant"} for r in none]


def test_runner_reuses_identical_configs(ds):
    runner = Runner(ds)
    run_grid(runner, "components", QUICK, seeds=(1,))
    run_grid(runner, "toggles", QUICK, seeds=(1,))
    # the toggle grid's "none" and "sii+lii+cii" rows repeat two component rows
    assert runner.n_trained == 3 + 6
