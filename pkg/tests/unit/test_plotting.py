from src.experiments.engine import ResultBundle
from src.utils.data_utils import write_table
from src.utils.plotting import SCRIPT_NAME, CurveSpec, emit_plot_data


def test_empty_bundle_writes_nothing(tmp_path):
    bundle = ResultBundle(out_dir=tmp_path, manifest=tmp_path / "manifest.json")
    assert emit_plot_data(bundle, [CurveSpec("c", "curves", "u", "mean")]) == []
    assert not (tmp_path / "plots").exists()


def test_grouped_curves(tmp_path):
    rows = [{"sampler": s, "u": u, "mean": 1.0 / (1 + u)} for s in ("ddim", "ddpm") for u in range(3)]
    bundle = ResultBundle(out_dir=tmp_path, manifest=tmp_path / "manifest.json")
    bundle.tables["curves"] = write_table(tmp_path / "curves.csv", rows)

    curves = [
        CurveSpec("convergence", "curves", "u", "mean", "sampler", logscale_y=True),
        CurveSpec("absent", "other", "u", "mean"),
        CurveSpec("bad_column", "curves", "u", "nope"),
    ]
    written = emit_plot_data(bundle, curves)
    assert [p.name for p in written] == ["convergence_ddim.csv", "convergence_ddpm.csv", SCRIPT_NAME]
    script = written[-1].read_text()
    assert "set logscale y" in script
    assert "sampler=ddpm" in script
    assert written[0].read_text().splitlines()[0] == "u,mean"


def test_ungrouped_curve(tmp_path):
    bundle = ResultBundle(out_dir=tmp_path, manifest=tmp_path / "manifest.json")
    bundle.tables["curves"] = write_table(tmp_path / "curves.csv", [{"kappa": k, "tau2": 10 * k} for k in (1, 2)])
    written = emit_plot_data(bundle, [CurveSpec("tau2", "curves", "kappa", "tau2")])
    assert [p.name for p in written] == ["tau2.csv", SCRIPT_NAME]
