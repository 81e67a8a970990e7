from omegaconf import OmegaConf

from src import utils


def test_print_config_puts_lab_groups_first(tmp_path):
    config = OmegaConf.create({"seed": 3, "analysis": {"tau3": 3}, "mixture": {"side": 5}, "task": "trap"})
    target = tmp_path / "logs" / "config_tree.log"
    utils.print_config(config, filename=str(target))
    text = target.read_text()
    assert text.index("mixture") < text.index("analysis") < text.index("seed") < text.index("task")


def test_extras_honours_the_flags(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    utils.extras(OmegaConf.create({"print_config": False, "ignore_warnings": False}))
    assert not (tmp_path / "config_tree.log").exists()
    utils.extras(OmegaConf.create({"print_config": True, "trainer": {"max_epochs": 1}, "model": {"hidden": 8}}))
    text = (tmp_path / "config_tree.log").read_text()
    assert text.index("model") < text.index("trainer")
