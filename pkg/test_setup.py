from config import load_run_config
from data import class_balance, load_dataset
from setup import create_directories, create_env_file, create_sample_files


def test_workspace_layout(tmp_path):
    create_directories(tmp_path)
    assert (tmp_path / "runs").is_dir()
    assert (tmp_path / "sample_data").is_dir()
    create_env_file(tmp_path)
    assert "LOWBIT_DATA_DIR=" in (tmp_path / ".env.example").read_text()


def test_env_file_is_not_templated_over_existing_env(tmp_path):
    (tmp_path / ".env").write_text("LOWBIT_LOG_LEVEL=DEBUG\n")
    create_env_file(tmp_path)
    assert not (tmp_path / ".env.example").exists()


def test_sample_config_loads_the_sample_dataset(tmp_path):
    config = load_run_config(create_sample_files(tmp_path, n_per_class=2, test_per_class=1))
    train, test = load_dataset(config.dataset)
    assert (len(train), len(test)) == (20, 10)
    assert class_balance(train) == [2] * 10
