import pytest
import torch

from handprior.hand import build_hand_model


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def hand_model():
    return build_hand_model()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, hand_model):
    """A small mug dataset shared by the model, benchmark and CLI tests."""
    from handprior.datagen import build_dataset

    root = tmp_path_factory.mktemp("data")
    build_dataset("mug", {"train": 3, "test_instance": 1, "test_view": 1}, seed=5, root=root, n_samples=4000,
                  model=hand_model)
    return root


@pytest.fixture(scope="session")
def mug_setup(tiny_dataset, hand_model):
    """(raw scenes, voxel-mean prior, train inputs) for the tiny mug dataset."""
    from handprior.datagen import load_scene, scene_dirs
    from handprior.model import scene_inputs
    from handprior.prior import anchor_codes, voxel_mean_prior

    scenes = [load_scene(d) for d in scene_dirs(tiny_dataset, "mug")]
    train = [s for s in scenes if s.split == "train"]
    shapes = {s.shape_id: s.object_canonical for s in train}
    prior = anchor_codes(voxel_mean_prior([shapes[k] for k in sorted(shapes)]), "mug", seed=0)
    inputs = [scene_inputs(s, prior, hand_model) for s in train]
    return scenes, prior, inputs


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
