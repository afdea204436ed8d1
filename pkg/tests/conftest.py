import pytest


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from fusenet.data import synth_generate

    out = tmp_path_factory.mktemp("synth")
    synth_generate(out, n_tiles=4, tile_size=16, seed=3)
    return out
