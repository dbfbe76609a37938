import pytest

from hspan.dip import DIPConfig
from hspan.hyperkite import HyperKiteConfig
from hspan.pipeline import ExperimentConfig


def make_tiny_config(root, **kw) -> ExperimentConfig:
    """A 2x2-tile toy experiment with small nets; seconds per full run."""
    base = dict(
        toy={"seed": 0, "rows": 2, "cols": 2, "bands": 4, "tile": 16},
        patch_size=16,
        dip=DIPConfig(
            noise_channels=8, n_down=(8, 8), k_down=(3, 3), n_up=(8, 8), k_up=(3, 3),
            n_skip=(2, 2), k_skip=(1, 1), iterations=5,
        ),
        hyperkite=HyperKiteConfig(widths=(4,) * 6 + (-1,), epochs=2, batch_size=2),
        lambda_sweep=[0.0, 0.8],
        output_root=str(root),
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny_config(tmp_path):
    return make_tiny_config(tmp_path / "run")
