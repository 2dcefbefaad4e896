import pytest

from anomaly_expert import autodiff as ad
from anomaly_expert.features import FeatureBundle
from anomaly_expert.params import ExpertConfig, init_params


@pytest.fixture
def double():
    with ad.precision("double"):
        yield


@pytest.fixture
def small_cfg():
    return ExpertConfig(d_enc=8, d=4, g=4, n_heads=2, seed=3)


def random_bundle(rng, n_crops=2, g=4, d_enc=8, label=0, class_id=0, region=()):
    return FeatureBundle(
        v_final=rng.standard_normal((n_crops, g * g, d_enc)),
        v_levels=rng.standard_normal((4, n_crops, g * g, d_enc)),
        label=label,
        class_id=class_id,
        anomaly_region=region,
        id=f"b{int(rng.integers(1 << 30))}",
    )


@pytest.fixture
def make_bundle():
    return random_bundle


@pytest.fixture
def small_params(small_cfg, double):
    return init_params(small_cfg)


# one line per acceptance criterion, printed after the run regardless of output capture
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
