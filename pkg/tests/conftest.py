import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmdiff.config import load_config  # noqa: E402
from mmdiff.data import prepare_dataset  # noqa: E402
from mmdiff.synthetic import generate_synthetic  # noqa: E402

TINY = {
    "model.L_in": 16, "model.L_out": 4, "model.d_model": 16, "model.heads": 2, "model.layers": 1,
    "model.patch_len": 8, "model.stride": 4, "model.text_buckets": 64, "model.lookback": 8,
    "diffusion.K": 20, "diffusion.inference_steps": 5,
    "training.steps": 30, "training.batch_size": 8, "training.val_every": 10, "training.val_windows": 8,
    "synthetic.length": 160, "eval.seeds": [0],
}


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(None, TINY)


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    frame, reports, _ = generate_synthetic(tiny_cfg.synthetic, 0)
    m = tiny_cfg.model
    return prepare_dataset(frame, reports, m.L_in, m.L_out, tiny_cfg.data.split_spec(), m.lookback)


@pytest.fixture(scope="session")
def tiny_fit(tiny_cfg, tiny_data):
    from mmdiff.training import fit

    c = tiny_cfg
    return fit(tiny_data.train, tiny_data.val, c.model, c.diffusion, c.training, c.guidance)


# -- acceptance reporting -------------------------------------------------------------
def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "error"
        detail = f"{detail}; {msg.splitlines()[0]}" if detail else msg.splitlines()[0]
    item.config._criteria[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        title, status, detail = crit[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title}" + (f" ({detail})" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a short human-readable result to the acceptance summary line."""

    def add(text):
        request.node.user_properties.append(("detail", text))

    return add
