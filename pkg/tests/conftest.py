import os
import stat

import pytest
import torch

from sidetune.config import RunConfig
from sidetune.synthetic import make_corpus


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("corpus"), num_classes=2, per_class=16)


@pytest.fixture
def tiny_cfg(corpus, tmp_path):
    """Reduced-width configuration that trains in seconds on CPU."""
    return RunConfig(
        image_root=str(corpus["image_root"]), text_root=str(corpus["text_root"]),
        embeddings=str(corpus["embeddings"]), split_sizes=[24, 4, 4], pretrained="none",
        width_mult=0.25, input_side=64, filters=16, max_epochs=2, batch_size=8,
        out_dir=str(tmp_path / "run"), fc_width=512, cache_features=True, alphas=[0.2, 0.3, 0.5],
    )


@pytest.fixture
def fake_ocr(tmp_path):
    """A tesseract-compatible stand-in: prints a fixed text, or fails / hangs on request."""
    script = tmp_path / "fake-tesseract"
    script.write_text(
        "#!/bin/sh\n"
        'case "$1" in\n'
        "  *fail*) echo 'boom' >&2; exit 1;;\n"
        "  *hang*) sleep 5;;\n"
        "esac\n"
        'echo "MEMORANDUM to: all staff $OMP_THREAD_LIMIT"\n'
    )
    script.chmod(script.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return str(script)


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, "what"):`` records one PASS/FAIL/SKIP line for the summary."""
    import contextlib

    @contextlib.contextmanager
    def _record(number, title):
        lines = request.config._acceptance_lines
        try:
            yield
        except pytest.skip.Exception as exc:
            lines.append(f"SKIP  criterion {number:>2}: {title} ({exc.msg})")
            raise
        except BaseException as exc:
            lines.append(f"FAIL  criterion {number:>2}: {title} ({type(exc).__name__}: {exc})".splitlines()[0])
            raise
        lines.append(f"PASS  criterion {number:>2}: {title}")
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
