import numpy as np
import pytest

from shortcut_audit import toy
from shortcut_audit.audio import Waveform
from shortcut_audit.manifest import AudioItem, DatasetManifest

SR = 16000


def tone(freq=440.0, amp=0.5, seconds=1.0, sr=SR):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def half_tone_half_silence(sr=SR):
    x = tone(seconds=1.0, sr=sr)
    x[sr // 2:] = 0.0
    return Waveform(x, sr)


def make_manifest(counts, tmp_path=None, prefix="it"):
    """Manifest with counts (n00, n10, n01, n11) of placeholder items."""
    items = []
    for (cls, split), n in zip(((0, 0), (1, 0), (0, 1), (1, 1)), counts):
        for k in range(n):
            items.append(AudioItem(f"{prefix}{cls}{split}_{k:04d}", f"/nonexistent/{cls}{split}_{k}.wav", cls, split))
    return DatasetManifest(tuple(items))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_small")
    return toy.generate_corpus(toy.CorpusSpec(n_per_cell=20, seed=11), out), out


_ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE_LINES[number] = line
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
