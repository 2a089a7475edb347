import numpy as np
import pytest

from orthospot.dataset import make_synthetic, write_wav


@pytest.fixture(scope="session")
def small_split():
    """4 keywords x 10 speakers x 2 clips; 6/2/2 speakers."""
    return make_synthetic(4, 10, 2, seed=11)


def _tone(seconds=0.5, freq=440.0, amp=0.3):
    t = np.arange(int(16000 * seconds)) / 16000
    return amp * np.sin(2 * np.pi * freq * t)


@pytest.fixture
def gscd_root(tmp_path):
    """Tiny GSCD-shaped tree: 3 words, speakers with known utterance counts."""
    root = tmp_path / "gscd"
    layout = {
        # speaker: {word: n_files}
        "aaaa1111": {"yes": 4, "no": 4, "happy": 4},  # 12 utterances
        "bbbb2222": {"yes": 4, "no": 4, "happy": 3},  # 11
        "cccc3333": {"yes": 5, "no": 5, "happy": 2},  # 12
        "dddd4444": {"yes": 4, "no": 4, "happy": 4},  # 12
        "eeee5555": {"yes": 5, "no": 5},               # 10, below the threshold
    }
    for speaker, words in layout.items():
        for word, n in words.items():
            (root / word).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                write_wav(root / word / f"{speaker}_nohash_{i}.wav", _tone(freq=200.0 + 50 * i))
    (root / "_background_noise_").mkdir()
    write_wav(root / "_background_noise_" / "white_noise.wav", _tone())
    return root


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: SKIPPED (not run)")
