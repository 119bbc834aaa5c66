import sys

import pytest

from minubench.datagen import generate_corpus, genuine_pairs

REFERENCE_SEED = 20240611


@pytest.fixture(scope="session")
def corpus():
    """Masters and impressions of 60 synthetic fingers."""
    return generate_corpus(60, REFERENCE_SEED)


@pytest.fixture(scope="session")
def pairs(corpus):
    return genuine_pairs(corpus[1])


@pytest.fixture(scope="session")
def stub_matcher_script(tmp_path_factory):
    """Write a tiny external matcher that prints whatever its env asks for."""
    d = tmp_path_factory.mktemp("stub")
    script = d / "stub_matcher.py"
    script.write_text(
        "import os, sys\n"
        "mode = os.environ.get('STUB_MODE', 'value')\n"
        "assert len(sys.argv) == 3 and all(os.path.getsize(p) >= 30 for p in sys.argv[1:])\n"
        "if mode == 'fail':\n"
        "    print('boom', file=sys.stderr); sys.exit(4)\n"
        "if mode == 'sleep':\n"
        "    import time; time.sleep(5)\n"
        "print(os.environ.get('STUB_OUTPUT', '0.5'))\n"
    )
    return [sys.executable, str(script)]
