import pytest

import helpers


@pytest.fixture
def corpus_dirs(tmp_path):
    """(leadsheets_dir, performances_dir) for the three-song synthetic corpus."""
    return helpers.write_corpus(tmp_path)


@pytest.fixture(scope="session")
def corpus_sheets():
    """Parsed lead sheets of the synthetic corpus, keyed by stem."""
    from overpaint.leadsheet import parse_leadsheet

    return {stem: parse_leadsheet(text) for stem, text in helpers.corpus_texts().items()}
