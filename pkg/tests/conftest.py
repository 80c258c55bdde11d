import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixture_curation import DECODER_TABLE, fixture_csv_bytes  # noqa: E402

from crashsev.ingest import ColumnSchema, DecodedVehicle, StubDecoder  # noqa: E402


@pytest.fixture(scope="session")
def schema():
    return ColumnSchema.default()


@pytest.fixture(scope="session")
def decoder():
    table = {
        prefix: DecodedVehicle(
            make=entry["make"], model=entry["model"], model_year=entry["model_year"]
        )
        for prefix, entry in DECODER_TABLE.items()
    }
    return StubDecoder(table)


@pytest.fixture(scope="session")
def curation_csv() -> bytes:
    return fixture_csv_bytes()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
