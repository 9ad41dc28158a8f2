import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gamerec.data import Dataset

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def toy_dataset() -> Dataset:
    """Small hand-checkable dataset: 4 users, 5 games, 3 social edges."""
    engagements = [
        (1, 10, 120.0),
        (1, 11, 30.0),
        (2, 10, 60.0),
        (2, 12, 45.0),
        (3, 11, 90.0),
        (3, 12, 15.0),
        (3, 13, 500.0),
        (4, 13, 75.0),
        (4, 14, 20.0),
    ]
    social = [(1, 2), (2, 3), (1, 3)]
    catalog = [
        (10, {"action"}, "dev_a", "pub_a"),
        (11, {"action", "rpg"}, "dev_a", "pub_b"),
        (12, {"rpg"}, "dev_b", "pub_a"),
        (13, {"strategy"}, "dev_b", "pub_b"),
        (14, {"strategy"}, "dev_c", "pub_a"),
    ]
    return Dataset.from_rows(engagements, social, catalog)


def random_toy_dataset(rng: np.random.Generator, n_users=12, n_games=8, density=0.4) -> Dataset:
    """Random small dataset for property tests."""
    genres = ["g0", "g1", "g2"]
    catalog = [
        (
            100 + g,
            {genres[rng.integers(len(genres))]},
            f"d{rng.integers(3)}",
            f"p{rng.integers(2)}",
        )
        for g in range(n_games)
    ]
    engagements = []
    for u in range(1, n_users + 1):
        for g in range(n_games):
            if rng.random() < density:
                engagements.append((u, 100 + g, float(rng.integers(1, 500))))
    if not engagements:
        engagements = [(1, 100, 10.0)]
    users = sorted({e[0] for e in engagements})
    social = []
    for _ in range(max(1, n_users // 2)):
        if len(users) < 2:
            break
        a, b = rng.choice(users, size=2, replace=False)
        social.append((int(a), int(b)))
    return Dataset.from_rows(engagements, social, catalog)
