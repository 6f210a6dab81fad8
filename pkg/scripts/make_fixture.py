"""Regenerate the small CSV fixtures under tests/data.

    python scripts/make_fixture.py

Writes checkins.csv (fully labelled) and checkins_masked.csv (10% hidden),
each with its JSON sidecar, from tests/data/fixture.toml.
"""
from pathlib import Path

from latent_hawkes.cli import cmd_mask, cmd_simulate

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"


def main():
    full = cmd_simulate(DATA / "fixture.toml", DATA / "checkins.csv")
    cmd_mask(full, DATA / "checkins_masked.csv", fraction=0.1, seed=0)
    for extra in DATA.glob("*.manifest.json"):
        extra.unlink()  # timing and absolute paths would churn on every run
    print(f"wrote {full} and {DATA / 'checkins_masked.csv'}")


if __name__ == "__main__":
    main()
