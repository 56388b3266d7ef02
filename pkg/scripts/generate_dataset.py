import os
import sys

# Add the parent directory to the path so we can import our modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.core.config import default_workers
from app.core.errors import KiwicalError
from app.core.synth import write_dataset

DEFAULT_SCENES = {"typical": 10, "overexposed": 10, "glare": 10}


def generate_datasets():
    """
    Generate one synthetic dataset per lighting class under the data directory.
    """
    data_dir = os.getenv("KIWICAL_DATA_DIR", "./data")
    seed = int(os.getenv("KIWICAL_SEED", "0"))
    workers = default_workers()

    print(f"Generating synthetic datasets in {data_dir}...")

    for offset, (lighting, count) in enumerate(DEFAULT_SCENES.items()):
        out_dir = os.path.join(data_dir, lighting)
        if os.path.exists(os.path.join(out_dir, "manifest.json")):
            print(f"  {lighting}: manifest found, skipping.")
            continue

        print(f"  {lighting}: writing {count} scenes...")
        try:
            path = write_dataset(
                out_dir,
                count,
                lighting=lighting,
                seed=seed + offset * 1000,
                name=lighting,
                workers=workers,
            )
            print(f"  Wrote {path}")
        except KiwicalError as e:
            print(f"  Error generating {lighting}: {e}")

    print("Datasets ready.")


if __name__ == "__main__":
    generate_datasets()
