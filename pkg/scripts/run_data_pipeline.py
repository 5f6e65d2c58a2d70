#!/usr/bin/env python3
"""Run only the data preparation pipeline."""

from __future__ import annotations

import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).resolve().parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from src.pipelines import run_data_preparation


def main() -> None:
    """Run the data preparation pipeline."""
    print("Starting data preparation pipeline...\n")

    data_outputs = run_data_preparation(regenerate_data=True, persist=True)
    splits = data_outputs["splits"]

    print(f"✓ Oracle manifest: {data_outputs['manifest']}")
    print(f"✓ Frames: {len(data_outputs['frames']):,}")
    if data_outputs["pms_manifest"] is not None:
        print(f"✓ PMS manifest: {data_outputs['pms_manifest']}")
    print(f"✓ Scenes - train: {len(splits['train'])}, validation: {len(splits['validation'])}")
    print(f"✓ Mean RGB: {[round(float(v), 4) for v in data_outputs['color_stats']]}")

    print("\nData pipeline completed successfully.")


if __name__ == "__main__":
    main()
