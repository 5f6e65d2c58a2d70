#!/usr/bin/env python3
"""Run only the generator training pipeline."""

from __future__ import annotations

import sys
from pathlib import Path
from pprint import pprint

# Add project root to Python path
project_root = Path(__file__).resolve().parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from src.pipelines import run_training_pipeline


def main() -> None:
    """Run the generator training pipeline."""
    print("Starting generator training pipeline...\n")

    training_result = run_training_pipeline(save_model=True)
    config = training_result["config"]

    print(f"✓ Architecture: {config.model.architecture}, loss: {config.loss}")

    print("\nFinal epoch:")
    pprint(training_result["final_epoch"])

    if training_result["result"].validation:
        print("\nValidation losses:")
        pprint(training_result["result"].validation)

    if training_result["model_artifact_path"]:
        print(f"\n✓ Model saved to: {training_result['model_artifact_path'].resolve()}")

    print("\nGenerator training completed successfully.")


if __name__ == "__main__":
    main()
