"""
Test package for the physics-guided relighting pipeline.

This package contains unit tests for the image-formation, oracle, PMS and
learning components, and integration tests for the pipelines and the CLI.
"""
