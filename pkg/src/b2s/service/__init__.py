"""HTTP service wrapping the generation pipeline."""
