"""Low-rank adapter serving runtime on CPU."""
