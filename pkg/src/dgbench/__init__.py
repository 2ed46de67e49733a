"""Domain generalization benchmark harness."""
