"""Unit tests for the sdcnn package."""
