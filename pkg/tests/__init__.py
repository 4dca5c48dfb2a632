"""Test suite for the nasgs sonar splatting package."""
