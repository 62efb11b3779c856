"""Placeholder; implemented later in this build."""
