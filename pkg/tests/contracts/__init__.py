"""Contract tests for interface specifications."""
