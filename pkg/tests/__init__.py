"""Test package for mcp_bvs."""
