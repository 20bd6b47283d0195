"""Frozen-backbone side-network transfer with efficiency accounting and open-world tracking metrics."""

__version__ = "0.1.0"
